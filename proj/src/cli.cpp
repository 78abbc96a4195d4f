#include "cassensing/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cassensing/cascade.hpp"
#include "cassensing/experiments.hpp"
#include "cassensing/plotting.hpp"
#include "cassensing/rng.hpp"

namespace cas::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const std::set<std::string> kDataKeys{
    "data.height",    "data.width",      "data.extent",     "data.configs",    "data.snapshots",
    "data.test_configs", "data.cx_min",  "data.cx_max",     "data.cy_min",     "data.cy_max",
    "data.radius_min", "data.radius_max", "data.wavelength_per_diameter", "data.amp_large",
    "data.amp_small", "data.k_small",    "data.seed"};
const std::set<std::string> kTrainKeys{"train.learning_rate", "train.beta1",  "train.beta2", "train.epsilon",
                                       "train.batch_size",    "train.epochs", "train.seed"};
const std::set<std::string> kFaeKeys{"fae.fourier_features", "fae.fourier_scale", "fae.encoder_width",
                                     "fae.encoder_layers",   "fae.latent_dim",    "fae.decoder_width",
                                     "fae.decoder_layers",   "fae.encoder_ratio", "fae.beta",
                                     "fae.max_decoder_points", "fae.validation_snapshots"};
const std::set<std::string> kCdmKeys{"cdm.r_train",        "cdm.ensemble_size", "cdm.widths",
                                     "cdm.blocks_per_level", "cdm.time_embed_dim", "cdm.max_groups",
                                     "cdm.steps",          "cdm.beta_min",      "cdm.beta_max",
                                     "cdm.normalization_masks"};
const std::set<std::string> kGuidanceKeys{"guidance.sigma_c2", "guidance.mode", "guidance.through_network"};

std::set<std::string> keys(std::initializer_list<const std::set<std::string>*> groups,
                           std::initializer_list<const char*> extra = {}) {
  std::set<std::string> out;
  for (const auto* g : groups) {
    out.insert(g->begin(), g->end());
  }
  for (const char* k : extra) {
    out.insert(k);
  }
  return out;
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void note(const std::string& line) { std::cerr << line << std::endl; }

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw FormatError("cannot write " + path.string());
  }
  return out;
}

// Accepts either the file itself or a directory holding it (possibly one
// level down, as laid out by train-cdm).
fs::path resolve(const fs::path& p, const std::string& file, const std::string& subdir = "") {
  if (fs::is_directory(p)) {
    if (fs::exists(p / file)) {
      return p / file;
    }
    if (!subdir.empty() && fs::exists(p / subdir / file)) {
      return p / subdir / file;
    }
  }
  return p;
}

Dataset load_data(const Config& c) {
  const fs::path p = c.require_string("data");
  const fs::path dir = fs::exists(p / "dataset.json") ? p : p / "dataset";
  return load_dataset(dir);
}

Fae load_fae_from(const Config& c) {
  const fs::path p = resolve(c.require_string("fae"), "fae.json");
  if (!fs::exists(p)) {
    throw FormatError("missing checkpoint: no autoencoder at " + p.string());
  }
  return load_fae(p);
}

CascadeBundle load_bundle_from(const Config& c) {
  const fs::path p = c.require_string("bundle");
  const fs::path manifest = resolve(p, "cascade.json", "bundle");
  if (!fs::exists(manifest) || fs::is_directory(manifest)) {
    throw FormatError("missing checkpoint: no cascade bundle at " + p.string());
  }
  return load_bundle(manifest.parent_path());
}

double rms_valid(const FieldSnapshot& s) {
  double acc = 0.0;
  std::size_t n = 0;
  const auto m = static_cast<std::size_t>(s.channels);
  for (std::size_t i = 0; i < s.points(); ++i) {
    if (s.valid[i]) {
      for (std::size_t k = 0; k < m; ++k) {
        acc += static_cast<double>(s.values[i * m + k]) * s.values[i * m + k];
        ++n;
      }
    }
  }
  return n ? std::sqrt(acc / static_cast<double>(n)) : 0.0;
}

double max_abs_valid(const FieldSnapshot& s) {
  double v = 0.0;
  const auto m = static_cast<std::size_t>(s.channels);
  for (std::size_t i = 0; i < s.points(); ++i) {
    if (s.valid[i]) {
      for (std::size_t k = 0; k < m; ++k) {
        v = std::max(v, std::abs(static_cast<double>(s.values[i * m + k])));
      }
    }
  }
  return v;
}

void write_kde_outputs(RunDirectory& run, const std::vector<RatioSummary>& summaries) {
  std::vector<PlotSeries> curves;
  for (const auto& s : summaries) {
    const std::string name = kde_file_name(s.ratio);
    write_kde(run.path(name), s.kde);
    run.add_output(name);
    curves.push_back({s.kde.x, s.kde.density});
  }
  write_summary(run.path("summary.csv"), summaries);
  run.add_output("summary.csv");
  write_line_plot_ppm(run.path("plots/kde.ppm"), curves);
  run.add_output("plots/kde.ppm");
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_gen_data(const Config& c, RunDirectory& run) {
  c.check_keys(kDataKeys);
  const WakeDatasetSpec spec = wake_spec_from_config(c);
  run.add_seed("data.seed", spec.seed);
  const auto t0 = Clock::now();
  const Dataset data = generate_wake_dataset(spec);
  save_dataset(data, run.path("dataset"));
  run.add_timing("generate", seconds_since(t0));
  run.add_output("dataset");

  auto out = open_csv(run.path("metrics.csv"));
  out << "id,config_id,split,valid_points,rms\n";
  for (const auto& item : data.items) {
    out << item.id << "," << item.config_id << "," << (item.is_test ? "test" : "train") << ","
        << item.snapshot.valid_count() << "," << format_double(rms_valid(item.snapshot)) << "\n";
  }
  run.add_output("metrics.csv");

  const auto train = data.train_indices();
  const auto test = data.test_indices();
  if (!train.empty()) {
    write_field_ppm(run.path("plots/train_example.ppm"), data.items[train.front()].snapshot);
    run.add_output("plots/train_example.ppm");
  }
  if (!test.empty()) {
    write_field_ppm(run.path("plots/test_example.ppm"), data.items[test.front()].snapshot);
    run.add_output("plots/test_example.ppm");
  }
  run.add_info("snapshots", {{"train", train.size()}, {"test", test.size()}});
  note("wrote " + std::to_string(data.items.size()) + " snapshots to " + run.path("dataset").string());
}

void cmd_train_fae(const Config& c, RunDirectory& run) {
  c.check_keys(keys({&kFaeKeys, &kTrainKeys}, {"data"}));
  const Dataset data = load_data(c);
  const FaeArchitecture arch = fae_architecture_from_config(c, data.grid().extent());
  const FaeTrainConfig tc = fae_train_config_from_config(c);
  run.add_seed("train.seed", tc.train.seed);

  Fae model(arch, tc.train.seed);
  const auto train = data.train_indices();
  const auto test = data.test_indices();
  const auto t0 = Clock::now();
  const FaeTrainResult result = train_fae(model, data, train, test, tc, [](int epoch, double loss, double val) {
    note("epoch " + std::to_string(epoch) + " loss " + format_double(loss) + " validation_rmse " +
         format_double(val));
  });
  run.add_timing("train", seconds_since(t0));

  save_fae(model, run.path("fae.json"), json{{"dataset", c.require_string("data")}});
  run.add_output("fae.json");
  run.add_output("fae.bin");

  auto out = open_csv(run.path("metrics.csv"));
  out << "epoch,loss,validation_rmse\n";
  std::vector<double> epochs;
  for (std::size_t e = 0; e < result.history.epoch_loss.size(); ++e) {
    const double val = e < result.validation_rmse.size() ? result.validation_rmse[e] : NAN;
    out << e << "," << format_double(result.history.epoch_loss[e]) << "," << format_double(val) << "\n";
    epochs.push_back(static_cast<double>(e));
  }
  run.add_output("metrics.csv");
  write_line_plot_ppm(run.path("plots/loss.ppm"), {{epochs, result.history.epoch_loss}, {epochs, result.validation_rmse}});
  run.add_output("plots/loss.ppm");
}

void cmd_train_cdm(const Config& c, RunDirectory& run) {
  c.check_keys(keys({&kCdmKeys, &kTrainKeys, &kGuidanceKeys}, {"data", "fae"}));
  const Dataset data = load_data(c);
  const Fae fae = load_fae_from(c);
  const CascadeTrainConfig tc = cascade_train_config_from_config(c);
  run.add_seed("train.seed", tc.train.seed);

  nn::TrainHistory history;
  const auto t0 = Clock::now();
  DiffusionModel model = mask_cascade_train(data, data.train_indices(), fae, tc, &history, [](int epoch, double loss) {
    note("epoch " + std::to_string(epoch) + " loss " + format_double(loss));
  });
  run.add_timing("train", seconds_since(t0));

  CascadeBundle bundle{fae, std::move(model), tc.cascade};
  save_bundle(bundle, run.path("bundle"), json{{"dataset", c.require_string("data")}});
  run.add_output("bundle");
  run.add_info("residual_scale", bundle.diffusion.residual_scale);

  auto out = open_csv(run.path("metrics.csv"));
  out << "epoch,loss\n";
  std::vector<double> epochs;
  for (std::size_t e = 0; e < history.epoch_loss.size(); ++e) {
    out << e << "," << format_double(history.epoch_loss[e]) << "\n";
    epochs.push_back(static_cast<double>(e));
  }
  run.add_output("metrics.csv");
  write_line_plot_ppm(run.path("plots/loss.ppm"), {{epochs, history.epoch_loss}});
  run.add_output("plots/loss.ppm");
}

void cmd_reconstruct(const Config& c, RunDirectory& run) {
  c.check_keys(keys({&kGuidanceKeys}, {"bundle", "data", "item", "ratio", "seed", "sample_seed", "samples"}));
  const CascadeBundle bundle = load_bundle_from(c);
  const Dataset data = load_data(c);
  const std::size_t item = find_item(data, c.get_string("item", ""));
  const FieldSnapshot& truth = data.items[item].snapshot;
  const double ratio = c.get_double("ratio", bundle.config.r_train);
  const std::uint64_t seed = c.get_u64("seed", 0);
  const std::uint64_t sample_seed = c.get_u64("sample_seed", derive_seed(seed, {0x73616d70}));
  const int samples = static_cast<int>(c.get_int("samples", 1));
  const GuidanceConfig guidance = guidance_from_config(c, bundle.config.guidance);
  run.add_seed("seed", seed);
  run.add_seed("sample_seed", sample_seed);

  const auto t0 = Clock::now();
  const SensorMask mask = random_mask(truth.grid, truth.valid, ratio, seed);
  const SparseObservation obs = apply_mask(truth, mask);
  const EnsembleResult ens = ensemble_reconstruct(obs, truth.grid, truth.valid, bundle.fae, bundle.diffusion,
                                                  guidance, samples, sample_seed, &truth);
  run.add_timing("reconstruct", seconds_since(t0));

  const ReconstructionResult& first = ens.samples.front();
  save_snapshot(truth, run.path("fields/truth"));
  save_snapshot(first.principal, run.path("fields/principal"));
  save_snapshot(first.residual, run.path("fields/residual"));
  save_snapshot(first.full, run.path("fields/full"));
  for (const char* f : {"fields/truth", "fields/principal", "fields/residual", "fields/full"}) {
    run.add_output(f);
  }
  if (samples > 1) {
    save_snapshot(ens.mean, run.path("fields/mean"));
    run.add_output("fields/mean");
  }

  auto out = open_csv(run.path("metrics.csv"));
  out << "sample,sample_seed,ratio,sensors,rmse,principal_rmse,observed_abs_residual\n";
  for (std::size_t k = 0; k < ens.samples.size(); ++k) {
    const auto& r = ens.samples[k];
    out << k << "," << r.seed << "," << format_double(ratio) << "," << obs.size() << ","
        << format_double(r.rmse.value_or(NAN)) << "," << format_double(r.principal_rmse.value_or(NAN)) << ","
        << format_double(r.observed_mean_abs()) << "\n";
  }
  run.add_output("metrics.csv");

  const double limit = max_abs_valid(truth);
  write_field_ppm(run.path("plots/truth.ppm"), truth, 0, 6, limit);
  write_field_ppm(run.path("plots/principal.ppm"), first.principal, 0, 6, limit);
  write_field_ppm(run.path("plots/full.ppm"), first.full, 0, 6, limit);
  write_field_ppm(run.path("plots/residual.ppm"), first.residual);
  for (const char* f : {"plots/truth.ppm", "plots/principal.ppm", "plots/full.ppm", "plots/residual.ppm"}) {
    run.add_output(f);
  }
  run.add_info("item", data.items[item].id);
}

void cmd_sweep(const Config& c, RunDirectory& run) {
  c.check_keys(keys({&kGuidanceKeys}, {"bundle", "data", "sweep.ratios", "sweep.masks_per_ratio",
                                       "sweep.samples_per_mask", "sweep.items", "sweep.seed", "sweep.baseline"}));
  const CascadeBundle bundle = load_bundle_from(c);
  const Dataset data = load_data(c);

  SweepConfig sc;
  sc.ratios = c.get_doubles("sweep.ratios", sc.ratios);
  sc.masks_per_ratio = static_cast<int>(c.get_int("sweep.masks_per_ratio", sc.masks_per_ratio));
  sc.samples_per_mask = static_cast<int>(c.get_int("sweep.samples_per_mask", sc.samples_per_mask));
  sc.seed = c.get_u64("sweep.seed", sc.seed);
  sc.baseline = c.get_bool("sweep.baseline", sc.baseline);
  sc.guidance = guidance_from_config(c, bundle.config.guidance);
  const auto test = data.test_indices();
  const auto n_items = static_cast<std::size_t>(c.get_int("sweep.items", 1));
  if (n_items < 1 || n_items > test.size()) {
    throw UsageError("sweep.items must be between 1 and the number of test snapshots (" +
                     std::to_string(test.size()) + ")");
  }
  // Evenly spaced over the test split, so several items cover several configurations.
  for (std::size_t i = 0; i < n_items; ++i) {
    sc.items.push_back(test[i * test.size() / n_items]);
  }
  run.add_seed("sweep.seed", sc.seed);

  const auto t0 = Clock::now();
  const SweepResult result = sparsity_sweep(bundle, data, sc, [](const SweepRow& r) {
    note("ratio " + format_double(r.ratio) + " item " + r.item + " sample " + std::to_string(r.sample_seed) +
         " rmse " + format_double(r.rmse));
  });
  run.add_timing("sweep", seconds_since(t0));

  write_sweep_metrics(run.path("metrics.csv"), result.rows);
  run.add_output("metrics.csv");
  write_kde_outputs(run, result.summaries);

  std::vector<double> x, mean, principal, baseline;
  for (const auto& s : result.summaries) {
    x.push_back(std::log10(s.ratio));
    mean.push_back(s.rmse.mean);
    principal.push_back(s.principal_rmse_mean);
    baseline.push_back(s.baseline_rmse_mean);
  }
  std::vector<PlotSeries> trend{{x, mean}, {x, principal}};
  if (sc.baseline) {
    trend.push_back({x, baseline});
  }
  write_line_plot_ppm(run.path("plots/rmse_vs_ratio.ppm"), trend);
  run.add_output("plots/rmse_vs_ratio.ppm");
}

void cmd_eval_fae(const Config& c, RunDirectory& run) {
  c.check_keys({"fae", "data", "eval.ratios", "eval.masks", "eval.item", "eval.seed"});
  const Fae fae = load_fae_from(c);
  const Dataset data = load_data(c);
  FaeEvalConfig ec;
  ec.ratios = c.get_doubles("eval.ratios", ec.ratios);
  ec.masks = static_cast<int>(c.get_int("eval.masks", ec.masks));
  ec.item = find_item(data, c.get_string("eval.item", ""));
  ec.seed = c.get_u64("eval.seed", ec.seed);
  run.add_seed("eval.seed", ec.seed);

  const auto t0 = Clock::now();
  const FaeEvalResult result = evaluate_fae(fae, data, ec);
  run.add_timing("evaluate", seconds_since(t0));

  write_fae_eval_metrics(run.path("metrics.csv"), result.rows);
  run.add_output("metrics.csv");
  write_kde_outputs(run, result.summaries);
  run.add_info("item", data.items[ec.item].id);
}

void cmd_export_latents(const Config& c, RunDirectory& run) {
  c.check_keys({"fae", "data", "export.split"});
  const Fae fae = load_fae_from(c);
  const Dataset data = load_data(c);
  const std::string split = c.get_string("export.split", "all");
  std::vector<std::size_t> items;
  if (split == "all") {
    for (std::size_t i = 0; i < data.items.size(); ++i) {
      items.push_back(i);
    }
  } else if (split == "train" || split == "test") {
    items = data.split_indices(split == "test");
  } else {
    throw UsageError("export.split must be all, train or test");
  }

  const auto t0 = Clock::now();
  const std::vector<LatentRow> rows = export_latents(fae, data, items);
  run.add_timing("export", seconds_since(t0));
  write_latents(run.path("latents.csv"), rows);
  run.add_output("latents.csv");

  auto out = open_csv(run.path("metrics.csv"));
  out << "id,split,norm\n";
  for (std::size_t k = 0; k < rows.size(); ++k) {
    double sq = 0.0;
    for (double v : rows[k].z.values) {
      sq += v * v;
    }
    out << rows[k].id << "," << (data.items[items[k]].is_test ? "test" : "train") << ","
        << format_double(std::sqrt(sq)) << "\n";
  }
  run.add_output("metrics.csv");
}

struct Subcommand {
  const char* name;
  const char* help;
  std::function<void(const Config&, RunDirectory&)> fn;
  // Dedicated flags available on this subcommand; --seed maps to seed_key.
  bool data = false, fae = false, bundle = false, ratio = false;
  const char* seed_key = nullptr;
};

struct Parsed {
  std::string config_file;
  std::vector<std::string> sets;
  std::string out;
  std::string data, fae, bundle;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  CLI::Option* data_opt = nullptr;
  CLI::Option* fae_opt = nullptr;
  CLI::Option* bundle_opt = nullptr;
  CLI::Option* ratio_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
};

}  // namespace

int run(int argc, char** argv) {
  const std::vector<Subcommand> commands{
      {"gen-data", "Generate a synthetic wake dataset", cmd_gen_data, false, false, false, false, "data.seed"},
      {"train-fae", "Train the functional autoencoder", cmd_train_fae, true, false, false, false, "train.seed"},
      {"train-cdm", "Train the conditional diffusion model on autoencoder residuals", cmd_train_cdm, true, true,
       false, false, "train.seed"},
      {"reconstruct", "Reconstruct one snapshot from a random sparse mask", cmd_reconstruct, true, false, true, true,
       "seed"},
      {"sweep", "Sparsity sweep of the full cascade", cmd_sweep, true, false, true, false, "sweep.seed"},
      {"eval-fae", "Autoencoder-only RMSE over random masks", cmd_eval_fae, true, true, false, false, "eval.seed"},
      {"export-latents", "Write latent codes of dataset snapshots", cmd_export_latents, true, true, false, false,
       nullptr},
  };

  CLI::App app{"Sparse field reconstruction with a functional autoencoder and a conditional diffusion model",
               "cassense"};
  app.require_subcommand(1);
  app.set_version_flag("--version", git_describe());

  std::vector<Parsed> parsed(commands.size());
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < commands.size(); ++i) {
    const auto& cmd = commands[i];
    auto& p = parsed[i];
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("-c,--config", p.config_file, "Configuration file (key = value lines)")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", p.sets, "Override one setting, key=value (repeatable)")->take_all();
    sub->add_option("-o,--out", p.out, "Run directory")->required();
    if (cmd.data) {
      p.data_opt = sub->add_option("--data", p.data, "Dataset directory (setting: data)");
    }
    if (cmd.fae) {
      p.fae_opt = sub->add_option("--fae", p.fae, "Autoencoder checkpoint or run directory (setting: fae)");
    }
    if (cmd.bundle) {
      p.bundle_opt = sub->add_option("--bundle", p.bundle, "Cascade bundle or train-cdm run directory (setting: bundle)");
    }
    if (cmd.ratio) {
      p.ratio_opt = sub->add_option("--ratio", p.ratio, "Fraction of valid points observed (setting: ratio)");
    }
    if (cmd.seed_key != nullptr) {
      p.seed_opt = sub->add_option("--seed", p.seed, std::string("Seed (setting: ") + cmd.seed_key + ")");
    }
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  for (std::size_t i = 0; i < commands.size(); ++i) {
    if (!subs[i]->parsed()) {
      continue;
    }
    const auto& cmd = commands[i];
    const auto& p = parsed[i];
    try {
      Config config;
      if (!p.config_file.empty()) {
        config = Config::load(p.config_file);
      }
      for (const auto& s : p.sets) {
        config.set_assignment(s);
      }
      if (p.data_opt != nullptr && p.data_opt->count() > 0) {
        config.set("data", p.data);
      }
      if (p.fae_opt != nullptr && p.fae_opt->count() > 0) {
        config.set("fae", p.fae);
      }
      if (p.bundle_opt != nullptr && p.bundle_opt->count() > 0) {
        config.set("bundle", p.bundle);
      }
      if (p.ratio_opt != nullptr && p.ratio_opt->count() > 0) {
        config.set("ratio", format_double(p.ratio));
      }
      if (p.seed_opt != nullptr && p.seed_opt->count() > 0) {
        config.set(cmd.seed_key, std::to_string(p.seed));
      }
      const auto t0 = Clock::now();
      RunDirectory run(p.out, cmd.name, config);
      cmd.fn(config, run);
      run.add_timing("total", seconds_since(t0));
      run.finalize();
      return 0;
    } catch (const UsageError& e) {
      std::cerr << "cassense " << cmd.name << ": " << e.what() << "\n" << subs[i]->help();
      return 1;
    } catch (const ParameterError& e) {
      std::cerr << "cassense " << cmd.name << ": invalid setting: " << e.what() << "\n";
      return 1;
    } catch (const std::exception& e) {
      std::cerr << "cassense " << cmd.name << ": error: " << e.what() << "\n";
      return 2;
    }
  }
  return 1;
}

}  // namespace cas::cli
