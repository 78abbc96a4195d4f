#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

#include "cassensing/error.hpp"
#include "cassensing/fae.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cas;

namespace {

FaeArchitecture tiny_arch() {
  FaeArchitecture a;
  a.fourier_features = 3;
  a.fourier_scale = 1.5;
  a.encoder_width = 8;
  a.encoder_hidden_layers = 2;
  a.latent_dim = 4;
  a.decoder_width = 8;
  a.decoder_hidden_layers = 2;
  a.extent = {0.0, 0.0, 2.0, 1.0};
  return a;
}

// Plain-loop re-implementation of the forward pass, reading the parameters
// by name.
struct Reference {
  std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> p;

  template <class M>
  explicit Reference(const M& model) {
    for (const auto& r : nn::param_refs(model)) {
      p[r.name] = {r.shape, std::vector<double>(r.data.begin(), r.data.end())};
    }
  }

  std::vector<double> fourier(const std::string& prefix, double x, double y) const {
    const auto& [shape, b] = p.at(prefix + "B");
    const int nf = shape[0];
    std::vector<double> out(static_cast<std::size_t>(2 * nf + 2));
    for (int j = 0; j < nf; ++j) {
      const double a = 2.0 * std::numbers::pi * (b[static_cast<std::size_t>(2 * j)] * x + b[static_cast<std::size_t>(2 * j + 1)] * y);
      out[static_cast<std::size_t>(j)] = std::cos(a);
      out[static_cast<std::size_t>(nf + j)] = std::sin(a);
    }
    out[static_cast<std::size_t>(2 * nf)] = x;
    out[static_cast<std::size_t>(2 * nf + 1)] = y;
    return out;
  }

  std::vector<double> linear(const std::string& prefix, const std::vector<double>& h, bool act = false) const {
    const auto& [shape, w] = p.at(prefix + "weight");
    const auto& bias = p.at(prefix + "bias").second;
    std::vector<double> out(static_cast<std::size_t>(shape[0]));
    for (int o = 0; o < shape[0]; ++o) {
      double s = bias[static_cast<std::size_t>(o)];
      for (int i = 0; i < shape[1]; ++i) {
        s += w[static_cast<std::size_t>(o * shape[1] + i)] * h[static_cast<std::size_t>(i)];
      }
      out[static_cast<std::size_t>(o)] = act ? 0.5 * s * (1.0 + std::erf(s / std::numbers::sqrt2)) : s;
    }
    return out;
  }

  std::vector<double> mlp(const std::string& prefix, int layers, std::vector<double> h) const {
    for (int l = 0; l < layers; ++l) {
      h = linear(prefix + "layer" + std::to_string(l) + ".", h, l + 1 < layers);
    }
    return h;
  }

  std::vector<double> encode(const FaeArchitecture& a, const SparseObservation& obs) const {
    std::vector<double> pooled;
    for (std::size_t q = 0; q < obs.size(); ++q) {
      const double ux = (obs.coords[q][0] - a.extent.x0) / (a.extent.x1 - a.extent.x0);
      const double uy = (obs.coords[q][1] - a.extent.y0) / (a.extent.y1 - a.extent.y0);
      std::vector<double> f = fourier("encoder.fourier.", ux, uy);
      f.push_back(obs.values[q]);
      const std::vector<double> h = mlp("encoder.kappa.", a.encoder_hidden_layers + 1, f);
      if (pooled.empty()) {
        pooled.assign(h.size(), 0.0);
      }
      for (std::size_t k = 0; k < h.size(); ++k) {
        pooled[k] += h[k] / static_cast<double>(obs.size());
      }
    }
    return linear("encoder.rho.", pooled);
  }

  double decode(const FaeArchitecture& a, const std::vector<double>& z, Coord c) const {
    const double ux = (c[0] - a.extent.x0) / (a.extent.x1 - a.extent.x0);
    const double uy = (c[1] - a.extent.y0) / (a.extent.y1 - a.extent.y0);
    std::vector<double> in = z;
    const auto f = fourier("decoder.fourier.", ux, uy);
    in.insert(in.end(), f.begin(), f.end());
    return mlp("decoder.gamma.", a.decoder_hidden_layers + 1, in)[0];
  }
};

}  // namespace

TEST_SUITE("fae") {
  TEST_CASE("single point encodes to rho(kappa(point))") {
    const FaeArchitecture a = tiny_arch();
    FunctionalAutoencoder<double> m(a, 1);
    SparseObservation obs;
    obs.coords = {{0.4, 0.3}};
    obs.values = {0.8f};
    const LatentVector z = m.encoder().encode(obs);
    const Reference ref(m);
    const auto expect = ref.encode(a, obs);
    REQUIRE(z.dim() == expect.size());
    for (std::size_t k = 0; k < z.dim(); ++k) {
      CHECK(z.values[k] == doctest::Approx(expect[k]).epsilon(1e-12));
    }
  }

  TEST_CASE("encoder permutation invariance is exact") {
    const FaeArchitecture a = tiny_arch();
    const Fae m(a, 2);
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      SparseObservation obs;
      const int n = 3 + static_cast<int>(rng.below(40));
      for (int i = 0; i < n; ++i) {
        obs.coords.push_back({rng.uniform(0.0, 2.0), rng.uniform(0.0, 1.0)});
        obs.values.push_back(static_cast<float>(rng.normal()));
      }
      const LatentVector z = m.encoder().encode(obs);
      std::vector<std::size_t> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      rng.partial_shuffle(perm, perm.size());
      SparseObservation shuffled;
      for (std::size_t i : perm) {
        shuffled.coords.push_back(obs.coords[i]);
        shuffled.values.push_back(obs.values[i]);
      }
      CHECK(m.encoder().encode(shuffled).values == z.values);
    }
  }

  TEST_CASE("duplicating every point leaves the latent code unchanged") {
    const FaeArchitecture a = tiny_arch();
    const Fae m(a, 4);
    Rng rng(5);
    SparseObservation obs;
    for (int i = 0; i < 17; ++i) {
      obs.coords.push_back({rng.uniform(0.0, 2.0), rng.uniform(0.0, 1.0)});
      obs.values.push_back(static_cast<float>(rng.normal()));
    }
    SparseObservation twice = obs;
    twice.coords.insert(twice.coords.end(), obs.coords.begin(), obs.coords.end());
    twice.values.insert(twice.values.end(), obs.values.begin(), obs.values.end());
    const auto z1 = m.encoder().encode(obs).values;
    const auto z2 = m.encoder().encode(twice).values;
    double diff = 0.0, norm = 0.0;
    for (std::size_t k = 0; k < z1.size(); ++k) {
      diff += (z1[k] - z2[k]) * (z1[k] - z2[k]);
      norm += z1[k] * z1[k];
    }
    CHECK(std::sqrt(diff / norm) <= 1e-6);
  }

  TEST_CASE("decoder is pointwise") {
    const FaeArchitecture a = tiny_arch();
    const Fae m(a, 6);
    const LatentVector z{{0.3, -0.2, 0.5, 1.1}};
    const Coord p{0.2, 0.9}, q{1.7, 0.1};
    const std::vector<Coord> both{p, q};
    const auto joint = m.decoder().decode(z, both);
    CHECK(joint[0] == m.decoder().decode(z, std::vector<Coord>{p})[0]);
    CHECK(joint[1] == m.decoder().decode(z, std::vector<Coord>{q})[0]);
    const auto rep = m.decoder().decode(z, std::vector<Coord>(5, p));
    for (double v : rep) {
      CHECK(v == joint[0]);
    }
  }

  TEST_CASE("refined mesh decode agrees at shared points") {
    const FaeArchitecture a = tiny_arch();
    const Fae m(a, 7);
    const LatentVector z{{-0.4, 0.1, 0.9, 0.2}};
    const DomainGrid coarse(5, 9, a.extent);
    const DomainGrid fine(9, 17, a.extent);
    const auto vc = m.decoder().decode(z, coarse.coords());
    const auto vf = m.decoder().decode(z, fine.coords());
    for (int r = 0; r < 5; ++r) {
      for (int c = 0; c < 9; ++c) {
        CHECK(vc[static_cast<std::size_t>(r * 9 + c)] == vf[static_cast<std::size_t>(2 * r * 17 + 2 * c)]);
      }
    }
  }

  TEST_CASE("loss matches a straight-line re-implementation") {
    const FaeArchitecture a = tiny_arch();
    FunctionalAutoencoder<double> m(a, 8);
    auto s = testing::random_snapshot(4, 5, 1, 9);
    s.grid = DomainGrid(4, 5, a.extent);
    const ComplementSplit split = complement_split(s, 0.5, 10);
    RegularizedLossConfig cfg;
    cfg.beta = 0.05;
    const Reference ref(m);
    const auto z = ref.encode(a, split.encoder);
    double sq = 0.0;
    for (std::size_t q = 0; q < split.decoder.size(); ++q) {
      const double e = ref.decode(a, z, split.decoder.coords[q]) - split.decoder.values[q];
      sq += e * e;
    }
    double z2 = 0.0;
    for (double v : z) {
      z2 += v * v;
    }
    const double expect = 0.5 * sq / static_cast<double>(split.decoder.size()) + cfg.beta * z2;
    CHECK(fae_loss(m, split, cfg) == doctest::Approx(expect).epsilon(1e-10));
  }

  TEST_CASE("loss term isolation") {
    const FaeArchitecture a = tiny_arch();
    FunctionalAutoencoder<double> m(a, 11);
    auto s = testing::random_snapshot(3, 3, 1, 12);
    s.grid = DomainGrid(3, 3, a.extent);
    const ComplementSplit split = complement_split(s, 0.5, 1);
    // Make the targets equal to the current predictions.
    const LatentVector z = m.encoder().encode(split.encoder);
    const auto pred = m.decoder().decode(z, split.decoder.coords);
    ComplementSplit exact = split;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      exact.decoder.values[i] = static_cast<float>(pred[i]);
    }
    double z2 = 0.0;
    for (double v : z.values) {
      z2 += v * v;
    }
    RegularizedLossConfig none;
    none.beta = 0.0;
    CHECK(fae_loss(m, exact, none) < 1e-14);
    RegularizedLossConfig reg;
    reg.beta = 0.3;
    CHECK(fae_loss(m, exact, reg) == doctest::Approx(0.3 * z2).epsilon(1e-9));
  }

  TEST_CASE("loss gradient matches finite differences on a 5-point snapshot") {
    const FaeArchitecture a = tiny_arch();
    FunctionalAutoencoder<double> m(a, 13);
    const DomainGrid grid(2, 3, a.extent);
    std::vector<float> v{0.3f, -0.7f, 1.1f, 0.0f, 0.4f, -0.2f};
    std::vector<std::uint8_t> valid{1, 1, 1, 0, 1, 1};
    const FieldSnapshot s = make_snapshot(grid, 1, v, valid);
    const ComplementSplit split = complement_split(s, 0.4, 2);
    RegularizedLossConfig cfg;
    cfg.beta = 0.1;
    auto grad = nn::zeros_like(m);
    fae_loss(m, split, cfg, &grad);
    CHECK(testing::param_grad_error(m, grad, [&] { return fae_loss(m, split, cfg); }) < 1e-3);
  }

  TEST_CASE("reconstruct_principal zeroes invalid points and is deterministic") {
    const FaeArchitecture a = tiny_arch();
    const Fae m(a, 14);
    auto s = testing::random_snapshot(6, 8, 1, 15, false);
    s.grid = DomainGrid(6, 8, a.extent);
    const SparseObservation obs = apply_mask(s, random_mask(s.grid, s.valid, 0.3, 1));
    const FieldSnapshot p1 = reconstruct_principal(m, obs, s.grid, s.valid);
    const FieldSnapshot p2 = reconstruct_principal(m, obs, s.grid, s.valid);
    CHECK(p1.values == p2.values);
    for (std::size_t i = 0; i < s.points(); ++i) {
      if (!s.valid[i]) {
        CHECK(p1.values[i] == 0.0f);
      }
    }
  }

  TEST_CASE("training memorizes a constant field") {
    FaeArchitecture a = tiny_arch();
    a.encoder_width = 16;
    a.decoder_width = 16;
    const DomainGrid grid(8, 8, a.extent);
    Dataset ds;
    DatasetItem item;
    item.id = "const";
    item.snapshot = make_snapshot(grid, 1, std::vector<float>(64, 0.7f), std::vector<std::uint8_t>(64, 1));
    ds.items.push_back(item);
    Fae m(a, 3);
    FaeTrainConfig cfg;
    cfg.loss.beta = 0.0;
    cfg.train.learning_rate = 1e-2;
    cfg.train.batch_size = 1;
    cfg.train.epochs = 400;
    const std::vector<std::size_t> items{0};
    const FaeTrainResult r = train_fae(m, ds, items, items, cfg);
    REQUIRE(r.validation_rmse.size() == 400);
    CHECK(r.validation_rmse.back() < 0.7 * 1e-2);
  }

  TEST_CASE("training is reproducible and checkpoints round trip") {
    WakeDatasetSpec spec;
    spec.height = 8;
    spec.width = 16;
    spec.configs = 3;
    spec.snapshots_per_config = 2;
    spec.test_configs = 1;
    const Dataset ds = generate_wake_dataset(spec);
    FaeArchitecture a = tiny_arch();
    a.extent = spec.extent;
    FaeTrainConfig cfg;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 2;
    const auto train = ds.train_indices();
    const auto test = ds.test_indices();
    Fae m1(a, 5), m2(a, 5);
    const auto r1 = train_fae(m1, ds, train, test, cfg);
    const auto r2 = train_fae(m2, ds, train, test, cfg);
    CHECK(r1.history.epoch_loss == r2.history.epoch_loss);
    CHECK(nn::param_checksum(m1) == nn::param_checksum(m2));

    testing::TempDir dir("fae");
    save_fae(m1, dir / "fae.json");
    const Fae back = load_fae(dir / "fae.json");
    CHECK(nn::param_checksum(back) == nn::param_checksum(m1));
    CHECK(back.architecture().latent_dim == a.latent_dim);
    CHECK(back.architecture().extent == a.extent);
    CHECK(testing::read_file(dir / "fae.bin").size() == nn::param_count(m1, false) * sizeof(float));

    const auto latents = export_latents(m1, ds, train);
    CHECK(latents.size() == train.size());
    for (const auto& row : latents) {
      CHECK(row.z.dim() == static_cast<std::size_t>(a.latent_dim));
    }
  }

  TEST_CASE("identical snapshots give identical latents") {
    const FaeArchitecture a = tiny_arch();
    const Fae m(a, 16);
    auto s = testing::random_snapshot(5, 5, 1, 1);
    s.grid = DomainGrid(5, 5, a.extent);
    Dataset ds;
    for (int k = 0; k < 3; ++k) {
      DatasetItem it;
      it.id = "s" + std::to_string(k);
      it.snapshot = s;
      ds.items.push_back(it);
    }
    const std::vector<std::size_t> items{0, 1, 2};
    const auto rows = export_latents(m, ds, items);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].z.values == rows[1].z.values);
    CHECK(rows[1].z.values == rows[2].z.values);
  }

  TEST_CASE("architecture validation") {
    FaeArchitecture a = tiny_arch();
    a.latent_dim = 0;
    CHECK_THROWS_AS(a.validate(), ParameterError);
  }
}
