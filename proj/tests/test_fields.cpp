#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "cassensing/error.hpp"
#include "cassensing/fields.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using namespace cas;

TEST_SUITE("fields") {
  TEST_CASE("mask count on an all-valid 10x10 grid") {
    const DomainGrid grid(10, 10);
    const std::vector<std::uint8_t> valid(100, 1);
    for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
      CHECK(random_mask(grid, valid, 0.5, seed).indices.size() == 50);
    }
  }

  TEST_CASE("ratio one selects every valid point") {
    const auto s = testing::random_snapshot(6, 7, 1, 3, false);
    const SensorMask m = random_mask(s.grid, s.valid, 1.0, 5);
    CHECK(m.indices == s.valid_indices());
  }

  TEST_CASE("tiny ratio keeps at least one sensor") {
    const DomainGrid grid(16, 16);
    const std::vector<std::uint8_t> valid(256, 1);
    // round(0.005 * 256) = round(1.28) = 1
    CHECK(mask_count(0.005, 256) == 1);
    CHECK(random_mask(grid, valid, 0.005, 0).indices.size() == 1);
    CHECK(mask_count(0.001, 256) == 1);
  }

  TEST_CASE("masks only pick valid points, sorted and unique") {
    const auto s = testing::random_snapshot(12, 9, 1, 7, false);
    const SensorMask m = random_mask(s.grid, s.valid, 0.3, 11);
    CHECK(std::is_sorted(m.indices.begin(), m.indices.end()));
    CHECK(std::adjacent_find(m.indices.begin(), m.indices.end()) == m.indices.end());
    for (std::size_t i : m.indices) {
      CHECK(s.valid[i] == 1);
    }
  }

  TEST_CASE("mask determinism and seed sensitivity") {
    const DomainGrid grid(16, 16);
    const std::vector<std::uint8_t> valid(256, 1);
    CHECK(random_mask(grid, valid, 0.5, 42).indices == random_mask(grid, valid, 0.5, 42).indices);
    std::set<std::vector<std::size_t>> seen;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      seen.insert(random_mask(grid, valid, 0.5, seed).indices);
    }
    CHECK(seen.size() == 100);
  }

  TEST_CASE("bad ratios are rejected") {
    const DomainGrid grid(4, 4);
    const std::vector<std::uint8_t> valid(16, 1);
    CHECK_THROWS_AS(random_mask(grid, valid, 0.0, 0), ParameterError);
    CHECK_THROWS_AS(random_mask(grid, valid, 1.5, 0), ParameterError);
    const std::vector<std::uint8_t> none(16, 0);
    CHECK_THROWS_AS(random_mask(grid, none, 0.5, 0), EmptyDomainError);
  }

  TEST_CASE("full mask observation equals the field") {
    const auto s = testing::random_snapshot(5, 8, 2, 9, false);
    const SparseObservation obs = apply_mask(s, full_mask(s));
    const auto idx = s.valid_indices();
    REQUIRE(obs.size() == idx.size());
    for (std::size_t p = 0; p < idx.size(); ++p) {
      CHECK(obs.coords[p] == s.grid.coord(idx[p]));
      for (std::size_t k = 0; k < 2; ++k) {
        CHECK(obs.values[p * 2 + k] == s.values[idx[p] * 2 + k]);
      }
    }
  }

  TEST_CASE("apply_mask matches an element-wise gather") {
    const auto s = testing::random_snapshot(9, 11, 1, 21, false);
    const SensorMask m = random_mask(s.grid, s.valid, 0.2, 4);
    const SparseObservation obs = apply_mask(s, m);
    REQUIRE(obs.values.size() == m.indices.size());
    for (std::size_t p = 0; p < m.indices.size(); ++p) {
      const std::size_t i = m.indices[p];
      const double x = 0.0 + static_cast<double>(i % 11) * 1.0 / 10.0;
      const double y = 0.0 + static_cast<double>(i / 11) * 1.0 / 8.0;
      CHECK(obs.coords[p][0] == doctest::Approx(x).epsilon(1e-15));
      CHECK(obs.coords[p][1] == doctest::Approx(y).epsilon(1e-15));
      CHECK(obs.values[p] == s.values[i]);
    }
  }

  TEST_CASE("singleton mask") {
    const auto s = testing::random_snapshot(4, 4, 1, 2);
    SensorMask m;
    m.indices = {5};
    const SparseObservation obs = apply_mask(s, m);
    REQUIRE(obs.size() == 1);
    CHECK(obs.values[0] == s.values[5]);
  }

  TEST_CASE("complement split is a partition") {
    const auto s = testing::random_snapshot(10, 10, 1, 1);
    const ComplementSplit half = complement_split(s, 0.5, 8);
    CHECK(half.encoder.size() == 50);
    CHECK(half.decoder.size() == 50);
    for (double r : {0.1, 0.37, 0.5, 0.9}) {
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto t = testing::random_snapshot(7, 9, 1, seed, false);
        const ComplementSplit sp = complement_split(t, r, seed);
        std::vector<std::size_t> all = sp.encoder.mask.indices;
        all.insert(all.end(), sp.decoder.mask.indices.begin(), sp.decoder.mask.indices.end());
        std::sort(all.begin(), all.end());
        CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
        CHECK(all == t.valid_indices());
        CHECK(sp.encoder.size() == mask_count(r, t.valid_count()));
      }
    }
    const ComplementSplit again = complement_split(s, 0.5, 8);
    CHECK(again.encoder.mask.indices == half.encoder.mask.indices);
    CHECK_THROWS_AS(complement_split(s, 0.0, 1), ParameterError);
    CHECK_THROWS_AS(complement_split(s, 1.0, 1), ParameterError);
  }

  TEST_CASE("wake: solid points are zero and invalid") {
    SyntheticWakeConfig cfg;
    cfg.cx = 0.5;
    cfg.cy = 0.5;
    cfg.radius = 0.1;
    cfg.seed = 3;
    const DomainGrid grid(32, 64, {0.0, 0.0, 2.0, 1.0});
    const FieldSnapshot s = generate_wake(cfg, grid);
    std::size_t inside = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const Coord c = grid.coord(i);
      if (std::hypot(c[0] - cfg.cx, c[1] - cfg.cy) < cfg.radius) {
        ++inside;
        CHECK(s.valid[i] == 0);
        CHECK(s.values[i] == 0.0f);
      }
    }
    CHECK(inside > 0);
  }

  TEST_CASE("wake: no small-scale amplitude means the field is its large-scale part") {
    SyntheticWakeConfig cfg;
    cfg.amp_small = 0.0;
    cfg.seed = 12;
    const DomainGrid grid(16, 32, {0.0, 0.0, 2.0, 1.0});
    const FieldSnapshot s = generate_wake(cfg, grid);
    const WakeComponents wc = wake_components(cfg, grid);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      CHECK(wc.small[i] == 0.0);
      CHECK(s.values[i] == static_cast<float>(wc.large[i]));
    }
  }

  TEST_CASE("wake: phase jitter changes the field") {
    SyntheticWakeConfig a;
    a.seed = 1;
    SyntheticWakeConfig b = a;
    b.seed = 2;
    const DomainGrid grid(16, 32, {0.0, 0.0, 2.0, 1.0});
    CHECK(wake_phase_jitter(1) != wake_phase_jitter(2));
    const auto fa = generate_wake(a, grid);
    const auto fb = generate_wake(b, grid);
    double sq = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      sq += (fa.values[i] - fb.values[i]) * (fa.values[i] - fb.values[i]);
    }
    CHECK(sq > 0.0);
  }

  TEST_CASE("wake: small scale carries less energy than large scale") {
    const DomainGrid grid(32, 64, {0.0, 0.0, 2.0, 1.0});
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      SyntheticWakeConfig cfg;
      cfg.cx = rng.uniform(0.35, 0.65);
      cfg.cy = rng.uniform(0.38, 0.62);
      cfg.radius = rng.uniform(0.08, 0.12);
      cfg.wavelength = 6.0 * cfg.radius;
      cfg.amp_small = rng.uniform(0.05, 0.9);
      cfg.seed = seed;
      const WakeComponents wc = wake_components(cfg, grid);
      double large = 0.0, small = 0.0;
      for (std::size_t i = 0; i < grid.size(); ++i) {
        large += wc.large[i] * wc.large[i];
        small += wc.small[i] * wc.small[i];
      }
      CHECK(small < large);
    }
  }

  TEST_CASE("snapshot round trip is bit-identical") {
    testing::TempDir dir("snap");
    const auto s = testing::random_snapshot(6, 5, 3, 77, false);
    save_snapshot(s, dir / "s");
    const FieldSnapshot t = load_snapshot(dir / "s");
    CHECK(t.grid == s.grid);
    CHECK(t.channels == 3);
    CHECK(t.valid == s.valid);
    REQUIRE(t.values.size() == s.values.size());
    CHECK(std::memcmp(t.values.data(), s.values.data(), s.values.size() * sizeof(float)) == 0);
    CHECK(testing::read_file(dir / "s/values.f32") ==
          std::string(reinterpret_cast<const char*>(s.values.data()), s.values.size() * sizeof(float)));
  }

  TEST_CASE("hand-written 2x2 snapshot") {
    testing::TempDir dir("hand");
    const auto root = dir / "s";
    std::filesystem::create_directories(root);
    std::ofstream(root / "manifest.json")
        << R"({"format_version":1,"height":2,"width":2,"channels":1,"dtype":"f32le",)"
        << R"("extent":[0,0,1,1],"values_file":"v.bin","validity_file":"m.bin"})";
    // 1.0f = 00 00 80 3f, -2.5f = 00 00 20 c0, 0.0f, 0.5f = 00 00 00 3f (little endian)
    const unsigned char payload[16] = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0,
                                       0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x3f};
    std::ofstream(root / "v.bin", std::ios::binary).write(reinterpret_cast<const char*>(payload), 16);
    const unsigned char mask[4] = {1, 1, 0, 1};
    std::ofstream(root / "m.bin", std::ios::binary).write(reinterpret_cast<const char*>(mask), 4);
    const FieldSnapshot s = load_snapshot(root);
    CHECK(s.values == std::vector<float>{1.0f, -2.5f, 0.0f, 0.5f});
    CHECK(s.valid == std::vector<std::uint8_t>{1, 1, 0, 1});
    CHECK(s.grid.coord(3) == Coord{1.0, 1.0});
  }

  TEST_CASE("payload shorter than the manifest is a shape error") {
    testing::TempDir dir("short");
    const auto s = testing::random_snapshot(10, 10, 1, 5);
    save_snapshot(s, dir / "s");
    std::ofstream(dir / "s/values.f32", std::ios::binary | std::ios::trunc)
        .write(reinterpret_cast<const char*>(s.values.data()), 99 * sizeof(float));
    CHECK_THROWS_AS(load_snapshot(dir / "s"), ShapeError);
  }

  TEST_CASE("non-zero values at invalid points are rejected") {
    auto s = testing::random_snapshot(3, 3, 1, 5);
    s.valid[4] = 0;
    s.values[4] = 1.0f;
    CHECK_THROWS(s.validate());
  }

  TEST_CASE("wake dataset splits by configuration") {
    WakeDatasetSpec spec;
    spec.height = 8;
    spec.width = 16;
    spec.configs = 5;
    spec.snapshots_per_config = 3;
    spec.test_configs = 2;
    spec.seed = 4;
    const Dataset ds = generate_wake_dataset(spec);
    CHECK(ds.items.size() == 15);
    CHECK(ds.test_indices().size() == 6);
    std::set<int> train_cfg, test_cfg;
    for (const auto& it : ds.items) {
      (it.is_test ? test_cfg : train_cfg).insert(it.config_id);
    }
    for (int c : test_cfg) {
      CHECK(train_cfg.count(c) == 0);
    }
    testing::TempDir dir("ds");
    save_dataset(ds, dir / "d");
    const Dataset back = load_dataset(dir / "d");
    REQUIRE(back.items.size() == ds.items.size());
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
      CHECK(back.items[i].id == ds.items[i].id);
      CHECK(back.items[i].is_test == ds.items[i].is_test);
      CHECK(back.items[i].snapshot.values == ds.items[i].snapshot.values);
    }
  }
}
