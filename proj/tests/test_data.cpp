#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "msme/data.hpp"

using namespace msme;

namespace {

SampleRecord make_sample(int k, int z, int h, int w, uint64_t seed, bool with_tissue = true) {
  SampleRecord s;
  s.id = "t0";
  s.z = z;
  s.h = h;
  s.w = w;
  s.resolution_um = 1.0;
  s.available = MarkerAvailability::all(k);
  Rng rng(seed);
  s.channels = random_uniform<float>({static_cast<size_t>(k), static_cast<size_t>(z),
                                      static_cast<size_t>(h), static_cast<size_t>(w)},
                                     rng, 1.0, 5.0);
  if (with_tissue)
    s.tissue = Tensor<uint8_t>::full(
        {static_cast<size_t>(z), static_cast<size_t>(h), static_cast<size_t>(w)}, 1);
  return s;
}

// Independent bilinear evaluation at one output pixel.
float bilinear_at(const std::vector<float>& img, int H, int W, int nh, int nw, int y, int x) {
  double fy = (y + 0.5) * (static_cast<double>(H) / nh) - 0.5;
  double fx = (x + 0.5) * (static_cast<double>(W) / nw) - 0.5;
  int y0 = static_cast<int>(std::floor(fy)), x0 = static_cast<int>(std::floor(fx));
  double wy = fy - y0, wx = fx - x0;
  auto px = [&](int yy, int xx) {
    return img[static_cast<size_t>(std::clamp(yy, 0, H - 1)) * W + std::clamp(xx, 0, W - 1)];
  };
  return static_cast<float>((1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x0 + 1)) +
                            wy * ((1 - wx) * px(y0 + 1, x0) + wx * px(y0 + 1, x0 + 1)));
}

}  // namespace

TEST_CASE("resample") {
  SECTION("matching target resolution is a bitwise no-op") {
    auto s = make_sample(2, 1, 8, 8, 1);
    auto r = resample(s, 1.0);
    CHECK(r.channels.data == s.channels.data);
  }

  SECTION("2x upsample of a constant image stays constant") {
    auto s = make_sample(1, 1, 6, 6, 2);
    std::fill(s.channels.data.begin(), s.channels.data.end(), 3.25f);
    s.resolution_um = 2.0;
    auto r = resample(s, 1.0);
    CHECK(r.h == 12);
    CHECK(r.w == 12);
    for (float v : r.channels.data) CHECK(v == 3.25f);
  }

  SECTION("2x downsample of a checkerboard matches the bilinear weight oracle") {
    SampleRecord s = make_sample(1, 1, 4, 4, 3);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) s.channels.data[static_cast<size_t>(y) * 4 + x] =
          static_cast<float>((y + x) % 2);
    s.resolution_um = 0.5;
    auto r = resample(s, 1.0);
    REQUIRE(r.h == 2);
    REQUIRE(r.w == 2);
    std::vector<float> src(s.channels.data.begin(), s.channels.data.begin() + 16);
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x)
        CHECK(r.channels.data[static_cast<size_t>(y) * 2 + x] ==
              bilinear_at(src, 4, 4, 2, 2, y, x));
  }

  SECTION("labels are resampled nearest-neighbor and stay binary") {
    auto s = make_sample(1, 1, 4, 4, 4);
    Tensor<uint8_t> lab({1, 1, 4, 4});
    lab.data = {0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0};
    s.labels = lab;
    s.resolution_um = 0.5;
    auto r = resample(s, 1.0);
    for (uint8_t v : r.labels->data) CHECK((v == 0 || v == 1));
  }

  SECTION("non-positive target rejected") {
    auto s = make_sample(1, 1, 4, 4, 5);
    CHECK_THROWS_AS(resample(s, 0.0), ContractError);
  }
}

TEST_CASE("standardize") {
  SECTION("statistics are per-sample: the whole-volume moment oracle applies to every patch") {
    auto s = make_sample(2, 1, 24, 24, 11);
    auto st = standardize(s);
    // oracle: whole-sample moments per channel
    const size_t plane = 24 * 24;
    for (int m = 0; m < 2; ++m) {
      double mu = 0, var = 0;
      for (size_t i = 0; i < plane; ++i) mu += s.channels.data[m * plane + i];
      mu /= plane;
      for (size_t i = 0; i < plane; ++i) {
        double d = s.channels.data[m * plane + i] - mu;
        var += d * d;
      }
      double sd = std::sqrt(var / plane);
      for (size_t i = 0; i < plane; ++i)
        CHECK(st.channels.data[m * plane + i] ==
              Catch::Approx((s.channels.data[m * plane + i] - mu) / sd).margin(1e-5));
    }
  }

  SECTION("an already-standardized channel is left nearly unchanged") {
    auto s = make_sample(1, 1, 32, 32, 12);
    auto once = standardize(s);
    auto twice = standardize(once);
    for (size_t i = 0; i < once.channels.numel(); ++i)
      CHECK(std::fabs(once.channels.data[i] - twice.channels.data[i]) < 1e-5);
  }

  SECTION("post-standardization moments vanish") {
    auto s = make_sample(1, 2, 16, 16, 13);
    auto st = standardize(s);
    double mu = 0;
    for (float v : st.channels.data) mu += v;
    mu /= static_cast<double>(st.channels.numel());
    double var = 0;
    for (float v : st.channels.data) var += (v - mu) * (v - mu);
    var /= static_cast<double>(st.channels.numel());
    CHECK(std::fabs(mu) < 1e-5);
    CHECK(std::fabs(std::sqrt(var) - 1.0) < 1e-5);
  }

  SECTION("in-tissue statistics ignore the black border") {
    auto s = make_sample(1, 1, 16, 16, 14);
    auto& tis = *s.tissue;
    std::fill(tis.data.begin(), tis.data.end(), 0);
    for (int y = 4; y < 12; ++y)
      for (int x = 4; x < 12; ++x) tis.data[static_cast<size_t>(y) * 16 + x] = 1;
    for (size_t i = 0; i < s.channels.numel(); ++i)
      if (tis.data[i] == 0) s.channels.data[i] = 0.0f;
    auto st = standardize(s);
    double mu = 0;
    size_t n = 0;
    for (size_t i = 0; i < st.channels.numel(); ++i)
      if (tis.data[i]) {
        mu += st.channels.data[i];
        ++n;
      }
    CHECK(std::fabs(mu / static_cast<double>(n)) < 1e-5);
  }

  SECTION("constant channel raises a degenerate-channel error naming the marker") {
    auto s = make_sample(2, 1, 8, 8, 15);
    std::fill(s.channels.data.begin() + 64, s.channels.data.begin() + 128, 7.0f);
    CHECK_THROWS_MATCHES(
        standardize(s), DataError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("marker 2")));
  }

  SECTION("absent channels remain zero") {
    auto s = make_sample(2, 1, 8, 8, 16);
    s.available = MarkerAvailability(0b01, 2);
    std::fill(s.channels.data.begin() + 64, s.channels.data.begin() + 128, 0.0f);
    auto st = standardize(s);
    for (size_t i = 64; i < 128; ++i) CHECK(st.channels.data[i] == 0.0f);
  }
}

TEST_CASE("tiling plan") {
  Geometry g{572, 388};  // margin 92

  SECTION("slice equal to the output size gives a single tile") {
    auto origins = tile_origins(388, 388);
    CHECK(origins == std::vector<int>{0});
  }

  SECTION("800-wide slice: origins {0, 388, 412}, averaged region [412, 776)") {
    auto origins = tile_origins(800, 388);
    CHECK(origins == std::vector<int>{0, 388, 412});
  }

  SECTION("output size + 1 forces a tail shifted back to 1") {
    auto origins = tile_origins(389, 388);
    CHECK(origins == std::vector<int>{0, 1});
  }

  SECTION("slice smaller than one tile is a geometry error") {
    CHECK_THROWS_AS(tile_origins(387, 388), GeometryError);
  }

  SECTION("interior tiles are disjoint and coverage counts are 1/2/4") {
    Geometry small{36, 16};  // margin 10
    PatchGrid grid = plan_tiles(1, 40, 56, small);
    std::vector<int> cover(40 * 56, 0);
    for (const auto& t : grid.tiles)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) cover[static_cast<size_t>(t.oy + y) * 56 + t.ox + x]++;
    int c1 = 0, c2 = 0, c4 = 0;
    for (int c : cover) {
      REQUIRE(c >= 1);
      if (c == 1) ++c1;
      else if (c == 2) ++c2;
      else if (c == 4) ++c4;
      else FAIL("unexpected coverage count " << c);
    }
    CHECK(c1 > 0);
    CHECK(c2 > 0);
    CHECK(c4 > 0);  // corner where both axes have tails
  }

  SECTION("input patch for origin 0 starts at padded coordinate 0") {
    auto s = make_sample(1, 1, 388, 388, 20);
    auto [patches, grid] = decompose(s.channels, g);
    REQUIRE(patches.size() == 1);
    const auto& p = patches[0];
    REQUIRE(p.dim(1) == 572);
    // the first margin rows/cols come from zero padding
    for (int x = 0; x < 572; ++x) CHECK(p(0u, 0u, static_cast<size_t>(x)) == 0.0f);
    for (int y = 0; y < 572; ++y) CHECK(p(0u, static_cast<size_t>(y), 0u) == 0.0f);
    // interior aligns with the slice
    CHECK(p(0u, 92u, 92u) == s.channels(0u, 0u, 0u, 0u));
    CHECK(p(0u, 479u, 479u) == s.channels(0u, 0u, 387u, 387u));
  }
}

TEST_CASE("stitch") {
  Geometry g{36, 16};

  SECTION("single tile round trip") {
    auto s = make_sample(1, 1, 16, 16, 30);
    auto [patches, grid] = decompose(s.channels, g);
    REQUIRE(patches.size() == 1);
    Tensor<float> out({1, 16, 16});
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        out(0u, static_cast<size_t>(y), static_cast<size_t>(x)) =
            patches[0](0u, static_cast<size_t>(y + 10), static_cast<size_t>(x + 10));
    auto full = stitch(grid, {out});
    CHECK(full.data == s.channels.data);
  }

  SECTION("two overlapping constant tiles average to (a+b)/2") {
    PatchGrid grid = plan_tiles(1, 16, 17, g);  // x tail at 1
    REQUIRE(grid.tiles.size() == 2);
    auto a = Tensor<float>::full({1, 16, 16}, 3.0f);
    auto b = Tensor<float>::full({1, 16, 16}, 5.0f);
    auto full = stitch(grid, {a, b});
    CHECK(full(0u, 0u, 0u, 0u) == 3.0f);       // only tile a
    CHECK(full(0u, 0u, 0u, 16u) == 5.0f);      // only tile b
    for (int x = 1; x < 16; ++x) CHECK(full(0u, 0u, 5u, static_cast<size_t>(x)) == 4.0f);
  }

  SECTION("identity network reproduces the standardized interior bitwise") {
    auto s = standardize(make_sample(2, 2, 41, 53, 31));
    auto [patches, grid] = decompose(s.channels, g);
    std::vector<Tensor<float>> outs;
    for (const auto& p : patches) {
      Tensor<float> o({2, 16, 16});
      for (size_t c = 0; c < 2; ++c)
        for (int y = 0; y < 16; ++y)
          for (int x = 0; x < 16; ++x)
            o(c, static_cast<size_t>(y), static_cast<size_t>(x)) =
                p(c, static_cast<size_t>(y + 10), static_cast<size_t>(x + 10));
      outs.push_back(std::move(o));
    }
    auto full = stitch(grid, outs);
    REQUIRE(full.shape == s.channels.shape);
    CHECK(full.data == s.channels.data);  // averaging identical values is exact
  }

  SECTION("stitch result does not depend on a permuted tile processing order") {
    auto s = make_sample(1, 1, 40, 40, 32);
    auto [patches, grid] = decompose(s.channels, g);
    std::vector<Tensor<float>> outs;
    for (const auto& p : patches) {
      Tensor<float> o({1, 16, 16});
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
          o(0u, static_cast<size_t>(y), static_cast<size_t>(x)) =
              p(0u, static_cast<size_t>(y + 10), static_cast<size_t>(x + 10));
      outs.push_back(std::move(o));
    }
    auto full1 = stitch(grid, outs);
    auto full2 = stitch(grid, outs);
    CHECK(full1.data == full2.data);
  }

  SECTION("missing tile is a contract error") {
    PatchGrid grid = plan_tiles(1, 16, 32, g);
    auto a = Tensor<float>::full({1, 16, 16}, 1.0f);
    CHECK_THROWS_AS(stitch(grid, {a}), ContractError);
  }
}

TEST_CASE("synthetic generator") {
  SECTION("informativeness: a class-specific marker correlates strongest with its class") {
    SyntheticConfig cfg;
    cfg.num_markers = 3;
    cfg.num_samples = 2;
    cfg.seed = 5;
    cfg.profiles.resize(3);
    cfg.profiles[0].class_contrast = {1.0, 0.0};  // class-1 only
    cfg.profiles[1].class_contrast = {0.0, 1.0};
    cfg.profiles[2].class_contrast = {0.0, 0.0};  // noise
    auto ds = generate_synthetic(cfg);
    for (const auto& s : ds.samples) {
      const size_t plane = static_cast<size_t>(s.z) * s.h * s.w;
      auto corr = [&](int marker, int cls) {
        double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
        for (size_t i = 0; i < plane; ++i) {
          double x = s.channels.data[static_cast<size_t>(marker) * plane + i];
          double y = s.labels->data[static_cast<size_t>(cls) * plane + i];
          sx += x; sy += y; sxy += x * y; sxx += x * x; syy += y * y;
        }
        double n = static_cast<double>(plane);
        double cov = sxy - sx * sy / n;
        double vx = sxx - sx * sx / n, vy = syy - sy * sy / n;
        return cov / std::sqrt(vx * vy);
      };
      CHECK(corr(0, 0) > corr(1, 0));
      CHECK(corr(0, 0) > corr(2, 0));
      CHECK(corr(1, 1) > corr(0, 1));
    }
  }

  SECTION("zero-noise single-class config renders channel = contrast x mask") {
    SyntheticConfig cfg;
    cfg.num_markers = 1;
    cfg.num_classes = 1;
    cfg.num_samples = 1;
    cfg.class_density = {0.08};
    cfg.seed = 9;
    cfg.profiles.resize(1);
    cfg.profiles[0].class_contrast = {2.5};
    cfg.profiles[0].background_amp = 0.0;
    cfg.profiles[0].noise_sigma = 0.0;
    auto ds = generate_synthetic(cfg);
    const auto& s = ds.samples[0];
    for (size_t i = 0; i < s.channels.numel(); ++i)
      CHECK(s.channels.data[i] == 2.5f * static_cast<float>(s.labels->data[i]));
  }

  SECTION("class pixel fractions stay within 30% of the configured densities") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      SyntheticConfig cfg;
      cfg.num_markers = 3;
      cfg.num_samples = 1;
      cfg.seed = seed;
      cfg.profiles = synthetic_preset_profiles("two-class", 3);
      auto ds = generate_synthetic(cfg);
      const auto& s = ds.samples[0];
      const size_t plane = static_cast<size_t>(s.z) * s.h * s.w;
      for (int c = 0; c < 2; ++c) {
        size_t count = 0;
        for (size_t i = 0; i < plane; ++i) count += s.labels->data[static_cast<size_t>(c) * plane + i];
        double frac = static_cast<double>(count) / static_cast<double>(plane);
        INFO("seed " << seed << " class " << c << " frac " << frac);
        CHECK(frac > 0.7 * cfg.class_density[static_cast<size_t>(c)]);
        CHECK(frac < 1.3 * cfg.class_density[static_cast<size_t>(c)]);
      }
    }
  }

  SECTION("labels are binary and lie inside the tissue mask") {
    SyntheticConfig cfg;
    cfg.num_markers = 3;
    cfg.num_samples = 2;
    cfg.seed = 77;
    cfg.profiles = synthetic_preset_profiles("two-class", 3);
    auto ds = generate_synthetic(cfg);
    for (const auto& s : ds.samples) {
      const size_t plane = static_cast<size_t>(s.z) * s.h * s.w;
      for (size_t c = 0; c < 2; ++c)
        for (size_t i = 0; i < plane; ++i) {
          uint8_t v = s.labels->data[c * plane + i];
          REQUIRE((v == 0 || v == 1));
          if (v) REQUIRE(s.tissue->data[i] == 1);
        }
    }
  }

  SECTION("generation is deterministic in the seed") {
    SyntheticConfig cfg;
    cfg.num_markers = 3;
    cfg.num_samples = 2;
    cfg.seed = 123;
    cfg.profiles = synthetic_preset_profiles("two-class", 3);
    auto a = generate_synthetic(cfg);
    auto b = generate_synthetic(cfg);
    for (size_t i = 0; i < a.samples.size(); ++i) {
      CHECK(a.samples[i].channels.data == b.samples[i].channels.data);
      CHECK(a.samples[i].labels->data == b.samples[i].labels->data);
    }
  }
}

TEST_CASE("dataset container") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "msme_test_ds";
  fs::remove_all(dir);

  SyntheticConfig cfg;
  cfg.num_markers = 3;
  cfg.num_samples = 2;
  cfg.height = 40;
  cfg.width = 44;
  cfg.seed = 3;
  cfg.profiles = synthetic_preset_profiles("two-class", 3);
  auto ds = generate_synthetic(cfg);

  SECTION("write then read is a lossless round trip") {
    write_dataset(ds, dir);
    auto back = read_dataset(dir);
    CHECK(back.num_markers == 3);
    REQUIRE(back.samples.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
      CHECK(back.samples[i].channels.data == ds.samples[i].channels.data);
      CHECK(back.samples[i].labels->data == ds.samples[i].labels->data);
      CHECK(back.samples[i].tissue->data == ds.samples[i].tissue->data);
      CHECK(back.samples[i].available.bits == ds.samples[i].available.bits);
    }
  }

  SECTION("absent markers come back as zeros with the bit cleared") {
    ds.samples[0].available = MarkerAvailability(0b101, 3);
    // leave nonzero garbage in the absent channel on disk
    write_dataset(ds, dir);
    auto back = read_dataset(dir);
    CHECK(back.samples[0].available.bits == 0b101);
    const size_t plane = static_cast<size_t>(40) * 44;
    for (size_t i = 0; i < plane; ++i) CHECK(back.samples[0].channels.data[plane + i] == 0.0f);
  }

  SECTION("truncated binaries raise a corruption error naming byte counts") {
    write_dataset(ds, dir);
    fs::resize_file(dir / "s1_labels.bin", 10);
    CHECK_THROWS_MATCHES(
        read_dataset(dir), DataError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("expected")));
  }

  fs::remove_all(dir);
}
