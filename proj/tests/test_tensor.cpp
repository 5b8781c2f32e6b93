#include <catch2/catch_amalgamated.hpp>

#include "msme/grad_check.hpp"
#include "msme/tape.hpp"
#include "oracles.hpp"

using namespace msme;

namespace {

template <class T>
Tensor<T> make(std::vector<size_t> shape, std::vector<T> vals) {
  return Tensor<T>(std::move(shape), std::move(vals));
}

}  // namespace

TEST_CASE("conv2d_valid basics") {
  Tape<double> t;

  SECTION("1x1 unit kernel is the identity") {
    auto x = make<double>({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    NodeId out = conv2d_valid(t, t.leaf(x), t.leaf(make<double>({1, 1, 1, 1}, {1.0})),
                              t.leaf(Tensor<double>::zeros({1})));
    CHECK(t.value(out).data == x.data);
  }

  SECTION("2x2 all-ones kernel sums the window") {
    auto x = Tensor<double>::full({1, 2, 2}, 1.0);
    NodeId out = conv2d_valid(t, t.leaf(x), t.leaf(Tensor<double>::full({1, 1, 2, 2}, 1.0)),
                              t.leaf(Tensor<double>::zeros({1})));
    REQUIRE(t.value(out).shape == std::vector<size_t>{1, 1, 1});
    CHECK(t.value(out).data[0] == 4.0);
  }

  SECTION("4x4 ramp against the direct-sum oracle") {
    Tensor<double> x({1, 4, 4});
    for (size_t i = 0; i < 16; ++i) x.data[i] = static_cast<double>(i);
    auto k = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    auto b = Tensor<double>::zeros({1});
    NodeId out = conv2d_valid(t, t.leaf(x), t.leaf(k), t.leaf(b));
    Tensor<double> expect = oracle::conv2d(x, k, b);
    REQUIRE(t.value(out).shape == std::vector<size_t>{1, 2, 2});
    CHECK(t.value(out).data == expect.data);
    CHECK(expect.data == std::vector<double>{45, 54, 81, 90});
  }

  SECTION("channel mismatch raises a dimension error naming the axes") {
    auto x = Tensor<double>::zeros({2, 4, 4});
    auto k = Tensor<double>::zeros({1, 3, 3, 3});
    CHECK_THROWS_MATCHES(
        conv2d_valid(t, t.leaf(x), t.leaf(k), t.leaf(Tensor<double>::zeros({1}))), DimError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("channels")));
  }

  SECTION("kernel larger than input") {
    auto x = Tensor<double>::zeros({1, 2, 2});
    auto k = Tensor<double>::zeros({1, 1, 3, 3});
    CHECK_THROWS_AS(conv2d_valid(t, t.leaf(x), t.leaf(k), t.leaf(Tensor<double>::zeros({1}))),
                    DimError);
  }
}

TEST_CASE("conv2d_valid is linear in its input") {
  Rng rng(11);
  auto x = random_uniform<double>({2, 6, 6}, rng);
  auto y = random_uniform<double>({2, 6, 6}, rng);
  auto k = random_uniform<double>({3, 2, 3, 3}, rng);
  auto b0 = Tensor<double>::zeros({3});
  double a = 1.7, c = -0.6;

  Tensor<double> mix({2, 6, 6});
  for (size_t i = 0; i < mix.numel(); ++i) mix.data[i] = a * x.data[i] + c * y.data[i];

  Tape<double> t;
  NodeId kid = t.leaf(k), bid = t.leaf(b0);
  const auto& lhs = t.value(conv2d_valid(t, t.leaf(mix), kid, bid));
  const auto& cx = t.value(conv2d_valid(t, t.leaf(x), kid, bid));
  const auto& cy = t.value(conv2d_valid(t, t.leaf(y), kid, bid));
  for (size_t i = 0; i < lhs.numel(); ++i) {
    double rhs = a * cx.data[i] + c * cy.data[i];
    CHECK(std::fabs(lhs.data[i] - rhs) <=
          1e-6 * std::max(1.0, std::fabs(lhs.data[i]) + std::fabs(rhs)));
  }
}

TEST_CASE("maxpool2") {
  Tape<double> t;

  SECTION("constant input keeps the constant, ties resolve to the window head") {
    auto x = Tensor<double>::full({1, 4, 4}, 3.5);
    auto idx = maxpool2_indices(x);
    NodeId out = maxpool2(t, t.leaf(x));
    for (double v : t.value(out).data) CHECK(v == 3.5);
    CHECK(idx[0] == 0);  // first element of the first window
    CHECK(idx[1] == 2);
  }

  SECTION("2x2 window picks the max and its index") {
    auto x = make<double>({1, 2, 2}, {1, 2, 3, 4});
    NodeId out = maxpool2(t, t.leaf(x));
    CHECK(t.value(out).data == std::vector<double>{4});
    CHECK(maxpool2_indices(x) == std::vector<uint32_t>{3});  // position (1,1)
  }

  SECTION("random input equals the exhaustive window scan") {
    Rng rng(5);
    auto x = random_uniform<double>({1, 6, 6}, rng);
    NodeId out = maxpool2(t, t.leaf(x));
    CHECK(t.value(out).data == oracle::maxpool2(x).data);
  }

  SECTION("output dominates every window element") {
    Rng rng(17);
    auto x = random_uniform<double>({2, 8, 8}, rng);
    Tape<double> tp;
    const auto& out = tp.value(maxpool2(tp, tp.leaf(x)));
    for (size_t c = 0; c < 2; ++c)
      for (size_t y = 0; y < 8; ++y)
        for (size_t xx = 0; xx < 8; ++xx) CHECK(out(c, y / 2, xx / 2) >= x(c, y, xx));
  }

  SECTION("odd extents rejected") {
    CHECK_THROWS_AS(maxpool2(t, t.leaf(Tensor<double>::zeros({1, 3, 4}))), DimError);
  }
}

TEST_CASE("upconv2") {
  Tape<double> t;

  SECTION("unit impulse reproduces the kernel footprint") {
    auto x = make<double>({1, 1, 1}, {1.0});
    auto k = make<double>({1, 1, 2, 2}, {1.5, -2.0, 0.25, 3.0});
    NodeId out = upconv2(t, t.leaf(x), t.leaf(k), t.leaf(Tensor<double>::zeros({1})));
    CHECK(t.value(out).data == std::vector<double>{1.5, -2.0, 0.25, 3.0});
  }

  SECTION("zero input gives all-bias output") {
    auto x = Tensor<double>::zeros({2, 3, 3});
    Rng rng(3);
    auto k = random_uniform<double>({2, 2, 2, 2}, rng);
    auto b = make<double>({2}, {0.7, -0.3});
    NodeId out = upconv2(t, t.leaf(x), t.leaf(k), t.leaf(b));
    const auto& o = t.value(out);
    for (size_t c = 0; c < 2; ++c)
      for (size_t i = 0; i < 36; ++i) CHECK(o.data[c * 36 + i] == b.data[c]);
  }

  SECTION("random case equals the scatter-sum oracle") {
    Rng rng(23);
    auto x = random_uniform<double>({1, 2, 2}, rng);
    auto k = random_uniform<double>({1, 2, 2, 2}, rng);
    auto b = random_uniform<double>({2}, rng);
    NodeId out = upconv2(t, t.leaf(x), t.leaf(k), t.leaf(b));
    auto expect = oracle::upconv2(x, k, b);
    REQUIRE(t.value(out).shape == expect.shape);
    for (size_t i = 0; i < expect.numel(); ++i)
      CHECK(t.value(out).data[i] == Catch::Approx(expect.data[i]).margin(1e-12));
  }
}

TEST_CASE("concat and crop") {
  Tape<double> t;

  SECTION("a's channels precede b's") {
    auto a = Tensor<double>::full({1, 2, 2}, 1.0);
    auto b = Tensor<double>::full({1, 2, 2}, 2.0);
    NodeId out = concat_channels(t, t.leaf(a), t.leaf(b));
    CHECK(t.value(out).data == std::vector<double>{1, 1, 1, 1, 2, 2, 2, 2});
  }

  SECTION("concat with a zero-channel tensor is the identity") {
    Rng rng(2);
    auto a = random_uniform<double>({2, 3, 3}, rng);
    auto empty = Tensor<double>::zeros({0, 3, 3});
    NodeId out = concat_channels(t, t.leaf(a), t.leaf(empty));
    CHECK(t.value(out).data == a.data);
    CHECK(t.value(out).dim(0) == 2);
  }

  SECTION("center crop 64 -> 40 uses offset 12") {
    Tensor<double> big({1, 64, 64});
    for (size_t i = 0; i < big.numel(); ++i) big.data[i] = static_cast<double>(i);
    NodeId crop = crop_center(t, t.leaf(big), 40, 40);
    CHECK(t.value(crop)(0, 0, 0) == big(0, 12, 12));
    CHECK(t.value(crop)(0, 39, 39) == big(0, 51, 51));
  }

  SECTION("concat then split recovers both inputs bitwise") {
    Rng rng(9);
    auto a = random_uniform<double>({3, 4, 5}, rng);
    auto b = random_uniform<double>({2, 4, 5}, rng);
    NodeId cat = concat_channels(t, t.leaf(a), t.leaf(b));
    NodeId sa = slice_channels(t, cat, 0, 3);
    NodeId sb = slice_channels(t, cat, 3, 5);
    CHECK(t.value(sa).data == a.data);
    CHECK(t.value(sb).data == b.data);
  }

  SECTION("spatial mismatch rejected") {
    CHECK_THROWS_AS(concat_channels(t, t.leaf(Tensor<double>::zeros({1, 4, 4})),
                                    t.leaf(Tensor<double>::zeros({1, 5, 4}))),
                    DimError);
  }
}

TEST_CASE("dense") {
  Tape<double> t;

  SECTION("identity weight, no bias") {
    auto x = make<double>({3}, {1.0, -2.0, 0.5});
    auto w = make<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    NodeId out = dense(t, t.leaf(x), t.leaf(w));
    CHECK(t.value(out).data == x.data);
  }

  SECTION("zero weight returns the bias") {
    auto x = make<double>({3}, {1.0, -2.0, 0.5});
    auto w = Tensor<double>::zeros({2, 3});
    auto b = make<double>({2}, {4.0, -1.0});
    NodeId out = dense(t, t.leaf(x), t.leaf(w), t.leaf(b));
    CHECK(t.value(out).data == b.data);
  }

  SECTION("3 -> 2 with small integers matches the dot-product oracle") {
    auto x = make<double>({3}, {1.0, -1.0, 2.0});
    auto w = make<double>({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = make<double>({2}, {0.5, -1.0});
    NodeId out = dense(t, t.leaf(x), t.leaf(w), t.leaf(b));
    auto expect = oracle::dense(x.data, w, b.data);
    CHECK(t.value(out).data == expect);
    CHECK(expect == std::vector<double>{5.5, 10.0});
  }
}

TEST_CASE("pointwise activations") {
  Tape<double> t;

  SECTION("relu clamps negatives") {
    NodeId out = relu(t, t.leaf(make<double>({3}, {-1.0, 0.0, 2.0})));
    CHECK(t.value(out).data == std::vector<double>{0, 0, 2});
  }

  SECTION("sigmoid(0) = 0.5") {
    NodeId out = sigmoid(t, t.leaf(Tensor<double>::scalar(0.0)));
    CHECK(t.value(out).data[0] == 0.5);
  }

  SECTION("sigmoid saturates without overflow at large magnitudes") {
    NodeId out = sigmoid(t, t.leaf(make<double>({4}, {40.0, 500.0, -40.0, -500.0})));
    const auto& v = t.value(out);
    CHECK(v.all_finite());
    CHECK(std::fabs(v.data[0] - 1.0) < 1e-15);
    CHECK(v.data[1] <= 1.0);
    CHECK(v.data[2] < 1e-15);
    CHECK(v.data[2] > 0.0);
    CHECK(v.data[3] >= 0.0);
  }
}

TEST_CASE("hemis-style mean/std stacking") {
  Tape<double> t;

  SECTION("single map gives exactly zero std block") {
    Rng rng(7);
    auto a = random_uniform<double>({2, 3, 3}, rng);
    NodeId out = stack_mean_std(t, {t.leaf(a)});
    const auto& v = t.value(out);
    REQUIRE(v.dim(0) == 4);
    for (size_t i = 0; i < a.numel(); ++i) {
      CHECK(v.data[i] == a.data[i]);
      CHECK(v.data[a.numel() + i] == 0.0);
    }
  }

  SECTION("two identical maps: mean is the map, std zero") {
    Rng rng(8);
    auto a = random_uniform<double>({1, 4, 4}, rng);
    NodeId out = stack_mean_std(t, {t.leaf(a), t.leaf(a)});
    const auto& v = t.value(out);
    for (size_t i = 0; i < a.numel(); ++i) {
      CHECK(v.data[i] == Catch::Approx(a.data[i]).margin(1e-12));
      CHECK(v.data[a.numel() + i] == 0.0);
    }
  }

  SECTION("three random maps match the two-pass oracle") {
    Rng rng(21);
    std::vector<Tensor<double>> maps;
    std::vector<NodeId> ids;
    for (int i = 0; i < 3; ++i) {
      maps.push_back(random_uniform<double>({2, 3, 3}, rng));
      ids.push_back(t.leaf(maps.back()));
    }
    NodeId out = stack_mean_std(t, ids);
    Tensor<double> mu, sd;
    oracle::mean_std(maps, mu, sd);
    const auto& v = t.value(out);
    for (size_t i = 0; i < mu.numel(); ++i) {
      CHECK(std::fabs(v.data[i] - mu.data[i]) < 1e-6);
      CHECK(std::fabs(v.data[mu.numel() + i] - sd.data[i]) < 1e-6);
    }
  }

  SECTION("empty list rejected") {
    CHECK_THROWS_AS(stack_mean_std(t, {}), ContractError);
  }
}

TEST_CASE("backprop basics") {
  SECTION("loss = sum(x) gives an all-ones gradient") {
    Tape<double> t;
    Rng rng(4);
    NodeId x = t.leaf(random_uniform<double>({2, 3, 4}, rng), true);
    t.backward(sum_all(t, x));
    for (double g : t.grad(x).data) CHECK(g == 1.0);
  }

  SECTION("loss = sigmoid(w.x) at w=0 has gradient x/4") {
    Tape<double> t;
    auto xv = make<double>({3}, {0.5, -1.5, 2.0});
    NodeId x = t.leaf(xv, false);
    NodeId w = t.leaf(Tensor<double>::zeros({1, 3}), true);
    NodeId loss = sigmoid(t, dense(t, x, w));
    t.backward(loss);
    const auto& gw = t.grad(w);
    for (size_t i = 0; i < 3; ++i) CHECK(gw.data[i] == Catch::Approx(0.25 * xv.data[i]));
  }

  SECTION("non-scalar loss rejected") {
    Tape<double> t;
    NodeId x = t.leaf(Tensor<double>::zeros({2, 2}), true);
    CHECK_THROWS_AS(t.backward(x), ContractError);
  }
}

namespace {

double primitive_grad_error(const char* which, uint64_t seed) {
  Rng rng(seed);
  GradCheckOptions opt;
  opt.seed = seed;
  std::string op = which;
  if (op == "conv") {
    std::vector<Tensor<double>> params = {random_uniform<double>({2, 6, 6}, rng),
                                          random_uniform<double>({3, 2, 3, 3}, rng),
                                          random_uniform<double>({3}, rng)};
    return grad_check(
        [](Tape<double>& t, const std::vector<NodeId>& p) {
          return sum_all(t, sigmoid(t, conv2d_valid(t, p[0], p[1], p[2])));
        },
        params, opt);
  }
  if (op == "maxpool") {
    std::vector<Tensor<double>> params = {random_uniform<double>({2, 6, 6}, rng, -3.0, 3.0)};
    return grad_check(
        [](Tape<double>& t, const std::vector<NodeId>& p) {
          return sum_all(t, sigmoid(t, maxpool2(t, p[0])));
        },
        params, opt);
  }
  if (op == "upconv") {
    std::vector<Tensor<double>> params = {random_uniform<double>({2, 3, 3}, rng),
                                          random_uniform<double>({2, 3, 2, 2}, rng),
                                          random_uniform<double>({3}, rng)};
    return grad_check(
        [](Tape<double>& t, const std::vector<NodeId>& p) {
          return sum_all(t, sigmoid(t, upconv2(t, p[0], p[1], p[2])));
        },
        params, opt);
  }
  if (op == "dense") {
    std::vector<Tensor<double>> params = {random_uniform<double>({4}, rng),
                                          random_uniform<double>({3, 4}, rng),
                                          random_uniform<double>({3}, rng)};
    return grad_check(
        [](Tape<double>& t, const std::vector<NodeId>& p) {
          return sum_all(t, sigmoid(t, dense(t, p[0], p[1], p[2])));
        },
        params, opt);
  }
  if (op == "concat_crop") {
    std::vector<Tensor<double>> params = {random_uniform<double>({2, 8, 8}, rng),
                                          random_uniform<double>({1, 4, 4}, rng)};
    return grad_check(
        [](Tape<double>& t, const std::vector<NodeId>& p) {
          NodeId cropped = crop_center(t, p[0], 4, 4);
          return sum_all(t, sigmoid(t, concat_channels(t, cropped, p[1])));
        },
        params, opt);
  }
  if (op == "channel_ops") {
    std::vector<Tensor<double>> params = {random_uniform<double>({3, 4, 4}, rng),
                                          random_uniform<double>({3}, rng)};
    return grad_check(
        [](Tape<double>& t, const std::vector<NodeId>& p) {
          NodeId scaled = channel_scale(t, p[0], p[1]);
          return sum_all(t, sigmoid(t, channel_mean(t, scaled)));
        },
        params, opt);
  }
  if (op == "mean_std") {
    std::vector<Tensor<double>> params = {random_uniform<double>({2, 3, 3}, rng),
                                          random_uniform<double>({2, 3, 3}, rng),
                                          random_uniform<double>({2, 3, 3}, rng)};
    return grad_check(
        [](Tape<double>& t, const std::vector<NodeId>& p) {
          return sum_all(t, sigmoid(t, stack_mean_std(t, {p[0], p[1], p[2]})));
        },
        params, opt);
  }
  if (op == "relu_mix") {
    std::vector<Tensor<double>> params = {random_uniform<double>({5}, rng),
                                          random_uniform<double>({5}, rng)};
    return grad_check(
        [](Tape<double>& t, const std::vector<NodeId>& p) {
          return sum_all(t, relu(t, mul(t, p[0], p[1])));
        },
        params, opt);
  }
  FAIL("unknown primitive");
  return 1.0;
}

}  // namespace

TEST_CASE("every primitive passes finite-difference checks on 5 seeds") {
  const char* prims[] = {"conv",        "maxpool",     "upconv",   "dense",
                         "concat_crop", "channel_ops", "mean_std", "relu_mix"};
  for (const char* p : prims) {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
      INFO(p << " seed " << seed);
      CHECK(primitive_grad_error(p, seed) < 1e-4);
    }
  }
}

TEST_CASE("linear graph gradient is exact") {
  Rng rng(1);
  std::vector<Tensor<double>> params = {random_uniform<double>({6}, rng),
                                        random_uniform<double>({4, 6}, rng),
                                        random_uniform<double>({4}, rng)};
  double err = grad_check(
      [](Tape<double>& t, const std::vector<NodeId>& p) {
        return sum_all(t, dense(t, p[0], p[1], p[2]));
      },
      params);
  CHECK(err < 1e-9);
}

TEST_CASE("three-layer composite matches finite differences") {
  Rng rng(42);
  std::vector<Tensor<double>> params = {
      random_uniform<double>({1, 8, 8}, rng),  random_uniform<double>({2, 1, 3, 3}, rng),
      random_uniform<double>({2}, rng),        random_uniform<double>({3, 18}, rng),
      random_uniform<double>({3}, rng)};
  double err = grad_check(
      [](Tape<double>& t, const std::vector<NodeId>& p) {
        NodeId c = conv2d_valid(t, p[0], p[1], p[2]);   // [2,6,6]
        NodeId r = relu(t, c);
        NodeId m = maxpool2(t, r);                      // [2,3,3]
        NodeId d = dense(t, flatten(t, m), p[3], p[4]); // [3]
        return sum_all(t, sigmoid(t, d));
      },
      params);
  CHECK(err < 1e-4);
}

TEST_CASE("forward passes are deterministic") {
  Rng rng(77);
  auto x = random_uniform<float>({2, 10, 10}, rng);
  auto k = random_uniform<float>({3, 2, 3, 3}, rng);
  auto b = random_uniform<float>({3}, rng);
  std::vector<float> first;
  for (int run = 0; run < 3; ++run) {
    Tape<float> t;
    NodeId out = maxpool2(t, relu(t, conv2d_valid(t, t.leaf(x), t.leaf(k), t.leaf(b))));
    if (run == 0)
      first = t.value(out).data;
    else
      CHECK(t.value(out).data == first);
  }
}
