#include <cmath>
#include <numeric>

#include "doctest.h"
#include "isoseg/kernels.hpp"
#include "isoseg/rng.hpp"

using namespace isoseg;

namespace {

template <typename S>
Tensor<S> random_tensor(const Shape5& shape, Rng& rng, double scale = 1.0) {
  Tensor<S> t(shape);
  for (auto& v : t.data) v = static_cast<S>(rng.normal() * scale);
  return t;
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

template <typename S>
double max_rel_diff(const Tensor<S>& a, const Tensor<S>& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a.data[i]), y = static_cast<double>(b.data[i]);
    m = std::max(m, std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1e-8}));
  }
  return m;
}

}  // namespace

TEST_CASE("conv3d: all-ones 3x3x3 kernel sums the neighborhood") {
  Tensor<float> x({1, 1, 5, 5, 5});
  std::fill(x.data.begin(), x.data.end(), 1.0f);
  Tensor<float> w({1, 1, 3, 3, 3});
  std::fill(w.data.begin(), w.data.end(), 1.0f);
  auto y = conv3d(x, w, Dims3{1, 1, 1}, Dims3{1, 1, 1});
  CHECK(y.shape == Shape5{1, 1, 5, 5, 5});
  CHECK(y.at(0, 0, 2, 2, 2) == doctest::Approx(27.0f));   // interior: full support
  CHECK(y.at(0, 0, 0, 0, 0) == doctest::Approx(8.0f));    // corner: 2x2x2 inside
  CHECK(y.at(0, 0, 2, 2, 0) == doctest::Approx(18.0f));   // face
}

TEST_CASE("conv3d: delta kernel at center is the identity") {
  Rng rng(11);
  auto x = random_tensor<float>({2, 3, 4, 5, 6}, rng);
  Tensor<float> w({3, 3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) w.at(c, c, 1, 1, 1) = 1.0f;
  auto y = conv3d(x, w, Dims3{1, 1, 1}, Dims3{1, 1, 1});
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv3d: stride-2 2x2x2 halves every spatial extent") {
  Rng rng(12);
  auto x = random_tensor<float>({1, 2, 8, 8, 8}, rng);
  auto w = random_tensor<float>({4, 2, 2, 2, 2}, rng, 0.2);
  auto y = conv3d(x, w, Dims3{2, 2, 2}, Dims3{0, 0, 0});
  CHECK(y.shape == Shape5{1, 4, 4, 4, 4});
}

TEST_CASE("conv3d GEMM path agrees with the direct-loop reference") {
  Rng rng(13);
  struct Case {
    Shape5 xs;
    Shape5 ws;
    Dims3 stride, pad;
  };
  const Case cases[] = {
      {{2, 3, 6, 5, 7}, {4, 3, 3, 3, 3}, {1, 1, 1}, {1, 1, 1}},
      {{1, 2, 8, 8, 8}, {5, 2, 2, 2, 2}, {2, 2, 2}, {0, 0, 0}},
      {{1, 4, 7, 6, 5}, {3, 4, 1, 1, 1}, {1, 1, 1}, {0, 0, 0}},
      {{1, 1, 9, 4, 4}, {2, 1, 3, 1, 2}, {2, 1, 1}, {0, 0, 1}},
  };
  for (const auto& c : cases) {
    // 64-bit: both routes accumulate in double, so pointwise agreement is tight.
    auto xd = random_tensor<double>(c.xs, rng);
    auto wd = random_tensor<double>(c.ws, rng, 0.3);
    CHECK(max_rel_diff(conv3d(xd, wd, c.stride, c.pad),
                       conv3d_direct(xd, wd, c.stride, c.pad)) < 1e-5);
    // 32-bit: individual outputs can cancel, so measure against the tensor
    // magnitude rather than each (possibly tiny) element.
    auto x = random_tensor<float>(c.xs, rng);
    auto w = random_tensor<float>(c.ws, rng, 0.3);
    auto fast = conv3d(x, w, c.stride, c.pad);
    auto ref = conv3d_direct(x, w, c.stride, c.pad);
    double norm = 0.0;
    for (float v : ref.data) norm = std::max(norm, std::abs(static_cast<double>(v)));
    CHECK(max_abs_diff(fast, ref) < 1e-5 * norm);
  }
}

TEST_CASE("conv3d_backward matches finite differences through the direct path") {
  Rng rng(14);
  auto x = random_tensor<double>({1, 2, 4, 4, 4}, rng);
  auto w = random_tensor<double>({3, 2, 3, 3, 3}, rng, 0.3);
  const Dims3 stride{1, 1, 1}, pad{1, 1, 1};

  // loss = sum(conv(x, w) * t) for a fixed t, so dL/dy = t.
  auto t = random_tensor<double>({1, 3, 4, 4, 4}, rng);
  auto loss = [&] {
    auto y = conv3d(x, w, stride, pad);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.data[i] * t.data[i];
    return s;
  };
  Tensor<double> gx(x.shape), gw(w.shape);
  conv3d_backward(x, w, stride, pad, t, &gx, &gw);

  const double h = 1e-6;
  auto probe = [&](Tensor<double>& target, const Tensor<double>& analytic) {
    Rng pick(99);
    for (int rep = 0; rep < 20; ++rep) {
      const std::size_t i = pick.below(target.size());
      const double keep = target.data[i];
      target.data[i] = keep + h;
      const double fp = loss();
      target.data[i] = keep - h;
      const double fm = loss();
      target.data[i] = keep;
      CHECK(analytic.data[i] == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-5));
    }
  };
  probe(x, gx);
  probe(w, gw);
}

TEST_CASE("conv3d rejects shape and parameter misuse") {
  Tensor<float> x({1, 2, 4, 4, 4});
  Tensor<float> w({3, 3, 3, 3, 3});
  CHECK_THROWS_AS(conv3d(x, w, Dims3{1, 1, 1}, Dims3{1, 1, 1}), DimensionError);
  Tensor<float> w2({3, 2, 3, 3, 3});
  CHECK_THROWS_AS(conv3d(x, w2, Dims3{0, 1, 1}, Dims3{1, 1, 1}), ParameterError);
  // kernel larger than padded extent
  Tensor<float> xs({1, 2, 2, 4, 4});
  CHECK_THROWS_AS(conv3d(xs, w2, Dims3{1, 1, 1}, Dims3{0, 0, 0}), DimensionError);
}

TEST_CASE("conv_transpose3d: stride-2 doubles extents and inverts stride-2 conv shape") {
  Rng rng(15);
  auto x = random_tensor<float>({1, 3, 4, 4, 4}, rng);
  auto w = random_tensor<float>({3, 2, 2, 2, 2}, rng, 0.3);
  auto y = conv_transpose3d(x, w, Dims3{2, 2, 2});
  CHECK(y.shape == Shape5{1, 2, 8, 8, 8});
}

TEST_CASE("conv_transpose3d agrees with explicit scatter") {
  Rng rng(16);
  auto x = random_tensor<float>({2, 2, 3, 3, 3}, rng);
  auto w = random_tensor<float>({2, 3, 2, 2, 2}, rng, 0.5);
  const Dims3 s{2, 2, 2};
  auto y = conv_transpose3d(x, w, s);

  Tensor<float> ref({2, 3, 6, 6, 6});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t ci = 0; ci < 2; ++ci)
      for (std::size_t z = 0; z < 3; ++z)
        for (std::size_t yy = 0; yy < 3; ++yy)
          for (std::size_t xx = 0; xx < 3; ++xx)
            for (std::size_t co = 0; co < 3; ++co)
              for (std::size_t kz = 0; kz < 2; ++kz)
                for (std::size_t ky = 0; ky < 2; ++ky)
                  for (std::size_t kx = 0; kx < 2; ++kx)
                    ref.at(b, co, z * 2 + kz, yy * 2 + ky, xx * 2 + kx) +=
                        x.at(b, ci, z, yy, xx) * w.at(ci, co, kz, ky, kx);
  CHECK(max_rel_diff(y, ref) < 1e-5);
}

TEST_CASE("max_pool3d: values, argmax, first-index ties, odd extents rejected") {
  Tensor<float> x({1, 1, 2, 2, 4});
  std::iota(x.data.begin(), x.data.end(), 0.0f);
  std::vector<std::uint64_t> arg;
  auto y = max_pool3d(x, &arg);
  CHECK(y.shape == Shape5{1, 1, 1, 1, 2});
  CHECK(y.at(0, 0, 0, 0, 0) == 13.0f);  // max of block covering x=0..1
  CHECK(y.at(0, 0, 0, 0, 1) == 15.0f);
  CHECK(arg[0] == 13);
  CHECK(arg[1] == 15);

  Tensor<float> tie({1, 1, 2, 2, 2});
  std::fill(tie.data.begin(), tie.data.end(), 3.0f);
  std::vector<std::uint64_t> arg2;
  max_pool3d(tie, &arg2);
  CHECK(arg2[0] == 0);  // first index wins on ties

  Tensor<float> odd({1, 1, 3, 4, 4});
  CHECK_THROWS_AS(max_pool3d(odd, nullptr), DimensionError);
}

TEST_CASE("batch_norm_train normalizes each channel and tracks running stats") {
  Rng rng(17);
  auto x = random_tensor<double>({2, 3, 3, 3, 3}, rng, 2.0);
  for (auto& v : x.data) v += 5.0;
  std::vector<double> gamma(3, 1.0), beta(3, 0.0), rm(3, 0.0), rv(3, 1.0);
  BnSaved<double> saved;
  auto y = batch_norm_train(x, gamma, beta, 1e-5, 0.9, rm, rv, saved);

  const std::size_t V = x.spatial();
  auto elem = [&](std::size_t b, std::size_t c, std::size_t i) {
    return y.data[(b * 3 + c) * V + i];
  };
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < V; ++i) mean += elem(b, c, i);
    mean /= (2 * V);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < V; ++i) {
        const double d = elem(b, c, i) - mean;
        var += d * d;
      }
    var /= (2 * V);
    CHECK(mean == doctest::Approx(0.0));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    // run = 0.9*run + 0.1*batch with initial (0, 1)
    CHECK(rm[c] == doctest::Approx(0.1 * saved.mean[c]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(batch_norm_train(x, gamma, beta, 0.0, 0.9, rm, rv, saved), ParameterError);
}

TEST_CASE("batch_norm_eval applies the running-stat affine map") {
  Tensor<double> x({1, 2, 1, 1, 2});
  x.data = {1.0, 3.0, -2.0, 4.0};
  std::vector<double> gamma = {2.0, 0.5}, beta = {1.0, -1.0};
  std::vector<double> rm = {2.0, 1.0}, rv = {4.0, 9.0};
  auto y = batch_norm_eval(x, gamma, beta, 1e-14, rm, rv);
  CHECK(y.data[0] == doctest::Approx(2.0 * (1.0 - 2.0) / 2.0 + 1.0));
  CHECK(y.data[1] == doctest::Approx(2.0 * (3.0 - 2.0) / 2.0 + 1.0));
  CHECK(y.data[2] == doctest::Approx(0.5 * (-2.0 - 1.0) / 3.0 - 1.0));
  CHECK(y.data[3] == doctest::Approx(0.5 * (4.0 - 1.0) / 3.0 - 1.0));
}

TEST_CASE("activations: relu, sigmoid stability, softmax normalization") {
  Tensor<double> x({1, 1, 1, 1, 5});
  x.data = {-2.0, -0.5, 0.0, 0.5, 2.0};
  auto r = relu(x);
  CHECK(r.data == std::vector<double>{0.0, 0.0, 0.0, 0.5, 2.0});

  Tensor<double> big({1, 1, 1, 1, 3});
  big.data = {-1000.0, 0.0, 1000.0};
  auto s = sigmoid(big);
  CHECK(s.data[0] == 0.0);
  CHECK(s.data[1] == 0.5);
  CHECK(s.data[2] == 1.0);

  Tensor<double> l({2, 4, 1, 1, 3});
  Rng rng(18);
  for (auto& v : l.data) v = rng.normal() * 50.0;  // large logits: needs max-shift
  auto p = softmax(l, 1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i) {
      double tot = 0.0;
      for (std::size_t c = 0; c < 4; ++c) tot += p.at(b, c, 0, 0, i);
      CHECK(tot == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("dropout: inverted scaling preserves expectation, rate 0 is identity") {
  Rng rng(19);
  Tensor<float> x({1, 1, 8, 8, 8});
  std::fill(x.data.begin(), x.data.end(), 1.0f);
  std::vector<std::uint8_t> mask;
  auto y = dropout_train(x, 0.25, rng, mask);
  double kept = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    kept += mask[i];
    sum += y.data[i];
    if (mask[i])
      CHECK(y.data[i] == doctest::Approx(1.0f / 0.75f));
    else
      CHECK(y.data[i] == 0.0f);
  }
  CHECK(kept / static_cast<double>(y.size()) == doctest::Approx(0.75).epsilon(0.1));
  CHECK(sum / static_cast<double>(y.size()) == doctest::Approx(1.0).epsilon(0.1));

  auto z = dropout_train(x, 0.0, rng, mask);
  CHECK(max_abs_diff(x, z) == 0.0);
  CHECK_THROWS_AS(dropout_train(x, 1.0, rng, mask), ParameterError);
}

TEST_CASE("concat_channels / slice_channels round trip and validation") {
  Rng rng(20);
  auto a = random_tensor<float>({2, 2, 3, 3, 3}, rng);
  auto b = random_tensor<float>({2, 5, 3, 3, 3}, rng);
  auto cat = concat_channels<float>({&a, &b});
  CHECK(cat.shape == Shape5{2, 7, 3, 3, 3});
  CHECK(max_abs_diff(slice_channels(cat, 0, 2), a) == 0.0);
  CHECK(max_abs_diff(slice_channels(cat, 2, 7), b) == 0.0);

  Tensor<float> bad({2, 1, 3, 3, 4});
  CHECK_THROWS_AS(concat_channels<float>({&a, &bad}), DimensionError);
  CHECK_THROWS_AS(slice_channels(cat, 3, 3), ParameterError);
  CHECK_THROWS_AS(slice_channels(cat, 0, 8), DimensionError);
}
