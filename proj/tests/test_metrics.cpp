#include <cmath>
#include <utility>
#include <vector>

#include "doctest.h"
#include "isoseg/losses.hpp"
#include "isoseg/metrics.hpp"
#include "isoseg/rng.hpp"

using namespace isoseg;

namespace {

MaskVolume random_mask(Dims3 dims, Rng& rng, double p_fg, bool force_nonempty) {
  MaskVolume m(dims, 1);
  for (auto& v : m.data) v = rng.uniform() < p_fg;
  if (force_nonempty) m.data[rng.below(m.data.size())] = 1;
  return m;
}

// O(|P|*|R|) reference: directed distances between boundary point sets with
// squared terms accumulated in z,y,x order (same order as the fast path).
std::pair<double, double> brute_hd_asd(const MaskVolume& pred, const MaskVolume& truth,
                                       const Spacing3& sp) {
  const auto P = boundary_voxels(pred), R = boundary_voxels(truth);
  REQUIRE(!P.empty());
  REQUIRE(!R.empty());
  auto directed = [&](const std::vector<std::array<std::size_t, 3>>& from,
                      const std::vector<std::array<std::size_t, 3>>& to) {
    std::vector<double> d;
    d.reserve(from.size());
    for (const auto& a : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& b : to) {
        const double dz = (static_cast<double>(a[0]) - static_cast<double>(b[0])) * sp[0];
        const double dy = (static_cast<double>(a[1]) - static_cast<double>(b[1])) * sp[1];
        const double dx = (static_cast<double>(a[2]) - static_cast<double>(b[2])) * sp[2];
        best = std::min(best, dz * dz + dy * dy + dx * dx);
      }
      d.push_back(std::sqrt(best));
    }
    return d;
  };
  const auto d_pr = directed(P, R), d_rp = directed(R, P);
  double hd = 0.0, sum = 0.0;
  for (double v : d_pr) hd = std::max(hd, v);
  for (double v : d_rp) hd = std::max(hd, v);
  for (double v : d_pr) sum += v;
  for (double v : d_rp) sum += v;
  return {hd, sum / static_cast<double>(d_pr.size() + d_rp.size())};
}

// two-sided p via Simpson integration of the t density (u = sqrt(nu)*tan(th)).
double t_test_p_oracle(double t, std::size_t df) {
  const double nu = static_cast<double>(df);
  const double c = std::exp(std::lgamma((nu + 1.0) / 2.0) - std::lgamma(nu / 2.0)) /
                   std::sqrt(nu * M_PI);
  const double th0 = std::atan(std::abs(t) / std::sqrt(nu));
  const double th1 = M_PI / 2.0;
  const int n = 100000;  // even
  const double h = (th1 - th0) / n;
  auto f = [&](double th) { return c * std::sqrt(nu) * std::pow(std::cos(th), nu - 1.0); };
  double s = f(th0) + f(th1);
  for (int i = 1; i < n; ++i) s += f(th0 + i * h) * (i % 2 ? 4.0 : 2.0);
  return 2.0 * s * h / 3.0;
}

}  // namespace

TEST_CASE("hard Dice") {
  Rng rng(53);
  const MaskVolume a = random_mask({4, 4, 4}, rng, 0.4, true);
  SUBCASE("identity and disjoint") {
    CHECK(dsc(a, a) == 1.0);
    MaskVolume b(a.dims, 1);
    for (std::size_t i = 0; i < a.data.size(); ++i) b.data[i] = !a.data[i];
    CHECK(dsc(a, b) == 0.0);
  }
  SUBCASE("hand count |P|=4, |R|=6, overlap 3") {
    MaskVolume p(Dims3{1, 2, 4}, 1), r(Dims3{1, 2, 4}, 1);
    p.data = {1, 1, 1, 1, 0, 0, 0, 0};
    r.data = {1, 1, 1, 0, 1, 1, 1, 0};
    CHECK(dsc(p, r) == doctest::Approx(0.6).epsilon(1e-15));
  }
  SUBCASE("empty conventions") {
    MaskVolume e(a.dims, 1);
    CHECK(dsc(e, e) == 1.0);
    CHECK(dsc(a, e) == 0.0);
    CHECK(dsc(e, a) == 0.0);
  }
  SUBCASE("shape mismatch") {
    MaskVolume w(Dims3{4, 4, 5}, 1);
    CHECK_THROWS_AS(dsc(a, w), DimensionError);
  }
  SUBCASE("equals soft f-beta at beta 1 on binary input") {
    for (int trial = 0; trial < 50; ++trial) {
      const MaskVolume p = random_mask({4, 4, 4}, rng, 0.4, trial % 5 != 0);
      const MaskVolume g = random_mask({4, 4, 4}, rng, 0.4, trial % 7 != 0);
      Tensor<double> pt(Shape5{1, 1, 4, 4, 4}), gt(Shape5{1, 1, 4, 4, 4});
      for (std::size_t i = 0; i < p.data.size(); ++i) {
        pt.data[i] = p.data[i];
        gt.data[i] = g.data[i];
      }
      CHECK(soft_fbeta_score(pt, gt, 1.0, 1e-12) == doctest::Approx(dsc(p, g)).epsilon(1e-9));
    }
  }
}

TEST_CASE("sensitivity and specificity") {
  MaskVolume p(Dims3{1, 2, 5}, 1), t(Dims3{1, 2, 5}, 1);
  SUBCASE("hand counts TP=3 FN=1 TN=5 FP=1") {
    p.data = {1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
    t.data = {1, 1, 1, 0, 1, 0, 0, 0, 0, 0};
    const auto [sens, spec] = sensitivity_specificity(p, t);
    CHECK(sens == doctest::Approx(0.75));
    CHECK(spec == doctest::Approx(5.0 / 6.0));
  }
  SUBCASE("perfect prediction") {
    t.data = {1, 0, 1, 0, 1, 0, 1, 0, 1, 0};
    const auto [sens, spec] = sensitivity_specificity(t, t);
    CHECK(sens == 1.0);
    CHECK(spec == 1.0);
  }
  SUBCASE("all-positive prediction") {
    for (auto& v : p.data) v = 1;
    t.data = {1, 1, 0, 0, 0, 0, 0, 0, 0, 0};
    const auto [sens, spec] = sensitivity_specificity(p, t);
    CHECK(sens == 1.0);
    CHECK(spec == 0.0);
  }
  SUBCASE("vacuous denominators") {
    // no positives in truth -> sensitivity 1; no negatives -> specificity 1
    MaskVolume empty(p.dims, 1), full(p.dims, 1);
    for (auto& v : full.data) v = 1;
    CHECK(sensitivity_specificity(empty, empty).first == 1.0);
    CHECK(sensitivity_specificity(full, full).second == 1.0);
  }
}

TEST_CASE("boundary extraction") {
  SUBCASE("solid cube has s^3 - (s-2)^3 boundary voxels") {
    for (std::size_t s : {3u, 4u, 5u}) {
      MaskVolume m(Dims3{s + 2, s + 2, s + 2}, 1);
      for (std::size_t z = 1; z <= s; ++z)
        for (std::size_t y = 1; y <= s; ++y)
          for (std::size_t x = 1; x <= s; ++x) m.at(0, z, y, x) = 1;
      CHECK(boundary_voxels(m).size() == s * s * s - (s - 2) * (s - 2) * (s - 2));
    }
  }
  SUBCASE("volume faces count as background") {
    MaskVolume m(Dims3{4, 4, 4}, 1);
    for (auto& v : m.data) v = 1;  // fills the whole volume
    CHECK(boundary_voxels(m).size() == 64 - 8);
  }
  SUBCASE("single voxel is its own boundary") {
    MaskVolume m(Dims3{3, 3, 3}, 1);
    m.at(0, 1, 1, 1) = 1;
    CHECK(boundary_voxels(m).size() == 1);
  }
}

TEST_CASE("squared distance transform is exact") {
  SUBCASE("single seed, unit spacing") {
    MaskVolume seeds(Dims3{5, 6, 7}, 1);
    seeds.at(0, 1, 2, 3) = 1;
    const Volume<double> d = squared_edt(seeds, {1.0, 1.0, 1.0});
    for (std::size_t z = 0; z < 5; ++z)
      for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 7; ++x) {
          const double dz = static_cast<double>(z) - 1.0, dy = static_cast<double>(y) - 2.0,
                       dx = static_cast<double>(x) - 3.0;
          CHECK(d.at(0, z, y, x) == dz * dz + dy * dy + dx * dx);
        }
  }
  SUBCASE("two seeds, anisotropic spacing") {
    MaskVolume seeds(Dims3{4, 4, 8}, 1);
    seeds.at(0, 0, 0, 0) = 1;
    seeds.at(0, 3, 3, 7) = 1;
    const Spacing3 sp{2.0, 1.0, 0.5};
    const Volume<double> d = squared_edt(seeds, sp);
    for (std::size_t z = 0; z < 4; ++z)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          auto sq = [&](double a) { return a * a; };
          const double d0 = sq(z * sp[0]) + sq(y * sp[1]) + sq(x * sp[2]);
          const double d1 =
              sq((3.0 - z) * sp[0]) + sq((3.0 - y) * sp[1]) + sq((7.0 - x) * sp[2]);
          CHECK(d.at(0, z, y, x) == doctest::Approx(std::min(d0, d1)).epsilon(1e-12));
        }
  }
  SUBCASE("no seeds leaves infinity") {
    MaskVolume seeds(Dims3{2, 2, 2}, 1);
    const Volume<double> d = squared_edt(seeds, {1.0, 1.0, 1.0});
    for (double v : d.data) CHECK(v == std::numeric_limits<double>::infinity());
  }
  SUBCASE("invalid spacing") {
    MaskVolume seeds(Dims3{2, 2, 2}, 1);
    CHECK_THROWS_AS(squared_edt(seeds, {1.0, 0.0, 1.0}), ParameterError);
  }
}

TEST_CASE("surface distances") {
  SUBCASE("identical masks give zero") {
    Rng rng(59);
    const MaskVolume m = random_mask({6, 6, 6}, rng, 0.3, true);
    CHECK(hausdorff(m, m) == 0.0);
    CHECK(asd(m, m) == 0.0);
  }
  SUBCASE("single-voxel pair") {
    MaskVolume p(Dims3{1, 1, 4}, 1), r(Dims3{1, 1, 4}, 1);
    p.data = {1, 0, 0, 0};
    r.data = {0, 0, 0, 1};
    CHECK(hausdorff(p, r) == 3.0);
    CHECK(asd(p, r) == 3.0);
    CHECK(hausdorff(p, r, {1.0, 1.0, 0.5}) == 1.5);
  }
  SUBCASE("parallel one-voxel-thick slabs") {
    MaskVolume a(Dims3{4, 3, 3}, 1), b(Dims3{4, 3, 3}, 1);
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 3; ++x) {
        a.at(0, 0, y, x) = 1;
        b.at(0, 1, y, x) = 1;
      }
    CHECK(asd(a, b) == 1.0);
    CHECK(hausdorff(a, b) == 1.0);
  }
  SUBCASE("empty masks are undefined") {
    MaskVolume m(Dims3{3, 3, 3}, 1), e(Dims3{3, 3, 3}, 1);
    m.at(0, 1, 1, 1) = 1;
    CHECK_THROWS_AS(hausdorff(m, e), DegenerateError);
    CHECK_THROWS_AS(hausdorff(e, m), DegenerateError);
    CHECK_THROWS_AS(asd(e, e), DegenerateError);
  }
  SUBCASE("matches brute force on random masks") {
    Rng rng(61);
    for (int trial = 0; trial < 50; ++trial) {
      const MaskVolume p = random_mask({8, 8, 8}, rng, 0.25, true);
      const MaskVolume r = random_mask({8, 8, 8}, rng, 0.25, true);
      const auto [hd_ref, asd_ref] = brute_hd_asd(p, r, {1.0, 1.0, 1.0});
      CHECK(hausdorff(p, r) == hd_ref);  // exact: integer squared distances
      CHECK(asd(p, r) == doctest::Approx(asd_ref).epsilon(1e-9));
      CHECK(hausdorff(p, r) == hausdorff(r, p));
      CHECK(asd(p, r) == asd(r, p));
    }
  }
  SUBCASE("matches brute force with anisotropic spacing") {
    Rng rng(67);
    const Spacing3 sp{1.5, 1.0, 0.75};
    for (int trial = 0; trial < 10; ++trial) {
      const MaskVolume p = random_mask({6, 6, 6}, rng, 0.3, true);
      const MaskVolume r = random_mask({6, 6, 6}, rng, 0.3, true);
      const auto [hd_ref, asd_ref] = brute_hd_asd(p, r, sp);
      CHECK(hausdorff(p, r, sp) == doctest::Approx(hd_ref).epsilon(1e-12));
      CHECK(asd(p, r, sp) == doctest::Approx(asd_ref).epsilon(1e-12));
    }
  }
  SUBCASE("translation invariance") {
    Rng rng(71);
    MaskVolume p(Dims3{10, 10, 10}, 1), r(p.dims, 1), ps(p.dims, 1), rs(p.dims, 1);
    for (std::size_t z = 0; z < 4; ++z)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
          const bool pv = rng.uniform() < 0.4, rv = rng.uniform() < 0.4;
          p.at(0, z, y, x) = pv;
          r.at(0, z, y, x) = rv;
          ps.at(0, z + 2, y + 1, x + 3) = pv;
          rs.at(0, z + 2, y + 1, x + 3) = rv;
        }
    p.at(0, 0, 0, 0) = r.at(0, 1, 1, 1) = 1;
    ps.at(0, 2, 1, 3) = rs.at(0, 3, 2, 4) = 1;
    CHECK(hausdorff(p, r) == hausdorff(ps, rs));
    CHECK(asd(p, r) == asd(ps, rs));
    CHECK(dsc(p, r) == dsc(ps, rs));
  }
  SUBCASE("hausdorff equals the max of the directed arrays") {
    Rng rng(73);
    const MaskVolume p = random_mask({7, 7, 7}, rng, 0.3, true);
    const MaskVolume r = random_mask({7, 7, 7}, rng, 0.3, true);
    const SurfaceDistanceStats st = surface_distances(p, r, {1.0, 1.0, 1.0});
    double mx = 0.0;
    for (double v : st.pred_to_truth) mx = std::max(mx, v);
    for (double v : st.truth_to_pred) mx = std::max(mx, v);
    CHECK(hausdorff(p, r) == mx);
    CHECK(st.pred_to_truth.size() == st.boundary_pred.size());
    CHECK(st.truth_to_pred.size() == st.boundary_truth.size());
  }
}

TEST_CASE("paired t-test") {
  SUBCASE("hand case against numeric integration") {
    const std::vector<double> a{1.0, 1.2, 0.8, 1.1, 0.9};
    const std::vector<double> b{0.5, 0.5, 0.5, 0.5, 0.5};
    // differences {0.5, 0.7, 0.3, 0.6, 0.4}: mean 0.5, sd sqrt(0.025)
    const TTestResult r = paired_t_test(a, b);
    CHECK(r.df == 4);
    CHECK(r.t == doctest::Approx(0.5 / (std::sqrt(0.025) / std::sqrt(5.0))).epsilon(1e-12));
    CHECK(r.p == doctest::Approx(t_test_p_oracle(r.t, r.df)).epsilon(1e-6));
    CHECK(r.p < 0.05);
  }
  SUBCASE("random cases against numeric integration") {
    Rng rng(79);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 3 + rng.below(8);
      std::vector<double> a(n), b(n);
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = rng.normal();
        b[i] = rng.normal() * 0.5 + 0.2;
      }
      const TTestResult r = paired_t_test(a, b);
      CHECK(r.p == doctest::Approx(t_test_p_oracle(r.t, r.df)).epsilon(1e-6));
      CHECK(r.p >= 0.0);
      CHECK(r.p <= 1.0);
      const TTestResult rev = paired_t_test(b, a);
      CHECK(rev.t == doctest::Approx(-r.t).epsilon(1e-12));
      CHECK(rev.p == doctest::Approx(r.p).epsilon(1e-12));
    }
  }
  SUBCASE("zero mean difference gives p exactly 1") {
    const TTestResult r = paired_t_test({1.0, 2.0, 3.0}, {2.0, 1.0, 3.0});
    // differences {-1, 1, 0}: mean 0 -> t = 0 -> p = 1
    CHECK(r.t == 0.0);
    CHECK(r.p == 1.0);
  }
  SUBCASE("degenerate inputs") {
    CHECK_THROWS_AS(paired_t_test({1.0, 2.0}, {1.0}), ParameterError);
    CHECK_THROWS_AS(paired_t_test({1.0}, {0.5}), DegenerateError);
    const std::vector<double> a{1.0, 2.0, 3.0};
    CHECK_THROWS_AS(paired_t_test(a, a), DegenerateError);  // all differences zero
    CHECK_THROWS_AS(paired_t_test({2.0, 3.0, 4.0}, {1.0, 2.0, 3.0}),
                    DegenerateError);  // constant nonzero differences
  }
}
