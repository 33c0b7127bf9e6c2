#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "l2aot/ot.hpp"
#include "l2aot/rng.hpp"

using namespace l2aot;

namespace {

CostMatrix random_cost(int64_t n, int64_t m, Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::vector<double> c(static_cast<size_t>(n * m));
  for (auto& v : c) v = rng.uniform(lo, hi);
  return uniform_cost_matrix(n, m, std::move(c));
}

Tensor random_features(int64_t n, int64_t d, Rng& rng, double center = 0.0, double spread = 1.0) {
  std::vector<double> v(static_cast<size_t>(n * d));
  for (auto& x : v) x = center + spread * rng.normal();
  return Tensor::from({n, d}, std::move(v));
}

// independent recursive enumeration, cross-checks the next_permutation oracle
double enumerate_min_assignment(const CostMatrix& c) {
  std::vector<bool> used(static_cast<size_t>(c.m), false);
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> partial;
  auto rec = [&](auto&& self, int64_t row, double acc) -> void {
    if (row == c.n) {
      best = std::min(best, acc / static_cast<double>(c.n));
      return;
    }
    for (int64_t j = 0; j < c.m; ++j) {
      if (used[static_cast<size_t>(j)]) continue;
      used[static_cast<size_t>(j)] = true;
      self(self, row + 1, acc + c.at(row, j));
      used[static_cast<size_t>(j)] = false;
    }
  };
  rec(rec, 0, 0.0);
  return best;
}

SinkhornSettings tight(double eps_rel, double tol = 1e-9) {
  SinkhornSettings s;
  s.epsilon = eps_rel;
  s.max_iterations = 1000000;
  s.tolerance = tol;
  return s;
}

}  // namespace

TEST_CASE("sinkhorn settings validated") {
  CostMatrix c = uniform_cost_matrix(1, 1, {0.5});
  SinkhornSettings s;
  s.epsilon = 0.0;
  CHECK_THROWS_AS(sinkhorn(c, s), std::invalid_argument);
  s = {};
  s.tolerance = -1;
  CHECK_THROWS_AS(sinkhorn(c, s), std::invalid_argument);
}

TEST_CASE("sinkhorn: 1x1 puts all mass on the single cell") {
  CostMatrix c = uniform_cost_matrix(1, 1, {0.37});
  SinkhornResult r = sinkhorn(c, {});
  CHECK(r.plan.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.sharp_cost == doctest::Approx(0.37).epsilon(1e-12));
  CHECK(r.plan.converged);
}

TEST_CASE("sinkhorn: small epsilon recovers the diagonal pairing") {
  CostMatrix c = uniform_cost_matrix(2, 2, {0, 1, 1, 0});
  SinkhornResult r = sinkhorn(c, tight(0.01, 1e-6));
  CHECK(r.plan.converged);
  CHECK(r.plan.at(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(r.plan.at(1, 1) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(r.sharp_cost < 1e-6);
  CHECK(exact_ot_bruteforce(c) == 0.0);
}

TEST_CASE("sinkhorn: huge epsilon gives the max-entropy outer-product plan") {
  Rng rng(5);
  CostMatrix c = random_cost(3, 5, rng);
  SinkhornResult r = sinkhorn(c, tight(1e6));
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t j = 0; j < 5; ++j) {
      CHECK(std::abs(r.plan.at(i, j) - (1.0 / 3.0) * (1.0 / 5.0)) < 1e-6);
    }
  }
}

TEST_CASE("sinkhorn: zero cost matrix handled without logs of zero") {
  CostMatrix c = uniform_cost_matrix(3, 3, std::vector<double>(9, 0.0));
  SinkhornResult r = sinkhorn(c, {});
  CHECK(r.sharp_cost == 0.0);
  CHECK(r.plan.converged);
  CHECK(r.plan.total_mass() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("sinkhorn: non-convergence reported via flag, not thrown") {
  Rng rng(9);
  CostMatrix c = random_cost(6, 6, rng);
  SinkhornSettings s;
  s.epsilon = 0.001;
  s.max_iterations = 1;
  s.tolerance = 1e-12;
  SinkhornResult r = sinkhorn(c, s);
  CHECK_FALSE(r.plan.converged);
  CHECK(r.plan.iterations == 1);
}

TEST_CASE("exact_ot_bruteforce: trivial cases") {
  CHECK(exact_ot_bruteforce(uniform_cost_matrix(3, 3, std::vector<double>(9, 0.0))) == 0.0);
  CHECK(exact_ot_bruteforce(uniform_cost_matrix(2, 2, {0, 1, 1, 0})) == 0.0);
  CHECK_THROWS_AS(exact_ot_bruteforce(uniform_cost_matrix(2, 3, std::vector<double>(6, 0.0))),
                  std::invalid_argument);
  CHECK_THROWS_AS(exact_ot_bruteforce(uniform_cost_matrix(7, 7, std::vector<double>(49, 0.0))),
                  std::invalid_argument);
}

TEST_CASE("exact_ot_bruteforce: agrees with independent enumeration") {
  Rng rng(21);
  for (int rep = 0; rep < 10; ++rep) {
    CostMatrix c = random_cost(4, 4, rng);
    CHECK(exact_ot_bruteforce(c) == doctest::Approx(enumerate_min_assignment(c)).epsilon(1e-12));
  }
}

TEST_CASE("oracle sandwich: sharp cost within 2% of exact and never below") {
  Rng rng(33);
  for (int rep = 0; rep < 50; ++rep) {
    const int64_t n = 2 + rng.uniform_int(4);  // 2..5
    CostMatrix c = random_cost(n, n, rng, 0.05, 1.0);
    const double exact = exact_ot_bruteforce(c);
    SinkhornResult r = sinkhorn(c, tight(0.01, 1e-6));
    REQUIRE(r.plan.converged);
    CHECK(r.plan.marginal_violation < 1e-6);
    CHECK(r.sharp_cost >= exact - 1e-9);
    CHECK(r.sharp_cost <= exact * 1.02 + 1e-12);
  }
}

TEST_CASE("plan feasibility on random rectangular instances") {
  Rng rng(55);
  for (int rep = 0; rep < 10; ++rep) {
    const int64_t n = 2 + rng.uniform_int(7);
    const int64_t m = 2 + rng.uniform_int(7);
    CostMatrix c = random_cost(n, m, rng);
    SinkhornResult r = sinkhorn(c, {});
    for (double v : r.plan.mass) CHECK(v >= 0.0);
    CHECK(std::abs(r.plan.total_mass() - 1.0) < 1e-9);
    for (int64_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (int64_t j = 0; j < m; ++j) row += r.plan.at(i, j);
      CHECK(std::abs(row - 1.0 / static_cast<double>(n)) <= r.plan.marginal_violation + 1e-15);
    }
  }
}

TEST_CASE("sharp cost is non-increasing as epsilon decreases") {
  Rng rng(77);
  const std::vector<double> grid = {1.0, 0.3, 0.1, 0.03, 0.01};
  for (int rep = 0; rep < 8; ++rep) {
    CostMatrix c = random_cost(5, 5, rng, 0.05, 1.0);
    double prev = std::numeric_limits<double>::infinity();
    for (double e : grid) {
      SinkhornResult r = sinkhorn(c, tight(e));
      CHECK(r.sharp_cost <= prev + 1e-9);
      prev = r.sharp_cost;
    }
  }
}

TEST_CASE("W symmetry under transposition") {
  Rng rng(88);
  Tensor fa = random_features(4, 16, rng);
  Tensor fb = random_features(4, 16, rng);
  SinkhornSettings s = tight(0.1);
  double wab = sinkhorn(cosine_cost_matrix(fa, fb), s).sharp_cost;
  double wba = sinkhorn(cosine_cost_matrix(fb, fa), s).sharp_cost;
  CHECK(std::abs(wab - wba) < 1e-12);
}

TEST_CASE("energy distance: exactly zero for four identical batches") {
  Rng rng(99);
  Tensor f = random_features(6, 32, rng);
  double d = energy_distance(f, f, f, f, {});
  CHECK(d == 0.0);
}

TEST_CASE("energy distance: symmetric under distribution swap") {
  Rng rng(111);
  Tensor fa = random_features(4, 16, rng, 0.0, 1.0);
  Tensor fa2 = random_features(4, 16, rng, 0.0, 1.0);
  Tensor fb = random_features(4, 16, rng, 2.0, 1.0);
  Tensor fb2 = random_features(4, 16, rng, 2.0, 1.0);
  SinkhornSettings s = tight(0.1);
  double d1 = energy_distance(fa, fa2, fb, fb2, s);
  double d2 = energy_distance(fb, fb2, fa, fa2, s);
  CHECK(std::abs(d1 - d2) < 1e-12);
}

TEST_CASE("energy distance: separated clouds exceed overlapping clouds") {
  Rng rng(123);
  const int64_t n = 4, d = 8;
  // separated: distinct directions in feature space; overlapping: same cloud
  Tensor sep_a = random_features(n, d, rng, 3.0, 0.2);
  Tensor sep_a2 = random_features(n, d, rng, 3.0, 0.2);
  std::vector<double> neg(static_cast<size_t>(n * d));
  for (auto& v : neg) v = -3.0 + 0.2 * rng.normal();
  Tensor sep_b = Tensor::from({n, d}, neg);
  std::vector<double> neg2(static_cast<size_t>(n * d));
  for (auto& v : neg2) v = -3.0 + 0.2 * rng.normal();
  Tensor sep_b2 = Tensor::from({n, d}, neg2);

  Tensor ovl_a = random_features(n, d, rng, 1.0, 0.5);
  Tensor ovl_a2 = random_features(n, d, rng, 1.0, 0.5);
  Tensor ovl_b = random_features(n, d, rng, 1.0, 0.5);
  Tensor ovl_b2 = random_features(n, d, rng, 1.0, 0.5);

  SinkhornSettings s = tight(0.05);
  const double d_sep = energy_distance(sep_a, sep_a2, sep_b, sep_b2, s);
  const double d_ovl = energy_distance(ovl_a, ovl_a2, ovl_b, ovl_b2, s);
  CHECK(d_sep > d_ovl);

  // same ordering via the exact brute-force OT at n=4
  auto exact_energy = [&](const Tensor& a, const Tensor& a2, const Tensor& b, const Tensor& b2) {
    return 2.0 * exact_ot_bruteforce(cosine_cost_matrix(a, b)) -
           exact_ot_bruteforce(cosine_cost_matrix(a, a2)) -
           exact_ot_bruteforce(cosine_cost_matrix(b, b2));
  };
  CHECK(exact_energy(sep_a, sep_a2, sep_b, sep_b2) > exact_energy(ovl_a, ovl_a2, ovl_b, ovl_b2));
}

TEST_CASE("danskin: gradient of the regularized value w.r.t. C is the plan") {
  Rng rng(131);
  CostMatrix c = random_cost(4, 4, rng, 0.1, 1.0);
  SinkhornSettings s;
  s.epsilon = 0.1;
  s.max_iterations = 50000;
  s.tolerance = 1e-13;
  SinkhornResult base = sinkhorn(c, s);
  REQUIRE(base.plan.converged);

  // epsilon is relative to mean(C); keep eps_abs fixed under perturbation so
  // the FD probes the value at constant regularization strength
  const double eps_abs = s.epsilon * c.mean_cost();
  for (int probe = 0; probe < 8; ++probe) {
    const int64_t i = rng.uniform_int(4), j = rng.uniform_int(4);
    const double h = 1e-6;
    auto perturbed_value = [&](double delta) {
      CostMatrix cp = c;
      cp.cost[static_cast<size_t>(i * 4 + j)] += delta;
      SinkhornSettings sp = s;
      sp.epsilon = eps_abs / cp.mean_cost();
      return sinkhorn(cp, sp).regularized_value;
    };
    const double numeric = (perturbed_value(h) - perturbed_value(-h)) / (2.0 * h);
    const double analytic = base.plan.at(i, j);
    CHECK(std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)}) <
          1e-4);
  }
}

TEST_CASE("graph node: sharp-cost gradient w.r.t. C equals the frozen plan") {
  Rng rng(141);
  std::vector<double> cv(16);
  for (auto& v : cv) v = rng.uniform(0.1, 1.0);
  Graph g;
  NodeId cn = g.input("C", Tensor::from({4, 4}, cv).with_requires_grad(true));
  SinkhornCostNode sc = sinkhorn_sharp_cost_node(g, cn, tight(0.1));
  g.backward(sc.node);
  Tensor gc = g.grad(cn);
  for (int64_t i = 0; i < 16; ++i) {
    CHECK(gc.at(i) == doctest::Approx(sc.plan.mass[static_cast<size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("graph node: energy distance value matches the plain API") {
  Rng rng(151);
  Tensor fa = random_features(4, 8, rng);
  Tensor fa2 = random_features(4, 8, rng);
  Tensor fb = random_features(4, 8, rng, 1.5, 1.0);
  Tensor fb2 = random_features(4, 8, rng, 1.5, 1.0);
  SinkhornSettings s = tight(0.1);
  Graph g;
  EnergyDistanceNode ed = energy_distance_node(g, g.input("fa", fa), g.input("fa2", fa2),
                                               g.input("fb", fb), g.input("fb2", fb2), s);
  CHECK(g.scalar_value(ed.node) == doctest::Approx(energy_distance(fa, fa2, fb, fb2, s)).epsilon(1e-12));
}
