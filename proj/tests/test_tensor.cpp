#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <stdexcept>

#include "l2aot/rng.hpp"
#include "l2aot/tensor.hpp"

using namespace l2aot;

TEST_CASE("shape bookkeeping") {
  CHECK(shape_numel({}) == 1);
  CHECK(shape_numel({3, 4}) == 12);
  CHECK(shape_str({1, 2, 3}) == "[1,2,3]");
}

TEST_CASE("tensor construction and invariants") {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(4) == 5.0);
  CHECK(t.all_finite());

  CHECK_THROWS_AS(Tensor::from({2, 3}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({-1}), std::invalid_argument);
}

TEST_CASE("tensor copies share storage; edits produce fresh tensors") {
  Tensor a = Tensor::full({4}, 7.0);
  Tensor b = a;
  CHECK(a.same_data(b));
  Tensor c = a.with_value(2, 9.0);
  CHECK_FALSE(c.same_data(a));
  CHECK(a.at(2) == 7.0);
  CHECK(c.at(2) == 9.0);
}

TEST_CASE("reshape shares data and checks element count") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor r = a.reshaped({4});
  CHECK(r.same_data(a));
  CHECK_THROWS_AS(a.reshaped({3}), std::invalid_argument);
}

TEST_CASE("scalar tensors") {
  Tensor s = Tensor::scalar(2.5);
  CHECK(s.rank() == 0);
  CHECK(s.numel() == 1);
  CHECK(s.scalar_value() == 2.5);
  CHECK_THROWS_AS(Tensor::from({2}, {1, 2}).scalar_value(), std::invalid_argument);
}

TEST_CASE("non-finite detection") {
  Tensor bad = Tensor::from({2}, {1.0, std::numeric_limits<double>::infinity()});
  CHECK_FALSE(bad.all_finite());
}

TEST_CASE("param set keeps insertion order and rejects duplicates") {
  ParamSet p;
  p.add("b", Tensor::zeros({2}));
  p.add("a", Tensor::zeros({3}));
  CHECK(p.items()[0].first == "b");
  CHECK(p.items()[1].first == "a");
  CHECK(p.total_numel() == 5);
  CHECK_THROWS_AS(p.add("a", Tensor::zeros({1})), std::invalid_argument);
  CHECK_THROWS_AS(p.set("a", Tensor::zeros({4})), std::invalid_argument);
  p.set("a", Tensor::full({3}, 1.0));
  CHECK(p.get("a").at(0) == 1.0);
}

TEST_CASE("rng streams are reproducible") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng c(42);
  Rng d(43);
  bool any_diff = false;
  for (int i = 0; i < 10; ++i) any_diff |= (c.next_u64() != d.next_u64());
  CHECK(any_diff);
}

TEST_CASE("rng uniform_int is in range and roughly uniform") {
  Rng r(7);
  std::vector<int> counts(6, 0);
  for (int i = 0; i < 60000; ++i) {
    int64_t v = r.uniform_int(6);
    REQUIRE(v >= 0);
    REQUIRE(v < 6);
    counts[static_cast<size_t>(v)]++;
  }
  for (int c : counts) {
    CHECK(c > 9000);
    CHECK(c < 11000);
  }
}

TEST_CASE("rng normal has sane moments") {
  Rng r(11);
  double sum = 0.0, sq = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    double v = r.normal();
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("rng permutation covers all indices") {
  Rng r(5);
  auto p = r.permutation(50);
  std::vector<bool> seen(50, false);
  for (int64_t v : p) seen[static_cast<size_t>(v)] = true;
  for (bool s : seen) CHECK(s);
}
