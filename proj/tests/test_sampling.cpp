#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <map>
#include <set>

#include <boost/math/distributions/chi_squared.hpp>

#include "odl/error.hpp"
#include "odl/sampling.hpp"

using namespace odl;

namespace {

using Subset = std::array<int, 3>;

Subset sorted(const Triple& t) {
  Subset s = t.indices;
  std::sort(s.begin(), s.end());
  return s;
}

// Independent enumeration of 3-subsets of {-2..hi}.
std::set<Subset> all_subsets(int hi) {
  std::set<Subset> out;
  for (int a = -2; a <= hi; ++a)
    for (int b = -2; b <= hi; ++b)
      for (int c = -2; c <= hi; ++c)
        if (a < b && b < c) out.insert({a, b, c});
  return out;
}

}  // namespace

TEST_CASE("classify_triple") {
  CHECK(classify_triple({1, 4, 2}) == OrderLabel::kMisordered);
  CHECK(classify_triple({1, 2, 3}) == OrderLabel::kOrdered);
  CHECK_THROWS_AS(classify_triple({3, 2, 1}), PatternError);
  CHECK_THROWS_AS(classify_triple({2, 1, 3}), PatternError);
  CHECK_THROWS_AS(classify_triple({1, 1, 3}), PatternError);
}

TEST_CASE("misordered presentation swaps the last two") {
  CHECK(present(1, 2, 4, OrderLabel::kMisordered).indices == std::array<int, 3>{1, 4, 2});
  CHECK(present(-2, -1, 0, OrderLabel::kMisordered).indices == std::array<int, 3>{-2, 0, -1});
  CHECK(present(-2, -1, 0, OrderLabel::kOrdered).indices == std::array<int, 3>{-2, -1, 0});
}

TEST_CASE("sampled triples stay within the padded range") {
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    auto t = sample_ordered_triple(5, rng);
    CHECK(t.indices[0] >= -2);
    CHECK(t.indices[2] <= 5);
    CHECK(t.indices[0] < t.indices[1]);
    CHECK(t.indices[1] < t.indices[2]);
    CHECK(t.label == OrderLabel::kOrdered);
  }
  std::set<Subset> seen;
  for (int i = 0; i < 500; ++i) seen.insert(sorted(sample_ordered_triple(1, rng)));
  CHECK(seen == all_subsets(1));
  CHECK(seen.size() == 4);
}

TEST_CASE("10^4 ordered draws at t=2 cover all 10 subsets") {
  Rng rng(5);
  std::set<Subset> seen;
  for (int i = 0; i < 10000; ++i) seen.insert(sorted(sample_ordered_triple(2, rng)));
  CHECK(seen == all_subsets(2));
}

TEST_CASE("pattern closure over randomized draws") {
  Rng rng(17);
  for (int i = 0; i < 100000; ++i) {
    const int t = static_cast<int>(rng.uniform_int(0, 12));
    const auto label = rng.bernoulli(0.5) ? OrderLabel::kOrdered : OrderLabel::kMisordered;
    auto tr = sample_triple(t, label, rng);
    REQUIRE(classify_triple(tr.indices) == label);
    if (t >= 1) {
      auto target = sample_target_triple(t, label, rng);
      REQUIRE(classify_triple(target.indices) == label);
      REQUIRE(target.contains(t));
    }
  }
}

TEST_CASE("target triples include t and cover every earlier pair") {
  Rng rng(23);
  auto t3 = sample_target_triple(3, OrderLabel::kOrdered, rng);
  CHECK(t3.indices[2] == 3);
  CHECK(t3.indices[1] < 3);
  std::set<std::pair<int, int>> seen;
  for (int i = 0; i < 10000; ++i) {
    auto tr = sample_target_triple(4, OrderLabel::kMisordered, rng);
    CHECK(tr.indices[1] == 4);
    seen.insert({tr.indices[0], tr.indices[2]});
  }
  std::set<std::pair<int, int>> expected;
  for (int a = -2; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b) expected.insert({a, b});
  CHECK(seen == expected);
  CHECK_THROWS(sample_target_triple(0, OrderLabel::kOrdered, rng));
}

TEST_CASE("references never contain t and follow the strategy") {
  Rng rng(29);
  for (int i = 0; i < 20000; ++i) {
    const int t = static_cast<int>(rng.uniform_int(1, 10));
    for (auto s : {ReferenceStrategy::kBothOrdered, ReferenceStrategy::kBothMisordered,
                   ReferenceStrategy::kOneEach}) {
      auto [r1, r2] = sample_references(t, s, rng);
      REQUIRE_FALSE(r1.contains(t));
      REQUIRE_FALSE(r2.contains(t));
      REQUIRE(r1.indices[0] >= -2);
      const auto l1 = classify_triple(r1.indices), l2 = classify_triple(r2.indices);
      switch (s) {
        case ReferenceStrategy::kBothOrdered:
          REQUIRE((l1 == OrderLabel::kOrdered && l2 == OrderLabel::kOrdered));
          break;
        case ReferenceStrategy::kBothMisordered:
          REQUIRE((l1 == OrderLabel::kMisordered && l2 == OrderLabel::kMisordered));
          break;
        case ReferenceStrategy::kOneEach:
          REQUIRE((l1 == OrderLabel::kOrdered && l2 == OrderLabel::kMisordered));
          break;
      }
    }
  }
  auto [a, b] = sample_references(1, ReferenceStrategy::kOneEach, rng);
  CHECK(sorted(a) == Subset{-2, -1, 0});
  CHECK(sorted(b) == Subset{-2, -1, 0});
}

TEST_CASE("enumerate_triples") {
  CHECK(enumerate_triples(2, OrderLabel::kOrdered).size() == 10);
  CHECK(enumerate_triples(2, OrderLabel::kMisordered).size() == 10);
  CHECK(enumerate_triples(0, OrderLabel::kOrdered).size() == 1);
  CHECK(enumerate_triples(20, OrderLabel::kOrdered).size() == 23 * 22 * 21 / 6);
  CHECK_THROWS(enumerate_triples(21, OrderLabel::kOrdered));
  auto mis = enumerate_triples(3, OrderLabel::kMisordered);
  std::set<Subset> uniq;
  for (auto& t : mis) {
    CHECK(classify_triple(t.indices) == OrderLabel::kMisordered);
    uniq.insert(sorted(t));
  }
  CHECK(uniq == all_subsets(3));
}

TEST_CASE("ordered draws are uniform over 3-subsets (chi-square, alpha 0.001)") {
  Rng rng(31);
  for (int t = 0; t <= 5; ++t) {
    auto support = enumerate_triples(t, OrderLabel::kOrdered);
    std::map<Subset, long> counts;
    const long draws = 100000;
    for (long i = 0; i < draws; ++i) ++counts[sample_ordered_triple(t, rng).indices];
    CHECK(counts.size() == support.size());
    if (support.size() < 2) continue;
    const double expected = static_cast<double>(draws) / static_cast<double>(support.size());
    double chi2 = 0;
    for (auto& tr : support) {
      const double d = static_cast<double>(counts[tr.indices]) - expected;
      chi2 += d * d / expected;
    }
    boost::math::chi_squared dist(static_cast<double>(support.size() - 1));
    CHECK(chi2 < boost::math::quantile(dist, 0.999));
  }
}

TEST_CASE("identical seeds give identical draw sequences") {
  Rng a(99), b(99);
  for (int i = 0; i < 1000; ++i) {
    CHECK(sample_target_triple(7, OrderLabel::kOrdered, a) == sample_target_triple(7, OrderLabel::kOrdered, b));
  }
  Rng c = Rng(99).split("sampler"), d = Rng(99).split("sampler"), e = Rng(99).split("init");
  CHECK(c() == d());
  CHECK(Rng(99).split("sampler")() != e());
}

TEST_CASE("strategy names") {
  CHECK(parse_strategy("one-each") == ReferenceStrategy::kOneEach);
  CHECK(to_string(ReferenceStrategy::kBothMisordered) == "both-misordered");
  CHECK_THROWS_AS(parse_strategy("all"), ConfigError);
}
