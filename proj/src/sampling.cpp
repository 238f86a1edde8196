#include "odl/sampling.hpp"

#include <algorithm>

#include "odl/error.hpp"

namespace odl {

void validate(const SamplerConfig& config) {
  if (config.m < 1) throw ConfigError("sampler: m must be >= 1");
  if (config.n_target < 1) throw ConfigError("sampler: n_target must be >= 1");
}

std::string to_string(ReferenceStrategy s) {
  switch (s) {
    case ReferenceStrategy::kBothOrdered: return "both-ordered";
    case ReferenceStrategy::kBothMisordered: return "both-misordered";
    case ReferenceStrategy::kOneEach: return "one-each";
  }
  return "?";
}

ReferenceStrategy parse_strategy(std::string_view name) {
  if (name == "both-ordered") return ReferenceStrategy::kBothOrdered;
  if (name == "both-misordered") return ReferenceStrategy::kBothMisordered;
  if (name == "one-each") return ReferenceStrategy::kOneEach;
  throw ConfigError("unknown reference strategy '" + std::string(name) + "'");
}

double label_value(OrderLabel label) { return label == OrderLabel::kMisordered ? 1.0 : 0.0; }

OrderLabel classify_triple(const std::array<int, 3>& p) {
  if (p[0] == p[1] || p[1] == p[2] || p[0] == p[2]) {
    throw PatternError("triple indices must be distinct");
  }
  if (p[0] < p[1] && p[1] < p[2]) return OrderLabel::kOrdered;
  if (p[0] < p[2] && p[2] < p[1]) return OrderLabel::kMisordered;
  throw PatternError("presentation (" + std::to_string(p[0]) + ", " + std::to_string(p[1]) + ", " +
                     std::to_string(p[2]) + ") is neither ordered nor the (i,k,j) misordered pattern");
}

Triple present(int a, int b, int c, OrderLabel label) {
  Triple t;
  t.label = label;
  t.indices = label == OrderLabel::kOrdered ? std::array<int, 3>{a, b, c} : std::array<int, 3>{a, c, b};
  return t;
}

namespace {

// Uniform k-subset of [lo, hi] via Floyd's algorithm, sorted ascending.
template <std::size_t K>
std::array<int, K> sample_subset(int lo, int hi, Rng& rng) {
  const int n = hi - lo + 1;
  if (n < static_cast<int>(K)) {
    throw Error("need at least " + std::to_string(K) + " indices in [" + std::to_string(lo) + ", " +
                std::to_string(hi) + "]");
  }
  std::array<int, K> out{};
  std::size_t filled = 0;
  for (int j = n - static_cast<int>(K); j < n; ++j) {
    int v = static_cast<int>(rng.uniform_int(0, j));
    if (std::find(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(filled), v) !=
        out.begin() + static_cast<std::ptrdiff_t>(filled)) {
      v = j;
    }
    out[filled++] = v;
  }
  std::sort(out.begin(), out.end());
  for (auto& v : out) v += lo;
  return out;
}

}  // namespace

Triple sample_triple(int t, OrderLabel label, Rng& rng) {
  auto s = sample_subset<3>(kFirstPadIndex, t, rng);
  return present(s[0], s[1], s[2], label);
}

Triple sample_ordered_triple(int t, Rng& rng) { return sample_triple(t, OrderLabel::kOrdered, rng); }

Triple sample_misordered_triple(int t, Rng& rng) {
  return sample_triple(t, OrderLabel::kMisordered, rng);
}

Triple sample_target_triple(int t, OrderLabel label, Rng& rng) {
  if (t < 1) throw Error("target turn must be >= 1, got " + std::to_string(t));
  auto s = sample_subset<2>(kFirstPadIndex, t - 1, rng);
  return present(s[0], s[1], t, label);
}

std::pair<Triple, Triple> sample_references(int t, ReferenceStrategy strategy, Rng& rng) {
  if (t < 1) throw Error("reference sampling needs t >= 1, got " + std::to_string(t));
  const int hi = t - 1;
  switch (strategy) {
    case ReferenceStrategy::kBothOrdered: {
      Triple a = sample_ordered_triple(hi, rng);
      return {a, sample_ordered_triple(hi, rng)};
    }
    case ReferenceStrategy::kBothMisordered: {
      Triple a = sample_misordered_triple(hi, rng);
      return {a, sample_misordered_triple(hi, rng)};
    }
    case ReferenceStrategy::kOneEach: {
      Triple a = sample_ordered_triple(hi, rng);
      return {a, sample_misordered_triple(hi, rng)};
    }
  }
  throw Error("unknown reference strategy");
}

std::vector<Triple> enumerate_triples(int t, OrderLabel label) {
  if (t < 0) throw Error("enumerate_triples: t must be >= 0");
  if (t > kMaxEnumerationTurns) {
    throw Error("enumerate_triples: t=" + std::to_string(t) + " exceeds guard of " +
                std::to_string(kMaxEnumerationTurns));
  }
  std::vector<Triple> out;
  for (int a = kFirstPadIndex; a <= t; ++a)
    for (int b = a + 1; b <= t; ++b)
      for (int c = b + 1; c <= t; ++c) out.push_back(present(a, b, c, label));
  return out;
}

}  // namespace odl
