#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "odl/rng.hpp"

namespace odl {

enum class OrderLabel : int { kOrdered = 0, kMisordered = 1 };

enum class ReferenceStrategy { kBothOrdered, kBothMisordered, kOneEach };

// Turn indices of three pairs of a padded dialogue, in presentation order.
// Ordered triples are presented (i, j, k) and misordered ones (i, k, j), i < j < k.
struct Triple {
  std::array<int, 3> indices{};
  OrderLabel label = OrderLabel::kOrdered;

  bool contains(int index) const {
    return indices[0] == index || indices[1] == index || indices[2] == index;
  }
  bool operator==(const Triple&) const = default;
};

struct SamplerConfig {
  int m = 4;         // reference draws per target
  int n_target = 4;  // misordered targets per p* estimate
  std::uint64_t seed = 0;
};

void validate(const SamplerConfig& config);

inline constexpr int kFirstPadIndex = -2;
inline constexpr int kMaxEnumerationTurns = 20;

std::string to_string(ReferenceStrategy s);
ReferenceStrategy parse_strategy(std::string_view name);
double label_value(OrderLabel label);

// Throws PatternError when the presentation is neither (i,j,k) nor (i,k,j).
OrderLabel classify_triple(const std::array<int, 3>& presentation);

// Presents a sorted subset a < b < c according to `label`.
Triple present(int a, int b, int c, OrderLabel label);

// Uniform 3-subset of the padded indices {-2, ..., t}.
Triple sample_ordered_triple(int t, Rng& rng);
Triple sample_misordered_triple(int t, Rng& rng);
Triple sample_triple(int t, OrderLabel label, Rng& rng);

// Triple containing t plus a uniform 2-subset of {-2, ..., t-1}.
Triple sample_target_triple(int t, OrderLabel label, Rng& rng);

// Two reference triples over {-2, ..., t-1}; OneEach yields (ordered, misordered).
std::pair<Triple, Triple> sample_references(int t, ReferenceStrategy strategy, Rng& rng);

// Every 3-subset of {-2, ..., t} presented per `label`, lexicographic by subset.
std::vector<Triple> enumerate_triples(int t, OrderLabel label);

}  // namespace odl
