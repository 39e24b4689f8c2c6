#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "headrank/errors.hpp"

namespace headrank {

// Middle zone: 1-based first-stage ranks in (n/4, 3n/4]. Gives 11..30 for a
// top-40 list and 6..15 for a top-20 list.
inline bool in_middle_zone(std::size_t rank, std::size_t n) { return 4 * rank > n && 4 * rank <= 3 * n; }

// Top quartile: ranks in [1, n/4].
inline bool in_top_quartile(std::size_t rank, std::size_t n) { return rank >= 1 && 4 * rank <= n; }

inline std::vector<std::size_t> middle_zone(std::size_t n) {
  if (n < 4) throw ConfigError("middle zone needs at least 4 candidates, got " + std::to_string(n));
  std::vector<std::size_t> ranks;
  for (std::size_t r = 1; r <= n; ++r) {
    if (in_middle_zone(r, n)) ranks.push_back(r);
  }
  return ranks;
}

}  // namespace headrank
