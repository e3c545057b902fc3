#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "diffclip/errors.hpp"

namespace diffclip {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kEotId = 1;

/// `count` token rows of fixed length `context`, row-major.
struct TokenBatch {
  std::size_t count = 0;
  std::size_t context = 0;
  std::vector<std::size_t> ids;

  std::span<const std::size_t> row(std::size_t i) const { return {ids.data() + i * context, context}; }

  void append(std::span<const std::size_t> row_ids) {
    if (count == 0 && context == 0) context = row_ids.size();
    if (row_ids.size() != context) {
      throw DimensionError("TokenBatch: row of length " + std::to_string(row_ids.size()) + " in batch of context " +
                           std::to_string(context));
    }
    ids.insert(ids.end(), row_ids.begin(), row_ids.end());
    ++count;
  }

  friend bool operator==(const TokenBatch&, const TokenBatch&) = default;
};

}  // namespace diffclip
