#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace peerdistill {

// One minibatch. Classification batches carry `features` [rows x width] and
// one label per row; token batches carry `tokens` [rows x width] and one
// next-token label per position.
struct Batch {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<double> features;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> labels;
  // Dataset indices of the rows, in order.
  std::vector<std::size_t> indices;

  bool is_tokens() const { return !tokens.empty(); }
};

}  // namespace peerdistill
