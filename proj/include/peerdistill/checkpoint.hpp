#pragma once

// Binary checkpoint container. Layout (all integers little-endian):
//
//   bytes 0..7   magic "PDCKPT01"
//   bytes 8..15  u64 header length H
//   next H bytes UTF-8 JSON header:
//                  {"config": <PeerConfig>, "role_index": int,
//                   "tensors": [{"name": str, "shape": [int...],
//                                "offset": int}, ...]}
//                offsets count doubles from the start of the payload
//   payload      IEEE-754 binary64 values, tensors in header order
//
// See docs/checkpoint.md.

#include <filesystem>

#include "peerdistill/model.hpp"

namespace peerdistill {

void save_checkpoint(const std::filesystem::path& path, const PeerModel& model);

// Throws DataError on a malformed file and ConfigError on an invalid config.
PeerModel load_checkpoint(const std::filesystem::path& path);

}  // namespace peerdistill
