#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace peerdistill {

// Writes to "<path>.tmp" and renames over `path`; parent directories are
// created as needed.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

// "%.17g": exact round trip for doubles.
std::string format_double(double v);

}  // namespace peerdistill
