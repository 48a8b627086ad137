#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lfcbm/tensor.hpp"

namespace lfcbm {

// NPY v1.0 reader. Accepts 2-D C-order '<f4' or '<f8' arrays; float64 is
// rounded to nearest float32. Rejects NaN/Inf with the offending (row, col).
Tensor read_tensor(const std::filesystem::path& path);

// Writes a canonical little-endian '<f4' 2-D NPY v1.0 file.
void write_tensor(const Tensor& t, const std::filesystem::path& path);

// Class-label vectors: 1-D '<i8' or '<i4' NPY arrays.
std::vector<std::int64_t> read_labels(const std::filesystem::path& path);
void write_labels(const std::vector<std::int64_t>& labels, const std::filesystem::path& path);

std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(const std::string& bytes);

}  // namespace lfcbm
