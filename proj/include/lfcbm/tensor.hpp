#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lfcbm/error.hpp"

namespace lfcbm {

// Dense row-major float32 matrix. Features, concept activations, text
// embeddings and persisted weights all travel as Tensors.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
  Tensor(std::size_t r, std::size_t c, std::vector<float> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw Error("tensor data length != rows*cols");
  }

  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }

  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Tensor&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

}  // namespace lfcbm
