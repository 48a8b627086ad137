#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lfcbm/concept_set.hpp"
#include "lfcbm/tensor.hpp"

namespace lfcbm {

inline constexpr int kManifestVersion = 1;

struct FileRef {
  std::string path;  // relative to the manifest directory
  std::string sha256;
};

struct EmbeddingSpaceRef {
  std::string name;
  FileRef concepts;
  FileRef classes;
};

struct Manifest {
  int format_version = kManifestVersion;
  std::string dataset;
  double activation_cutoff = 0.25;
  bool text_embeddings_normalized = true;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  FileRef train_features, val_features;
  FileRef train_P, val_P;
  FileRef train_labels, val_labels;
  FileRef class_names, concepts;
  std::vector<EmbeddingSpaceRef> embedding_spaces;
};

struct DatasetBundle {
  std::string dataset;
  double activation_cutoff = 0.25;
  Tensor train_features, val_features;
  Tensor train_P, val_P;
  std::vector<std::int64_t> train_labels, val_labels;
  std::vector<std::string> class_names;
  ConceptSet concepts;
  std::vector<NamedTensor> concept_text_embeddings;
  std::vector<NamedTensor> class_text_embeddings;
};

Manifest read_manifest(const std::filesystem::path& manifest_path);

// Loads every referenced file, verifies checksums, and enforces all
// cross-shape invariants. Throws Error naming the first violation.
DatasetBundle load_bundle(const std::filesystem::path& manifest_path);

// Throws Error if any bundle invariant is violated.
void validate_bundle(const DatasetBundle& b);

// Writes the bundle's tensors and text files under dir and a manifest.json
// with checksums. Returns the manifest path.
std::filesystem::path write_bundle(const DatasetBundle& b, const std::filesystem::path& dir);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::vector<std::string>& lines, const std::filesystem::path& path);

}  // namespace lfcbm
