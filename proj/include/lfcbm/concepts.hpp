#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lfcbm/concept_set.hpp"
#include "lfcbm/linalg.hpp"
#include "lfcbm/manifest.hpp"

namespace lfcbm {

// One embedding of a text in a named space.
struct NamedVector {
  std::string space;
  std::vector<double> values;
};

// Unweighted mean over spaces of the per-space cosine similarity. Both sides
// must list the same spaces in the same order. Result clamped to [-1, 1].
double ensemble_similarity(std::span<const NamedVector> a, std::span<const NamedVector> b);

// Text embeddings of every concept (rows indexed by original concept index)
// and every class, one matrix pair per embedding space.
struct TextEmbeddings {
  std::vector<std::string> spaces;
  std::vector<Matrix> concepts;
  std::vector<Matrix> classes;

  static TextEmbeddings from_bundle(const DatasetBundle& b);

  std::vector<NamedVector> concept_vectors(std::size_t i) const;
  std::vector<NamedVector> class_vectors(std::size_t k) const;
};

// Unicode scalar count of a UTF-8 string.
std::size_t utf8_length(const std::string& s);

ConceptSet filter_by_length(ConceptSet set, std::size_t max_len = 30);

// Removes kept concepts whose ensemble similarity to any class exceeds
// threshold, or whose text equals a class name.
ConceptSet filter_similar_to_classes(ConceptSet set, const std::vector<std::string>& class_names,
                                     const TextEmbeddings& emb, double threshold = 0.85);

// Greedy in list order: a concept is dropped iff an earlier kept concept has
// similarity above threshold or identical text.
ConceptSet dedupe_similar(ConceptSet set, const TextEmbeddings& emb, double threshold = 0.9);

// Mean of the five largest entries of column j of P_train (columns indexed by
// original concept index); kept iff mean >= cutoff.
ConceptSet filter_by_activation(ConceptSet set, const Tensor& P_train, double cutoff);

double top5_mean(const Tensor& P, std::size_t column);

struct FilterConfig {
  std::size_t max_len = 30;
  double class_threshold = 0.85;
  double concept_threshold = 0.9;
  // Defaults to the bundle's per-dataset cutoff when unset.
  std::optional<double> activation_cutoff;
};

struct Removal {
  std::size_t index;
  std::string text;
  std::string related;
  double value;
};

struct FilterStage {
  Filter filter;
  std::vector<Removal> removed;
};

struct FilterReport {
  std::size_t initial_count = 0;
  std::size_t final_count = 0;
  std::vector<FilterStage> stages;

  // Builds the report from a set's removal annotations.
  static FilterReport from(const ConceptSet& set);
  std::size_t removed_count() const;
};

struct FilterResult {
  ConceptSet concepts;
  FilterReport report;
};

// Filters 1 -> 4 in order.
FilterResult run_filter_pipeline(ConceptSet set, const DatasetBundle& bundle, const FilterConfig& config = {});

nlohmann::json to_json(const FilterReport& r);

// Removes columns of P whose concept is not kept.
Tensor select_columns(const Tensor& P, const std::vector<std::size_t>& columns);

}  // namespace lfcbm
