#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "lfcbm/cbl.hpp"
#include "lfcbm/head.hpp"

namespace lfcbm {

struct Contribution {
  std::size_t concept_index = 0;
  std::string concept_name;
  double weight = 0.0;
  double activation = 0.0;
  double contribution = 0.0;  // weight * activation
  std::string label;          // "NOT <concept>" when activation < 0
};

// Contributions to one class from already-normalized activations: one entry
// per nonzero weight, sorted by |contribution| descending, ties by index.
std::vector<Contribution> contributions_from_activations(const SparseHead& head,
                                                         const std::vector<std::string>& concept_names,
                                                         const Vector& activations, std::size_t class_index);

std::vector<Contribution> contributions(const CblModel& model, const SparseHead& head, const Vector& feature_row,
                                        std::size_t class_index);

struct ExplanationView {
  std::size_t predicted_class = 0;
  std::string class_name;
  double logit = 0.0;
  double bias = 0.0;
  std::vector<Contribution> top;
  // sum of top-k |contribution| over sum of all |contribution|
  double explained_fraction = 1.0;
};

ExplanationView top_explanations_from_activations(const SparseHead& head, const std::vector<std::string>& concept_names,
                                                  const Vector& activations, std::size_t k = 10);

ExplanationView top_explanations(const CblModel& model, const SparseHead& head, const Vector& feature_row,
                                 std::size_t k = 10);

struct WeightEdge {
  std::size_t concept_index = 0;
  std::size_t class_index = 0;
  double weight = 0.0;
};

struct WeightGraph {
  std::vector<std::string> concept_nodes;  // concepts with at least one edge
  std::vector<std::string> class_nodes;
  std::vector<WeightEdge> edges;
  double threshold = 0.05;
};

// Edges for every |W_F[class, j]| > min_abs_weight over the requested classes.
WeightGraph export_weight_graph(const SparseHead& head, const std::vector<std::string>& concept_names,
                                const std::vector<std::size_t>& class_indices, double min_abs_weight = 0.05);

nlohmann::json to_json(const Contribution& c);
nlohmann::json to_json(const ExplanationView& v);
// Edge labels use the weight sign: negative edges render as "NOT <concept>".
nlohmann::json to_json(const WeightGraph& g, const std::vector<std::string>& concept_names);

}  // namespace lfcbm
