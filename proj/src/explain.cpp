#include "lfcbm/explain.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "lfcbm/error.hpp"

namespace lfcbm {

std::vector<Contribution> contributions_from_activations(const SparseHead& head,
                                                         const std::vector<std::string>& concept_names,
                                                         const Vector& activations, std::size_t class_index) {
  if (class_index >= head.class_count())
    throw Error("class index " + std::to_string(class_index) + " out of range");
  if (static_cast<std::size_t>(activations.size()) != head.concept_count() ||
      concept_names.size() != head.concept_count())
    throw Error("dimension mismatch between activations, concepts and head");
  std::vector<Contribution> out;
  const auto row = static_cast<Eigen::Index>(class_index);
  for (Eigen::Index j = 0; j < head.W.cols(); ++j) {
    const double w = head.W(row, j);
    if (w == 0.0) continue;
    Contribution c;
    c.concept_index = static_cast<std::size_t>(j);
    c.concept_name = concept_names[c.concept_index];
    c.weight = w;
    c.activation = activations(j);
    c.contribution = w * c.activation;
    c.label = c.activation < 0.0 ? "NOT " + c.concept_name : c.concept_name;
    out.push_back(std::move(c));
  }
  std::stable_sort(out.begin(), out.end(), [](const Contribution& a, const Contribution& b) {
    return std::abs(a.contribution) > std::abs(b.contribution);
  });
  return out;
}

std::vector<Contribution> contributions(const CblModel& model, const SparseHead& head, const Vector& feature_row,
                                        std::size_t class_index) {
  return contributions_from_activations(head, model.concept_names, project(model, feature_row), class_index);
}

ExplanationView top_explanations_from_activations(const SparseHead& head, const std::vector<std::string>& concept_names,
                                                  const Vector& activations, std::size_t k) {
  if (k < 1) throw Error("k must be >= 1");
  const Prediction p = predict(head, activations);
  ExplanationView v;
  v.predicted_class = p.label;
  v.class_name = p.label < head.class_names.size() ? head.class_names[p.label] : std::to_string(p.label);
  v.logit = p.logits(static_cast<Eigen::Index>(p.label));
  v.bias = head.b(static_cast<Eigen::Index>(p.label));
  auto all = contributions_from_activations(head, concept_names, activations, p.label);
  double total = 0.0, top = 0.0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    total += std::abs(all[i].contribution);
    if (i < k) top += std::abs(all[i].contribution);
  }
  v.explained_fraction = total > 0.0 ? top / total : 1.0;
  if (all.size() > k) all.resize(k);
  v.top = std::move(all);
  return v;
}

ExplanationView top_explanations(const CblModel& model, const SparseHead& head, const Vector& feature_row,
                                 std::size_t k) {
  return top_explanations_from_activations(head, model.concept_names, project(model, feature_row), k);
}

WeightGraph export_weight_graph(const SparseHead& head, const std::vector<std::string>& concept_names,
                                const std::vector<std::size_t>& class_indices, double min_abs_weight) {
  if (concept_names.size() != head.concept_count()) throw Error("concept names do not match head width");
  WeightGraph g;
  g.threshold = min_abs_weight;
  std::set<std::size_t> used;
  for (std::size_t k : class_indices) {
    if (k >= head.class_count()) throw Error("class index " + std::to_string(k) + " out of range");
    g.class_nodes.push_back(k < head.class_names.size() ? head.class_names[k] : std::to_string(k));
    for (Eigen::Index j = 0; j < head.W.cols(); ++j) {
      const double w = head.W(static_cast<Eigen::Index>(k), j);
      if (std::abs(w) > min_abs_weight) {
        g.edges.push_back({static_cast<std::size_t>(j), k, w});
        used.insert(static_cast<std::size_t>(j));
      }
    }
  }
  for (std::size_t j : used) g.concept_nodes.push_back(concept_names[j]);
  return g;
}

nlohmann::json to_json(const Contribution& c) {
  return {{"concept_index", c.concept_index}, {"concept", c.concept_name}, {"weight", c.weight},
          {"activation", c.activation},       {"contribution", c.contribution}, {"label", c.label}};
}

nlohmann::json to_json(const ExplanationView& v) {
  nlohmann::json j;
  j["predicted_class"] = v.predicted_class;
  j["class_name"] = v.class_name;
  j["logit"] = v.logit;
  j["bias"] = v.bias;
  j["explained_fraction"] = v.explained_fraction;
  j["contributions"] = nlohmann::json::array();
  for (const auto& c : v.top) j["contributions"].push_back(to_json(c));
  return j;
}

nlohmann::json to_json(const WeightGraph& g, const std::vector<std::string>& concept_names) {
  nlohmann::json j;
  j["threshold"] = g.threshold;
  j["classes"] = g.class_nodes;
  j["concepts"] = g.concept_nodes;
  j["edges"] = nlohmann::json::array();
  for (const auto& e : g.edges) {
    const auto& name = concept_names.at(e.concept_index);
    j["edges"].push_back({{"concept_index", e.concept_index},
                          {"concept", name},
                          {"class_index", e.class_index},
                          {"weight", e.weight},
                          {"label", e.weight < 0.0 ? "NOT " + name : name}});
  }
  return j;
}

}  // namespace lfcbm
