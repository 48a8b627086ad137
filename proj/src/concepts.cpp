#include "lfcbm/concepts.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "lfcbm/error.hpp"

namespace lfcbm {

const char* filter_name(Filter f) {
  switch (f) {
    case Filter::none: return "none";
    case Filter::length: return "length";
    case Filter::class_similarity: return "class_similarity";
    case Filter::duplicate: return "duplicate";
    case Filter::activation: return "activation";
    case Filter::fidelity: return "fidelity";
  }
  return "unknown";
}

ConceptSet::ConceptSet(std::vector<std::string> texts) {
  entries_.reserve(texts.size());
  for (auto& t : texts) {
    ConceptEntry e;
    e.text = std::move(t);
    entries_.push_back(std::move(e));
  }
}

void ConceptSet::remove(std::size_t i, Filter by, std::string related, double value) {
  auto& e = entries_.at(i);
  if (!e.kept) return;
  e.kept = false;
  e.removed_by = by;
  e.related = std::move(related);
  e.value = value;
}

std::vector<std::size_t> ConceptSet::kept_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].kept) out.push_back(i);
  return out;
}

std::vector<std::string> ConceptSet::kept_texts() const {
  std::vector<std::string> out;
  for (const auto& e : entries_)
    if (e.kept) out.push_back(e.text);
  return out;
}

std::size_t ConceptSet::kept_count() const {
  return static_cast<std::size_t>(std::count_if(entries_.begin(), entries_.end(), [](const auto& e) { return e.kept; }));
}

bool ConceptSet::operator==(const ConceptSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.text != b.text || a.kept != b.kept || a.removed_by != b.removed_by || a.related != b.related ||
        a.value != b.value)
      return false;
  }
  return true;
}

namespace {

void check_threshold(double t) {
  if (!(t >= -1.0 && t <= 1.0)) throw Error("similarity threshold must lie in [-1, 1]");
}

// Rows scaled to unit norm; zero rows are an error.
Matrix unit_rows(const Matrix& m, const std::string& what) {
  Matrix out = m;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (!(n > 0.0)) throw Error("zero-norm embedding: " + what + " row " + std::to_string(r));
    out.row(r) /= n;
  }
  return out;
}

double clamp_unit(double v) { return std::clamp(v, -1.0, 1.0); }

}  // namespace

double ensemble_similarity(std::span<const NamedVector> a, std::span<const NamedVector> b) {
  if (a.empty() || a.size() != b.size()) throw Error("ensemble_similarity: embedding space sets differ");
  double sum = 0.0;
  for (std::size_t s = 0; s < a.size(); ++s) {
    if (a[s].space != b[s].space)
      throw Error("ensemble_similarity: space '" + a[s].space + "' vs '" + b[s].space + "'");
    if (a[s].values.size() != b[s].values.size())
      throw Error("ensemble_similarity: dimension mismatch in space '" + a[s].space + "'");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a[s].values.size(); ++i) {
      dot += a[s].values[i] * b[s].values[i];
      na += a[s].values[i] * a[s].values[i];
      nb += b[s].values[i] * b[s].values[i];
    }
    if (!(na > 0.0) || !(nb > 0.0)) throw Error("zero-norm vector in space '" + a[s].space + "'");
    sum += dot / (std::sqrt(na) * std::sqrt(nb));
  }
  return clamp_unit(sum / static_cast<double>(a.size()));
}

TextEmbeddings TextEmbeddings::from_bundle(const DatasetBundle& b) {
  TextEmbeddings e;
  for (std::size_t s = 0; s < b.concept_text_embeddings.size(); ++s) {
    e.spaces.push_back(b.concept_text_embeddings[s].name);
    e.concepts.push_back(to_matrix(b.concept_text_embeddings[s].tensor));
    e.classes.push_back(to_matrix(b.class_text_embeddings[s].tensor));
  }
  return e;
}

std::vector<NamedVector> TextEmbeddings::concept_vectors(std::size_t i) const {
  std::vector<NamedVector> out;
  for (std::size_t s = 0; s < spaces.size(); ++s) {
    if (i >= static_cast<std::size_t>(concepts[s].rows()))
      throw Error("missing embedding row for concept " + std::to_string(i) + " in space '" + spaces[s] + "'");
    std::vector<double> v(concepts[s].cols());
    for (Eigen::Index c = 0; c < concepts[s].cols(); ++c) v[c] = concepts[s](i, c);
    out.push_back({spaces[s], std::move(v)});
  }
  return out;
}

std::vector<NamedVector> TextEmbeddings::class_vectors(std::size_t k) const {
  std::vector<NamedVector> out;
  for (std::size_t s = 0; s < spaces.size(); ++s) {
    if (k >= static_cast<std::size_t>(classes[s].rows()))
      throw Error("missing embedding row for class " + std::to_string(k) + " in space '" + spaces[s] + "'");
    std::vector<double> v(classes[s].cols());
    for (Eigen::Index c = 0; c < classes[s].cols(); ++c) v[c] = classes[s](k, c);
    out.push_back({spaces[s], std::move(v)});
  }
  return out;
}

std::size_t utf8_length(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

ConceptSet filter_by_length(ConceptSet set, std::size_t max_len) {
  if (max_len < 1) throw Error("max_len must be >= 1");
  for (std::size_t i : set.kept_indices()) {
    const auto len = utf8_length(set[i].text);
    if (len > max_len) set.remove(i, Filter::length, {}, static_cast<double>(len));
  }
  return set;
}

ConceptSet filter_similar_to_classes(ConceptSet set, const std::vector<std::string>& class_names,
                                     const TextEmbeddings& emb, double threshold) {
  check_threshold(threshold);
  const auto kept = set.kept_indices();
  if (kept.empty() || class_names.empty()) return set;
  if (emb.spaces.empty()) throw Error("no embedding spaces available");

  std::vector<Matrix> cn, kn;
  for (std::size_t s = 0; s < emb.spaces.size(); ++s) {
    if (static_cast<std::size_t>(emb.classes[s].rows()) < class_names.size())
      throw Error("missing embedding row for classes in space '" + emb.spaces[s] + "'");
    cn.push_back(unit_rows(emb.concepts[s], "concept embeddings '" + emb.spaces[s] + "'"));
    kn.push_back(unit_rows(emb.classes[s], "class embeddings '" + emb.spaces[s] + "'"));
  }
  const double nspaces = static_cast<double>(emb.spaces.size());
  for (std::size_t i : kept) {
    double best = -2.0;
    std::size_t best_class = 0;
    bool exact = false;
    for (std::size_t k = 0; k < class_names.size(); ++k) {
      if (set[i].text == class_names[k]) {
        best = 1.0;
        best_class = k;
        exact = true;
        break;
      }
      double sim = 0.0;
      for (std::size_t s = 0; s < cn.size(); ++s) {
        if (i >= static_cast<std::size_t>(cn[s].rows()))
          throw Error("missing embedding row for concept " + std::to_string(i));
        sim += cn[s].row(i).dot(kn[s].row(k));
      }
      sim = clamp_unit(sim / nspaces);
      if (sim > best) {
        best = sim;
        best_class = k;
      }
    }
    if (exact || best > threshold) set.remove(i, Filter::class_similarity, class_names[best_class], best);
  }
  return set;
}

ConceptSet dedupe_similar(ConceptSet set, const TextEmbeddings& emb, double threshold) {
  check_threshold(threshold);
  const auto kept = set.kept_indices();
  if (kept.empty()) return set;
  if (emb.spaces.empty()) throw Error("no embedding spaces available");
  std::vector<Matrix> cn;
  for (std::size_t s = 0; s < emb.spaces.size(); ++s)
    cn.push_back(unit_rows(emb.concepts[s], "concept embeddings '" + emb.spaces[s] + "'"));
  const double nspaces = static_cast<double>(emb.spaces.size());

  std::vector<std::size_t> survivors;
  for (std::size_t i : kept) {
    for (const auto& m : cn)
      if (i >= static_cast<std::size_t>(m.rows())) throw Error("missing embedding row for concept " + std::to_string(i));
    double best = -2.0;
    std::size_t twin = 0;
    bool exact = false;
    for (std::size_t j : survivors) {
      if (set[j].text == set[i].text) {
        best = 1.0;
        twin = j;
        exact = true;
        break;
      }
      double sim = 0.0;
      for (const auto& m : cn) sim += m.row(i).dot(m.row(j));
      sim = clamp_unit(sim / nspaces);
      if (sim > best) {
        best = sim;
        twin = j;
      }
    }
    if (!survivors.empty() && (exact || best > threshold)) {
      set.remove(i, Filter::duplicate, set[twin].text, best);
    } else {
      survivors.push_back(i);
    }
  }
  return set;
}

double top5_mean(const Tensor& P, std::size_t column) {
  if (P.rows < 5) throw Error("activation filter needs at least 5 samples, got " + std::to_string(P.rows));
  if (column >= P.cols) throw Error("P has no column " + std::to_string(column));
  std::vector<double> col(P.rows);
  for (std::size_t r = 0; r < P.rows; ++r) col[r] = P(r, column);
  std::partial_sort(col.begin(), col.begin() + 5, col.end(), std::greater<>());
  return (col[0] + col[1] + col[2] + col[3] + col[4]) / 5.0;
}

ConceptSet filter_by_activation(ConceptSet set, const Tensor& P_train, double cutoff) {
  if (P_train.rows < 5)
    throw Error("activation filter needs at least 5 samples, got " + std::to_string(P_train.rows));
  if (P_train.cols != set.size()) throw Error("P columns != concept count");
  for (std::size_t i : set.kept_indices()) {
    const double m = top5_mean(P_train, i);
    if (!(m >= cutoff)) set.remove(i, Filter::activation, {}, m);
  }
  return set;
}

FilterReport FilterReport::from(const ConceptSet& set) {
  FilterReport r;
  r.initial_count = set.size();
  r.final_count = set.kept_count();
  for (Filter f : {Filter::length, Filter::class_similarity, Filter::duplicate, Filter::activation, Filter::fidelity}) {
    FilterStage stage{f, {}};
    for (std::size_t i = 0; i < set.size(); ++i)
      if (!set[i].kept && set[i].removed_by == f) stage.removed.push_back({i, set[i].text, set[i].related, set[i].value});
    if (f != Filter::fidelity || !stage.removed.empty()) r.stages.push_back(std::move(stage));
  }
  return r;
}

std::size_t FilterReport::removed_count() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.removed.size();
  return n;
}

nlohmann::json to_json(const FilterReport& r) {
  nlohmann::json stages = nlohmann::json::array();
  std::size_t remaining = r.initial_count;
  for (const auto& s : r.stages) {
    nlohmann::json removed = nlohmann::json::array();
    for (const auto& x : s.removed)
      removed.push_back({{"index", x.index}, {"concept", x.text}, {"related", x.related}, {"value", x.value}});
    remaining -= s.removed.size();
    stages.push_back({{"filter", static_cast<int>(s.filter)},
                      {"name", filter_name(s.filter)},
                      {"removed_count", s.removed.size()},
                      {"remaining", remaining},
                      {"removed", removed}});
  }
  return {{"initial_count", r.initial_count}, {"final_count", r.final_count}, {"stages", stages}};
}

FilterResult run_filter_pipeline(ConceptSet set, const DatasetBundle& bundle, const FilterConfig& config) {
  if (set.size() != bundle.concepts.size()) throw Error("concept set size != bundle concept count");
  const TextEmbeddings emb = TextEmbeddings::from_bundle(bundle);
  set = filter_by_length(std::move(set), config.max_len);
  set = filter_similar_to_classes(std::move(set), bundle.class_names, emb, config.class_threshold);
  set = dedupe_similar(std::move(set), emb, config.concept_threshold);
  if (set.kept_count() > 0)
    set = filter_by_activation(std::move(set), bundle.train_P,
                               config.activation_cutoff.value_or(bundle.activation_cutoff));
  FilterReport report = FilterReport::from(set);
  return {std::move(set), std::move(report)};
}

Tensor select_columns(const Tensor& P, const std::vector<std::size_t>& columns) {
  Tensor out(P.rows, columns.size());
  for (std::size_t r = 0; r < P.rows; ++r)
    for (std::size_t j = 0; j < columns.size(); ++j) {
      if (columns[j] >= P.cols) throw Error("column index out of range");
      out(r, j) = P(r, columns[j]);
    }
  return out;
}

}  // namespace lfcbm
