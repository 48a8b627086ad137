#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lfcbm/cbl.hpp"
#include "lfcbm/head.hpp"

namespace lfcbm {

// Edits are rejected when the chosen concept's activation is this close to 0.
inline constexpr double kMinEditActivation = 1e-8;

// delta_a = logit(pred) - logit(gt) with logits W f_c + b_F;
// delta_w = (delta_a + b) / (2 f_c[concept]).
double compute_delta_w(const SparseHead& head, const Vector& fc, std::size_t gt, std::size_t pred,
                       std::size_t concept_index, double margin);

struct ImpactReport {
  std::size_t n_val = 0;
  std::size_t fixed = 0;   // wrong -> right
  std::size_t broken = 0;  // right -> wrong
  std::size_t correct_before = 0;
  std::size_t correct_after = 0;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  double delta_accuracy = 0.0;  // (correct_after - correct_before) / n_val
  std::vector<std::size_t> affected_classes;
};

// Compares argmax predictions of two heads over a validation split.
ImpactReport evaluate_impact(const SparseHead& before, const SparseHead& after, const Matrix& val_activations,
                             std::span<const std::int64_t> val_labels);

enum class EditStatus { applied, reverted };

struct EditRequest {
  std::size_t gt = 0;
  std::size_t pred = 0;
  std::size_t concept_index = 0;
  double margin = 0.5;
  std::int64_t input_index = -1;
};

struct EditRecord {
  std::uint64_t id = 0;
  std::size_t gt = 0;
  std::size_t pred = 0;
  std::size_t concept_index = 0;
  double delta_w = 0.0;
  double margin = 0.0;
  std::int64_t input_index = -1;
  std::string timestamp;
  EditStatus status = EditStatus::applied;
  std::optional<ImpactReport> impact;
};

// W[gt, concept] += delta_w; W[pred, concept] -= delta_w.
void apply_record(SparseHead& head, const EditRecord& r);

struct ErrorTag {
  std::size_t input_index = 0;
  int type = 0;  // 1 mislabeled, 2 missing concept, 3 wrong activation, 4 wrong weight
  std::string note;
};

// Working copy of a head plus an append-only edit journal. The working head
// always equals the pristine head with every applied record replayed in id
// order.
class EditSession {
 public:
  explicit EditSession(SparseHead pristine);

  const SparseHead& pristine() const { return pristine_; }
  const SparseHead& working() const { return working_; }
  const std::vector<EditRecord>& records() const { return records_; }
  const EditRecord& record(std::uint64_t id) const;

  // delta_w against the current working head; nothing is applied.
  double propose(const EditRequest& req, const Vector& fc) const;
  const EditRecord& apply(const EditRequest& req, const Vector& fc);
  void revert(std::uint64_t id);
  void attach_impact(std::uint64_t id, ImpactReport impact);

  SparseHead replay() const;
  // Replay with one record left out; the "before" side of a per-edit impact.
  SparseHead replay_without(std::uint64_t id) const;

  const ErrorTag& tag_error(std::size_t input_index, int type, std::string note);
  std::vector<ErrorTag> tags(std::optional<int> type = std::nullopt) const;

  // Loads existing journal/tag files (if present) and appends every later
  // mutation to them, flushing before returning.
  void attach_files(const std::filesystem::path& journal, const std::filesystem::path& tags);

 private:
  EditRecord& find(std::uint64_t id);
  void persist(const EditRecord& r) const;
  void persist(const ErrorTag& t) const;

  SparseHead pristine_;
  SparseHead working_;
  std::vector<EditRecord> records_;
  std::vector<ErrorTag> tags_;
  std::uint64_t next_id_ = 1;
  std::filesystem::path journal_path_;
  std::filesystem::path tags_path_;
};

struct InterventionResult {
  Prediction before;
  Prediction after;
};

// What-if: recompute the prediction with some normalized activations overridden.
InterventionResult intervene_activations(const SparseHead& head, const Vector& activations,
                                         const std::vector<std::pair<std::size_t, double>>& overrides);
InterventionResult intervene(const CblModel& model, const SparseHead& head, const Vector& feature_row,
                             const std::vector<std::pair<std::size_t, double>>& overrides);

// Indices of the k largest activations, descending, ties by lower index.
std::vector<std::size_t> top_activations(const Vector& activations, std::size_t k);

nlohmann::json to_json(const ImpactReport& r);
nlohmann::json to_json(const EditRecord& r);
EditRecord edit_record_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ErrorTag& t);

}  // namespace lfcbm
