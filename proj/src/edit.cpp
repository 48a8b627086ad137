#include "lfcbm/edit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "lfcbm/error.hpp"

namespace lfcbm {

namespace fs = std::filesystem;

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

void append_line(const fs::path& path, const nlohmann::json& j) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::app);
  out << j.dump() << '\n';
  out.flush();
  if (!out) throw Error("I/O failure appending to " + path.string());
}

}  // namespace

void apply_record(SparseHead& head, const EditRecord& r) {
  const auto c = static_cast<Eigen::Index>(r.concept_index);
  head.W(static_cast<Eigen::Index>(r.gt), c) += r.delta_w;
  head.W(static_cast<Eigen::Index>(r.pred), c) -= r.delta_w;
}

double compute_delta_w(const SparseHead& head, const Vector& fc, std::size_t gt, std::size_t pred,
                       std::size_t concept_index, double margin) {
  if (gt >= head.class_count() || pred >= head.class_count()) throw Error("class index out of range");
  if (concept_index >= head.concept_count()) throw Error("concept index out of range");
  if (static_cast<std::size_t>(fc.size()) != head.concept_count()) throw Error("dimension mismatch: f_c length");
  if (gt == pred) throw Error("gt == pred: nothing to correct");
  if (!(margin >= 0.0)) throw Error("margin b must be non-negative");
  const double a = fc(static_cast<Eigen::Index>(concept_index));
  if (!(std::abs(a) > kMinEditActivation))
    throw Error("near-zero concept activation: edit would need an unbounded delta_w");
  const auto g = static_cast<Eigen::Index>(gt), q = static_cast<Eigen::Index>(pred);
  const double delta_a = (head.W.row(q).dot(fc) + head.b(q)) - (head.W.row(g).dot(fc) + head.b(g));
  return (delta_a + margin) / (2.0 * a);
}

ImpactReport evaluate_impact(const SparseHead& before, const SparseHead& after, const Matrix& A,
                             std::span<const std::int64_t> y) {
  if (static_cast<std::size_t>(A.rows()) != y.size()) throw Error("shape mismatch: activations rows != labels");
  const auto pb = predict_all(before, A);
  const auto pa = predict_all(after, A);
  ImpactReport r;
  r.n_val = y.size();
  std::set<std::size_t> affected;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto label = static_cast<std::size_t>(y[i]);
    const bool ok_b = pb[i] == label, ok_a = pa[i] == label;
    r.correct_before += ok_b;
    r.correct_after += ok_a;
    if (!ok_b && ok_a) ++r.fixed;
    if (ok_b && !ok_a) ++r.broken;
    if (pb[i] != pa[i]) affected.insert({label, pb[i], pa[i]});
  }
  if (r.n_val > 0) {
    const double n = static_cast<double>(r.n_val);
    r.accuracy_before = static_cast<double>(r.correct_before) / n;
    r.accuracy_after = static_cast<double>(r.correct_after) / n;
    r.delta_accuracy = (static_cast<double>(r.correct_after) - static_cast<double>(r.correct_before)) / n;
  }
  r.affected_classes.assign(affected.begin(), affected.end());
  return r;
}

EditSession::EditSession(SparseHead pristine) : pristine_(std::move(pristine)), working_(pristine_) {}

const EditRecord& EditSession::record(std::uint64_t id) const {
  for (const auto& r : records_)
    if (r.id == id) return r;
  throw NotFound("unknown edit id " + std::to_string(id));
}

EditRecord& EditSession::find(std::uint64_t id) {
  for (auto& r : records_)
    if (r.id == id) return r;
  throw NotFound("unknown edit id " + std::to_string(id));
}

double EditSession::propose(const EditRequest& req, const Vector& fc) const {
  return compute_delta_w(working_, fc, req.gt, req.pred, req.concept_index, req.margin);
}

const EditRecord& EditSession::apply(const EditRequest& req, const Vector& fc) {
  EditRecord r;
  r.delta_w = propose(req, fc);
  r.id = next_id_++;
  r.gt = req.gt;
  r.pred = req.pred;
  r.concept_index = req.concept_index;
  r.margin = req.margin;
  r.input_index = req.input_index;
  r.timestamp = utc_now();
  apply_record(working_, r);
  records_.push_back(r);
  persist(records_.back());
  return records_.back();
}

void EditSession::revert(std::uint64_t id) {
  EditRecord& r = find(id);
  if (r.status == EditStatus::reverted) throw Conflict("edit " + std::to_string(id) + " already reverted");
  r.status = EditStatus::reverted;
  working_ = replay();
  persist(r);
}

void EditSession::attach_impact(std::uint64_t id, ImpactReport impact) {
  EditRecord& r = find(id);
  r.impact = std::move(impact);
  persist(r);
}

SparseHead EditSession::replay() const {
  SparseHead h = pristine_;
  for (const auto& r : records_)
    if (r.status == EditStatus::applied) apply_record(h, r);
  return h;
}

SparseHead EditSession::replay_without(std::uint64_t id) const {
  record(id);
  SparseHead h = pristine_;
  for (const auto& r : records_)
    if (r.status == EditStatus::applied && r.id != id) apply_record(h, r);
  return h;
}

const ErrorTag& EditSession::tag_error(std::size_t input_index, int type, std::string note) {
  if (type < 1 || type > 4) throw Error("error type must be 1-4, got " + std::to_string(type));
  tags_.push_back({input_index, type, std::move(note)});
  persist(tags_.back());
  return tags_.back();
}

std::vector<ErrorTag> EditSession::tags(std::optional<int> type) const {
  std::vector<ErrorTag> out;
  for (const auto& t : tags_)
    if (!type || t.type == *type) out.push_back(t);
  return out;
}

void EditSession::persist(const EditRecord& r) const { append_line(journal_path_, to_json(r)); }
void EditSession::persist(const ErrorTag& t) const { append_line(tags_path_, to_json(t)); }

void EditSession::attach_files(const fs::path& journal, const fs::path& tags) {
  if (!records_.empty() || !tags_.empty()) throw Error("attach_files requires a fresh session");
  if (fs::exists(journal)) {
    std::ifstream in(journal);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      EditRecord r;
      try {
        r = edit_record_from_json(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw Error("corrupt journal line " + std::to_string(lineno) + ": " + e.what());
      }
      if (r.gt >= pristine_.class_count() || r.pred >= pristine_.class_count() ||
          r.concept_index >= pristine_.concept_count())
        throw Error("corrupt journal line " + std::to_string(lineno) + ": index out of range");
      // A later line for the same id supersedes the earlier one.
      auto it = std::find_if(records_.begin(), records_.end(), [&](const auto& x) { return x.id == r.id; });
      if (it != records_.end()) {
        *it = r;
      } else {
        records_.push_back(r);
      }
      next_id_ = std::max(next_id_, r.id + 1);
    }
    std::sort(records_.begin(), records_.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    working_ = replay();
  }
  if (fs::exists(tags)) {
    std::ifstream in(tags);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        tags_.push_back({j.at("input").get<std::size_t>(), j.at("type").get<int>(), j.value("note", std::string{})});
      } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("corrupt tag file: ") + e.what());
      }
    }
  }
  journal_path_ = journal;
  tags_path_ = tags;
}

InterventionResult intervene_activations(const SparseHead& head, const Vector& activations,
                                         const std::vector<std::pair<std::size_t, double>>& overrides) {
  InterventionResult r;
  r.before = predict(head, activations);
  Vector changed = activations;
  for (const auto& [idx, value] : overrides) {
    if (idx >= static_cast<std::size_t>(changed.size())) throw Error("concept index " + std::to_string(idx) + " out of range");
    changed(static_cast<Eigen::Index>(idx)) = value;
  }
  r.after = predict(head, changed);
  return r;
}

InterventionResult intervene(const CblModel& model, const SparseHead& head, const Vector& feature_row,
                             const std::vector<std::pair<std::size_t, double>>& overrides) {
  return intervene_activations(head, project(model, feature_row), overrides);
}

std::vector<std::size_t> top_activations(const Vector& a, std::size_t k) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(a.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
    return a(static_cast<Eigen::Index>(x)) > a(static_cast<Eigen::Index>(y));
  });
  if (idx.size() > k) idx.resize(k);
  return idx;
}

nlohmann::json to_json(const ImpactReport& r) {
  return {{"n_val", r.n_val},
          {"fixed", r.fixed},
          {"broken", r.broken},
          {"correct_before", r.correct_before},
          {"correct_after", r.correct_after},
          {"accuracy_before", r.accuracy_before},
          {"accuracy_after", r.accuracy_after},
          {"delta_accuracy", r.delta_accuracy},
          {"affected_classes", r.affected_classes}};
}

nlohmann::json to_json(const EditRecord& r) {
  nlohmann::json j{{"id", r.id},
                   {"gt", r.gt},
                   {"pred", r.pred},
                   {"concept", r.concept_index},
                   {"delta_w", r.delta_w},
                   {"margin", r.margin},
                   {"input", r.input_index},
                   {"timestamp", r.timestamp},
                   {"status", r.status == EditStatus::applied ? "applied" : "reverted"}};
  j["impact"] = r.impact ? to_json(*r.impact) : nlohmann::json(nullptr);
  return j;
}

EditRecord edit_record_from_json(const nlohmann::json& j) {
  EditRecord r;
  r.id = j.at("id").get<std::uint64_t>();
  r.gt = j.at("gt").get<std::size_t>();
  r.pred = j.at("pred").get<std::size_t>();
  r.concept_index = j.at("concept").get<std::size_t>();
  r.delta_w = j.at("delta_w").get<double>();
  r.margin = j.at("margin").get<double>();
  r.input_index = j.value("input", std::int64_t{-1});
  r.timestamp = j.value("timestamp", std::string{});
  const auto status = j.at("status").get<std::string>();
  if (status != "applied" && status != "reverted") throw Error("bad edit status '" + status + "'");
  r.status = status == "applied" ? EditStatus::applied : EditStatus::reverted;
  if (j.contains("impact") && !j["impact"].is_null()) {
    const auto& i = j["impact"];
    ImpactReport ir;
    ir.n_val = i.at("n_val").get<std::size_t>();
    ir.fixed = i.at("fixed").get<std::size_t>();
    ir.broken = i.at("broken").get<std::size_t>();
    ir.correct_before = i.at("correct_before").get<std::size_t>();
    ir.correct_after = i.at("correct_after").get<std::size_t>();
    ir.accuracy_before = i.at("accuracy_before").get<double>();
    ir.accuracy_after = i.at("accuracy_after").get<double>();
    ir.delta_accuracy = i.at("delta_accuracy").get<double>();
    ir.affected_classes = i.at("affected_classes").get<std::vector<std::size_t>>();
    r.impact = ir;
  }
  return r;
}

nlohmann::json to_json(const ErrorTag& t) { return {{"input", t.input_index}, {"type", t.type}, {"note", t.note}}; }

}  // namespace lfcbm
