#include "lfcbm/service.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <sstream>

#include <httplib.h>

#include "lfcbm/error.hpp"
#include "lfcbm/explain.hpp"

namespace lfcbm {

namespace {

using nlohmann::json;

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '/'))
    if (!part.empty()) parts.push_back(part);
  return parts;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::size_t parse_index(const std::string& s, const char* what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || s[0] == '-') throw Error(std::string("bad ") + what + " '" + s + "'");
  return static_cast<std::size_t>(v);
}

double parse_double(const std::string& s, const char* what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) throw Error(std::string("bad ") + what + " '" + s + "'");
  return v;
}

std::string query_or(const std::map<std::string, std::string>& q, const std::string& key, const std::string& dflt) {
  auto it = q.find(key);
  return it == q.end() ? dflt : it->second;
}

json prediction_json(const Prediction& p, const SparseHead& head) {
  return {{"class", p.label},
          {"class_name", head.class_names.at(p.label)},
          {"logits", std::vector<double>(p.logits.data(), p.logits.data() + p.logits.size())}};
}

std::size_t class_by_name_or_index(const SparseHead& head, const std::string& s) {
  for (std::size_t c = 0; c < head.class_names.size(); ++c)
    if (head.class_names[c] == s) return c;
  const std::size_t c = parse_index(s, "class");
  if (c >= head.class_count()) throw NotFound("class index " + s + " out of range");
  return c;
}

}  // namespace

SessionState::SessionState(Workspace ws) : ws_(std::move(ws)), session_(ws_.head) {
  session_.attach_files(ws_.model_dir / "edits.jsonl", ws_.model_dir / "tags.jsonl");
}

const Matrix& SessionState::activations(const std::string& split) const {
  if (split == "val") return ws_.val_activations;
  if (split == "train") return ws_.train_activations;
  throw Error("split must be 'train' or 'val', got '" + split + "'");
}

std::span<const std::int64_t> SessionState::labels(const std::string& split) const {
  if (split == "val") return ws_.bundle.val_labels;
  if (split == "train") return ws_.bundle.train_labels;
  throw Error("split must be 'train' or 'val', got '" + split + "'");
}

Vector SessionState::input_row(const std::string& split, std::size_t input) const {
  const Matrix& A = activations(split);
  if (input >= static_cast<std::size_t>(A.rows()))
    throw NotFound("input " + std::to_string(input) + " out of range for split " + split);
  return A.row(static_cast<Eigen::Index>(input)).transpose();
}

SparseHead SessionState::working_head() const {
  std::shared_lock lock(mutex_);
  return session_.working();
}

json SessionState::model_info() const {
  std::shared_lock lock(mutex_);
  const SparseHead& h = session_.working();
  const auto nnz = h.nnz_per_class();
  const Vector& fid = ws_.model.val_fidelity;
  std::size_t applied = 0;
  for (const auto& r : session_.records()) applied += r.status == EditStatus::applied;
  return {{"dataset", ws_.bundle.dataset},
          {"M", ws_.model.concept_count()},
          {"d_z", h.class_count()},
          {"d0", ws_.model.input_dim()},
          {"concepts", ws_.model.concept_names},
          {"classes", h.class_names},
          {"lambda", h.lambda},
          {"alpha", h.alpha},
          {"nnz", {{"mean", h.mean_nnz()},
                   {"min", nnz.empty() ? 0 : *std::min_element(nnz.begin(), nnz.end())},
                   {"max", nnz.empty() ? 0 : *std::max_element(nnz.begin(), nnz.end())},
                   {"per_class", nnz}}},
          {"fidelity", {{"min", fid.size() ? fid.minCoeff() : 0.0},
                        {"mean", fid.size() ? fid.mean() : 0.0},
                        {"max", fid.size() ? fid.maxCoeff() : 0.0}}},
          {"n_train", ws_.train_activations.rows()},
          {"n_val", ws_.val_activations.rows()},
          {"edits_applied", applied},
          {"val_accuracy", accuracy(h, ws_.val_activations, ws_.bundle.val_labels)}};
}

json SessionState::list_inputs(const std::string& split, const std::string& status, std::optional<int> tag,
                               std::size_t offset, std::size_t limit) const {
  if (status != "all" && status != "wrong" && status != "right")
    throw Error("status must be all, wrong or right, got '" + status + "'");
  std::shared_lock lock(mutex_);
  const Matrix& A = activations(split);
  const auto y = labels(split);
  const auto pred = predict_all(session_.working(), A);
  std::map<std::size_t, std::vector<int>> tags_by_input;
  if (split == "val")
    for (const auto& t : session_.tags()) tags_by_input[t.input_index].push_back(t.type);
  json items = json::array();
  std::size_t matched = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool correct = pred[i] == static_cast<std::size_t>(y[i]);
    if ((status == "wrong" && correct) || (status == "right" && !correct)) continue;
    const auto& tg = tags_by_input[i];
    if (tag && std::find(tg.begin(), tg.end(), *tag) == tg.end()) continue;
    if (matched++ < offset || items.size() >= limit) continue;
    items.push_back({{"index", i}, {"label", y[i]}, {"pred", pred[i]}, {"correct", correct}, {"tags", tg}});
  }
  return {{"split", split}, {"status", status}, {"total", matched}, {"offset", offset}, {"items", items}};
}

json SessionState::explanation(const std::string& split, std::size_t input, std::size_t k,
                               std::optional<std::size_t> class_index) const {
  if (k < 1) throw Error("k must be >= 1");
  std::shared_lock lock(mutex_);
  const SparseHead& h = session_.working();
  const Vector a = input_row(split, input);
  json out;
  if (class_index) {
    if (*class_index >= h.class_count()) throw NotFound("class index out of range");
    auto all = contributions_from_activations(h, ws_.model.concept_names, a, *class_index);
    ExplanationView v;
    v.predicted_class = predict(h, a).label;
    v.class_name = h.class_names[*class_index];
    v.bias = h.b(static_cast<Eigen::Index>(*class_index));
    v.logit = predict(h, a).logits(static_cast<Eigen::Index>(*class_index));
    double total = 0.0, top = 0.0;
    for (std::size_t j = 0; j < all.size(); ++j) {
      total += std::abs(all[j].contribution);
      if (j < k) top += std::abs(all[j].contribution);
    }
    if (all.size() > k) all.resize(k);
    v.top = all;
    v.explained_fraction = total > 0.0 ? top / total : 1.0;
    out = to_json(v);
    out["class"] = *class_index;
  } else {
    out = to_json(top_explanations_from_activations(h, ws_.model.concept_names, a, k));
  }
  out["input"] = input;
  out["split"] = split;
  out["label"] = labels(split)[input];
  return out;
}

json SessionState::top_activations(const std::string& split, std::size_t input, std::size_t k) const {
  std::shared_lock lock(mutex_);
  const Vector a = input_row(split, input);
  json items = json::array();
  for (std::size_t j : lfcbm::top_activations(a, k))
    items.push_back({{"concept_index", j}, {"concept", ws_.model.concept_names[j]}, {"activation", a(static_cast<Eigen::Index>(j))}});
  return {{"input", input}, {"split", split}, {"items", items}};
}

json SessionState::weight_graph(const std::vector<std::string>& classes, double min_abs_weight) const {
  std::shared_lock lock(mutex_);
  const SparseHead& h = session_.working();
  std::vector<std::size_t> idx;
  if (classes.empty()) {
    for (std::size_t c = 0; c < h.class_count(); ++c) idx.push_back(c);
  } else {
    for (const auto& c : classes) idx.push_back(class_by_name_or_index(h, c));
  }
  return to_json(export_weight_graph(h, ws_.model.concept_names, idx, min_abs_weight), ws_.model.concept_names);
}

json SessionState::intervene(const json& req) const {
  std::shared_lock lock(mutex_);
  const std::string split = req.value("split", std::string("val"));
  const Vector a = input_row(split, req.at("input").get<std::size_t>());
  std::vector<std::pair<std::size_t, double>> overrides;
  for (const auto& o : req.value("overrides", json::array()))
    overrides.emplace_back(o.at("concept").get<std::size_t>(), o.value("value", 0.0));
  const SparseHead& h = session_.working();
  const auto r = intervene_activations(h, a, overrides);
  return {{"before", prediction_json(r.before, h)}, {"after", prediction_json(r.after, h)}};
}

namespace {

EditRequest edit_request(const json& req) {
  EditRequest r;
  r.gt = req.at("gt").get<std::size_t>();
  r.pred = req.at("pred").get<std::size_t>();
  r.concept_index = req.at("concept").get<std::size_t>();
  r.margin = req.value("b", 0.5);
  r.input_index = req.at("input").get<std::int64_t>();
  return r;
}

}  // namespace

json SessionState::propose_edit(const json& req) const {
  std::shared_lock lock(mutex_);
  const EditRequest r = edit_request(req);
  const Vector a = input_row("val", static_cast<std::size_t>(r.input_index));
  return {{"delta_w", session_.propose(r, a)}, {"gt", r.gt}, {"pred", r.pred}, {"concept", r.concept_index},
          {"b", r.margin}, {"input", r.input_index}};
}

json SessionState::apply_edit(const json& req) {
  std::unique_lock lock(mutex_);
  const EditRequest r = edit_request(req);
  const Vector a = input_row("val", static_cast<std::size_t>(r.input_index));
  const EditRecord& rec = session_.apply(r, a);
  json out = to_json(rec);
  const Prediction p = predict(session_.working(), a);
  out["source_prediction"] = prediction_json(p, session_.working());
  out["source_margin"] = p.logits(static_cast<Eigen::Index>(r.gt)) - p.logits(static_cast<Eigen::Index>(r.pred));
  return out;
}

json SessionState::list_edits() const {
  std::shared_lock lock(mutex_);
  json items = json::array();
  for (const auto& r : session_.records()) items.push_back(to_json(r));
  return items;
}

json SessionState::revert_edit(std::uint64_t id) {
  std::unique_lock lock(mutex_);
  session_.revert(id);
  return to_json(session_.record(id));
}

json SessionState::edit_impact(std::uint64_t id) {
  std::unique_lock lock(mutex_);
  const EditRecord& rec = session_.record(id);
  const SparseHead without = session_.replay_without(id);
  SparseHead with = without;
  apply_record(with, rec);
  ImpactReport impact = evaluate_impact(without, with, ws_.val_activations, ws_.bundle.val_labels);
  session_.attach_impact(id, impact);
  json out = to_json(impact);
  out["id"] = id;
  return out;
}

json SessionState::session_impact() const {
  std::shared_lock lock(mutex_);
  return to_json(evaluate_impact(session_.pristine(), session_.working(), ws_.val_activations, ws_.bundle.val_labels));
}

json SessionState::add_tag(const json& req) {
  std::unique_lock lock(mutex_);
  const std::size_t input = req.at("input").get<std::size_t>();
  if (input >= static_cast<std::size_t>(ws_.val_activations.rows()))
    throw NotFound("input " + std::to_string(input) + " out of range for split val");
  return to_json(session_.tag_error(input, req.at("type").get<int>(), req.value("note", std::string{})));
}

json SessionState::list_tags(std::optional<int> type) const {
  std::shared_lock lock(mutex_);
  json items = json::array();
  for (const auto& t : session_.tags(type)) items.push_back(to_json(t));
  return items;
}

Response handle_request(SessionState& state, const std::string& method, const std::string& path,
                        const std::map<std::string, std::string>& q, const std::string& body) {
  const auto parts = split_path(path);
  auto parse_body = [&]() {
    try {
      return body.empty() ? json::object() : json::parse(body);
    } catch (const json::exception& e) {
      throw Error(std::string("malformed JSON body: ") + e.what());
    }
  };
  auto opt_int = [&](const std::string& key) -> std::optional<int> {
    auto it = q.find(key);
    if (it == q.end()) return std::nullopt;
    return static_cast<int>(parse_index(it->second, key.c_str()));
  };
  try {
    const std::size_t n = parts.size();
    if (method == "GET" && n == 1 && parts[0] == "model") return {200, state.model_info()};
    if (method == "GET" && n == 1 && parts[0] == "inputs") {
      return {200, state.list_inputs(query_or(q, "split", "val"), query_or(q, "status", "all"), opt_int("tag"),
                                     parse_index(query_or(q, "offset", "0"), "offset"),
                                     parse_index(query_or(q, "limit", "100"), "limit"))};
    }
    if (method == "GET" && n == 3 && parts[0] == "inputs" && parts[2] == "explanation") {
      std::optional<std::size_t> cls;
      if (q.count("class")) cls = parse_index(q.at("class"), "class");
      return {200, state.explanation(query_or(q, "split", "val"), parse_index(parts[1], "input"),
                                     parse_index(query_or(q, "k", "10"), "k"), cls)};
    }
    if (method == "GET" && n == 4 && parts[0] == "inputs" && parts[2] == "activations" && parts[3] == "top") {
      return {200, state.top_activations(query_or(q, "split", "val"), parse_index(parts[1], "input"),
                                         parse_index(query_or(q, "k", "5"), "k"))};
    }
    if (method == "GET" && n == 2 && parts[0] == "weights" && parts[1] == "graph") {
      return {200, state.weight_graph(split_csv(query_or(q, "classes", "")),
                                      parse_double(query_or(q, "min", "0.05"), "min"))};
    }
    if (method == "POST" && n == 1 && parts[0] == "intervene") return {200, state.intervene(parse_body())};
    if (n == 1 && parts[0] == "edits") {
      if (method == "GET") return {200, state.list_edits()};
      if (method == "POST") {
        const json req = parse_body();
        if (req.value("dry_run", false)) return {200, state.propose_edit(req)};
        return {201, state.apply_edit(req)};
      }
    }
    if (method == "GET" && n == 2 && parts[0] == "edits" && parts[1] == "impact") return {200, state.session_impact()};
    if (method == "DELETE" && n == 2 && parts[0] == "edits") return {200, state.revert_edit(parse_index(parts[1], "edit id"))};
    if (method == "POST" && n == 3 && parts[0] == "edits" && parts[2] == "impact")
      return {200, state.edit_impact(parse_index(parts[1], "edit id"))};
    if (n == 1 && parts[0] == "tags") {
      if (method == "POST") return {201, state.add_tag(parse_body())};
      if (method == "GET") return {200, state.list_tags(opt_int("type"))};
    }
    return {404, {{"error", "no route for " + method + " " + path}}};
  } catch (const NotFound& e) {
    return {404, {{"error", e.what()}}};
  } catch (const Conflict& e) {
    return {409, {{"error", e.what()}}};
  } catch (const Error& e) {
    return {400, {{"error", e.what()}}};
  } catch (const json::exception& e) {
    return {400, {{"error", std::string("bad request: ") + e.what()}}};
  }
}

namespace {

std::mutex server_mutex;
httplib::Server* active_server = nullptr;

}  // namespace

void serve(SessionState& state, const ServeConfig& config) {
  httplib::Server server;
  auto dispatch = [&state](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    const Response r = handle_request(state, req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  const std::string any = R"(/.*)";
  server.Get(any, dispatch);
  server.Post(any, dispatch);
  server.Delete(any, dispatch);

  int port = config.port;
  if (port == 0) {
    port = server.bind_to_any_port(config.host);
  } else if (!server.bind_to_port(config.host, port)) {
    port = -1;
  }
  if (port < 0) throw Error("port busy: cannot bind " + config.host + ":" + std::to_string(config.port));
  {
    std::lock_guard lock(server_mutex);
    active_server = &server;
  }
  if (config.on_ready) config.on_ready(port);
  server.listen_after_bind();
  std::lock_guard lock(server_mutex);
  active_server = nullptr;
}

void stop_server() {
  std::lock_guard lock(server_mutex);
  if (active_server) active_server->stop();
}

}  // namespace lfcbm
