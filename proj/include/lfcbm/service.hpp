#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <shared_mutex>
#include <string>

#include <json.hpp>

#include "lfcbm/edit.hpp"
#include "lfcbm/pipeline.hpp"

namespace lfcbm {

// Loaded workspace plus the mutable edit session. Reads take a shared lock,
// edits and tags an exclusive one, so the working head always equals the
// pristine head with the journal replayed.
class SessionState {
 public:
  // Journal and tag files live in the model directory.
  explicit SessionState(Workspace ws);

  nlohmann::json model_info() const;
  nlohmann::json list_inputs(const std::string& split, const std::string& status, std::optional<int> tag,
                             std::size_t offset, std::size_t limit) const;
  nlohmann::json explanation(const std::string& split, std::size_t input, std::size_t k,
                             std::optional<std::size_t> class_index) const;
  nlohmann::json top_activations(const std::string& split, std::size_t input, std::size_t k) const;
  nlohmann::json weight_graph(const std::vector<std::string>& classes, double min_abs_weight) const;
  nlohmann::json intervene(const nlohmann::json& request) const;
  nlohmann::json propose_edit(const nlohmann::json& request) const;
  nlohmann::json apply_edit(const nlohmann::json& request);
  nlohmann::json list_edits() const;
  nlohmann::json revert_edit(std::uint64_t id);
  nlohmann::json edit_impact(std::uint64_t id);
  // Impact of every applied edit together: pristine versus working head.
  nlohmann::json session_impact() const;
  nlohmann::json add_tag(const nlohmann::json& request);
  nlohmann::json list_tags(std::optional<int> type) const;

  SparseHead working_head() const;
  const Workspace& workspace() const { return ws_; }

 private:
  const Matrix& activations(const std::string& split) const;
  std::span<const std::int64_t> labels(const std::string& split) const;
  Vector input_row(const std::string& split, std::size_t input) const;

  Workspace ws_;
  EditSession session_;
  mutable std::shared_mutex mutex_;
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

// Routes one request; errors map to 400 (bad request), 404 (unknown route,
// input or edit) and 409 (state conflict such as reverting twice).
Response handle_request(SessionState& state, const std::string& method, const std::string& path,
                        const std::map<std::string, std::string>& query, const std::string& body);

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::function<void(int)> on_ready;  // called with the bound port
};

// Blocks until stop_server is called or the process receives SIGINT/SIGTERM.
void serve(SessionState& state, const ServeConfig& config);
void stop_server();

}  // namespace lfcbm
