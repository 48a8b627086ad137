#pragma once

#include <filesystem>
#include <optional>

#include <json.hpp>

#include "lfcbm/cbl.hpp"
#include "lfcbm/concepts.hpp"
#include "lfcbm/head.hpp"
#include "lfcbm/manifest.hpp"

namespace lfcbm {

struct PipelineConfig {
  FilterConfig filter;
  CblTrainConfig cbl;
  PathOptions path;
  // Fixed lambda instead of the path search; 0 gives the dense ablation.
  std::optional<double> lambda;
  std::size_t dense_max_iterations = 5000;
};

// Layout of a model directory:
//   kept.txt filter_report.json train.json path.json report.json model.json
//   cbl/  (W_c.npy stats.npy concepts.txt fidelity.json)
//   head/ (W_F.npy b_F.npy classes.txt head.json)
// Output is a pure function of the inputs and config; no timestamps.
nlohmann::json run_pipeline(const std::filesystem::path& manifest, const PipelineConfig& config,
                            const std::filesystem::path& out_dir);

// Head fitting shared by the pipeline and the train-final command. Returns the
// float-rounded head together with its report; callers persist both.
struct HeadStage {
  SparseHead head;
  nlohmann::json report;
};
HeadStage fit_final_layer(const Matrix& train_act, std::span<const std::int64_t> train_labels, const Matrix& val_act,
                          std::span<const std::int64_t> val_labels, const std::vector<std::string>& class_names,
                          const PipelineConfig& config);

// Everything the explain/edit/serve paths need, loaded from a model directory.
struct Workspace {
  std::filesystem::path model_dir;
  DatasetBundle bundle;
  CblModel model;
  SparseHead head;
  Matrix train_activations;
  Matrix val_activations;
};

// The manifest defaults to the one recorded in model.json.
Workspace open_workspace(const std::filesystem::path& model_dir,
                         const std::optional<std::filesystem::path>& manifest = std::nullopt);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace lfcbm
