#include "lfcbm/pipeline.hpp"

#include <fstream>

#include "lfcbm/error.hpp"

namespace lfcbm {

namespace fs = std::filesystem;

namespace {

template <typename F>
auto stage(const char* label, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw Error(std::string(label) + ": " + e.what());
  }
}

nlohmann::json head_summary(const SparseHead& h) {
  return {{"lambda", h.lambda}, {"alpha", h.alpha}, {"mean_nnz", h.mean_nnz()}, {"nnz_per_class", h.nnz_per_class()}};
}

}  // namespace

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing file: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw Error("I/O failure writing " + path.string());
}

HeadStage fit_final_layer(const Matrix& train_act, std::span<const std::int64_t> train_labels, const Matrix& val_act,
                          std::span<const std::int64_t> val_labels, const std::vector<std::string>& class_names,
                          const PipelineConfig& config) {
  HeadStage out;
  if (config.lambda) {
    FitOptions opts = config.path.final_fit;
    opts.alpha = config.path.alpha;
    if (*config.lambda == 0.0) opts.max_iterations = config.dense_max_iterations;
    FitInfo info;
    SparseHead h = fit_head(train_act, train_labels, class_names.size(), *config.lambda, opts, nullptr, &info);
    h.class_names = class_names;
    out.head = round_to_float(h);
    out.report = {{"mode", *config.lambda == 0.0 ? "dense" : "fixed-lambda"},
                  {"lambda", *config.lambda},
                  {"alpha", opts.alpha},
                  {"iterations", info.iterations},
                  {"converged", info.converged}};
  } else {
    PathResult r = fit_path(train_act, train_labels, val_act, val_labels, class_names, config.path);
    out.head = round_to_float(r.head);
    out.report = to_json(r.report);
    out.report["mode"] = "path";
  }
  out.report["head"] = head_summary(out.head);
  return out;
}

nlohmann::json run_pipeline(const fs::path& manifest, const PipelineConfig& config, const fs::path& out_dir) {
  DatasetBundle bundle = stage("stage 0 (load)", [&] {
    config.cbl.validate();
    return load_bundle(manifest);
  });
  fs::create_directories(out_dir);

  FilterResult filtered = stage("stage 1 (filter-concepts)", [&] {
    FilterResult r = run_filter_pipeline(bundle.concepts, bundle, config.filter);
    if (r.concepts.kept_count() == 0) throw Error("no concepts survived filters 1-4");
    write_lines(r.concepts.kept_texts(), out_dir / "kept.txt");
    return r;
  });

  CblTrainResult cbl = stage("stage 2 (train-cbl)", [&] {
    const CblData data = CblData::from_bundle(bundle, filtered.concepts);
    CblTrainResult r = train_cbl(data, config.cbl);
    save_cbl(r.model, config.cbl.fidelity_cutoff, out_dir / "cbl");
    r.model = load_cbl(out_dir / "cbl");
    write_json(to_json(r.report), out_dir / "train.json");
    return r;
  });

  ConceptSet final_set = filtered.concepts;
  for (const auto& d : cbl.report.dropped) {
    for (std::size_t i = 0; i < final_set.size(); ++i) {
      if (final_set[i].kept && final_set[i].text == d.name) {
        final_set.remove(i, Filter::fidelity, "", d.fidelity);
        break;
      }
    }
  }
  const FilterReport filter_report = FilterReport::from(final_set);
  write_json(to_json(filter_report), out_dir / "filter_report.json");

  const Matrix train_act = project_all(cbl.model, to_matrix(bundle.train_features));
  const Matrix val_act = project_all(cbl.model, to_matrix(bundle.val_features));

  HeadStage head = stage("stage 3 (train-final)", [&] {
    HeadStage h = fit_final_layer(train_act, bundle.train_labels, val_act, bundle.val_labels, bundle.class_names, config);
    save_head(h.head, out_dir / "head");
    write_json(h.report, out_dir / "path.json");
    return h;
  });

  return stage("stage 4 (evaluate)", [&] {
    const SparseHead loaded = load_head(out_dir / "head");
    nlohmann::json report;
    report["dataset"] = bundle.dataset;
    report["filters"] = to_json(filter_report);
    report["cbl"] = {{"initial_concepts", cbl.report.initial_concepts},
                     {"final_concepts", cbl.report.final_concepts},
                     {"delta", cbl.report.initial_concepts - cbl.report.final_concepts},
                     {"best_epoch", cbl.report.best_epoch},
                     {"best_val_similarity", cbl.report.best_val_similarity}};
    report["head"] = head.report;
    report["train_accuracy"] = accuracy(loaded, train_act, bundle.train_labels);
    report["val_accuracy"] = accuracy(loaded, val_act, bundle.val_labels);
    write_json(report, out_dir / "report.json");
    write_json({{"manifest", fs::absolute(manifest).lexically_normal().string()}, {"format_version", 1}},
               out_dir / "model.json");
    return report;
  });
}

Workspace open_workspace(const fs::path& model_dir, const std::optional<fs::path>& manifest) {
  Workspace w;
  w.model_dir = model_dir;
  fs::path manifest_path;
  if (manifest) {
    manifest_path = *manifest;
  } else {
    manifest_path = read_json(model_dir / "model.json").at("manifest").get<std::string>();
  }
  w.bundle = load_bundle(manifest_path);
  w.model = load_cbl(model_dir / "cbl");
  w.head = load_head(model_dir / "head");
  if (w.head.concept_count() != w.model.concept_count())
    throw Error("corrupt artifacts: head concept count != CBL concept count");
  if (w.model.input_dim() != w.bundle.train_features.cols) throw Error("dimension mismatch: CBL input dim vs features");
  if (w.head.class_count() != w.bundle.class_names.size()) throw Error("corrupt artifacts: head class count != bundle");
  w.train_activations = project_all(w.model, to_matrix(w.bundle.train_features));
  w.val_activations = project_all(w.model, to_matrix(w.bundle.val_features));
  return w;
}

}  // namespace lfcbm
