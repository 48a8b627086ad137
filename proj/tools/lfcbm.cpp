#include <csignal>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "lfcbm/cbl.hpp"
#include "lfcbm/concepts.hpp"
#include "lfcbm/edit.hpp"
#include "lfcbm/error.hpp"
#include "lfcbm/explain.hpp"
#include "lfcbm/head.hpp"
#include "lfcbm/manifest.hpp"
#include "lfcbm/pipeline.hpp"
#include "lfcbm/service.hpp"
#include "lfcbm/synth.hpp"

namespace fs = std::filesystem;
using namespace lfcbm;

namespace {

// Concepts of the bundle that appear in `kept`, everything else marked removed.
ConceptSet restrict_to(const ConceptSet& all, const std::vector<std::string>& kept) {
  std::set<std::string> wanted(kept.begin(), kept.end());
  std::set<std::string> seen;
  ConceptSet out = all;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (wanted.count(out[i].text) && !seen.count(out[i].text)) {
      seen.insert(out[i].text);
    } else {
      out.remove(i, Filter::none, "", 0.0);
    }
  }
  for (const auto& k : kept)
    if (!seen.count(k)) throw Error("concept '" + k + "' is not in the bundle");
  return out;
}

std::pair<double, double> parse_band(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw Error("--nnz expects lo:hi, got '" + s + "'");
  const std::string hi = s.substr(colon + 1);
  const double lo_v = std::stod(s.substr(0, colon));
  const double hi_v = (hi.empty() || hi == "inf") ? std::numeric_limits<double>::infinity() : std::stod(hi);
  if (lo_v > hi_v) throw Error("--nnz band lo > hi");
  return {lo_v, hi_v};
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

std::string fmt(double v, int prec = 4) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(prec) << v;
  return ss.str();
}

std::optional<fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept bottleneck training, explanation and editing"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Write a planted-concept synthetic dataset");
  std::string synth_out, preset = "default";
  std::uint64_t synth_seed = 7;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "RNG seed");
  synth->add_option("--preset", preset, "default or small");
  double label_noise = -1.0;
  synth->add_option("--label-noise", label_noise);
  double other_scale = -1.0;
  synth->add_option("--other-scale", other_scale);

  // filter-concepts
  auto* filt = app.add_subcommand("filter-concepts", "Apply concept filters 1-4");
  std::string f_manifest, f_concepts, f_out, f_report;
  FilterConfig fcfg;
  double f_cutoff = std::numeric_limits<double>::quiet_NaN();
  filt->add_option("--manifest", f_manifest)->required();
  filt->add_option("--concepts", f_concepts, "Concept list (defaults to the bundle's)");
  filt->add_option("--out", f_out, "Kept concepts, one per line")->required();
  filt->add_option("--report", f_report, "Filter report JSON");
  filt->add_option("--max-len", fcfg.max_len);
  filt->add_option("--class-threshold", fcfg.class_threshold);
  filt->add_option("--concept-threshold", fcfg.concept_threshold);
  filt->add_option("--cutoff", f_cutoff, "Activation cutoff (defaults to the manifest's)");

  // train-cbl
  auto* tcbl = app.add_subcommand("train-cbl", "Train the concept bottleneck layer");
  std::string c_manifest, c_concepts, c_out, c_report;
  CblTrainConfig ccfg;
  tcbl->add_option("--manifest", c_manifest)->required();
  tcbl->add_option("--concepts", c_concepts, "Kept concepts from filter-concepts");
  tcbl->add_option("--out", c_out)->required();
  tcbl->add_option("--report", c_report);
  tcbl->add_option("--lr", ccfg.learning_rate);
  tcbl->add_option("--batch", ccfg.batch_size);
  tcbl->add_option("--max-epochs", ccfg.max_epochs);
  tcbl->add_option("--patience", ccfg.patience);
  tcbl->add_option("--cutoff", ccfg.fidelity_cutoff);
  tcbl->add_option("--seed", ccfg.seed);

  // train-final
  auto* tfin = app.add_subcommand("train-final", "Fit the sparse final layer");
  std::string h_cbl, h_manifest, h_out, h_path_report, h_band = "25:35";
  double h_alpha = 0.99, h_lambda = -1.0;
  tfin->add_option("--cbl", h_cbl)->required();
  tfin->add_option("--manifest", h_manifest)->required();
  tfin->add_option("--alpha", h_alpha);
  tfin->add_option("--nnz", h_band, "Mean nonzeros-per-class band lo:hi");
  tfin->add_option("--lambda", h_lambda, "Fixed lambda; 0 fits the dense ablation");
  tfin->add_option("--out", h_out)->required();
  tfin->add_option("--path-report", h_path_report);

  // run
  auto* run = app.add_subcommand("run", "filter -> train-cbl -> train-final -> evaluate");
  std::string r_manifest, r_out, r_band = "25:35";
  double r_lambda = -1.0;
  std::uint64_t r_seed = 0;
  run->add_option("--manifest", r_manifest)->required();
  run->add_option("--out", r_out)->required();
  run->add_option("--seed", r_seed);
  run->add_option("--nnz", r_band);
  run->add_option("--lambda", r_lambda);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Accuracy of the working head");
  std::string model_dir, manifest_override;
  eval->add_option("--model-dir", model_dir)->required();
  eval->add_option("--manifest", manifest_override);

  // explain
  auto* expl = app.add_subcommand("explain", "Top contributions behind one prediction");
  std::size_t input_index = 0, k = 10;
  std::string split = "val";
  bool as_json = false;
  expl->add_option("--model-dir", model_dir)->required();
  expl->add_option("--manifest", manifest_override);
  expl->add_option("--input-index", input_index)->required();
  expl->add_option("--k", k);
  expl->add_option("--split", split);
  expl->add_flag("--json", as_json);

  // weights-graph
  auto* graph = app.add_subcommand("weights-graph", "Export final-layer weights as a graph");
  std::string g_classes, g_out;
  double g_min = 0.05;
  graph->add_option("--model-dir", model_dir)->required();
  graph->add_option("--manifest", manifest_override);
  graph->add_option("--classes", g_classes, "Comma-separated class names or indices");
  graph->add_option("--min-weight", g_min);
  graph->add_option("--out", g_out);

  // edit
  auto* edit = app.add_subcommand("edit", "Propose, apply, evaluate or revert final-layer edits");
  edit->require_subcommand(1);
  std::size_t e_input = 0, e_gt = 0, e_pred = 0, e_concept = 0;
  std::uint64_t e_id = 0;
  double e_b = 0.5;
  auto add_edit_args = [&](CLI::App* sub) {
    sub->add_option("--model-dir", model_dir)->required();
    sub->add_option("--manifest", manifest_override);
    sub->add_option("--input", e_input)->required();
    sub->add_option("--gt", e_gt)->required();
    sub->add_option("--pred", e_pred)->required();
    sub->add_option("--concept", e_concept)->required();
    sub->add_option("--b", e_b);
  };
  auto* e_propose = edit->add_subcommand("propose", "Print delta_w without applying");
  add_edit_args(e_propose);
  auto* e_apply = edit->add_subcommand("apply", "Apply and journal an edit");
  add_edit_args(e_apply);
  auto* e_impact = edit->add_subcommand("impact", "Validation impact of edits");
  bool e_val = true;
  e_impact->add_option("--model-dir", model_dir)->required();
  e_impact->add_option("--manifest", manifest_override);
  e_impact->add_flag("--val", e_val, "Evaluate on the validation split (default)");
  e_impact->add_option("--id", e_id, "Single edit; all applied edits when omitted");
  auto* e_revert = edit->add_subcommand("revert", "Revert an applied edit");
  e_revert->add_option("--model-dir", model_dir)->required();
  e_revert->add_option("--manifest", manifest_override);
  e_revert->add_option("--id", e_id)->required();
  auto* e_list = edit->add_subcommand("list", "Print the edit journal");
  e_list->add_option("--model-dir", model_dir)->required();
  e_list->add_option("--manifest", manifest_override);

  // serve
  auto* srv = app.add_subcommand("serve", "HTTP/JSON service for the workbench");
  ServeConfig scfg;
  srv->add_option("--model-dir", model_dir)->required();
  srv->add_option("--manifest", manifest_override);
  srv->add_option("--host", scfg.host);
  srv->add_option("--port", scfg.port);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      const SyntheticBundle s = generate_planted([&] {
        PlantedConfig c = planted_preset(preset);
        c.seed = synth_seed;
        if (label_noise >= 0.0) c.label_noise = label_noise;
        if (other_scale >= 0.0) c.other_scale = other_scale;
        return c;
      }());
      std::cout << write_bundle(s.bundle, synth_out).string() << '\n';
    } else if (*filt) {
      DatasetBundle b = load_bundle(f_manifest);
      ConceptSet set = b.concepts;
      if (!f_concepts.empty()) {
        auto texts = read_lines(f_concepts);
        if (texts.size() != b.concepts.size())
          throw Error("concept list has " + std::to_string(texts.size()) + " lines but P has " +
                      std::to_string(b.concepts.size()) + " columns");
        set = ConceptSet(std::move(texts));
      }
      if (!std::isnan(f_cutoff)) fcfg.activation_cutoff = f_cutoff;
      const FilterResult r = run_filter_pipeline(set, b, fcfg);
      write_lines(r.concepts.kept_texts(), f_out);
      if (!f_report.empty()) write_json(to_json(r.report), f_report);
      std::cout << r.report.initial_count;
      for (const auto& s : r.report.stages) std::cout << " -[" << filter_name(s.filter) << "]-> " << s.removed.size();
      std::cout << " ; kept " << r.report.final_count << '\n';
    } else if (*tcbl) {
      DatasetBundle b = load_bundle(c_manifest);
      ConceptSet set = c_concepts.empty() ? b.concepts : restrict_to(b.concepts, read_lines(c_concepts));
      const CblTrainResult r = train_cbl(CblData::from_bundle(b, set), ccfg);
      save_cbl(r.model, ccfg.fidelity_cutoff, c_out);
      if (!c_report.empty()) write_json(to_json(r.report), c_report);
      std::cout << "concepts " << r.report.initial_concepts << " -> " << r.report.final_concepts << ", best epoch "
                << r.report.best_epoch << ", val similarity " << fmt(r.report.best_val_similarity) << '\n';
    } else if (*tfin) {
      const DatasetBundle b = load_bundle(h_manifest);
      const CblModel m = load_cbl(h_cbl);
      PipelineConfig cfg;
      cfg.path.alpha = h_alpha;
      std::tie(cfg.path.band_lo, cfg.path.band_hi) = parse_band(h_band);
      if (h_lambda >= 0.0) cfg.lambda = h_lambda;
      const Matrix tr = project_all(m, to_matrix(b.train_features));
      const Matrix va = project_all(m, to_matrix(b.val_features));
      const HeadStage h = fit_final_layer(tr, b.train_labels, va, b.val_labels, b.class_names, cfg);
      save_head(h.head, h_out);
      if (!h_path_report.empty()) write_json(h.report, h_path_report);
      std::cout << "lambda " << h.head.lambda << ", mean nnz/class " << fmt(h.head.mean_nnz(), 2) << ", val accuracy "
                << fmt(accuracy(h.head, va, b.val_labels)) << '\n';
    } else if (*run) {
      PipelineConfig cfg;
      cfg.cbl.seed = r_seed;
      std::tie(cfg.path.band_lo, cfg.path.band_hi) = parse_band(r_band);
      if (r_lambda >= 0.0) cfg.lambda = r_lambda;
      const auto report = run_pipeline(r_manifest, cfg, r_out);
      std::cout << "val accuracy " << fmt(report.at("val_accuracy").get<double>()) << ", mean nnz/class "
                << fmt(report.at("head").at("head").at("mean_nnz").get<double>(), 2) << ", artifacts in " << r_out
                << '\n';
    } else if (*eval) {
      SessionState st(open_workspace(model_dir, opt_path(manifest_override)));
      const SparseHead h = st.working_head();
      const Workspace& w = st.workspace();
      print_json({{"train_accuracy", accuracy(h, w.train_activations, w.bundle.train_labels)},
                  {"val_accuracy", accuracy(h, w.val_activations, w.bundle.val_labels)},
                  {"mean_nnz", h.mean_nnz()},
                  {"edits_applied", st.model_info().at("edits_applied")}});
    } else if (*expl) {
      SessionState st(open_workspace(model_dir, opt_path(manifest_override)));
      const auto j = st.explanation(split, input_index, k, std::nullopt);
      if (as_json) {
        print_json(j);
      } else {
        std::cout << split << " input " << input_index << ": predicted " << j.at("class_name").get<std::string>()
                  << " (logit " << fmt(j.at("logit").get<double>()) << ", bias " << fmt(j.at("bias").get<double>())
                  << "), label " << st.workspace().bundle.class_names.at(j.at("label").get<std::size_t>()) << '\n';
        for (const auto& c : j.at("contributions"))
          std::cout << "  " << std::setw(9) << fmt(c.at("contribution").get<double>()) << "  "
                    << c.at("label").get<std::string>() << "  (w " << fmt(c.at("weight").get<double>()) << ", a "
                    << fmt(c.at("activation").get<double>()) << ")\n";
        std::cout << "explained fraction " << fmt(j.at("explained_fraction").get<double>(), 3) << '\n';
      }
    } else if (*graph) {
      SessionState st(open_workspace(model_dir, opt_path(manifest_override)));
      std::vector<std::string> classes;
      std::stringstream ss(g_classes);
      for (std::string c; std::getline(ss, c, ',');)
        if (!c.empty()) classes.push_back(c);
      const auto j = st.weight_graph(classes, g_min);
      if (g_out.empty()) {
        print_json(j);
      } else {
        write_json(j, g_out);
      }
    } else if (*edit) {
      SessionState st(open_workspace(model_dir, opt_path(manifest_override)));
      const nlohmann::json req{{"input", e_input}, {"gt", e_gt}, {"pred", e_pred}, {"concept", e_concept}, {"b", e_b}};
      if (*e_propose) {
        print_json(st.propose_edit(req));
      } else if (*e_apply) {
        print_json(st.apply_edit(req));
      } else if (*e_impact) {
        print_json(e_impact->count("--id") ? st.edit_impact(e_id) : st.session_impact());
      } else if (*e_revert) {
        print_json(st.revert_edit(e_id));
      } else if (*e_list) {
        print_json(st.list_edits());
      }
    } else if (*srv) {
      SessionState st(open_workspace(model_dir, opt_path(manifest_override)));
      sigset_t signals;
      sigemptyset(&signals);
      sigaddset(&signals, SIGINT);
      sigaddset(&signals, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &signals, nullptr);
      std::thread waiter([&signals] {
        int sig = 0;
        sigwait(&signals, &sig);
        stop_server();
      });
      waiter.detach();
      scfg.on_ready = [&](int port) {
        std::cout << "listening on http://" << scfg.host << ":" << port << std::endl;
      };
      serve(st, scfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
