#include <doctest.h>

#include "lfcbm/pipeline.hpp"
#include "lfcbm/npy.hpp"
#include "lfcbm/synth.hpp"
#include "support.hpp"

using namespace lfcbm;
using lfcbm::testing::TempDir;
namespace fs = std::filesystem;

namespace {

PipelineConfig small_config() {
  PipelineConfig c;
  c.cbl.learning_rate = 1e-2;
  c.cbl.max_epochs = 200;
  c.path.band_lo = 1;
  c.path.band_hi = 3;
  c.path.steps = 25;
  return c;
}

std::map<std::string, std::string> digests(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = sha256_file(e.path());
  return out;
}

}  // namespace

TEST_CASE("pipeline end to end on the small preset is deterministic") {
  TempDir data("pipe"), a("pipe"), b("pipe");
  const fs::path manifest = write_bundle(generate_planted(planted_preset("small")).bundle, data.path());
  const auto report = run_pipeline(manifest, small_config(), a.path());
  run_pipeline(manifest, small_config(), b.path());

  const auto da = digests(a.path()), db = digests(b.path());
  CHECK(da == db);
  for (const char* f : {"kept.txt", "filter_report.json", "train.json", "path.json", "report.json", "model.json",
                        "cbl/W_c.npy", "cbl/stats.npy", "cbl/concepts.txt", "cbl/fidelity.json", "head/W_F.npy",
                        "head/b_F.npy", "head/classes.txt", "head/head.json"})
    CHECK_MESSAGE(da.count(f) == 1, f);

  CHECK(report["val_accuracy"].get<double>() >= 0.9);
  CHECK(report["head"]["mode"] == "path");
  const auto& filters = report["filters"];
  CHECK(filters["initial_count"] == 16);
  std::size_t removed = 0;
  for (const auto& s : filters["stages"]) removed += s["removed_count"].get<std::size_t>();
  CHECK(filters["final_count"].get<std::size_t>() + removed == 16);
  CHECK(report["cbl"]["final_concepts"] == filters["final_count"]);

  const Workspace ws = open_workspace(a.path());
  CHECK(ws.head.concept_count() == ws.model.concept_count());
  CHECK(accuracy(ws.head, ws.val_activations, ws.bundle.val_labels) == report["val_accuracy"].get<double>());
}

TEST_CASE("dense ablation mode") {
  TempDir data("pipe"), out("pipe");
  const fs::path manifest = write_bundle(generate_planted(planted_preset("small")).bundle, data.path());
  PipelineConfig c = small_config();
  c.lambda = 0.0;
  c.dense_max_iterations = 500;
  const auto report = run_pipeline(manifest, c, out.path());
  CHECK(report["head"]["mode"] == "dense");
  CHECK(report["head"]["head"]["mean_nnz"].get<double>() > 3.0);
}

TEST_CASE("missing manifest fails in stage 0 and writes nothing") {
  TempDir root("pipe");
  const fs::path out = root / "model";
  CHECK_THROWS_WITH_AS(run_pipeline(root / "absent.json", small_config(), out), doctest::Contains("stage 0"), Error);
  CHECK_FALSE(fs::exists(out));

  PipelineConfig bad = small_config();
  bad.cbl.fidelity_cutoff = 2.0;
  TempDir data("pipe");
  const fs::path manifest = write_bundle(generate_planted(planted_preset("small")).bundle, data.path());
  CHECK_THROWS_WITH_AS(run_pipeline(manifest, bad, out), doctest::Contains("stage 0"), Error);
  CHECK_FALSE(fs::exists(out));
}
