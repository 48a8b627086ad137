#include <doctest.h>

#include <atomic>
#include <future>
#include <thread>

#include "lfcbm/pipeline.hpp"
#include "lfcbm/service.hpp"
#include "lfcbm/synth.hpp"
#include "support.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>

using namespace lfcbm;
using lfcbm::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// One trained model shared by every case; each case copies it so journals start empty.
struct Trained {
  TempDir data{"svc"};
  TempDir model{"svc"};
  Trained() {
    const fs::path manifest = write_bundle(generate_planted(planted_preset("small")).bundle, data.path());
    PipelineConfig c;
    c.cbl.learning_rate = 1e-2;
    c.cbl.max_epochs = 200;
    c.path.band_lo = 1;
    c.path.band_hi = 3;
    c.path.steps = 25;
    run_pipeline(manifest, c, model.path());
  }
};

const Trained& trained() {
  static Trained t;
  return t;
}

struct Fresh {
  TempDir dir{"svc"};
  std::unique_ptr<SessionState> state;
  Fresh() {
    fs::copy(trained().model.path(), dir.path(), fs::copy_options::recursive);
    state = std::make_unique<SessionState>(open_workspace(dir.path()));
  }
  Response call(const std::string& method, const std::string& path, const std::map<std::string, std::string>& q = {},
                const json& body = nullptr) {
    return handle_request(*state, method, path, q, body.is_null() ? "" : body.dump());
  }
};

// A wrong validation input plus its highest positive activation.
json pick_edit(Fresh& f) {
  const auto wrong = f.call("GET", "/inputs", {{"status", "wrong"}, {"limit", "1"}});
  REQUIRE(wrong.status == 200);
  REQUIRE(wrong.body["items"].size() == 1);
  const auto& item = wrong.body["items"][0];
  const auto top = f.call("GET", "/inputs/" + std::to_string(item["index"].get<std::size_t>()) + "/activations/top",
                          {{"k", "1"}});
  return {{"input", item["index"]}, {"gt", item["label"]}, {"pred", item["pred"]},
          {"concept", top.body["items"][0]["concept_index"]}, {"b", 0.5}};
}

}  // namespace

TEST_CASE("model metadata") {
  Fresh f;
  const auto r = f.call("GET", "/model");
  CHECK(r.status == 200);
  CHECK(r.body["d_z"] == 4);
  CHECK(r.body["M"].get<std::size_t>() >= 1);
  CHECK(r.body["nnz"]["per_class"].size() == 4);
  CHECK(r.body["fidelity"]["min"].get<double>() >= 0.45);
  CHECK(r.body["edits_applied"] == 0);
}

TEST_CASE("inputs, explanations, graph and interventions") {
  Fresh f;
  const auto all = f.call("GET", "/inputs", {{"limit", "5"}});
  CHECK(all.body["total"] == 200);
  CHECK(all.body["items"].size() == 5);
  const auto right = f.call("GET", "/inputs", {{"status", "right"}, {"limit", "0"}});
  const auto wrong = f.call("GET", "/inputs", {{"status", "wrong"}, {"limit", "0"}});
  CHECK(right.body["total"].get<std::size_t>() + wrong.body["total"].get<std::size_t>() == 200);

  const auto ex = f.call("GET", "/inputs/3/explanation", {{"k", "10"}});
  REQUIRE(ex.status == 200);
  double sum = ex.body["bias"].get<double>();
  for (const auto& c : ex.body["contributions"]) sum += c["contribution"].get<double>();
  CHECK(ex.body["explained_fraction"] == 1.0);
  CHECK(sum == doctest::Approx(ex.body["logit"].get<double>()).epsilon(1e-9));
  const auto ex1 = f.call("GET", "/inputs/3/explanation", {{"class", "1"}});
  CHECK(ex1.body["class"] == 1);

  CHECK(f.call("GET", "/inputs/100000/explanation").status == 404);
  CHECK(f.call("GET", "/inputs/x/explanation").status == 400);
  CHECK(f.call("GET", "/inputs/3/explanation", {{"split", "test"}}).status == 400);
  CHECK(f.call("GET", "/nowhere").status == 404);

  const auto g = f.call("GET", "/weights/graph", {{"classes", "class 00,1"}, {"min", "0"}});
  REQUIRE(g.status == 200);
  CHECK(g.body["classes"] == json::array({"class 00", "class 01"}));
  CHECK(f.call("GET", "/weights/graph", {{"classes", "nope"}}).status == 400);

  const auto iv = f.call("POST", "/intervene", {}, {{"input", 3}, {"overrides", json::array()}});
  REQUIRE(iv.status == 200);
  CHECK(iv.body["before"] == iv.body["after"]);
  CHECK(f.call("POST", "/intervene", {}, json("garbage")).status == 400);
}

TEST_CASE("edit round trip over handle_request") {
  Fresh f;
  const json req = pick_edit(f);
  json dry = req;
  dry["dry_run"] = true;
  const auto proposal = f.call("POST", "/edits", {}, dry);
  REQUIRE(proposal.status == 200);
  CHECK(f.call("GET", "/edits").body.size() == 0);

  const auto applied = f.call("POST", "/edits", {}, req);
  REQUIRE(applied.status == 201);
  const std::uint64_t id = applied.body["id"];
  CHECK(applied.body["delta_w"] == proposal.body["delta_w"]);
  CHECK(applied.body["source_margin"].get<double>() == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(applied.body["source_prediction"]["class"] == req["gt"]);

  const auto listed = f.call("GET", "/edits");
  REQUIRE(listed.body.size() == 1);
  CHECK(listed.body[0]["delta_w"] == applied.body["delta_w"]);
  CHECK(listed.body[0]["margin"] == 0.5);

  const auto impact = f.call("POST", "/edits/" + std::to_string(id) + "/impact");
  REQUIRE(impact.status == 200);
  const auto& ir = impact.body;
  CHECK(ir["delta_accuracy"].get<double>() ==
        (ir["fixed"].get<double>() - ir["broken"].get<double>()) / ir["n_val"].get<double>());
  CHECK(ir["fixed"].get<std::size_t>() >= 1);
  CHECK(f.call("GET", "/edits").body[0].contains("impact"));
  CHECK(f.call("GET", "/edits/impact").status == 200);

  const SparseHead pristine = f.state->workspace().head;
  CHECK(f.call("DELETE", "/edits/" + std::to_string(id)).status == 200);
  CHECK(f.state->working_head().W == pristine.W);
  const auto twice = f.call("DELETE", "/edits/" + std::to_string(id));
  CHECK(twice.status == 409);
  CHECK(twice.body["error"].get<std::string>().find("already reverted") != std::string::npos);
  CHECK(f.call("DELETE", "/edits/77").status == 404);

  json same = req;
  same["pred"] = req["gt"];
  CHECK(f.call("POST", "/edits", {}, same).status == 400);
}

TEST_CASE("journal survives a restart") {
  Fresh f;
  const json req = pick_edit(f);
  REQUIRE(f.call("POST", "/edits", {}, req).status == 201);
  REQUIRE(f.call("POST", "/tags", {}, {{"input", 12}, {"type", 4}, {"note", "weights favor class 02"}}).status == 201);
  CHECK(f.call("POST", "/tags", {}, {{"input", 12}, {"type", 5}}).status == 400);
  const SparseHead before = f.state->working_head();
  f.state.reset();
  SessionState again(open_workspace(f.dir.path()));
  CHECK(again.working_head().W == before.W);
  const auto tags = handle_request(again, "GET", "/tags", {{"type", "4"}}, "");
  REQUIRE(tags.body.size() == 1);
  CHECK(tags.body[0]["note"] == "weights favor class 02");
  CHECK(handle_request(again, "GET", "/inputs", {{"tag", "4"}}, "").body["total"] == 1);
}

TEST_CASE("concurrent readers with a single writer keep the session consistent") {
  Fresh f;
  const json req = pick_edit(f);
  std::atomic<bool> stop{false};
  std::atomic<std::size_t> reads{0}, failures{0};
  std::vector<std::thread> readers;
  for (int t = 0; t < 4; ++t)
    readers.emplace_back([&] {
      while (!stop) {
        const auto r = f.call("GET", "/inputs/" + std::to_string(reads % 50) + "/explanation");
        if (r.status != 200) ++failures;
        ++reads;
      }
    });
  for (int i = 0; i < 20; ++i) {
    json r = req;
    r["b"] = 0.2 + 0.05 * i;
    const auto a = f.call("POST", "/edits", {}, r);
    if (a.status != 201) ++failures;
    if (i % 2) f.call("DELETE", "/edits/" + std::to_string(a.body["id"].get<std::uint64_t>()));
  }
  stop = true;
  for (auto& t : readers) t.join();
  CHECK(failures == 0);
  CHECK(reads > 0);
  SessionState reloaded(open_workspace(f.dir.path()));
  CHECK(reloaded.working_head().W == f.state->working_head().W);
}

TEST_CASE("live HTTP server on an ephemeral port") {
  Fresh f;
  std::promise<int> ready;
  std::thread server([&] {
    ServeConfig cfg;
    cfg.port = 0;
    cfg.on_ready = [&](int port) { ready.set_value(port); };
    serve(*f.state, cfg);
  });
  const int port = ready.get_future().get();
  httplib::Client client("127.0.0.1", port);
  const auto model = client.Get("/model");
  REQUIRE(model);
  CHECK(model->status == 200);
  CHECK(json::parse(model->body)["d_z"] == 4);
  const auto tag = client.Post("/tags", R"({"input": 1, "type": 2, "note": "x"})", "application/json");
  REQUIRE(tag);
  CHECK(tag->status == 201);
  const auto missing = client.Delete("/edits/5");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  stop_server();
  server.join();
}
