#include <doctest.h>

#include <cstring>
#include <fstream>
#include <random>

#include "lfcbm/edit.hpp"
#include "support.hpp"

using namespace lfcbm;
using lfcbm::testing::gaussian;
using lfcbm::testing::TempDir;

namespace {

SparseHead random_head(std::mt19937_64& rng, Eigen::Index k, Eigen::Index m) {
  SparseHead h;
  h.W = gaussian(rng, k, m);
  h.b = gaussian(rng, k, 1, 0.3).col(0);
  for (Eigen::Index i = 0; i < k; ++i) h.class_names.push_back("c" + std::to_string(i));
  return h;
}

double margin_of(const SparseHead& h, const Vector& a, std::size_t gt, std::size_t pred) {
  const Vector z = h.W * a + h.b;
  return z(static_cast<Eigen::Index>(gt)) - z(static_cast<Eigen::Index>(pred));
}

bool same_bits(const SparseHead& a, const SparseHead& b) {
  return a.W.rows() == b.W.rows() && a.W.cols() == b.W.cols() &&
         std::memcmp(a.W.data(), b.W.data(), sizeof(double) * static_cast<std::size_t>(a.W.size())) == 0 &&
         std::memcmp(a.b.data(), b.b.data(), sizeof(double) * static_cast<std::size_t>(a.b.size())) == 0;
}

}  // namespace

TEST_CASE("delta_w by direct substitution") {
  SparseHead h;
  h.W = Matrix::Zero(2, 2);
  h.W(1, 0) = 1.0 / 0.75;  // pred row: W[pred] . f = 1
  h.b = Vector::Zero(2);
  Vector f(2);
  f << 0.75, 0.0;
  CHECK(compute_delta_w(h, f, 0, 1, 0, 0.5) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("delta_w rejects degenerate requests") {
  std::mt19937_64 rng(1);
  const SparseHead h = random_head(rng, 3, 4);
  Vector f = gaussian(rng, 4, 1).col(0);
  CHECK_THROWS_WITH_AS(compute_delta_w(h, f, 1, 1, 0, 0.5), doctest::Contains("gt == pred"), Error);
  CHECK_THROWS_AS(compute_delta_w(h, f, 0, 1, 0, -0.1), Error);
  CHECK_THROWS_AS(compute_delta_w(h, f, 0, 3, 0, 0.5), Error);
  CHECK_THROWS_AS(compute_delta_w(h, f, 0, 1, 4, 0.5), Error);
  f(2) = 1e-9;
  CHECK_THROWS_WITH_AS(compute_delta_w(h, f, 0, 1, 2, 0.5), doctest::Contains("near-zero"), Error);
}

TEST_CASE("zero margin ties the two logits") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    SparseHead h = random_head(rng, 4, 6);
    const Vector f = gaussian(rng, 6, 1).col(0);
    EditSession s(h);
    s.apply({2, 0, static_cast<std::size_t>(t % 6), 0.0, -1}, f);
    CHECK(std::abs(margin_of(s.working(), f, 2, 0)) < 1e-12);
  }
}

TEST_CASE("margin, locality and exact revert on random heads") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> margin(0.2, 2.0);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index K = 2 + static_cast<Eigen::Index>(rng() % 8), M = 2 + static_cast<Eigen::Index>(rng() % 20);
    const SparseHead h = random_head(rng, K, M);
    Vector f = gaussian(rng, M, 1).col(0);
    const std::size_t gt = rng() % K;
    std::size_t pred = rng() % K;
    if (pred == gt) pred = (gt + 1) % static_cast<std::size_t>(K);
    std::size_t c = rng() % M;
    while (std::abs(f(static_cast<Eigen::Index>(c))) <= 0.1) f(static_cast<Eigen::Index>(c)) = 0.5;
    const double b = margin(rng);

    EditSession s(h);
    const EditRecord& r = s.apply({gt, pred, c, b, t}, f);
    CHECK(std::abs(margin_of(s.working(), f, gt, pred) - b) < 1e-9);
    std::size_t changed = 0;
    for (Eigen::Index i = 0; i < K; ++i)
      for (Eigen::Index j = 0; j < M; ++j) changed += s.working().W(i, j) != h.W(i, j);
    CHECK(changed <= 2);
    CHECK(s.working().b == h.b);
    CHECK(same_bits(s.working(), s.replay()));
    s.revert(r.id);
    CHECK(same_bits(s.working(), h));
    CHECK_THROWS_WITH_AS(s.revert(r.id), doctest::Contains("already reverted"), Conflict);
  }
}

TEST_CASE("reverting one of two edits equals applying only the other") {
  std::mt19937_64 rng(4);
  const SparseHead h = random_head(rng, 5, 7);
  const Vector f1 = gaussian(rng, 7, 1).col(0), f2 = gaussian(rng, 7, 1).col(0);
  EditSession both(h);
  const auto id1 = both.apply({0, 1, 2, 0.5, 1}, f1).id;
  const EditRecord second = both.apply({3, 1, 2, 0.7, 2}, f2);
  both.revert(id1);

  SparseHead only = h;
  apply_record(only, second);
  CHECK(same_bits(both.working(), only));
  CHECK(same_bits(both.replay_without(second.id), h));
  CHECK_THROWS_AS(both.revert(99), NotFound);
  CHECK_THROWS_AS(both.record(99), NotFound);
}

TEST_CASE("journal reload reproduces the working head") {
  TempDir dir("edit");
  std::mt19937_64 rng(5);
  const SparseHead h = random_head(rng, 4, 9);
  SparseHead expected;
  {
    EditSession s(h);
    s.attach_files(dir / "edits.jsonl", dir / "tags.jsonl");
    for (int i = 0; i < 6; ++i) s.apply({static_cast<std::size_t>(i % 4), static_cast<std::size_t>((i + 1) % 4),
                                         static_cast<std::size_t>(i), 0.5, i},
                                        gaussian(rng, 9, 1).col(0));
    s.revert(3);
    ImpactReport ir;
    ir.n_val = 10;
    ir.fixed = 2;
    s.attach_impact(5, ir);
    s.tag_error(12, 4, "weights favor shopping basket");
    expected = s.working();
  }
  EditSession back(h);
  back.attach_files(dir / "edits.jsonl", dir / "tags.jsonl");
  CHECK(same_bits(back.working(), expected));
  REQUIRE(back.records().size() == 6);
  CHECK(back.record(3).status == EditStatus::reverted);
  REQUIRE(back.record(5).impact.has_value());
  CHECK(back.record(5).impact->fixed == 2);
  REQUIRE(back.tags().size() == 1);
  CHECK(back.tags()[0].note == "weights favor shopping basket");
  CHECK(back.apply({0, 1, 0, 0.5, -1}, Vector::Ones(9)).id == 7);

  std::ofstream(dir / "bad.jsonl") << "{not json\n";
  EditSession broken(h);
  CHECK_THROWS_WITH_AS(broken.attach_files(dir / "bad.jsonl", dir / "none.jsonl"), doctest::Contains("corrupt journal"),
                       Error);
}

TEST_CASE("record JSON round trip") {
  EditRecord r;
  r.id = 4;
  r.gt = 1;
  r.pred = 2;
  r.concept_index = 7;
  r.delta_w = 0.1234567890123456789;
  r.margin = 0.5;
  r.input_index = 31;
  r.timestamp = "2026-01-02T03:04:05Z";
  r.status = EditStatus::reverted;
  const EditRecord back = edit_record_from_json(to_json(r));
  CHECK(back.delta_w == r.delta_w);
  CHECK(back.status == EditStatus::reverted);
  CHECK(back.timestamp == r.timestamp);
  CHECK(to_json(back) == to_json(r));
}

TEST_CASE("impact report identities") {
  std::mt19937_64 rng(6);
  const SparseHead h = random_head(rng, 4, 6);
  const Matrix A = gaussian(rng, 300, 6);
  Labels y(300);
  for (auto& v : y) v = static_cast<std::int64_t>(rng() % 4);
  const ImpactReport same = evaluate_impact(h, h, A, y);
  CHECK(same.fixed == 0);
  CHECK(same.broken == 0);
  CHECK(same.delta_accuracy == 0.0);
  CHECK(same.accuracy_before == same.accuracy_after);
  CHECK(same.affected_classes.empty());
  for (int t = 0; t < 50; ++t) {
    EditSession s(h);
    s.apply({rng() % 2, 2 + rng() % 2, rng() % 6, 0.5, -1}, gaussian(rng, 6, 1).col(0));
    const ImpactReport r = evaluate_impact(h, s.working(), A, y);
    CHECK(r.delta_accuracy == (static_cast<double>(r.fixed) - static_cast<double>(r.broken)) / 300.0);
    CHECK(r.accuracy_after - r.accuracy_before == doctest::Approx(r.delta_accuracy).epsilon(1e-12));
  }
}

TEST_CASE("error tags") {
  EditSession s(SparseHead{Matrix::Zero(2, 2), Vector::Zero(2), {"a", "b"}, 0, 0});
  s.tag_error(12, 4, "weights favor shopping basket");
  s.tag_error(3, 1, "label looks wrong");
  s.tag_error(8, 4, "");
  CHECK_THROWS_AS(s.tag_error(1, 5, ""), Error);
  CHECK_THROWS_AS(s.tag_error(1, 0, ""), Error);
  CHECK(s.tags().size() == 3);
  const auto four = s.tags(4);
  REQUIRE(four.size() == 2);
  CHECK(four[0].input_index == 12);
  CHECK(four[1].input_index == 8);
}

TEST_CASE("interventions and top activations") {
  SparseHead h;
  h.W = Matrix::Zero(3, 4);
  h.W(0, 0) = 1.0;
  h.W(1, 1) = 2.0;
  h.b = Vector::Zero(3);
  Vector a(4);
  a << 3.0, 1.0, 0.5, 0.5;
  const auto none = intervene_activations(h, a, {});
  CHECK(none.before.logits == none.after.logits);
  const auto null = intervene_activations(h, a, {{2, 0.0}});
  CHECK(null.after.label == null.before.label);
  CHECK(null.after.logits == null.before.logits);
  const auto flip = intervene_activations(h, a, {{0, 0.0}});
  CHECK(flip.before.label == 0);
  CHECK(flip.after.label == 1);
  CHECK_THROWS_AS(intervene_activations(h, a, {{4, 0.0}}), Error);
  CHECK(top_activations(a, 3) == std::vector<std::size_t>{0, 1, 2});
  CHECK(top_activations(a, 10).size() == 4);
}
