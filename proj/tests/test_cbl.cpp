#include <doctest.h>

#include <cmath>
#include <json.hpp>
#include <random>

#include "lfcbm/cbl.hpp"
#include "lfcbm/concepts.hpp"
#include "lfcbm/synth.hpp"
#include "support.hpp"

using namespace lfcbm;
using lfcbm::testing::gaussian;
using lfcbm::testing::TempDir;

namespace {

// Definitional reference: standardize, cube, cosine, all in long double.
long double ref_cos_cubed(const std::vector<long double>& q, const std::vector<long double>& p) {
  auto cubed = [](std::vector<long double> v) {
    long double mean = 0;
    for (auto x : v) mean += x;
    mean /= static_cast<long double>(v.size());
    long double var = 0;
    for (auto x : v) var += (x - mean) * (x - mean);
    const long double sd = std::sqrt(var / static_cast<long double>(v.size()));
    for (auto& x : v) {
      const long double z = (x - mean) / sd;
      x = z * z * z;
    }
    return v;
  };
  const auto a = cubed(q), b = cubed(p);
  long double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

std::vector<double> random_vec(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> g;
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

}  // namespace

TEST_CASE("cos_cubed basic algebra") {
  const std::vector<double> q{1, 2, 3, 10}, neg{-1, -2, -3, -10}, p{1, 2, 3, 4};
  CHECK(cos_cubed(q, q) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(cos_cubed(q, neg) == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK_THROWS_WITH_AS(cos_cubed(q, std::vector<double>{2, 2, 2, 2}), doctest::Contains("undefined similarity"), Error);
  CHECK_THROWS_AS(cos_cubed(q, std::vector<double>{1, 2}), Error);
}

TEST_CASE("cos_cubed pinned value for q=[1,2,3,10], p=[1,2,3,4]") {
  const long double ref = ref_cos_cubed({1, 2, 3, 10}, {1, 2, 3, 4});
  const double pinned = 0.7891119275080230;
  CHECK(std::abs(static_cast<double>(ref) - pinned) < 1e-15);
  CHECK(std::abs(cos_cubed(std::vector<double>{1, 2, 3, 10}, std::vector<double>{1, 2, 3, 4}) - pinned) < 1e-10);
}

TEST_CASE("cos_cubed symmetry, affine behaviour and bounds on random vectors") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> scale(0.1, 10.0), shift(-5.0, 5.0);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 3 + rng() % 30;
    const auto q = random_vec(rng, n), p = random_vec(rng, n);
    const double s = cos_cubed(q, p);
    CHECK(std::abs(s) <= 1.0);
    CHECK(cos_cubed(p, q) == doctest::Approx(s).epsilon(1e-12));
    std::vector<double> aff(n), flip(n);
    const double a = scale(rng), c = shift(rng);
    for (std::size_t i = 0; i < n; ++i) {
      aff[i] = a * q[i] + c;
      flip[i] = -a * q[i] + c;
    }
    CHECK(std::abs(cos_cubed(aff, p) - s) < 1e-10);
    CHECK(std::abs(cos_cubed(flip, p) + s) < 1e-10);
    std::vector<long double> ql(q.begin(), q.end()), pl(p.begin(), p.end());
    CHECK(std::abs(s - static_cast<double>(ref_cos_cubed(ql, pl))) < 1e-12);
  }
}

TEST_CASE("cbl_loss special constructions") {
  std::mt19937_64 rng(4);
  const Matrix X = gaussian(rng, 12, 3);
  const Matrix W = gaussian(rng, 2, 3);
  const Matrix P = X * W.transpose();
  CHECK(cbl_loss(W, X, P) == doctest::Approx(-2.0).epsilon(1e-12));

  // q = [1,-1,0,0], p = [0,0,1,-1]: cubed patterns are orthogonal.
  Matrix X1(4, 1);
  X1 << 1, -1, 0, 0;
  Matrix P1(4, 1);
  P1 << 0, 0, 1, -1;
  Matrix W1(1, 1);
  W1 << 2.0;
  CHECK(std::abs(cbl_loss(W1, X1, P1)) < 1e-15);
}

TEST_CASE("cbl_loss on an 8-sample hand instance matches the definition") {
  Matrix X(8, 3);
  X << 1, 0, 2, -1, 3, 0.5, 0.2, -2, 1, 4, 1, -1, -3, 0.7, 0.1, 0, 0, 1, 2.5, -1, -0.5, 0.3, 0.3, 0.3;
  Matrix W(2, 3);
  W << 0.5, -1, 0.25, 1, 1, -2;
  Matrix P(8, 2);
  P << 0.2, 0.1, 0.3, 0.25, 0.1, 0.15, 0.4, 0.2, 0.22, 0.3, 0.18, 0.12, 0.35, 0.28, 0.16, 0.21;
  long double ref = 0;
  for (int i = 0; i < 2; ++i) {
    std::vector<long double> q(8), p(8);
    for (int r = 0; r < 8; ++r) {
      long double s = 0;
      for (int c = 0; c < 3; ++c) s += static_cast<long double>(X(r, c)) * W(i, c);
      q[r] = s;
      p[r] = P(r, i);
    }
    ref -= ref_cos_cubed(q, p);
  }
  CHECK(std::abs(cbl_loss(W, X, P) - static_cast<double>(ref)) < 1e-8);
}

TEST_CASE("analytic gradient matches central differences") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 10; ++t) {
    const auto n = static_cast<Eigen::Index>(8 + rng() % 40);
    const auto m = static_cast<Eigen::Index>(1 + rng() % 6);
    const auto d = static_cast<Eigen::Index>(2 + rng() % 10);
    const Matrix X = gaussian(rng, n, d), W = gaussian(rng, m, d), P = gaussian(rng, n, m);
    const Matrix g = cbl_loss_grad(W, X, P);
    const Matrix fd = finite_diff_grad([&](const Matrix& w) { return cbl_loss(w, X, P); }, W, 1e-4);
    const double rel = (g - fd).cwiseAbs().maxCoeff() / std::max(1e-8, fd.cwiseAbs().maxCoeff());
    CHECK(rel < 1e-4);
  }
}

TEST_CASE("finite differences: exact on quadratics and V-shaped in epsilon") {
  Matrix A(2, 2);
  A << 2, 1, 1, 3;
  const auto quad = [&](const Matrix& w) { return 0.5 * (w.transpose() * A * w)(0, 0); };
  Matrix w(2, 1);
  w << 0.7, -1.3;
  CHECK((finite_diff_grad(quad, w, 1e-3) - A * w).cwiseAbs().maxCoeff() < 1e-9);

  const auto f = [](const Matrix& x) { return std::sin(3.0 * x(0, 0)); };
  Matrix x0(1, 1);
  x0 << 0.4;
  const double exact = 3.0 * std::cos(1.2);
  auto err = [&](double eps) { return std::abs(finite_diff_grad(f, x0, eps)(0, 0) - exact); };
  CHECK(err(1e-4) < err(1e-2));
  CHECK(err(1e-4) < err(1e-9));
}

TEST_CASE("fidelity cutoff is strict less-than") {
  Vector f(3);
  f << 0.44, 0.45, 0.90;
  CHECK(fidelity_survivors(f, 0.45) == std::vector<std::size_t>{1, 2});
}

TEST_CASE("config validation") {
  CblTrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.fidelity_cutoff = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.patience = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("training restores the best epoch and projection is standardized") {
  PlantedConfig pc = planted_preset("small");
  const SyntheticBundle sb = generate_planted(pc);
  const auto filtered = run_filter_pipeline(sb.bundle.concepts, sb.bundle);
  const CblData data = CblData::from_bundle(sb.bundle, filtered.concepts);
  CblTrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.max_epochs = 60;
  cfg.patience = 1000;
  const auto r = train_cbl(data, cfg);
  double best = -1e9;
  for (const auto& e : r.report.epochs) best = std::max(best, e.val_similarity);
  CHECK(r.report.best_val_similarity == best);
  CHECK(r.report.restored_val_similarity == best);
  for (Eigen::Index i = 0; i < r.model.val_fidelity.size(); ++i) CHECK(r.model.val_fidelity(i) >= cfg.fidelity_cutoff);
  CHECK(r.report.final_concepts + r.report.dropped.size() == r.report.initial_concepts);

  const Matrix Z = project_all(r.model, data.train_features);
  for (Eigen::Index c = 0; c < Z.cols(); ++c) {
    const double mean = Z.col(c).mean();
    const double sd = std::sqrt((Z.col(c).array() - mean).square().mean());
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(sd - 1.0) < 1e-5);
  }

  // A row whose raw projection equals the mean maps to zero.
  const Vector f0 = r.model.W.completeOrthogonalDecomposition().solve(r.model.mean);
  if ((r.model.W * f0 - r.model.mean).norm() < 1e-9) CHECK(project(r.model, f0).cwiseAbs().maxCoeff() < 1e-6);

  // Ground truth: a planted concept active in a sample is near the top of its projection.
  std::size_t hits = 0, trials = 0;
  for (std::size_t j = 0; j < r.model.concept_count(); ++j) {
    const auto& name = r.model.concept_names[j];
    std::size_t planted = sb.config.planted;
    for (std::size_t p = 0; p < sb.config.planted; ++p)
      if (sb.bundle.concepts[sb.planted_indices[p]].text == name) planted = p;
    if (planted == sb.config.planted) continue;
    Eigen::Index best_row = 0;
    sb.val_codes.col(static_cast<Eigen::Index>(planted)).maxCoeff(&best_row);
    Vector f(sb.bundle.val_features.cols);
    for (std::size_t c = 0; c < sb.bundle.val_features.cols; ++c) f(c) = sb.bundle.val_features(best_row, c);
    const Vector z = project(r.model, f);
    std::size_t above = 0;
    for (Eigen::Index k = 0; k < z.size(); ++k) above += z(k) > z(static_cast<Eigen::Index>(j));
    hits += above < 3;
    ++trials;
  }
  CHECK(trials > 0);
  CHECK(hits == trials);

  TempDir dir("cbl");
  save_cbl(r.model, cfg.fidelity_cutoff, dir.path());
  const CblModel back = load_cbl(dir.path());
  CHECK(back.W == r.model.W);
  CHECK(back.mean == r.model.mean);
  CHECK(back.stddev == r.model.stddev);
  CHECK(back.val_fidelity == r.model.val_fidelity);
  CHECK(back.concept_names == r.model.concept_names);
}

TEST_CASE("unprojectable fixture concepts are dropped by fidelity") {
  const auto spec = FilterFixtureSpec::load(LFCBM_FIXTURES "/cifar10/concepts.txt", LFCBM_FIXTURES "/cifar10/relations.json");
  const DatasetBundle b = make_filter_fixture(spec);
  const auto filtered = run_filter_pipeline(b.concepts, b);
  const CblData data = CblData::from_bundle(b, filtered.concepts);
  CblTrainConfig cfg;
  cfg.learning_rate = 5e-2;
  cfg.max_epochs = 300;
  cfg.patience = 20;
  const auto r = train_cbl(data, cfg);
  std::vector<std::string> dropped;
  for (const auto& d : r.report.dropped) dropped.push_back(d.name);
  INFO("dropped: ", nlohmann::json(dropped).dump(), " expected: ", nlohmann::json(spec.unprojectable).dump());
  CHECK(dropped == spec.unprojectable);
}
