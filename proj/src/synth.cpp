#include "lfcbm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "lfcbm/error.hpp"

namespace lfcbm {

namespace {

std::string two_digit(std::size_t i) { return (i < 10 ? "0" : "") + std::to_string(i); }

void unit_rows(Matrix& m, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = normal(rng);
    m.row(r).normalize();
  }
}

struct Split {
  Matrix codes, features, P;
  std::vector<std::int64_t> labels;
};

Split sample_split(std::size_t n, const PlantedConfig& cfg, const Matrix& A, const Matrix& G, std::mt19937_64& rng) {
  const std::size_t m_star = cfg.planted, k = cfg.classes;
  const std::size_t m_total = m_star + cfg.dead_distractors + cfg.spurious_distractors;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> magnitude(0.5, 1.5);
  std::uniform_real_distribution<double> spike(1.0, 1.5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_class(0, k - 1);
  std::uniform_int_distribution<std::size_t> pick_total(3, 6);

  Split s;
  s.codes = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m_star));
  s.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = pick_class(rng);
    std::vector<std::size_t> own, other;
    for (std::size_t j = 0; j < m_star; ++j) (j % k == cls ? own : other).push_back(j);
    const std::size_t total = pick_total(rng);
    const std::size_t n_own = std::min({total, own.size(), std::size_t{2} + (unit(rng) < 0.5 ? 1u : 0u)});
    std::shuffle(own.begin(), own.end(), rng);
    std::shuffle(other.begin(), other.end(), rng);
    const std::size_t n_other = std::min(total - n_own, other.size());
    for (std::size_t t = 0; t < n_own; ++t) s.codes(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(own[t])) = magnitude(rng);
    for (std::size_t t = 0; t < n_other; ++t)
      s.codes(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(other[t])) = cfg.other_scale * magnitude(rng);
    Vector score = G * s.codes.row(static_cast<Eigen::Index>(i)).transpose();
    for (Eigen::Index c = 0; c < score.size(); ++c) score(c) += cfg.label_noise * normal(rng);
    s.labels[i] = static_cast<std::int64_t>(argmax_lowest(score));
  }

  s.features = s.codes * A.transpose();
  for (Eigen::Index i = 0; i < s.features.rows(); ++i)
    for (Eigen::Index j = 0; j < s.features.cols(); ++j) s.features(i, j) += cfg.sigma * normal(rng);

  s.P.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m_total));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m_total; ++j) {
      double presence = 0.0;
      if (j < m_star) {
        presence = s.codes(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      } else if (j >= m_star + cfg.dead_distractors) {
        presence = unit(rng) < 0.02 ? spike(rng) : 0.0;
      }
      const double v = 0.15 + 0.1 * (presence + cfg.sigma * normal(rng));
      s.P(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::clamp(v, -1.0, 1.0);
    }
  }
  return s;
}

}  // namespace

void PlantedConfig::validate() const {
  if (planted < classes) throw Error("infeasible config: M* < d_z");
  if (classes < 2) throw Error("infeasible config: need at least 2 classes");
  if (!(sigma >= 0.0)) throw Error("infeasible config: sigma must be >= 0");
  if (!(label_noise >= 0.0)) throw Error("infeasible config: label noise must be >= 0");
  if (n_train < 5 || n_val < 2) throw Error("infeasible config: too few samples");
  if (d0 < 1 || text_dim < 2) throw Error("infeasible config: bad dimensions");
  if (!(activation_cutoff > -1.0 && activation_cutoff < 1.0)) throw Error("infeasible config: cutoff outside (-1, 1)");
}

PlantedConfig planted_preset(const std::string& name) {
  PlantedConfig c;
  if (name == "default") return c;
  if (name == "small") {
    c.n_train = 400;
    c.n_val = 200;
    c.d0 = 24;
    c.planted = 12;
    c.classes = 4;
    c.dead_distractors = 2;
    c.spurious_distractors = 2;
    return c;
  }
  throw Error("unknown preset '" + name + "' (expected default or small)");
}

SyntheticBundle generate_planted(const PlantedConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d0 = static_cast<Eigen::Index>(cfg.d0);
  const auto m_star = static_cast<Eigen::Index>(cfg.planted);
  const auto k = static_cast<Eigen::Index>(cfg.classes);

  SyntheticBundle out;
  out.config = cfg;
  out.A.resize(d0, m_star);
  for (Eigen::Index i = 0; i < d0; ++i)
    for (Eigen::Index j = 0; j < m_star; ++j) out.A(i, j) = normal(rng);
  out.G = Matrix::Zero(k, m_star);
  for (Eigen::Index j = 0; j < m_star; ++j) out.G(j % k, j) = 1.0;

  Split train = sample_split(cfg.n_train, cfg, out.A, out.G, rng);
  Split val = sample_split(cfg.n_val, cfg, out.A, out.G, rng);
  out.train_codes = train.codes;
  out.val_codes = val.codes;

  DatasetBundle& b = out.bundle;
  b.dataset = "synthetic-planted";
  b.activation_cutoff = cfg.activation_cutoff;
  b.train_features = to_tensor(train.features);
  b.val_features = to_tensor(val.features);
  b.train_P = to_tensor(train.P);
  b.val_P = to_tensor(val.P);
  b.train_labels = train.labels;
  b.val_labels = val.labels;
  for (std::size_t c = 0; c < cfg.classes; ++c) b.class_names.push_back("class " + two_digit(c));

  std::vector<std::string> names;
  for (std::size_t j = 0; j < cfg.planted; ++j) {
    out.planted_indices.push_back(names.size());
    names.push_back("planted concept " + two_digit(j));
  }
  for (std::size_t j = 0; j < cfg.dead_distractors; ++j) {
    out.distractor_indices.push_back(names.size());
    names.push_back("absent distractor " + two_digit(j));
  }
  for (std::size_t j = 0; j < cfg.spurious_distractors; ++j) {
    out.distractor_indices.push_back(names.size());
    names.push_back("spurious distractor " + two_digit(j));
  }
  b.concepts = ConceptSet(names);

  for (const char* space : {"space_a", "space_b"}) {
    Matrix ce(static_cast<Eigen::Index>(names.size()), static_cast<Eigen::Index>(cfg.text_dim));
    Matrix ke(k, static_cast<Eigen::Index>(cfg.text_dim));
    unit_rows(ce, rng);
    unit_rows(ke, rng);
    b.concept_text_embeddings.push_back({space, to_tensor(ce)});
    b.class_text_embeddings.push_back({space, to_tensor(ke)});
  }
  validate_bundle(b);
  return out;
}

SparseHead coordinate_descent_oracle(const Matrix& X, std::span<const std::int64_t> y, std::size_t classes,
                                     double lambda, double alpha, double tol, std::size_t max_sweeps) {
  const Eigen::Index n = X.rows(), m = X.cols(), k = static_cast<Eigen::Index>(classes);
  if (static_cast<std::size_t>(n) != y.size()) throw Error("shape mismatch: activations rows != labels");
  Matrix W = Matrix::Zero(k, m);
  Vector b = Vector::Zero(k);
  Matrix Y = Matrix::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) Y(i, static_cast<Eigen::Index>(y[static_cast<std::size_t>(i)])) = 1.0;
  Matrix Z = Matrix::Zero(n, k);  // logits, kept in sync with W and b

  auto probs = [&](Matrix& Pm) {
    Pm.resize(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = Z.row(i).maxCoeff();
      double s = 0.0;
      for (Eigen::Index c = 0; c < k; ++c) s += (Pm(i, c) = std::exp(Z(i, c) - mx));
      Pm.row(i) /= s;
    }
  };
  auto objective = [&]() {
    double f = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = Z.row(i).maxCoeff();
      double s = 0.0;
      for (Eigen::Index c = 0; c < k; ++c) s += std::exp(Z(i, c) - mx);
      f += mx + std::log(s) - Z(i, static_cast<Eigen::Index>(y[static_cast<std::size_t>(i)]));
    }
    double l1 = 0.0, l2 = 0.0;
    for (Eigen::Index r = 0; r < k; ++r)
      for (Eigen::Index c = 0; c < m; ++c) {
        l1 += std::abs(W(r, c));
        l2 += W(r, c) * W(r, c);
      }
    return f + lambda * ((1.0 - alpha) * 0.5 * l2 + alpha * l1);
  };
  auto soft = [](double v, double t) { return v > t ? v - t : (v < -t ? v + t : 0.0); };

  Vector curv(m);
  for (Eigen::Index j = 0; j < m; ++j) curv(j) = 0.25 * X.col(j).squaredNorm();
  const double bias_curv = 0.25 * static_cast<double>(n);

  Matrix Pm;
  double prev = objective();
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    for (Eigen::Index c = 0; c < k; ++c) {
      for (int inner = 0; inner < 100; ++inner) {
        probs(Pm);
        const double g = (Pm.col(c) - Y.col(c)).sum();
        const double step = g / bias_curv;
        b(c) -= step;
        Z.col(c).array() -= step;
        if (std::abs(step) < 1e-15 * (1.0 + std::abs(b(c)))) break;
      }
      for (Eigen::Index j = 0; j < m; ++j) {
        if (curv(j) == 0.0) continue;
        for (int inner = 0; inner < 100; ++inner) {
          probs(Pm);
          const double g = X.col(j).dot(Pm.col(c) - Y.col(c));
          const double w = W(c, j);
          const double v = soft(curv(j) * w - g, lambda * alpha) / (curv(j) + lambda * (1.0 - alpha));
          const double delta = v - w;
          if (delta == 0.0) break;
          W(c, j) = v;
          Z.col(c) += delta * X.col(j);
          if (std::abs(delta) < 1e-15 * (1.0 + std::abs(v))) break;
        }
      }
    }
    const double f = objective();
    if (prev - f <= tol * std::max(1.0, std::abs(f))) break;
    prev = f;
  }
  SparseHead h;
  h.W = W;
  h.b = b;
  h.lambda = lambda;
  h.alpha = alpha;
  for (std::size_t c = 0; c < classes; ++c) h.class_names.push_back(std::to_string(c));
  return h;
}

Matrix finite_diff_grad(const std::function<double(const Matrix&)>& loss, const Matrix& W, double eps) {
  if (!(eps > 0.0)) throw Error("finite difference step must be positive");
  Matrix g(W.rows(), W.cols());
  Matrix probe = W;
  for (Eigen::Index r = 0; r < W.rows(); ++r) {
    for (Eigen::Index c = 0; c < W.cols(); ++c) {
      const double orig = probe(r, c);
      probe(r, c) = orig + eps;
      const double up = loss(probe);
      probe(r, c) = orig - eps;
      const double down = loss(probe);
      probe(r, c) = orig;
      g(r, c) = (up - down) / (2.0 * eps);
    }
  }
  return g;
}

FilterFixtureSpec FilterFixtureSpec::load(const std::filesystem::path& concepts_txt,
                                          const std::filesystem::path& relations_json) {
  FilterFixtureSpec s;
  s.concepts = read_lines(concepts_txt);
  std::ifstream in(relations_json);
  if (!in) throw Error("missing file: " + relations_json.string());
  nlohmann::json j;
  try {
    in >> j;
    s.classes = j.at("classes").get<std::vector<std::string>>();
    s.activation_cutoff = j.at("activation_cutoff").get<double>();
    for (const auto& p : j.at("class_near")) s.class_near.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
    for (const auto& p : j.at("concept_near"))
      s.concept_near.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
    s.low_activation = j.at("low_activation").get<std::vector<std::string>>();
    s.unprojectable = j.at("unprojectable").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed relations file " + relations_json.string() + ": " + e.what());
  }
  return s;
}

DatasetBundle make_filter_fixture(const FilterFixtureSpec& spec, std::uint64_t seed, std::size_t dim,
                                  std::size_t samples) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::map<std::string, std::size_t> concept_index, class_index;
  for (std::size_t i = 0; i < spec.concepts.size(); ++i) {
    if (!concept_index.emplace(spec.concepts[i], i).second)
      throw Error("fixture concept listed twice: " + spec.concepts[i]);
  }
  for (std::size_t i = 0; i < spec.classes.size(); ++i) class_index.emplace(spec.classes[i], i);
  auto lookup = [](const std::map<std::string, std::size_t>& m, const std::string& key) {
    auto it = m.find(key);
    if (it == m.end()) throw Error("fixture relation names unknown entry '" + key + "'");
    return it->second;
  };

  const auto M = static_cast<Eigen::Index>(spec.concepts.size());
  const auto K = static_cast<Eigen::Index>(spec.classes.size());
  const auto D = static_cast<Eigen::Index>(dim);

  DatasetBundle b;
  b.dataset = "cifar10-filter-fixture";
  b.activation_cutoff = spec.activation_cutoff;
  b.class_names = spec.classes;
  b.concepts = ConceptSet(spec.concepts);

  for (const char* space : {"space_a", "space_b"}) {
    Matrix ce(M, D), ke(K, D);
    unit_rows(ce, rng);
    unit_rows(ke, rng);
    auto near = [&](const Eigen::RowVectorXd& base) {
      Eigen::RowVectorXd noise(D);
      for (Eigen::Index t = 0; t < D; ++t) noise(t) = normal(rng);
      Eigen::RowVectorXd v = base + 0.25 * noise.normalized();
      return Eigen::RowVectorXd(v.normalized());
    };
    for (const auto& [concept_name, cls] : spec.class_near)
      ce.row(static_cast<Eigen::Index>(lookup(concept_index, concept_name))) =
          near(ke.row(static_cast<Eigen::Index>(lookup(class_index, cls))));
    for (const auto& [concept_name, twin] : spec.concept_near) {
      const auto i = lookup(concept_index, concept_name), t = lookup(concept_index, twin);
      if (t >= i) throw Error("fixture twin '" + twin + "' must precede '" + concept_name + "'");
      ce.row(static_cast<Eigen::Index>(i)) = near(ce.row(static_cast<Eigen::Index>(t)));
    }
    b.concept_text_embeddings.push_back({space, to_tensor(ce)});
    b.class_text_embeddings.push_back({space, to_tensor(ke)});
  }

  std::set<std::size_t> low, noise;
  for (const auto& name : spec.low_activation) low.insert(lookup(concept_index, name));
  for (const auto& name : spec.unprojectable) noise.insert(lookup(concept_index, name));
  constexpr Eigen::Index kFeatureDim = 16;
  Matrix readout(kFeatureDim, M);
  for (Eigen::Index j = 0; j < M; ++j) {
    Eigen::VectorXd a(kFeatureDim);
    for (Eigen::Index t = 0; t < kFeatureDim; ++t) a(t) = normal(rng);
    readout.col(j) = a.normalized();
  }
  auto make_features = [&](std::size_t n) {
    Matrix F(static_cast<Eigen::Index>(n), kFeatureDim);
    for (Eigen::Index i = 0; i < F.rows(); ++i)
      for (Eigen::Index j = 0; j < F.cols(); ++j) F(i, j) = normal(rng);
    return F;
  };
  // Regular columns are linear in the features; unprojectable ones are independent noise.
  auto make_P = [&](const Matrix& F) {
    Matrix P(F.rows(), M);
    for (Eigen::Index i = 0; i < P.rows(); ++i)
      for (Eigen::Index j = 0; j < M; ++j) {
        const auto jj = static_cast<std::size_t>(j);
        if (low.count(jj))
          P(i, j) = 0.12 + 0.08 * unit(rng);
        else if (noise.count(jj))
          P(i, j) = 0.27 + 0.04 * normal(rng);
        else
          P(i, j) = 0.27 + 0.04 * F.row(i).dot(readout.col(j));
      }
    return P;
  };
  auto make_labels = [&](std::size_t n) {
    std::vector<std::int64_t> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<std::int64_t>(i % spec.classes.size());
    return y;
  };
  const Matrix train_F = make_features(samples), val_F = make_features(samples / 2);
  b.train_P = to_tensor(make_P(train_F));
  b.val_P = to_tensor(make_P(val_F));
  b.train_features = to_tensor(train_F);
  b.val_features = to_tensor(val_F);
  b.train_labels = make_labels(samples);
  b.val_labels = make_labels(samples / 2);
  validate_bundle(b);
  return b;
}

}  // namespace lfcbm
