#include "lfcbm/cbl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "lfcbm/error.hpp"
#include "lfcbm/concepts.hpp"
#include "lfcbm/npy.hpp"
#include "lfcbm/parallel.hpp"

namespace lfcbm {

namespace fs = std::filesystem;

namespace {

constexpr double kStdFloor = 1e-6;

// Standardized column and its cube, plus what backprop needs.
struct CubedColumn {
  Vector z;      // (x - mean) / sigma
  Vector u;      // z^3
  double sigma;  // population std of x
  double norm;   // |u|
};

bool standardize(const double* x, Eigen::Index n, CubedColumn& out) {
  Eigen::Map<const Vector> v(x, n);
  const double mean = v.mean();
  const Vector c = v.array() - mean;
  const double sigma = std::sqrt(c.squaredNorm() / static_cast<double>(n));
  // Relative test so that large offsets with no spread count as constant.
  const double scale = std::max(1.0, v.cwiseAbs().maxCoeff());
  if (!(sigma > 1e-12 * scale)) return false;
  out.sigma = sigma;
  out.z = c / sigma;
  out.u = out.z.array().cube();
  out.norm = out.u.norm();
  return out.norm > 0.0;
}

// Similarity and gradient w.r.t. q for one concept. Returns false if either
// column is constant.
bool column_similarity(const double* q, const double* p, Eigen::Index n, double& sim, Vector* grad_q) {
  CubedColumn cq, cp;
  if (!standardize(q, n, cq) || !standardize(p, n, cp)) return false;
  const Vector vhat = cp.u / cp.norm;
  sim = cq.u.dot(vhat) / cq.norm;
  if (grad_q) {
    const Vector ds_du = vhat / cq.norm - (sim / (cq.norm * cq.norm)) * cq.u;
    const Vector g_z = ds_du.array() * 3.0 * cq.z.array().square();
    const double nd = static_cast<double>(n);
    const Vector g_c = (g_z - cq.z * (cq.z.dot(g_z) / nd)) / cq.sigma;
    *grad_q = g_c.array() - g_c.mean();
  }
  return true;
}

void check_shapes(const Matrix& W, const Matrix& X, const Matrix& P) {
  if (W.cols() != X.cols()) throw Error("W_c columns != feature dimension");
  if (P.rows() != X.rows()) throw Error("P rows != feature rows");
  if (P.cols() != W.rows()) throw Error("P columns != concept count");
  if (X.rows() < 2) throw Error("need at least 2 samples");
}

// Loss and (optionally) gradient. strict: throw on constant columns;
// otherwise constant columns contribute 0 and no gradient.
double loss_impl(const Matrix& W, const Matrix& X, const Matrix& P, Matrix* grad, bool strict) {
  check_shapes(W, X, P);
  const Matrix Q = X * W.transpose();
  const Eigen::Index n = X.rows(), m = W.rows();
  std::vector<double> sims(static_cast<std::size_t>(m), 0.0);
  std::vector<char> ok(static_cast<std::size_t>(m), 0);
  Matrix GQ = Matrix::Zero(n, grad ? m : 0);
  parallel_for(static_cast<std::size_t>(m), [&](std::size_t i) {
    const auto col = static_cast<Eigen::Index>(i);
    Vector gq;
    ok[i] = column_similarity(Q.col(col).data(), P.col(col).data(), n, sims[i], grad ? &gq : nullptr);
    if (ok[i] && grad) GQ.col(col) = -gq;
  });
  double loss = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (!ok[i] && strict) {
      CubedColumn tmp;
      const bool q_const = !standardize(Q.col(i).data(), n, tmp);
      throw Error(std::string("undefined similarity: constant ") + (q_const ? "activation" : "P column") +
                  " for concept " + std::to_string(i));
    }
    loss -= sims[i];
  }
  if (grad) *grad = GQ.transpose() * X;
  return loss;
}

std::vector<float> to_floats(const Vector& v) {
  std::vector<float> out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v(i));
  return out;
}

}  // namespace

double cos_cubed(std::span<const double> q, std::span<const double> p) {
  if (q.size() != p.size()) throw Error("cos_cubed: length mismatch");
  if (q.size() < 2) throw Error("cos_cubed: need at least 2 samples");
  double sim = 0.0;
  if (!column_similarity(q.data(), p.data(), static_cast<Eigen::Index>(q.size()), sim, nullptr))
    throw Error("undefined similarity: constant vector");
  return std::clamp(sim, -1.0, 1.0);
}

double cbl_loss(const Matrix& W, const Matrix& features, const Matrix& P) {
  return loss_impl(W, features, P, nullptr, true);
}

Matrix cbl_loss_grad(const Matrix& W, const Matrix& features, const Matrix& P) {
  Matrix g;
  loss_impl(W, features, P, &g, true);
  return g;
}

Vector column_fidelity(const Matrix& Q, const Matrix& P) {
  if (Q.rows() != P.rows() || Q.cols() != P.cols()) throw Error("column_fidelity: shape mismatch");
  Vector out = Vector::Zero(Q.cols());
  parallel_for(static_cast<std::size_t>(Q.cols()), [&](std::size_t i) {
    const auto c = static_cast<Eigen::Index>(i);
    double s = 0.0;
    if (column_similarity(Q.col(c).data(), P.col(c).data(), Q.rows(), s, nullptr)) out(c) = s;
  });
  return out;
}

void CblTrainConfig::validate() const {
  if (!(fidelity_cutoff > 0.0 && fidelity_cutoff < 1.0)) throw Error("fidelity cutoff must lie in (0, 1)");
  if (patience < 1) throw Error("patience must be >= 1");
  if (batch_size < 2) throw Error("batch size must be >= 2");
  if (!(learning_rate > 0.0)) throw Error("learning rate must be positive");
  if (max_epochs < 1) throw Error("max epochs must be >= 1");
}

CblData CblData::from_bundle(const DatasetBundle& bundle, const ConceptSet& concepts) {
  if (concepts.size() != bundle.train_P.cols) throw Error("P columns != concept count");
  const auto kept = concepts.kept_indices();
  CblData d;
  d.train_features = to_matrix(bundle.train_features);
  d.val_features = to_matrix(bundle.val_features);
  d.train_P = to_matrix(select_columns(bundle.train_P, kept));
  d.val_P = to_matrix(select_columns(bundle.val_P, kept));
  d.concept_names = concepts.kept_texts();
  return d;
}

std::vector<std::size_t> fidelity_survivors(const Vector& fidelity, double cutoff) {
  std::vector<std::size_t> keep;
  for (Eigen::Index i = 0; i < fidelity.size(); ++i)
    if (!(fidelity(i) < cutoff)) keep.push_back(static_cast<std::size_t>(i));
  return keep;
}

CblTrainResult train_cbl(const CblData& data, const CblTrainConfig& config) {
  config.validate();
  const Eigen::Index M = data.train_P.cols();
  const Eigen::Index d0 = data.train_features.cols();
  const Eigen::Index N = data.train_features.rows();
  if (M < 1) throw Error("train_cbl: no concepts to train");
  if (static_cast<std::size_t>(M) != data.concept_names.size()) throw Error("concept names != P columns");
  if (data.val_P.cols() != M || data.val_features.cols() != d0) throw Error("train/val shape mismatch");
  if (N < 2 || data.val_features.rows() < 2) throw Error("train_cbl: need at least 2 samples per split");

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(d0)));
  Matrix W(M, d0);
  for (Eigen::Index r = 0; r < M; ++r)
    for (Eigen::Index c = 0; c < d0; ++c) W(r, c) = gauss(rng);

  Matrix m1 = Matrix::Zero(M, d0), m2 = Matrix::Zero(M, d0);
  std::size_t step = 0;

  TrainReport report;
  report.config = config;
  report.initial_concepts = static_cast<std::size_t>(M);

  auto val_similarity = [&](const Matrix& w) {
    return column_fidelity(data.val_features * w.transpose(), data.val_P).mean();
  };

  Matrix best_W = W;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<Eigen::Index>(config.batch_size);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (Eigen::Index start = 0; start < N; start += batch) {
      const Eigen::Index len = std::min(batch, N - start);
      if (len < 2) continue;
      Matrix Xb(len, d0), Pb(len, M);
      for (Eigen::Index r = 0; r < len; ++r) {
        Xb.row(r) = data.train_features.row(order[start + r]);
        Pb.row(r) = data.train_P.row(order[start + r]);
      }
      Matrix g;
      const double loss = loss_impl(W, Xb, Pb, &g, false);
      if (!std::isfinite(loss) || !g.allFinite())
        throw Error("divergence: non-finite loss at epoch " + std::to_string(epoch));
      ++step;
      m1 = config.beta1 * m1 + (1.0 - config.beta1) * g;
      m2 = config.beta2 * m2 + (1.0 - config.beta2) * g.cwiseProduct(g);
      const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
      W.array() -= config.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + config.epsilon);
      epoch_loss += loss;
      ++batches;
    }
    const double val = val_similarity(W);
    if (!std::isfinite(val)) throw Error("divergence: non-finite validation similarity at epoch " + std::to_string(epoch));
    report.epochs.push_back({epoch, batches ? epoch_loss / static_cast<double>(batches) : 0.0, val});
    if (val > best) {
      best = val;
      best_W = W;
      report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      report.early_stopped = true;
      break;
    }
  }
  report.best_val_similarity = best;
  report.restored_val_similarity = val_similarity(best_W);

  // Persisted weights are float32; fidelity and stats are computed on the
  // rounded weights so a reloaded model behaves identically.
  const Matrix rounded = round_to_float(best_W);
  const Vector fidelity = column_fidelity(data.val_features * rounded.transpose(), data.val_P);
  const auto keep = fidelity_survivors(fidelity, config.fidelity_cutoff);
  for (Eigen::Index i = 0; i < M; ++i)
    if (std::find(keep.begin(), keep.end(), static_cast<std::size_t>(i)) == keep.end())
      report.dropped.push_back({data.concept_names[static_cast<std::size_t>(i)], fidelity(i)});
  if (keep.empty()) throw Error("empty model: every concept fell below the fidelity cutoff");

  CblModel model;
  model.W.resize(static_cast<Eigen::Index>(keep.size()), d0);
  model.val_fidelity.resize(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t r = 0; r < keep.size(); ++r) {
    model.W.row(static_cast<Eigen::Index>(r)) = rounded.row(static_cast<Eigen::Index>(keep[r]));
    model.val_fidelity(static_cast<Eigen::Index>(r)) = fidelity(static_cast<Eigen::Index>(keep[r]));
    model.concept_names.push_back(data.concept_names[keep[r]]);
  }
  const Matrix Q = data.train_features * model.W.transpose();
  model.mean = Q.colwise().mean().transpose();
  model.stddev.resize(Q.cols());
  for (Eigen::Index c = 0; c < Q.cols(); ++c) {
    const double var = (Q.col(c).array() - model.mean(c)).square().mean();
    model.stddev(c) = std::max(std::sqrt(var), kStdFloor);
  }
  model.mean = round_to_float(model.mean);
  model.stddev = round_to_float(model.stddev);
  model.val_fidelity = round_to_float(model.val_fidelity);
  report.final_concepts = keep.size();
  return {std::move(model), std::move(report)};
}

Vector project(const CblModel& model, const Vector& feature_row) {
  if (static_cast<std::size_t>(feature_row.size()) != model.input_dim())
    throw Error("dimension mismatch: feature row has " + std::to_string(feature_row.size()) + " entries, model expects " +
                std::to_string(model.input_dim()));
  return ((model.W * feature_row - model.mean).array() / model.stddev.array()).matrix();
}

Vector project(const CblModel& model, std::span<const float> feature_row) {
  Vector v(static_cast<Eigen::Index>(feature_row.size()));
  for (std::size_t i = 0; i < feature_row.size(); ++i) v(static_cast<Eigen::Index>(i)) = feature_row[i];
  return project(model, v);
}

Matrix project_all(const CblModel& model, const Matrix& features) {
  if (static_cast<std::size_t>(features.cols()) != model.input_dim()) throw Error("dimension mismatch in project_all");
  Matrix Q = features * model.W.transpose();
  Q.rowwise() -= model.mean.transpose();
  Q.array().rowwise() /= model.stddev.transpose().array();
  return Q;
}

void save_cbl(const CblModel& model, double fidelity_cutoff, const fs::path& dir) {
  fs::create_directories(dir);
  write_tensor(to_tensor(model.W), dir / "W_c.npy");
  const auto M = model.concept_count();
  Tensor stats(2, M);
  for (std::size_t j = 0; j < M; ++j) {
    stats(0, j) = static_cast<float>(model.mean(static_cast<Eigen::Index>(j)));
    stats(1, j) = static_cast<float>(model.stddev(static_cast<Eigen::Index>(j)));
  }
  write_tensor(stats, dir / "stats.npy");
  write_lines(model.concept_names, dir / "concepts.txt");
  nlohmann::json f;
  f["cutoff"] = fidelity_cutoff;
  f["concepts"] = nlohmann::json::array();
  const auto fid = to_floats(model.val_fidelity);
  for (std::size_t j = 0; j < M; ++j) f["concepts"].push_back({{"name", model.concept_names[j]}, {"fidelity", fid[j]}});
  std::ofstream out(dir / "fidelity.json", std::ios::trunc);
  out << f.dump(2) << '\n';
  if (!out) throw Error("I/O failure writing fidelity.json");
}

CblModel load_cbl(const fs::path& dir) {
  CblModel m;
  m.W = to_matrix(read_tensor(dir / "W_c.npy"));
  const Tensor stats = read_tensor(dir / "stats.npy");
  m.concept_names = read_lines(dir / "concepts.txt");
  const auto M = m.concept_names.size();
  if (static_cast<std::size_t>(m.W.rows()) != M) throw Error("corrupt CBL artifacts: W_c rows != concept count");
  if (stats.rows != 2 || stats.cols != M) throw Error("corrupt CBL artifacts: stats.npy must be 2 x M");
  m.mean.resize(static_cast<Eigen::Index>(M));
  m.stddev.resize(static_cast<Eigen::Index>(M));
  m.val_fidelity = Vector::Zero(static_cast<Eigen::Index>(M));
  for (std::size_t j = 0; j < M; ++j) {
    m.mean(static_cast<Eigen::Index>(j)) = stats(0, j);
    m.stddev(static_cast<Eigen::Index>(j)) = stats(1, j);
    if (!(stats(1, j) > 0.0f)) throw Error("corrupt CBL artifacts: non-positive std");
  }
  std::ifstream in(dir / "fidelity.json");
  if (in) {
    try {
      const auto f = nlohmann::json::parse(in);
      const auto& arr = f.at("concepts");
      if (arr.size() == M)
        for (std::size_t j = 0; j < M; ++j) m.val_fidelity(static_cast<Eigen::Index>(j)) = arr[j].at("fidelity").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("corrupt CBL artifacts: fidelity.json: ") + e.what());
    }
  }
  return m;
}

nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json j;
  j["config"] = {{"learning_rate", r.config.learning_rate}, {"beta1", r.config.beta1},
                 {"beta2", r.config.beta2},                 {"epsilon", r.config.epsilon},
                 {"batch_size", r.config.batch_size},       {"max_epochs", r.config.max_epochs},
                 {"patience", r.config.patience},           {"fidelity_cutoff", r.config.fidelity_cutoff},
                 {"seed", r.config.seed}};
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : r.epochs)
    j["epochs"].push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_similarity", e.val_similarity}});
  j["best_epoch"] = r.best_epoch;
  j["best_val_similarity"] = r.best_val_similarity;
  j["early_stopped"] = r.early_stopped;
  j["initial_concepts"] = r.initial_concepts;
  j["final_concepts"] = r.final_concepts;
  j["delta"] = r.initial_concepts - r.final_concepts;
  j["dropped"] = nlohmann::json::array();
  for (const auto& d : r.dropped) j["dropped"].push_back({{"name", d.name}, {"fidelity", d.fidelity}});
  return j;
}

}  // namespace lfcbm
