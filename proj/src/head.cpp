#include "lfcbm/head.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "lfcbm/error.hpp"
#include "lfcbm/manifest.hpp"
#include "lfcbm/npy.hpp"

namespace lfcbm {

namespace fs = std::filesystem;

namespace {

void check_inputs(const Matrix& A, std::span<const std::int64_t> y, std::size_t classes) {
  if (static_cast<std::size_t>(A.rows()) != y.size()) throw Error("shape mismatch: activations rows != labels");
  for (auto v : y)
    if (v < 0 || static_cast<std::size_t>(v) >= classes) throw Error("label out of range");
}

// Cross-entropy sum and, optionally, its gradient. Logits are laid out
// K x N so each sample is a contiguous column.
double ce_and_grad(const Matrix& W, const Vector& b, const Matrix& A, std::span<const std::int64_t> y, Matrix* gW,
                   Vector* gb) {
  Matrix Z = W * A.transpose();
  Z.colwise() += b;
  double total = 0.0;
  for (Eigen::Index i = 0; i < Z.cols(); ++i) {
    auto z = Z.col(i);
    const double mx = z.maxCoeff();
    const auto yi = static_cast<Eigen::Index>(y[static_cast<std::size_t>(i)]);
    const double zy = z(yi) - mx;
    z.array() = (z.array() - mx).exp();
    const double s = z.sum();
    total += std::log(s) - zy;
    if (gW) {
      z /= s;
      z(yi) -= 1.0;
    }
  }
  if (gW) {
    *gW = Z * A;
    *gb = Z.rowwise().sum();
  }
  return total;
}

double penalty(const Matrix& W, double lambda, double alpha) {
  if (lambda == 0.0) return 0.0;
  return lambda * ((1.0 - alpha) * 0.5 * W.squaredNorm() + alpha * W.cwiseAbs().sum());
}

double kkt_violation(const Matrix& W, const Matrix& gW, const Vector& gb, double lambda, double alpha, Certificate* cert) {
  Certificate c;
  const double l1 = lambda * alpha, l2 = lambda * (1.0 - alpha);
  for (Eigen::Index i = 0; i < W.rows(); ++i)
    for (Eigen::Index j = 0; j < W.cols(); ++j) {
      const double w = W(i, j);
      const double g = gW(i, j) + l2 * w;
      if (w != 0.0) {
        c.nonzero_violation = std::max(c.nonzero_violation, std::abs(g + (w > 0 ? l1 : -l1)));
      } else {
        c.zero_excess = std::max(c.zero_excess, std::abs(g) - l1);
      }
    }
  c.zero_excess = std::max(c.zero_excess, 0.0);
  c.bias_gradient = gb.size() ? gb.cwiseAbs().maxCoeff() : 0.0;
  if (cert) *cert = c;
  return c.max_violation();
}

// Power iteration for the largest squared singular value of [A 1].
double augmented_spectral_norm_sq(const Matrix& A) {
  Vector v = Vector::Ones(A.cols() + 1);
  double est = 0.0;
  for (int k = 0; k < 30; ++k) {
    const Vector u = A * v.head(A.cols()) + Vector::Constant(A.rows(), v(A.cols()));
    Vector w(A.cols() + 1);
    w.head(A.cols()) = A.transpose() * u;
    w(A.cols()) = u.sum();
    const double n = w.norm();
    if (!(n > 0.0)) return 0.0;
    est = n / v.norm();
    v = w / n;
  }
  return est * 1.01;
}

Vector optimal_bias_at_zero(std::span<const std::int64_t> y, std::size_t classes) {
  Vector counts = Vector::Zero(static_cast<Eigen::Index>(classes));
  for (auto v : y) counts(v) += 1.0;
  Vector b(counts.size());
  for (Eigen::Index k = 0; k < counts.size(); ++k)
    b(k) = std::log(std::max(counts(k), 1e-12) / static_cast<double>(y.size()));
  return b;
}

}  // namespace

std::vector<std::size_t> SparseHead::nnz_per_class() const {
  std::vector<std::size_t> out(class_count(), 0);
  for (Eigen::Index i = 0; i < W.rows(); ++i)
    for (Eigen::Index j = 0; j < W.cols(); ++j)
      if (W(i, j) != 0.0) ++out[static_cast<std::size_t>(i)];
  return out;
}

double SparseHead::mean_nnz() const {
  if (class_count() == 0) return 0.0;
  const auto n = nnz_per_class();
  double s = 0.0;
  for (auto v : n) s += static_cast<double>(v);
  return s / static_cast<double>(n.size());
}

double Certificate::max_violation() const { return std::max({nonzero_violation, zero_excess, bias_gradient}); }

double cross_entropy_sum(const Matrix& W, const Vector& b, const Matrix& A, std::span<const std::int64_t> y) {
  if (A.cols() != W.cols() || b.size() != W.rows()) throw Error("shape mismatch in cross_entropy_sum");
  check_inputs(A, y, static_cast<std::size_t>(W.rows()));
  return ce_and_grad(W, b, A, y, nullptr, nullptr);
}

double elastic_net_objective(const SparseHead& head, const Matrix& A, std::span<const std::int64_t> y) {
  return cross_entropy_sum(head.W, head.b, A, y) + penalty(head.W, head.lambda, head.alpha);
}

double prox_l1(double v, double t) {
  if (t < 0.0) throw Error("prox_l1: threshold must be non-negative");
  const double m = std::abs(v) - t;
  if (m <= 0.0) return 0.0;
  return v > 0 ? m : -m;
}

SparseHead fit_head(const Matrix& A, std::span<const std::int64_t> y, std::size_t classes, double lambda,
                    const FitOptions& opt, const SparseHead* warm, FitInfo* info) {
  if (!(lambda >= 0.0)) throw Error("lambda must be >= 0");
  if (!(opt.alpha >= 0.0 && opt.alpha <= 1.0)) throw Error("alpha must lie in [0, 1]");
  if (classes < 1) throw Error("need at least one class");
  check_inputs(A, y, classes);
  const auto K = static_cast<Eigen::Index>(classes);
  const Eigen::Index M = A.cols();

  SparseHead x;
  x.lambda = lambda;
  x.alpha = opt.alpha;
  if (warm) {
    if (warm->W.rows() != K || warm->W.cols() != M) throw Error("warm start shape mismatch");
    x.W = warm->W;
    x.b = warm->b;
  } else {
    x.W = Matrix::Zero(K, M);
    x.b = optimal_bias_at_zero(y, classes);
  }
  const double l1 = lambda * opt.alpha, l2 = lambda * (1.0 - opt.alpha);

  Matrix yW = x.W, gW, Wn;
  Vector yb = x.b, gb, bn;
  double Fx = ce_and_grad(x.W, x.b, A, y, nullptr, nullptr) + penalty(x.W, lambda, opt.alpha);
  if (!std::isfinite(Fx)) throw Error("divergence: non-finite objective at start");
  // The softmax cross-entropy Hessian is bounded by 1/2 ||[A 1]||_2^2, so a
  // step of 1/L_max always satisfies the descent condition.
  const double L_max = std::max(1e-8, 0.5 * augmented_spectral_norm_sq(A));
  double L = 0.25 * L_max;
  double t = 1.0;
  FitInfo fi;

  for (std::size_t it = 1; it <= opt.max_iterations; ++it) {
    fi.iterations = it;
    const double fy = ce_and_grad(yW, yb, A, y, &gW, &gb);
    double fn = 0.0;
    for (;;) {
      const double thr = l1 / L, shrink = 1.0 / (1.0 + l2 / L);
      Wn = (yW - gW / L).unaryExpr([&](double v) { return prox_l1(v, thr) * shrink; });
      bn = yb - gb / L;
      fn = ce_and_grad(Wn, bn, A, y, nullptr, nullptr);
      if (L >= L_max) break;
      const double dW2 = (Wn - yW).squaredNorm() + (bn - yb).squaredNorm();
      const double lin = (gW.cwiseProduct(Wn - yW)).sum() + gb.dot(bn - yb);
      if (fn <= fy + lin + 0.5 * L * dW2) break;
      L = std::min(2.0 * L, L_max);
    }
    const double Fn = fn + penalty(Wn, lambda, opt.alpha);
    if (!std::isfinite(Fn)) throw Error("divergence: non-finite objective at iteration " + std::to_string(it));

    // Gradient-based adaptive restart: drop momentum when the step points
    // against the previous direction. Unlike a function-value test it keeps
    // working once objective changes fall below rounding resolution.
    const double align = ((yW - Wn).cwiseProduct(Wn - x.W)).sum() + (yb - bn).dot(bn - x.b);
    const double tn = align > 0.0 ? 1.0 : 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    const double beta = align > 0.0 ? 0.0 : (t - 1.0) / tn;
    yW = Wn + beta * (Wn - x.W);
    yb = bn + beta * (bn - x.b);
    const double rel = (Fx - Fn) / std::max(1.0, std::abs(Fn));
    x.W = Wn;
    x.b = bn;
    Fx = Fn;
    t = tn;
    L = std::max(L * 0.98, 1e-3 * L_max);

    if (rel < opt.rel_tol && it % 5 == 0) {
      Matrix gx;
      Vector gbx;
      ce_and_grad(x.W, x.b, A, y, &gx, &gbx);
      fi.kkt_violation = kkt_violation(x.W, gx, gbx, lambda, opt.alpha, nullptr);
      if (fi.kkt_violation <= opt.kkt_tol) {
        fi.converged = true;
        break;
      }
    }
  }
  fi.objective = Fx;
  if (!fi.converged) {
    Matrix gx;
    Vector gbx;
    ce_and_grad(x.W, x.b, A, y, &gx, &gbx);
    fi.kkt_violation = kkt_violation(x.W, gx, gbx, lambda, opt.alpha, nullptr);
  }
  if (info) *info = fi;
  return x;
}

Certificate optimality_certificate(const SparseHead& head, const Matrix& A, std::span<const std::int64_t> y) {
  check_inputs(A, y, head.class_count());
  Matrix gW;
  Vector gb;
  ce_and_grad(head.W, head.b, A, y, &gW, &gb);
  Certificate c;
  kkt_violation(head.W, gW, gb, head.lambda, head.alpha, &c);
  return c;
}

double lambda_max(const Matrix& A, std::span<const std::int64_t> y, std::size_t classes, double alpha) {
  if (!(alpha > 0.0)) throw Error("lambda_max requires alpha > 0");
  check_inputs(A, y, classes);
  const Matrix W = Matrix::Zero(static_cast<Eigen::Index>(classes), A.cols());
  Matrix gW;
  Vector gb;
  ce_and_grad(W, optimal_bias_at_zero(y, classes), A, y, &gW, &gb);
  return gW.cwiseAbs().maxCoeff() / alpha;
}

PathResult fit_path(const Matrix& At, std::span<const std::int64_t> yt, const Matrix& Av,
                    std::span<const std::int64_t> yv, const std::vector<std::string>& class_names,
                    const PathOptions& opt) {
  if (!(opt.band_lo <= opt.band_hi)) throw Error("nnz band must satisfy lo <= hi");
  if (opt.steps < 2) throw Error("path needs at least 2 steps");
  const std::size_t K = class_names.size();
  const double lmax = lambda_max(At, yt, K, opt.alpha);
  const double ratio = std::pow(opt.min_ratio, 1.0 / static_cast<double>(opt.steps - 1));

  FitOptions pf = opt.path_fit;
  pf.alpha = opt.alpha;
  PathResult out;
  out.report.band_lo = opt.band_lo;
  out.report.band_hi = opt.band_hi;
  std::vector<SparseHead> heads;
  SparseHead current;
  for (std::size_t k = 0; k < opt.steps; ++k) {
    const double lambda = lmax * std::pow(ratio, static_cast<double>(k));
    current = fit_head(At, yt, K, lambda, pf, k ? &current : nullptr);
    current.class_names = class_names;
    PathPoint p;
    p.lambda = lambda;
    p.mean_nnz = current.mean_nnz();
    p.train_loss = cross_entropy_sum(current.W, current.b, At, yt) / static_cast<double>(std::max<std::size_t>(1, yt.size()));
    p.train_accuracy = accuracy(current, At, yt);
    p.val_accuracy = yv.empty() ? 0.0 : accuracy(current, Av, yv);
    out.report.points.push_back(p);
    heads.push_back(current);
  }

  auto& rep = out.report;
  bool found = false;
  for (std::size_t k = 0; k < rep.points.size(); ++k) {
    const double n = rep.points[k].mean_nnz;
    if (n >= opt.band_lo && n <= opt.band_hi) {
      rep.chosen = k;
      found = true;
      break;
    }
  }
  if (!found) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < rep.points.size(); ++k) {
      const double n = rep.points[k].mean_nnz;
      const double d = n < opt.band_lo ? opt.band_lo - n : n - opt.band_hi;
      if (d < best) {
        best = d;
        rep.chosen = k;
      }
    }
  }
  rep.in_band = found;

  FitOptions ff = opt.final_fit;
  ff.alpha = opt.alpha;
  const SparseHead& seed = heads[rep.chosen];
  out.head = fit_head(At, yt, K, seed.lambda, ff, &seed);
  out.head.class_names = class_names;
  rep.degenerate = out.head.W.isZero(0.0);
  rep.chosen_nnz_per_class = out.head.nnz_per_class();
  // Refinement can move the support slightly; report what was returned.
  auto& cp = rep.points[rep.chosen];
  cp.mean_nnz = out.head.mean_nnz();
  cp.train_loss = cross_entropy_sum(out.head.W, out.head.b, At, yt) / static_cast<double>(std::max<std::size_t>(1, yt.size()));
  cp.train_accuracy = accuracy(out.head, At, yt);
  cp.val_accuracy = yv.empty() ? 0.0 : accuracy(out.head, Av, yv);
  return out;
}

std::size_t argmax_lowest(const Vector& v) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(i);
  return best;
}

Prediction predict(const SparseHead& head, const Vector& a) {
  if (static_cast<std::size_t>(a.size()) != head.concept_count())
    throw Error("dimension mismatch: activation length " + std::to_string(a.size()) + ", head expects " +
                std::to_string(head.concept_count()));
  Prediction p;
  p.logits = head.W * a + head.b;
  p.label = argmax_lowest(p.logits);
  return p;
}

std::vector<std::size_t> predict_all(const SparseHead& head, const Matrix& A) {
  if (static_cast<std::size_t>(A.cols()) != head.concept_count()) throw Error("dimension mismatch in predict_all");
  Matrix Z = A * head.W.transpose();
  Z.rowwise() += head.b.transpose();
  std::vector<std::size_t> out(static_cast<std::size_t>(Z.rows()));
  for (Eigen::Index i = 0; i < Z.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax_lowest(Z.row(i).transpose());
  return out;
}

double accuracy(const SparseHead& head, const Matrix& A, std::span<const std::int64_t> y) {
  if (y.empty()) return 0.0;
  const auto pred = predict_all(head, A);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == static_cast<std::size_t>(y[i]);
  return static_cast<double>(correct) / static_cast<double>(y.size());
}

SparseHead round_to_float(const SparseHead& head) {
  SparseHead h = head;
  h.W = lfcbm::round_to_float(head.W);
  h.b = lfcbm::round_to_float(head.b);
  return h;
}

void save_head(const SparseHead& head, const fs::path& dir) {
  fs::create_directories(dir);
  write_tensor(to_tensor(head.W), dir / "W_F.npy");
  write_tensor(to_tensor(Matrix(head.b.transpose())), dir / "b_F.npy");
  write_lines(head.class_names, dir / "classes.txt");
  nlohmann::json j;
  j["lambda"] = head.lambda;
  j["alpha"] = head.alpha;
  j["nnz_per_class"] = head.nnz_per_class();
  j["mean_nnz"] = head.mean_nnz();
  std::ofstream out(dir / "head.json", std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw Error("I/O failure writing head.json");
}

SparseHead load_head(const fs::path& dir) {
  SparseHead h;
  h.W = to_matrix(read_tensor(dir / "W_F.npy"));
  const Matrix b = to_matrix(read_tensor(dir / "b_F.npy"));
  h.class_names = read_lines(dir / "classes.txt");
  if (b.rows() != 1 || b.cols() != h.W.rows()) throw Error("corrupt head artifacts: b_F must be 1 x d_z");
  if (h.class_names.size() != static_cast<std::size_t>(h.W.rows())) throw Error("corrupt head artifacts: class count");
  h.b = b.row(0).transpose();
  std::ifstream in(dir / "head.json");
  if (!in) throw Error("corrupt head artifacts: missing head.json");
  try {
    const auto j = nlohmann::json::parse(in);
    h.lambda = j.at("lambda").get<double>();
    h.alpha = j.at("alpha").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("corrupt head artifacts: ") + e.what());
  }
  return h;
}

nlohmann::json to_json(const PathReport& r) {
  nlohmann::json j;
  j["band"] = {r.band_lo, std::isinf(r.band_hi) ? nlohmann::json("inf") : nlohmann::json(r.band_hi)};
  j["chosen_index"] = r.chosen;
  j["chosen_lambda"] = r.points.empty() ? 0.0 : r.points[r.chosen].lambda;
  j["in_band"] = r.in_band;
  j["degenerate"] = r.degenerate;
  j["chosen_nnz_per_class"] = r.chosen_nnz_per_class;
  j["points"] = nlohmann::json::array();
  for (const auto& p : r.points)
    j["points"].push_back({{"lambda", p.lambda},
                           {"mean_nnz", p.mean_nnz},
                           {"train_loss", p.train_loss},
                           {"train_accuracy", p.train_accuracy},
                           {"val_accuracy", p.val_accuracy}});
  return j;
}

}  // namespace lfcbm
