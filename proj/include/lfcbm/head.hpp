#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lfcbm/linalg.hpp"

namespace lfcbm {

using Labels = std::vector<std::int64_t>;

// Final linear layer over normalized concept activations.
struct SparseHead {
  Matrix W;  // d_z x M
  Vector b;  // d_z
  std::vector<std::string> class_names;
  double lambda = 0.0;
  double alpha = 0.99;

  std::size_t class_count() const { return static_cast<std::size_t>(W.rows()); }
  std::size_t concept_count() const { return static_cast<std::size_t>(W.cols()); }
  std::vector<std::size_t> nnz_per_class() const;
  double mean_nnz() const;
};

// Sum over samples of softmax cross-entropy of W a_i + b.
double cross_entropy_sum(const Matrix& W, const Vector& b, const Matrix& activations, std::span<const std::int64_t> labels);

// sum CE + lambda * ((1 - alpha)/2 * ||W||_F^2 + alpha * ||W||_1). Bias is not penalized.
double elastic_net_objective(const SparseHead& head, const Matrix& activations, std::span<const std::int64_t> labels);

// sign(v) * max(|v| - t, 0)
double prox_l1(double v, double t);

struct FitOptions {
  double alpha = 0.99;
  std::size_t max_iterations = 50000;
  double rel_tol = 1e-7;  // relative objective decrease
  double kkt_tol = 1e-6;  // max subgradient-optimality violation
};

struct FitInfo {
  std::size_t iterations = 0;
  bool converged = false;
  double objective = 0.0;
  double kkt_violation = 0.0;
};

// Accelerated proximal gradient with backtracking and adaptive restart.
// A warm start, if given, must have matching shape.
SparseHead fit_head(const Matrix& activations, std::span<const std::int64_t> labels, std::size_t classes, double lambda,
                    const FitOptions& options = {}, const SparseHead* warm = nullptr, FitInfo* info = nullptr);

// Subgradient optimality of a head for its own lambda/alpha.
struct Certificate {
  double nonzero_violation = 0.0;  // max |grad CE + lambda(1-a)W + lambda a sign(W)| over nonzeros
  double zero_excess = 0.0;        // max (|grad CE| - lambda a) over zeros, floored at 0
  double bias_gradient = 0.0;      // max |d CE / d b|
  double max_violation() const;
  bool passes(double tol) const { return max_violation() < tol; }
};

Certificate optimality_certificate(const SparseHead& head, const Matrix& activations, std::span<const std::int64_t> labels);

// Smallest lambda whose solution has W = 0 (bias at its optimum).
double lambda_max(const Matrix& activations, std::span<const std::int64_t> labels, std::size_t classes, double alpha);

struct PathPoint {
  double lambda = 0.0;
  double mean_nnz = 0.0;
  double train_loss = 0.0;  // mean cross-entropy
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct PathReport {
  std::vector<PathPoint> points;
  std::size_t chosen = 0;
  double band_lo = 25.0;
  double band_hi = 35.0;
  bool in_band = false;
  bool degenerate = false;  // chosen head has W = 0
  std::vector<std::size_t> chosen_nnz_per_class;
};

struct PathOptions {
  double alpha = 0.99;
  double band_lo = 25.0;
  double band_hi = 35.0;
  std::size_t steps = 50;
  double min_ratio = 1e-4;
  FitOptions path_fit{0.99, 20000, 1e-7, 1e-3};
  FitOptions final_fit{0.99, 100000, 1e-7, 1e-5};
};

struct PathResult {
  SparseHead head;
  PathReport report;
};

PathResult fit_path(const Matrix& train_activations, std::span<const std::int64_t> train_labels,
                    const Matrix& val_activations, std::span<const std::int64_t> val_labels,
                    const std::vector<std::string>& class_names, const PathOptions& options = {});

struct Prediction {
  Vector logits;
  std::size_t label = 0;
};

// Ties broken by lowest class index.
Prediction predict(const SparseHead& head, const Vector& activations);
std::size_t argmax_lowest(const Vector& v);
std::vector<std::size_t> predict_all(const SparseHead& head, const Matrix& activations);
double accuracy(const SparseHead& head, const Matrix& activations, std::span<const std::int64_t> labels);

SparseHead round_to_float(const SparseHead& head);

void save_head(const SparseHead& head, const std::filesystem::path& dir);
SparseHead load_head(const std::filesystem::path& dir);

nlohmann::json to_json(const PathReport& r);

}  // namespace lfcbm
