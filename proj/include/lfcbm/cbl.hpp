#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lfcbm/concept_set.hpp"
#include "lfcbm/linalg.hpp"
#include "lfcbm/manifest.hpp"

namespace lfcbm {

// Cosine similarity of the two vectors after each is standardized to mean 0,
// std 1 and cubed element-wise. Throws if either vector is constant.
double cos_cubed(std::span<const double> q, std::span<const double> p);

// Sum over concepts of -cos_cubed(q_i, P[:, i]) where Q = features * W^T.
// W is M x d0, features N x d0, P N x M.
double cbl_loss(const Matrix& W, const Matrix& features, const Matrix& P);

// Analytic gradient of cbl_loss with respect to W (M x d0).
Matrix cbl_loss_grad(const Matrix& W, const Matrix& features, const Matrix& P);

// Per-concept cos_cubed between columns of Q and P. Constant columns score 0
// instead of throwing; used for validation fidelity.
Vector column_fidelity(const Matrix& Q, const Matrix& P);

struct CblTrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 512;
  std::size_t max_epochs = 1000;
  std::size_t patience = 3;
  double fidelity_cutoff = 0.45;
  std::uint64_t seed = 0;

  void validate() const;
};

struct CblModel {
  Matrix W;  // M x d0
  std::vector<std::string> concept_names;
  Vector mean;
  Vector stddev;
  Vector val_fidelity;

  std::size_t concept_count() const { return concept_names.size(); }
  std::size_t input_dim() const { return static_cast<std::size_t>(W.cols()); }
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_similarity = 0.0;
};

struct DroppedConcept {
  std::string name;
  double fidelity = 0.0;
};

struct TrainReport {
  CblTrainConfig config;
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;
  double best_val_similarity = 0.0;
  // Mean validation similarity of the restored weights, before filter 5.
  double restored_val_similarity = 0.0;
  bool early_stopped = false;
  std::size_t initial_concepts = 0;
  std::size_t final_concepts = 0;
  std::vector<DroppedConcept> dropped;
};

// Training inputs restricted to the concepts that survived filters 1-4.
struct CblData {
  Matrix train_features;
  Matrix val_features;
  Matrix train_P;
  Matrix val_P;
  std::vector<std::string> concept_names;

  static CblData from_bundle(const DatasetBundle& bundle, const ConceptSet& concepts);
};

struct CblTrainResult {
  CblModel model;
  TrainReport report;
};

CblTrainResult train_cbl(const CblData& data, const CblTrainConfig& config);

// Indices of concepts whose fidelity is not below cutoff (filter 5 keeps >=).
std::vector<std::size_t> fidelity_survivors(const Vector& fidelity, double cutoff);

// (W f - mean) / std for one feature vector.
Vector project(const CblModel& model, const Vector& feature_row);
Vector project(const CblModel& model, std::span<const float> feature_row);
// Row-wise projection of an N x d0 feature matrix.
Matrix project_all(const CblModel& model, const Matrix& features);

void save_cbl(const CblModel& model, double fidelity_cutoff, const std::filesystem::path& dir);
CblModel load_cbl(const std::filesystem::path& dir);

nlohmann::json to_json(const TrainReport& r);

}  // namespace lfcbm
