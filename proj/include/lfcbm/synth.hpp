#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lfcbm/head.hpp"
#include "lfcbm/linalg.hpp"
#include "lfcbm/manifest.hpp"

namespace lfcbm {

struct PlantedConfig {
  std::size_t n_train = 2000;
  std::size_t n_val = 1000;
  std::size_t d0 = 64;
  std::size_t planted = 40;  // M*
  std::size_t classes = 10;  // d_z
  std::size_t dead_distractors = 5;      // never active
  std::size_t spurious_distractors = 5;  // P spikes unrelated to the features
  double sigma = 0.1;
  double label_noise = 0.01;  // std of the noise added to G c before argmax
  double other_scale = 0.3;   // magnitude multiplier for concepts not owned by the sample's class
  std::uint64_t seed = 7;
  double activation_cutoff = 0.25;
  std::size_t text_dim = 32;
  void validate() const;
};

// "default" or "small".
PlantedConfig planted_preset(const std::string& name);

struct SyntheticBundle {
  DatasetBundle bundle;
  PlantedConfig config;
  Matrix A;  // d0 x M*, planted concept dictionary
  Matrix G;  // d_z x M*, true class map
  Matrix train_codes;  // N_train x M*
  Matrix val_codes;
  // Original concept indices in the bundle's concept list.
  std::vector<std::size_t> planted_indices;
  std::vector<std::size_t> distractor_indices;
};

// Sample codes activate 3-6 planted concepts, two or three of them owned by
// the sample's class. features = A c + sigma noise, P = 0.15 + 0.1 (c + sigma
// noise), labels = argmax(G c + label_noise noise).
SyntheticBundle generate_planted(const PlantedConfig& config);

// Cyclic coordinate descent for the elastic-net head objective. Each
// coordinate is minimized by repeated majorize-minimize soft-threshold steps
// using the curvature bound sum x^2 / 4. Stops when a full sweep lowers the
// objective by less than tol (relative).
SparseHead coordinate_descent_oracle(const Matrix& activations, std::span<const std::int64_t> labels,
                                     std::size_t classes, double lambda, double alpha, double tol = 1e-13,
                                     std::size_t max_sweeps = 200000);

// Central differences in every entry of W.
Matrix finite_diff_grad(const std::function<double(const Matrix&)>& loss, const Matrix& W, double eps);

// Filter-walkthrough fixture: concept list plus a relations file naming which
// concepts sit near which class or earlier concept, which have low activation,
// and which cannot be projected. Embeddings and P are built so exactly the
// named relations exceed the filter thresholds.
struct FilterFixtureSpec {
  std::vector<std::string> concepts;
  std::vector<std::string> classes;
  double activation_cutoff = 0.25;
  std::vector<std::pair<std::string, std::string>> class_near;    // concept -> class
  std::vector<std::pair<std::string, std::string>> concept_near;  // concept -> earlier concept
  std::vector<std::string> low_activation;
  std::vector<std::string> unprojectable;
  static FilterFixtureSpec load(const std::filesystem::path& concepts_txt, const std::filesystem::path& relations_json);
};

DatasetBundle make_filter_fixture(const FilterFixtureSpec& spec, std::uint64_t seed = 11, std::size_t dim = 48,
                                  std::size_t samples = 200);

}  // namespace lfcbm
