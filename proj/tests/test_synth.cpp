#include <doctest.h>

#include <cmath>

#include "lfcbm/manifest.hpp"
#include "lfcbm/npy.hpp"
#include "lfcbm/synth.hpp"
#include "support.hpp"

using namespace lfcbm;
using lfcbm::testing::TempDir;
namespace fs = std::filesystem;

namespace {

double correlation(const Vector& a, const Vector& b) {
  const Vector x = a.array() - a.mean(), y = b.array() - b.mean();
  return x.dot(y) / std::sqrt(x.squaredNorm() * y.squaredNorm());
}

}  // namespace

TEST_CASE("same seed gives byte-identical files") {
  TempDir one("synth"), two("synth"), three("synth");
  const PlantedConfig c = planted_preset("small");
  write_bundle(generate_planted(c).bundle, one.path());
  write_bundle(generate_planted(c).bundle, two.path());
  PlantedConfig other = c;
  other.seed = c.seed + 1;
  write_bundle(generate_planted(other).bundle, three.path());
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(one.path())) {
    const auto name = e.path().filename().string();
    CHECK(sha256_file(e.path()) == sha256_file(two / name));
    ++files;
  }
  CHECK(files == 13);
  CHECK(sha256_file(one / "train_features.npy") != sha256_file(three / "train_features.npy"));
}

TEST_CASE("noise-free construction is exactly linear") {
  PlantedConfig c = planted_preset("small");
  c.sigma = 0.0;
  c.label_noise = 0.0;
  const SyntheticBundle sb = generate_planted(c);
  const Matrix F = to_matrix(sb.bundle.train_features);
  CHECK((F - sb.train_codes * sb.A.transpose()).cwiseAbs().maxCoeff() < 1e-5);
  // The true class map is a perfect linear probe on the concept codes.
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < sb.train_codes.rows(); ++i) {
    const Vector s = sb.G * sb.train_codes.row(i).transpose();
    correct += argmax_lowest(s) == static_cast<std::size_t>(sb.bundle.train_labels[static_cast<std::size_t>(i)]);
  }
  CHECK(correct == static_cast<std::size_t>(sb.train_codes.rows()));
}

TEST_CASE("default preset shapes and P-presence correlation") {
  const SyntheticBundle sb = generate_planted(planted_preset("default"));
  const auto& b = sb.bundle;
  CHECK(b.train_features.rows == 2000);
  CHECK(b.train_features.cols == 64);
  CHECK(b.class_names.size() == 10);
  CHECK(b.concepts.size() == 50);
  CHECK(sb.planted_indices.size() == 40);
  CHECK(sb.distractor_indices.size() == 10);
  const Matrix P = to_matrix(b.train_P);
  for (std::size_t j = 0; j < 40; ++j) {
    const Vector presence = sb.train_codes.col(static_cast<Eigen::Index>(j));
    CHECK(correlation(P.col(static_cast<Eigen::Index>(sb.planted_indices[j])), presence) >= 0.8);
  }
  for (float v : b.train_P.data) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  // Every sample has between three and six active concepts; nearly all have two
  // or more owned by their label (label noise can move a few).
  std::size_t owned = 0;
  for (Eigen::Index i = 0; i < sb.train_codes.rows(); ++i) {
    int active = 0, own = 0;
    for (Eigen::Index j = 0; j < 40; ++j)
      if (sb.train_codes(i, j) > 0.0) {
        ++active;
        own += static_cast<std::int64_t>(j % 10) == b.train_labels[static_cast<std::size_t>(i)];
      }
    CHECK(active >= 3);
    CHECK(active <= 6);
    owned += own >= 2;
  }
  CHECK(static_cast<double>(owned) >= 0.98 * static_cast<double>(sb.train_codes.rows()));
}

TEST_CASE("infeasible configurations are rejected") {
  PlantedConfig c = planted_preset("small");
  c.planted = c.classes - 1;
  CHECK_THROWS_AS(generate_planted(c), Error);
  c = planted_preset("small");
  c.sigma = -0.1;
  CHECK_THROWS_AS(generate_planted(c), Error);
  CHECK_THROWS_AS(planted_preset("huge"), Error);
}
