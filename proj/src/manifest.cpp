#include "lfcbm/manifest.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lfcbm/error.hpp"
#include "lfcbm/npy.hpp"

namespace lfcbm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

FileRef file_ref_from(const json& j, const std::string& key) {
  if (!j.contains(key)) throw Error("malformed manifest: missing file entry '" + key + "'");
  const auto& e = j.at(key);
  FileRef r;
  r.path = e.at("path").get<std::string>();
  r.sha256 = e.value("sha256", std::string{});
  if (r.path.empty()) throw Error("malformed manifest: empty path for '" + key + "'");
  return r;
}

json to_json(const FileRef& r) { return json{{"path", r.path}, {"sha256", r.sha256}}; }

fs::path resolve(const fs::path& base, const FileRef& r, const std::string& what) {
  const fs::path p = base / r.path;
  if (!fs::exists(p)) throw Error("missing file for " + what + ": " + p.string());
  if (r.sha256.empty()) throw Error("checksum failure for " + what + ": no sha256 recorded");
  const std::string actual = sha256_file(p);
  if (actual != r.sha256)
    throw Error("checksum failure for " + what + ": expected " + r.sha256 + ", got " + actual);
  return p;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw Error(msg);
}

FileRef write_ref(const fs::path& dir, const std::string& name) {
  return FileRef{name, sha256_file(dir / name)};
}

}  // namespace

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = end + 1;
  }
  return lines;
}

void write_lines(const std::vector<std::string>& lines, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw Error("I/O failure writing " + path.string());
}

Manifest read_manifest(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw Error("cannot open manifest " + manifest_path.string());
  Manifest m;
  try {
    const json j = json::parse(in);
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kManifestVersion)
      throw Error("unsupported manifest format_version " + std::to_string(m.format_version));
    m.dataset = j.at("dataset").get<std::string>();
    m.activation_cutoff = j.at("activation_cutoff").get<double>();
    m.text_embeddings_normalized = j.value("text_embeddings_normalized", true);
    m.n_train = j.at("splits").at("train").get<std::size_t>();
    m.n_val = j.at("splits").at("val").get<std::size_t>();
    const auto& f = j.at("files");
    m.train_features = file_ref_from(f, "train_features");
    m.val_features = file_ref_from(f, "val_features");
    m.train_P = file_ref_from(f, "train_P");
    m.val_P = file_ref_from(f, "val_P");
    m.train_labels = file_ref_from(f, "train_labels");
    m.val_labels = file_ref_from(f, "val_labels");
    m.class_names = file_ref_from(f, "class_names");
    m.concepts = file_ref_from(f, "concepts");
    for (const auto& s : j.at("embedding_spaces")) {
      EmbeddingSpaceRef e;
      e.name = s.at("name").get<std::string>();
      e.concepts = file_ref_from(s, "concepts");
      e.classes = file_ref_from(s, "classes");
      m.embedding_spaces.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw Error(std::string("malformed manifest: ") + e.what());
  }
  if (!(m.activation_cutoff > -1.0 && m.activation_cutoff < 1.0))
    throw Error("malformed manifest: activation_cutoff must lie in (-1, 1)");
  return m;
}

void validate_bundle(const DatasetBundle& b) {
  const std::size_t dz = b.class_names.size();
  const std::size_t M = b.concepts.size();
  require(dz > 0, "bundle has no classes");
  require(b.train_features.rows == b.train_labels.size(),
          "shape mismatch: train_features rows != train_labels length");
  require(b.val_features.rows == b.val_labels.size(),
          "shape mismatch: val_features rows != val_labels length");
  require(b.train_features.cols == b.val_features.cols,
          "shape mismatch: train_features cols != val_features cols");
  require(b.train_P.rows == b.train_features.rows, "shape mismatch: train_P rows != train_features rows");
  require(b.val_P.rows == b.val_features.rows, "shape mismatch: val_P rows != val_features rows");
  require(b.train_P.cols == M, "P columns != concept count (train_P)");
  require(b.val_P.cols == M, "P columns != concept count (val_P)");
  for (auto y : b.train_labels)
    require(y >= 0 && static_cast<std::size_t>(y) < dz, "label out of range in train_labels");
  for (auto y : b.val_labels)
    require(y >= 0 && static_cast<std::size_t>(y) < dz, "label out of range in val_labels");
  require(!b.concept_text_embeddings.empty(), "missing embedding space: none provided");
  require(b.concept_text_embeddings.size() == b.class_text_embeddings.size(),
          "missing embedding space: concept/class space lists differ");
  std::set<std::string> names;
  for (std::size_t s = 0; s < b.concept_text_embeddings.size(); ++s) {
    const auto& c = b.concept_text_embeddings[s];
    const auto& k = b.class_text_embeddings[s];
    require(c.name == k.name, "missing embedding space: '" + c.name + "' has no class counterpart");
    require(names.insert(c.name).second, "duplicate embedding space '" + c.name + "'");
    require(c.tensor.rows == M, "shape mismatch: concept embeddings '" + c.name + "' rows != concept count");
    require(k.tensor.rows == dz, "shape mismatch: class embeddings '" + k.name + "' rows != class count");
    require(c.tensor.cols == k.tensor.cols && c.tensor.cols > 0,
            "shape mismatch: embedding dim differs between concepts and classes in '" + c.name + "'");
  }
  for (const auto* t : {&b.train_features, &b.val_features, &b.train_P, &b.val_P})
    for (float v : t->data) require(std::isfinite(v), "non-finite tensor entry in bundle");
}

DatasetBundle load_bundle(const fs::path& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();
  DatasetBundle b;
  b.dataset = m.dataset;
  b.activation_cutoff = m.activation_cutoff;
  b.train_features = read_tensor(resolve(base, m.train_features, "train_features"));
  b.val_features = read_tensor(resolve(base, m.val_features, "val_features"));
  b.train_P = read_tensor(resolve(base, m.train_P, "train_P"));
  b.val_P = read_tensor(resolve(base, m.val_P, "val_P"));
  b.train_labels = read_labels(resolve(base, m.train_labels, "train_labels"));
  b.val_labels = read_labels(resolve(base, m.val_labels, "val_labels"));
  b.class_names = read_lines(resolve(base, m.class_names, "class_names"));
  b.concepts = ConceptSet(read_lines(resolve(base, m.concepts, "concepts")));
  for (const auto& s : m.embedding_spaces) {
    b.concept_text_embeddings.push_back(
        {s.name, read_tensor(resolve(base, s.concepts, "concept embeddings '" + s.name + "'"))});
    b.class_text_embeddings.push_back(
        {s.name, read_tensor(resolve(base, s.classes, "class embeddings '" + s.name + "'"))});
  }
  require(b.train_labels.size() == m.n_train, "shape mismatch: manifest splits.train != train_labels length");
  require(b.val_labels.size() == m.n_val, "shape mismatch: manifest splits.val != val_labels length");
  validate_bundle(b);
  return b;
}

fs::path write_bundle(const DatasetBundle& b, const fs::path& dir) {
  validate_bundle(b);
  fs::create_directories(dir);
  write_tensor(b.train_features, dir / "train_features.npy");
  write_tensor(b.val_features, dir / "val_features.npy");
  write_tensor(b.train_P, dir / "train_P.npy");
  write_tensor(b.val_P, dir / "val_P.npy");
  write_labels(b.train_labels, dir / "train_labels.npy");
  write_labels(b.val_labels, dir / "val_labels.npy");
  write_lines(b.class_names, dir / "class_names.txt");
  std::vector<std::string> concepts;
  for (const auto& e : b.concepts.entries()) concepts.push_back(e.text);
  write_lines(concepts, dir / "concepts.txt");

  json files;
  for (const char* name : {"train_features", "val_features", "train_P", "val_P", "train_labels", "val_labels"})
    files[name] = to_json(write_ref(dir, std::string(name) + ".npy"));
  files["class_names"] = to_json(write_ref(dir, "class_names.txt"));
  files["concepts"] = to_json(write_ref(dir, "concepts.txt"));

  json spaces = json::array();
  for (std::size_t s = 0; s < b.concept_text_embeddings.size(); ++s) {
    const auto& name = b.concept_text_embeddings[s].name;
    const std::string cfile = "text_" + name + "_concepts.npy";
    const std::string kfile = "text_" + name + "_classes.npy";
    write_tensor(b.concept_text_embeddings[s].tensor, dir / cfile);
    write_tensor(b.class_text_embeddings[s].tensor, dir / kfile);
    spaces.push_back({{"name", name},
                      {"concepts", to_json(write_ref(dir, cfile))},
                      {"classes", to_json(write_ref(dir, kfile))}});
  }

  json j;
  j["format_version"] = kManifestVersion;
  j["dataset"] = b.dataset;
  j["activation_cutoff"] = b.activation_cutoff;
  j["text_embeddings_normalized"] = true;
  j["splits"] = {{"train", b.train_labels.size()}, {"val", b.val_labels.size()}};
  j["files"] = files;
  j["embedding_spaces"] = spaces;
  const fs::path manifest = dir / "manifest.json";
  std::ofstream out(manifest, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw Error("I/O failure writing " + manifest.string());
  return manifest;
}

}  // namespace lfcbm
