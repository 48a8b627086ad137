#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace lfcbm {

// Filter identifiers, numbered in pipeline order.
enum class Filter : int {
  none = 0,
  length = 1,
  class_similarity = 2,
  duplicate = 3,
  activation = 4,
  fidelity = 5,
};

const char* filter_name(Filter f);

struct ConceptEntry {
  std::string text;
  bool kept = true;
  Filter removed_by = Filter::none;
  std::string related;  // offending class, kept twin, or empty
  double value = 0.0;   // statistic that triggered removal
};

// Ordered concept list. Entries are never reordered or erased; removal only
// flips status, so original indices stay valid for P and embedding rows.
class ConceptSet {
 public:
  ConceptSet() = default;
  explicit ConceptSet(std::vector<std::string> texts);

  std::size_t size() const { return entries_.size(); }
  const ConceptEntry& operator[](std::size_t i) const { return entries_[i]; }
  const std::vector<ConceptEntry>& entries() const { return entries_; }

  void remove(std::size_t i, Filter by, std::string related, double value);

  std::vector<std::size_t> kept_indices() const;
  std::vector<std::string> kept_texts() const;
  std::size_t kept_count() const;

  bool operator==(const ConceptSet& other) const;

 private:
  std::vector<ConceptEntry> entries_;
};

}  // namespace lfcbm
