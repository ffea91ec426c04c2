#pragma once

#include "pes/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pes {

/// Group whose members must be one-hot while `v[gate_index] != gate_value`
/// and all-zero otherwise.
struct ConditionalGroup {
  int gate_index = 0;
  int gate_value = 1;
  std::vector<int> members;
  friend bool operator==(const ConditionalGroup&, const ConditionalGroup&) = default;
};

/// Fine-label vocabulary: names plus the exclusivity structure over indices.
///
/// Schema text grammar, one directive per line, `#` starts a comment:
///
///     classes <name> <name> ...
///     group <i> <j> ...                 one-hot, always
///     unless <gate> = <value> group <i> <j> ...
///     binary <i> ...                    independent {0,1} entries
///
/// Every class index must appear in exactly one directive. Gates must point
/// at an index owned by an unconditional group or a binary.
class LabelSchema {
 public:
  LabelSchema(std::vector<std::string> class_names, std::vector<std::vector<int>> groups,
              std::vector<ConditionalGroup> conditional_groups, std::vector<int> independent_binary);

  /// Near/far, serve/return/stroke, fh/bh and shot type gated on "not serve",
  /// approach as an independent bit.
  static const LabelSchema& tennis();
  static std::string_view tennis_text();

  static LabelSchema parse(std::string_view text);
  static LabelSchema load(const std::filesystem::path& path);
  std::string to_text() const;

  /// FNV-1a over the canonical text form.
  std::uint64_t hash() const;

  int num_classes() const { return static_cast<int>(class_names_.size()); }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::vector<std::vector<int>>& groups() const { return groups_; }
  const std::vector<ConditionalGroup>& conditional_groups() const { return conditional_; }
  const std::vector<int>& independent_binary() const { return binary_; }

  /// Number of confidence groups: every group (conditional or not) plus every binary.
  int num_confidence_groups() const {
    return static_cast<int>(groups_.size() + conditional_.size() + binary_.size());
  }

  friend bool operator==(const LabelSchema&, const LabelSchema&) = default;

 private:
  std::vector<std::string> class_names_;
  std::vector<std::vector<int>> groups_;
  std::vector<ConditionalGroup> conditional_;
  std::vector<int> binary_;
};

/// True iff the hard vector obeys every group and gate rule of the schema.
/// Throws a schema error on length mismatch.
bool validate_hard_vector(const Eigen::Ref<const Vector>& v, const LabelSchema& s);

/// All schema-valid hard vectors, sorted lexicographically over their bits.
class EventVocab {
 public:
  explicit EventVocab(const LabelSchema& s);

  int size() const { return static_cast<int>(entries_.size()); }
  const FineLabelVector& at(int id) const { return entries_.at(static_cast<std::size_t>(id)); }

  /// Vocabulary id of a hard vector, or -1 when it is not schema-valid.
  int index_of(const Eigen::Ref<const Vector>& hard) const;

 private:
  std::vector<FineLabelVector> entries_;
  std::unordered_map<std::uint64_t, int> ids_;
};

EventVocab event_vocab(const LabelSchema& s);

struct Event {
  int class_id = 0;
  int timestamp = 0;
  friend bool operator==(const Event&, const Event&) = default;
};

struct EventSequence {
  std::vector<Event> events;

  std::size_t size() const { return events.size(); }
  bool empty() const { return events.empty(); }
  std::vector<int> class_ids() const;

  /// Strictly increasing timestamps and ids inside [0, vocab_size).
  bool is_valid(int vocab_size) const;

  friend bool operator==(const EventSequence&, const EventSequence&) = default;
};

}  // namespace pes
