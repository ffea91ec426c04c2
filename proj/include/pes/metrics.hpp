#pragma once

#include "pes/datagen.hpp"
#include "pes/nn.hpp"
#include "pes/schema.hpp"

#include <functional>
#include <map>
#include <vector>

namespace pes {

struct DecodeOptions {
  double threshold = 0.5;
  int window = 1;
};

/// Frames that are maxima of the foreground probability within +-window and
/// exceed the threshold; equal values keep the earliest frame. Each event's
/// class is its post-processed fine vector mapped into the vocabulary.
EventSequence decode_events(const Eigen::Ref<const Vector>& coarse_probs, const Matrix& fine_logits,
                            const LabelSchema& s, const EventVocab& vocab, const DecodeOptions& opt = {});

/// Edit distance between two token sequences (insert/delete/substitute, unit costs).
int levenshtein(const std::vector<int>& a, const std::vector<int>& b);

/// 100 * (1 - lev / max(|pred|, |gt|)); 100 when both are empty. Timestamps are ignored.
double edit_score(const EventSequence& pred, const EventSequence& gt);

struct ClassCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;

  double f1() const {
    const long denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  ClassCounts& operator+=(const ClassCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

struct F1Result {
  std::map<int, ClassCounts> per_class;
  /// Macro F1 (percent) over classes present in prediction or ground truth.
  double mean_f1 = 0.0;
};

/// Maximum cardinality one-to-one matching per class between predicted and
/// ground-truth events with |t_pred - t_gt| <= delta.
F1Result f1_at_tolerance(const EventSequence& pred, const EventSequence& gt, int delta);

/// Macro F1 (percent) over the classes present in `counts`.
double macro_f1(const std::map<int, ClassCounts>& counts);

struct EvalReport {
  double edit = 0.0;
  double f1_evt = 0.0;
  std::map<int, double> per_class_f1;
  std::map<int, ClassCounts> counts;
  int delta = 1;
  int clips = 0;
};

using ClipPredictor = std::function<Logits(const ClipInputs&)>;

/// Edit averaged over clips; F1 from per-class counts summed over clips, then macro-averaged.
EvalReport evaluate_split(const ClipPredictor& model, const std::vector<ClipSample>& clips, const LabelSchema& s,
                          int delta = 1, const DecodeOptions& opt = {});

}  // namespace pes
