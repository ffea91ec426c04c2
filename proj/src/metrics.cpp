#include "pes/metrics.hpp"

#include "pes/error.hpp"
#include "pes/pseudo.hpp"

#include <algorithm>
#include <numeric>

namespace pes {

EventSequence decode_events(const Eigen::Ref<const Vector>& coarse_probs, const Matrix& fine_logits,
                            const LabelSchema& s, const EventVocab& vocab, const DecodeOptions& opt) {
  require(fine_logits.rows() == coarse_probs.size(), ErrorCategory::shape, "coarse/fine frame count mismatch");
  require(opt.window >= 0, ErrorCategory::argument, "NMS window must be non-negative");
  const Eigen::Index t_len = coarse_probs.size();
  EventSequence seq;
  for (Eigen::Index t = 0; t < t_len; ++t) {
    const double p = coarse_probs[t];
    if (!(p > opt.threshold)) continue;
    bool keep = true;
    for (Eigen::Index o = std::max<Eigen::Index>(0, t - opt.window); o <= std::min(t_len - 1, t + opt.window); ++o) {
      if (o == t) continue;
      // strictly larger anywhere suppresses; an equal value earlier suppresses too
      if (coarse_probs[o] > p || (coarse_probs[o] == p && o < t)) {
        keep = false;
        break;
      }
    }
    if (!keep) continue;
    FineLabelVector probs = fine_logits.row(t).transpose().unaryExpr([](double x) { return sigmoid(x); });
    const int id = vocab.index_of(fine_label_postprocess(std::move(probs), s));
    require(id >= 0, ErrorCategory::state, "post-processed fine vector is outside the vocabulary");
    seq.events.push_back({id, static_cast<int>(t)});
  }
  return seq;
}

int levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double edit_score(const EventSequence& pred, const EventSequence& gt) {
  const std::size_t longest = std::max(pred.size(), gt.size());
  if (longest == 0) return 100.0;
  const int d = levenshtein(pred.class_ids(), gt.class_ids());
  return 100.0 * (1.0 - static_cast<double>(d) / static_cast<double>(longest));
}

namespace {

/// Kuhn's augmenting-path matching between predicted and ground-truth timestamps.
long max_matching(const std::vector<int>& pred_t, const std::vector<int>& gt_t, int delta) {
  std::vector<int> gt_owner(gt_t.size(), -1);
  std::vector<char> seen;
  std::function<bool(std::size_t)> augment = [&](std::size_t p) {
    for (std::size_t g = 0; g < gt_t.size(); ++g) {
      if (seen[g] || std::abs(pred_t[p] - gt_t[g]) > delta) continue;
      seen[g] = 1;
      if (gt_owner[g] < 0 || augment(static_cast<std::size_t>(gt_owner[g]))) {
        gt_owner[g] = static_cast<int>(p);
        return true;
      }
    }
    return false;
  };
  long matched = 0;
  for (std::size_t p = 0; p < pred_t.size(); ++p) {
    seen.assign(gt_t.size(), 0);
    if (augment(p)) ++matched;
  }
  return matched;
}

}  // namespace

double macro_f1(const std::map<int, ClassCounts>& counts) {
  double sum = 0.0;
  int n = 0;
  for (const auto& [cls, c] : counts) {
    if (c.tp + c.fp + c.fn == 0) continue;
    sum += c.f1();
    ++n;
  }
  return n == 0 ? 0.0 : 100.0 * sum / n;
}

F1Result f1_at_tolerance(const EventSequence& pred, const EventSequence& gt, int delta) {
  require(delta >= 0, ErrorCategory::argument, "delta must be non-negative");
  std::map<int, std::pair<std::vector<int>, std::vector<int>>> by_class;
  for (const auto& e : pred.events) by_class[e.class_id].first.push_back(e.timestamp);
  for (const auto& e : gt.events) by_class[e.class_id].second.push_back(e.timestamp);
  F1Result out;
  for (const auto& [cls, times] : by_class) {
    const auto& [pt, gtt] = times;
    ClassCounts c;
    c.tp = max_matching(pt, gtt, delta);
    c.fp = static_cast<long>(pt.size()) - c.tp;
    c.fn = static_cast<long>(gtt.size()) - c.tp;
    out.per_class[cls] = c;
  }
  out.mean_f1 = macro_f1(out.per_class);
  return out;
}

EvalReport evaluate_split(const ClipPredictor& model, const std::vector<ClipSample>& clips, const LabelSchema& s,
                          int delta, const DecodeOptions& opt) {
  require(!clips.empty(), ErrorCategory::argument, "cannot evaluate an empty clip list");
  const EventVocab vocab(s);
  EvalReport report;
  report.delta = delta;
  double edit_sum = 0.0;
  for (const auto& clip : clips) {
    const Logits logits = model(clip.inputs);
    const EventSequence pred = decode_events(coarse_foreground_prob(logits.coarse), logits.fine, s, vocab, opt);
    edit_sum += edit_score(pred, clip.labels.events);
    for (const auto& [cls, c] : f1_at_tolerance(pred, clip.labels.events, delta).per_class) report.counts[cls] += c;
  }
  report.clips = static_cast<int>(clips.size());
  report.edit = edit_sum / static_cast<double>(clips.size());
  for (const auto& [cls, c] : report.counts) report.per_class_f1[cls] = 100.0 * c.f1();
  report.f1_evt = macro_f1(report.counts);
  return report;
}

}  // namespace pes
