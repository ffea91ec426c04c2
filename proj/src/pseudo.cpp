#include "pes/pseudo.hpp"

#include "pes/error.hpp"

namespace pes {

FineLabelVector activate_one(FineLabelVector v, std::span<const int> idxs) {
  require(!idxs.empty(), ErrorCategory::argument, "activate_one needs at least one index");
  for (int i : idxs) require(i >= 0 && i < v.size(), ErrorCategory::argument, "activate_one index out of range");
  int best = idxs.front();
  for (int i : idxs)
    if (v[i] > v[best] || (v[i] == v[best] && i < best)) best = i;
  for (int i : idxs) v[i] = 0.0;
  v[best] = 1.0;
  return v;
}

FineLabelVector fine_label_postprocess(FineLabelVector v, const LabelSchema& s) {
  require(v.size() == s.num_classes(), ErrorCategory::schema,
          "fine vector has length " + std::to_string(v.size()) + ", schema expects " +
              std::to_string(s.num_classes()));
  for (const auto& g : s.groups()) v = activate_one(std::move(v), g);
  for (int b : s.independent_binary()) v[b] = v[b] >= 0.5 ? 1.0 : 0.0;
  for (const auto& g : s.conditional_groups()) {
    if (static_cast<int>(v[g.gate_index]) != g.gate_value) {
      v = activate_one(std::move(v), g.members);
    } else {
      for (int i : g.members) v[i] = 0.0;
    }
  }
  return v;
}

Vector coarse_foreground_prob(const Matrix& coarse_logits) {
  require(coarse_logits.cols() == 2, ErrorCategory::shape, "coarse logits must have two columns");
  Vector p(coarse_logits.rows());
  for (Eigen::Index t = 0; t < coarse_logits.rows(); ++t)
    p[t] = sigmoid(coarse_logits(t, 1) - coarse_logits(t, 0));
  return p;
}

PseudoLabels make_pseudo_labels(const Matrix& coarse_logits, const Matrix& fine_logits, const LabelSchema& s,
                                int source_epoch) {
  require(coarse_logits.cols() == 2, ErrorCategory::shape, "coarse logits must have two columns");
  require(fine_logits.rows() == coarse_logits.rows() && fine_logits.cols() == s.num_classes(), ErrorCategory::shape,
          "fine logits do not match the coarse logits or the schema");
  require(coarse_logits.allFinite() && fine_logits.allFinite(), ErrorCategory::numeric, "non-finite logits");
  const Eigen::Index t_len = coarse_logits.rows();
  PseudoLabels out;
  out.source_epoch = source_epoch;
  out.coarse = IndexVector::Zero(t_len);
  out.fine = Matrix::Zero(t_len, s.num_classes());
  for (Eigen::Index t = 0; t < t_len; ++t) {
    // argmax over {background, foreground}; ties go to background
    if (coarse_logits(t, 1) <= coarse_logits(t, 0)) continue;
    out.coarse[t] = 1;
    FineLabelVector probs = fine_logits.row(t).transpose().unaryExpr([](double x) { return sigmoid(x); });
    out.fine.row(t) = fine_label_postprocess(std::move(probs), s).transpose();
  }
  return out;
}

}  // namespace pes
