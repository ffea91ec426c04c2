#pragma once

#include "pes/schema.hpp"
#include "pes/types.hpp"

#include <span>

namespace pes {

/// Hard targets derived from a detached forward pass.
struct PseudoLabels {
  IndexVector coarse;  // T, {0,1}
  Matrix fine;         // T x C, schema-valid rows where coarse = 1, zero elsewhere
  int source_epoch = -1;
};

/// One-hot argmax over `idxs` (lowest index wins ties); other entries untouched.
FineLabelVector activate_one(FineLabelVector v, std::span<const int> idxs);

/// Group-wise hard decision for a soft fine vector:
///   unconditional groups -> activate_one
///   binaries             -> 1 iff value >= 0.5
///   conditional groups   -> activate_one while the gate is open, zero otherwise
FineLabelVector fine_label_postprocess(FineLabelVector v, const LabelSchema& s);

/// Coarse argmax per frame; fine rows post-processed from sigmoid(fine_logits) on foreground frames.
PseudoLabels make_pseudo_labels(const Matrix& coarse_logits, const Matrix& fine_logits, const LabelSchema& s,
                                int source_epoch = -1);

/// Foreground probability of each frame from 2-way coarse logits.
Vector coarse_foreground_prob(const Matrix& coarse_logits);

}  // namespace pes
