#pragma once

#include "pes/datagen.hpp"
#include "pes/losses.hpp"
#include "pes/nn.hpp"
#include "pes/schema.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace pes {

/// 0 when the teacher's hard vector matches ground truth on every class, else 1.
int correctness_p(const Eigen::Ref<const Vector>& teacher_hard, const Eigen::Ref<const Vector>& gt);

/// (#teacher/student mismatches + 1) / (#student/ground-truth mismatches + 1).
double distortion_d(const Eigen::Ref<const Vector>& teacher_hard, const Eigen::Ref<const Vector>& student_hard,
                    const Eigen::Ref<const Vector>& gt);

/// 1 / (1 + p (d - 1)), clipped to [0, 1].
double weight_W(double p, double d);

/// Top-1 minus top-2 probability inside every group (conditional groups
/// included regardless of their gate), then |2y - 1| for each binary.
Vector group_confidence(const Eigen::Ref<const Vector>& probs, const LabelSchema& s);

/// Mean over groups per frame, then mean over frames. Throws a state error for an empty frame list.
double clip_confidence(const std::vector<Vector>& frame_confs);

struct MappingRecord {
  double c_student = 0.0;
  double c_teacher = 0.0;
  double p = 0.0;
  double d = 1.0;
  friend bool operator==(const MappingRecord&, const MappingRecord&) = default;
};

/// Validation table from averaged (student, teacher) confidences to averaged (p, d).
struct WeightMapping {
  std::vector<MappingRecord> records;
  int k_neighbors = 5;
};

/// Per-clip model output used by the mapping; fine logits are enough.
using Predictor = std::function<Logits(const ClipInputs&)>;

/// Clip-level statistics from per-frame fine logits on the chosen frames.
struct ClipReliability {
  double c_student = 0.0;
  double c_teacher = 0.0;
  double p = 0.0;
  double d = 1.0;
  int frames = 0;
};

/// p, d, and confidences averaged over the ground-truth event frames of one clip.
ClipReliability clip_reliability(const Matrix& teacher_fine_logits, const Matrix& student_fine_logits,
                                 const ClipLabels& truth, const LabelSchema& s);

/// One record per validation clip that has at least one event frame.
WeightMapping build_mapping(const std::vector<ClipSample>& val, const Predictor& teacher, const Predictor& student,
                            const LabelSchema& s, int k_neighbors = 5);

/// Convenience overload: teacher runs on pose, student on rgb.
WeightMapping build_mapping(const std::vector<ClipSample>& val, const ModelState& teacher, const ModelState& student,
                            const LabelSchema& s, int k_neighbors = 5);

/// Mean (p, d) of the k nearest records in (c_student, c_teacher) space,
/// distance ties broken by record index.
std::pair<double, double> knn_estimate(const WeightMapping& mapping, double c_student, double c_teacher);

double knn_weight(const WeightMapping& mapping, double c_student, double c_teacher);

/// Clip confidence of a model on its own predicted event frames, or nothing
/// when it predicts none.
std::optional<double> predicted_clip_confidence(const Logits& logits, const std::vector<int>& frames,
                                                const LabelSchema& s);

/// W-scaled detector loss against the teacher's post-processed hard outputs.
template <typename Scalar>
DetectorLoss<Scalar> awd_student_loss(const MatrixX<Scalar>& coarse_logits, const MatrixX<Scalar>& fine_logits,
                                      const PseudoLabels& teacher_pseudo, Scalar w, Scalar fg_weight = 5) {
  require(w >= 0 && w <= 1, ErrorCategory::argument, "AWD weight must lie in [0, 1]");
  auto loss = unlabeled_loss<Scalar>(coarse_logits, fine_logits, teacher_pseudo, fg_weight);
  loss.value *= w;
  loss.coarse *= w;
  loss.fine *= w;
  loss.grad_coarse *= w;
  loss.grad_fine *= w;
  return loss;
}

/// Text table, one record per line: c_s c_t p d (17 significant digits).
void save_mapping(const std::filesystem::path& path, const WeightMapping& mapping);
WeightMapping load_mapping(const std::filesystem::path& path, int k_neighbors = 5);

}  // namespace pes
