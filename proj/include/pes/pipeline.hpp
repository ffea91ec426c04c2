#pragma once

#include "pes/awd.hpp"
#include "pes/datagen.hpp"
#include "pes/losses.hpp"
#include "pes/metrics.hpp"
#include "pes/nn.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pes {

enum class Strategy { labeled_only, joint, delayed, best_continuation };

std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view name);

struct ModelConfig {
  int hidden = 16;
  int recurrent = 16;
  int embed = 16;
};

struct OptimConfig {
  double lr = 3e-3;
  int warmup = 3;
  int batch_size = 4;
  /// Labeled batches per epoch; 0 derives 2 * ceil(k / batch_size).
  int batches_per_epoch = 100;
  AdamConfig adam;
};

struct RunConfig {
  GenConfig gen;
  int train_pool = 200;
  int val_clips = 60;
  int test_clips = 100;
  int k = 25;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  int stage1_epochs = 100;
  int stage2_epochs = 50;
  int stage3_epochs = 30;
  Strategy strategy = Strategy::best_continuation;
  AnnealSchedule anneal;

  ModelConfig model;
  OptimConfig optim;
  double fg_weight = 5.0;

  int knn_k = 5;
  /// Epochs between AWD mapping rebuilds; 0 builds it once.
  int awd_refresh = 0;
  int awd_epochs = 100;

  int eval_delta = 1;
  DecodeOptions decode;

  void validate() const;
  int batches_per_epoch() const;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Applies every key present in `j` on top of `base`; unknown keys are a config error.
RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {});
std::uint64_t config_hash(const RunConfig& cfg);

/// Train pool and validation from one set of videos, test from a disjoint set.
DatasetSplit make_benchmark(const RunConfig& cfg, const LabelSchema& schema, std::uint64_t seed);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double lambda = 0.0;
  double train_loss = 0.0;
  int labeled_batches = 0;
  int unlabeled_batches = 0;
  double val_loss = 0.0;
  double val_edit = 0.0;
};

struct RunRecord {
  std::string stage;
  std::vector<EpochLog> epochs;
  int best_epoch = -1;
  double best_val = 0.0;
  std::string best_checkpoint;
  std::optional<EvalReport> test;
  /// AWD weights queried on unlabeled clips during training.
  std::vector<double> awd_weights;
  /// Parameters at the start of the first mixed epoch (strategy checks).
  std::optional<Vector> params_at_transition;
  /// Best labeled-phase candidate (before anneal start).
  std::optional<Vector> labeled_phase_best;
};

nlohmann::json to_json(const EvalReport& r);
nlohmann::json to_json(const RunRecord& r);

// ---------------------------------------------------------------------------
// Batch objectives. Each returns the loss and, when `grad` is non-null, adds
// its parameter gradient into `grad`.

/// Modality inputs of a clip in encoder order.
std::vector<const Matrix*> select_inputs(const ModelArch& arch, const ClipInputs& in);

struct BatchForward {
  std::vector<ForwardPass> passes;
};

BatchForward forward_batch(const ModelState& m, const std::vector<const ClipInputs*>& clips);

struct ClipTarget {
  IndexVector coarse;
  Matrix fine;
  double weight = 1.0;
  bool include_fine = true;
};

enum class Reduction {
  /// frames of all clips pooled into one loss, scaled by the first target's weight
  stacked,
  /// mean over clips of weight_i * loss_i
  per_clip,
};

double detector_batch_loss(const ModelState& m, const BatchForward& fwd, const std::vector<ClipTarget>& targets,
                           double fg_weight, Reduction reduction, Vector* grad);

/// Stage I objective for one pure batch: L_lab for labeled batches, lambda(e) L_unlab for unlabeled ones.
/// Unlabeled targets are the pseudo-labels supplied by the caller (held fixed).
double stage1_batch_loss(const ModelState& m, const std::vector<const ClipInputs*>& clips,
                         const std::vector<ClipTarget>& targets, Pool origin, int epoch, const AnnealSchedule& s,
                         double fg_weight, Vector* grad);

/// Mean distill loss over a batch against fixed teacher embeddings.
double distill_batch_loss(const ModelState& student, std::size_t encoder, const std::vector<const Matrix*>& features,
                          const std::vector<Embeddings>& teacher, Vector* grad);

/// Mean over clips of W_i * unlabeled loss against teacher pseudo-labels.
double awd_batch_loss(const ModelState& student, const std::vector<const ClipInputs*>& clips,
                      const std::vector<ClipTarget>& teacher_targets, double fg_weight, Vector* grad);

// ---------------------------------------------------------------------------

ModelArch detector_arch(const RunConfig& cfg, const std::vector<std::string>& modalities, int num_classes);

ClipPredictor predictor_for(const ModelState& m);

struct StageResult {
  ModelState model;
  RunRecord record;
};

struct StageContext {
  const RunConfig& cfg;
  const LabelSchema& schema;
  /// Checkpoints are written here when set.
  std::optional<std::filesystem::path> out_dir;
};

StageResult run_stage1(const StageContext& ctx, const DatasetSplit& split, std::uint64_t train_seed);
StageResult run_stage1(const StageContext& ctx, const DatasetSplit& split, std::uint64_t train_seed,
                       Strategy strategy);

struct Stage2Result {
  ModelState rgb;
  ModelState flow;
  RunRecord record;
};

Stage2Result run_stage2(const StageContext& ctx, const ModelState& teacher, const DatasetSplit& split,
                        std::uint64_t train_seed);

StageResult run_stage3(const StageContext& ctx, const ModelState& rgb, const ModelState& flow,
                       const DatasetSplit& split, std::uint64_t train_seed);

/// Supervised single-modality detector trained from scratch on labeled clips.
StageResult run_single_modality(const StageContext& ctx, const std::string& modality, const DatasetSplit& split,
                                std::uint64_t train_seed);

/// Prediction-level distillation; `teacher_override` replaces the teacher
/// model's outputs (used to force perfect or corrupted teachers).
StageResult run_awd(const StageContext& ctx, const ModelState& teacher, const DatasetSplit& split,
                    std::uint64_t train_seed, const Predictor* teacher_override = nullptr);

struct AblationRow {
  std::string name;
  std::vector<double> val_edit;
  std::vector<double> test_edit;
  std::vector<double> test_f1;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::vector<std::uint64_t> seeds;
};

/// Stage I under labeled-only, joint, delayed and best-continuation on identical splits and seeds.
/// With `with_distillation`, also MD-FED / AMD-FED Stage III students, the AWD student and an
/// rgb-only baseline.
AblationTable run_ablation(const RunConfig& cfg, const LabelSchema& schema, bool with_distillation = false);

nlohmann::json to_json(const AblationTable& t);

double median(std::vector<double> v);
double mean(const std::vector<double>& v);
double stddev(const std::vector<double>& v);

}  // namespace pes
