#pragma once

#include "pes/types.hpp"

#include <string>
#include <vector>

namespace pes {

/// Per-frame joint-mixing layer followed by a bidirectional tanh recurrence
/// and a linear projection into the shared embedding space.
struct EncoderArch {
  std::string modality;
  int input_dim = 0;
  int hidden = 16;
  int recurrent = 16;
  int embed = 16;

  Eigen::Index param_count() const {
    const Eigen::Index d = input_dim, h = hidden, r = recurrent, e = embed;
    return d * h + h + 2 * (h * r + r * r + r) + 2 * r * e + e;
  }
  friend bool operator==(const EncoderArch&, const EncoderArch&) = default;
};

/// Encoders whose embeddings are fused by addition, then optional coarse/fine heads.
struct ModelArch {
  std::vector<EncoderArch> encoders;
  /// Fine-label count C; 0 builds an encoder-only model.
  int num_classes = 0;

  int embed_dim() const { return encoders.empty() ? 0 : encoders.front().embed; }
  bool has_heads() const { return num_classes > 0; }
  Eigen::Index encoder_offset(std::size_t index) const;
  Eigen::Index heads_offset() const { return encoder_offset(encoders.size()); }
  Eigen::Index param_count() const;
  void validate() const;
  friend bool operator==(const ModelArch&, const ModelArch&) = default;
};

struct AdamState {
  Vector first_moment;
  Vector second_moment;
  long step = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct ModelState {
  ModelArch arch;
  Vector params;
  AdamState opt;

  void reset_optimizer();
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
ModelState init_model(const ModelArch& arch, std::uint64_t seed);

/// Intermediate activations of one encoder pass, kept for backpropagation.
struct EncoderTape {
  Matrix input;
  Matrix mixed;     // T x hidden
  Matrix forward;   // T x recurrent
  Matrix backward;  // T x recurrent
};

struct Logits {
  Matrix coarse;  // T x 2
  Matrix fine;    // T x C
};

Embeddings forward_encoder(const ModelState& m, std::size_t encoder, const Matrix& x, EncoderTape* tape = nullptr);

/// Accumulates d(loss)/d(encoder params) into `grad` (full-length gradient vector).
void backward_encoder(const ModelState& m, std::size_t encoder, const EncoderTape& tape, const Matrix& grad_embed,
                      Vector& grad);

/// Skeleton encoder pass (encoder 0 of a teacher model).
inline Embeddings forward_teacher(const ModelState& m, const Matrix& pose) { return forward_encoder(m, 0, pose); }

/// Student encoder pass for a feature modality.
inline Embeddings forward_student(const ModelState& m, const Matrix& feat, std::size_t encoder = 0) {
  return forward_encoder(m, encoder, feat);
}

[[noreturn]] void throw_fuse_shape_error();

/// Element-wise sum of two embedding sequences.
template <typename DerivedA, typename DerivedB>
auto fuse(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw_fuse_shape_error();
  return (a + b).eval();
}

/// Raw coarse and fine logits; no activation applied.
Logits detect(const ModelState& m, const Embeddings& e);

/// Accumulates head gradients into `grad` and returns d(loss)/d(embeddings).
Matrix backward_detect(const ModelState& m, const Embeddings& e, const Logits& grad_logits, Vector& grad);

/// Full forward over one clip's modality inputs (in encoder order).
struct ForwardPass {
  std::vector<EncoderTape> tapes;
  Embeddings fused;
  Logits logits;
};

ForwardPass forward_model(const ModelState& m, const std::vector<const Matrix*>& inputs);
void backward_model(const ModelState& m, const ForwardPass& pass, const Logits& grad_logits, Vector& grad);

/// Linear warm-up to base_lr (first epoch at base_lr/warmup), then cosine decay to zero.
double lr_at(int epoch, double base_lr, int warmup, int total);

/// Decoupled-weight-decay adaptive-moment step.
void opt_step(ModelState& m, const Vector& grads, double lr, const AdamConfig& cfg = {});

}  // namespace pes
