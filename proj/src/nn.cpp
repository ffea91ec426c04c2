#include "pes/nn.hpp"

#include "pes/error.hpp"

#include <cmath>
#include <numbers>

namespace pes {

namespace {

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;

/// Parameter blocks of one encoder, viewed inside a flat vector.
template <typename MapT, typename Ptr>
struct EncoderBlocks {
  MapT mix_w, mix_b, fwd_in, fwd_rec, fwd_b, bwd_in, bwd_rec, bwd_b, out_w, out_b;

  EncoderBlocks(Ptr base, const EncoderArch& a)
      : mix_w(base, a.input_dim, a.hidden),
        mix_b(mix_w.data() + mix_w.size(), 1, a.hidden),
        fwd_in(mix_b.data() + mix_b.size(), a.hidden, a.recurrent),
        fwd_rec(fwd_in.data() + fwd_in.size(), a.recurrent, a.recurrent),
        fwd_b(fwd_rec.data() + fwd_rec.size(), 1, a.recurrent),
        bwd_in(fwd_b.data() + fwd_b.size(), a.hidden, a.recurrent),
        bwd_rec(bwd_in.data() + bwd_in.size(), a.recurrent, a.recurrent),
        bwd_b(bwd_rec.data() + bwd_rec.size(), 1, a.recurrent),
        out_w(bwd_b.data() + bwd_b.size(), 2 * a.recurrent, a.embed),
        out_b(out_w.data() + out_w.size(), 1, a.embed) {}
};

template <typename MapT, typename Ptr>
struct HeadBlocks {
  MapT coarse_w, coarse_b, fine_w, fine_b;

  HeadBlocks(Ptr base, int embed, int classes)
      : coarse_w(base, embed, 2),
        coarse_b(coarse_w.data() + coarse_w.size(), 1, 2),
        fine_w(coarse_b.data() + coarse_b.size(), embed, classes),
        fine_b(fine_w.data() + fine_w.size(), 1, classes) {}
};

using ConstEncoder = EncoderBlocks<ConstMap, const double*>;
using MutEncoder = EncoderBlocks<MutMap, double*>;
using ConstHeads = HeadBlocks<ConstMap, const double*>;
using MutHeads = HeadBlocks<MutMap, double*>;

void fill_uniform(double* data, Eigen::Index n, double bound, Rng& rng) {
  for (Eigen::Index i = 0; i < n; ++i) data[i] = rng.uniform(-bound, bound);
}

void check_input(const ModelState& m, std::size_t encoder, const Matrix& x) {
  require(encoder < m.arch.encoders.size(), ErrorCategory::shape, "encoder index out of range");
  const auto& a = m.arch.encoders[encoder];
  require(x.cols() == a.input_dim, ErrorCategory::shape,
          a.modality + " encoder expects " + std::to_string(a.input_dim) + " input features, got " +
              std::to_string(x.cols()));
  require(x.rows() > 0, ErrorCategory::shape, "empty input sequence");
  require(x.allFinite(), ErrorCategory::numeric, "non-finite encoder input");
}

}  // namespace

Eigen::Index ModelArch::encoder_offset(std::size_t index) const {
  Eigen::Index off = 0;
  for (std::size_t i = 0; i < index && i < encoders.size(); ++i) off += encoders[i].param_count();
  return off;
}

Eigen::Index ModelArch::param_count() const {
  Eigen::Index n = heads_offset();
  if (has_heads()) n += static_cast<Eigen::Index>(embed_dim()) * (2 + num_classes) + 2 + num_classes;
  return n;
}

void ModelArch::validate() const {
  require(!encoders.empty(), ErrorCategory::config, "model needs at least one encoder");
  for (const auto& e : encoders) {
    require(e.input_dim > 0 && e.hidden > 0 && e.recurrent > 0 && e.embed > 0, ErrorCategory::config,
            "encoder dimensions must be positive");
    require(e.embed == embed_dim(), ErrorCategory::config, "fused encoders must share the embedding dimension");
  }
  require(num_classes >= 0, ErrorCategory::config, "num_classes must be non-negative");
}

void ModelState::reset_optimizer() {
  opt.first_moment = Vector::Zero(params.size());
  opt.second_moment = Vector::Zero(params.size());
  opt.step = 0;
}

ModelState init_model(const ModelArch& arch, std::uint64_t seed) {
  arch.validate();
  ModelState m;
  m.arch = arch;
  m.params = Vector::Zero(arch.param_count());
  Rng rng(seed);
  for (std::size_t i = 0; i < arch.encoders.size(); ++i) {
    const auto& a = arch.encoders[i];
    MutEncoder b(m.params.data() + arch.encoder_offset(i), a);
    fill_uniform(b.mix_w.data(), b.mix_w.size(), 1.0 / std::sqrt(a.input_dim), rng);
    fill_uniform(b.fwd_in.data(), b.fwd_in.size(), 1.0 / std::sqrt(a.hidden), rng);
    fill_uniform(b.fwd_rec.data(), b.fwd_rec.size(), 1.0 / std::sqrt(a.recurrent), rng);
    fill_uniform(b.bwd_in.data(), b.bwd_in.size(), 1.0 / std::sqrt(a.hidden), rng);
    fill_uniform(b.bwd_rec.data(), b.bwd_rec.size(), 1.0 / std::sqrt(a.recurrent), rng);
    fill_uniform(b.out_w.data(), b.out_w.size(), 1.0 / std::sqrt(2 * a.recurrent), rng);
  }
  if (arch.has_heads()) {
    MutHeads h(m.params.data() + arch.heads_offset(), arch.embed_dim(), arch.num_classes);
    const double bound = 1.0 / std::sqrt(arch.embed_dim());
    fill_uniform(h.coarse_w.data(), h.coarse_w.size(), bound, rng);
    fill_uniform(h.fine_w.data(), h.fine_w.size(), bound, rng);
  }
  m.reset_optimizer();
  return m;
}

Embeddings forward_encoder(const ModelState& m, std::size_t encoder, const Matrix& x, EncoderTape* tape) {
  check_input(m, encoder, x);
  const auto& a = m.arch.encoders[encoder];
  const ConstEncoder b(m.params.data() + m.arch.encoder_offset(encoder), a);
  const Eigen::Index t_len = x.rows();

  Matrix mixed = ((x * b.mix_w).rowwise() + b.mix_b.row(0)).array().tanh().matrix();

  Matrix fwd_pre = (mixed * b.fwd_in).rowwise() + b.fwd_b.row(0);
  Matrix fwd(t_len, a.recurrent);
  fwd.row(0) = fwd_pre.row(0).array().tanh();
  for (Eigen::Index t = 1; t < t_len; ++t)
    fwd.row(t) = (fwd_pre.row(t) + fwd.row(t - 1) * b.fwd_rec).array().tanh();

  Matrix bwd_pre = (mixed * b.bwd_in).rowwise() + b.bwd_b.row(0);
  Matrix bwd(t_len, a.recurrent);
  bwd.row(t_len - 1) = bwd_pre.row(t_len - 1).array().tanh();
  for (Eigen::Index t = t_len - 2; t >= 0; --t)
    bwd.row(t) = (bwd_pre.row(t) + bwd.row(t + 1) * b.bwd_rec).array().tanh();

  const Eigen::Index r = a.recurrent;
  Embeddings e = (fwd * b.out_w.topRows(r) + bwd * b.out_w.bottomRows(r)).rowwise() + b.out_b.row(0);

  if (tape) {
    tape->input = x;
    tape->mixed = std::move(mixed);
    tape->forward = std::move(fwd);
    tape->backward = std::move(bwd);
  }
  return e;
}

void backward_encoder(const ModelState& m, std::size_t encoder, const EncoderTape& tape, const Matrix& grad_embed,
                      Vector& grad) {
  require(grad.size() == m.params.size(), ErrorCategory::shape, "gradient buffer has wrong length");
  const auto& a = m.arch.encoders[encoder];
  const Eigen::Index off = m.arch.encoder_offset(encoder);
  const ConstEncoder b(m.params.data() + off, a);
  MutEncoder g(grad.data() + off, a);
  const Eigen::Index t_len = tape.input.rows();
  const Eigen::Index r = a.recurrent;
  require(grad_embed.rows() == t_len && grad_embed.cols() == a.embed, ErrorCategory::shape,
          "embedding gradient has wrong shape");

  g.out_w.topRows(r).noalias() += tape.forward.transpose() * grad_embed;
  g.out_w.bottomRows(r).noalias() += tape.backward.transpose() * grad_embed;
  g.out_b.row(0) += grad_embed.colwise().sum();

  Matrix d_fwd = grad_embed * b.out_w.topRows(r).transpose();
  Matrix d_bwd = grad_embed * b.out_w.bottomRows(r).transpose();

  // Forward recurrence, unrolled in reverse time.
  Matrix d_fwd_pre(t_len, r);
  Eigen::RowVectorXd carry = Eigen::RowVectorXd::Zero(r);
  for (Eigen::Index t = t_len - 1; t >= 0; --t) {
    Eigen::RowVectorXd dz =
        ((d_fwd.row(t) + carry).array() * (1.0 - tape.forward.row(t).array().square())).matrix();
    d_fwd_pre.row(t) = dz;
    if (t > 0) g.fwd_rec.noalias() += tape.forward.row(t - 1).transpose() * dz;
    carry.noalias() = dz * b.fwd_rec.transpose();
  }
  // Backward recurrence, unrolled in forward time.
  Matrix d_bwd_pre(t_len, r);
  carry.setZero();
  for (Eigen::Index t = 0; t < t_len; ++t) {
    Eigen::RowVectorXd dz =
        ((d_bwd.row(t) + carry).array() * (1.0 - tape.backward.row(t).array().square())).matrix();
    d_bwd_pre.row(t) = dz;
    if (t + 1 < t_len) g.bwd_rec.noalias() += tape.backward.row(t + 1).transpose() * dz;
    carry.noalias() = dz * b.bwd_rec.transpose();
  }
  g.fwd_b.row(0) += d_fwd_pre.colwise().sum();
  g.bwd_b.row(0) += d_bwd_pre.colwise().sum();
  g.fwd_in.noalias() += tape.mixed.transpose() * d_fwd_pre;
  g.bwd_in.noalias() += tape.mixed.transpose() * d_bwd_pre;

  Matrix d_mixed = d_fwd_pre * b.fwd_in.transpose() + d_bwd_pre * b.bwd_in.transpose();
  d_mixed.array() *= 1.0 - tape.mixed.array().square();
  g.mix_w.noalias() += tape.input.transpose() * d_mixed;
  g.mix_b.row(0) += d_mixed.colwise().sum();
}

void throw_fuse_shape_error() { fail(ErrorCategory::shape, "fuse: embeddings differ in shape"); }

Logits detect(const ModelState& m, const Embeddings& e) {
  require(m.arch.has_heads(), ErrorCategory::state, "model has no detector heads");
  require(e.cols() == m.arch.embed_dim(), ErrorCategory::shape, "embedding width does not match the detector");
  const ConstHeads h(m.params.data() + m.arch.heads_offset(), m.arch.embed_dim(), m.arch.num_classes);
  Logits out;
  out.coarse = (e * h.coarse_w).rowwise() + h.coarse_b.row(0);
  out.fine = (e * h.fine_w).rowwise() + h.fine_b.row(0);
  return out;
}

Matrix backward_detect(const ModelState& m, const Embeddings& e, const Logits& grad_logits, Vector& grad) {
  require(grad.size() == m.params.size(), ErrorCategory::shape, "gradient buffer has wrong length");
  const Eigen::Index off = m.arch.heads_offset();
  const ConstHeads h(m.params.data() + off, m.arch.embed_dim(), m.arch.num_classes);
  MutHeads g(grad.data() + off, m.arch.embed_dim(), m.arch.num_classes);
  require(grad_logits.coarse.rows() == e.rows() && grad_logits.coarse.cols() == 2 &&
              grad_logits.fine.rows() == e.rows() && grad_logits.fine.cols() == m.arch.num_classes,
          ErrorCategory::shape, "logit gradient has wrong shape");
  g.coarse_w.noalias() += e.transpose() * grad_logits.coarse;
  g.coarse_b.row(0) += grad_logits.coarse.colwise().sum();
  g.fine_w.noalias() += e.transpose() * grad_logits.fine;
  g.fine_b.row(0) += grad_logits.fine.colwise().sum();
  return grad_logits.coarse * h.coarse_w.transpose() + grad_logits.fine * h.fine_w.transpose();
}

ForwardPass forward_model(const ModelState& m, const std::vector<const Matrix*>& inputs) {
  require(inputs.size() == m.arch.encoders.size(), ErrorCategory::shape, "one input per encoder required");
  ForwardPass pass;
  pass.tapes.resize(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Embeddings e = forward_encoder(m, i, *inputs[i], &pass.tapes[i]);
    pass.fused = i == 0 ? std::move(e) : fuse(pass.fused, e);
  }
  pass.logits = detect(m, pass.fused);
  return pass;
}

void backward_model(const ModelState& m, const ForwardPass& pass, const Logits& grad_logits, Vector& grad) {
  const Matrix d_embed = backward_detect(m, pass.fused, grad_logits, grad);
  // Addition routes the same gradient to every fused encoder.
  for (std::size_t i = 0; i < pass.tapes.size(); ++i) backward_encoder(m, i, pass.tapes[i], d_embed, grad);
}

double lr_at(int epoch, double base_lr, int warmup, int total) {
  require(warmup >= 0 && warmup < total, ErrorCategory::argument, "warm-up must be shorter than the schedule");
  require(epoch >= 0 && epoch < total, ErrorCategory::argument,
          "epoch " + std::to_string(epoch) + " outside schedule of " + std::to_string(total));
  if (epoch < warmup) return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
  const double progress = static_cast<double>(epoch - warmup) / static_cast<double>(total - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void opt_step(ModelState& m, const Vector& grads, double lr, const AdamConfig& cfg) {
  require(grads.size() == m.params.size(), ErrorCategory::shape, "gradient length does not match parameters");
  require(grads.allFinite(), ErrorCategory::numeric, "non-finite gradient");
  if (m.opt.first_moment.size() != m.params.size()) m.reset_optimizer();
  auto& mo = m.opt;
  ++mo.step;
  mo.first_moment = cfg.beta1 * mo.first_moment + (1.0 - cfg.beta1) * grads;
  mo.second_moment = cfg.beta2 * mo.second_moment + (1.0 - cfg.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(mo.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(mo.step));
  m.params *= 1.0 - lr * cfg.weight_decay;
  m.params.array() -=
      lr * (mo.first_moment.array() / c1) / ((mo.second_moment.array() / c2).sqrt() + cfg.eps);
}

}  // namespace pes
