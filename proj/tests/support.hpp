#pragma once
// Shared fixtures for the unit tests and the acceptance binary.

#include "pes/pipeline.hpp"

#include <functional>

namespace pes::testing {

inline Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// Central differences over every parameter.
inline Vector numeric_gradient(const std::function<double(const ModelState&)>& f, ModelState m, double eps = 1e-5) {
  Vector g(m.params.size());
  for (Eigen::Index i = 0; i < m.params.size(); ++i) {
    const double keep = m.params[i];
    m.params[i] = keep + eps;
    const double up = f(m);
    m.params[i] = keep - eps;
    const double down = f(m);
    m.params[i] = keep;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

inline double relative_error(const Vector& analytic, const Vector& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
  return (analytic - numeric).norm() / scale;
}

/// A tiny model plus matching random inputs: T <= 8, feature widths <= 6.
struct TinyProblem {
  RunConfig cfg;
  LabelSchema schema;
  ModelState model;
  std::vector<ClipInputs> clips;
};

inline LabelSchema tiny_schema(Rng& rng) {
  // Alternates between a gated schema and one with only a group and a binary.
  if (rng.coin()) return LabelSchema({"a", "b", "c", "d", "e"}, {{0, 1}}, {{0, 1, {2, 3}}}, {4});
  return LabelSchema({"a", "b", "c"}, {{0, 1}}, {}, {2});
}

inline TinyProblem tiny_problem(Rng& rng, const std::vector<std::string>& modalities, bool heads = true) {
  TinyProblem p{RunConfig{}, tiny_schema(rng), {}, {}};
  p.cfg.gen.joints = 1 + static_cast<int>(rng.below(3));  // pose width 2..6
  p.cfg.gen.rgb_dim = 2 + static_cast<int>(rng.below(5));
  p.cfg.gen.flow_dim = 2 + static_cast<int>(rng.below(5));
  p.cfg.model.hidden = 2 + static_cast<int>(rng.below(4));
  p.cfg.model.recurrent = 2 + static_cast<int>(rng.below(4));
  p.cfg.model.embed = 2 + static_cast<int>(rng.below(4));
  p.model = init_model(detector_arch(p.cfg, modalities, heads ? p.schema.num_classes() : 0), rng.next_u64());
  // Non-zero biases so every parameter is exercised.
  for (Eigen::Index i = 0; i < p.model.params.size(); ++i) p.model.params[i] += 0.1 * rng.normal();
  const int clips = 2 + static_cast<int>(rng.below(2));
  for (int c = 0; c < clips; ++c) {
    const int t = 3 + static_cast<int>(rng.below(6));
    ClipInputs in;
    in.pose = random_matrix(rng, t, p.cfg.gen.pose_dim());
    in.rgb = random_matrix(rng, t, p.cfg.gen.rgb_dim);
    in.flow = random_matrix(rng, t, p.cfg.gen.flow_dim);
    p.clips.push_back(std::move(in));
  }
  return p;
}

inline std::vector<const ClipInputs*> pointers(const std::vector<ClipInputs>& clips) {
  std::vector<const ClipInputs*> out;
  for (const auto& c : clips) out.push_back(&c);
  return out;
}

/// Random schema-valid dense targets for one clip.
inline ClipTarget random_target(Rng& rng, int frames, const LabelSchema& s, double weight = 1.0) {
  const EventVocab vocab(s);
  ClipTarget t;
  t.coarse = IndexVector::Zero(frames);
  t.fine = Matrix::Zero(frames, s.num_classes());
  t.weight = weight;
  for (int f = 0; f < frames; ++f)
    if (rng.uniform() < 0.4) {
      t.coarse[f] = 1;
      t.fine.row(f) = vocab.at(static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.size())))).transpose();
    }
  return t;
}

struct GradCheck {
  double stage1 = 0.0;
  double distill = 0.0;
  double awd = 0.0;
};

/// Worst relative errors of the three training objectives over `configs` random tiny problems.
inline GradCheck check_objective_gradients(int configs, std::uint64_t seed) {
  GradCheck worst;
  Rng rng(seed);
  for (int trial = 0; trial < configs; ++trial) {
    {
      // L_lab on a labeled batch plus lambda(e) L_unlab on an unlabeled batch with frozen pseudo-labels.
      TinyProblem p = tiny_problem(rng, {"pose"});
      const auto clips = pointers(p.clips);
      const std::vector<const ClipInputs*> lab(clips.begin(), clips.begin() + 1);
      const std::vector<const ClipInputs*> unl(clips.begin() + 1, clips.end());
      std::vector<ClipTarget> lab_t{random_target(rng, lab[0]->frames(), p.schema)};
      std::vector<ClipTarget> unl_t;
      const BatchForward fwd = forward_batch(p.model, unl);
      for (const auto& pass : fwd.passes) {
        PseudoLabels pl = make_pseudo_labels(pass.logits.coarse, pass.logits.fine, p.schema);
        unl_t.push_back({pl.coarse, pl.fine, 1.0, true});
      }
      const int epoch = 60;
      const AnnealSchedule sched;
      auto f = [&](const ModelState& m) {
        return stage1_batch_loss(m, lab, lab_t, Pool::labeled, epoch, sched, 5.0, nullptr) +
               stage1_batch_loss(m, unl, unl_t, Pool::unlabeled, epoch, sched, 5.0, nullptr);
      };
      Vector g = Vector::Zero(p.model.params.size());
      stage1_batch_loss(p.model, lab, lab_t, Pool::labeled, epoch, sched, 5.0, &g);
      stage1_batch_loss(p.model, unl, unl_t, Pool::unlabeled, epoch, sched, 5.0, &g);
      worst.stage1 = std::max(worst.stage1, relative_error(g, numeric_gradient(f, p.model)));
    }
    {
      TinyProblem p = tiny_problem(rng, {"rgb"}, false);
      std::vector<const Matrix*> feats;
      std::vector<Embeddings> teacher;
      for (const auto& c : p.clips) {
        feats.push_back(&c.rgb);
        teacher.push_back(random_matrix(rng, c.rgb.rows(), p.model.arch.embed_dim()));
      }
      auto f = [&](const ModelState& m) { return distill_batch_loss(m, 0, feats, teacher, nullptr); };
      Vector g = Vector::Zero(p.model.params.size());
      distill_batch_loss(p.model, 0, feats, teacher, &g);
      worst.distill = std::max(worst.distill, relative_error(g, numeric_gradient(f, p.model)));
    }
    {
      TinyProblem p = tiny_problem(rng, {"rgb", "flow"});
      const auto clips = pointers(p.clips);
      std::vector<ClipTarget> targets;
      for (const auto* c : clips) {
        ClipTarget t = random_target(rng, c->frames(), p.schema, rng.uniform());
        t.include_fine = rng.uniform() < 0.8;
        targets.push_back(std::move(t));
      }
      auto f = [&](const ModelState& m) { return awd_batch_loss(m, clips, targets, 5.0, nullptr); };
      Vector g = Vector::Zero(p.model.params.size());
      awd_batch_loss(p.model, clips, targets, 5.0, &g);
      worst.awd = std::max(worst.awd, relative_error(g, numeric_gradient(f, p.model)));
    }
  }
  return worst;
}

}  // namespace pes::testing
