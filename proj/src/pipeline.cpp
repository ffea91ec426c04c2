#include "pes/pipeline.hpp"

#include "pes/checkpoint.hpp"
#include "pes/error.hpp"
#include "pes/pseudo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace pes {

using nlohmann::json;

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::labeled_only: return "labeled_only";
    case Strategy::joint: return "joint";
    case Strategy::delayed: return "delayed";
    case Strategy::best_continuation: return "best_continuation";
  }
  return "unknown";
}

Strategy strategy_from_string(std::string_view name) {
  for (Strategy s : {Strategy::labeled_only, Strategy::joint, Strategy::delayed, Strategy::best_continuation})
    if (to_string(s) == name) return s;
  fail(ErrorCategory::config, "unknown strategy '" + std::string(name) + "'");
}

void RunConfig::validate() const {
  gen.validate();
  anneal.validate();
  require(train_pool > 0 && val_clips > 0 && test_clips > 0, ErrorCategory::config, "pool sizes must be positive");
  require(k > 0 && k <= train_pool, ErrorCategory::config, "k must lie in [1, train_pool]");
  require(stage1_epochs >= 1 && stage2_epochs >= 1 && stage3_epochs >= 1 && awd_epochs >= 1, ErrorCategory::config,
          "epoch budgets must be at least 1");
  if (strategy == Strategy::delayed || strategy == Strategy::best_continuation)
    require(anneal.start >= 1 && anneal.start <= stage1_epochs, ErrorCategory::config,
            "delayed strategies need 1 <= anneal.start <= stage1_epochs");
  require(optim.lr > 0 && optim.batch_size > 0 && optim.batches_per_epoch >= 0 && optim.warmup >= 0,
          ErrorCategory::config, "invalid optimizer settings");
  require(optim.warmup < std::min({stage1_epochs, stage2_epochs, stage3_epochs, awd_epochs}), ErrorCategory::config,
          "warm-up must be shorter than every stage");
  require(model.hidden > 0 && model.recurrent > 0 && model.embed > 0, ErrorCategory::config,
          "model widths must be positive");
  require(fg_weight > 0, ErrorCategory::config, "fg_weight must be positive");
  require(knn_k > 0 && awd_refresh >= 0, ErrorCategory::config, "invalid AWD settings");
  require(eval_delta >= 0 && decode.window >= 0, ErrorCategory::config, "invalid evaluation settings");
  require(!seeds.empty(), ErrorCategory::config, "seed list is empty");
}

int RunConfig::batches_per_epoch() const {
  if (optim.batches_per_epoch > 0) return optim.batches_per_epoch;
  return 2 * ((k + optim.batch_size - 1) / optim.batch_size);
}

// ---------------------------------------------------------------------------
// Config serialization

namespace {

template <typename T>
void take(const json& j, const char* key, T& field, std::set<std::string>& seen) {
  if (!j.contains(key)) return;
  seen.insert(key);
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCategory::config, std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!seen.count(it.key())) fail(ErrorCategory::config, "unknown config key '" + where + it.key() + "'");
}

json gen_to_json(const GenConfig& g) {
  return {{"frames", g.frames},
          {"persons", g.persons},
          {"joints", g.joints},
          {"rgb_dim", g.rgb_dim},
          {"flow_dim", g.flow_dim},
          {"latent_dim", g.latent_dim},
          {"num_clips", g.num_clips},
          {"event_rate", g.event_rate},
          {"min_gap", g.min_gap},
          {"motion_halfwidth", g.motion_halfwidth},
          {"event_amplitude", g.event_amplitude},
          {"amplitude_jitter", g.amplitude_jitter},
          {"background_scale", g.background_scale},
          {"style_scale", g.style_scale},
          {"pose_noise", g.pose_noise},
          {"flow_noise", g.flow_noise},
          {"rgb_noise", g.rgb_noise},
          {"videos", g.videos},
          {"context", g.context},
          {"world_seed", g.world_seed}};
}

void gen_from_json(const json& j, GenConfig& g) {
  std::set<std::string> seen;
  take(j, "frames", g.frames, seen);
  take(j, "persons", g.persons, seen);
  take(j, "joints", g.joints, seen);
  take(j, "rgb_dim", g.rgb_dim, seen);
  take(j, "flow_dim", g.flow_dim, seen);
  take(j, "latent_dim", g.latent_dim, seen);
  take(j, "num_clips", g.num_clips, seen);
  take(j, "event_rate", g.event_rate, seen);
  take(j, "min_gap", g.min_gap, seen);
  take(j, "motion_halfwidth", g.motion_halfwidth, seen);
  take(j, "event_amplitude", g.event_amplitude, seen);
  take(j, "amplitude_jitter", g.amplitude_jitter, seen);
  take(j, "background_scale", g.background_scale, seen);
  take(j, "style_scale", g.style_scale, seen);
  take(j, "pose_noise", g.pose_noise, seen);
  take(j, "flow_noise", g.flow_noise, seen);
  take(j, "rgb_noise", g.rgb_noise, seen);
  take(j, "videos", g.videos, seen);
  take(j, "context", g.context, seen);
  take(j, "world_seed", g.world_seed, seen);
  reject_unknown(j, seen, "gen.");
}

}  // namespace

json to_json(const RunConfig& c) {
  return {{"gen", gen_to_json(c.gen)},
          {"train_pool", c.train_pool},
          {"val_clips", c.val_clips},
          {"test_clips", c.test_clips},
          {"k", c.k},
          {"seed", c.seed},
          {"seeds", c.seeds},
          {"stage1_epochs", c.stage1_epochs},
          {"stage2_epochs", c.stage2_epochs},
          {"stage3_epochs", c.stage3_epochs},
          {"strategy", std::string(to_string(c.strategy))},
          {"anneal", {{"start", c.anneal.start}, {"end", c.anneal.end}, {"target", c.anneal.target}}},
          {"model", {{"hidden", c.model.hidden}, {"recurrent", c.model.recurrent}, {"embed", c.model.embed}}},
          {"optim",
           {{"lr", c.optim.lr},
            {"warmup", c.optim.warmup},
            {"batch_size", c.optim.batch_size},
            {"batches_per_epoch", c.optim.batches_per_epoch},
            {"beta1", c.optim.adam.beta1},
            {"beta2", c.optim.adam.beta2},
            {"eps", c.optim.adam.eps},
            {"weight_decay", c.optim.adam.weight_decay}}},
          {"fg_weight", c.fg_weight},
          {"knn_k", c.knn_k},
          {"awd_refresh", c.awd_refresh},
          {"awd_epochs", c.awd_epochs},
          {"eval_delta", c.eval_delta},
          {"decode", {{"threshold", c.decode.threshold}, {"window", c.decode.window}}}};
}

RunConfig config_from_json(const json& j, RunConfig c) {
  require(j.is_object(), ErrorCategory::config, "config must be a JSON object");
  std::set<std::string> seen;
  if (j.contains("gen")) {
    seen.insert("gen");
    gen_from_json(j.at("gen"), c.gen);
  }
  take(j, "train_pool", c.train_pool, seen);
  take(j, "val_clips", c.val_clips, seen);
  take(j, "test_clips", c.test_clips, seen);
  take(j, "k", c.k, seen);
  take(j, "seed", c.seed, seen);
  take(j, "seeds", c.seeds, seen);
  take(j, "stage1_epochs", c.stage1_epochs, seen);
  take(j, "stage2_epochs", c.stage2_epochs, seen);
  take(j, "stage3_epochs", c.stage3_epochs, seen);
  if (j.contains("strategy")) {
    seen.insert("strategy");
    c.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  }
  if (j.contains("anneal")) {
    seen.insert("anneal");
    std::set<std::string> s;
    const auto& a = j.at("anneal");
    take(a, "start", c.anneal.start, s);
    take(a, "end", c.anneal.end, s);
    take(a, "target", c.anneal.target, s);
    reject_unknown(a, s, "anneal.");
  }
  if (j.contains("model")) {
    seen.insert("model");
    std::set<std::string> s;
    const auto& m = j.at("model");
    take(m, "hidden", c.model.hidden, s);
    take(m, "recurrent", c.model.recurrent, s);
    take(m, "embed", c.model.embed, s);
    reject_unknown(m, s, "model.");
  }
  if (j.contains("optim")) {
    seen.insert("optim");
    std::set<std::string> s;
    const auto& o = j.at("optim");
    take(o, "lr", c.optim.lr, s);
    take(o, "warmup", c.optim.warmup, s);
    take(o, "batch_size", c.optim.batch_size, s);
    take(o, "batches_per_epoch", c.optim.batches_per_epoch, s);
    take(o, "beta1", c.optim.adam.beta1, s);
    take(o, "beta2", c.optim.adam.beta2, s);
    take(o, "eps", c.optim.adam.eps, s);
    take(o, "weight_decay", c.optim.adam.weight_decay, s);
    reject_unknown(o, s, "optim.");
  }
  take(j, "fg_weight", c.fg_weight, seen);
  take(j, "knn_k", c.knn_k, seen);
  take(j, "awd_refresh", c.awd_refresh, seen);
  take(j, "awd_epochs", c.awd_epochs, seen);
  take(j, "eval_delta", c.eval_delta, seen);
  if (j.contains("decode")) {
    seen.insert("decode");
    std::set<std::string> s;
    const auto& d = j.at("decode");
    take(d, "threshold", c.decode.threshold, s);
    take(d, "window", c.decode.window, s);
    reject_unknown(d, s, "decode.");
  }
  reject_unknown(j, seen, "");
  return c;
}

std::uint64_t config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : to_json(cfg).dump()) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

DatasetSplit make_benchmark(const RunConfig& cfg, const LabelSchema& schema, std::uint64_t seed) {
  GenConfig g = cfg.gen;
  g.context = 0;
  g.num_clips = cfg.train_pool;
  auto pool = generate_dataset(g, schema, Rng::derive(seed, 1));
  g.num_clips = cfg.val_clips;
  auto val = generate_dataset(g, schema, Rng::derive(seed, 2));
  g.context = 1;
  g.num_clips = cfg.test_clips;
  auto test = generate_dataset(g, schema, Rng::derive(seed, 3));
  DatasetSplit split = split_k_clip(std::move(pool), cfg.k, Rng::derive(seed, 4));
  split.set_val(std::move(val));
  split.set_test(std::move(test));
  return split;
}

// ---------------------------------------------------------------------------
// Batch objectives

std::vector<const Matrix*> select_inputs(const ModelArch& arch, const ClipInputs& in) {
  std::vector<const Matrix*> out;
  for (const auto& e : arch.encoders) {
    if (e.modality == "pose")
      out.push_back(&in.pose);
    else if (e.modality == "rgb")
      out.push_back(&in.rgb);
    else if (e.modality == "flow")
      out.push_back(&in.flow);
    else
      fail(ErrorCategory::config, "unknown modality '" + e.modality + "'");
  }
  return out;
}

BatchForward forward_batch(const ModelState& m, const std::vector<const ClipInputs*>& clips) {
  BatchForward out;
  out.passes.reserve(clips.size());
  for (const ClipInputs* c : clips) out.passes.push_back(forward_model(m, select_inputs(m.arch, *c)));
  return out;
}

double detector_batch_loss(const ModelState& m, const BatchForward& fwd, const std::vector<ClipTarget>& targets,
                           double fg_weight, Reduction reduction, Vector* grad) {
  require(fwd.passes.size() == targets.size() && !targets.empty(), ErrorCategory::shape,
          "one target per clip required");
  const std::size_t b = targets.size();
  const int c = m.arch.num_classes;

  if (reduction == Reduction::stacked) {
    Eigen::Index rows = 0;
    for (const auto& p : fwd.passes) rows += p.logits.coarse.rows();
    Matrix coarse(rows, 2), fine(rows, c), fine_y(rows, c);
    IndexVector coarse_y(rows);
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < b; ++i) {
      const auto& lg = fwd.passes[i].logits;
      const Eigen::Index t = lg.coarse.rows();
      require(targets[i].coarse.size() == t && targets[i].fine.rows() == t && targets[i].fine.cols() == c,
              ErrorCategory::shape, "target shape does not match predictions");
      coarse.middleRows(r, t) = lg.coarse;
      fine.middleRows(r, t) = lg.fine;
      coarse_y.segment(r, t) = targets[i].coarse;
      fine_y.middleRows(r, t) = targets[i].fine;
      r += t;
    }
    const double w = targets.front().weight;
    const bool with_fine = targets.front().include_fine;
    const auto cl = coarse_loss<double>(coarse, coarse_y, fg_weight);
    double value = cl.value;
    LossResult<double> fl;
    if (with_fine) {
      fl = fine_loss<double>(fine, fine_y);
      value += fl.value;
    }
    if (grad && w != 0.0) {
      r = 0;
      for (std::size_t i = 0; i < b; ++i) {
        const Eigen::Index t = fwd.passes[i].logits.coarse.rows();
        Logits g;
        g.coarse = w * cl.grad.middleRows(r, t);
        g.fine = with_fine ? Matrix(w * fl.grad.middleRows(r, t)) : Matrix::Zero(t, c);
        backward_model(m, fwd.passes[i], g, *grad);
        r += t;
      }
    }
    return w * value;
  }

  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& lg = fwd.passes[i].logits;
    const auto& tg = targets[i];
    const auto cl = coarse_loss<double>(lg.coarse, tg.coarse, fg_weight);
    double value = cl.value;
    LossResult<double> fl;
    if (tg.include_fine) {
      fl = fine_loss<double>(lg.fine, tg.fine);
      value += fl.value;
    }
    const double scale = tg.weight / static_cast<double>(b);
    total += scale * value;
    if (grad && scale != 0.0) {
      Logits g;
      g.coarse = scale * cl.grad;
      g.fine = tg.include_fine ? Matrix(scale * fl.grad) : Matrix::Zero(lg.fine.rows(), c);
      backward_model(m, fwd.passes[i], g, *grad);
    }
  }
  return total;
}

double stage1_batch_loss(const ModelState& m, const std::vector<const ClipInputs*>& clips,
                         const std::vector<ClipTarget>& targets, Pool origin, int epoch, const AnnealSchedule& s,
                         double fg_weight, Vector* grad) {
  std::vector<ClipTarget> weighted = targets;
  const double w = origin == Pool::labeled ? 1.0 : lambda_at(epoch, s);
  for (auto& t : weighted) t.weight = w;
  const BatchForward fwd = forward_batch(m, clips);
  // Already weighted: L_lab for a labeled batch, lambda(e) * L_unlab for an unlabeled one.
  return detector_batch_loss(m, fwd, weighted, fg_weight, Reduction::stacked, grad);
}

double distill_batch_loss(const ModelState& student, std::size_t encoder, const std::vector<const Matrix*>& features,
                          const std::vector<Embeddings>& teacher, Vector* grad) {
  require(features.size() == teacher.size() && !features.empty(), ErrorCategory::shape,
          "one teacher embedding per clip required");
  const double scale = 1.0 / static_cast<double>(features.size());
  double total = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    EncoderTape tape;
    const Embeddings e = forward_encoder(student, encoder, *features[i], grad ? &tape : nullptr);
    const auto loss = distill_loss<double>(teacher[i], e);
    total += scale * loss.value;
    if (grad) backward_encoder(student, encoder, tape, scale * loss.grad, *grad);
  }
  return total;
}

double awd_batch_loss(const ModelState& student, const std::vector<const ClipInputs*>& clips,
                      const std::vector<ClipTarget>& teacher_targets, double fg_weight, Vector* grad) {
  const BatchForward fwd = forward_batch(student, clips);
  return detector_batch_loss(student, fwd, teacher_targets, fg_weight, Reduction::per_clip, grad);
}

// ---------------------------------------------------------------------------
// Training loops

ModelArch detector_arch(const RunConfig& cfg, const std::vector<std::string>& modalities, int num_classes) {
  ModelArch arch;
  for (const auto& m : modalities) {
    EncoderArch e;
    e.modality = m;
    if (m == "pose")
      e.input_dim = cfg.gen.pose_dim();
    else if (m == "rgb")
      e.input_dim = cfg.gen.rgb_dim;
    else if (m == "flow")
      e.input_dim = cfg.gen.flow_dim;
    else
      fail(ErrorCategory::config, "unknown modality '" + m + "'");
    e.hidden = cfg.model.hidden;
    e.recurrent = cfg.model.recurrent;
    e.embed = cfg.model.embed;
    arch.encoders.push_back(e);
  }
  arch.num_classes = num_classes;
  return arch;
}

ClipPredictor predictor_for(const ModelState& m) {
  return [&m](const ClipInputs& in) { return forward_model(m, select_inputs(m.arch, in)).logits; };
}

namespace {

std::uint64_t stage_tag(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

enum class UnlabeledMode { none, self_pseudo, awd };

struct DetectorTrainSpec {
  std::string stage;
  ModelState init;
  int epochs = 1;
  Strategy strategy = Strategy::labeled_only;
  UnlabeledMode mode = UnlabeledMode::none;
  const Predictor* teacher = nullptr;
};

struct ValResult {
  double edit = 0.0;
  double loss = 0.0;
};

ValResult validate_model(const ModelState& m, const std::vector<ClipSample>& val, const StageContext& ctx,
                         const EventVocab& vocab) {
  ValResult out;
  for (const auto& clip : val) {
    const Logits lg = forward_model(m, select_inputs(m.arch, clip.inputs)).logits;
    out.loss += detector_loss<double>(lg.coarse, lg.fine, clip.labels.coarse, clip.labels.fine, ctx.cfg.fg_weight).value;
    const EventSequence pred =
        decode_events(coarse_foreground_prob(lg.coarse), lg.fine, ctx.schema, vocab, ctx.cfg.decode);
    out.edit += edit_score(pred, clip.labels.events);
  }
  out.loss /= static_cast<double>(val.size());
  out.edit /= static_cast<double>(val.size());
  return out;
}

void save_best(const StageContext& ctx, const ModelState& m, RunRecord& rec, const std::string& name) {
  if (!ctx.out_dir) return;
  std::filesystem::create_directories(*ctx.out_dir);
  const auto path = *ctx.out_dir / (name + ".ckpt");
  save_checkpoint(path, m, {ctx.schema.hash(), rec.stage, rec.best_epoch, rec.best_val});
  rec.best_checkpoint = path.filename().string();
}

StageResult train_detector(const StageContext& ctx, const DatasetSplit& split, DetectorTrainSpec spec,
                           std::uint64_t seed) {
  const RunConfig& cfg = ctx.cfg;
  require(split.size(Pool::labeled) > 0, ErrorCategory::argument, "labeled set is empty");
  require(split.size(Pool::val) > 0, ErrorCategory::argument, "validation set is empty");
  const EventVocab vocab(ctx.schema);
  const auto& val = split.eval_clips(Pool::val);
  const bool staged = spec.strategy == Strategy::delayed || spec.strategy == Strategy::best_continuation;
  if (staged)
    require(cfg.anneal.start >= 1 && cfg.anneal.start <= spec.epochs, ErrorCategory::config,
            "delayed strategies need 1 <= anneal.start <= epochs");

  // Same stream for every strategy, so labeled-only prefixes coincide.
  Rng rng(Rng::derive(seed, stage_tag(spec.stage)));
  ModelState model = std::move(spec.init);
  model.reset_optimizer();

  RunRecord rec;
  rec.stage = spec.stage;
  ModelState best = model;
  double best_edit = -std::numeric_limits<double>::infinity();
  std::optional<ModelState> labeled_best;
  double labeled_best_edit = -std::numeric_limits<double>::infinity();

  WeightMapping mapping;
  int mapping_built_at = -1;
  std::vector<std::optional<Logits>> teacher_cache(split.size(Pool::unlabeled));
  ClipPredictor student_pred = predictor_for(model);

  const int bpe = cfg.batches_per_epoch();
  for (int e = 0; e < spec.epochs; ++e) {
    const bool mixed = spec.mode != UnlabeledMode::none &&
                       (spec.strategy == Strategy::joint || (staged && e >= cfg.anneal.start));
    if (staged && e == cfg.anneal.start) {
      if (spec.strategy == Strategy::best_continuation && labeled_best) model = *labeled_best;
      model.reset_optimizer();
      rec.params_at_transition = model.params;
    }
    if (mixed && spec.mode == UnlabeledMode::awd &&
        (mapping_built_at < 0 || (cfg.awd_refresh > 0 && e - mapping_built_at >= cfg.awd_refresh))) {
      mapping = build_mapping(val, *spec.teacher, student_pred, ctx.schema, cfg.knn_k);
      mapping_built_at = e;
    }

    EpochLog log;
    log.epoch = e;
    log.lr = lr_at(e, cfg.optim.lr, cfg.optim.warmup, spec.epochs);
    log.lambda = spec.mode == UnlabeledMode::self_pseudo ? lambda_at(e, cfg.anneal) : 0.0;
    // Mixed epochs keep the labeled budget and add about as many unlabeled batches on top.
    const int batches = mixed ? 2 * bpe : bpe;
    double loss_sum = 0.0;
    for (int bi = 0; bi < batches; ++bi) {
      const Batch batch = sample_batch(split, mixed ? Phase::mixed : Phase::labeled_only, cfg.optim.batch_size, rng);
      std::vector<const ClipInputs*> clips;
      for (std::size_t i : batch.indices) clips.push_back(&split.inputs(batch.origin, i));
      const BatchForward fwd = forward_batch(model, clips);
      std::vector<ClipTarget> targets;
      Reduction reduction = Reduction::stacked;

      if (batch.origin == Pool::labeled) {
        ++log.labeled_batches;
        for (std::size_t i : batch.indices) {
          const ClipLabels& y = split.labels(Pool::labeled, i);
          targets.push_back({y.coarse, y.fine, 1.0, true});
        }
      } else if (spec.mode == UnlabeledMode::self_pseudo) {
        ++log.unlabeled_batches;
        for (const auto& p : fwd.passes) {
          PseudoLabels pl = make_pseudo_labels(p.logits.coarse, p.logits.fine, ctx.schema, e);
          targets.push_back({std::move(pl.coarse), std::move(pl.fine), log.lambda, true});
        }
      } else {
        ++log.unlabeled_batches;
        reduction = Reduction::per_clip;
        for (std::size_t bi2 = 0; bi2 < batch.indices.size(); ++bi2) {
          const std::size_t ci = batch.indices[bi2];
          auto& cached = teacher_cache[ci];
          if (!cached) cached = (*spec.teacher)(*clips[bi2]);
          PseudoLabels pl = make_pseudo_labels(cached->coarse, cached->fine, ctx.schema, e);
          std::vector<int> frames;
          for (Eigen::Index t = 0; t < pl.coarse.size(); ++t)
            if (pl.coarse[t] == 1) frames.push_back(static_cast<int>(t));
          if (frames.empty()) {
            targets.push_back({std::move(pl.coarse), std::move(pl.fine), 1.0, false});
            continue;
          }
          const double cs = *predicted_clip_confidence(fwd.passes[bi2].logits, frames, ctx.schema);
          const double ct = *predicted_clip_confidence(*cached, frames, ctx.schema);
          const double w = knn_weight(mapping, cs, ct);
          rec.awd_weights.push_back(w);
          targets.push_back({std::move(pl.coarse), std::move(pl.fine), w, true});
        }
      }

      Vector grad = Vector::Zero(model.params.size());
      loss_sum += detector_batch_loss(model, fwd, targets, cfg.fg_weight, reduction, &grad);
      opt_step(model, grad, log.lr, cfg.optim.adam);
    }
    log.train_loss = loss_sum / batches;

    const ValResult v = validate_model(model, val, ctx, vocab);
    log.val_edit = v.edit;
    log.val_loss = v.loss;
    rec.epochs.push_back(log);
    if (v.edit > best_edit) {
      best_edit = v.edit;
      best = model;
      rec.best_epoch = e;
    }
    if (staged && e < cfg.anneal.start && v.edit > labeled_best_edit) {
      labeled_best_edit = v.edit;
      labeled_best = model;
    }
  }
  if (labeled_best) rec.labeled_phase_best = labeled_best->params;
  rec.best_val = best_edit;
  rec.test = evaluate_split(predictor_for(best), split.eval_clips(Pool::test), ctx.schema, cfg.eval_delta,
                            cfg.decode);
  save_best(ctx, best, rec, spec.stage);
  return {std::move(best), std::move(rec)};
}

void copy_encoder(const ModelState& src, std::size_t src_index, ModelState& dst, std::size_t dst_index) {
  const auto& a = src.arch.encoders.at(src_index);
  const auto& b = dst.arch.encoders.at(dst_index);
  require(a.input_dim == b.input_dim && a.hidden == b.hidden && a.recurrent == b.recurrent && a.embed == b.embed,
          ErrorCategory::shape, "encoder shapes differ");
  dst.params.segment(dst.arch.encoder_offset(dst_index), b.param_count()) =
      src.params.segment(src.arch.encoder_offset(src_index), a.param_count());
}

}  // namespace

StageResult run_stage1(const StageContext& ctx, const DatasetSplit& split, std::uint64_t train_seed) {
  return run_stage1(ctx, split, train_seed, ctx.cfg.strategy);
}

StageResult run_stage1(const StageContext& ctx, const DatasetSplit& split, std::uint64_t train_seed,
                       Strategy strategy) {
  DetectorTrainSpec spec;
  spec.stage = "stage1";
  spec.init = init_model(detector_arch(ctx.cfg, {"pose"}, ctx.schema.num_classes()), Rng::derive(train_seed, 11));
  spec.epochs = ctx.cfg.stage1_epochs;
  spec.strategy = strategy;
  spec.mode = strategy == Strategy::labeled_only ? UnlabeledMode::none : UnlabeledMode::self_pseudo;
  return train_detector(ctx, split, std::move(spec), train_seed);
}

Stage2Result run_stage2(const StageContext& ctx, const ModelState& teacher, const DatasetSplit& split,
                        std::uint64_t train_seed) {
  const RunConfig& cfg = ctx.cfg;
  require(!teacher.arch.encoders.empty() && teacher.arch.encoders.front().modality == "pose", ErrorCategory::state,
          "stage II needs a trained skeleton teacher");
  const Vector teacher_before = teacher.params;

  // Feature-only view of the training pool: labeled and unlabeled clips, no labels.
  std::vector<const ClipInputs*> train;
  for (Pool p : {Pool::labeled, Pool::unlabeled})
    for (std::size_t i = 0; i < split.size(p); ++i) train.push_back(&split.inputs(p, i));
  std::vector<const ClipInputs*> val;
  for (std::size_t i = 0; i < split.size(Pool::val); ++i) val.push_back(&split.inputs(Pool::val, i));
  require(!train.empty() && !val.empty(), ErrorCategory::argument, "stage II needs training and validation clips");

  std::vector<Embeddings> train_target, val_target;
  for (const auto* c : train) train_target.push_back(forward_teacher(teacher, c->pose));
  for (const auto* c : val) val_target.push_back(forward_teacher(teacher, c->pose));

  Stage2Result out;
  out.record.stage = "stage2";
  double best_total = 0.0;
  for (const std::string modality : {"rgb", "flow"}) {
    ModelState student = init_model(detector_arch(cfg, {modality}, 0), Rng::derive(train_seed, stage_tag(modality)));
    Rng rng(Rng::derive(train_seed, stage_tag("stage2-" + modality)));
    ModelState best = student;
    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t bs = static_cast<std::size_t>(cfg.optim.batch_size);
    auto feature = [&](const ClipInputs* c) { return modality == "rgb" ? &c->rgb : &c->flow; };

    for (int e = 0; e < cfg.stage2_epochs; ++e) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      const double lr = lr_at(e, cfg.optim.lr, cfg.optim.warmup, cfg.stage2_epochs);
      double loss_sum = 0.0;
      int batches = 0;
      for (std::size_t s = 0; s < order.size(); s += bs) {
        std::vector<const Matrix*> feats;
        std::vector<Embeddings> targets;
        for (std::size_t j = s; j < std::min(order.size(), s + bs); ++j) {
          feats.push_back(feature(train[order[j]]));
          targets.push_back(train_target[order[j]]);
        }
        Vector grad = Vector::Zero(student.params.size());
        loss_sum += distill_batch_loss(student, 0, feats, targets, &grad);
        opt_step(student, grad, lr, cfg.optim.adam);
        ++batches;
      }
      std::vector<const Matrix*> vf;
      for (const auto* c : val) vf.push_back(feature(c));
      const double vloss = distill_batch_loss(student, 0, vf, val_target, nullptr);
      EpochLog log;
      log.epoch = e;
      log.lr = lr;
      log.train_loss = loss_sum / batches;
      log.val_loss = vloss;
      out.record.epochs.push_back(log);
      if (vloss < best_loss) {
        best_loss = vloss;
        best = student;
      }
    }
    best_total += best_loss;
    if (ctx.out_dir) {
      std::filesystem::create_directories(*ctx.out_dir);
      save_checkpoint(*ctx.out_dir / ("student_" + modality + ".ckpt"), best,
                      {ctx.schema.hash(), "stage2-" + modality, cfg.stage2_epochs - 1, best_loss});
    }
    (modality == "rgb" ? out.rgb : out.flow) = std::move(best);
  }
  out.record.best_val = best_total / 2.0;
  require(teacher.params == teacher_before, ErrorCategory::state, "teacher parameters changed during stage II");
  return out;
}

StageResult run_stage3(const StageContext& ctx, const ModelState& rgb, const ModelState& flow,
                       const DatasetSplit& split, std::uint64_t train_seed) {
  DetectorTrainSpec spec;
  spec.stage = "stage3";
  spec.init =
      init_model(detector_arch(ctx.cfg, {"rgb", "flow"}, ctx.schema.num_classes()), Rng::derive(train_seed, 33));
  copy_encoder(rgb, 0, spec.init, 0);
  copy_encoder(flow, 0, spec.init, 1);
  spec.epochs = ctx.cfg.stage3_epochs;
  spec.strategy = Strategy::labeled_only;
  spec.mode = UnlabeledMode::none;
  return train_detector(ctx, split, std::move(spec), train_seed);
}

StageResult run_single_modality(const StageContext& ctx, const std::string& modality, const DatasetSplit& split,
                                std::uint64_t train_seed) {
  DetectorTrainSpec spec;
  spec.stage = modality + "_only";
  spec.init = init_model(detector_arch(ctx.cfg, {modality}, ctx.schema.num_classes()), Rng::derive(train_seed, 44));
  spec.epochs = ctx.cfg.stage1_epochs;
  spec.strategy = Strategy::labeled_only;
  return train_detector(ctx, split, std::move(spec), train_seed);
}

StageResult run_awd(const StageContext& ctx, const ModelState& teacher, const DatasetSplit& split,
                    std::uint64_t train_seed, const Predictor* teacher_override) {
  require(split.size(Pool::val) > 0, ErrorCategory::argument, "AWD needs a validation set to build its mapping");
  Predictor model_teacher = [&teacher](const ClipInputs& in) {
    return forward_model(teacher, select_inputs(teacher.arch, in)).logits;
  };
  DetectorTrainSpec spec;
  spec.stage = "awd";
  spec.init = init_model(detector_arch(ctx.cfg, {"rgb"}, ctx.schema.num_classes()), Rng::derive(train_seed, 55));
  spec.epochs = ctx.cfg.awd_epochs;
  spec.strategy = Strategy::delayed;
  spec.mode = UnlabeledMode::awd;
  spec.teacher = teacher_override ? teacher_override : &model_teacher;
  StageResult r = train_detector(ctx, split, std::move(spec), train_seed);
  if (ctx.out_dir) {
    ModelState final_student = r.model;
    save_mapping(*ctx.out_dir / "awd_mapping.txt",
                 build_mapping(split.eval_clips(Pool::val), *(teacher_override ? teacher_override : &model_teacher),
                               predictor_for(final_student), ctx.schema, ctx.cfg.knn_k));
  }
  return r;
}

// ---------------------------------------------------------------------------

double median(std::vector<double> v) {
  require(!v.empty(), ErrorCategory::argument, "median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
  require(!v.empty(), ErrorCategory::argument, "mean of an empty list");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
  const double mu = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

AblationTable run_ablation(const RunConfig& cfg, const LabelSchema& schema, bool with_distillation) {
  cfg.validate();
  AblationTable table;
  table.seeds = cfg.seeds;
  std::vector<std::string> names = {"labeled_only", "joint", "delayed", "best_continuation"};
  if (with_distillation)
    for (const char* n : {"rgb_only", "awd", "md_fed", "amd_fed"}) names.push_back(n);
  for (const auto& n : names) table.rows.push_back({n, {}, {}, {}});
  auto row = [&](const std::string& n) -> AblationRow& {
    return *std::find_if(table.rows.begin(), table.rows.end(), [&](const AblationRow& r) { return r.name == n; });
  };
  auto add = [&](const std::string& n, const StageResult& r) {
    auto& rw = row(n);
    rw.val_edit.push_back(r.record.best_val);
    rw.test_edit.push_back(r.record.test->edit);
    rw.test_f1.push_back(r.record.test->f1_evt);
  };

  const StageContext ctx{cfg, schema, std::nullopt};
  for (std::uint64_t seed : cfg.seeds) {
    const DatasetSplit split = make_benchmark(cfg, schema, seed);
    std::optional<ModelState> labeled_teacher, continued_teacher;
    for (Strategy s : {Strategy::labeled_only, Strategy::joint, Strategy::delayed, Strategy::best_continuation}) {
      StageResult r = run_stage1(ctx, split, seed, s);
      add(std::string(to_string(s)), r);
      if (s == Strategy::labeled_only) labeled_teacher = std::move(r.model);
      if (s == Strategy::best_continuation) continued_teacher = std::move(r.model);
    }
    if (!with_distillation) continue;
    add("rgb_only", run_single_modality(ctx, "rgb", split, seed));
    add("awd", run_awd(ctx, *continued_teacher, split, seed));
    {
      const Stage2Result s2 = run_stage2(ctx, *labeled_teacher, split, seed);
      add("md_fed", run_stage3(ctx, s2.rgb, s2.flow, split, seed));
    }
    {
      const Stage2Result s2 = run_stage2(ctx, *continued_teacher, split, seed);
      add("amd_fed", run_stage3(ctx, s2.rgb, s2.flow, split, seed));
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Results serialization

json to_json(const EvalReport& r) {
  json per_class = json::array();
  for (const auto& [cls, c] : r.counts)
    per_class.push_back({{"class", cls}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"f1", r.per_class_f1.at(cls)}});
  return {{"edit", r.edit}, {"f1_evt", r.f1_evt}, {"delta", r.delta}, {"clips", r.clips}, {"per_class", per_class}};
}

json to_json(const RunRecord& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"lr", e.lr},
                      {"lambda", e.lambda},
                      {"train_loss", e.train_loss},
                      {"labeled_batches", e.labeled_batches},
                      {"unlabeled_batches", e.unlabeled_batches},
                      {"val_loss", e.val_loss},
                      {"val_edit", e.val_edit}});
  json j = {{"stage", r.stage},
            {"epochs", epochs},
            {"best_epoch", r.best_epoch},
            {"best_val", r.best_val},
            {"best_checkpoint", r.best_checkpoint}};
  if (r.test) j["test"] = to_json(*r.test);
  if (!r.awd_weights.empty()) {
    j["awd_weights"] = {{"count", r.awd_weights.size()},
                        {"median", median(r.awd_weights)},
                        {"mean", mean(r.awd_weights)}};
  }
  return j;
}

json to_json(const AblationTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    json row = {{"name", r.name}, {"val_edit", r.val_edit}, {"test_edit", r.test_edit}, {"test_f1", r.test_f1}};
    if (!r.test_edit.empty()) {
      row["val_edit_mean"] = mean(r.val_edit);
      row["val_edit_std"] = stddev(r.val_edit);
      row["test_edit_mean"] = mean(r.test_edit);
      row["test_edit_std"] = stddev(r.test_edit);
      row["test_edit_median"] = median(r.test_edit);
    }
    rows.push_back(std::move(row));
  }
  return {{"rows", rows}, {"seeds", t.seeds}};
}

}  // namespace pes
