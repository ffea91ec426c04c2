#include <doctest.h>

#include "pes/checkpoint.hpp"
#include "pes/error.hpp"
#include "pes/pipeline.hpp"

#include <filesystem>

using namespace pes;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.gen.frames = 16;
  c.train_pool = 16;
  c.val_clips = 6;
  c.test_clips = 6;
  c.k = 4;
  c.stage1_epochs = 8;
  c.stage2_epochs = 3;
  c.stage3_epochs = 3;
  c.awd_epochs = 6;
  c.anneal = {3, 6, 0.4};
  c.optim.batch_size = 2;
  c.optim.batches_per_epoch = 3;
  c.optim.warmup = 1;
  c.model = {4, 4, 4};
  c.seeds = {1, 2};
  return c;
}

struct Fixture {
  RunConfig cfg = tiny_config();
  const LabelSchema& schema = LabelSchema::tennis();
  DatasetSplit split = make_benchmark(cfg, schema, 5);
  StageContext ctx{cfg, schema, std::nullopt};
};

int unlabeled_before(const RunRecord& r, int epoch) {
  int n = 0;
  for (const auto& e : r.epochs)
    if (e.epoch < epoch) n += e.unlabeled_batches;
  return n;
}

}  // namespace

TEST_CASE("config json round trip and errors") {
  RunConfig c = tiny_config();
  c.strategy = Strategy::joint;
  c.decode.window = 3;
  const RunConfig back = config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(RunConfig{}) != config_hash(c));

  const RunConfig over = config_from_json(nlohmann::json{{"k", 7}, {"optim", {{"lr", 0.5}}}}, c);
  CHECK(over.k == 7);
  CHECK(over.optim.lr == 0.5);
  CHECK(over.optim.batch_size == c.optim.batch_size);

  auto category = [](auto&& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.category();
    }
    return ErrorCategory::state;
  };
  CHECK(category([] { config_from_json(nlohmann::json{{"no_such_key", 1}}); }) == ErrorCategory::config);
  CHECK(category([] { config_from_json(nlohmann::json{{"k", "many"}}); }) == ErrorCategory::config);
  CHECK(category([] { strategy_from_string("sometimes"); }) == ErrorCategory::config);
  RunConfig bad = tiny_config();
  bad.anneal.start = 20;
  CHECK(category([&] { bad.validate(); }) == ErrorCategory::config);
  for (Strategy s : {Strategy::labeled_only, Strategy::joint, Strategy::delayed, Strategy::best_continuation})
    CHECK(strategy_from_string(to_string(s)) == s);
}

TEST_CASE("stage I strategy semantics") {
  Fixture f;
  const StageResult joint = run_stage1(f.ctx, f.split, 3, Strategy::joint);
  const StageResult delayed = run_stage1(f.ctx, f.split, 3, Strategy::delayed);
  const StageResult best = run_stage1(f.ctx, f.split, 3, Strategy::best_continuation);
  const StageResult plain = run_stage1(f.ctx, f.split, 3, Strategy::labeled_only);
  const int start = f.cfg.anneal.start;

  CHECK(unlabeled_before(joint.record, start) > 0);
  CHECK(unlabeled_before(delayed.record, start) == 0);
  CHECK(unlabeled_before(best.record, start) == 0);
  CHECK(unlabeled_before(plain.record, 1000) == 0);
  CHECK(unlabeled_before(delayed.record, 1000) > 0);

  // Identical labeled-only prefixes.
  for (int e = 0; e < start; ++e) {
    CHECK(delayed.record.epochs[e].val_edit == best.record.epochs[e].val_edit);
    CHECK(delayed.record.epochs[e].train_loss == best.record.epochs[e].train_loss);
  }
  REQUIRE(delayed.record.labeled_phase_best.has_value());
  REQUIRE(best.record.labeled_phase_best.has_value());
  CHECK(*delayed.record.labeled_phase_best == *best.record.labeled_phase_best);

  REQUIRE(best.record.params_at_transition.has_value());
  CHECK(*best.record.params_at_transition == *best.record.labeled_phase_best);

  // The best checkpoint's recorded score is the maximum over epochs.
  for (const auto* r : {&joint, &delayed, &best, &plain}) {
    double top = -1;
    for (const auto& e : r->record.epochs) top = std::max(top, e.val_edit);
    CHECK(r->record.best_val == top);
    CHECK(r->record.epochs.size() == static_cast<std::size_t>(f.cfg.stage1_epochs));
    CHECK(r->record.test.has_value());
  }
  // The unlabeled weight is zero before the ramp starts.
  for (const auto& e : joint.record.epochs)
    if (e.epoch <= start) CHECK(e.lambda == 0.0);
}

TEST_CASE("stage I is deterministic") {
  Fixture f;
  const StageResult a = run_stage1(f.ctx, f.split, 9, Strategy::best_continuation);
  const StageResult b = run_stage1(f.ctx, f.split, 9, Strategy::best_continuation);
  CHECK(to_json(a.record).dump() == to_json(b.record).dump());
  CHECK(a.model.params == b.model.params);
}

TEST_CASE("stage II freezes the teacher and reads no labels") {
  Fixture f;
  const StageResult teacher = run_stage1(f.ctx, f.split, 2, Strategy::labeled_only);
  const Vector before = teacher.model.params;
  f.split.reset_access_log();
  const Stage2Result s2 = run_stage2(f.ctx, teacher.model, f.split, 2);
  CHECK(teacher.model.params == before);
  for (Pool p : {Pool::labeled, Pool::unlabeled, Pool::val, Pool::test}) CHECK(f.split.label_reads(p) == 0);
  CHECK_FALSE(s2.rgb.arch.has_heads());
  CHECK(s2.rgb.arch.encoders[0].modality == "rgb");
  CHECK(s2.flow.arch.encoders[0].modality == "flow");
  CHECK(s2.record.epochs.size() == 2u * static_cast<std::size_t>(f.cfg.stage2_epochs));

  ModelState not_a_teacher = init_model(detector_arch(f.cfg, {"rgb"}, 14), 1);
  CHECK_THROWS_AS(run_stage2(f.ctx, not_a_teacher, f.split, 2), Error);
}

TEST_CASE("distillation from a copy of the teacher starts at zero") {
  Fixture f;
  const ModelState teacher = init_model(detector_arch(f.cfg, {"pose"}, 14), 4);
  ModelState student = init_model(detector_arch(f.cfg, {"pose"}, 0), 8);
  student.params = teacher.params.head(student.params.size());
  std::vector<const Matrix*> feats;
  std::vector<Embeddings> targets;
  for (std::size_t i = 0; i < f.split.size(Pool::unlabeled); ++i) {
    feats.push_back(&f.split.inputs(Pool::unlabeled, i).pose);
    targets.push_back(forward_teacher(teacher, *feats.back()));
  }
  CHECK(distill_batch_loss(student, 0, feats, targets, nullptr) == 0.0);
}

TEST_CASE("distillation loss falls over training") {
  RunConfig cfg = tiny_config();
  cfg.stage2_epochs = 12;
  const LabelSchema& s = LabelSchema::tennis();
  const StageContext ctx{cfg, s, std::nullopt};
  std::vector<std::vector<double>> curves;
  for (std::uint64_t seed : {1, 2, 3}) {
    const DatasetSplit split = make_benchmark(cfg, s, seed);
    const ModelState teacher = init_model(detector_arch(cfg, {"pose"}, 14), seed);
    const Stage2Result r = run_stage2(ctx, teacher, split, seed);
    std::vector<double> rgb;
    for (int e = 0; e < cfg.stage2_epochs; ++e) rgb.push_back(r.record.epochs[static_cast<std::size_t>(e)].train_loss);
    curves.push_back(rgb);
  }
  std::vector<double> med;
  for (int e = 0; e < cfg.stage2_epochs; ++e)
    med.push_back(median({curves[0][e], curves[1][e], curves[2][e]}));
  for (std::size_t e = 1; e < med.size(); ++e) CHECK(med[e] <= med[e - 1]);
}

TEST_CASE("stage III fuses both students and touches labeled clips only") {
  Fixture f;
  const StageResult teacher = run_stage1(f.ctx, f.split, 2, Strategy::labeled_only);
  const Stage2Result s2 = run_stage2(f.ctx, teacher.model, f.split, 2);
  f.split.reset_access_log();
  const StageResult s3 = run_stage3(f.ctx, s2.rgb, s2.flow, f.split, 2);
  CHECK(f.split.label_reads(Pool::unlabeled) == 0);
  CHECK(f.split.label_reads(Pool::labeled) > 0);
  CHECK(s3.record.epochs.size() == static_cast<std::size_t>(f.cfg.stage3_epochs));
  REQUIRE(s3.record.test.has_value());
  for (const auto& e : s3.record.epochs) CHECK(e.unlabeled_batches == 0);

  const ClipInputs& in = f.split.inputs(Pool::val, 0);
  const ForwardPass pass = forward_model(s3.model, select_inputs(s3.model.arch, in));
  const Embeddings sum = fuse(forward_encoder(s3.model, 0, in.rgb), forward_encoder(s3.model, 1, in.flow));
  CHECK(pass.fused == sum);
  CHECK(s3.model.arch.encoders[0].modality == "rgb");
  CHECK(s3.model.arch.encoders[1].modality == "flow");
}

TEST_CASE("empty labeled or validation sets are rejected") {
  Fixture f;
  DatasetSplit no_val(std::vector<ClipSample>(f.split.eval_clips(Pool::labeled)), {}, {}, {});
  try {
    run_awd(f.ctx, init_model(detector_arch(f.cfg, {"pose"}, 14), 1), no_val, 1);
    FAIL("expected an argument error");
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::argument);
  }
  DatasetSplit no_labeled({}, {}, f.split.eval_clips(Pool::val), f.split.eval_clips(Pool::test));
  CHECK_THROWS_AS(run_stage1(f.ctx, no_labeled, 1), Error);
}

TEST_CASE("AWD with a perfect teacher uses weight one") {
  Fixture f;
  // The teacher reads the hidden ground truth of whichever clip it is shown.
  std::vector<const ClipSample*> all;
  for (Pool p : {Pool::labeled, Pool::unlabeled, Pool::val, Pool::test})
    for (const auto& c : f.split.eval_clips(p)) all.push_back(&c);
  f.split.reset_access_log();
  Predictor oracle = [&](const ClipInputs& in) {
    for (const auto* c : all)
      if (&c->inputs == &in || c->inputs.pose == in.pose) {
        Matrix coarse(c->labels.coarse.size(), 2);
        coarse.col(1) = (8.0 * c->labels.coarse.cast<double>().array() - 4.0).matrix();
        coarse.col(0) = -coarse.col(1);
        return Logits{coarse, (10.0 * c->labels.fine.array() - 5.0).matrix()};
      }
    FAIL("unknown clip");
    return Logits{};
  };
  const ModelState unused = init_model(detector_arch(f.cfg, {"pose"}, 14), 1);
  const StageResult r = run_awd(f.ctx, unused, f.split, 3, &oracle);
  REQUIRE_FALSE(r.record.awd_weights.empty());
  for (double w : r.record.awd_weights) CHECK(w == 1.0);
  // The student's training never reads unlabeled ground truth; only the oracle above does.
  CHECK(f.split.label_reads(Pool::unlabeled) == 0);
}

TEST_CASE("checkpoint reproduces validation Edit") {
  Fixture f;
  const auto dir = std::filesystem::temp_directory_path() / "pes-test-pipeline";
  std::filesystem::remove_all(dir);
  const StageContext ctx{f.cfg, f.schema, dir};
  const StageResult r = run_stage1(ctx, f.split, 4, Strategy::labeled_only);
  REQUIRE(r.record.best_checkpoint == "stage1.ckpt");
  const LoadedCheckpoint ck = load_checkpoint(dir / "stage1.ckpt");
  CHECK(ck.meta.schema_hash == f.schema.hash());
  CHECK(ck.meta.epoch == r.record.best_epoch);
  CHECK(ck.meta.metric == r.record.best_val);
  const EvalReport val = evaluate_split(predictor_for(ck.state), f.split.eval_clips(Pool::val), f.schema);
  CHECK(val.edit == r.record.best_val);
}

TEST_CASE("ablation table") {
  RunConfig cfg = tiny_config();
  cfg.seeds = {1, 2};
  const AblationTable t = run_ablation(cfg, LabelSchema::tennis(), false);
  REQUIRE(t.rows.size() == 4);
  CHECK(t.rows[0].name == "labeled_only");
  CHECK(t.rows[1].name == "joint");
  CHECK(t.rows[2].name == "delayed");
  CHECK(t.rows[3].name == "best_continuation");
  for (const auto& r : t.rows) CHECK(r.test_edit.size() == 2);
  const auto j = to_json(t);
  CHECK(j.at("rows").size() == 4);
  CHECK(j.at("rows")[0].contains("test_edit_mean"));
  CHECK(j.at("rows")[0].contains("test_edit_std"));

  const AblationTable full = run_ablation(cfg, LabelSchema::tennis(), true);
  CHECK(full.rows.size() == 8);
}

TEST_CASE("summary statistics") {
  CHECK(median({3, 1, 2}) == 2.0);
  CHECK(median({4, 1, 2, 3}) == 2.5);
  CHECK(mean({1, 2, 3, 6}) == 3.0);
  CHECK(stddev({2, 4, 4, 4, 5, 5, 7, 9}) == 2.0);
  CHECK_THROWS_AS(median({}), Error);
}
