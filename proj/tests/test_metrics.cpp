#include <doctest.h>

#include "oracles.hpp"
#include "pes/error.hpp"
#include "pes/metrics.hpp"

using namespace pes;
using namespace pes::testing;
using doctest::Approx;

namespace {

EventSequence seq(std::initializer_list<std::pair<int, int>> xs) {
  EventSequence s;
  for (auto [c, t] : xs) s.events.push_back({c, t});
  return s;
}

EventSequence tokens(const std::vector<int>& ids) {
  EventSequence s;
  for (std::size_t i = 0; i < ids.size(); ++i) s.events.push_back({ids[i], 2 * static_cast<int>(i)});
  return s;
}

EventSequence random_events(Rng& rng, int max_per_class, int classes, int frames) {
  EventSequence s;
  std::vector<std::pair<int, int>> evs;
  for (int c = 0; c < classes; ++c) {
    const int n = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_per_class + 1)));
    for (int i = 0; i < n; ++i) evs.push_back({static_cast<int>(rng.below(static_cast<std::uint64_t>(frames))), c});
  }
  std::sort(evs.begin(), evs.end());
  for (auto [t, c] : evs) s.events.push_back({c, t});
  return s;
}

Matrix fine_for(const Vector& hard, int frames) {
  return Matrix((10.0 * hard.array() - 5.0).matrix().transpose().replicate(frames, 1));
}

}  // namespace

TEST_CASE("decode events") {
  const auto& s = LabelSchema::tennis();
  const EventVocab vocab(s);
  const Vector v = vocab.at(17);
  const Matrix fine = fine_for(v, 12);

  CHECK(decode_events(Vector::Constant(12, 0.3), fine, s, vocab).empty());

  Vector peak = Vector::Constant(12, 0.1);
  peak[4] = 0.6;
  peak[5] = 0.9;
  peak[6] = 0.7;
  const EventSequence one = decode_events(peak, fine, s, vocab);
  REQUIRE(one.size() == 1);
  CHECK(one.events[0].timestamp == 5);
  CHECK(one.events[0].class_id == 17);

  Vector plateau = Vector::Constant(12, 0.1);
  plateau.segment(3, 4).setConstant(0.8);
  const EventSequence p = decode_events(plateau, fine, s, vocab);
  REQUIRE(p.size() == 1);
  CHECK(p.events[0].timestamp == 3);

  // Two peaks outside each other's window both survive.
  Vector two = Vector::Constant(12, 0.1);
  two[2] = 0.8;
  two[4] = 0.9;
  CHECK(decode_events(two, fine, s, vocab).size() == 2);
  CHECK(decode_events(two, fine, s, vocab, {0.5, 2}).size() == 1);
  CHECK(decode_events(two, fine, s, vocab, {0.85, 1}).size() == 1);

  CHECK_THROWS_AS(decode_events(Vector::Zero(5), fine, s, vocab), Error);
}

TEST_CASE("edit score") {
  CHECK(edit_score(tokens({1, 2, 3}), tokens({1, 2, 3})) == 100.0);
  CHECK(edit_score(tokens({}), tokens({1, 2, 3, 4})) == 0.0);
  CHECK(edit_score(tokens({0, 9, 2, 3}), tokens({0, 1, 2, 3})) == 75.0);
  CHECK(edit_score(tokens({}), tokens({})) == 100.0);
  // Timestamps do not matter.
  CHECK(edit_score(seq({{1, 0}, {2, 40}}), seq({{1, 7}, {2, 8}})) == 100.0);
  CHECK(levenshtein({1, 2, 3}, {3, 2, 1}) == 2);
  CHECK(levenshtein({}, {5}) == 1);
}

TEST_CASE("edit score agrees with a full-table Levenshtein") {
  Rng rng(100);
  for (int i = 0; i < 1000; ++i) {
    std::vector<int> a(rng.below(21)), b(rng.below(21));
    // A small alphabet now and then so that matches are common.
    const std::uint64_t vocab = rng.coin() ? 200 : 4;
    for (auto& x : a) x = static_cast<int>(rng.below(vocab));
    for (auto& x : b) x = static_cast<int>(rng.below(vocab));
    REQUIRE(levenshtein(a, b) == full_dp_levenshtein(a, b));
    REQUIRE(edit_score(tokens(a), tokens(b)) == reference_edit(a, b));
  }
}

TEST_CASE("F1 with temporal tolerance") {
  const EventSequence gt = seq({{3, 10}, {5, 20}, {3, 30}});
  const F1Result exact = f1_at_tolerance(gt, gt, 1);
  CHECK(exact.mean_f1 == 100.0);

  const EventSequence shifted = seq({{3, 10}, {5, 22}, {3, 30}});
  const F1Result r = f1_at_tolerance(shifted, gt, 1);
  CHECK(r.per_class.at(5).tp == 0);
  CHECK(r.per_class.at(5).f1() == 0.0);
  CHECK(r.per_class.at(3).f1() == 1.0);
  CHECK(r.mean_f1 == Approx(50.0).epsilon(1e-12));
  CHECK(f1_at_tolerance(shifted, gt, 2).mean_f1 == 100.0);

  const F1Result pairs = f1_at_tolerance(seq({{1, 11}, {1, 12}}), seq({{1, 10}, {1, 11}}), 1);
  CHECK(pairs.per_class.at(1).tp == 2);
  CHECK(pairs.per_class.at(1).fp == 0);
  CHECK(pairs.per_class.at(1).fn == 0);

  // Greedy nearest-first would match 11<->11 and strand 10 and 12.
  CHECK(f1_at_tolerance(seq({{1, 11}, {1, 12}}), seq({{1, 10}, {1, 11}}), 1).per_class.at(1).tp == 2);

  const F1Result empty = f1_at_tolerance({}, {}, 1);
  CHECK(empty.per_class.empty());
  CHECK(empty.mean_f1 == 0.0);
  CHECK(f1_at_tolerance({}, gt, 1).mean_f1 == 0.0);
  CHECK_THROWS_AS(f1_at_tolerance(gt, gt, -1), Error);
}

TEST_CASE("F1 matching agrees with exhaustive enumeration") {
  Rng rng(5);
  for (int i = 0; i < 2000; ++i) {
    const int frames = 6 + static_cast<int>(rng.below(20));
    const EventSequence pred = random_events(rng, 6, 3, frames);
    const EventSequence gt = random_events(rng, 6, 3, frames);
    const int delta = static_cast<int>(rng.below(4));
    const F1Result r = f1_at_tolerance(pred, gt, delta);
    const auto tp = exhaustive_tp(pred, gt, delta);
    REQUIRE(r.per_class.size() == tp.size());
    for (const auto& [cls, counts] : r.per_class) {
      REQUIRE(counts.tp == tp.at(cls));
      long np = 0, ng = 0;
      for (const auto& e : pred.events) np += e.class_id == cls;
      for (const auto& e : gt.events) ng += e.class_id == cls;
      REQUIRE(counts.fp == np - counts.tp);
      REQUIRE(counts.fn == ng - counts.tp);
    }
    // A wider window never loses matches.
    const F1Result wider = f1_at_tolerance(pred, gt, delta + 1);
    for (const auto& [cls, counts] : r.per_class) REQUIRE(wider.per_class.at(cls).tp >= counts.tp);
  }
}

TEST_CASE("macro F1") {
  std::map<int, ClassCounts> c;
  c[0] = {1, 0, 0};
  c[4] = {1, 1, 0};
  CHECK(macro_f1(c) == Approx(100.0 * (1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
  CHECK(macro_f1({}) == 0.0);
}

TEST_CASE("evaluate split") {
  const auto& s = LabelSchema::tennis();
  const EventVocab vocab(s);
  GenConfig g;
  g.num_clips = 8;
  const auto clips = generate_dataset(g, s, 11);

  // Looks up the clip and answers with saturated logits built from its labels.
  auto logits_from = [&](const ClipSample& c) {
    Matrix coarse(g.frames, 2);
    for (int t = 0; t < g.frames; ++t) {
      coarse(t, 0) = c.labels.coarse[t] ? -8.0 : 8.0;
      coarse(t, 1) = -coarse(t, 0);
    }
    return Logits{coarse, (10.0 * c.labels.fine.array() - 5.0).matrix()};
  };
  ClipPredictor perfect = [&](const ClipInputs& in) {
    for (const auto& c : clips)
      if (&c.inputs == &in) return logits_from(c);
    return Logits{};
  };
  const EvalReport ok = evaluate_split(perfect, clips, s);
  CHECK(ok.edit == 100.0);
  CHECK(ok.f1_evt == 100.0);
  CHECK(ok.clips == 8);

  ClipPredictor silent = [&](const ClipInputs&) {
    Matrix coarse(g.frames, 2);
    coarse.col(0).setConstant(5.0);
    coarse.col(1).setConstant(-5.0);
    return Logits{coarse, Matrix::Zero(g.frames, 14)};
  };
  std::vector<ClipSample> with_events;
  for (const auto& c : clips)
    if (!c.labels.events.empty()) with_events.push_back(c);
  const EvalReport none = evaluate_split(silent, with_events, s);
  CHECK(none.edit == 0.0);
  CHECK(none.f1_evt == 0.0);

  // Two clips scoring 100 and 50.
  ClipSample a = clips[0], b = clips[0];
  const int c0 = vocab.index_of(Vector((Vector(14) << 1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0).finished()));
  const int c1 = vocab.index_of(Vector((Vector(14) << 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0).finished()));
  a.labels = labels_from_events(seq({{c0, 5}, {c1, 20}}), g.frames, vocab);
  b.labels = labels_from_events(seq({{c0, 5}, {c1, 20}}), g.frames, vocab);
  const ClipLabels half = labels_from_events(seq({{c0, 5}, {c0, 20}}), g.frames, vocab);
  b.inputs.pose(0, 0) = 1e6;  // marks the clip whose prediction is half right
  ClipPredictor mixed = [&](const ClipInputs& in) {
    ClipSample view = a;
    if (in.pose(0, 0) == 1e6) view.labels = half;
    return logits_from(view);
  };
  const EvalReport avg = evaluate_split(mixed, {a, b}, s);
  CHECK(avg.edit == 75.0);
}
