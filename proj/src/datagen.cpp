#include "pes/datagen.hpp"

#include "pes/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <numeric>

namespace pes {

using nlohmann::json;

void GenConfig::validate() const {
  auto positive = [](int v, const char* name) {
    require(v > 0, ErrorCategory::config, std::string(name) + " must be positive");
  };
  positive(frames, "frames");
  positive(persons, "persons");
  positive(joints, "joints");
  positive(rgb_dim, "rgb_dim");
  positive(flow_dim, "flow_dim");
  positive(latent_dim, "latent_dim");
  positive(videos, "videos");
  require(num_clips >= 0, ErrorCategory::config, "num_clips must be non-negative");
  require(event_rate >= 0.0 && event_rate <= 1.0, ErrorCategory::config, "event_rate must lie in [0, 1]");
  require(min_gap >= 1, ErrorCategory::config, "min_gap must be at least 1");
  require(motion_halfwidth >= 0, ErrorCategory::config, "motion_halfwidth must be non-negative");
  require(pose_noise >= 0 && rgb_noise >= 0 && flow_noise >= 0 && background_scale >= 0 && style_scale >= 0,
          ErrorCategory::config, "noise scales must be non-negative");
  require(context >= 0, ErrorCategory::config, "context must be non-negative");
}

ClipLabels labels_from_events(const EventSequence& events, int frames, const EventVocab& vocab) {
  ClipLabels out;
  const int c = vocab.size() > 0 ? static_cast<int>(vocab.at(0).size()) : 0;
  out.coarse = IndexVector::Zero(frames);
  out.fine = Matrix::Zero(frames, c);
  for (const auto& e : events.events) {
    require(e.timestamp >= 0 && e.timestamp < frames, ErrorCategory::schema, "event timestamp outside clip");
    require(e.class_id >= 0 && e.class_id < vocab.size(), ErrorCategory::schema, "event class outside vocabulary");
    out.coarse[e.timestamp] = 1;
    out.fine.row(e.timestamp) = vocab.at(e.class_id).transpose();
  }
  out.events = events;
  return out;
}

EventSequence events_from_labels(const IndexVector& coarse, const Matrix& fine, const EventVocab& vocab) {
  require(fine.rows() == coarse.size(), ErrorCategory::shape, "coarse/fine frame count mismatch");
  EventSequence seq;
  for (Eigen::Index t = 0; t < coarse.size(); ++t) {
    if (coarse[t] == 0) {
      require(fine.row(t).isZero(0.0), ErrorCategory::schema,
              "fine labels must be zero on background frame " + std::to_string(t));
      continue;
    }
    const int id = vocab.index_of(fine.row(t).transpose());
    require(id >= 0, ErrorCategory::schema, "fine labels at frame " + std::to_string(t) + " are not schema-valid");
    seq.events.push_back({id, static_cast<int>(t)});
  }
  return seq;
}

void validate_clip(const ClipSample& clip, const EventVocab& vocab, int min_gap) {
  const auto& in = clip.inputs;
  const Eigen::Index t = in.pose.rows();
  require(in.pose.cols() == clip.persons * clip.joints * 2, ErrorCategory::shape, "pose width != P*V*2");
  require(in.rgb.rows() == t && in.flow.rows() == t, ErrorCategory::shape, "modalities disagree on frame count");
  require(clip.labels.coarse.size() == t && clip.labels.fine.rows() == t, ErrorCategory::shape,
          "labels disagree with frame count");
  require(in.pose.allFinite() && in.rgb.allFinite() && in.flow.allFinite(), ErrorCategory::numeric,
          "non-finite feature values in clip " + clip.clip_id);
  require(clip.labels.coarse.minCoeff() >= 0 && clip.labels.coarse.maxCoeff() <= 1, ErrorCategory::schema,
          "coarse labels must be 0/1");
  const EventSequence decoded = events_from_labels(clip.labels.coarse, clip.labels.fine, vocab);
  require(decoded == clip.labels.events, ErrorCategory::schema,
          "event sequence of clip " + clip.clip_id + " does not match its dense labels");
  for (std::size_t i = 1; i < decoded.events.size(); ++i)
    require(decoded.events[i].timestamp - decoded.events[i - 1].timestamp >= min_gap, ErrorCategory::schema,
            "events closer than the minimum gap in clip " + clip.clip_id);
}

namespace {

struct World {
  std::vector<Matrix> templates;  // per class: (2h+1) x L
  Matrix pose_proj, rgb_proj, flow_proj;
  Matrix styles;  // videos x L, for the requested context
};

Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * rng.normal();
  return m;
}

World make_world(const GenConfig& cfg, int num_classes) {
  World w;
  const int l = cfg.latent_dim;
  Rng rng(Rng::derive(cfg.world_seed, 1));
  for (int c = 0; c < num_classes; ++c) w.templates.push_back(gaussian(rng, 2 * cfg.motion_halfwidth + 1, l, 1.0));
  const double proj = 1.0 / std::sqrt(static_cast<double>(l));
  w.pose_proj = gaussian(rng, l, cfg.pose_dim(), proj);
  w.rgb_proj = gaussian(rng, l, cfg.rgb_dim, proj);
  w.flow_proj = gaussian(rng, l, cfg.flow_dim, proj);
  Rng style_rng(Rng::derive(cfg.world_seed, 1000 + static_cast<std::uint64_t>(cfg.context)));
  w.styles = gaussian(style_rng, cfg.videos, l, cfg.style_scale);
  return w;
}

ClipSample generate_clip(const GenConfig& cfg, const World& world, const EventVocab& vocab, std::uint64_t clip_seed,
                         const std::string& id) {
  Rng rng(clip_seed);
  const int t_len = cfg.frames;
  const int l = cfg.latent_dim;

  const auto video = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(cfg.videos)));

  Matrix latent(t_len, l);
  const double rho = 0.85;
  const double innov = cfg.background_scale * std::sqrt(1.0 - rho * rho);
  Vector state = Vector::Zero(l);
  for (int j = 0; j < l; ++j) state[j] = cfg.background_scale * rng.normal();
  for (int t = 0; t < t_len; ++t) {
    for (int j = 0; j < l; ++j) state[j] = rho * state[j] + innov * rng.normal();
    latent.row(t) = state.transpose() + world.styles.row(video);
  }

  // Semi-Markov placement: after each event wait min_gap frames, then a geometric delay.
  EventSequence events;
  if (cfg.event_rate > 0.0) {
    int t = 0;
    while (true) {
      while (t < t_len && rng.uniform() >= cfg.event_rate) ++t;
      if (t >= t_len) break;
      events.events.push_back({static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.size()))), t});
      t += cfg.min_gap;
    }
  }

  const int h = cfg.motion_halfwidth;
  for (const auto& e : events.events) {
    const double amp = cfg.event_amplitude * (1.0 + cfg.amplitude_jitter * rng.uniform(-1.0, 1.0));
    const FineLabelVector& y = vocab.at(e.class_id);
    for (int o = -h; o <= h; ++o) {
      const int t = e.timestamp + o;
      if (t < 0 || t >= t_len) continue;
      for (Eigen::Index c = 0; c < y.size(); ++c)
        if (y[c] != 0.0) latent.row(t) += amp * world.templates[static_cast<std::size_t>(c)].row(o + h);
    }
  }

  ClipSample clip;
  clip.clip_id = id;
  clip.persons = cfg.persons;
  clip.joints = cfg.joints;
  clip.inputs.pose = latent * world.pose_proj + gaussian(rng, t_len, cfg.pose_dim(), cfg.pose_noise);
  clip.inputs.rgb = latent * world.rgb_proj + gaussian(rng, t_len, cfg.rgb_dim, cfg.rgb_noise);
  clip.inputs.flow = latent * world.flow_proj + gaussian(rng, t_len, cfg.flow_dim, cfg.flow_noise);
  clip.labels = labels_from_events(events, t_len, vocab);
  return clip;
}

}  // namespace

std::vector<ClipSample> generate_dataset(const GenConfig& cfg, const LabelSchema& schema, std::uint64_t seed) {
  cfg.validate();
  const EventVocab vocab(schema);
  const World world = make_world(cfg, schema.num_classes());
  std::vector<ClipSample> clips;
  clips.reserve(static_cast<std::size_t>(cfg.num_clips));
  for (int i = 0; i < cfg.num_clips; ++i) {
    const std::string id = "ctx" + std::to_string(cfg.context) + "-s" + std::to_string(seed) + "-" + std::to_string(i);
    clips.push_back(generate_clip(cfg, world, vocab, Rng::derive(seed, static_cast<std::uint64_t>(i)), id));
  }
  return clips;
}

DatasetSplit::DatasetSplit(std::vector<ClipSample> labeled, std::vector<ClipSample> unlabeled,
                           std::vector<ClipSample> val, std::vector<ClipSample> test)
    : labeled_(std::move(labeled)), unlabeled_(std::move(unlabeled)), val_(std::move(val)), test_(std::move(test)) {}

DatasetSplit::DatasetSplit(const DatasetSplit& other)
    : labeled_(other.labeled_), unlabeled_(other.unlabeled_), val_(other.val_), test_(other.test_) {}

DatasetSplit& DatasetSplit::operator=(const DatasetSplit& other) {
  if (this != &other) {
    labeled_ = other.labeled_;
    unlabeled_ = other.unlabeled_;
    val_ = other.val_;
    test_ = other.test_;
    reset_access_log();
  }
  return *this;
}

const std::vector<ClipSample>& DatasetSplit::clips(Pool p) const {
  switch (p) {
    case Pool::labeled: return labeled_;
    case Pool::unlabeled: return unlabeled_;
    case Pool::val: return val_;
    case Pool::test: return test_;
  }
  fail(ErrorCategory::argument, "unknown pool");
}

const ClipLabels& DatasetSplit::labels(Pool p, std::size_t i) const {
  reads_[static_cast<int>(p)].fetch_add(1);
  return clips(p).at(i).labels;
}

const std::vector<ClipSample>& DatasetSplit::eval_clips(Pool p) const {
  reads_[static_cast<int>(p)].fetch_add(static_cast<long>(clips(p).size()));
  return clips(p);
}

void DatasetSplit::reset_access_log() const {
  for (auto& r : reads_) r.store(0);
}

std::vector<std::size_t> k_clip_indices(std::size_t pool_size, int k, std::uint64_t seed) {
  require(k > 0, ErrorCategory::argument, "k must be positive");
  require(static_cast<std::size_t>(k) <= pool_size, ErrorCategory::argument,
          "k = " + std::to_string(k) + " exceeds the training pool of " + std::to_string(pool_size) + " clips");
  std::vector<std::size_t> order(pool_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::derive(seed, 0x5EED));
  // Partial Fisher-Yates: the first k positions are a uniform k-subset.
  for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool_size - i));
    std::swap(order[i], order[j]);
  }
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

DatasetSplit split_k_clip(std::vector<ClipSample> clips, int k, std::uint64_t seed) {
  const auto chosen = k_clip_indices(clips.size(), k, seed);
  std::vector<ClipSample> labeled, unlabeled;
  std::size_t next = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (next < chosen.size() && chosen[next] == i) {
      labeled.push_back(std::move(clips[i]));
      ++next;
    } else {
      unlabeled.push_back(std::move(clips[i]));
    }
  }
  return DatasetSplit(std::move(labeled), std::move(unlabeled), {}, {});
}

Batch sample_batch(const DatasetSplit& split, Phase phase, int batch_size, Rng& rng) {
  require(batch_size > 0, ErrorCategory::argument, "batch size must be positive");
  Batch b;
  b.origin = Pool::labeled;
  if (phase == Phase::mixed) {
    if (rng.coin()) {
      if (split.size(Pool::unlabeled) > 0) {
        b.origin = Pool::unlabeled;
      } else {
        std::cerr << "warning: unlabeled pool is empty; mixed batch falls back to labeled clips\n";
      }
    }
  }
  const std::size_t n = split.size(b.origin);
  require(n > 0, ErrorCategory::argument, "cannot sample a batch from an empty pool");
  for (int i = 0; i < batch_size; ++i) b.indices.push_back(static_cast<std::size_t>(rng.below(n)));
  return b;
}

namespace {

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j, const std::string& field) {
  require(j.is_array(), ErrorCategory::io, "field '" + field + "' must be a nested list");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    require(row.is_array() && static_cast<Eigen::Index>(row.size()) == cols, ErrorCategory::io,
            "field '" + field + "' is ragged");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const std::vector<ClipSample>& clips) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCategory::io, "cannot write dataset file " + path.string());
  for (const auto& c : clips) {
    json rec;
    rec["clip_id"] = c.clip_id;
    rec["persons"] = c.persons;
    rec["joints"] = c.joints;
    rec["pose"] = matrix_to_json(c.inputs.pose);
    rec["rgb"] = matrix_to_json(c.inputs.rgb);
    rec["flow"] = matrix_to_json(c.inputs.flow);
    rec["coarse"] = std::vector<int>(c.labels.coarse.data(), c.labels.coarse.data() + c.labels.coarse.size());
    rec["fine"] = matrix_to_json(c.labels.fine);
    json ev = json::array();
    for (const auto& e : c.labels.events.events) ev.push_back({e.class_id, e.timestamp});
    rec["events"] = std::move(ev);
    out << rec.dump() << '\n';
  }
}

std::vector<ClipSample> load_dataset(const std::filesystem::path& path, const LabelSchema& schema) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCategory::io, "cannot open dataset file " + path.string());
  const EventVocab vocab(schema);
  std::vector<ClipSample> clips;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorCategory::io, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    try {
      ClipSample c;
      c.clip_id = rec.at("clip_id").get<std::string>();
      c.persons = rec.at("persons").get<int>();
      c.joints = rec.at("joints").get<int>();
      c.inputs.pose = matrix_from_json(rec.at("pose"), "pose");
      c.inputs.rgb = matrix_from_json(rec.at("rgb"), "rgb");
      c.inputs.flow = matrix_from_json(rec.at("flow"), "flow");
      const auto coarse = rec.at("coarse").get<std::vector<int>>();
      c.labels.coarse = Eigen::Map<const IndexVector>(coarse.data(), static_cast<Eigen::Index>(coarse.size()));
      c.labels.fine = matrix_from_json(rec.at("fine"), "fine");
      if (c.labels.fine.rows() == 0) c.labels.fine = Matrix::Zero(0, schema.num_classes());
      require(c.labels.fine.cols() == schema.num_classes(), ErrorCategory::schema,
              "fine labels do not match the schema width");
      for (const auto& e : rec.at("events")) c.labels.events.events.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
      validate_clip(c, vocab);
      clips.push_back(std::move(c));
    } catch (const json::exception& e) {
      fail(ErrorCategory::io, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return clips;
}

}  // namespace pes
