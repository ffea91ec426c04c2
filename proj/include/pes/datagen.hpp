#pragma once

#include "pes/schema.hpp"
#include "pes/types.hpp"

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

namespace pes {

/// Synthetic benchmark generator settings. `world_seed` fixes everything shared
/// by all clips of one task (motion templates, modality projections, per-video
/// styles); the `seed` passed to generate_dataset drives per-clip sampling.
struct GenConfig {
  int frames = 48;
  int persons = 1;
  int joints = 8;
  int rgb_dim = 16;
  int flow_dim = 16;
  int latent_dim = 12;
  int num_clips = 10;
  /// Per-frame hazard of an event once the minimum gap has elapsed.
  double event_rate = 0.08;
  int min_gap = 2;
  /// Half-width of the latent motion segment an event induces.
  int motion_halfwidth = 2;
  double event_amplitude = 1.0;
  double amplitude_jitter = 0.3;
  double background_scale = 0.5;
  double style_scale = 0.5;
  double pose_noise = 0.15;
  double flow_noise = 0.6;
  double rgb_noise = 0.9;
  /// Videos per generator context; clips draw a video uniformly.
  int videos = 8;
  /// Clips from different contexts come from disjoint sets of videos.
  int context = 0;
  std::uint64_t world_seed = 7;

  int pose_dim() const { return persons * joints * 2; }
  void validate() const;
};

/// Model-visible features of one clip. `pose` stores T x (P*V*2) with the
/// person, joint and coordinate axes flattened row-major per frame.
struct ClipInputs {
  Matrix pose;
  Matrix rgb;
  Matrix flow;

  int frames() const { return static_cast<int>(pose.rows()); }
};

struct ClipLabels {
  IndexVector coarse;
  Matrix fine;
  EventSequence events;
};

struct ClipSample {
  std::string clip_id;
  int persons = 1;
  int joints = 1;
  ClipInputs inputs;
  ClipLabels labels;
};

/// Dense labels reconstructed from an event sequence.
ClipLabels labels_from_events(const EventSequence& events, int frames, const EventVocab& vocab);

/// Event sequence read back from dense labels; throws a schema error on rows
/// that are not vocabulary entries.
EventSequence events_from_labels(const IndexVector& coarse, const Matrix& fine, const EventVocab& vocab);

/// Checks shapes, label/event consistency and the minimum gap.
void validate_clip(const ClipSample& clip, const EventVocab& vocab, int min_gap = 1);

std::vector<ClipSample> generate_dataset(const GenConfig& cfg, const LabelSchema& schema, std::uint64_t seed);

enum class Pool { labeled, unlabeled, val, test };

/// Labeled, unlabeled, validation and test clips. Unlabeled clips keep their
/// hidden ground truth; training code reads labels only through `labels()`,
/// which counts every access per pool.
class DatasetSplit {
 public:
  DatasetSplit() = default;
  DatasetSplit(std::vector<ClipSample> labeled, std::vector<ClipSample> unlabeled, std::vector<ClipSample> val,
               std::vector<ClipSample> test);
  DatasetSplit(const DatasetSplit& other);
  DatasetSplit& operator=(const DatasetSplit& other);

  std::size_t size(Pool p) const { return clips(p).size(); }
  const ClipInputs& inputs(Pool p, std::size_t i) const { return clips(p).at(i).inputs; }
  const std::string& clip_id(Pool p, std::size_t i) const { return clips(p).at(i).clip_id; }

  /// Ground truth for one clip; recorded in the access log.
  const ClipLabels& labels(Pool p, std::size_t i) const;

  /// Whole clips, including labels, for evaluation against held-out data. Counted as label reads.
  const std::vector<ClipSample>& eval_clips(Pool p) const;

  long label_reads(Pool p) const { return reads_[static_cast<int>(p)].load(); }
  void reset_access_log() const;

  void set_val(std::vector<ClipSample> v) { val_ = std::move(v); }
  void set_test(std::vector<ClipSample> t) { test_ = std::move(t); }

 private:
  const std::vector<ClipSample>& clips(Pool p) const;

  std::vector<ClipSample> labeled_;
  std::vector<ClipSample> unlabeled_;
  std::vector<ClipSample> val_;
  std::vector<ClipSample> test_;
  mutable std::atomic<long> reads_[4] = {0, 0, 0, 0};
};

/// Draws k labeled clips uniformly without replacement; the rest become unlabeled.
DatasetSplit split_k_clip(std::vector<ClipSample> clips, int k, std::uint64_t seed);

/// Indices of the labeled clips chosen by split_k_clip for a pool of `pool_size`.
std::vector<std::size_t> k_clip_indices(std::size_t pool_size, int k, std::uint64_t seed);

enum class Phase { labeled_only, mixed };

struct Batch {
  Pool origin = Pool::labeled;
  std::vector<std::size_t> indices;
};

/// Labeled-only draws from the labeled pool; mixed flips a fair coin per batch.
/// An empty unlabeled pool in the mixed phase falls back to labeled with a warning on stderr.
Batch sample_batch(const DatasetSplit& split, Phase phase, int batch_size, Rng& rng);

/// One clip per line; see README for field names.
void save_dataset(const std::filesystem::path& path, const std::vector<ClipSample>& clips);
std::vector<ClipSample> load_dataset(const std::filesystem::path& path, const LabelSchema& schema);

}  // namespace pes
