#include "pes/awd.hpp"

#include "pes/error.hpp"
#include "pes/pseudo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace pes {

namespace {

int mismatches(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  require(a.size() == b.size(), ErrorCategory::shape, "label vectors differ in length");
  int n = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) n += a[i] != b[i] ? 1 : 0;
  return n;
}

double margin(const Eigen::Ref<const Vector>& probs, const std::vector<int>& members) {
  if (members.size() == 1) return probs[members.front()];
  double top = -1.0, second = -1.0;
  for (int i : members) {
    const double v = probs[i];
    if (v > top) {
      second = top;
      top = v;
    } else if (v > second) {
      second = v;
    }
  }
  return top - second;
}

FineLabelVector hard_from_logits(const Matrix& fine_logits, Eigen::Index t, const LabelSchema& s) {
  FineLabelVector probs = fine_logits.row(t).transpose().unaryExpr([](double x) { return sigmoid(x); });
  return fine_label_postprocess(std::move(probs), s);
}

}  // namespace

int correctness_p(const Eigen::Ref<const Vector>& teacher_hard, const Eigen::Ref<const Vector>& gt) {
  return mismatches(teacher_hard, gt) == 0 ? 0 : 1;
}

double distortion_d(const Eigen::Ref<const Vector>& teacher_hard, const Eigen::Ref<const Vector>& student_hard,
                    const Eigen::Ref<const Vector>& gt) {
  const double disagree = mismatches(teacher_hard, student_hard);
  const double student_err = mismatches(student_hard, gt);
  return (disagree + 1.0) / (student_err + 1.0);
}

double weight_W(double p, double d) {
  require(std::isfinite(p) && std::isfinite(d), ErrorCategory::numeric, "weight_W needs finite p and d");
  const double denom = 1.0 + p * (d - 1.0);
  if (denom <= 0.0) return 1.0;  // raw weight is +inf or negative-through-pole; clip to the upper bound
  return std::clamp(1.0 / denom, 0.0, 1.0);
}

Vector group_confidence(const Eigen::Ref<const Vector>& probs, const LabelSchema& s) {
  require(probs.size() == s.num_classes(), ErrorCategory::schema, "probability vector does not match the schema");
  Vector conf(s.num_confidence_groups());
  Eigen::Index g = 0;
  for (const auto& members : s.groups()) conf[g++] = margin(probs, members);
  for (const auto& cg : s.conditional_groups()) conf[g++] = margin(probs, cg.members);
  for (int b : s.independent_binary()) conf[g++] = std::abs(probs[b] - (1.0 - probs[b]));
  return conf;
}

double clip_confidence(const std::vector<Vector>& frame_confs) {
  require(!frame_confs.empty(), ErrorCategory::state, "clip has no event frames; confidence is undefined");
  double sum = 0.0;
  for (const auto& f : frame_confs) {
    require(f.size() > 0, ErrorCategory::state, "frame has no confidence groups");
    sum += f.mean();
  }
  return sum / static_cast<double>(frame_confs.size());
}

ClipReliability clip_reliability(const Matrix& teacher_fine_logits, const Matrix& student_fine_logits,
                                 const ClipLabels& truth, const LabelSchema& s) {
  ClipReliability out;
  std::vector<Vector> conf_t, conf_s;
  double p_sum = 0.0, d_sum = 0.0;
  for (const auto& e : truth.events.events) {
    const Eigen::Index t = e.timestamp;
    const Vector gt = truth.fine.row(t).transpose();
    const FineLabelVector th = hard_from_logits(teacher_fine_logits, t, s);
    const FineLabelVector sh = hard_from_logits(student_fine_logits, t, s);
    p_sum += correctness_p(th, gt);
    d_sum += distortion_d(th, sh, gt);
    const Vector tp = teacher_fine_logits.row(t).transpose().unaryExpr([](double x) { return sigmoid(x); });
    const Vector sp = student_fine_logits.row(t).transpose().unaryExpr([](double x) { return sigmoid(x); });
    conf_t.push_back(group_confidence(tp, s));
    conf_s.push_back(group_confidence(sp, s));
  }
  out.frames = static_cast<int>(conf_t.size());
  if (out.frames == 0) return out;
  out.p = p_sum / out.frames;
  out.d = d_sum / out.frames;
  out.c_teacher = clip_confidence(conf_t);
  out.c_student = clip_confidence(conf_s);
  return out;
}

WeightMapping build_mapping(const std::vector<ClipSample>& val, const Predictor& teacher, const Predictor& student,
                            const LabelSchema& s, int k_neighbors) {
  require(!val.empty(), ErrorCategory::argument, "cannot build a weight mapping from an empty validation set");
  require(k_neighbors > 0, ErrorCategory::config, "k_neighbors must be positive");
  WeightMapping mapping;
  mapping.k_neighbors = k_neighbors;
  for (const auto& clip : val) {
    if (clip.labels.events.empty()) continue;
    const Logits t = teacher(clip.inputs);
    const Logits st = student(clip.inputs);
    const ClipReliability r = clip_reliability(t.fine, st.fine, clip.labels, s);
    mapping.records.push_back({r.c_student, r.c_teacher, r.p, r.d});
  }
  return mapping;
}

WeightMapping build_mapping(const std::vector<ClipSample>& val, const ModelState& teacher, const ModelState& student,
                            const LabelSchema& s, int k_neighbors) {
  Predictor tp = [&teacher](const ClipInputs& in) { return detect(teacher, forward_teacher(teacher, in.pose)); };
  Predictor sp = [&student](const ClipInputs& in) { return detect(student, forward_student(student, in.rgb)); };
  return build_mapping(val, tp, sp, s, k_neighbors);
}

std::pair<double, double> knn_estimate(const WeightMapping& mapping, double c_student, double c_teacher) {
  require(!mapping.records.empty(), ErrorCategory::state, "weight mapping is empty");
  require(mapping.k_neighbors > 0, ErrorCategory::config, "k_neighbors must be positive");
  const std::size_t n = mapping.records.size();
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double ds = mapping.records[i].c_student - c_student;
    const double dt = mapping.records[i].c_teacher - c_teacher;
    dist[i] = {ds * ds + dt * dt, i};
  }
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(mapping.k_neighbors), n);
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  double p = 0.0, d = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    p += mapping.records[dist[i].second].p;
    d += mapping.records[dist[i].second].d;
  }
  return {p / static_cast<double>(k), d / static_cast<double>(k)};
}

double knn_weight(const WeightMapping& mapping, double c_student, double c_teacher) {
  const auto [p, d] = knn_estimate(mapping, c_student, c_teacher);
  return weight_W(p, d);
}

std::optional<double> predicted_clip_confidence(const Logits& logits, const std::vector<int>& frames,
                                                const LabelSchema& s) {
  if (frames.empty()) return std::nullopt;
  std::vector<Vector> confs;
  confs.reserve(frames.size());
  for (int t : frames) {
    const Vector probs = logits.fine.row(t).transpose().unaryExpr([](double x) { return sigmoid(x); });
    confs.push_back(group_confidence(probs, s));
  }
  return clip_confidence(confs);
}

void save_mapping(const std::filesystem::path& path, const WeightMapping& mapping) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCategory::io, "cannot write mapping file " + path.string());
  out << "# c_student c_teacher p d\n";
  char buf[128];
  for (const auto& r : mapping.records) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g\n", r.c_student, r.c_teacher, r.p, r.d);
    out << buf;
  }
}

WeightMapping load_mapping(const std::filesystem::path& path, int k_neighbors) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCategory::io, "cannot open mapping file " + path.string());
  WeightMapping m;
  m.k_neighbors = k_neighbors;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tok[4];
    for (auto& t : tok) ls >> t;
    MappingRecord r;
    double* fields[4] = {&r.c_student, &r.c_teacher, &r.p, &r.d};
    for (int i = 0; i < 4; ++i) {
      char* end = nullptr;
      *fields[i] = std::strtod(tok[i].c_str(), &end);
      require(!tok[i].empty() && end && *end == '\0', ErrorCategory::io,
              path.string() + ":" + std::to_string(line_no) + ": expected four numbers");
    }
    require(r.p >= 0.0 && r.p <= 1.0 && r.d > 0.0, ErrorCategory::io,
            path.string() + ":" + std::to_string(line_no) + ": record outside p in [0,1], d > 0");
    m.records.push_back(r);
  }
  return m;
}

}  // namespace pes
