#include "pes/checkpoint.hpp"

#include "pes/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace pes {

namespace {

using nlohmann::json;

constexpr std::array<char, 8> kMagic = {'P', 'E', 'S', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  std::array<unsigned char, sizeof(T)> bytes;
  in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T));
  require(static_cast<bool>(in), ErrorCategory::io, "truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

void put_vector(std::ostream& out, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) put<double>(out, v[i]);
}

Vector get_vector(std::istream& in, std::uint64_t n) {
  Vector v(static_cast<Eigen::Index>(n));
  for (std::uint64_t i = 0; i < n; ++i) v[static_cast<Eigen::Index>(i)] = get<double>(in);
  return v;
}

json arch_to_json(const ModelArch& a) {
  json enc = json::array();
  for (const auto& e : a.encoders)
    enc.push_back({{"modality", e.modality},
                   {"input_dim", e.input_dim},
                   {"hidden", e.hidden},
                   {"recurrent", e.recurrent},
                   {"embed", e.embed}});
  return {{"encoders", enc}, {"num_classes", a.num_classes}};
}

ModelArch arch_from_json(const json& j) {
  ModelArch a;
  for (const auto& e : j.at("encoders"))
    a.encoders.push_back({e.at("modality").get<std::string>(), e.at("input_dim").get<int>(),
                          e.at("hidden").get<int>(), e.at("recurrent").get<int>(), e.at("embed").get<int>()});
  a.num_classes = j.at("num_classes").get<int>();
  a.validate();
  return a;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelState& m, const CheckpointMeta& meta) {
  require(m.params.size() == m.arch.param_count(), ErrorCategory::state, "parameter count does not match arch");
  json header = {{"arch", arch_to_json(m.arch)},
                 {"schema_hash", meta.schema_hash},
                 {"stage", meta.stage},
                 {"epoch", meta.epoch}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCategory::io, "cannot write checkpoint " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  // The metric travels in binary so the round trip is exact.
  put<double>(out, meta.metric);
  const auto n = static_cast<std::uint64_t>(m.params.size());
  put<std::uint64_t>(out, n);
  put_vector(out, m.params);
  const bool has_opt = m.opt.first_moment.size() == m.params.size();
  put_vector(out, has_opt ? m.opt.first_moment : Vector::Zero(m.params.size()));
  put_vector(out, has_opt ? m.opt.second_moment : Vector::Zero(m.params.size()));
  put<std::int64_t>(out, m.opt.step);
  require(static_cast<bool>(out), ErrorCategory::io, "failed writing checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCategory::io, "cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  require(static_cast<bool>(in) && magic == kMagic, ErrorCategory::io, path.string() + " is not a checkpoint");
  const auto header_bytes = get<std::uint32_t>(in);
  std::string text(header_bytes, '\0');
  in.read(text.data(), header_bytes);
  require(static_cast<bool>(in), ErrorCategory::io, "truncated checkpoint header");

  LoadedCheckpoint out;
  try {
    const json header = json::parse(text);
    out.state.arch = arch_from_json(header.at("arch"));
    out.meta.schema_hash = header.at("schema_hash").get<std::uint64_t>();
    out.meta.stage = header.at("stage").get<std::string>();
    out.meta.epoch = header.at("epoch").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::io, "bad checkpoint header: " + std::string(e.what()));
  }
  out.meta.metric = get<double>(in);
  const auto n = get<std::uint64_t>(in);
  require(static_cast<Eigen::Index>(n) == out.state.arch.param_count(), ErrorCategory::io,
          "checkpoint parameter count disagrees with its arch");
  out.state.params = get_vector(in, n);
  out.state.opt.first_moment = get_vector(in, n);
  out.state.opt.second_moment = get_vector(in, n);
  out.state.opt.step = get<std::int64_t>(in);
  require(out.state.params.allFinite(), ErrorCategory::numeric, "checkpoint holds non-finite parameters");
  return out;
}

}  // namespace pes
