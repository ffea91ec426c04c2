#include "pes/schema.hpp"

#include "pes/error.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace pes {

namespace {

constexpr std::string_view kTennisText = R"(# Tennis fine-label schema (14 classes).
classes near far serve return stroke fh bh gs slice volley smash drop lob approach
group 0 1
group 2 3 4
unless 2 = 1 group 5 6
unless 2 = 1 group 7 8 9 10 11 12
binary 13
)";

std::uint64_t bits_of(const Eigen::Ref<const Vector>& v) {
  std::uint64_t key = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (v[i] != 0.0) key |= (std::uint64_t{1} << i);
  return key;
}

bool is_hard(const Eigen::Ref<const Vector>& v) {
  return std::all_of(v.data(), v.data() + v.size(), [](double x) { return x == 0.0 || x == 1.0; });
}

int parse_int(const std::string& tok, int line) {
  try {
    std::size_t used = 0;
    int v = std::stoi(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCategory::schema, "schema line " + std::to_string(line) + ": expected integer, got '" + tok + "'");
  }
}

}  // namespace

LabelSchema::LabelSchema(std::vector<std::string> class_names, std::vector<std::vector<int>> groups,
                         std::vector<ConditionalGroup> conditional_groups, std::vector<int> independent_binary)
    : class_names_(std::move(class_names)),
      groups_(std::move(groups)),
      conditional_(std::move(conditional_groups)),
      binary_(std::move(independent_binary)) {
  const int c = num_classes();
  require(c > 0, ErrorCategory::schema, "schema has no classes");
  require(c <= 64, ErrorCategory::schema, "schema supports at most 64 classes");

  // 0 = unowned, 1 = unconditional group, 2 = conditional group, 3 = binary
  std::vector<int> owner(static_cast<std::size_t>(c), 0);
  auto claim = [&](int idx, int kind) {
    require(idx >= 0 && idx < c, ErrorCategory::schema, "class index " + std::to_string(idx) + " out of range");
    require(owner[static_cast<std::size_t>(idx)] == 0, ErrorCategory::schema,
            "class index " + std::to_string(idx) + " appears in more than one directive");
    owner[static_cast<std::size_t>(idx)] = kind;
  };
  for (const auto& g : groups_) {
    require(!g.empty(), ErrorCategory::schema, "empty group");
    for (int i : g) claim(i, 1);
  }
  for (const auto& g : conditional_) {
    require(!g.members.empty(), ErrorCategory::schema, "empty conditional group");
    for (int i : g.members) claim(i, 2);
  }
  for (int i : binary_) claim(i, 3);
  for (int i = 0; i < c; ++i)
    require(owner[static_cast<std::size_t>(i)] != 0, ErrorCategory::schema,
            "class index " + std::to_string(i) + " is not covered by any directive");
  for (const auto& g : conditional_) {
    require(g.gate_index >= 0 && g.gate_index < c, ErrorCategory::schema, "gate index out of range");
    const int kind = owner[static_cast<std::size_t>(g.gate_index)];
    require(kind == 1 || kind == 3, ErrorCategory::schema,
            "gate index must belong to an unconditional group or a binary");
    require(g.gate_value == 0 || g.gate_value == 1, ErrorCategory::schema, "gate value must be 0 or 1");
  }
}

const LabelSchema& LabelSchema::tennis() {
  static const LabelSchema schema = parse(kTennisText);
  return schema;
}

std::string_view LabelSchema::tennis_text() { return kTennisText; }

LabelSchema LabelSchema::parse(std::string_view text) {
  std::vector<std::string> names;
  std::vector<std::vector<int>> groups;
  std::vector<ConditionalGroup> conditional;
  std::vector<int> binary;
  bool have_classes = false;

  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    std::istringstream ls(raw);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;

    const std::string& head = tok[0];
    if (head == "classes") {
      require(!have_classes, ErrorCategory::schema, "duplicate 'classes' directive");
      names.assign(tok.begin() + 1, tok.end());
      have_classes = true;
    } else if (head == "group") {
      std::vector<int> g;
      for (std::size_t i = 1; i < tok.size(); ++i) g.push_back(parse_int(tok[i], line_no));
      groups.push_back(std::move(g));
    } else if (head == "unless") {
      require(tok.size() >= 6 && tok[2] == "=" && tok[4] == "group", ErrorCategory::schema,
              "schema line " + std::to_string(line_no) + ": expected 'unless <i> = <v> group ...'");
      ConditionalGroup g;
      g.gate_index = parse_int(tok[1], line_no);
      g.gate_value = parse_int(tok[3], line_no);
      for (std::size_t i = 5; i < tok.size(); ++i) g.members.push_back(parse_int(tok[i], line_no));
      conditional.push_back(std::move(g));
    } else if (head == "binary") {
      for (std::size_t i = 1; i < tok.size(); ++i) binary.push_back(parse_int(tok[i], line_no));
    } else {
      fail(ErrorCategory::schema, "schema line " + std::to_string(line_no) + ": unknown directive '" + head + "'");
    }
  }
  require(have_classes, ErrorCategory::schema, "schema is missing a 'classes' directive");
  return LabelSchema(std::move(names), std::move(groups), std::move(conditional), std::move(binary));
}

LabelSchema LabelSchema::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCategory::io, "cannot open schema file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string LabelSchema::to_text() const {
  std::ostringstream out;
  out << "classes";
  for (const auto& n : class_names_) out << ' ' << n;
  out << '\n';
  for (const auto& g : groups_) {
    out << "group";
    for (int i : g) out << ' ' << i;
    out << '\n';
  }
  for (const auto& g : conditional_) {
    out << "unless " << g.gate_index << " = " << g.gate_value << " group";
    for (int i : g.members) out << ' ' << i;
    out << '\n';
  }
  if (!binary_.empty()) {
    out << "binary";
    for (int i : binary_) out << ' ' << i;
    out << '\n';
  }
  return out.str();
}

std::uint64_t LabelSchema::hash() const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : to_text()) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

bool validate_hard_vector(const Eigen::Ref<const Vector>& v, const LabelSchema& s) {
  require(v.size() == s.num_classes(), ErrorCategory::schema,
          "label vector has length " + std::to_string(v.size()) + ", schema expects " +
              std::to_string(s.num_classes()));
  if (!is_hard(v)) return false;

  auto active_count = [&](const std::vector<int>& idxs) {
    int n = 0;
    for (int i : idxs) n += v[i] == 1.0 ? 1 : 0;
    return n;
  };
  for (const auto& g : s.groups())
    if (active_count(g) != 1) return false;
  for (const auto& g : s.conditional_groups()) {
    const bool open = static_cast<int>(v[g.gate_index]) != g.gate_value;
    if (active_count(g.members) != (open ? 1 : 0)) return false;
  }
  return true;
}

EventVocab::EventVocab(const LabelSchema& s) {
  const int c = s.num_classes();
  std::vector<FineLabelVector> partial{FineLabelVector::Zero(c)};

  auto expand_one_hot = [](std::vector<FineLabelVector>& in, const std::vector<int>& members) {
    std::vector<FineLabelVector> out;
    out.reserve(in.size() * members.size());
    for (const auto& v : in)
      for (int m : members) {
        FineLabelVector w = v;
        w[m] = 1.0;
        out.push_back(std::move(w));
      }
    in = std::move(out);
  };

  for (const auto& g : s.groups()) expand_one_hot(partial, g);
  for (int b : s.independent_binary()) {
    std::vector<FineLabelVector> out;
    out.reserve(partial.size() * 2);
    for (const auto& v : partial) {
      out.push_back(v);
      FineLabelVector w = v;
      w[b] = 1.0;
      out.push_back(std::move(w));
    }
    partial = std::move(out);
  }
  // Gates are resolved by now: they only reference unconditional groups or binaries.
  for (const auto& g : s.conditional_groups()) {
    std::vector<FineLabelVector> out;
    for (const auto& v : partial) {
      if (static_cast<int>(v[g.gate_index]) != g.gate_value) {
        for (int m : g.members) {
          FineLabelVector w = v;
          w[m] = 1.0;
          out.push_back(std::move(w));
        }
      } else {
        out.push_back(v);
      }
    }
    partial = std::move(out);
  }

  std::sort(partial.begin(), partial.end(), [](const FineLabelVector& a, const FineLabelVector& b) {
    return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
  });
  entries_ = std::move(partial);
  for (std::size_t i = 0; i < entries_.size(); ++i) ids_.emplace(bits_of(entries_[i]), static_cast<int>(i));
}

int EventVocab::index_of(const Eigen::Ref<const Vector>& hard) const {
  if (hard.size() == 0 || (!entries_.empty() && hard.size() != entries_.front().size())) return -1;
  if (!is_hard(hard)) return -1;
  auto it = ids_.find(bits_of(hard));
  return it == ids_.end() ? -1 : it->second;
}

EventVocab event_vocab(const LabelSchema& s) { return EventVocab(s); }

std::vector<int> EventSequence::class_ids() const {
  std::vector<int> ids;
  ids.reserve(events.size());
  for (const auto& e : events) ids.push_back(e.class_id);
  return ids;
}

bool EventSequence::is_valid(int vocab_size) const {
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].class_id < 0 || events[i].class_id >= vocab_size) return false;
    if (events[i].timestamp < 0) return false;
    if (i > 0 && events[i].timestamp <= events[i - 1].timestamp) return false;
  }
  return true;
}

}  // namespace pes
