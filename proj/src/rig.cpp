#include "cstalk/rig.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "cstalk/error.hpp"

namespace cstalk {

namespace {

constexpr std::array<std::string_view, 4> kRegionNames = {"lip", "eye", "forehead", "other"};

std::uint64_t fnv1a(std::uint64_t h, std::string_view bytes) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void append_fixed6(std::string& out, double v) {
  char buf[64];
  if (v == 0.0) v = 0.0;  // drop negative zero
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 6);
  if (ec != std::errc{}) throw FormatError("cannot format value");
  std::string_view s(buf, static_cast<std::size_t>(ptr - buf));
  if (s == "-0.000000") s = "0.000000";
  out.append(s);
}

double parse_double(std::string_view s, bool* ok) {
  double v = 0.0;
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  *ok = ec == std::errc{} && ptr == s.data() + s.size() && !s.empty();
  if (!*ok) {
    // from_chars rejects the textual specials; accept them so validation can report them.
    if (s == "nan" || s == "NaN" || s == "-nan") { *ok = true; return std::nan(""); }
    if (s == "inf" || s == "Inf") { *ok = true; return INFINITY; }
    if (s == "-inf" || s == "-Inf") { *ok = true; return -INFINITY; }
  }
  return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  for (auto& l : lines) {
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
  }
  return lines;
}

}  // namespace

std::string_view to_string(Region r) { return kRegionNames[static_cast<std::size_t>(r)]; }

Region parse_region(std::string_view name) {
  for (std::size_t i = 0; i < kRegionNames.size(); ++i) {
    if (kRegionNames[i] == name) return static_cast<Region>(i);
  }
  throw SchemaError("unknown region tag '" + std::string(name) + "'");
}

RigRegistry::RigRegistry(std::vector<std::string> names, std::map<std::string, Region> regions)
    : names_(std::move(names)) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto& n = names_[i];
    if (n.empty()) throw SchemaError("empty rig name at position " + std::to_string(i));
    if (!index_.emplace(n, static_cast<int>(i)).second) throw SchemaError("duplicate rig name '" + n + "'");
    auto it = regions.find(n);
    if (it == regions.end()) throw SchemaError("rig '" + n + "' has no region tag");
    region_of_.push_back(it->second);
    h = fnv1a(h, n);
    h = fnv1a(h, "=");
    h = fnv1a(h, to_string(it->second));
    h = fnv1a(h, ";");
  }
  for (const auto& [name, region] : regions) {
    if (!index_.count(name)) throw SchemaError("region tag for unknown rig '" + name + "'");
  }
  hash_ = h;
}

RigRegistry RigRegistry::make_default() {
  std::vector<std::string> names;
  std::map<std::string, Region> regions;
  auto add = [&](const char* prefix, int count, Region r) {
    for (int i = 0; i < count; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s_%02d", prefix, i);
      names.emplace_back(buf);
      regions[buf] = r;
    }
  };
  add("mouth", 44, Region::lip);
  add("eye", 24, Region::eye);
  add("brow", 16, Region::forehead);
  add("face", 32, Region::other);
  return RigRegistry(std::move(names), std::move(regions));
}

Region RigRegistry::region(const std::string& name) const { return region(index_of(name)); }

int RigRegistry::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw SchemaError("unknown rig '" + name + "'");
  return it->second;
}

std::vector<int> RigRegistry::rigs_in(Region r) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (region_of_[static_cast<std::size_t>(i)] == r) out.push_back(i);
  }
  return out;
}

RigRegistry RigRegistry::load(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!j.contains("names") || !j["names"].is_array() || !j.contains("regions") || !j["regions"].is_object())
    throw SchemaError(path.string() + ": registry needs a \"names\" array and a \"regions\" map");
  std::vector<std::string> names = j["names"].get<std::vector<std::string>>();
  std::map<std::string, Region> regions;
  for (auto& [k, v] : j["regions"].items()) regions[k] = parse_region(v.get<std::string>());
  return RigRegistry(std::move(names), std::move(regions));
}

void RigRegistry::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json j;
  j["names"] = names_;
  nlohmann::ordered_json regions = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < names_.size(); ++i) regions[names_[i]] = std::string(to_string(region_of_[i]));
  j["regions"] = regions;
  write_text_file(path, j.dump(2) + "\n");
}

std::vector<Violation> validate(const RigCurveSequence& seq) {
  std::vector<Violation> out;
  if (seq.values.cols() < 1 || seq.values.rows() < 1) {
    out.push_back({Violation::Kind::empty, -1, -1, "sequence has no frames"});
    return out;
  }
  for (Eigen::Index t = 0; t < seq.values.cols(); ++t) {
    for (Eigen::Index r = 0; r < seq.values.rows(); ++r) {
      const double v = seq.values(r, t);
      if (!std::isfinite(v)) {
        out.push_back({Violation::Kind::non_finite, static_cast<int>(r), static_cast<int>(t), "non-finite value"});
      } else if (v < -1.0 || v > 1.0) {
        out.push_back({Violation::Kind::out_of_range, static_cast<int>(r), static_cast<int>(t),
                       "value " + std::to_string(v) + " outside [-1, 1]"});
      }
    }
  }
  return out;
}

int window_count(int frames, int window, int stride) {
  if (window < 1 || stride < 1) throw ConfigError("window and stride must be >= 1");
  if (frames < window) return 0;
  return (frames - window) / stride + 1;
}

std::vector<RigWindow> slide_windows(const RigCurveSequence& seq, int window, int stride,
                                     const std::string& source_clip, Emotion label) {
  const int n = window_count(seq.frames(), window, stride);
  std::vector<RigWindow> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    out.push_back({seq.values.middleCols(k * stride, window), source_clip, k * stride, label});
  }
  return out;
}

Eigen::MatrixXd canonicalize(const Eigen::MatrixXd& values) {
  Eigen::MatrixXd out(values.rows(), values.cols());
  std::string buf;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    buf.clear();
    append_fixed6(buf, values.data()[i]);
    bool ok = false;
    out.data()[i] = parse_double(buf, &ok);
  }
  return out;
}

std::string format_rig_csv(const RigCurveSequence& seq, const RigRegistry& registry) {
  if (seq.rigs() != registry.size())
    throw ShapeError("sequence has " + std::to_string(seq.rigs()) + " rigs, registry has " +
                     std::to_string(registry.size()));
  std::string out;
  out.reserve(static_cast<std::size_t>(seq.values.size()) * 10 + 64);
  for (int r = 0; r < registry.size(); ++r) {
    if (r) out.push_back(',');
    out += registry.names()[static_cast<std::size_t>(r)];
  }
  out.push_back('\n');
  for (int t = 0; t < seq.frames(); ++t) {
    for (int r = 0; r < seq.rigs(); ++r) {
      if (r) out.push_back(',');
      append_fixed6(out, seq.values(r, t));
    }
    out.push_back('\n');
  }
  return out;
}

RigCurveSequence parse_rig_csv(const std::string& text, const RigRegistry& registry) {
  const auto lines = split_lines(text);
  if (lines.empty()) throw SchemaError("rig CSV is empty");
  const auto header = split(lines[0], ',');

  std::vector<int> column_to_rig;
  std::set<std::string> seen;
  std::vector<std::string> unknown, duplicated;
  for (auto h : header) {
    std::string name(h);
    if (!seen.insert(name).second) duplicated.push_back(name);
    try {
      column_to_rig.push_back(registry.index_of(name));
    } catch (const SchemaError&) {
      unknown.push_back(name);
      column_to_rig.push_back(-1);
    }
  }
  std::vector<std::string> missing;
  for (const auto& n : registry.names()) {
    if (!seen.count(n)) missing.push_back(n);
  }
  if (!unknown.empty() || !missing.empty() || !duplicated.empty()) {
    std::string msg = "rig CSV header does not match registry:";
    auto list = [&](const char* what, const std::vector<std::string>& v) {
      if (v.empty()) return;
      msg += std::string(" ") + what + " [";
      for (std::size_t i = 0; i < v.size(); ++i) msg += (i ? ", " : "") + v[i];
      msg += "]";
    };
    list("extra", unknown);
    list("missing", missing);
    list("duplicated", duplicated);
    throw SchemaError(msg);
  }

  const int frames = static_cast<int>(lines.size()) - 1;
  if (frames < 1) throw ValidationError("rig CSV has no data rows");
  RigCurveSequence seq;
  seq.values.resize(registry.size(), frames);
  seq.registry_hash = registry.hash();
  for (int t = 0; t < frames; ++t) {
    const auto cells = split(lines[static_cast<std::size_t>(t) + 1], ',');
    if (cells.size() != header.size())
      throw SchemaError("row " + std::to_string(t + 1) + " has " + std::to_string(cells.size()) +
                        " cells, expected " + std::to_string(header.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      bool ok = false;
      const double v = parse_double(cells[c], &ok);
      const std::string where = "row " + std::to_string(t + 1) + ", column " + std::to_string(c) + " (" +
                                std::string(header[c]) + ")";
      if (!ok) throw ValidationError("unparsable value '" + std::string(cells[c]) + "' at " + where);
      if (!std::isfinite(v)) throw ValidationError("non-finite value at " + where);
      if (v < -1.0 || v > 1.0) throw ValidationError("value out of [-1, 1] at " + where);
      seq.values(column_to_rig[c], t) = v;
    }
  }
  return seq;
}

RigCurveSequence load_rig_curves(const std::filesystem::path& path, const RigRegistry& registry) {
  return parse_rig_csv(read_text_file(path), registry);
}

void save_rig_curves(const RigCurveSequence& seq, const RigRegistry& registry,
                     const std::filesystem::path& path) {
  write_text_file(path, format_rig_csv(seq, registry));
}

std::string format_labeled_matrix(const Eigen::MatrixXd& m, const std::vector<std::string>& names) {
  if (m.rows() != static_cast<Eigen::Index>(names.size()) || m.cols() != m.rows())
    throw ShapeError("labeled matrix must be square and match its labels");
  std::string out = "rig";
  for (const auto& n : names) out += "," + n;
  out.push_back('\n');
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    out += names[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      out.push_back(',');
      append_fixed6(out, m(r, c));
    }
    out.push_back('\n');
  }
  return out;
}

Eigen::MatrixXd parse_labeled_matrix(const std::string& text, std::vector<std::string>* names) {
  const auto lines = split_lines(text);
  if (lines.empty()) throw FormatError("labeled matrix is empty");
  const auto header = split(lines[0], ',');
  const auto n = static_cast<Eigen::Index>(header.size()) - 1;
  if (n < 1 || static_cast<Eigen::Index>(lines.size()) != n + 1) throw FormatError("labeled matrix is not square");
  if (names) {
    names->clear();
    for (std::size_t i = 1; i < header.size(); ++i) names->emplace_back(header[i]);
  }
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto cells = split(lines[static_cast<std::size_t>(r) + 1], ',');
    if (static_cast<Eigen::Index>(cells.size()) != n + 1)
      throw FormatError("labeled matrix row " + std::to_string(r) + " has wrong width");
    for (Eigen::Index c = 0; c < n; ++c) {
      bool ok = false;
      m(r, c) = parse_double(cells[static_cast<std::size_t>(c) + 1], &ok);
      if (!ok) throw FormatError("bad number in labeled matrix row " + std::to_string(r));
    }
  }
  return m;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace cstalk
