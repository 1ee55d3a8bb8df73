#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cstalk/emotion.hpp"

namespace cstalk {

enum class Region { lip, eye, forehead, other };

std::string_view to_string(Region r);
Region parse_region(std::string_view name);

inline constexpr int kDefaultRigCount = 116;
inline constexpr int kWindowFrames = 96;
inline constexpr int kWindowStrideFrames = 5;
inline constexpr double kFrameRate = 30.0;

/// Ordered set of control rigs with one region tag each.
class RigRegistry {
 public:
  RigRegistry() = default;
  /// Throws SchemaError on duplicate or untagged names.
  RigRegistry(std::vector<std::string> names, std::map<std::string, Region> regions);

  /// 116 rigs: 44 lip, 24 eye, 16 forehead, 32 other.
  static RigRegistry make_default();

  int size() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }
  Region region(int rig) const { return region_of_[static_cast<std::size_t>(rig)]; }
  Region region(const std::string& name) const;
  int index_of(const std::string& name) const;
  std::vector<int> rigs_in(Region r) const;

  /// FNV-1a over names and tags; binds sequences and checkpoints to a registry.
  std::uint64_t hash() const { return hash_; }

  static RigRegistry load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> names_;
  std::vector<Region> region_of_;
  std::map<std::string, int> index_;
  std::uint64_t hash_ = 0;
};

/// R x T rig values; rows follow registry order.
struct RigCurveSequence {
  Eigen::MatrixXd values;
  double frame_rate = kFrameRate;
  std::uint64_t registry_hash = 0;

  int rigs() const { return static_cast<int>(values.rows()); }
  int frames() const { return static_cast<int>(values.cols()); }
};

struct RigWindow {
  Eigen::MatrixXd values;  // R x 96
  std::string source_clip;
  int start_frame = 0;
  Emotion label = Emotion::neutral;
};

struct Violation {
  enum class Kind { non_finite, out_of_range, empty };
  Kind kind;
  int rig;
  int frame;
  std::string reason;
};

std::vector<Violation> validate(const RigCurveSequence& seq);

/// floor((T - window) / stride) + 1 when T >= window, else 0.
int window_count(int frames, int window, int stride);

std::vector<RigWindow> slide_windows(const RigCurveSequence& seq, int window = kWindowFrames,
                                     int stride = kWindowStrideFrames,
                                     const std::string& source_clip = {},
                                     Emotion label = Emotion::neutral);

/// Rounds every value to the 6-decimal grid the CSV format stores.
Eigen::MatrixXd canonicalize(const Eigen::MatrixXd& values);

/// Text form of the rig-CSV; `save_rig_curves` writes exactly these bytes.
std::string format_rig_csv(const RigCurveSequence& seq, const RigRegistry& registry);
RigCurveSequence parse_rig_csv(const std::string& text, const RigRegistry& registry);

RigCurveSequence load_rig_curves(const std::filesystem::path& path, const RigRegistry& registry);
void save_rig_curves(const RigCurveSequence& seq, const RigRegistry& registry,
                     const std::filesystem::path& path);

/// Square matrix CSV with rig names on both axes (first column holds row names).
std::string format_labeled_matrix(const Eigen::MatrixXd& m, const std::vector<std::string>& names);
Eigen::MatrixXd parse_labeled_matrix(const std::string& text, std::vector<std::string>* names = nullptr);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace cstalk
