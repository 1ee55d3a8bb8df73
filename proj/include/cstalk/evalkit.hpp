#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cstalk/emotion.hpp"
#include "cstalk/rig.hpp"

namespace cstalk {

/// Linear rig-to-vertex map. Positions are in millimeters.
struct VertexBasis {
  Eigen::MatrixXd rest;    // V x 3
  Eigen::MatrixXd deltas;  // R x 3V, row r = displacement at rig value 1 as (x0 y0 z0 x1 ...)
  std::vector<int> lip, eye, forehead;

  int vertices() const { return static_cast<int>(rest.rows()); }
  int rigs() const { return static_cast<int>(deltas.rows()); }
  /// Throws ConfigError on bad shapes, non-finite values, out-of-range or
  /// overlapping region sets.
  void validate() const;

  /// V = 200 with lip/eye/forehead sets of 30/20/20 vertices; each rig moves
  /// only the vertices of its own region tag.
  static VertexBasis make_default(const RigRegistry& registry, std::uint64_t seed = 7);

  void save(const std::filesystem::path& path) const;
  static VertexBasis load(const std::filesystem::path& path);
};

/// Per-frame V x 3 positions: rest + sum_r value_r(t) * delta_r.
std::vector<Eigen::MatrixXd> rig_to_vertices(const RigCurveSequence& seq, const VertexBasis& basis);
std::vector<Eigen::MatrixXd> rig_to_vertices(const Eigen::MatrixXd& values, const VertexBasis& basis);

/// Mean over frames of the largest vertex distance within the region.
double region_error(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, const VertexBasis& basis,
                    const std::vector<int>& region);
double lve(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, const VertexBasis& basis);
double eve(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, const VertexBasis& basis);
double lve(const RigCurveSequence& pred, const RigCurveSequence& gt, const VertexBasis& basis);
double eve(const RigCurveSequence& pred, const RigCurveSequence& gt, const VertexBasis& basis);

struct HeatmapItem {
  std::string id;
  Emotion emotion = Emotion::neutral;
  Eigen::MatrixXd feature;  // R x R
};

/// Writes <dir>/<id>.csv for every item and <dir>/mean_<emotion>.csv per
/// emotion present. Returns the written paths.
std::vector<std::filesystem::path> export_heatmap(const std::vector<HeatmapItem>& items,
                                                  const std::vector<std::string>& rig_names,
                                                  const std::filesystem::path& dir);

/// Rows of the result are the inputs projected onto the top two principal
/// components. Each component's largest-magnitude loading is positive.
/// Throws SizeError for fewer than 3 features.
Eigen::MatrixXd pca_embed(const std::vector<Eigen::MatrixXd>& features);

struct EmbeddingRow {
  std::string clip_id;
  Emotion emotion = Emotion::neutral;
  double x = 0.0;
  double y = 0.0;
};
void save_embeddings(const std::vector<EmbeddingRow>& rows, const std::filesystem::path& path);
std::vector<EmbeddingRow> load_embeddings(const std::filesystem::path& path);

/// Mean Euclidean distance over pairs of rows sharing a label and over pairs
/// that differ.
struct ClusterDistances {
  double within = 0.0;
  double between = 0.0;
};
ClusterDistances cluster_distances(const Eigen::MatrixXd& points, const std::vector<int>& labels);

}  // namespace cstalk
