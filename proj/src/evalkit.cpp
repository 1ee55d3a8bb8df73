#include "cstalk/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>
#include <sstream>

#include "cstalk/container.hpp"
#include "cstalk/error.hpp"

namespace cstalk {

namespace {

constexpr int kDefaultVertices = 200;
constexpr int kLipVertices = 30, kEyeVertices = 20, kForeheadVertices = 20;

std::vector<int> range(int lo, int hi) {
  std::vector<int> v;
  for (int i = lo; i < hi; ++i) v.push_back(i);
  return v;
}

Eigen::MatrixXd as_float32(const Eigen::MatrixXd& m) { return m.cast<float>().cast<double>(); }

}  // namespace

void VertexBasis::validate() const {
  if (rest.cols() != 3 || rest.rows() < 1) throw ConfigError("rest positions must be V x 3 with V >= 1");
  if (deltas.cols() != 3 * rest.rows()) throw ConfigError("deltas must be R x 3V");
  if (!rest.allFinite() || !deltas.allFinite()) throw ConfigError("vertex basis holds non-finite values");
  std::set<int> seen;
  for (const auto* set : {&lip, &eye, &forehead})
    for (int v : *set) {
      if (v < 0 || v >= vertices()) throw ConfigError("region vertex " + std::to_string(v) + " out of range");
      if (!seen.insert(v).second) throw ConfigError("vertex " + std::to_string(v) + " belongs to two regions");
    }
}

VertexBasis VertexBasis::make_default(const RigRegistry& registry, std::uint64_t seed) {
  VertexBasis b;
  b.lip = range(0, kLipVertices);
  b.eye = range(kLipVertices, kLipVertices + kEyeVertices);
  b.forehead = range(kLipVertices + kEyeVertices, kLipVertices + kEyeVertices + kForeheadVertices);
  const std::vector<int> other = range(kLipVertices + kEyeVertices + kForeheadVertices, kDefaultVertices);

  std::mt19937_64 rng(seed ^ 0x7665727465780000ULL);
  std::uniform_real_distribution<double> box(-50.0, 50.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  b.rest = Eigen::MatrixXd::NullaryExpr(kDefaultVertices, 3, [&] { return box(rng); });
  b.deltas = Eigen::MatrixXd::Zero(registry.size(), 3 * kDefaultVertices);
  for (int r = 0; r < registry.size(); ++r) {
    const Region g = registry.region(r);
    const auto& set = g == Region::lip ? b.lip : g == Region::eye ? b.eye : g == Region::forehead ? b.forehead : other;
    for (int v : set)
      for (int d = 0; d < 3; ++d) b.deltas(r, 3 * v + d) = 3.0 * n01(rng);
  }
  b.rest = as_float32(b.rest);
  b.deltas = as_float32(b.deltas);
  return b;
}

void VertexBasis::save(const std::filesystem::path& path) const {
  validate();
  Container c;
  c.header = {{"kind", "vertex_basis"}, {"regions", {{"lip", lip}, {"eye", eye}, {"forehead", forehead}}}};
  c.arrays.push_back(NamedArray::from_matrix("rest", rest));
  c.arrays.push_back(NamedArray::from_matrix("deltas", deltas));
  save_container(c, path);
}

VertexBasis VertexBasis::load(const std::filesystem::path& path) {
  const Container c = load_container(path);
  if (c.header.value("kind", std::string()) != "vertex_basis")
    throw FormatError(path.string() + " does not hold a vertex basis");
  if (!c.has_array("rest") || !c.has_array("deltas")) throw FormatError(path.string() + " lacks rest or deltas");
  VertexBasis b;
  b.rest = c.array("rest").to_matrix();
  b.deltas = c.array("deltas").to_matrix();
  const auto& regions = c.header.at("regions");
  b.lip = regions.value("lip", std::vector<int>{});
  b.eye = regions.value("eye", std::vector<int>{});
  b.forehead = regions.value("forehead", std::vector<int>{});
  b.validate();
  return b;
}

std::vector<Eigen::MatrixXd> rig_to_vertices(const Eigen::MatrixXd& values, const VertexBasis& basis) {
  if (values.rows() != basis.rigs())
    throw ShapeError("sequence has " + std::to_string(values.rows()) + " rigs, basis has " + std::to_string(basis.rigs()));
  const Eigen::MatrixXd flat = values.transpose() * basis.deltas;  // T x 3V
  std::vector<Eigen::MatrixXd> out;
  out.reserve(static_cast<std::size_t>(values.cols()));
  for (Eigen::Index t = 0; t < values.cols(); ++t) {
    Eigen::MatrixXd p = basis.rest;
    for (int v = 0; v < basis.vertices(); ++v)
      for (int d = 0; d < 3; ++d) p(v, d) += flat(t, 3 * v + d);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Eigen::MatrixXd> rig_to_vertices(const RigCurveSequence& seq, const VertexBasis& basis) {
  return rig_to_vertices(seq.values, basis);
}

double region_error(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, const VertexBasis& basis,
                    const std::vector<int>& region) {
  if (region.empty()) throw ConfigError("vertex region is empty");
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw ShapeError("prediction and ground truth differ in shape");
  if (pred.rows() != basis.rigs())
    throw ShapeError("sequence has " + std::to_string(pred.rows()) + " rigs, basis has " + std::to_string(basis.rigs()));
  if (pred.cols() == 0) throw ShapeError("sequences have no frames");
  // The rest pose cancels in the difference.
  const Eigen::MatrixXd diff = (pred - gt).transpose() * basis.deltas;  // T x 3V
  double total = 0.0;
  for (Eigen::Index t = 0; t < diff.rows(); ++t) {
    double worst = 0.0;
    for (int v : region) worst = std::max(worst, diff.row(t).segment(3 * v, 3).norm());
    total += worst;
  }
  return total / static_cast<double>(diff.rows());
}

double lve(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, const VertexBasis& basis) {
  return region_error(pred, gt, basis, basis.lip);
}

double eve(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, const VertexBasis& basis) {
  std::vector<int> region = basis.eye;
  region.insert(region.end(), basis.forehead.begin(), basis.forehead.end());
  return region_error(pred, gt, basis, region);
}

double lve(const RigCurveSequence& pred, const RigCurveSequence& gt, const VertexBasis& basis) {
  return lve(pred.values, gt.values, basis);
}

double eve(const RigCurveSequence& pred, const RigCurveSequence& gt, const VertexBasis& basis) {
  return eve(pred.values, gt.values, basis);
}

std::vector<std::filesystem::path> export_heatmap(const std::vector<HeatmapItem>& items,
                                                  const std::vector<std::string>& rig_names,
                                                  const std::filesystem::path& dir) {
  if (items.empty()) throw SizeError("no correlation features to export");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  std::vector<Eigen::MatrixXd> sums(kNumClasses);
  std::vector<int> counts(kNumClasses, 0);
  for (const auto& item : items) {
    const auto n = static_cast<Eigen::Index>(rig_names.size());
    if (item.feature.rows() != n || item.feature.cols() != n)
      throw ShapeError("feature '" + item.id + "' is not " + std::to_string(n) + "x" + std::to_string(n));
    written.push_back(dir / (item.id + ".csv"));
    write_text_file(written.back(), format_labeled_matrix(item.feature, rig_names));
    const auto e = static_cast<std::size_t>(index_of(item.emotion));
    if (counts[e]++ == 0) sums[e] = item.feature;
    else sums[e] += item.feature;
  }
  for (int e = 0; e < kNumClasses; ++e) {
    if (counts[static_cast<std::size_t>(e)] == 0) continue;
    written.push_back(dir / ("mean_" + std::string(to_string(static_cast<Emotion>(e))) + ".csv"));
    write_text_file(written.back(), format_labeled_matrix(sums[static_cast<std::size_t>(e)] / counts[static_cast<std::size_t>(e)], rig_names));
  }
  return written;
}

namespace {

/// Leading eigenvector of the PSD matrix m, kept orthogonal to `against`.
Eigen::VectorXd power_vector(const Eigen::MatrixXd& m, const std::vector<Eigen::VectorXd>& against) {
  constexpr double kTol = 1e-9;
  constexpr int kMaxIter = 100000;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::VectorXd v = Eigen::VectorXd::NullaryExpr(m.rows(), [&] { return n01(rng); });
  auto orthogonalize = [&](Eigen::VectorXd& x) {
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& a : against) x -= a.dot(x) * a;
  };
  // Below this the iterate is rounding noise; stop before it is amplified.
  const double floor = 1e-13 * std::max(m.trace(), 1e-300);
  orthogonalize(v);
  v.normalize();
  for (int it = 0; it < kMaxIter; ++it) {
    Eigen::VectorXd w = m * v;
    orthogonalize(w);
    const double norm = w.norm();
    if (!(norm > floor)) return v;  // v already spans the null space
    w /= norm;
    const double change = (w - v).norm();
    v = std::move(w);
    if (change < kTol) break;
  }
  return v;
}

}  // namespace

Eigen::MatrixXd pca_embed(const std::vector<Eigen::MatrixXd>& features) {
  if (features.size() < 3) throw SizeError("PCA needs at least 3 features, got " + std::to_string(features.size()));
  const auto n = static_cast<Eigen::Index>(features.size());
  const Eigen::Index d = features.front().size();
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& f = features[static_cast<std::size_t>(i)];
    if (f.size() != d) throw ShapeError("features differ in size");
    x.row(i) = f.reshaped<Eigen::RowMajor>().transpose();
  }
  x.rowwise() -= x.colwise().mean();

  // Iterate on whichever of the Gram or covariance matrix is smaller.
  const bool gram = n <= d;
  const Eigen::MatrixXd m = gram ? Eigen::MatrixXd(x * x.transpose()) : Eigen::MatrixXd(x.transpose() * x);
  std::vector<Eigen::VectorXd> eig;
  Eigen::MatrixXd dirs(d, 2);
  double lambda[2] = {0.0, 0.0};
  for (int k = 0; k < 2; ++k) {
    eig.push_back(power_vector(m, eig));
    Eigen::VectorXd v = gram ? Eigen::VectorXd(x.transpose() * eig.back()) : eig.back();
    for (int j = 0; j < k; ++j) v -= dirs.col(j).dot(v) * dirs.col(j);
    lambda[k] = eig.back().dot(m * eig.back());
    // A direction with no spread maps every point to zero.
    const double norm = v.norm();
    if (norm > 0.0 && lambda[k] > 1e-18 * lambda[0]) v /= norm;
    else v.setZero();
    Eigen::Index at;
    v.cwiseAbs().maxCoeff(&at);
    if (v[at] < 0.0) v = -v;
    dirs.col(k) = v;
  }
  return x * dirs;
}

void save_embeddings(const std::vector<EmbeddingRow>& rows, const std::filesystem::path& path) {
  std::string text = "clip_id,emotion,x,y\n";
  char buf[64];
  for (const auto& r : rows) {
    text += r.clip_id + "," + std::string(to_string(r.emotion));
    std::snprintf(buf, sizeof buf, ",%.9g,%.9g\n", r.x, r.y);
    text += buf;
  }
  write_text_file(path, text);
}

std::vector<EmbeddingRow> load_embeddings(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line) || line != "clip_id,emotion,x,y") throw SchemaError("embeddings header must be clip_id,emotion,x,y");
  std::vector<EmbeddingRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 4) throw SchemaError("embeddings line " + std::to_string(lineno) + " needs 4 fields");
    const auto e = parse_emotion(f[1]);
    if (!e) throw SchemaError("embeddings line " + std::to_string(lineno) + ": unknown emotion '" + f[1] + "'");
    try {
      rows.push_back({f[0], *e, std::stod(f[2]), std::stod(f[3])});
    } catch (const std::exception&) {
      throw SchemaError("embeddings line " + std::to_string(lineno) + ": bad coordinate");
    }
  }
  return rows;
}

ClusterDistances cluster_distances(const Eigen::MatrixXd& points, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != points.rows()) throw ShapeError("one label per point required");
  double within = 0.0, between = 0.0;
  long nw = 0, nb = 0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    for (Eigen::Index j = i + 1; j < points.rows(); ++j) {
      const double dist = (points.row(i) - points.row(j)).norm();
      if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
        within += dist;
        ++nw;
      } else {
        between += dist;
        ++nb;
      }
    }
  if (nw == 0 || nb == 0) throw SizeError("need at least two points in one cluster and two clusters");
  return {within / static_cast<double>(nw), between / static_cast<double>(nb)};
}

}  // namespace cstalk
