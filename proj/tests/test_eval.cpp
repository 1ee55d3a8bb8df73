#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "cstalk/error.hpp"
#include "cstalk/evalkit.hpp"
#include "suites.hpp"

using namespace cstalk;
namespace fs = std::filesystem;

TEST_CASE("rig_to_vertices is the linear basis map") {
  const auto reg = RigRegistry::make_default();
  const auto b = VertexBasis::make_default(reg);
  CHECK(b.vertices() == 200);
  CHECK(b.lip.size() == 30);
  CHECK(b.eye.size() == 20);
  CHECK(b.forehead.size() == 20);
  b.validate();

  const auto zero = rig_to_vertices(Eigen::MatrixXd::Zero(reg.size(), 3), b);
  REQUIRE(zero.size() == 3);
  CHECK(zero[2] == b.rest);

  Eigen::MatrixXd one = Eigen::MatrixXd::Zero(reg.size(), 1);
  one(17, 0) = 1.0;
  const auto p = rig_to_vertices(one, b);
  for (int v = 0; v < 200; ++v)
    for (int d = 0; d < 3; ++d) CHECK(p[0](v, d) == b.rest(v, d) + b.deltas(17, 3 * v + d));

  std::mt19937_64 rng(3);
  const Eigen::MatrixXd x = suites::random_values(reg.size(), 4, rng), y = suites::random_values(reg.size(), 4, rng);
  const double a = 0.7, c = -1.9;
  const auto fx = rig_to_vertices(x, b), fy = rig_to_vertices(y, b), fxy = rig_to_vertices(a * x + c * y, b);
  for (int t = 0; t < 4; ++t)
    CHECK((fxy[static_cast<std::size_t>(t)] - (a * fx[static_cast<std::size_t>(t)] + c * fy[static_cast<std::size_t>(t)] - (a + c - 1.0) * b.rest)).cwiseAbs().maxCoeff() < 1e-9);

  // Each rig moves only the vertices of its own region.
  for (int r = 0; r < reg.size(); ++r)
    for (int v = 0; v < 70; ++v) {
      const bool own = reg.region(r) == (v < 30 ? Region::lip : v < 50 ? Region::eye : Region::forehead);
      if (!own) CHECK(b.deltas.row(r).segment(3 * v, 3).isZero(0.0));
    }
  CHECK_THROWS_AS(rig_to_vertices(Eigen::MatrixXd::Zero(5, 2), b), ShapeError);
}

TEST_CASE("LVE and EVE on hand-built cases") {
  const auto b = suites::hand_basis();
  const Eigen::MatrixXd gt = Eigen::MatrixXd::Zero(2, 10);
  Eigen::MatrixXd lip = gt;
  lip(0, 3) = 1.0;
  CHECK(std::abs(lve(lip, gt, b) - 0.2) < 1e-9);
  CHECK(eve(lip, gt, b) == 0.0);
  Eigen::MatrixXd brow = gt;
  brow(1, 6) = 1.0;
  CHECK(std::abs(eve(brow, gt, b) - 0.2) < 1e-9);
  CHECK(lve(brow, gt, b) == 0.0);
  CHECK(lve(gt, gt, b) == 0.0);
  CHECK(eve(gt, gt, b) == 0.0);

  auto no_lip = b;
  no_lip.lip.clear();
  CHECK_THROWS_AS(lve(lip, gt, no_lip), ConfigError);
  CHECK_THROWS_AS(lve(lip, Eigen::MatrixXd::Zero(2, 9), b), ShapeError);
  auto clash = b;
  clash.eye = {0};
  CHECK_THROWS_AS(clash.validate(), ConfigError);
}

TEST_CASE("LVE and EVE agree with a two-loop reference") {
  const auto reg = RigRegistry::make_default();
  const auto b = VertexBasis::make_default(reg, 11);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 3; ++trial) {
    const Eigen::MatrixXd pred = suites::random_values(reg.size(), 20, rng), gt = suites::random_values(reg.size(), 20, rng);
    std::vector<int> ef = b.eye;
    ef.insert(ef.end(), b.forehead.begin(), b.forehead.end());
    CHECK(std::abs(lve(pred, gt, b) - suites::two_loop(pred, gt, b, b.lip)) < 1e-9);
    CHECK(std::abs(eve(pred, gt, b) - suites::two_loop(pred, gt, b, ef)) < 1e-9);
    CHECK(lve(pred, gt, b) > 0.0);

    // Shuffling the untagged vertices' deltas changes nothing inside the regions.
    auto shuffled = b;
    for (int v = 70; v < 200; ++v) {
      const int w = 70 + static_cast<int>(rng() % 130);
      const Eigen::MatrixXd tmp = shuffled.deltas.middleCols(3 * v, 3);
      shuffled.deltas.middleCols(3 * v, 3) = shuffled.deltas.middleCols(3 * w, 3);
      shuffled.deltas.middleCols(3 * w, 3) = tmp;
    }
    CHECK(lve(pred, gt, shuffled) == lve(pred, gt, b));
    CHECK(eve(pred, gt, shuffled) == eve(pred, gt, b));
  }
}

TEST_CASE("vertex basis file round trip") {
  const auto b = VertexBasis::make_default(RigRegistry::make_default());
  const auto path = fs::temp_directory_path() / "cstalk_basis_test.bin";
  b.save(path);
  const auto c = VertexBasis::load(path);
  CHECK(c.rest == b.rest);
  CHECK(c.deltas == b.deltas);
  CHECK(c.lip == b.lip);
  CHECK(c.eye == b.eye);
  CHECK(c.forehead == b.forehead);
  fs::remove(path);
}

TEST_CASE("heatmap export") {
  const std::vector<std::string> names = {"a", "b", "c"};
  const auto dir = fs::temp_directory_path() / "cstalk_heatmap_test";
  fs::remove_all(dir);
  const auto zero = export_heatmap({{"z", Emotion::sad, Eigen::MatrixXd::Zero(3, 3)}}, names, dir);
  CHECK(zero.size() == 2);
  std::vector<std::string> got;
  CHECK(parse_labeled_matrix(read_text_file(dir / "z.csv"), &got).isZero(0.0));
  CHECK(got == names);

  std::mt19937_64 rng(4);
  const Eigen::MatrixXd f = suites::random_values(3, 3, rng) * 5.0;
  const auto files = export_heatmap({{"p", Emotion::happy, f}, {"q", Emotion::happy, f}, {"r", Emotion::happy, f}}, names, dir);
  CHECK(files.back().filename() == "mean_happy.csv");
  CHECK((parse_labeled_matrix(read_text_file(dir / "p.csv")) - f).cwiseAbs().maxCoeff() <= 5e-7);
  CHECK((parse_labeled_matrix(read_text_file(dir / "mean_happy.csv")) - f).cwiseAbs().maxCoeff() <= 5e-7);
  CHECK_THROWS_AS(export_heatmap({}, names, dir), SizeError);
  fs::remove_all(dir);
}

TEST_CASE("PCA embedding") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01(0.0, 1.0);

  // Points on a line: no spread along the second component.
  const Eigen::MatrixXd dir = suites::random_values(4, 4, rng);
  std::vector<Eigen::MatrixXd> line;
  for (int i = 0; i < 7; ++i) line.push_back(1.0 + (i - 3.0) * 0.7 * dir.array());
  const Eigen::MatrixXd pl = pca_embed(line);
  CHECK(pl.col(1).squaredNorm() < 1e-9 * pl.col(0).squaredNorm());

  // Against a full eigendecomposition, and no worse than random rank-2 projections.
  for (int trial = 0; trial < 2; ++trial) {
    const int n = trial == 0 ? 12 : 40, d = trial == 0 ? 30 : 6;  // both Gram and covariance paths
    std::vector<Eigen::MatrixXd> feats;
    Eigen::MatrixXd x(n, d);
    const Eigen::VectorXd scale = Eigen::VectorXd::LinSpaced(d, 3.0, 0.2);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) x(i, j) = scale[j] * n01(rng);
      feats.push_back(x.row(i));
    }
    const Eigen::MatrixXd p = pca_embed(feats);
    x.rowwise() -= x.colwise().mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(x.transpose() * x);
    for (int k = 0; k < 2; ++k) {
      const Eigen::VectorXd ref = x * es.eigenvectors().col(d - 1 - k);
      CHECK(std::min((p.col(k) - ref).norm(), (p.col(k) + ref).norm()) < 1e-6 * ref.norm());
    }
    const double captured = p.squaredNorm();
    for (int q = 0; q < 100; ++q) {
      const Eigen::MatrixXd g = Eigen::MatrixXd::NullaryExpr(d, 2, [&] { return n01(rng); });
      const Eigen::MatrixXd basis = g.householderQr().householderQ() * Eigen::MatrixXd::Identity(d, 2);
      CHECK(captured >= (x * basis).squaredNorm() - 1e-9);
    }

    // Duplicated inputs keep the same directions.
    auto twice = feats;
    twice.insert(twice.end(), feats.begin(), feats.end());
    const Eigen::MatrixXd p2 = pca_embed(twice);
    CHECK((p2.topRows(n) - p).cwiseAbs().maxCoeff() < 1e-6 * p.cwiseAbs().maxCoeff());
    CHECK(pca_embed(feats) == p);
  }
  CHECK_THROWS_AS(pca_embed({Eigen::MatrixXd::Ones(2, 2), Eigen::MatrixXd::Zero(2, 2)}), SizeError);
}

TEST_CASE("embeddings CSV and cluster distances") {
  const std::vector<EmbeddingRow> rows = {{"neutral_000", Emotion::neutral, 1.5, -2.25}, {"sad_003", Emotion::sad, 1e-7, 3.0}};
  const auto path = fs::temp_directory_path() / "cstalk_embed_test.csv";
  save_embeddings(rows, path);
  CHECK(read_text_file(path).rfind("clip_id,emotion,x,y\n", 0) == 0);
  const auto back = load_embeddings(path);
  REQUIRE(back.size() == 2);
  CHECK(back[1].clip_id == "sad_003");
  CHECK(back[1].emotion == Emotion::sad);
  CHECK(back[0].y == -2.25);
  CHECK(back[1].x == doctest::Approx(1e-7));
  fs::remove(path);

  Eigen::MatrixXd pts(4, 2);
  pts << 0, 0, 0, 1, 10, 0, 10, 1;
  const auto cd = cluster_distances(pts, {0, 0, 1, 1});
  CHECK(cd.within == doctest::Approx(1.0));
  CHECK(cd.between == doctest::Approx((10.0 + 10.0 + 2 * std::sqrt(101.0)) / 4.0));
}
