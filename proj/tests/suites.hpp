#pragma once

// Check batteries shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cstalk/corrnet.hpp"
#include "cstalk/evalkit.hpp"
#include "cstalk/genet.hpp"
#include "cstalk/ops.hpp"
#include "cstalk/optim.hpp"
#include "oracles.hpp"

namespace suites {

using cstalk::ad::Matrix;
using cstalk::ad::Var;
namespace ad = cstalk::ad;

/// grad_check error of every exported differentiable op at one seed.
inline std::vector<std::pair<std::string, double>> op_grad_errors(std::uint64_t seed) {
  std::mt19937_64 rng(100 + seed);
  auto rnd = [&](int r, int c) { return oracle::random_matrix(r, c, rng); };
  const Matrix a = rnd(4, 5), b = rnd(5, 3), c = rnd(4, 5), row = rnd(1, 5);
  const Matrix p45 = rnd(4, 5), p43 = rnd(4, 3), p44 = rnd(4, 4), p410 = rnd(4, 10);
  const Matrix k3 = rnd(15, 3), k3b = rnd(15, 3);
  const Matrix q = rnd(4, 4), kk = rnd(4, 4), vv = rnd(4, 4);
  // Contract the op output with a fixed probe so every entry contributes.
  auto probe = [](const Var& x, const Matrix& p) {
    return ad::sum_all(ad::matmul_nt(ad::flatten(x), ad::flatten(ad::constant(p))));
  };
  using F = std::function<Var(const Var&)>;
  std::vector<std::pair<std::string, double>> out;
  auto run = [&](const std::string& name, F f, const Matrix& at) { out.emplace_back(name, cstalk::grad_check(f, at)); };

  run("add", [&](const Var& x) { return probe(ad::add(x, ad::constant(c)), p45); }, a);
  run("sub", [&](const Var& x) { return probe(ad::sub(ad::constant(c), x), p45); }, a);
  run("scale", [&](const Var& x) { return probe(ad::scale(x, -1.7), p45); }, a);
  run("matmul/lhs", [&](const Var& x) { return probe(ad::matmul(x, ad::constant(b)), p43); }, a);
  run("matmul/rhs", [&](const Var& x) { return probe(ad::matmul(ad::constant(a), x), p43); }, b);
  run("matmul_nt/lhs", [&](const Var& x) { return probe(ad::matmul_nt(x, ad::constant(a)), p44); }, c);
  run("matmul_nt/rhs", [&](const Var& x) { return probe(ad::matmul_nt(ad::constant(a), x), p44); }, c);
  run("transpose", [&](const Var& x) { return probe(ad::transpose(x), Matrix(p45.transpose())); }, a);
  run("add_row", [&](const Var& x) { return probe(ad::add_row(ad::constant(a), x), p45); }, row);
  run("relu", [&](const Var& x) { return probe(ad::relu(x), p45); }, a);
  run("tanh", [&](const Var& x) { return probe(ad::tanh(x), p45); }, a);
  run("softmax_rows", [&](const Var& x) { return probe(ad::softmax_rows(x), p45); }, a);
  run("cols", [&](const Var& x) { return probe(ad::cols(x, 1, 3), Matrix(p45.leftCols(3))); }, a);
  run("hcat", [&](const Var& x) { return probe(ad::hcat({x, ad::scale(x, 2.0)}), p410); }, a);
  run("vcat", [&](const Var& x) { return probe(ad::vcat({x, ad::constant(c)}), Matrix(p410.reshaped(8, 5))); }, a);
  run("cross_entropy_rows", [&](const Var& x) { return ad::cross_entropy_rows(x, {0, 4, 2, 1}); }, a);
  run("flatten", [&](const Var& x) { return probe(ad::flatten(x), Matrix(p45.reshaped<Eigen::RowMajor>(1, 20))); }, a);
  run("row_mean", [&](const Var& x) { return probe(ad::row_mean(x), row); }, a);
  run("gather_row", [&](const Var& x) { return probe(ad::gather_row(x, 2), row); }, a);
  run("sum_squares", [&](const Var& x) { return ad::sum_squares(x); }, a);
  run("mean", [&](const Var& x) { return ad::mean({ad::sum_squares(x), ad::sum_all(x)}); }, a);
  run("layer_norm/x", [&](const Var& x) { return probe(ad::layer_norm_rows(x, ad::constant(row), ad::constant(row)), p45); }, a);
  run("layer_norm/gain", [&](const Var& g) { return probe(ad::layer_norm_rows(ad::constant(a), g, ad::constant(row)), p45); }, row);
  run("layer_norm/bias", [&](const Var& g) { return probe(ad::layer_norm_rows(ad::constant(a), ad::constant(row), g), p45); }, row);
  run("conv1d/input", [&](const Var& x) { return probe(ad::dilated_conv1d(x, ad::constant(k3), 2), p43); }, a);
  run("conv1d/kernel", [&](const Var& w) { return probe(ad::dilated_conv1d(ad::constant(a), w, 1), p43); }, k3b);
  run("mse_velocity_loss", [&](const Var& x) { return ad::mse_velocity_loss(x, c); }, a);
  run("cross_entropy", [&](const Var& x) { return ad::cross_entropy(x, static_cast<int>(seed % 5)); }, row);
  run("attention/q", [&](const Var& x) { return probe(ad::attention(x, ad::constant(kk), ad::constant(vv)).output, p44); }, q);
  run("attention/k", [&](const Var& x) { return probe(ad::attention(ad::constant(q), x, ad::constant(vv)).output, p44); }, kk);
  run("attention/v", [&](const Var& x) { return probe(ad::attention(ad::constant(q), ad::constant(kk), x).output, p44); }, vv);
  run("attention/scores", [&](const Var& x) { return probe(ad::attention(x, ad::constant(kk), ad::constant(vv)).scores, p44); }, q);
  run("cross_entropy∘attention", [&](const Var& x) {
    auto r = ad::attention(x, ad::constant(kk), ad::constant(vv));
    return ad::cross_entropy(ad::flatten(ad::cols(r.output, 0, 1)), static_cast<int>(seed % 4));
  }, q);
  return out;
}

inline cstalk::CorrConfig tiny_corr_config(cstalk::CorrReadout readout = cstalk::CorrReadout::scores) {
  cstalk::CorrConfig c;
  c.rigs = 5;
  c.frames = 12;
  c.layers = 2;
  c.heads = 2;
  c.d_model = 4;
  c.ffn = 6;
  c.hidden = 7;
  c.readout = readout;
  return c;
}

inline cstalk::GenConfig tiny_gen_config() {
  cstalk::GenConfig g;
  g.rigs = 5;
  g.frames = 12;
  g.feature_dim = 3;
  g.latent = 4;
  g.channels = 4;
  g.dilations = {1, 2};
  g.emotion_dim = 3;
  return g;
}

// Central differences straddling a ReLU kink measure nothing, so evaluation
// points with any relu input closer than this to zero are redrawn. A 1e-5
// step moves pre-activations by far less.
inline constexpr double kKinkMargin = 1e-3;

// Calls `draw` (which must consume `rng`) until `loss` runs clear of kinks.
template <class Draw, class Loss>
int draw_smooth_point(Draw draw, Loss loss) {
  for (int attempt = 0;; ++attempt) {
    draw();
    ad::KinkWatch watch;
    loss();
    if (watch.margin() >= kKinkMargin) return attempt;
    if (attempt == 1000) throw std::runtime_error("no kink-free evaluation point found");
  }
}

/// grad_check error of the classification loss for every corrnet tensor.
inline std::vector<std::pair<std::string, double>> corrnet_grad_errors(std::uint64_t seed, cstalk::CorrReadout readout) {
  std::mt19937_64 rng(500 + seed);
  const cstalk::CorrNet init(tiny_corr_config(readout), seed);
  cstalk::CorrNet net = init;
  std::vector<Var> windows;
  const std::vector<int> labels = {static_cast<int>(seed % 6), static_cast<int>((seed + 3) % 6)};
  auto loss = [&] { return ad::cross_entropy_rows(net.forward(windows).logits, labels); };
  draw_smooth_point(
      [&] {
        net = cstalk::CorrNet(init.config(), init.params().clone());
        // Nonzero biases so no path is trivially dead.
        for (std::size_t i = 0; i < net.params().size(); ++i)
          net.params()[i].mutable_value() += 0.1 * oracle::random_matrix(static_cast<int>(net.params()[i].rows()),
                                                                          static_cast<int>(net.params()[i].cols()), rng);
        windows = {ad::constant(oracle::random_matrix(5, 12, rng)), ad::constant(oracle::random_matrix(5, 12, rng))};
      },
      loss);
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < net.params().size(); ++i) out.emplace_back(net.params().name(i), cstalk::grad_check(loss, net.params()[i]));
  return out;
}

/// grad_check error of L_R + L_C for every generator tensor (encoder included)
/// and for the generator output seen by a frozen corrnet.
inline std::vector<std::pair<std::string, double>> genet_grad_errors(std::uint64_t seed) {
  std::mt19937_64 rng(900 + seed);
  const cstalk::GenNet init(tiny_gen_config(), seed);
  cstalk::GenNet gen = init;
  cstalk::CorrNet corr(tiny_corr_config(), seed + 1);
  corr.params().freeze_all();
  Matrix feats, target;
  const auto emotion = static_cast<cstalk::Emotion>(seed % 5);
  auto loss = [&] {
    const Var y = gen.forward(feats, emotion, gen.params());
    const Var lc = ad::cross_entropy_rows(corr.forward({ad::transpose(y)}).logits, {static_cast<int>(seed % 5)});
    return ad::add(ad::mse_velocity_loss(y, target), lc);
  };
  draw_smooth_point(
      [&] {
        gen = cstalk::GenNet(init.config(), init.params().clone());
        for (std::size_t i = 0; i < gen.params().size(); ++i) {
          if (gen.params().name(i).rfind("feat.", 0) == 0) continue;
          gen.params()[i].mutable_value() += 0.1 * oracle::random_matrix(static_cast<int>(gen.params()[i].rows()),
                                                                          static_cast<int>(gen.params()[i].cols()), rng);
        }
        feats = oracle::random_matrix(12, 3, rng);
        target = oracle::random_matrix(12, 5, rng, -0.5, 0.5);
      },
      loss);
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < gen.params().size(); ++i) {
    if (gen.params().name(i).rfind("feat.", 0) == 0) continue;
    out.emplace_back(gen.params().name(i), cstalk::grad_check(loss, gen.params()[i]));
  }
  return out;
}

/// Largest absolute deviation from the brute-force oracles over shapes up to 8.
inline std::vector<std::pair<std::string, double>> oracle_errors(std::uint64_t seed) {
  std::mt19937_64 rng(700 + seed);
  double att = 0.0, conv = 0.0, soft = 0.0, ce = 0.0, loss = 0.0;
  for (int n = 1; n <= 8; ++n)
    for (int d = 1; d <= 8; ++d) {
      const Matrix q = oracle::random_matrix(n, d, rng, -2, 2), k = oracle::random_matrix(n, d, rng, -2, 2),
                   v = oracle::random_matrix(n, d, rng, -2, 2);
      Matrix o, sc;
      oracle::attention(q, k, v, &o, &sc);
      const auto r = ad::attention(ad::constant(q), ad::constant(k), ad::constant(v));
      att = std::max({att, (r.output.value() - o).cwiseAbs().maxCoeff(), (r.scores.value() - sc).cwiseAbs().maxCoeff()});

      const Matrix a = oracle::random_matrix(n, d, rng, -5, 5);
      soft = std::max(soft, (ad::softmax_rows(ad::constant(a)).value() - oracle::softmax_rows(a)).cwiseAbs().maxCoeff());
      if (d >= 2) {
        std::vector<double> row(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) row[static_cast<std::size_t>(j)] = a(0, j);
        const int label = static_cast<int>(rng() % static_cast<std::uint64_t>(d));
        ce = std::max(ce, std::abs(ad::cross_entropy(ad::constant(Matrix(a.row(0))), label).item() - oracle::cross_entropy(row, label)));
      }

      const int cin = 1 + (n + d) % 3, cout = 1 + (n * d) % 4, taps = (n % 2) ? 3 : 5, dil = 1 + d % 3;
      const Matrix x = oracle::random_matrix(cin, n, rng);
      const auto w = oracle::random_kernel(cout, cin, taps, rng);
      const auto y = ad::dilated_conv1d(ad::constant(Matrix(x.transpose())), ad::constant(oracle::to_library_kernel(w)), dil);
      conv = std::max(conv, (Matrix(y.value().transpose()) - oracle::conv1d(x, w, dil)).cwiseAbs().maxCoeff());

      if (n >= 2) {
        const Matrix p = oracle::random_matrix(n, d, rng), t = oracle::random_matrix(n, d, rng);
        loss = std::max(loss, std::abs(ad::mse_velocity_loss(ad::constant(p), t).item() - oracle::mse_velocity(p, t)));
      }
    }
  return {{"attention", att}, {"conv1d", conv}, {"softmax", soft}, {"cross_entropy", ce}, {"mse_velocity", loss}};
}

// Four vertices: 0 lip, 1 eye, 2 forehead, 3 untagged. Rig 0 pushes vertex 0
// by a 2 mm vector, rig 1 pushes vertex 2 by 2 mm.
inline cstalk::VertexBasis hand_basis() {
  cstalk::VertexBasis b;
  b.rest = Eigen::MatrixXd::Zero(4, 3);
  b.rest(3, 0) = 10.0;
  b.deltas = Eigen::MatrixXd::Zero(2, 12);
  b.deltas(0, 0) = 1.2;
  b.deltas(0, 1) = 1.6;
  b.deltas(1, 8) = 2.0;
  b.lip = {0};
  b.eye = {1};
  b.forehead = {2};
  return b;
}

inline Eigen::MatrixXd random_values(int r, int t, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return Eigen::MatrixXd::NullaryExpr(r, t, [&] { return u(rng); });
}

// Positions frame by frame, then the largest distance over the region.
inline double two_loop(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, const cstalk::VertexBasis& b, const std::vector<int>& region) {
  double total = 0.0;
  for (int t = 0; t < pred.cols(); ++t) {
    double worst = 0.0;
    for (int v : region) {
      double sq = 0.0;
      for (int d = 0; d < 3; ++d) {
        double p = b.rest(v, d), g = b.rest(v, d);
        for (int r = 0; r < pred.rows(); ++r) {
          p += pred(r, t) * b.deltas(r, 3 * v + d);
          g += gt(r, t) * b.deltas(r, 3 * v + d);
        }
        sq += (p - g) * (p - g);
      }
      worst = std::max(worst, std::sqrt(sq));
    }
    total += worst;
  }
  return total / static_cast<double>(pred.cols());
}


}  // namespace suites
