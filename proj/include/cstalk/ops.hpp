#pragma once

#include <limits>
#include <vector>

#include "cstalk/autodiff.hpp"

namespace cstalk::ad {

// Elementwise and linear algebra. Matrices are frame- or token-major: one row per
// time step or rig token.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);
/// a + 1 * row, where row is 1 x cols(a).
Var add_row(const Var& a, const Var& row);
Var relu(const Var& a);

/// While alive, records on this thread the smallest |x| fed to relu, i.e. how
/// close the evaluation point sits to a kink. Watches nest.
class KinkWatch {
 public:
  KinkWatch();
  ~KinkWatch();
  KinkWatch(const KinkWatch&) = delete;
  KinkWatch& operator=(const KinkWatch&) = delete;
  double margin() const { return margin_; }
  void note(double m);

 private:
  double margin_;
  KinkWatch* outer_;
};
Var tanh(const Var& a);
Var softmax_rows(const Var& a);
/// Columns [start, start + count).
Var cols(const Var& a, Index start, Index count);
Var hcat(const std::vector<Var>& parts);
Var vcat(const std::vector<Var>& parts);
/// Row-major flatten to 1 x (rows * cols).
Var flatten(const Var& a);
/// 1 x cols mean over rows.
Var row_mean(const Var& a);
/// Row `index` of a table, as 1 x cols.
Var gather_row(const Var& table, Index index);
Var sum_all(const Var& a);
Var sum_squares(const Var& a);
Var mean(const std::vector<Var>& scalars);
/// x * W + b with b broadcast over rows.
inline Var linear(const Var& x, const Var& w, const Var& b) { return add_row(matmul(x, w), b); }
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

/// Same-length dilated convolution over the frame axis.
///   input:  T x C_in (frame-major)
///   kernel: (k * C_in) x C_out, tap j occupies rows [j * C_in, (j + 1) * C_in)
/// out[t] = sum_j input[t + (j - (k - 1) / 2) * dilation] * W_j, zero outside [0, T).
/// k must be odd.
Var dilated_conv1d(const Var& input, const Var& kernel, int dilation);
int conv_receptive_field(int kernel, int dilation);

/// Mean squared error over all entries.
Var mse_loss(const Var& pred, const Matrix& target);
/// Mean squared error of adjacent-frame differences (rows are frames).
Var velocity_loss(const Var& pred, const Matrix& target);
/// mse_loss + velocity_loss; needs at least two frames.
Var mse_velocity_loss(const Var& pred, const Matrix& target);

/// -log softmax(logits)[label] for a 1 x M row of logits.
Var cross_entropy(const Var& logits, int label);
/// Mean of per-row cross entropies for an N x M block of logits.
Var cross_entropy_rows(const Var& logits, const std::vector<int>& labels);

struct AttentionResult {
  Var output;  // n x d
  Var scores;  // n x n, QK^T / sqrt(d) before softmax
  Var weights; // n x n, row-softmax of scores
};

/// softmax(QK^T / sqrt(d)) V, also returning the pre-softmax scores.
AttentionResult attention(const Var& q, const Var& k, const Var& v);

}  // namespace cstalk::ad
