#include "cstalk/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cstalk/error.hpp"

namespace cstalk::ad {

namespace {

thread_local KinkWatch* current_watch = nullptr;

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

std::string shape_str(const Var& a) { return std::to_string(a.rows()) + "x" + std::to_string(a.cols()); }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Matrix softmax_rows_value(const Matrix& s) {
  Matrix p(s.rows(), s.cols());
  for (Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    p.row(r) = (s.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_op("add", a.value() + b.value(), {a, b}, [](Node& self) {
    if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
    if (parent(self, 1).requires_grad) parent(self, 1).accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_op("sub", a.value() - b.value(), {a, b}, [](Node& self) {
    if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
    if (parent(self, 1).requires_grad) parent(self, 1).accumulate(-self.grad);
  });
}

Var scale(const Var& a, double s) {
  return make_op("scale", a.value() * s, {a}, [s](Node& self) { parent(self, 0).accumulate(self.grad * s); });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b));
  return make_op("matmul", a.value() * b.value(), {a, b}, [](Node& self) {
    Node& A = parent(self, 0);
    Node& B = parent(self, 1);
    if (A.requires_grad) A.accumulate(self.grad * B.value.transpose());
    if (B.requires_grad) B.accumulate(A.value.transpose() * self.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + shape_str(a) + " * (" + shape_str(b) + ")^T");
  return make_op("matmul_nt", a.value() * b.value().transpose(), {a, b}, [](Node& self) {
    Node& A = parent(self, 0);
    Node& B = parent(self, 1);
    if (A.requires_grad) A.accumulate(self.grad * B.value);
    if (B.requires_grad) B.accumulate(self.grad.transpose() * A.value);
  });
}

Var transpose(const Var& a) {
  return make_op("transpose", a.value().transpose(), {a},
                 [](Node& self) { parent(self, 0).accumulate(self.grad.transpose()); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("add_row: " + shape_str(a) + " + row " + shape_str(row));
  Matrix v = a.value();
  v.rowwise() += row.value().row(0);
  return make_op("add_row", std::move(v), {a, row}, [](Node& self) {
    if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
    if (parent(self, 1).requires_grad) parent(self, 1).accumulate(self.grad.colwise().sum());
  });
}

KinkWatch::KinkWatch() : margin_(std::numeric_limits<double>::infinity()), outer_(current_watch) { current_watch = this; }

KinkWatch::~KinkWatch() {
  current_watch = outer_;
  if (outer_) outer_->note(margin_);
}

void KinkWatch::note(double m) { margin_ = std::min(margin_, m); }

Var relu(const Var& a) {
  if (current_watch && a.value().size() > 0) current_watch->note(a.value().cwiseAbs().minCoeff());
  return make_op("relu", a.value().cwiseMax(0.0), {a}, [](Node& self) {
    Node& A = parent(self, 0);
    A.accumulate((A.value.array() > 0.0).select(self.grad, 0.0));
  });
}

Var tanh(const Var& a) {
  return make_op("tanh", a.value().array().tanh().matrix(), {a}, [](Node& self) {
    parent(self, 0).accumulate((self.grad.array() * (1.0 - self.value.array().square())).matrix());
  });
}

Var softmax_rows(const Var& a) {
  return make_op("softmax_rows", softmax_rows_value(a.value()), {a}, [](Node& self) {
    const Matrix& p = self.value;
    const Eigen::VectorXd inner = (self.grad.array() * p.array()).rowwise().sum();
    parent(self, 0).accumulate((p.array() * (self.grad.colwise() - inner).array()).matrix());
  });
}

Var cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw ShapeError("cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_str(a));
  return make_op("cols", a.value().middleCols(start, count), {a}, [start, count](Node& self) {
    Node& A = parent(self, 0);
    if (A.grad.size() == 0) A.grad = Matrix::Zero(A.value.rows(), A.value.cols());
    A.grad.middleCols(start, count) += self.grad;
  });
}

Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("hcat: no inputs");
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) throw ShapeError("hcat: row counts differ");
    total += p.cols();
  }
  Matrix v(parts.front().rows(), total);
  Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_op("hcat", std::move(v), parts, [](Node& self) {
    Index at = 0;
    for (auto& p : self.parents) {
      const Index c = p->value.cols();
      if (p->requires_grad) p->accumulate(self.grad.middleCols(at, c));
      at += c;
    }
  });
}

Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("vcat: no inputs");
  Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw ShapeError("vcat: column counts differ");
    total += p.rows();
  }
  Matrix v(total, parts.front().cols());
  Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_op("vcat", std::move(v), parts, [](Node& self) {
    Index at = 0;
    for (auto& p : self.parents) {
      const Index r = p->value.rows();
      if (p->requires_grad) p->accumulate(self.grad.middleRows(at, r));
      at += r;
    }
  });
}

Var flatten(const Var& a) {
  const Index r = a.rows(), c = a.cols();
  Matrix v(1, r * c);
  for (Index i = 0; i < r; ++i) v.block(0, i * c, 1, c) = a.value().row(i);
  return make_op("flatten", std::move(v), {a}, [r, c](Node& self) {
    Matrix g(r, c);
    for (Index i = 0; i < r; ++i) g.row(i) = self.grad.block(0, i * c, 1, c);
    parent(self, 0).accumulate(g);
  });
}

Var row_mean(const Var& a) {
  const Index n = a.rows();
  return make_op("row_mean", a.value().colwise().mean(), {a}, [n](Node& self) {
    parent(self, 0).accumulate(self.grad.replicate(n, 1) / static_cast<double>(n));
  });
}

Var gather_row(const Var& table, Index index) {
  if (index < 0 || index >= table.rows())
    throw IndexError("gather_row: row " + std::to_string(index) + " outside " + shape_str(table));
  return make_op("gather_row", table.value().row(index), {table}, [index](Node& self) {
    Node& T = parent(self, 0);
    if (T.grad.size() == 0) T.grad = Matrix::Zero(T.value.rows(), T.value.cols());
    T.grad.row(index) += self.grad.row(0);
  });
}

Var sum_all(const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return make_op("sum_all", std::move(v), {a}, [r, c](Node& self) {
    parent(self, 0).accumulate(Matrix::Constant(r, c, self.grad(0, 0)));
  });
}

Var sum_squares(const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().squaredNorm();
  return make_op("sum_squares", std::move(v), {a}, [](Node& self) {
    parent(self, 0).accumulate(2.0 * self.grad(0, 0) * parent(self, 0).value);
  });
}

Var mean(const std::vector<Var>& scalars) {
  if (scalars.empty()) throw ShapeError("mean: no inputs");
  Matrix v = Matrix::Zero(1, 1);
  for (const auto& s : scalars) {
    if (s.rows() != 1 || s.cols() != 1) throw ShapeError("mean: inputs must be scalars");
    v(0, 0) += s.value()(0, 0);
  }
  const double n = static_cast<double>(scalars.size());
  v /= n;
  return make_op("mean", std::move(v), scalars, [n](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->accumulate(self.grad / n);
  });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw ShapeError("layer_norm_rows: gain/bias must be 1x" + std::to_string(d));
  const Eigen::VectorXd mu = x.value().rowwise().mean();
  Matrix centered = x.value().colwise() - mu;
  const Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<double>(d)) + eps).rsqrt();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  return make_op("layer_norm_rows", std::move(y), {x, gain, bias},
                 [xhat = std::move(xhat), inv_std](Node& self) {
                   Node& X = parent(self, 0);
                   Node& G = parent(self, 1);
                   Node& B = parent(self, 2);
                   if (G.requires_grad) G.accumulate((self.grad.array() * xhat.array()).colwise().sum().matrix());
                   if (B.requires_grad) B.accumulate(self.grad.colwise().sum());
                   if (X.requires_grad) {
                     const Matrix dxhat = (self.grad.array().rowwise() * G.value.row(0).array()).matrix();
                     const Eigen::VectorXd m1 = dxhat.rowwise().mean();
                     const Eigen::VectorXd m2 = (dxhat.array() * xhat.array()).rowwise().mean();
                     Matrix dx = dxhat.colwise() - m1;
                     dx -= (xhat.array().colwise() * m2.array()).matrix();
                     X.accumulate((dx.array().colwise() * inv_std.array()).matrix());
                   }
                 });
}

int conv_receptive_field(int kernel, int dilation) { return (kernel - 1) * dilation + 1; }

Var dilated_conv1d(const Var& input, const Var& kernel, int dilation) {
  const Index T = input.rows(), cin = input.cols();
  if (cin == 0 || kernel.rows() % cin != 0)
    throw ShapeError("dilated_conv1d: kernel " + shape_str(kernel) + " does not match input " + shape_str(input));
  const Index k = kernel.rows() / cin;
  if (k % 2 == 0) throw ConfigError("dilated_conv1d: kernel size must be odd, got " + std::to_string(k));
  if (dilation < 1) throw ConfigError("dilated_conv1d: dilation must be >= 1");
  const Index center = (k - 1) / 2;

  // im2col: row t holds the k taps feeding output frame t.
  Matrix col = Matrix::Zero(T, k * cin);
  for (Index j = 0; j < k; ++j) {
    const Index off = (j - center) * dilation;
    const Index t0 = std::max<Index>(0, -off);
    const Index t1 = std::min<Index>(T, T - off);
    if (t1 > t0) col.block(t0, j * cin, t1 - t0, cin) = input.value().middleRows(t0 + off, t1 - t0);
  }
  Matrix out = col * kernel.value();
  return make_op("dilated_conv1d", std::move(out), {input, kernel},
                 [col = std::move(col), T, cin, k, center, dilation](Node& self) {
                   Node& X = parent(self, 0);
                   Node& W = parent(self, 1);
                   if (W.requires_grad) W.accumulate(col.transpose() * self.grad);
                   if (X.requires_grad) {
                     const Matrix dcol = self.grad * W.value.transpose();
                     Matrix dx = Matrix::Zero(T, cin);
                     for (Index j = 0; j < k; ++j) {
                       const Index off = (j - center) * dilation;
                       const Index t0 = std::max<Index>(0, -off);
                       const Index t1 = std::min<Index>(T, T - off);
                       if (t1 > t0) dx.middleRows(t0 + off, t1 - t0) += dcol.block(t0, j * cin, t1 - t0, cin);
                     }
                     X.accumulate(dx);
                   }
                 });
}

Var mse_loss(const Var& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ShapeError("mse_loss: prediction " + shape_str(pred) + " vs target " + std::to_string(target.rows()) +
                     "x" + std::to_string(target.cols()));
  const double n = static_cast<double>(target.size());
  Matrix diff = pred.value() - target;
  Matrix v(1, 1);
  v(0, 0) = diff.squaredNorm() / n;
  return make_op("mse_loss", std::move(v), {pred}, [diff = std::move(diff), n](Node& self) {
    parent(self, 0).accumulate(diff * (2.0 * self.grad(0, 0) / n));
  });
}

Var velocity_loss(const Var& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ShapeError("velocity_loss: prediction " + shape_str(pred) + " vs target " +
                     std::to_string(target.rows()) + "x" + std::to_string(target.cols()));
  const Index T = target.rows();
  if (T < 2) throw SizeError("velocity_loss needs at least 2 frames, got " + std::to_string(T));
  const Matrix diff = pred.value() - target;
  Matrix vel = diff.bottomRows(T - 1) - diff.topRows(T - 1);
  const double n = static_cast<double>(vel.size());
  Matrix v(1, 1);
  v(0, 0) = vel.squaredNorm() / n;
  return make_op("velocity_loss", std::move(v), {pred}, [vel = std::move(vel), n, T](Node& self) {
    const Matrix g = vel * (2.0 * self.grad(0, 0) / n);
    Matrix d = Matrix::Zero(T, g.cols());
    d.bottomRows(T - 1) += g;
    d.topRows(T - 1) -= g;
    parent(self, 0).accumulate(d);
  });
}

Var mse_velocity_loss(const Var& pred, const Matrix& target) {
  if (target.rows() < 2) throw SizeError("mse_velocity_loss needs at least 2 frames");
  return add(mse_loss(pred, target), velocity_loss(pred, target));
}

Var cross_entropy(const Var& logits, int label) {
  if (logits.rows() != 1 || logits.cols() < 2) throw ShapeError("cross_entropy: logits must be 1xM with M >= 2");
  if (label < 0 || label >= logits.cols())
    throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(logits.cols()) + ")");
  const Matrix p = softmax_rows_value(logits.value());
  const double m = logits.value().maxCoeff();
  const double lse = m + std::log((logits.value().array() - m).exp().sum());
  Matrix v(1, 1);
  v(0, 0) = lse - logits.value()(0, label);
  return make_op("cross_entropy", std::move(v), {logits}, [p, label](Node& self) {
    Matrix g = p;
    g(0, label) -= 1.0;
    parent(self, 0).accumulate(g * self.grad(0, 0));
  });
}

Var cross_entropy_rows(const Var& logits, const std::vector<int>& labels) {
  const Index n = logits.rows(), m = logits.cols();
  if (m < 2 || static_cast<std::size_t>(n) != labels.size() || n < 1)
    throw ShapeError("cross_entropy_rows: logits " + shape_str(logits) + " for " + std::to_string(labels.size()) + " labels");
  for (int label : labels)
    if (label < 0 || label >= m)
      throw IndexError("cross_entropy_rows: label " + std::to_string(label) + " outside [0, " + std::to_string(m) + ")");
  const Matrix p = softmax_rows_value(logits.value());
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const auto row = logits.value().row(i);
    const double mx = row.maxCoeff();
    total += mx + std::log((row.array() - mx).exp().sum()) - row(labels[static_cast<std::size_t>(i)]);
  }
  Matrix v(1, 1);
  v(0, 0) = total / static_cast<double>(n);
  return make_op("cross_entropy_rows", std::move(v), {logits}, [p, labels](Node& self) {
    Matrix g = p;
    for (std::size_t i = 0; i < labels.size(); ++i) g(static_cast<Index>(i), labels[i]) -= 1.0;
    parent(self, 0).accumulate(g * (self.grad(0, 0) / static_cast<double>(labels.size())));
  });
}

AttentionResult attention(const Var& q, const Var& k, const Var& v) {
  if (q.cols() != k.cols() || k.rows() != v.rows() || q.cols() < 1)
    throw ShapeError("attention: Q " + shape_str(q) + ", K " + shape_str(k) + ", V " + shape_str(v));
  AttentionResult r;
  r.scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  r.weights = softmax_rows(r.scores);
  r.output = matmul(r.weights, v);
  return r;
}

}  // namespace cstalk::ad
