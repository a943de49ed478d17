#include "aat/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "aat/errors.hpp"

namespace aat::ad {

namespace {

void require_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw ShapeError("variables belong to different tapes");
}

void require_same_shape(Var a, Var b, const char* op) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

NormKind parse_norm_kind(const std::string& s) {
  if (s == "l1" || s == "L1") return NormKind::l1;
  if (s == "l2" || s == "L2") return NormKind::l2;
  if (s == "linf" || s == "Linf" || s == "LINF" || s == "inf") return NormKind::linf;
  throw ConfigError("unknown norm '" + s + "' (expected l1, l2 or linf)");
}

std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::l1:
      return "l1";
    case NormKind::l2:
      return "l2";
    case NormKind::linf:
      return "linf";
  }
  return "l2";
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.external = &p.value();
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  param_nodes_[&p] = nodes_.size() - 1;
  return Var(this, nodes_.size() - 1);
}

Var Tape::frozen(const Parameter& p) {
  Node n;
  n.external = &p.value();
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Matrix& Tape::value(Var v) const { return nodes_[v.id()].get(); }

bool Tape::requires_grad(std::initializer_list<Var> vs) const {
  for (Var v : vs) {
    if (nodes_[v.id()].requires_grad) return true;
  }
  return false;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw ShapeError("backward: root belongs to another tape");
  const Matrix& r = value(root);
  if (r.rows() != 1 || r.cols() != 1) throw ShapeError("backward: root must be a 1x1 scalar");
  if (!nodes_[root.id()].requires_grad) return;
  nodes_[root.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, n.grad, n.get());
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Matrix::Zero(n.get().rows(), n.get().cols());
  return n.grad;
}

Gradients Tape::parameter_gradients() const {
  Gradients out;
  for (const auto& [param, id] : param_nodes_) {
    const Node& n = nodes_[id];
    out.emplace(param, n.grad.size() == 0 ? Matrix::Zero(n.get().rows(), n.get().cols()) : n.grad);
  }
  return out;
}

Rng& Tape::rng() {
  if (rng_ == nullptr) throw ConfigError("tape: training-mode randomness requested without an rng");
  return *rng_;
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tape& t = *a.tape();
  return t.record(a.value() + b.value(), t.requires_grad({a, b}),
                  [a, b](Tape& t, const Matrix& g, const Matrix&) {
                    t.accumulate(a, g);
                    t.accumulate(b, g);
                  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  return t.record(a.value() - b.value(), t.requires_grad({a, b}),
                  [a, b](Tape& t, const Matrix& g, const Matrix&) {
                    t.accumulate(a, g);
                    t.accumulate(b, -g);
                  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tape& t = *a.tape();
  return t.record(a.value().cwiseProduct(b.value()), t.requires_grad({a, b}),
                  [a, b](Tape& t, const Matrix& g, const Matrix&) {
                    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
                    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
                  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape();
  return t.record(a.value() * s, t.requires_grad(a),
                  [a, s](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g * s); });
}

Var add_row(Var a, Var row) {
  require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row width mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t.record(std::move(out), t.requires_grad({a, row}),
                  [a, row](Tape& t, const Matrix& g, const Matrix&) {
                    t.accumulate(a, g);
                    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
                  });
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()));
  }
  Tape& t = *a.tape();
  Matrix out = a.value() * b.value();
  return t.record(std::move(out), t.requires_grad({a, b}),
                  [a, b](Tape& t, const Matrix& g, const Matrix&) {
                    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
                    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
                  });
}

Var transpose(Var a) {
  Tape& t = *a.tape();
  return t.record(a.value().transpose(), t.requires_grad(a),
                  [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g.transpose()); });
}

Var sigmoid(Var a) {
  Tape& t = *a.tape();
  Matrix out = a.value().unaryExpr([](double x) {
    // Split by sign so exp never overflows.
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return t.record(std::move(out), t.requires_grad(a),
                  [a](Tape& t, const Matrix& g, const Matrix& y) {
                    t.accumulate(a, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
                  });
}

Var relu(Var a) {
  Tape& t = *a.tape();
  return t.record(a.value().cwiseMax(0.0), t.requires_grad(a),
                  [a](Tape& t, const Matrix& g, const Matrix&) {
                    t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0).matrix());
                  });
}

Var tanh(Var a) {
  Tape& t = *a.tape();
  return t.record(a.value().array().tanh().matrix(), t.requires_grad(a),
                  [a](Tape& t, const Matrix& g, const Matrix& y) {
                    t.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
                  });
}

Var square(Var a) {
  Tape& t = *a.tape();
  return t.record(a.value().array().square().matrix(), t.requires_grad(a),
                  [a](Tape& t, const Matrix& g, const Matrix&) {
                    t.accumulate(a, (2.0 * g.array() * a.value().array()).matrix());
                  });
}

Var sum(Var a) {
  Tape& t = *a.tape();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), t.requires_grad(a),
                  [a](Tape& t, const Matrix& g, const Matrix&) {
                    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
                  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of an empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = *parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (Var p : parts) {
    require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
    rg = rg || t.requires_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.record(std::move(out), rg, [parts](Tape& t, const Matrix& g, const Matrix&) {
    Eigen::Index c = 0;
    for (Var p : parts) {
      if (t.requires_grad(p)) t.accumulate(p, g.middleCols(c, p.cols()));
      c += p.cols();
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = *parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (Var p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
    rg = rg || t.requires_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.record(std::move(out), rg, [parts](Tape& t, const Matrix& g, const Matrix&) {
    Eigen::Index r = 0;
    for (Var p : parts) {
      if (t.requires_grad(p)) t.accumulate(p, g.middleRows(r, p.rows()));
      r += p.rows();
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  Tape& t = *a.tape();
  return t.record(a.value().middleRows(start, count), t.requires_grad(a),
                  [a, start, count](Tape& t, const Matrix& g, const Matrix&) {
                    Matrix full = Matrix::Zero(a.rows(), a.cols());
                    full.middleRows(start, count) = g;
                    t.accumulate(a, full);
                  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Tape& t = *a.tape();
  return t.record(a.value().middleCols(start, count), t.requires_grad(a),
                  [a, start, count](Tape& t, const Matrix& g, const Matrix&) {
                    Matrix full = Matrix::Zero(a.rows(), a.cols());
                    full.middleCols(start, count) = g;
                    t.accumulate(a, full);
                  });
}

Var gather_rows(Var table, const std::vector<int>& indices) {
  Tape& t = *table.tape();
  Matrix out(static_cast<Eigen::Index>(indices.size()), table.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= table.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(indices[i]);
  }
  return t.record(std::move(out), t.requires_grad(table),
                  [table, indices](Tape& t, const Matrix& g, const Matrix&) {
                    Matrix d = Matrix::Zero(table.rows(), table.cols());
                    for (std::size_t i = 0; i < indices.size(); ++i) {
                      d.row(indices[i]) += g.row(static_cast<Eigen::Index>(i));
                    }
                    t.accumulate(table, d);
                  });
}

Var scatter_rows(const std::vector<std::pair<Var, std::vector<int>>>& parts, Eigen::Index rows,
                 Eigen::Index cols) {
  if (parts.empty()) throw ShapeError("scatter_rows: no inputs");
  Tape& t = *parts.front().first.tape();
  Matrix out = Matrix::Zero(rows, cols);
  bool rg = false;
  for (const auto& [v, idx] : parts) {
    require_same_tape(parts.front().first, v);
    if (v.cols() != cols || static_cast<std::size_t>(v.rows()) != idx.size()) {
      throw ShapeError("scatter_rows: part shape does not match its index list");
    }
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] < 0 || idx[k] >= rows) throw ShapeError("scatter_rows: index out of range");
      out.row(idx[k]) += v.value().row(static_cast<Eigen::Index>(k));
    }
    rg = rg || t.requires_grad(v);
  }
  return t.record(std::move(out), rg, [parts](Tape& t, const Matrix& g, const Matrix&) {
    for (const auto& [v, idx] : parts) {
      if (!t.requires_grad(v)) continue;
      Matrix d(v.rows(), v.cols());
      for (std::size_t k = 0; k < idx.size(); ++k) d.row(static_cast<Eigen::Index>(k)) = g.row(idx[k]);
      t.accumulate(v, d);
    }
  });
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  require_same_tape(x, gain);
  require_same_tape(x, bias);
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ShapeError("layer_norm_rows: gain/bias must be 1 x width");
  }
  Tape& t = *x.tape();
  Matrix normalized(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = x.value().row(i);
    const double mu = row.mean();
    const double var = (row.array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    normalized.row(i) = (row.array() - mu) * inv_std(i);
  }
  Matrix out = normalized.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return t.record(
      std::move(out), t.requires_grad({x, gain, bias}),
      [x, gain, bias, normalized = std::move(normalized), inv_std = std::move(inv_std)](
          Tape& t, const Matrix& g, const Matrix&) {
        if (t.requires_grad(gain)) t.accumulate(gain, g.cwiseProduct(normalized).colwise().sum());
        if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
        if (!t.requires_grad(x)) return;
        Matrix gx(g.rows(), g.cols());
        const auto gamma = gain.value().row(0).array();
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
          const Eigen::ArrayXd dn = (g.row(i).array() * gamma).transpose();
          const Eigen::ArrayXd xn = normalized.row(i).array().transpose();
          const double m1 = dn.mean();
          const double m2 = (dn * xn).mean();
          gx.row(i) = (inv_std(i) * (dn - m1 - xn * m2)).transpose();
        }
        t.accumulate(x, gx);
      });
}

Var softmax_rows(Var x) { return masked_softmax_rows(x, Matrix()); }

Var masked_softmax_rows(Var x, const Matrix& mask) {
  const bool has_mask = mask.size() != 0;
  if (has_mask && (mask.rows() != x.rows() || mask.cols() != x.cols())) {
    throw ShapeError("masked_softmax_rows: mask shape does not match scores");
  }
  Tape& t = *x.tape();
  Eigen::ArrayXXd z = x.value().array();
  if (has_mask) z += mask.array();
  const Eigen::ArrayXd m = z.rowwise().maxCoeff();
  if (!m.isFinite().all()) throw DomainError("masked_softmax_rows: a row is fully masked");
  z.colwise() -= m;
  // Eigen's vectorized exp clamps -inf to a denormal instead of 0, and
  // denormals slow every later product down by an order of magnitude.
  Eigen::ArrayXXd e = (z < -700.0).select(0.0, z.exp());
  e.colwise() /= e.rowwise().sum();
  Matrix out = e.matrix();
  return t.record(std::move(out), t.requires_grad(x), [x](Tape& t, const Matrix& g, const Matrix& y) {
    Matrix gx = y.cwiseProduct(g);
    const Eigen::VectorXd dots = gx.rowwise().sum();
    gx -= (y.array().colwise() * dots.array()).matrix();
    t.accumulate(x, gx);
  });
}

Var dropout(Var x, double rate) {
  Tape& t = *x.tape();
  if (!t.training() || rate <= 0.0) return x;
  if (rate >= 1.0) throw DomainError("dropout rate must be in [0, 1)");
  // Keep an entry when a raw 64-bit draw falls below (1 - rate) * 2^64.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(1.0 - rate, 64) - 1.0);
  Matrix mask(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - rate);
  Rng& rng = t.rng();
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng() < threshold ? s : 0.0;
  Matrix out = x.value().cwiseProduct(mask);
  return t.record(std::move(out), t.requires_grad(x),
                  [x, mask = std::move(mask)](Tape& t, const Matrix& g, const Matrix&) {
                    t.accumulate(x, g.cwiseProduct(mask));
                  });
}

Var row_norms(Var x, NormKind kind) {
  Tape& t = *x.tape();
  const Matrix& v = x.value();
  Matrix out(v.rows(), 1);
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    switch (kind) {
      case NormKind::l1:
        out(i, 0) = v.row(i).cwiseAbs().sum();
        break;
      case NormKind::l2:
        out(i, 0) = v.row(i).norm();
        break;
      case NormKind::linf:
        out(i, 0) = v.cols() == 0 ? 0.0 : v.row(i).cwiseAbs().maxCoeff();
        break;
    }
  }
  return t.record(std::move(out), t.requires_grad(x),
                  [x, kind](Tape& t, const Matrix& g, const Matrix& norms) {
                    const Matrix& v = x.value();
                    Matrix gx = Matrix::Zero(v.rows(), v.cols());
                    for (Eigen::Index i = 0; i < v.rows(); ++i) {
                      if (norms(i, 0) == 0.0) continue;
                      switch (kind) {
                        case NormKind::l1:
                          gx.row(i) = g(i, 0) * v.row(i).array().sign().matrix();
                          break;
                        case NormKind::l2:
                          gx.row(i) = (g(i, 0) / norms(i, 0)) * v.row(i);
                          break;
                        case NormKind::linf: {
                          Eigen::Index j = 0;
                          v.row(i).cwiseAbs().maxCoeff(&j);
                          gx(i, j) = g(i, 0) * (v(i, j) > 0 ? 1.0 : -1.0);
                          break;
                        }
                      }
                    }
                    t.accumulate(x, gx);
                  });
}

Var project_rows_l2(Var x, double radius) {
  if (radius < 0) throw DomainError("project_rows_l2: negative radius");
  Tape& t = *x.tape();
  const Matrix& v = x.value();
  Matrix out = v;
  Eigen::VectorXd norms(v.rows());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    norms(i) = v.row(i).norm();
    if (radius == 0.0) {
      out.row(i).setZero();
    } else if (norms(i) > radius) {
      out.row(i) *= radius / norms(i);
      // Rounding in the division may land one ulp outside the ball.
      const double n = out.row(i).norm();
      if (n > radius) out.row(i) *= std::nextafter(radius / n, 0.0);
    }
  }
  return t.record(std::move(out), t.requires_grad(x),
                  [x, radius, norms = std::move(norms)](Tape& t, const Matrix& g, const Matrix&) {
                    const Matrix& v = x.value();
                    Matrix gx(v.rows(), v.cols());
                    for (Eigen::Index i = 0; i < v.rows(); ++i) {
                      if (radius == 0.0) {
                        gx.row(i).setZero();
                      } else if (norms(i) <= radius) {
                        gx.row(i) = g.row(i);
                      } else {
                        const auto unit = v.row(i) / norms(i);
                        gx.row(i) = (radius / norms(i)) * (g.row(i) - unit * g.row(i).dot(unit));
                      }
                    }
                    t.accumulate(x, gx);
                  });
}

Var conv_transpose2d(Var x, Var weight, Var bias, const ConvTransposeGeometry& geo) {
  require_same_tape(x, weight);
  require_same_tape(x, bias);
  const int hin = geo.in_height, win = geo.in_width, cin = geo.in_channels;
  const int cout = geo.out_channels, k = geo.kernel, s = geo.stride;
  if (hin <= 0 || win <= 0 || cin <= 0 || cout <= 0 || k <= 0 || s <= 0) {
    throw ShapeError("conv_transpose2d: invalid geometry");
  }
  if (x.cols() != static_cast<Eigen::Index>(hin) * win * cin) throw ShapeError("conv_transpose2d: input width");
  if (weight.rows() != cin || weight.cols() != static_cast<Eigen::Index>(k) * k * cout) {
    throw ShapeError("conv_transpose2d: weight shape");
  }
  if (bias.rows() != 1 || bias.cols() != cout) throw ShapeError("conv_transpose2d: bias shape");
  const int hout = geo.out_height(), wout = geo.out_width();
  const Eigen::Index batch = x.rows();
  Tape& t = *x.tape();

  Matrix out(batch, static_cast<Eigen::Index>(hout) * wout * cout);
  for (Eigen::Index b = 0; b < batch; ++b) {
    // Row b viewed as (hin*win) x cin, which is exactly HWC order.
    Eigen::Map<const Matrix> xb(x.value().row(b).data(), static_cast<Eigen::Index>(hin) * win, cin);
    const Matrix patches = xb * weight.value();
    Eigen::Map<Matrix> ob(out.row(b).data(), static_cast<Eigen::Index>(hout) * wout, cout);
    ob.rowwise() = bias.value().row(0);
    for (int iy = 0; iy < hin; ++iy) {
      for (int ix = 0; ix < win; ++ix) {
        const auto p = patches.row(static_cast<Eigen::Index>(iy) * win + ix);
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const Eigen::Index orow = static_cast<Eigen::Index>(iy * s + ky) * wout + (ix * s + kx);
            ob.row(orow) += p.segment((static_cast<Eigen::Index>(ky) * k + kx) * cout, cout);
          }
        }
      }
    }
  }
  return t.record(
      std::move(out), t.requires_grad({x, weight, bias}),
      [x, weight, bias, geo](Tape& t, const Matrix& g, const Matrix&) {
        const int hin = geo.in_height, win = geo.in_width, cin = geo.in_channels;
        const int cout = geo.out_channels, k = geo.kernel, s = geo.stride;
        const int wout = geo.out_width(), hout = geo.out_height();
        Matrix gx(x.rows(), x.cols());
        Matrix gw = Matrix::Zero(weight.rows(), weight.cols());
        Matrix gb = Matrix::Zero(1, cout);
        for (Eigen::Index b = 0; b < x.rows(); ++b) {
          Eigen::Map<const Matrix> gob(g.row(b).data(), static_cast<Eigen::Index>(hout) * wout, cout);
          gb += gob.colwise().sum();
          Matrix dpatches(static_cast<Eigen::Index>(hin) * win, static_cast<Eigen::Index>(k) * k * cout);
          for (int iy = 0; iy < hin; ++iy) {
            for (int ix = 0; ix < win; ++ix) {
              auto p = dpatches.row(static_cast<Eigen::Index>(iy) * win + ix);
              for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                  const Eigen::Index orow = static_cast<Eigen::Index>(iy * s + ky) * wout + (ix * s + kx);
                  p.segment((static_cast<Eigen::Index>(ky) * k + kx) * cout, cout) = gob.row(orow);
                }
              }
            }
          }
          Eigen::Map<const Matrix> xb(x.value().row(b).data(), static_cast<Eigen::Index>(hin) * win, cin);
          if (t.requires_grad(weight)) gw.noalias() += xb.transpose() * dpatches;
          if (t.requires_grad(x)) {
            Eigen::Map<Matrix> gxb(gx.row(b).data(), static_cast<Eigen::Index>(hin) * win, cin);
            gxb.noalias() = dpatches * weight.value().transpose();
          }
        }
        if (t.requires_grad(x)) t.accumulate(x, gx);
        if (t.requires_grad(weight)) t.accumulate(weight, gw);
        if (t.requires_grad(bias)) t.accumulate(bias, gb);
      });
}

}  // namespace aat::ad
