#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// float64 matrices. A Tape records every operation of one forward pass;
// Tape::backward() walks the records in reverse and accumulates gradients
// into leaf variables and parameters.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace aat::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

/// A named trainable tensor. Modules own their parameters by value.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Matrix value) : name_(std::move(name)), value_(std::move(value)) {}

  const std::string& name() const { return name_; }
  Matrix& value() { return value_; }
  const Matrix& value() const { return value_; }
  Eigen::Index rows() const { return value_.rows(); }
  Eigen::Index cols() const { return value_.cols(); }

 private:
  std::string name_;
  Matrix value_;
};

using ParameterRefs = std::vector<Parameter*>;
using Gradients = std::unordered_map<const Parameter*, Matrix>;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the gradient flowing into a node and that node's forward value.
  using Backward = std::function<void(Tape&, const Matrix& grad, const Matrix& out)>;

  explicit Tape(bool training = false, Rng* rng = nullptr) : training_(training), rng_(rng) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf that collects a gradient (e.g. an input being attacked).
  Var variable(Matrix value);
  /// Leaf bound to a parameter; its gradient is reported by parameter_gradients().
  /// The parameter must outlive the tape and stay unmodified until backward().
  Var parameter(const Parameter& p);
  /// Parameter used as a constant: no copy, no gradient.
  Var frozen(const Parameter& p);

  Var record(Matrix value, bool requires_grad, Backward backward);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  bool requires_grad(std::initializer_list<Var> vs) const;

  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Seeds d(root)/d(root) = 1 and propagates. `root` must be 1x1.
  void backward(Var root);

  /// Gradient accumulated at a node; a zero matrix when nothing reached it.
  Matrix grad(Var v) const;
  Gradients parameter_gradients() const;

  bool training() const { return training_; }
  Rng& rng();
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    Backward backward;

    const Matrix& get() const { return external ? *external : value; }
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool training_;
  Rng* rng_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

enum class NormKind { l1, l2, linf };

NormKind parse_norm_kind(const std::string& s);
std::string to_string(NormKind k);

// Elementwise and linear algebra.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var tanh(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);

// Structural.
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var gather_rows(Var table, const std::vector<int>& indices);
/// Places row k of parts[i].first at output row parts[i].second[k].
Var scatter_rows(const std::vector<std::pair<Var, std::vector<int>>>& parts, Eigen::Index rows,
                 Eigen::Index cols);

// Normalization and attention primitives.
Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax_rows(Var x);
/// Softmax of (x + mask) per row; mask entries are 0 or -inf.
Var masked_softmax_rows(Var x, const Matrix& mask);
/// Inverted dropout; identity unless the tape is in training mode.
Var dropout(Var x, double rate);

// Norms and budget projection (rows are independent examples).
/// n x 1 column of per-row norms. Subgradient 0 at the kink of every norm.
Var row_norms(Var x, NormKind kind);
/// Scales each row by min(1, radius / ||row||_2).
Var project_rows_l2(Var x, double radius);

struct ConvTransposeGeometry {
  int in_height = 0;
  int in_width = 0;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;

  int out_height() const { return (in_height - 1) * stride + kernel; }
  int out_width() const { return (in_width - 1) * stride + kernel; }
};

/// Transposed 2-D convolution without padding. Rows of `x` are images
/// flattened in HWC order; `weight` is [in_channels x kernel*kernel*out_channels]
/// flattened as (ky, kx, co); `bias` is [1 x out_channels].
Var conv_transpose2d(Var x, Var weight, Var bias, const ConvTransposeGeometry& g);

}  // namespace aat::ad
