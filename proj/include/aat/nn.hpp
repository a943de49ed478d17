#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

#include "aat/autodiff.hpp"

namespace aat::nn {

using ad::Gradients;
using ad::Matrix;
using ad::Parameter;
using ad::ParameterRefs;
using ad::Rng;
using ad::Tape;
using ad::Var;

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double fan_in, Rng& rng);

/// Affine map y = x W + b with W stored as [in x out].
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out, Rng& rng);

  Var forward(Tape& tape, Var x) const;
  /// Parameters enter the tape as constants: gradients flow to `x` only.
  Var forward_frozen(Tape& tape, Var x) const;
  Matrix apply(const Matrix& x) const;
  void parameters(ParameterRefs& out);
  void zero();

  int in() const { return static_cast<int>(weight_.rows()); }
  int out() const { return static_cast<int>(weight_.cols()); }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

 private:
  Parameter weight_;
  Parameter bias_;
};

enum class Activation { relu, tanh };

/// Stack of Linear layers with an activation between (not after) them.
/// An empty hidden list gives a single affine map.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, int in, const std::vector<int>& hidden, int out, Rng& rng,
      Activation act = Activation::relu);

  Var forward(Tape& tape, Var x) const;
  Var forward_frozen(Tape& tape, Var x) const;
  Matrix apply(const Matrix& x) const;
  void parameters(ParameterRefs& out);
  void zero();

  int in() const { return layers_.empty() ? 0 : layers_.front().in(); }
  int out() const { return layers_.empty() ? 0 : layers_.back().out(); }
  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
  Activation act_ = Activation::relu;
};

class LayerNormParams {
 public:
  LayerNormParams() = default;
  LayerNormParams(const std::string& name, int width);

  Var forward(Tape& tape, Var x, double eps = 1e-5) const;
  void parameters(ParameterRefs& out);

  Parameter& gain() { return gain_; }
  Parameter& bias() { return bias_; }

 private:
  Parameter gain_;
  Parameter bias_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : opt_(options) {}

  /// Applies one update to `params` using `grads`; parameters without an
  /// entry in `grads` receive a zero gradient. The parameter list must keep
  /// the same order across calls.
  void step(const ParameterRefs& params, const Gradients& grads);
  const AdamOptions& options() const { return opt_; }
  long steps() const { return t_; }

 private:
  AdamOptions opt_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

/// Adds `src` into `dst` entry by entry (used to reduce per-example tapes).
void accumulate(Gradients& dst, const Gradients& src, double weight = 1.0);

bool all_finite(const ParameterRefs& params);

/// Tensor dump: {"name": {"shape": [r, c], "data": [...]}, ...}.
nlohmann::json to_json(const ParameterRefs& params);
/// Loads values by name; shapes must match exactly.
void from_json(const nlohmann::json& j, const ParameterRefs& params);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

}  // namespace aat::nn
