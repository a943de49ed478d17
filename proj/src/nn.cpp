#include "aat/nn.hpp"

#include <cmath>

#include "aat/errors.hpp"

namespace aat::nn {

Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Linear::Linear(std::string name, int in, int out, Rng& rng)
    : weight_(name + ".weight", uniform_init(in, out, in, rng)),
      bias_(name + ".bias", uniform_init(1, out, in, rng)) {}

Var Linear::forward(Tape& tape, Var x) const {
  return ad::add_row(ad::matmul(x, tape.parameter(weight_)), tape.parameter(bias_));
}

Var Linear::forward_frozen(Tape& tape, Var x) const {
  return ad::add_row(ad::matmul(x, tape.frozen(weight_)), tape.frozen(bias_));
}

Matrix Linear::apply(const Matrix& x) const {
  Matrix y = x * weight_.value();
  y.rowwise() += bias_.value().row(0);
  return y;
}

void Linear::parameters(ParameterRefs& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

void Linear::zero() {
  weight_.value().setZero();
  bias_.value().setZero();
}

Mlp::Mlp(const std::string& name, int in, const std::vector<int>& hidden, int out, Rng& rng,
         Activation act)
    : act_(act) {
  int prev = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    layers_.emplace_back(name + "." + std::to_string(i), prev, hidden[i], rng);
    prev = hidden[i];
  }
  layers_.emplace_back(name + "." + std::to_string(hidden.size()), prev, out, rng);
}

namespace {

Var activate(Var x, Activation act) { return act == Activation::relu ? ad::relu(x) : ad::tanh(x); }

}  // namespace

Var Mlp::forward(Tape& tape, Var x) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(tape, x);
    if (i + 1 < layers_.size()) x = activate(x, act_);
  }
  return x;
}

Var Mlp::forward_frozen(Tape& tape, Var x) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward_frozen(tape, x);
    if (i + 1 < layers_.size()) x = activate(x, act_);
  }
  return x;
}

Matrix Mlp::apply(const Matrix& x) const {
  Matrix h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].apply(h);
    if (i + 1 < layers_.size()) {
      h = act_ == Activation::relu ? Matrix(h.cwiseMax(0.0)) : Matrix(h.array().tanh().matrix());
    }
  }
  return h;
}

void Mlp::parameters(ParameterRefs& out) {
  for (auto& l : layers_) l.parameters(out);
}

void Mlp::zero() {
  for (auto& l : layers_) l.zero();
}

LayerNormParams::LayerNormParams(const std::string& name, int width)
    : gain_(name + ".gain", Matrix::Ones(1, width)), bias_(name + ".bias", Matrix::Zero(1, width)) {}

Var LayerNormParams::forward(Tape& tape, Var x, double eps) const {
  return ad::layer_norm_rows(x, tape.parameter(gain_), tape.parameter(bias_), eps);
}

void LayerNormParams::parameters(ParameterRefs& out) {
  out.push_back(&gain_);
  out.push_back(&bias_);
}

void Adam::step(const ParameterRefs& params, const Gradients& grads) {
  if (m_.empty()) {
    for (const Parameter* p : params) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params.size()) throw ConfigError("Adam: parameter list changed between steps");
  ++t_;
  double clip_scale = 1.0;
  if (opt_.clip_norm > 0.0) {
    // Summed in parameter order: map order follows heap addresses.
    double sq = 0.0;
    for (const Parameter* p : params) {
      if (auto it = grads.find(p); it != grads.end()) sq += it->second.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > opt_.clip_norm) clip_scale = opt_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter* p = params[i];
    auto it = grads.find(p);
    if (it == grads.end()) {
      m_[i] *= opt_.beta1;
      v_[i] *= opt_.beta2;
    } else {
      const Matrix g = it->second * clip_scale;
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
    }
    if (opt_.lr == 0.0) continue;
    p->value().array() -= opt_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opt_.eps);
  }
}

void accumulate(Gradients& dst, const Gradients& src, double weight) {
  for (const auto& [p, g] : src) {
    auto it = dst.find(p);
    if (it == dst.end()) {
      dst.emplace(p, g * weight);
    } else {
      it->second += g * weight;
    }
  }
}

bool all_finite(const ParameterRefs& params) {
  for (const Parameter* p : params) {
    if (!p->value().allFinite()) return false;
  }
  return true;
}

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json j;
  j["shape"] = {m.rows(), m.cols()};
  j["data"] = std::vector<double>(m.data(), m.data() + m.size());
  return j;
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (shape.size() != 2 || static_cast<std::size_t>(shape[0] * shape[1]) != data.size()) {
    throw DataError("tensor dump: shape does not match data length");
  }
  Matrix m(shape[0], shape[1]);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

nlohmann::json to_json(const ParameterRefs& params) {
  nlohmann::json j = nlohmann::json::object();
  for (const Parameter* p : params) {
    if (j.contains(p->name())) throw DataError("duplicate parameter name " + p->name());
    j[p->name()] = matrix_to_json(p->value());
  }
  return j;
}

void from_json(const nlohmann::json& j, const ParameterRefs& params) {
  for (Parameter* p : params) {
    if (!j.contains(p->name())) throw DataError("checkpoint is missing tensor " + p->name());
    Matrix m = matrix_from_json(j.at(p->name()));
    if (m.rows() != p->rows() || m.cols() != p->cols()) {
      throw ShapeError("checkpoint tensor " + p->name() + " has the wrong shape");
    }
    p->value() = std::move(m);
  }
}

}  // namespace aat::nn
