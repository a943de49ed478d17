#include "aat/mscsa.hpp"

#include <cmath>
#include <limits>

#include <spdlog/spdlog.h>

#include "aat/errors.hpp"

namespace aat::seq {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

void EmbeddingConfig::validate() const {
  if (model_dim <= 0 || num_heads <= 0 || num_layers <= 0 || max_sequence_length <= 0) {
    throw ConfigError("embedding: sizes must be positive");
  }
  if (model_dim % num_heads != 0) {
    throw ConfigError("embedding: model_dim " + std::to_string(model_dim) + " is not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("embedding: dropout must be in [0, 1)");
}

WindowGrowth parse_window_growth(const std::string& s) {
  if (s == "exponential") return WindowGrowth::exponential;
  if (s == "linear") return WindowGrowth::linear;
  if (s == "fixed") return WindowGrowth::fixed;
  throw ConfigError("unknown window growth '" + s + "'");
}

std::string to_string(WindowGrowth g) {
  switch (g) {
    case WindowGrowth::exponential:
      return "exponential";
    case WindowGrowth::linear:
      return "linear";
    case WindowGrowth::fixed:
      return "fixed";
  }
  return "exponential";
}

std::vector<int> ScaleConfig::windows() const {
  if (num_scales <= 0 || base_window <= 0) throw ConfigError("scales: K and Len must be positive");
  if (growth_ratio <= 0.0) throw ConfigError("scales: growth ratio must be positive");
  std::vector<int> w;
  for (int k = 0; k < num_scales; ++k) {
    switch (growth) {
      case WindowGrowth::exponential:
        w.push_back(static_cast<int>(std::lround(std::pow(growth_ratio, k) * base_window)));
        break;
      case WindowGrowth::linear:
        w.push_back((k + 1) * base_window);
        break;
      case WindowGrowth::fixed:
        w.push_back(base_window);
        break;
    }
    if (w.back() <= 0) throw ConfigError("scales: derived window length is not positive");
    if (growth != WindowGrowth::fixed && k > 0 && w[k] <= w[k - 1]) {
      throw ConfigError("scales: windows must be strictly increasing (L_" + std::to_string(k) + "=" +
                        std::to_string(w[k - 1]) + ", L_" + std::to_string(k + 1) + "=" +
                        std::to_string(w[k]) + ")");
    }
  }
  return w;
}

std::vector<std::string> ScaleConfig::warnings() const {
  std::vector<std::string> out;
  if (growth == WindowGrowth::fixed && num_scales > 1) {
    out.push_back("fixed window growth: all " + std::to_string(num_scales) +
                  " scales share one window length, multi-scale attention degenerates");
  }
  return out;
}

Matrix build_causal_mask(int length) {
  if (length <= 0) throw DomainError("causal mask length must be >= 1");
  return build_window_mask(length, length);
}

Matrix build_window_mask(int length, int window) {
  if (length <= 0 || window <= 0) throw DomainError("window mask sizes must be >= 1");
  Matrix m(length, length);
  for (int i = 0; i < length; ++i) {
    for (int j = 0; j < length; ++j) m(i, j) = (j <= i && j > i - window) ? 0.0 : kNegInf;
  }
  return m;
}

InputEmbedding::InputEmbedding(const std::string& name, int input_dim, int model_dim, int max_length, Rng& rng)
    : input_proj_(name + ".input_proj", nn::uniform_init(input_dim, model_dim, input_dim, rng)),
      positions_(name + ".positions", nn::uniform_init(max_length, model_dim, model_dim, rng)),
      norm_(name + ".norm", model_dim) {}

Var InputEmbedding::forward(Tape& tape, Var inputs) const {
  if (inputs.rows() > positions_.rows()) {
    throw LengthError("sequence of length " + std::to_string(inputs.rows()) + " exceeds max_sequence_length " +
                      std::to_string(positions_.rows()));
  }
  if (inputs.cols() != input_proj_.rows()) throw ShapeError("embedding: input width does not match W_s");
  Var projected = ad::matmul(inputs, tape.parameter(input_proj_));
  Var pos = ad::slice_rows(tape.parameter(positions_), 0, inputs.rows());
  return norm_.forward(tape, ad::add(projected, pos));
}

void InputEmbedding::parameters(ParameterRefs& out) {
  out.push_back(&input_proj_);
  out.push_back(&positions_);
  norm_.parameters(out);
}

MscsaBlock::MscsaBlock(const std::string& name, int model_dim, int num_scales, Rng& rng)
    : gate_(name + ".gate", nn::uniform_init(2 * model_dim, model_dim, 2 * model_dim, rng)) {
  for (int k = 0; k < num_scales; ++k) {
    const std::string p = name + ".scale" + std::to_string(k);
    scales_.push_back({Parameter(p + ".query", nn::uniform_init(model_dim, model_dim, model_dim, rng)),
                       Parameter(p + ".key", nn::uniform_init(model_dim, model_dim, model_dim, rng)),
                       Parameter(p + ".value", nn::uniform_init(model_dim, model_dim, model_dim, rng))});
  }
}

Var masked_attention(Tape& tape, Var h, const ScaleProjections& proj, const Matrix& mask, int num_heads,
                     double dropout, std::vector<Matrix>* weights_out) {
  const Eigen::Index d = h.cols();
  if (proj.query.rows() != d) throw ShapeError("attention: projection width does not match tokens");
  if (mask.rows() != h.rows() || mask.cols() != h.rows()) {
    throw ShapeError("attention: mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                     " for " + std::to_string(h.rows()) + " tokens");
  }
  if (num_heads <= 0 || d % num_heads != 0) throw ShapeError("attention: width not divisible by heads");
  Var q = ad::matmul(h, tape.parameter(proj.query));
  Var k = ad::matmul(h, tape.parameter(proj.key));
  Var v = ad::matmul(h, tape.parameter(proj.value));
  const Eigen::Index dh = d / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(num_heads);
  for (int head = 0; head < num_heads; ++head) {
    Var qh = num_heads == 1 ? q : ad::slice_cols(q, head * dh, dh);
    Var kh = num_heads == 1 ? k : ad::slice_cols(k, head * dh, dh);
    Var vh = num_heads == 1 ? v : ad::slice_cols(v, head * dh, dh);
    Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    Var weights = ad::masked_softmax_rows(scores, mask);
    if (weights_out != nullptr) weights_out->push_back(weights.value());
    weights = ad::dropout(weights, dropout);
    heads.push_back(ad::matmul(weights, vh));
  }
  return num_heads == 1 ? heads.front() : ad::concat_cols(heads);
}

Var gated_fusion(Var gate_weight, const std::vector<Var>& per_scale, Var current, std::vector<Matrix>* gates) {
  if (per_scale.empty()) throw ShapeError("gated fusion needs at least one scale");
  const Eigen::Index d = current.cols();
  if (gate_weight.rows() != 2 * d || gate_weight.cols() != d) throw ShapeError("gated fusion: W_g must be [2d x d]");
  Var z;
  for (Var o : per_scale) {
    if (o.cols() != d || o.rows() != current.rows()) throw ShapeError("gated fusion: scale output shape");
    Var g = ad::sigmoid(ad::matmul(ad::concat_cols({o, current}), gate_weight));
    if (gates != nullptr) gates->push_back(g.value());
    Var term = ad::mul(g, o);
    z = z.valid() ? ad::add(z, term) : term;
  }
  return z;
}

Var MscsaBlock::forward(Tape& tape, Var h, const std::vector<int>& windows, int num_heads, double dropout,
                        ScaleStack* trace) const {
  if (windows.size() != scales_.size()) {
    throw ShapeError("mscsa: " + std::to_string(windows.size()) + " windows for " +
                     std::to_string(scales_.size()) + " scales");
  }
  const int length = static_cast<int>(h.rows());
  std::vector<Var> outputs;
  outputs.reserve(scales_.size());
  for (std::size_t k = 0; k < scales_.size(); ++k) {
    Matrix mask = build_window_mask(length, windows[k]);
    outputs.push_back(
        masked_attention(tape, h, scales_[k], mask, num_heads, dropout, trace ? &trace->attention : nullptr));
    if (trace != nullptr) {
      trace->masks.push_back(std::move(mask));
      trace->scale_outputs.push_back(outputs.back().value());
    }
  }
  Var z = gated_fusion(tape.parameter(gate_), outputs, h, trace ? &trace->gates : nullptr);
  z = ad::dropout(z, dropout);
  if (trace != nullptr) {
    trace->windows = windows;
    trace->fused = z.value();
  }
  return z;
}

void MscsaBlock::parameters(ParameterRefs& out) {
  for (auto& s : scales_) {
    out.push_back(&s.query);
    out.push_back(&s.key);
    out.push_back(&s.value);
  }
  out.push_back(&gate_);
}

AttentionParams AttentionParams::random(int input_dim, const EmbeddingConfig& config, int num_scales, Rng& rng) {
  config.validate();
  AttentionParams p;
  p.config = config;
  p.embedding = InputEmbedding("embed", input_dim, config.model_dim, config.max_sequence_length, rng);
  p.mscsa = MscsaBlock("mscsa", config.model_dim, num_scales, rng);
  return p;
}

void AttentionParams::parameters(ParameterRefs& out) {
  embedding.parameters(out);
  mscsa.parameters(out);
}

Matrix embed_inputs(const Matrix& states, const AttentionParams& params) {
  Tape tape;
  return params.embedding.forward(tape, tape.constant(states)).value();
}

Matrix scale_attention(const Matrix& window, const AttentionParams& params, int scale, const Matrix& mask) {
  if (scale < 0 || scale >= params.mscsa.num_scales()) throw ShapeError("scale index out of range");
  Tape tape;
  return masked_attention(tape, tape.constant(window), params.mscsa.scales()[scale], mask, params.config.num_heads,
                          0.0)
      .value();
}

Matrix gated_fusion(const std::vector<Eigen::RowVectorXd>& per_scale_last, const Eigen::RowVectorXd& current,
                    const Matrix& gate_weight) {
  Tape tape;
  std::vector<Var> outs;
  for (const auto& o : per_scale_last) outs.push_back(tape.constant(Matrix(o)));
  return gated_fusion(tape.constant(gate_weight), outs, tape.constant(Matrix(current))).value();
}

ScaleStack mscsa_forward(const Matrix& sequence, const ScaleConfig& scales, const AttentionParams& params) {
  if (sequence.rows() < 1) throw ShapeError("mscsa: empty sequence");
  if (sequence.cols() != params.config.model_dim) throw ShapeError("mscsa: sequence width must equal model_dim");
  for (const auto& w : scales.warnings()) spdlog::warn("{}", w);
  const std::vector<int> windows = scales.windows();
  Tape tape;
  ScaleStack stack;
  params.mscsa.forward(tape, tape.constant(sequence), windows, params.config.num_heads, 0.0, &stack);
  return stack;
}

}  // namespace aat::seq
