#pragma once

// Multi-scale causal self-attention (MSCSA).
//
// A token sequence is first embedded (LayerNorm(x W_s + p_i)). Each of K
// scales then runs causal self-attention over the window of the last L_k
// positions ending at every position t, and a sigmoid gate fuses the K
// window outputs with the current token:
//
//   z_t = sum_k sigmoid([o_t^(k); h_t] W_g) * o_t^(k)
//
// The output of a causal window ending at t, read at its last row, equals
// attention of query t over keys (t-L_k, t]. mscsa_forward uses that banded
// form so the whole sequence is processed in one pass; positions with fewer
// than L_k predecessors simply attend to what exists (left padding is masked
// out, so it never needs to be materialised).

#include <string>
#include <vector>

#include "aat/autodiff.hpp"
#include "aat/nn.hpp"

namespace aat::seq {

using ad::Matrix;
using ad::Parameter;
using ad::ParameterRefs;
using ad::Rng;
using ad::Tape;
using ad::Var;

struct EmbeddingConfig {
  int model_dim = 128;
  int num_heads = 8;
  int num_layers = 6;
  double dropout_rate = 0.2;
  int max_sequence_length = 512;

  /// Throws ConfigError unless model_dim % num_heads == 0 and all sizes are positive.
  void validate() const;
};

enum class WindowGrowth { exponential, linear, fixed };

WindowGrowth parse_window_growth(const std::string& s);
std::string to_string(WindowGrowth g);

struct ScaleConfig {
  int num_scales = 3;
  int base_window = 5;
  WindowGrowth growth = WindowGrowth::exponential;
  double growth_ratio = 2.0;

  /// L_1..L_K. exponential: round(r^(k-1) * Len); linear: k * Len; fixed: Len.
  /// Throws ConfigError when non-fixed windows are not strictly increasing.
  std::vector<int> windows() const;
  /// Non-fatal diagnostics (fixed growth degenerates to a single scale).
  std::vector<std::string> warnings() const;
};

/// [L x L] matrix with 0 on and below the diagonal, -inf above it.
Matrix build_causal_mask(int length);
/// [T x T] mask letting row t see columns (t - window, t].
Matrix build_window_mask(int length, int window);

/// Per-scale query/key/value projections, each [d x d].
struct ScaleProjections {
  Parameter query;
  Parameter key;
  Parameter value;
};

/// Input projection, learned positions and the LayerNorm affine.
class InputEmbedding {
 public:
  InputEmbedding() = default;
  InputEmbedding(const std::string& name, int input_dim, int model_dim, int max_length, Rng& rng);

  /// [T x input_dim] -> [T x d]; throws LengthError when T > max_length.
  Var forward(Tape& tape, Var inputs) const;
  void parameters(ParameterRefs& out);

  Parameter& input_proj() { return input_proj_; }
  Parameter& positions() { return positions_; }
  nn::LayerNormParams& norm() { return norm_; }
  int max_length() const { return static_cast<int>(positions_.rows()); }

 private:
  Parameter input_proj_;  // [input_dim x d]
  Parameter positions_;   // [max_length x d]
  nn::LayerNormParams norm_;
};

/// Diagnostic view of one MSCSA evaluation.
struct ScaleStack {
  std::vector<int> windows;
  std::vector<Matrix> masks;          // [T x T] per scale
  std::vector<Matrix> scale_outputs;  // O^(k) read at every position, [T x d]
  std::vector<Matrix> gates;          // sigmoid activations, [T x d]
  std::vector<Matrix> attention;      // softmax weights per (scale, head), scale-major
  Matrix fused;                       // z, [T x d]
};

class MscsaBlock {
 public:
  MscsaBlock() = default;
  MscsaBlock(const std::string& name, int model_dim, int num_scales, Rng& rng);

  /// Fuses K windowed attention branches at every position of `h` [T x d].
  Var forward(Tape& tape, Var h, const std::vector<int>& windows, int num_heads, double dropout,
              ScaleStack* trace = nullptr) const;
  void parameters(ParameterRefs& out);

  int num_scales() const { return static_cast<int>(scales_.size()); }
  std::vector<ScaleProjections>& scales() { return scales_; }
  const std::vector<ScaleProjections>& scales() const { return scales_; }
  Parameter& gate() { return gate_; }
  const Parameter& gate() const { return gate_; }

 private:
  std::vector<ScaleProjections> scales_;
  Parameter gate_;  // [2d x d]
};

/// Head-partitioned scaled dot-product attention with an additive mask.
/// Logits are scaled by 1/sqrt(d / num_heads).
Var masked_attention(Tape& tape, Var h, const ScaleProjections& proj, const Matrix& mask, int num_heads,
                     double dropout, std::vector<Matrix>* weights = nullptr);

/// z = sum_k sigmoid([o_k ; current] W_g) * o_k, row-wise.
Var gated_fusion(Var gate_weight, const std::vector<Var>& per_scale, Var current,
                 std::vector<Matrix>* gates = nullptr);

/// Everything one standalone MSCSA layer needs.
struct AttentionParams {
  EmbeddingConfig config;
  InputEmbedding embedding;
  MscsaBlock mscsa;

  static AttentionParams random(int input_dim, const EmbeddingConfig& config, int num_scales, Rng& rng);
  void parameters(ParameterRefs& out);
};

Matrix embed_inputs(const Matrix& states, const AttentionParams& params);
/// Attention of one window through the projections of scale `scale`.
Matrix scale_attention(const Matrix& window, const AttentionParams& params, int scale, const Matrix& mask);
Matrix gated_fusion(const std::vector<Eigen::RowVectorXd>& per_scale_last, const Eigen::RowVectorXd& current,
                    const Matrix& gate_weight);
ScaleStack mscsa_forward(const Matrix& sequence, const ScaleConfig& scales, const AttentionParams& params);

}  // namespace aat::seq
