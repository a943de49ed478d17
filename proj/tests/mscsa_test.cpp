#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "aat/errors.hpp"
#include "aat/grad_check.hpp"
#include "aat/mscsa.hpp"

using aat::ad::Matrix;
using aat::ad::Rng;
using aat::ad::Tape;
using aat::ad::Var;
namespace seq = aat::seq;
namespace ad = aat::ad;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

seq::AttentionParams make_params(int input_dim, int d, int heads, int scales, Rng& rng, int max_len = 64) {
  seq::EmbeddingConfig cfg;
  cfg.model_dim = d;
  cfg.num_heads = heads;
  cfg.num_layers = 1;
  cfg.max_sequence_length = max_len;
  return seq::AttentionParams::random(input_dim, cfg, scales, rng);
}

bool bit_equal(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

}  // namespace

TEST(EmbeddingConfig, DefaultsAndDivisibility) {
  seq::EmbeddingConfig cfg;
  EXPECT_EQ(cfg.model_dim, 128);
  EXPECT_EQ(cfg.num_heads, 8);
  EXPECT_EQ(cfg.num_layers, 6);
  EXPECT_DOUBLE_EQ(cfg.dropout_rate, 0.2);
  EXPECT_NO_THROW(cfg.validate());
  cfg.num_heads = 7;
  EXPECT_THROW(cfg.validate(), aat::ConfigError);
}

TEST(ScaleConfig, DerivedWindows) {
  seq::ScaleConfig s;
  EXPECT_EQ(s.windows(), (std::vector<int>{5, 10, 20}));
  EXPECT_TRUE(s.warnings().empty());
  s.growth = seq::WindowGrowth::linear;
  EXPECT_EQ(s.windows(), (std::vector<int>{5, 10, 15}));
  s.growth = seq::WindowGrowth::fixed;
  EXPECT_EQ(s.windows(), (std::vector<int>{5, 5, 5}));
  EXPECT_EQ(s.warnings().size(), 1u);
  s = {};
  s.base_window = 2;
  s.growth_ratio = 1.1;  // round(2 * 1.1) == 2: not increasing
  EXPECT_THROW(s.windows(), aat::ConfigError);
}

TEST(EmbedInputs, ZeroInputGivesZeroRows) {
  Rng rng(1);
  auto p = make_params(6, 8, 2, 1, rng);
  p.embedding.positions().value().setZero();
  const Matrix out = seq::embed_inputs(Matrix::Zero(4, 6), p);
  EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.0);
}

TEST(EmbedInputs, TooLongSequenceIsALengthError) {
  Rng rng(2);
  auto p = make_params(3, 8, 2, 1, rng, 10);
  EXPECT_NO_THROW(seq::embed_inputs(Matrix::Zero(10, 3), p));
  EXPECT_THROW(seq::embed_inputs(Matrix::Zero(11, 3), p), aat::LengthError);
}

TEST(EmbedInputs, RowsAreLayerNormalized) {
  Rng rng(3);
  auto p = make_params(5, 8, 2, 1, rng);
  const Matrix out = seq::embed_inputs(random_matrix(4, 5, rng), p);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double mu = out.row(i).mean();
    const double var = (out.row(i).array() - mu).square().mean();
    EXPECT_LE(std::abs(mu), 1e-5);
    EXPECT_LE(std::abs(var - 1.0), 1e-3);  // eps inside the sqrt
  }
}

TEST(CausalMask, SmallCases) {
  const double inf = std::numeric_limits<double>::infinity();
  Matrix m1 = seq::build_causal_mask(1);
  ASSERT_EQ(m1.size(), 1);
  EXPECT_EQ(m1(0, 0), 0.0);

  Matrix m3 = seq::build_causal_mask(3);
  Matrix expected(3, 3);
  expected << 0, -inf, -inf, 0, 0, -inf, 0, 0, 0;
  EXPECT_TRUE(bit_equal(m3, expected));

  Matrix m2 = seq::build_causal_mask(2);
  int neg = 0;
  for (Eigen::Index i = 0; i < 2; ++i)
    for (Eigen::Index j = 0; j < 2; ++j) neg += std::isinf(m2(i, j)) ? 1 : 0;
  EXPECT_EQ(neg, 1);
  EXPECT_TRUE(std::isinf(m2(0, 1)) && m2(0, 1) < 0);

  EXPECT_THROW(seq::build_causal_mask(0), aat::DomainError);
}

TEST(ScaleAttention, SingleTokenReturnsValueProjection) {
  Rng rng(4);
  auto p = make_params(4, 8, 2, 1, rng);
  const Matrix h = random_matrix(1, 8, rng);
  const Matrix out = seq::scale_attention(h, p, 0, seq::build_causal_mask(1));
  const Matrix v = h * p.mscsa.scales()[0].value.value();
  EXPECT_LT((out - v).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ScaleAttention, ZeroQueryKeyGivesPrefixAverage) {
  Rng rng(5);
  auto p = make_params(4, 8, 2, 1, rng);
  p.mscsa.scales()[0].query.value().setZero();
  p.mscsa.scales()[0].key.value().setZero();
  const Matrix h = random_matrix(5, 8, rng);
  const Matrix out = seq::scale_attention(h, p, 0, seq::build_causal_mask(5));
  const Matrix v = h * p.mscsa.scales()[0].value.value();
  for (Eigen::Index i = 0; i < 5; ++i) {
    const Eigen::RowVectorXd avg = v.topRows(i + 1).colwise().mean();
    EXPECT_LT((out.row(i) - avg).cwiseAbs().maxCoeff(), 1e-12) << "row " << i;
  }
}

TEST(ScaleAttention, FutureRowsDoNotLeak) {
  Rng rng(6);
  auto p = make_params(4, 8, 4, 1, rng);
  Matrix h = random_matrix(6, 8, rng);
  const Matrix before = seq::scale_attention(h, p, 0, seq::build_causal_mask(6));
  h.row(4).array() += 3.0;
  const Matrix after = seq::scale_attention(h, p, 0, seq::build_causal_mask(6));
  EXPECT_TRUE(bit_equal(before.topRows(4), after.topRows(4)));
  EXPECT_FALSE(bit_equal(before.row(4), after.row(4)));
}

TEST(ScaleAttention, MaskShapeMismatchIsAShapeError) {
  Rng rng(7);
  auto p = make_params(4, 8, 2, 1, rng);
  EXPECT_THROW(seq::scale_attention(Matrix::Zero(3, 8), p, 0, seq::build_causal_mask(4)), aat::ShapeError);
}

TEST(GatedFusion, ZeroGateWeightHalvesTheSum) {
  Rng rng(8);
  const Eigen::RowVectorXd o1 = Eigen::RowVectorXd::Random(4), o2 = Eigen::RowVectorXd::Random(4);
  const Eigen::RowVectorXd h = Eigen::RowVectorXd::Random(4);
  const Matrix z = seq::gated_fusion({o1, o2}, h, Matrix::Zero(8, 4));
  EXPECT_LT((z.row(0) - 0.5 * (o1 + o2)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GatedFusion, SingleZeroScaleGivesZero) {
  Rng rng(9);
  const Matrix z = seq::gated_fusion({Eigen::RowVectorXd::Zero(4)}, Eigen::RowVectorXd::Random(4), random_matrix(8, 4, rng));
  EXPECT_EQ(z.cwiseAbs().maxCoeff(), 0.0);
}

TEST(GatedFusion, MatchesScalarReevaluation) {
  Rng rng(10);
  const int d = 4;
  const Matrix wg = random_matrix(2 * d, d, rng);
  std::vector<Eigen::RowVectorXd> os = {random_matrix(1, d, rng).row(0), random_matrix(1, d, rng).row(0)};
  const Eigen::RowVectorXd h = random_matrix(1, d, rng).row(0);
  const Matrix z = seq::gated_fusion(os, h, wg);
  for (int j = 0; j < d; ++j) {
    double expected = 0.0;
    for (const auto& o : os) {
      double logit = 0.0;
      for (int i = 0; i < d; ++i) logit += o(i) * wg(i, j) + h(i) * wg(d + i, j);
      expected += o(j) / (1.0 + std::exp(-logit));
    }
    EXPECT_NEAR(z(0, j), expected, 1e-6);
  }
}

TEST(Mscsa, SingleTokenIsFinite) {
  Rng rng(11);
  auto p = make_params(4, 8, 2, 3, rng);
  const auto stack = seq::mscsa_forward(random_matrix(1, 8, rng), seq::ScaleConfig{}, p);
  EXPECT_TRUE(stack.fused.allFinite());
  EXPECT_EQ(stack.fused.rows(), 1);
}

TEST(Mscsa, LastPositionDoesNotAffectEarlierOutputs) {
  Rng rng(12);
  auto p = make_params(4, 16, 4, 3, rng);
  Matrix x = random_matrix(12, 16, rng);
  const auto a = seq::mscsa_forward(x, seq::ScaleConfig{}, p);
  x.row(11) = random_matrix(1, 16, rng);
  const auto b = seq::mscsa_forward(x, seq::ScaleConfig{}, p);
  EXPECT_TRUE(bit_equal(a.fused.topRows(11), b.fused.topRows(11)));
}

TEST(Mscsa, WindowMembership) {
  Rng rng(13);
  auto p = make_params(4, 8, 2, 3, rng);
  Matrix x = random_matrix(25, 8, rng);
  const auto a = seq::mscsa_forward(x, seq::ScaleConfig{}, p);
  ASSERT_EQ(a.windows, (std::vector<int>{5, 10, 20}));
  x.row(19).array() += 1.0;
  const auto b = seq::mscsa_forward(x, seq::ScaleConfig{}, p);
  EXPECT_TRUE(bit_equal(a.scale_outputs[0].row(24), b.scale_outputs[0].row(24)));
  EXPECT_FALSE(bit_equal(a.scale_outputs[1].row(24), b.scale_outputs[1].row(24)));  // 15..24
  EXPECT_FALSE(bit_equal(a.scale_outputs[2].row(24), b.scale_outputs[2].row(24)));
}

// The banded pass must equal the literal definition: extract the window that
// ends at t (or the available prefix), run causal attention on it, and read
// the last row.
TEST(Mscsa, BandedPassEqualsExplicitWindows) {
  Rng rng(14);
  auto p = make_params(4, 8, 2, 3, rng);
  const Matrix x = random_matrix(23, 8, rng);
  const auto stack = seq::mscsa_forward(x, seq::ScaleConfig{}, p);
  for (int k = 0; k < 3; ++k) {
    const int L = stack.windows[k];
    for (int t = 0; t < 23; ++t) {
      const int start = std::max(0, t - L + 1);
      const Matrix window = x.middleRows(start, t - start + 1);
      const Matrix o = seq::scale_attention(window, p, k, seq::build_causal_mask(static_cast<int>(window.rows())));
      EXPECT_LT((o.bottomRows(1) - stack.scale_outputs[k].row(t)).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Mscsa, AttentionRowsAreNormalizedAndGatesInRange) {
  Rng rng(15);
  auto p = make_params(4, 16, 4, 3, rng);
  const auto stack = seq::mscsa_forward(random_matrix(25, 16, rng), seq::ScaleConfig{}, p);
  ASSERT_EQ(stack.attention.size(), 12u);
  for (std::size_t a = 0; a < stack.attention.size(); ++a) {
    const Matrix& w = stack.attention[a];
    const Matrix& mask = stack.masks[a / 4];
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      EXPECT_NEAR(w.row(i).sum(), 1.0, 1e-6);
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        if (std::isinf(mask(i, j))) EXPECT_LE(w(i, j), 1e-12);
      }
    }
  }
  for (const auto& g : stack.gates) {
    EXPECT_GT(g.minCoeff(), 0.0);
    EXPECT_LT(g.maxCoeff(), 1.0);
  }
}

TEST(Mscsa, WindowLocalityProperty) {
  Rng rng(16);
  auto p = make_params(4, 8, 2, 3, rng);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix x = random_matrix(25, 8, rng);
    const auto a = seq::mscsa_forward(x, seq::ScaleConfig{}, p);
    const int j = static_cast<int>(rng() % 24);
    x.row(j) = random_matrix(1, 8, rng);
    const auto b = seq::mscsa_forward(x, seq::ScaleConfig{}, p);
    for (int k = 0; k < 3; ++k) {
      for (int t = 0; t < 25; ++t) {
        if (j < t - a.windows[k] + 1 || j > t) {
          EXPECT_TRUE(bit_equal(a.scale_outputs[k].row(t), b.scale_outputs[k].row(t)));
        }
      }
    }
  }
}

TEST(Mscsa, GradientMatchesFiniteDifferences) {
  Rng rng(17);
  auto p = make_params(5, 8, 2, 2, rng);
  seq::ScaleConfig scales;
  scales.num_scales = 2;
  scales.base_window = 2;
  const Matrix x = random_matrix(6, 5, rng);
  const Matrix r = random_matrix(6, 8, rng);
  aat::ad::ParameterRefs params;
  p.parameters(params);
  const auto windows = scales.windows();
  auto loss = [&](Tape& t) {
    Var h = p.embedding.forward(t, t.constant(x));
    Var z = p.mscsa.forward(t, h, windows, 2, 0.0);
    return ad::sum(ad::mul(z, t.constant(r)));
  };
  const auto result = ad::check_gradients(params, loss, 100000, rng);
  EXPECT_LE(result.max_relative_error, 1e-4) << result.worst_parameter;
}
