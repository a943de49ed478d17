#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "aat/autodiff.hpp"
#include "aat/errors.hpp"
#include "aat/grad_check.hpp"
#include "aat/nn.hpp"

using aat::ad::Matrix;
using aat::ad::Rng;
using aat::ad::Tape;
using aat::ad::Var;
namespace ad = aat::ad;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

using Op = std::function<Var(Tape&, const std::vector<Var>&)>;

// Checks d/dx sum(op(x) * R) against central differences for every input entry.
double max_input_gradient_error(const Op& op, const std::vector<Matrix>& inputs, Rng& rng) {
  Matrix weights;
  auto loss = [&](const std::vector<Matrix>& xs, Tape& tape, std::vector<Var>* vars) {
    std::vector<Var> vs;
    for (const auto& x : xs) vs.push_back(tape.variable(x));
    Var out = op(tape, vs);
    if (weights.size() == 0) weights = random_matrix(out.rows(), out.cols(), rng);
    if (vars) *vars = vs;
    return ad::sum(ad::mul(out, tape.constant(weights)));
  };
  Tape tape;
  std::vector<Var> vars;
  Var l = loss(inputs, tape, &vars);
  tape.backward(l);
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix analytic = tape.grad(vars[k]);
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      auto xs = inputs;
      xs[k].data()[i] += h;
      Tape up;
      const double fu = loss(xs, up, nullptr).value()(0, 0);
      xs[k].data()[i] -= 2 * h;
      Tape down;
      const double fd = loss(xs, down, nullptr).value()(0, 0);
      worst = std::max(worst, ad::relative_error(analytic.data()[i], (fu - fd) / (2 * h)));
    }
  }
  return worst;
}

}  // namespace

TEST(Autodiff, ElementwiseAndMatmulGradients) {
  Rng rng(1);
  const std::vector<std::pair<const char*, Op>> ops = {
      {"add", [](Tape&, const std::vector<Var>& v) { return ad::add(v[0], v[1]); }},
      {"sub", [](Tape&, const std::vector<Var>& v) { return ad::sub(v[0], v[1]); }},
      {"mul", [](Tape&, const std::vector<Var>& v) { return ad::mul(v[0], v[1]); }},
      {"sigmoid", [](Tape&, const std::vector<Var>& v) { return ad::sigmoid(v[0]); }},
      {"tanh", [](Tape&, const std::vector<Var>& v) { return ad::tanh(v[0]); }},
      {"square", [](Tape&, const std::vector<Var>& v) { return ad::square(v[0]); }},
      {"concat", [](Tape&, const std::vector<Var>& v) { return ad::concat_cols({v[0], v[1]}); }},
      {"concat_rows", [](Tape&, const std::vector<Var>& v) { return ad::concat_rows({v[0], v[1]}); }},
      {"matmul_t", [](Tape&, const std::vector<Var>& v) { return ad::matmul(v[0], ad::transpose(v[1])); }},
      {"slice", [](Tape&, const std::vector<Var>& v) { return ad::slice_cols(ad::slice_rows(v[0], 1, 2), 1, 2); }},
      {"softmax", [](Tape&, const std::vector<Var>& v) { return ad::softmax_rows(v[0]); }},
      {"mean", [](Tape&, const std::vector<Var>& v) { return ad::mean(v[0]); }},
  };
  for (const auto& [name, op] : ops) {
    const std::vector<Matrix> inputs = {random_matrix(3, 4, rng), random_matrix(3, 4, rng)};
    EXPECT_LT(max_input_gradient_error(op, inputs, rng), 1e-6) << name;
  }
}

TEST(Autodiff, StructuredOpGradients) {
  Rng rng(2);
  const Matrix mask = [] {
    Matrix m = Matrix::Zero(4, 4);
    m(0, 1) = m(0, 2) = m(0, 3) = m(1, 2) = m(1, 3) = m(2, 3) = -std::numeric_limits<double>::infinity();
    return m;
  }();
  EXPECT_LT(max_input_gradient_error([&](Tape&, const std::vector<Var>& v) { return ad::masked_softmax_rows(v[0], mask); },
                                     {random_matrix(4, 4, rng)}, rng),
            1e-6);
  EXPECT_LT(max_input_gradient_error(
                [](Tape&, const std::vector<Var>& v) { return ad::layer_norm_rows(v[0], v[1], v[2]); },
                {random_matrix(3, 5, rng), random_matrix(1, 5, rng), random_matrix(1, 5, rng)}, rng),
            1e-5);
  EXPECT_LT(max_input_gradient_error([](Tape&, const std::vector<Var>& v) { return ad::add_row(v[0], v[1]); },
                                     {random_matrix(3, 5, rng), random_matrix(1, 5, rng)}, rng),
            1e-6);
  EXPECT_LT(max_input_gradient_error([](Tape&, const std::vector<Var>& v) { return ad::gather_rows(v[0], {2, 0, 2}); },
                                     {random_matrix(3, 2, rng)}, rng),
            1e-6);
  EXPECT_LT(max_input_gradient_error(
                [](Tape&, const std::vector<Var>& v) {
                  return ad::scatter_rows({{v[0], {0, 3}}, {v[1], {1}}}, 4, 3);
                },
                {random_matrix(2, 3, rng), random_matrix(1, 3, rng)}, rng),
            1e-6);
  for (auto kind : {ad::NormKind::l1, ad::NormKind::l2, ad::NormKind::linf}) {
    EXPECT_LT(max_input_gradient_error([kind](Tape&, const std::vector<Var>& v) { return ad::row_norms(v[0], kind); },
                                       {random_matrix(3, 4, rng)}, rng),
              1e-6);
  }
  // Rows both inside and outside the ball.
  Matrix x = random_matrix(3, 4, rng);
  x.row(0) *= 5.0;
  EXPECT_LT(max_input_gradient_error([](Tape&, const std::vector<Var>& v) { return ad::project_rows_l2(v[0], 1.0); },
                                     {x}, rng),
            1e-6);
  ad::ConvTransposeGeometry geo{2, 3, 2, 3, 3, 2};
  EXPECT_LT(max_input_gradient_error(
                [geo](Tape&, const std::vector<Var>& v) { return ad::conv_transpose2d(v[0], v[1], v[2], geo); },
                {random_matrix(2, 2 * 3 * 2, rng), random_matrix(2, 3 * 3 * 3, rng), random_matrix(1, 3, rng)}, rng),
            1e-6);
}

TEST(Autodiff, ConvTransposeMatchesDirectSum) {
  Rng rng(3);
  ad::ConvTransposeGeometry geo{2, 2, 1, 1, 3, 2};
  const Matrix x = random_matrix(1, 4, rng);
  const Matrix w = random_matrix(1, 9, rng);
  Tape tape;
  Var y = ad::conv_transpose2d(tape.constant(x), tape.constant(w), tape.constant(Matrix::Zero(1, 1)), geo);
  ASSERT_EQ(y.cols(), 25);
  Matrix expected = Matrix::Zero(5, 5);
  for (int iy = 0; iy < 2; ++iy)
    for (int ix = 0; ix < 2; ++ix)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) expected(iy * 2 + ky, ix * 2 + kx) += x(0, iy * 2 + ix) * w(0, ky * 3 + kx);
  for (int i = 0; i < 25; ++i) EXPECT_NEAR(y.value()(0, i), expected(i / 5, i % 5), 1e-12);
}

TEST(Autodiff, NormSubgradientIsZeroAtOrigin) {
  Tape tape;
  Var x = tape.variable(Matrix::Zero(1, 3));
  Var l = ad::sum(ad::row_norms(x, ad::NormKind::l2));
  tape.backward(l);
  EXPECT_EQ(tape.grad(x).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Autodiff, ProjectionLandsInsideBall) {
  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    Tape tape;
    const Matrix x = random_matrix(1, 50, rng, -3, 3);
    Var y = ad::project_rows_l2(tape.constant(x), 1.5);
    EXPECT_LE(y.value().norm(), 1.5);
  }
}

TEST(Autodiff, ShapeErrors) {
  Tape tape;
  Var a = tape.constant(Matrix::Zero(2, 3));
  Var b = tape.constant(Matrix::Zero(2, 2));
  EXPECT_THROW(ad::add(a, b), aat::ShapeError);
  EXPECT_THROW(ad::matmul(a, a), aat::ShapeError);
  EXPECT_THROW(tape.backward(a), aat::ShapeError);
}

TEST(Autodiff, DropoutIsIdentityInEvaluation) {
  Tape tape(false);
  Var a = tape.constant(Matrix::Ones(2, 2));
  EXPECT_EQ(ad::dropout(a, 0.5).id(), a.id());
  Rng rng(5);
  Tape train(true, &rng);
  Var b = ad::dropout(train.constant(Matrix::Ones(200, 50)), 0.2);
  const double kept = (b.value().array() > 0).cast<double>().mean();
  EXPECT_NEAR(kept, 0.8, 0.02);
  EXPECT_NEAR(b.value().maxCoeff(), 1.25, 1e-12);
}

TEST(GradCheck, LinearToyModelMatchesClosedForm) {
  Rng rng(6);
  aat::nn::Linear lin("toy", 4, 2, rng);
  const Matrix x = random_matrix(5, 4, rng);
  const Matrix y = random_matrix(5, 2, rng);
  aat::ad::ParameterRefs params;
  lin.parameters(params);
  auto loss = [&](Tape& t) { return ad::mean(ad::square(ad::sub(lin.forward(t, t.constant(x)), t.constant(y)))); };
  const auto result = ad::check_gradients(params, loss, 200, rng);
  EXPECT_EQ(result.checked, 10u);
  EXPECT_LE(result.max_relative_error, 1e-6) << result.worst_parameter;

  // Closed form: dL/dW = 2/(n*m) X^T (XW + b - Y).
  Tape t;
  Var l = loss(t);
  t.backward(l);
  const Matrix resid = lin.apply(x) - y;
  const Matrix expected = 2.0 / 10.0 * x.transpose() * resid;
  EXPECT_LT((t.parameter_gradients().at(&lin.weight()) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Adam, ZeroLearningRateLeavesParametersBitExact) {
  Rng rng(7);
  aat::nn::Linear lin("l", 3, 3, rng);
  const Matrix before = lin.weight().value();
  aat::ad::ParameterRefs params;
  lin.parameters(params);
  aat::nn::Adam adam({.lr = 0.0});
  aat::ad::Gradients g;
  g[&lin.weight()] = Matrix::Ones(3, 3);
  adam.step(params, g);
  EXPECT_TRUE((lin.weight().value().array() == before.array()).all());
}

TEST(Adam, MinimisesQuadratic) {
  aat::ad::Parameter p("p", Matrix::Constant(1, 2, 5.0));
  aat::nn::Adam adam({.lr = 0.05});
  for (int i = 0; i < 2000; ++i) {
    Tape t;
    Var l = ad::sum(ad::square(ad::sub(t.parameter(p), t.constant(Matrix::Constant(1, 2, 1.0)))));
    t.backward(l);
    adam.step({&p}, t.parameter_gradients());
  }
  EXPECT_NEAR(p.value()(0, 0), 1.0, 1e-3);
}
