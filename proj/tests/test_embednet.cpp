#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "histloss/embednet.hpp"
#include "histloss/oracle.hpp"

namespace histloss {
namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = gauss(rng);
  return m;
}

EncoderParams identity_encoder(std::size_t dim) {
  EncoderParams p;
  Layer l{Matrix(dim, dim), std::vector<double>(dim, 0.0), Activation::Identity};
  for (std::size_t i = 0; i < dim; ++i) l.weight(i, i) = 1.0;
  p.layers.push_back(l);
  return p;
}

TEST(InitParams, ShapeAndZeroBias) {
  for (auto scheme : {InitScheme::Mirrored, InitScheme::Uniform}) {
    const auto p = init_params(1, {4, 3}, scheme);
    ASSERT_EQ(p.layers.size(), 1u);
    EXPECT_EQ(p.layers[0].weight.rows(), 3u);
    EXPECT_EQ(p.layers[0].weight.cols(), 4u);
    EXPECT_EQ(p.layers[0].bias, std::vector<double>({0.0, 0.0, 0.0}));
  }
}

TEST(InitParams, DeterministicPerSeed) {
  for (auto scheme : {InitScheme::Mirrored, InitScheme::Uniform}) {
    const auto a = init_params(1, {32, 64, 64, 16}, scheme);
    const auto b = init_params(1, {32, 64, 64, 16}, scheme);
    const auto c = init_params(2, {32, 64, 64, 16}, scheme);
    EXPECT_EQ(a, b);
    EXPECT_NE(serialize_checkpoint(a, AdamState::for_params(a)),
              serialize_checkpoint(c, AdamState::for_params(c)));
  }
}

TEST(InitParams, RejectsBadDims) {
  EXPECT_THROW(init_params(1, std::span<const std::size_t>{}), Error);
  EXPECT_THROW(init_params(1, {4}), Error);
  EXPECT_THROW(init_params(1, {4, 0, 3}), Error);
}

TEST(InitParams, UniformScale) {
  const auto p = init_params(3, {50, 20}, InitScheme::Uniform);
  const double bound = 1.0 / std::sqrt(50.0);
  for (double w : p.layers[0].weight.values()) EXPECT_LE(std::abs(w), bound);
}

TEST(InitParams, MirroredPreservesGeometry) {
  // Hidden layers at least twice the input width keep the map an isometry up to scale.
  const auto p = init_params(5, {8, 16, 16, 8});
  const auto x = random_matrix(6, 8, 9);
  const auto trace = forward(p, x);
  const Matrix& out = trace.raw_output();
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_NEAR(dot(out.row(i), out.row(j)), dot(x.row(i), x.row(j)), 1e-9);
    }
  }
}

TEST(Forward, NormalizesThreeFourFive) {
  const auto trace = forward(identity_encoder(2), Matrix(1, 2, std::vector<double>{3.0, 4.0}));
  EXPECT_DOUBLE_EQ(trace.embeddings(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(trace.embeddings(0, 1), 0.8);
}

TEST(Forward, UnitRowsAndDeterminism) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = init_params(seed, {7, 64, 64, 5}, InitScheme::Uniform);
    const auto x = random_matrix(9, 7, seed + 100);
    const auto a = forward(p, x);
    const auto b = forward(p, x);
    EXPECT_EQ(a.embeddings, b.embeddings);
    for (std::size_t n = 0; n < 9; ++n) {
      EXPECT_NEAR(std::sqrt(dot(a.embeddings.row(n), a.embeddings.row(n))), 1.0, 1e-9);
    }
  }
}

TEST(Forward, MatchesHandRecomputation) {
  auto p = init_params(11, {5, 6, 4}, InitScheme::Uniform);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> gauss(0.0, 0.3);
  for (auto& l : p.layers) {
    for (auto& b : l.bias) b = gauss(rng);
  }
  const auto x = random_matrix(3, 5, 12);
  const auto trace = forward(p, x);
  for (std::size_t n = 0; n < 3; ++n) {
    // Column-at-a-time evaluation of relu(W1 x + b1), then W2 h + b2.
    std::vector<double> h(6, 0.0), o(4, 0.0);
    for (std::size_t c = 0; c < 5; ++c) {
      for (std::size_t r = 0; r < 6; ++r) h[r] += p.layers[0].weight(r, c) * x(n, c);
    }
    for (std::size_t r = 0; r < 6; ++r) h[r] = std::max(0.0, h[r] + p.layers[0].bias[r]);
    for (std::size_t c = 0; c < 6; ++c) {
      for (std::size_t r = 0; r < 4; ++r) o[r] += p.layers[1].weight(r, c) * h[c];
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < 4; ++r) {
      o[r] += p.layers[1].bias[r];
      norm += o[r] * o[r];
    }
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < 4; ++r) EXPECT_NEAR(trace.embeddings(n, r), o[r] / norm, 1e-12);
  }
}

TEST(Forward, Errors) {
  const auto p = init_params(1, {3, 2});
  try {
    forward(p, Matrix(2, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
  }
  try {
    forward(p, Matrix(2, 3));  // zero input, zero bias -> zero output
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateEmbedding);
  }
}

TEST(L2NormalizeBackward, TangentialAndRadial) {
  const std::vector<double> x{2.0, 0.0};
  EXPECT_EQ(l2_normalize_backward(x, std::vector<double>{0.0, 1.0}),
            std::vector<double>({0.0, 0.5}));
  EXPECT_EQ(l2_normalize_backward(x, std::vector<double>{1.0, 0.0}),
            std::vector<double>({0.0, 0.0}));
}

TEST(L2NormalizeBackward, DegenerateInput) {
  try {
    l2_normalize_backward(std::vector<double>{1e-13, 0.0}, std::vector<double>{1.0, 1.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateEmbedding);
  }
}

TEST(L2NormalizeBackward, FiniteDifferencesAndOrthogonality) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> x(6), g(6);
    for (auto& v : x) v = gauss(rng);
    for (auto& v : g) v = gauss(rng);
    const auto analytic = l2_normalize_backward(x, g);
    auto f = [&](std::span<const double> p) {
      const double n = std::sqrt(dot(p, p));
      double acc = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) acc += g[k] * p[k] / n;
      return acc;
    };
    const auto numeric = oracle::finite_diff_grad(f, x, 1e-6);
    for (std::size_t k = 0; k < x.size(); ++k) {
      EXPECT_LT(oracle::relative_error(analytic[k], numeric[k]), 1e-6);
    }
    const double norm = std::sqrt(dot(x, x));
    double radial = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) radial += analytic[k] * x[k] / norm;
    EXPECT_NEAR(radial, 0.0, 1e-9);
  }
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  const auto p = init_params(2, {4, 8, 3}, InitScheme::Uniform);
  const auto trace = forward(p, random_matrix(5, 4, 3));
  const auto g = backward(p, trace, Matrix(5, 3));
  for (double v : flatten(g)) EXPECT_EQ(v, 0.0);
}

TEST(Backward, SingleLinearLayerIdentity) {
  // With one affine layer the weight gradient is grad_pre^T * input.
  const auto p = init_params(6, {3, 2}, InitScheme::Uniform);
  const auto x = random_matrix(4, 3, 7);
  const auto trace = forward(p, x);
  const auto gy = random_matrix(4, 2, 8);
  const auto g = backward(p, trace, gy);
  Matrix grad_pre(4, 2);
  for (std::size_t n = 0; n < 4; ++n) {
    const auto gp = l2_normalize_backward(trace.raw_output().row(n), gy.row(n));
    for (std::size_t o = 0; o < 2; ++o) grad_pre(n, o) = gp[o];
  }
  for (std::size_t o = 0; o < 2; ++o) {
    double gb = 0.0;
    for (std::size_t n = 0; n < 4; ++n) gb += grad_pre(n, o);
    EXPECT_NEAR(g.layers[0].bias[o], gb, 1e-12);
    for (std::size_t i = 0; i < 3; ++i) {
      double gw = 0.0;
      for (std::size_t n = 0; n < 4; ++n) gw += grad_pre(n, o) * x(n, i);
      EXPECT_NEAR(g.layers[0].weight(o, i), gw, 1e-12);
    }
  }
}

TEST(Backward, ShapeMismatch) {
  const auto p = init_params(2, {4, 3});
  const auto trace = forward(p, random_matrix(5, 4, 3));
  EXPECT_THROW(backward(p, trace, Matrix(5, 2)), Error);
}

// Random network, linear readout of the embeddings: analytic vs central differences.
TEST(Backward, FiniteDifferencesOverAllParameters) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto p = init_params(seed, {5, 7, 6, 4}, InitScheme::Uniform);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& l : p.layers) {
      for (auto& b : l.bias) b = 0.1 * gauss(rng);
    }
    const auto x = random_matrix(6, 5, seed + 50);
    const auto gy = random_matrix(6, 4, seed + 90);
    const auto trace = forward(p, x);
    bool near_kink = false;
    for (std::size_t k = 0; k + 1 < trace.pre_activations.size(); ++k) {
      for (double v : trace.pre_activations[k].values()) near_kink |= std::abs(v) < 1e-4;
    }
    if (near_kink) continue;
    const auto analytic = flatten(backward(p, trace, gy));
    EncoderParams scratch = p;
    auto f = [&](std::span<const double> flat) {
      unflatten(flat, scratch);
      const auto y = forward(scratch, x).embeddings;
      return dot(y.values(), gy.values());
    };
    const auto numeric = oracle::finite_diff_grad(f, flatten(p), 1e-5);
    EXPECT_LT(oracle::compare_gradients(analytic, numeric, 1e-5).max_rel_error, 1e-4)
        << "seed " << seed;
  }
}

TEST(Adam, ZeroGradientLeavesParams) {
  auto p = init_params(1, {3, 2});
  const auto before = p;
  auto state = AdamState::for_params(p);
  adam_step(p, zeros_like(p), state);
  EXPECT_EQ(p, before);
  EXPECT_EQ(state.step, 1u);
}

EncoderParams scalar_param(double w) {
  EncoderParams p;
  p.layers.push_back({Matrix(1, 1, std::vector<double>{w}), {0.0}, Activation::Identity});
  return p;
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = scalar_param(0.5);
  auto g = scalar_param(1.0);
  auto state = AdamState::for_params(p, {0.01, 0.9, 0.999, 1e-8});
  adam_step(p, g, state);
  EXPECT_NEAR(0.5 - p.layers[0].weight(0, 0), 0.01, 1e-9);
  EXPECT_EQ(p.layers[0].bias[0], 0.0);
}

TEST(Adam, QuadraticDescentMatchesReference) {
  // Frozen from an independent scripted ADAM (beta1 0.9, beta2 0.999, eps 1e-8).
  constexpr double kReferenceFinal = 0.002936675681102549;
  auto p = scalar_param(1.0);
  auto state = AdamState::for_params(p, {0.1, 0.9, 0.999, 1e-8});
  std::vector<double> trajectory{1.0};
  for (int t = 0; t < 100; ++t) {
    auto g = scalar_param(2.0 * p.layers[0].weight(0, 0));
    g.layers[0].bias[0] = 0.0;
    adam_step(p, g, state);
    trajectory.push_back(p.layers[0].weight(0, 0));
  }
  for (int t = 0; t < 10; ++t) EXPECT_LT(std::abs(trajectory[t + 1]), std::abs(trajectory[t]));
  EXPECT_LT(std::abs(trajectory.back()), 0.5);
  EXPECT_NEAR(trajectory.back(), kReferenceFinal, 1e-12);
  EXPECT_EQ(state.step, 100u);
}

TEST(Adam, RejectsNonFiniteGradient) {
  auto p = scalar_param(1.0);
  auto g = scalar_param(std::nan(""));
  auto state = AdamState::for_params(p);
  try {
    adam_step(p, g, state);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numerical);
  }
}

TEST(Checkpoint, RoundTripIsValueExact) {
  auto p = init_params(4, {6, 10, 3});
  auto state = AdamState::for_params(p, {3e-4, 0.8, 0.99, 1e-7});
  const auto x = random_matrix(8, 6, 1);
  for (int it = 0; it < 3; ++it) {
    const auto trace = forward(p, x);
    adam_step(p, backward(p, trace, random_matrix(8, 3, 20 + it)), state);
  }
  const auto text = serialize_checkpoint(p, state);
  const auto back = deserialize_checkpoint(text);
  EXPECT_EQ(back.params, p);
  EXPECT_EQ(back.adam, state);
  EXPECT_EQ(serialize_checkpoint(back.params, back.adam), text);
}

TEST(Checkpoint, RejectsGarbage) {
  EXPECT_THROW(deserialize_checkpoint("nonsense 1\n"), Error);
  EXPECT_THROW(deserialize_checkpoint("histloss-checkpoint 99\n"), Error);
  auto p = init_params(1, {2, 2});
  auto text = serialize_checkpoint(p, AdamState::for_params(p));
  EXPECT_THROW(deserialize_checkpoint(text.substr(0, text.size() / 2)), Error);
}

}  // namespace
}  // namespace histloss
