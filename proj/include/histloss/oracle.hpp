#pragma once

// Brute-force references kept apart from the training path: the exhaustive
// pair-of-pairs reverse rate, a dense double-sum histogram loss, and central
// finite-difference gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <random>
#include <span>
#include <vector>

#include "histloss/embednet.hpp"
#include "histloss/error.hpp"
#include "histloss/eval.hpp"
#include "histloss/losses.hpp"

namespace histloss::oracle {

/// Fraction of (positive, negative) pair-of-pairs where the negative pair is
/// more similar; ties count with `tie_weight`. |S+| * |S-| comparisons.
inline double quadruplet_reverse_rate(std::span<const double> positives,
                                      std::span<const double> negatives, double tie_weight = 1.0,
                                      WorkCounter* counter = nullptr) {
  if (positives.empty() || negatives.empty()) {
    throw Error(ErrorKind::EmptySet, "reverse rate needs non-empty S+ and S-");
  }
  if (!(tie_weight >= 0.0 && tie_weight <= 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "tie weight must lie in [0, 1]");
  }
  double total = 0.0;
  for (double sn : negatives) {
    for (double sp : positives) {
      if (sn > sp) {
        total += 1.0;
      } else if (sn == sp) {
        total += tie_weight;
      }
      count(counter);
    }
  }
  return total / (static_cast<double>(positives.size()) * static_cast<double>(negatives.size()));
}

/// Histogram loss from scratch: each node value is the mean triangular kernel
/// max(0, 1 - |s - t_r| / step), and the loss is the full double sum over
/// node pairs q <= r.
inline double dense_loss_reference(std::span<const double> positives,
                                   std::span<const double> negatives, std::size_t nodes) {
  if (nodes < 2) throw Error(ErrorKind::InvalidConfig, "need at least 2 nodes");
  if (positives.empty() || negatives.empty()) {
    throw Error(ErrorKind::EmptySet, "dense reference needs non-empty S+ and S-");
  }
  const double step = 2.0 / static_cast<double>(nodes - 1);
  auto density = [&](std::span<const double> samples) {
    std::vector<double> h(nodes, 0.0);
    for (std::size_t r = 0; r < nodes; ++r) {
      const double t = -1.0 + static_cast<double>(r) * step;
      for (double s : samples) {
        const double c = std::clamp(s, -1.0, 1.0);
        h[r] += std::max(0.0, 1.0 - std::abs(c - t) / step);
      }
      h[r] /= static_cast<double>(samples.size());
    }
    return h;
  };
  const auto hp = density(positives);
  const auto hn = density(negatives);
  double loss = 0.0;
  for (std::size_t r = 0; r < nodes; ++r) {
    for (std::size_t q = 0; q <= r; ++q) loss += hn[r] * hp[q];
  }
  return loss;
}

using ScalarFunction = std::function<double(std::span<const double>)>;

/// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
inline std::vector<double> finite_diff_grad(const ScalarFunction& f, std::span<const double> point,
                                            double step) {
  if (!(step > 0.0)) throw Error(ErrorKind::InvalidConfig, "finite-difference step must be > 0");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f(x);
    x[i] = saved - step;
    const double down = f(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw Error(ErrorKind::Numerical,
                  "function is not finite around coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

/// |a - b| / max(|a|, |b|, 1e-8).
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t argmax = 0;
  std::vector<double> errors;
  double step = 0.0;
  double loss = 0.0;
};

inline GradCheckReport compare_gradients(std::span<const double> analytic,
                                         std::span<const double> numeric, double step) {
  if (analytic.size() != numeric.size()) {
    throw Error(ErrorKind::Shape, "gradient lengths differ");
  }
  GradCheckReport report;
  report.step = step;
  report.errors.reserve(analytic.size());
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = relative_error(analytic[i], numeric[i]);
    report.errors.push_back(e);
    if (e > report.max_rel_error) {
      report.max_rel_error = e;
      report.argmax = i;
    }
  }
  return report;
}

inline nlohmann::json to_json(const GradCheckReport& r, double tolerance) {
  return {{"max_rel_error", r.max_rel_error},
          {"argmax", r.argmax},
          {"step", r.step},
          {"loss", r.loss},
          {"parameters", r.errors.size()},
          {"tolerance", tolerance},
          {"passed", r.max_rel_error < tolerance},
          {"errors", r.errors}};
}

// ---------------------------------------------------------------------------
// End-to-end check: loss -> similarities -> normalization -> MLP parameters.

struct EncoderCheckSpec {
  LossConfig loss;
  std::uint64_t seed = 1;
  std::size_t batch = 16;
  std::size_t classes = 4;
  std::size_t input_dim = 12;
  std::vector<std::size_t> hidden{16};
  std::size_t embedding_dim = 8;
  InitScheme init = InitScheme::Uniform;
  double step = 1e-5;
};

/// A random batch plus encoder whose loss is smooth within a few steps of the
/// evaluation point: no similarity near a histogram node, no rectifier input
/// near zero, no triplet near a selection boundary.
struct EncoderProblem {
  EncoderParams params;
  Matrix inputs;
  std::vector<int> labels;
  std::size_t attempts = 0;
};

namespace detail {

inline double nearest_node_distance(double s, std::size_t nodes) {
  const double step = 2.0 / static_cast<double>(nodes - 1);
  const double pos = (s + 1.0) / step;
  return std::abs(pos - std::round(pos)) * step;
}

inline bool smooth_at(const EncoderCheckSpec& spec, const EncoderParams& params,
                      const Matrix& inputs, std::span<const int> labels) {
  const auto trace = forward(params, inputs);
  const double relu_guard = 1e-4;
  for (std::size_t k = 0; k + 1 < trace.pre_activations.size(); ++k) {
    for (double v : trace.pre_activations[k].values()) {
      if (std::abs(v) < relu_guard) return false;
    }
  }
  const Matrix sims = pairwise_similarities(trace.embeddings);
  const std::size_t n = sims.rows();
  const auto kind = spec.loss.kind;
  if (kind == LossKind::Histogram || kind == LossKind::HistogramMargin) {
    const double step = 2.0 / static_cast<double>(spec.loss.bins - 1);
    const double guard = std::min(1e-3, step / 100.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (nearest_node_distance(sims(i, j), spec.loss.bins) < guard) return false;
      }
    }
  }
  if (kind == LossKind::TripletSemihard) {
    auto dist = [&](std::size_t a, std::size_t b) {
      return std::sqrt(std::max(0.0, 2.0 - 2.0 * sims(a, b)));
    };
    const double guard = 1e-4;
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t p = 0; p < n; ++p) {
        if (p == a || labels[p] != labels[a]) continue;
        for (std::size_t q = 0; q < n; ++q) {
          if (labels[q] == labels[a]) continue;
          const double gap = dist(a, q) - dist(a, p);
          if (std::abs(gap) < guard || std::abs(gap - spec.loss.triplet_margin) < guard) {
            return false;
          }
        }
      }
    }
  }
  return true;
}

}  // namespace detail

inline EncoderProblem make_encoder_problem(const EncoderCheckSpec& spec) {
  if (spec.batch < 4 || spec.classes < 2 || spec.classes > spec.batch / 2) {
    throw Error(ErrorKind::InvalidConfig, "gradcheck batch must hold >= 2 classes of >= 2 items");
  }
  std::vector<std::size_t> dims{spec.input_dim};
  dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
  dims.push_back(spec.embedding_dim);

  EncoderProblem problem;
  problem.labels.resize(spec.batch);
  for (std::size_t i = 0; i < spec.batch; ++i) {
    problem.labels[i] = static_cast<int>(i % spec.classes);
  }
  constexpr std::size_t kMaxAttempts = 1000;
  for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const std::uint64_t sub_seed = spec.seed * 1000003ULL + attempt;
    std::mt19937_64 rng(sub_seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    problem.inputs = Matrix(spec.batch, spec.input_dim);
    for (auto& v : problem.inputs.values()) v = gauss(rng);
    problem.params = init_params(sub_seed, dims, spec.init);
    // Non-zero biases exercise the bias gradients.
    for (auto& layer : problem.params.layers) {
      for (auto& b : layer.bias) b = 0.1 * gauss(rng);
    }
    problem.attempts = attempt + 1;
    if (detail::smooth_at(spec, problem.params, problem.inputs, problem.labels)) return problem;
  }
  throw Error(ErrorKind::Numerical, "no smooth gradcheck point found");
}

inline double encoder_loss(const LossConfig& loss, const EncoderParams& params,
                           const Matrix& inputs, std::span<const int> labels) {
  return batch_loss(loss, forward(params, inputs).embeddings, labels).loss;
}

/// Analytic parameter gradient of the full chain against central differences.
inline GradCheckReport check_encoder_gradients(const EncoderCheckSpec& spec) {
  const auto problem = make_encoder_problem(spec);
  const auto trace = forward(problem.params, problem.inputs);
  const auto step_loss = batch_loss(spec.loss, trace.embeddings, problem.labels);
  const auto analytic = flatten(backward(problem.params, trace, step_loss.grad_embeddings));

  EncoderParams scratch = problem.params;
  auto f = [&](std::span<const double> flat) {
    unflatten(flat, scratch);
    return encoder_loss(spec.loss, scratch, problem.inputs, problem.labels);
  };
  const auto numeric = finite_diff_grad(f, flatten(problem.params), spec.step);
  auto report = compare_gradients(analytic, numeric, spec.step);
  report.loss = step_loss.loss;
  return report;
}

}  // namespace histloss::oracle
