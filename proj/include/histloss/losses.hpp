#pragma once

// Embedding losses over pair similarities of unit vectors: the histogram loss
// (soft-assigned similarity histograms and the probability that a negative
// pair outscores a positive one), its margin variant, binomial deviance, and
// the semi-hard triplet loss. Every loss returns its value together with its
// gradient from a single pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "histloss/error.hpp"
#include "histloss/matrix.hpp"

namespace histloss {

/// Optional tally of elementary operations, used to check complexity claims.
struct WorkCounter {
  std::size_t ops = 0;
};

inline void count(WorkCounter* counter, std::size_t n = 1) {
  if (counter != nullptr) counter->ops += n;
}

// ---------------------------------------------------------------------------
// Pair similarities

struct PairSimilarity {
  std::size_t i = 0;
  std::size_t j = 0;
  double s = 0.0;

  friend bool operator==(const PairSimilarity&, const PairSimilarity&) = default;
};

/// S+ (same class) and S- (different class) over all unordered pairs i < j.
struct SimilaritySets {
  std::vector<PairSimilarity> positives;
  std::vector<PairSimilarity> negatives;

  std::vector<double> positive_values() const {
    std::vector<double> v;
    v.reserve(positives.size());
    for (const auto& p : positives) v.push_back(p.s);
    return v;
  }
  std::vector<double> negative_values() const {
    std::vector<double> v;
    v.reserve(negatives.size());
    for (const auto& p : negatives) v.push_back(p.s);
    return v;
  }
};

inline constexpr double kUnitNormTolerance = 1e-6;

inline double clamp_similarity(double s) noexcept { return std::clamp(s, -1.0, 1.0); }

/// Symmetric matrix of clamped scalar products. Rows must be unit length.
inline Matrix pairwise_similarities(const Matrix& embeddings) {
  const std::size_t n = embeddings.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const double norm = std::sqrt(dot(embeddings.row(i), embeddings.row(i)));
    if (std::abs(norm - 1.0) > kUnitNormTolerance) {
      throw Error(ErrorKind::ContractViolation,
                  "embedding row " + std::to_string(i) + " has norm " + std::to_string(norm));
    }
  }
  Matrix sims(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    sims(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double s = clamp_similarity(dot(embeddings.row(i), embeddings.row(j)));
      sims(i, j) = s;
      sims(j, i) = s;
    }
  }
  return sims;
}

/// m_ij = +1 for same class, -1 otherwise (i != j).
inline int match_label(std::span<const int> labels, std::size_t i, std::size_t j) {
  return labels[i] == labels[j] ? +1 : -1;
}

inline SimilaritySets split_similarities(const Matrix& sims, std::span<const int> labels) {
  const std::size_t n = labels.size();
  if (sims.rows() != n || sims.cols() != n) {
    throw Error(ErrorKind::Shape, "similarity matrix does not match label count");
  }
  if (n < 2) throw Error(ErrorKind::BatchComposition, "need at least two items");
  SimilaritySets sets;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      PairSimilarity p{i, j, clamp_similarity(sims(i, j))};
      (match_label(labels, i, j) > 0 ? sets.positives : sets.negatives).push_back(p);
    }
  }
  if (sets.positives.empty()) {
    throw Error(ErrorKind::BatchComposition, "batch has no positive pairs");
  }
  if (sets.negatives.empty()) {
    throw Error(ErrorKind::BatchComposition, "batch has no negative pairs");
  }
  return sets;
}

// ---------------------------------------------------------------------------
// Soft histograms

/// R values on nodes t_r = -1 + r * step, r = 0..R-1 (zero-based).
struct SoftHistogram {
  std::vector<double> values;

  std::size_t nodes() const noexcept { return values.size(); }
  double step() const noexcept { return 2.0 / static_cast<double>(values.size() - 1); }
  double node(std::size_t r) const noexcept { return -1.0 + static_cast<double>(r) * step(); }
};

inline double node_position(std::size_t r, std::size_t nodes) {
  return -1.0 + static_cast<double>(r) * (2.0 / static_cast<double>(nodes - 1));
}

/// Linear split of one sample between its two adjacent nodes: `lower_weight`
/// goes to node `lower`, `upper_weight` to node `lower + 1`. Intervals are
/// half-open [t_r, t_{r+1}) except the last, which also holds +1.
struct NodeAssignment {
  std::size_t lower = 0;
  double lower_weight = 1.0;
  double upper_weight = 0.0;
};

inline NodeAssignment assign_to_nodes(double s, std::size_t nodes) {
  const double intervals = static_cast<double>(nodes - 1);
  const double pos = (clamp_similarity(s) + 1.0) * 0.5 * intervals;
  // Snap values that sit on a node up to rounding so node samples land whole.
  const double nearest = std::round(pos);
  const double u = std::abs(pos - nearest) <= 1e-9 ? nearest : pos;
  std::size_t lower = static_cast<std::size_t>(std::floor(u));
  if (lower >= nodes - 1) lower = nodes - 2;
  const double frac = u - static_cast<double>(lower);
  return {lower, 1.0 - frac, frac};
}

inline void check_nodes(std::size_t nodes) {
  if (nodes < 2) {
    throw Error(ErrorKind::InvalidConfig,
                "histogram needs at least 2 nodes, got " + std::to_string(nodes));
  }
}

inline SoftHistogram soft_histogram(std::span<const double> samples, std::size_t nodes,
                                    WorkCounter* counter = nullptr) {
  check_nodes(nodes);
  if (samples.empty()) throw Error(ErrorKind::EmptySet, "cannot histogram an empty sample set");
  SoftHistogram h{std::vector<double>(nodes, 0.0)};
  const double weight = 1.0 / static_cast<double>(samples.size());
  for (double s : samples) {
    const auto a = assign_to_nodes(s, nodes);
    h.values[a.lower] += a.lower_weight * weight;
    h.values[a.lower + 1] += a.upper_weight * weight;
    count(counter);
  }
  return h;
}

inline void check_same_grid(const SoftHistogram& a, const SoftHistogram& b) {
  if (a.nodes() != b.nodes()) {
    throw Error(ErrorKind::InvalidConfig, "histograms have " + std::to_string(a.nodes()) +
                                              " and " + std::to_string(b.nodes()) + " nodes");
  }
  check_nodes(a.nodes());
}

/// L_mu = sum_r h-_r * sum_{q <= min(r + mu, R)} h+_q. mu = 0 is the plain
/// histogram loss: the estimated probability that a negative pair is at least
/// as similar as a positive pair.
inline double histogram_loss_margin(const SoftHistogram& plus, const SoftHistogram& minus,
                                    std::size_t mu, WorkCounter* counter = nullptr) {
  check_same_grid(plus, minus);
  const std::size_t nodes = plus.nodes();
  std::vector<double> cdf(nodes);
  double running = 0.0;
  for (std::size_t r = 0; r < nodes; ++r) {
    running += plus.values[r];
    cdf[r] = running;
    count(counter);
  }
  double loss = 0.0;
  for (std::size_t r = 0; r < nodes; ++r) {
    const std::size_t q = std::min(r + mu, nodes - 1);
    loss += minus.values[r] * cdf[q];
    count(counter);
  }
  return loss;
}

inline double histogram_loss(const SoftHistogram& plus, const SoftHistogram& minus,
                             WorkCounter* counter = nullptr) {
  return histogram_loss_margin(plus, minus, 0, counter);
}

/// Histogram loss straight from the two sample sets.
inline double histogram_loss(std::span<const double> positives, std::span<const double> negatives,
                             std::size_t nodes, WorkCounter* counter = nullptr) {
  return histogram_loss(soft_histogram(positives, nodes, counter),
                        soft_histogram(negatives, nodes, counter), counter);
}

/// One row of the histogram export record.
struct HistogramRow {
  double node = 0.0;
  double plus = 0.0;
  double minus = 0.0;

  friend bool operator==(const HistogramRow&, const HistogramRow&) = default;
};

inline std::vector<HistogramRow> histogram_rows(const SoftHistogram& plus,
                                                const SoftHistogram& minus) {
  check_same_grid(plus, minus);
  std::vector<HistogramRow> rows;
  rows.reserve(plus.nodes());
  for (std::size_t r = 0; r < plus.nodes(); ++r) {
    rows.push_back({plus.node(r), plus.values[r], minus.values[r]});
  }
  return rows;
}

/// Overlap mass sum_r min(h+_r, h-_r).
inline double overlap_mass(const SoftHistogram& plus, const SoftHistogram& minus) {
  check_same_grid(plus, minus);
  double m = 0.0;
  for (std::size_t r = 0; r < plus.nodes(); ++r) m += std::min(plus.values[r], minus.values[r]);
  return m;
}

// ---------------------------------------------------------------------------
// Loss records

struct LossResult {
  double loss = 0.0;
  std::vector<double> grad_positive;  // dL/ds per entry of SimilaritySets::positives
  std::vector<double> grad_negative;  // dL/ds per entry of SimilaritySets::negatives
  std::optional<Matrix> grad_embeddings;
  bool valid = true;  // false when a triplet batch had no usable triplet
};

struct PairGradient {
  std::size_t i = 0;
  std::size_t j = 0;
  double grad = 0.0;
};

inline std::vector<PairGradient> pair_gradients(const SimilaritySets& sets,
                                                const LossResult& result) {
  if (result.grad_positive.size() != sets.positives.size() ||
      result.grad_negative.size() != sets.negatives.size()) {
    throw Error(ErrorKind::Shape, "loss gradients do not match the similarity sets");
  }
  std::vector<PairGradient> out;
  out.reserve(sets.positives.size() + sets.negatives.size());
  for (std::size_t k = 0; k < sets.positives.size(); ++k) {
    out.push_back({sets.positives[k].i, sets.positives[k].j, result.grad_positive[k]});
  }
  for (std::size_t k = 0; k < sets.negatives.size(); ++k) {
    out.push_back({sets.negatives[k].i, sets.negatives[k].j, result.grad_negative[k]});
  }
  return out;
}

/// Histogram loss with dL/ds for every pair. With dL/dh-_r = phi+_r and
/// dL/dh+_r = sum_{q >= r} h-_q, a sample in [t_k, t_{k+1}) moves weight from
/// node k to node k+1 at rate 1/(step * |S|).
inline LossResult histogram_loss_backward(const SimilaritySets& sets, std::size_t nodes) {
  check_nodes(nodes);
  if (sets.positives.empty() || sets.negatives.empty()) {
    throw Error(ErrorKind::EmptySet, "histogram loss needs non-empty S+ and S-");
  }
  const auto pos = sets.positive_values();
  const auto neg = sets.negative_values();
  const SoftHistogram plus = soft_histogram(pos, nodes);
  const SoftHistogram minus = soft_histogram(neg, nodes);

  std::vector<double> d_minus(nodes);  // phi+_r
  std::vector<double> d_plus(nodes);   // tail sums of h-
  double running = 0.0;
  for (std::size_t r = 0; r < nodes; ++r) {
    running += plus.values[r];
    d_minus[r] = running;
  }
  running = 0.0;
  for (std::size_t r = nodes; r-- > 0;) {
    running += minus.values[r];
    d_plus[r] = running;
  }

  LossResult result;
  result.loss = histogram_loss(plus, minus);
  const double step = plus.step();
  const double scale_pos = 1.0 / (step * static_cast<double>(pos.size()));
  const double scale_neg = 1.0 / (step * static_cast<double>(neg.size()));
  result.grad_positive.reserve(pos.size());
  for (double s : pos) {
    const auto a = assign_to_nodes(s, nodes);
    result.grad_positive.push_back((d_plus[a.lower + 1] - d_plus[a.lower]) * scale_pos);
  }
  result.grad_negative.reserve(neg.size());
  for (double s : neg) {
    const auto a = assign_to_nodes(s, nodes);
    result.grad_negative.push_back((d_minus[a.lower + 1] - d_minus[a.lower]) * scale_neg);
  }
  return result;
}

/// Margin variant of the backward pass (mu = 0 matches histogram_loss_backward).
inline LossResult histogram_loss_margin_backward(const SimilaritySets& sets, std::size_t nodes,
                                                 std::size_t mu) {
  if (mu == 0) return histogram_loss_backward(sets, nodes);
  check_nodes(nodes);
  if (sets.positives.empty() || sets.negatives.empty()) {
    throw Error(ErrorKind::EmptySet, "histogram loss needs non-empty S+ and S-");
  }
  const auto pos = sets.positive_values();
  const auto neg = sets.negative_values();
  const SoftHistogram plus = soft_histogram(pos, nodes);
  const SoftHistogram minus = soft_histogram(neg, nodes);

  // dL/dh-_r = phi+_{min(r+mu, R)}; dL/dh+_q = sum of h-_r over r with min(r+mu, R) >= q.
  std::vector<double> cdf(nodes);
  double running = 0.0;
  for (std::size_t r = 0; r < nodes; ++r) {
    running += plus.values[r];
    cdf[r] = running;
  }
  std::vector<double> d_minus(nodes);
  for (std::size_t r = 0; r < nodes; ++r) d_minus[r] = cdf[std::min(r + mu, nodes - 1)];
  std::vector<double> tail(nodes + 1, 0.0);
  for (std::size_t r = nodes; r-- > 0;) tail[r] = tail[r + 1] + minus.values[r];
  std::vector<double> d_plus(nodes);
  for (std::size_t q = 0; q < nodes; ++q) d_plus[q] = tail[q > mu ? q - mu : 0];

  LossResult result;
  result.loss = histogram_loss_margin(plus, minus, mu);
  const double step = plus.step();
  const double scale_pos = 1.0 / (step * static_cast<double>(pos.size()));
  const double scale_neg = 1.0 / (step * static_cast<double>(neg.size()));
  for (double s : pos) {
    const auto a = assign_to_nodes(s, nodes);
    result.grad_positive.push_back((d_plus[a.lower + 1] - d_plus[a.lower]) * scale_pos);
  }
  for (double s : neg) {
    const auto a = assign_to_nodes(s, nodes);
    result.grad_negative.push_back((d_minus[a.lower + 1] - d_minus[a.lower]) * scale_neg);
  }
  return result;
}

/// Chain pair gradients onto embeddings: ds_ij/dy_i = y_j, ds_ij/dy_j = y_i.
inline Matrix similarity_backward(const Matrix& embeddings, std::span<const PairGradient> grads) {
  Matrix out(embeddings.rows(), embeddings.cols());
  for (const auto& g : grads) {
    if (g.i >= embeddings.rows() || g.j >= embeddings.rows()) {
      throw Error(ErrorKind::Shape, "pair (" + std::to_string(g.i) + ", " + std::to_string(g.j) +
                                        ") out of range for " +
                                        std::to_string(embeddings.rows()) + " rows");
    }
    if (g.grad == 0.0) continue;
    auto ri = out.row(g.i);
    auto rj = out.row(g.j);
    const auto yi = embeddings.row(g.i);
    const auto yj = embeddings.row(g.j);
    for (std::size_t e = 0; e < ri.size(); ++e) {
      ri[e] += g.grad * yj[e];
      rj[e] += g.grad * yi[e];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binomial deviance

struct BinomialDevianceParams {
  double alpha = 2.0;
  double beta = 0.5;
  double cost = 10.0;  // C, the negative-pair cost
};

namespace detail {

/// ln(1 + e^u) without overflow.
inline double softplus(double u) { return u > 0.0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u)); }

inline double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

}  // namespace detail

/// J = sum w_ij ln(exp(-alpha (s_ij - beta) m_ij) + 1), with m = 1 and
/// w = 1/n1 on positives, m = -C and w = 1/n2 on negatives.
inline LossResult binomial_deviance(const SimilaritySets& sets,
                                    const BinomialDevianceParams& params = {}) {
  if (sets.positives.empty() || sets.negatives.empty()) {
    throw Error(ErrorKind::BatchComposition,
                "binomial deviance needs at least one positive and one negative pair");
  }
  LossResult result;
  auto accumulate = [&](const std::vector<PairSimilarity>& pairs, double m,
                        std::vector<double>& grads) {
    const double w = 1.0 / static_cast<double>(pairs.size());
    grads.reserve(pairs.size());
    for (const auto& p : pairs) {
      const double u = -params.alpha * (p.s - params.beta) * m;
      result.loss += w * detail::softplus(u);
      grads.push_back(w * detail::sigmoid(u) * (-params.alpha * m));
    }
  };
  accumulate(sets.positives, 1.0, result.grad_positive);
  accumulate(sets.negatives, -params.cost, result.grad_negative);
  return result;
}

// ---------------------------------------------------------------------------
// Semi-hard triplet loss

/// For every ordered anchor-positive pair, every negative with
/// d+ < d- < d+ + margin contributes max(0, d+ - d- + margin); the loss is the
/// mean over selected triplets. Distances are Euclidean on unit embeddings.
inline LossResult triplet_semihard(const Matrix& embeddings, std::span<const int> labels,
                                   double margin = 0.2) {
  const std::size_t n = embeddings.rows();
  if (labels.size() != n) throw Error(ErrorKind::Shape, "label count does not match embeddings");
  const std::size_t dim = embeddings.cols();

  Matrix dist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d2 = 0.0;
      for (std::size_t e = 0; e < dim; ++e) {
        const double diff = embeddings(i, e) - embeddings(j, e);
        d2 += diff * diff;
      }
      dist(i, j) = dist(j, i) = std::sqrt(d2);
    }
  }

  LossResult result;
  Matrix grad(n, dim);
  std::size_t selected = 0;
  double total = 0.0;

  // d|a - b| / da = (a - b) / |a - b|; zero subgradient at coincidence.
  auto add_distance_grad = [&](std::size_t a, std::size_t b, double coef) {
    const double d = dist(a, b);
    if (d <= 0.0) return;
    for (std::size_t e = 0; e < dim; ++e) {
      const double g = coef * (embeddings(a, e) - embeddings(b, e)) / d;
      grad(a, e) += g;
      grad(b, e) -= g;
    }
  };

  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      const double d_pos = dist(a, p);
      for (std::size_t q = 0; q < n; ++q) {
        if (labels[q] == labels[a]) continue;
        const double d_neg = dist(a, q);
        if (!(d_pos < d_neg && d_neg < d_pos + margin)) continue;
        ++selected;
        total += d_pos - d_neg + margin;
        add_distance_grad(a, p, 1.0);
        add_distance_grad(a, q, -1.0);
      }
    }
  }

  if (selected == 0) {
    result.valid = false;
    result.grad_embeddings = Matrix(n, dim);
    return result;
  }
  const double inv = 1.0 / static_cast<double>(selected);
  result.loss = total * inv;
  for (auto& g : grad.values()) g *= inv;
  result.grad_embeddings = std::move(grad);
  return result;
}

}  // namespace histloss
