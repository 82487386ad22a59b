#pragma once

// Retrieval evaluation, similarity-histogram export, and the training driver.

#include <cstdint>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "histloss/data.hpp"
#include "histloss/embednet.hpp"
#include "histloss/error.hpp"
#include "histloss/losses.hpp"

namespace histloss {

// ---------------------------------------------------------------------------
// Recall@K (multi-shot): every item queries the rest of the set.

struct RecallResult {
  std::map<std::size_t, double> recall;
  std::size_t queries = 0;          // queries that were scored
  std::size_t skipped_queries = 0;  // queries with no same-class item in the gallery
};

/// For each query, the gallery is ranked by descending cosine similarity with
/// ties going to the lower index. A query hits at K when a same-class item is
/// among the first K.
inline RecallResult recall_at_k(const Matrix& embeddings, std::span<const int> labels,
                                std::span<const std::size_t> ks) {
  const std::size_t m = embeddings.rows();
  if (labels.size() != m) throw Error(ErrorKind::Shape, "label count does not match embeddings");
  if (m < 2) throw Error(ErrorKind::InvalidConfig, "Recall@K needs at least 2 items");
  if (ks.empty()) throw Error(ErrorKind::InvalidConfig, "no K values requested");
  for (auto k : ks) {
    if (k == 0 || k >= m) {
      throw Error(ErrorKind::InvalidConfig, "K=" + std::to_string(k) + " must lie in [1, " +
                                                std::to_string(m - 1) + "]");
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    const double norm = std::sqrt(dot(embeddings.row(i), embeddings.row(i)));
    if (std::abs(norm - 1.0) > kUnitNormTolerance) {
      throw Error(ErrorKind::ContractViolation,
                  "embedding row " + std::to_string(i) + " is not unit length");
    }
  }

  std::vector<std::size_t> hits(ks.size(), 0);
  RecallResult result;
  std::vector<double> sims(m);
  for (std::size_t q = 0; q < m; ++q) {
    const auto yq = embeddings.row(q);
    std::size_t best = m;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == q) continue;
      sims[j] = dot(yq, embeddings.row(j));
      if (labels[j] == labels[q] && (best == m || sims[j] > sims[best])) best = j;
    }
    if (best == m) {
      ++result.skipped_queries;
      continue;
    }
    ++result.queries;
    // Items ranked ahead of the best match are all negatives.
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == q || labels[j] == labels[q]) continue;
      if (sims[j] > sims[best] || (sims[j] == sims[best] && j < best)) ++ahead;
    }
    for (std::size_t k = 0; k < ks.size(); ++k) {
      if (ahead < ks[k]) ++hits[k];
    }
  }
  for (std::size_t k = 0; k < ks.size(); ++k) {
    result.recall[ks[k]] = result.queries == 0
                               ? 0.0
                               : static_cast<double>(hits[k]) / static_cast<double>(result.queries);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Histogram export: `t_r,h_plus,h_minus`, one row per node.

inline constexpr const char* kHistogramHeader = "t_r,h_plus,h_minus";

inline void write_histograms(std::ostream& out, const SoftHistogram& plus,
                             const SoftHistogram& minus) {
  out << kHistogramHeader << '\n';
  for (const auto& row : histogram_rows(plus, minus)) {
    out << detail::format_real(row.node) << ',' << detail::format_real(row.plus) << ','
        << detail::format_real(row.minus) << '\n';
  }
}

inline void export_histograms(const SoftHistogram& plus, const SoftHistogram& minus,
                              const std::string& path) {
  check_same_grid(plus, minus);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  write_histograms(out, plus, minus);
  if (!out) throw Error(ErrorKind::Io, "failed writing '" + path + "'");
}

inline std::vector<HistogramRow> import_histograms(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path + "'");
  std::vector<HistogramRow> rows;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = detail::trim(raw);
    if (line.empty() || line == kHistogramHeader) continue;
    const auto fields = detail::split_commas(line);
    HistogramRow row;
    if (fields.size() != 3 || !detail::parse_real(fields[0], row.node) ||
        !detail::parse_real(fields[1], row.plus) || !detail::parse_real(fields[2], row.minus)) {
      throw Error(ErrorKind::Data, path + ":" + std::to_string(line_no) + ": malformed row");
    }
    rows.push_back(row);
  }
  return rows;
}

/// Positive and negative similarity histograms over every pair of a set.
inline std::pair<SoftHistogram, SoftHistogram> similarity_histograms(const Matrix& embeddings,
                                                                     std::span<const int> labels,
                                                                     std::size_t nodes) {
  const auto sets = split_similarities(pairwise_similarities(embeddings), labels);
  return {soft_histogram(sets.positive_values(), nodes),
          soft_histogram(sets.negative_values(), nodes)};
}

// ---------------------------------------------------------------------------
// Training driver

enum class LossKind { Histogram, HistogramMargin, BinomialDeviance, TripletSemihard };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::Histogram: return "histogram";
    case LossKind::HistogramMargin: return "histogram-margin";
    case LossKind::BinomialDeviance: return "binomial-deviance";
    case LossKind::TripletSemihard: return "triplet-semihard";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& name) {
  for (auto k : {LossKind::Histogram, LossKind::HistogramMargin, LossKind::BinomialDeviance,
                 LossKind::TripletSemihard}) {
    if (name == to_string(k)) return k;
  }
  throw Error(ErrorKind::InvalidConfig, "unknown loss '" + name + "'");
}

struct LossConfig {
  LossKind kind = LossKind::Histogram;
  std::size_t bins = 201;  // R nodes
  std::size_t mu = 0;
  BinomialDevianceParams deviance;
  double triplet_margin = 0.2;
};

struct BatchLoss {
  double loss = 0.0;
  Matrix grad_embeddings;
  bool valid = true;
};

/// Loss of one embedded batch and its gradient with respect to the embeddings.
inline BatchLoss batch_loss(const LossConfig& cfg, const Matrix& embeddings,
                            std::span<const int> labels) {
  if (cfg.kind == LossKind::TripletSemihard) {
    auto r = triplet_semihard(embeddings, labels, cfg.triplet_margin);
    return {r.loss, std::move(*r.grad_embeddings), r.valid};
  }
  const auto sets = split_similarities(pairwise_similarities(embeddings), labels);
  LossResult r;
  switch (cfg.kind) {
    case LossKind::Histogram: r = histogram_loss_backward(sets, cfg.bins); break;
    case LossKind::HistogramMargin:
      r = histogram_loss_margin_backward(sets, cfg.bins, cfg.mu);
      break;
    default: r = binomial_deviance(sets, cfg.deviance); break;
  }
  const auto grads = pair_gradients(sets, r);
  return {r.loss, similarity_backward(embeddings, grads), true};
}

struct TrainConfig {
  LossConfig loss;
  BatchConfig batch;
  AdamConfig adam;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t embedding_dim = 32;
  InitScheme init = InitScheme::Mirrored;
  std::size_t iterations = 2000;
  std::size_t eval_interval = 500;
  std::vector<std::size_t> ks{1, 2, 4, 8};
  std::uint64_t seed = 0;
};

struct RunMeta {
  std::string loss;
  std::size_t bins = 0;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  std::size_t skipped_queries = 0;
};

struct MetricsReport {
  std::map<std::size_t, double> recall;  // final evaluation
  std::vector<std::pair<std::size_t, double>> loss_curve;
  std::vector<std::pair<std::size_t, std::map<std::size_t, double>>> eval_history;
  RunMeta meta;
};

inline nlohmann::json recall_json(const std::map<std::size_t, double>& recall) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : recall) j[std::to_string(k)] = v;
  return j;
}

inline nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["recall"] = recall_json(report.recall);
  j["loss_curve"] = nlohmann::json::array();
  for (const auto& [it, loss] : report.loss_curve) j["loss_curve"].push_back({it, loss});
  j["eval_history"] = nlohmann::json::array();
  for (const auto& [it, rec] : report.eval_history) {
    j["eval_history"].push_back({{"iteration", it}, {"recall", recall_json(rec)}});
  }
  j["meta"] = {{"loss", report.meta.loss},
               {"R", report.meta.bins},
               {"batch_size", report.meta.batch_size},
               {"seed", report.meta.seed},
               {"iterations", report.meta.iterations},
               {"skipped_queries", report.meta.skipped_queries}};
  return j;
}

inline Matrix embed(const EncoderParams& params, const Dataset& data) {
  return forward(params, data.features()).embeddings;
}

inline RecallResult evaluate(const EncoderParams& params, const Dataset& data,
                             std::span<const std::size_t> ks) {
  const auto labels = data.labels();
  return recall_at_k(embed(params, data), labels, ks);
}

inline std::vector<std::size_t> encoder_dims(const TrainConfig& cfg, std::size_t input_dim) {
  std::vector<std::size_t> dims{input_dim};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(cfg.embedding_dim);
  return dims;
}

struct TrainResult {
  MetricsReport report;
  EncoderParams params;
  AdamState adam;
  SoftHistogram eval_plus;
  SoftHistogram eval_minus;
};

inline void check_train_config(const TrainConfig& cfg) {
  check_nodes(cfg.loss.bins);
  if (cfg.eval_interval == 0) throw Error(ErrorKind::InvalidConfig, "eval interval must be >= 1");
  if (cfg.embedding_dim == 0) throw Error(ErrorKind::InvalidConfig, "embedding dim must be >= 1");
  if (!(cfg.adam.lr > 0.0)) throw Error(ErrorKind::InvalidConfig, "learning rate must be > 0");
  if (!(cfg.loss.triplet_margin > 0.0)) {
    throw Error(ErrorKind::InvalidConfig, "triplet margin must be > 0");
  }
}

/// sample -> embed -> loss -> backward -> ADAM, with Recall@K on `eval_data`
/// at iteration 0, every `eval_interval` iterations, and at the end.
inline TrainResult train(const TrainConfig& cfg, const Dataset& train_data,
                         const Dataset& eval_data) {
  check_train_config(cfg);
  check_batch_config(train_data, cfg.batch);
  if (eval_data.dim() != train_data.dim()) {
    throw Error(ErrorKind::Data, "train and eval feature dimensions differ");
  }

  TrainResult out;
  out.params = init_params(cfg.seed, encoder_dims(cfg, train_data.dim()), cfg.init);
  out.adam = AdamState::for_params(out.params, cfg.adam);
  SamplerState sampler(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  auto& report = out.report;
  report.meta = {to_string(cfg.loss.kind), cfg.loss.bins, cfg.batch.batch_size, cfg.seed,
                 cfg.iterations, 0};

  auto run_eval = [&](std::size_t iteration) {
    const auto r = evaluate(out.params, eval_data, cfg.ks);
    report.eval_history.emplace_back(iteration, r.recall);
    report.recall = r.recall;
    report.meta.skipped_queries = r.skipped_queries;
  };

  run_eval(0);
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    const auto batch = sample_batch(train_data, cfg.batch, sampler);
    const auto labels = train_data.labels(batch);
    const auto trace = forward(out.params, train_data.features(batch));
    const auto step = batch_loss(cfg.loss, trace.embeddings, labels);
    const auto grads = backward(out.params, trace, step.grad_embeddings);
    adam_step(out.params, grads, out.adam);
    report.loss_curve.emplace_back(it, step.loss);
    if (it % cfg.eval_interval == 0 || it == cfg.iterations) run_eval(it);
  }

  std::tie(out.eval_plus, out.eval_minus) =
      similarity_histograms(embed(out.params, eval_data), eval_data.labels(), cfg.loss.bins);
  return out;
}

}  // namespace histloss
