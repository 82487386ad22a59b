#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "histloss/error.hpp"
#include "histloss/matrix.hpp"

namespace histloss {

struct Item {
  int label = 0;
  std::vector<double> features;

  friend bool operator==(const Item&, const Item&) = default;
};

/// Labeled feature vectors. Immutable once validated.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<Item> items) : items_(std::move(items)) {
    if (items_.empty()) throw Error(ErrorKind::Data, "dataset is empty");
    dim_ = items_.front().features.size();
    if (dim_ == 0) throw Error(ErrorKind::Data, "items have no features");
    for (std::size_t k = 0; k < items_.size(); ++k) {
      if (items_[k].features.size() != dim_) {
        throw Error(ErrorKind::Data, "item " + std::to_string(k) + " has " +
                                         std::to_string(items_[k].features.size()) +
                                         " features, expected " + std::to_string(dim_));
      }
      if (items_[k].label < 0) throw Error(ErrorKind::Data, "class ids must be non-negative");
      by_class_[items_[k].label].push_back(k);
    }
    if (by_class_.size() < 2) {
      throw Error(ErrorKind::Data, "dataset has a single class; no negative pairs possible");
    }
  }

  std::size_t size() const noexcept { return items_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t num_classes() const noexcept { return by_class_.size(); }
  const std::vector<Item>& items() const noexcept { return items_; }
  const Item& operator[](std::size_t k) const { return items_[k]; }
  const std::map<int, std::vector<std::size_t>>& class_index() const noexcept {
    return by_class_;
  }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(items_.size());
    for (const auto& it : items_) out.push_back(it.label);
    return out;
  }
  std::vector<int> labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (auto k : indices) out.push_back(items_.at(k).label);
    return out;
  }

  Matrix features() const {
    Matrix m(items_.size(), dim_);
    for (std::size_t k = 0; k < items_.size(); ++k) {
      std::copy(items_[k].features.begin(), items_[k].features.end(), m.row(k).begin());
    }
    return m;
  }
  Matrix features(std::span<const std::size_t> indices) const {
    Matrix m(indices.size(), dim_);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const auto& f = items_.at(indices[k]).features;
      std::copy(f.begin(), f.end(), m.row(k).begin());
    }
    return m;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) { return a.items_ == b.items_; }

 private:
  std::vector<Item> items_;
  std::size_t dim_ = 0;
  std::map<int, std::vector<std::size_t>> by_class_;
};

// ---------------------------------------------------------------------------
// CSV: `class_id,f_1,...,f_D` per line, no header, LF or CRLF.

namespace detail {

inline std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline bool parse_real(std::string_view field, double& out) {
  if (!field.empty() && field.front() == '+') field.remove_prefix(1);
  auto res = std::from_chars(field.data(), field.data() + field.size(), out);
  return res.ec == std::errc() && res.ptr == field.data() + field.size() && std::isfinite(out);
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

}  // namespace detail

inline Dataset parse_dataset(std::istream& in, const std::string& source = "<stream>") {
  std::vector<Item> items;
  std::string raw;
  std::size_t line_no = 0;
  std::size_t expected_fields = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = detail::trim(raw);
    if (line.empty()) continue;
    const auto fields = detail::split_commas(line);
    const std::string where = source + ":" + std::to_string(line_no);
    if (fields.size() < 2) {
      throw Error(ErrorKind::Data, where + ": expected class id and at least one feature");
    }
    if (expected_fields == 0) {
      expected_fields = fields.size();
    } else if (fields.size() != expected_fields) {
      throw Error(ErrorKind::Data, where + ": ragged row with " + std::to_string(fields.size()) +
                                       " fields, expected " + std::to_string(expected_fields));
    }
    Item item;
    const auto id = detail::trim(fields[0]);
    auto res = std::from_chars(id.data(), id.data() + id.size(), item.label);
    if (res.ec != std::errc() || res.ptr != id.data() + id.size() || item.label < 0) {
      throw Error(ErrorKind::Data,
                  where + ": class id '" + std::string(id) + "' is not a non-negative integer");
    }
    item.features.resize(fields.size() - 1);
    for (std::size_t k = 1; k < fields.size(); ++k) {
      if (!detail::parse_real(detail::trim(fields[k]), item.features[k - 1])) {
        throw Error(ErrorKind::Data, where + ": field " + std::to_string(k + 1) + " '" +
                                         std::string(fields[k]) + "' is not a number");
      }
    }
    items.push_back(std::move(item));
  }
  if (items.empty()) throw Error(ErrorKind::Data, source + ": no data rows");
  try {
    return Dataset(std::move(items));
  } catch (const Error& e) {
    throw Error(ErrorKind::Data, source + ": " + e.what());
  }
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open dataset '" + path + "'");
  return parse_dataset(in, path);
}

inline void write_dataset(std::ostream& out, const Dataset& data) {
  for (const auto& item : data.items()) {
    out << item.label;
    for (double f : item.features) out << ',' << detail::format_real(f);
    out << '\n';
  }
}

inline void save_dataset(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  write_dataset(out, data);
  if (!out) throw Error(ErrorKind::Io, "failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Synthetic data: class centroids uniform on the unit sphere, items are
// centroid + N(0, sigma^2 I). Labels start at `first_label`.

struct SyntheticSpec {
  std::size_t num_classes = 16;
  std::size_t per_class = 32;
  std::size_t dim = 32;
  double noise_sigma = 0.15;
  std::uint64_t seed = 0;
  int first_label = 0;
};

inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw Error(ErrorKind::InvalidConfig, "need at least 2 classes");
  if (spec.per_class < 2) throw Error(ErrorKind::InvalidConfig, "need at least 2 items per class");
  if (spec.dim < 2) throw Error(ErrorKind::InvalidConfig, "need at least 2 dimensions");
  if (!(spec.noise_sigma >= 0.0) || !std::isfinite(spec.noise_sigma)) {
    throw Error(ErrorKind::InvalidConfig, "noise sigma must be finite and non-negative");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Item> items;
  items.reserve(spec.num_classes * spec.per_class);
  std::vector<double> centroid(spec.dim);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    double norm = 0.0;
    while (norm < 1e-8) {
      for (auto& x : centroid) x = gauss(rng);
      norm = std::sqrt(dot(centroid, centroid));
    }
    for (auto& x : centroid) x /= norm;
    for (std::size_t k = 0; k < spec.per_class; ++k) {
      Item item{spec.first_label + static_cast<int>(c), centroid};
      if (spec.noise_sigma > 0.0) {
        for (auto& x : item.features) x += spec.noise_sigma * gauss(rng);
      }
      items.push_back(std::move(item));
    }
  }
  return Dataset(std::move(items));
}

/// Splits by class id: the first half of the sorted classes train, the rest evaluate.
inline std::pair<Dataset, Dataset> split_by_class(const Dataset& data) {
  if (data.num_classes() < 4) {
    throw Error(ErrorKind::Data, "class split needs at least 4 classes, dataset has " +
                                     std::to_string(data.num_classes()));
  }
  const std::size_t train_classes = data.num_classes() / 2;
  std::vector<Item> train, eval;
  std::size_t c = 0;
  for (const auto& [label, indices] : data.class_index()) {
    auto& target = c++ < train_classes ? train : eval;
    for (auto k : indices) target.push_back(data[k]);
  }
  return {Dataset(std::move(train)), Dataset(std::move(eval))};
}

// ---------------------------------------------------------------------------
// Class-balanced batch sampler. Classes are visited in shuffled order and each
// contributes up to max_per_class unused items of its own shuffled sequence.
// An epoch ends when every item has been emitted once; both sequences are then
// reshuffled.

struct BatchConfig {
  std::size_t batch_size = 128;
  std::size_t max_per_class = 10;
};

class SamplerState {
 public:
  explicit SamplerState(std::uint64_t seed = 0) : rng_(seed) {}

  std::size_t epoch() const noexcept { return epoch_; }

 private:
  friend std::vector<std::size_t> sample_batch(const Dataset&, const BatchConfig&,
                                               SamplerState&);

  void start_epoch(const Dataset& data) {
    class_order_.clear();
    items_.clear();
    for (const auto& [label, indices] : data.class_index()) {
      class_order_.push_back(label);
      auto seq = indices;
      std::shuffle(seq.begin(), seq.end(), rng_);
      items_[label] = {std::move(seq), 0};
    }
    std::shuffle(class_order_.begin(), class_order_.end(), rng_);
    class_cursor_ = 0;
    remaining_ = data.size();
    ++epoch_;
    started_ = true;
  }

  struct ClassQueue {
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
  };

  std::mt19937_64 rng_;
  std::vector<int> class_order_;
  std::map<int, ClassQueue> items_;
  std::size_t class_cursor_ = 0;
  std::size_t remaining_ = 0;
  std::size_t epoch_ = 0;
  bool started_ = false;
};

/// Largest item count from one class in a batch of `cfg.batch_size`.
inline std::size_t per_class_cap(const BatchConfig& cfg) {
  // Capping at batch_size - 1 keeps at least two classes in every batch.
  return std::min(cfg.max_per_class, cfg.batch_size - 1);
}

inline void check_batch_config(const Dataset& data, const BatchConfig& cfg) {
  if (cfg.batch_size < 4) throw Error(ErrorKind::InvalidConfig, "batch size must be at least 4");
  if (cfg.max_per_class < 2) {
    throw Error(ErrorKind::InvalidConfig, "max items per class must be at least 2");
  }
  if (cfg.batch_size > data.size()) {
    throw Error(ErrorKind::InvalidConfig, "batch size " + std::to_string(cfg.batch_size) +
                                              " exceeds dataset size " +
                                              std::to_string(data.size()));
  }
  bool has_pair = false;
  std::size_t capacity = 0;
  for (const auto& [label, indices] : data.class_index()) {
    has_pair |= indices.size() >= 2;
    capacity += std::min(indices.size(), per_class_cap(cfg));
  }
  if (data.num_classes() < 2 || !has_pair) {
    throw Error(ErrorKind::InvalidConfig,
                "dataset cannot produce batches with both positive and negative pairs");
  }
  if (capacity < cfg.batch_size) {
    throw Error(ErrorKind::InvalidConfig,
                "batch size " + std::to_string(cfg.batch_size) + " needs more than " +
                    std::to_string(per_class_cap(cfg)) + " items from some class");
  }
}

/// Whether a batch yields non-empty S+ and S-.
inline bool batch_has_pairs(const Dataset& data, std::span<const std::size_t> batch) {
  std::map<int, std::size_t> counts;
  for (auto k : batch) ++counts[data[k].label];
  if (counts.size() < 2) return false;
  return std::any_of(counts.begin(), counts.end(), [](const auto& c) { return c.second >= 2; });
}

inline std::vector<std::size_t> sample_batch(const Dataset& data, const BatchConfig& cfg,
                                             SamplerState& state) {
  check_batch_config(data, cfg);
  const std::size_t cap = per_class_cap(cfg);
  constexpr int kMaxAttempts = 64;

  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::vector<std::size_t> batch;
    batch.reserve(cfg.batch_size);
    std::map<int, std::size_t> in_batch;
    std::size_t stalled = 0;
    while (batch.size() < cfg.batch_size) {
      if (!state.started_ || state.remaining_ == 0) {
        state.start_epoch(data);
        stalled = 0;
      }
      const int label = state.class_order_[state.class_cursor_];
      state.class_cursor_ = (state.class_cursor_ + 1) % state.class_order_.size();
      auto& queue = state.items_[label];
      auto& count = in_batch[label];

      const std::size_t want = std::min(cap - count, cfg.batch_size - batch.size());
      std::size_t taken = 0;
      // Items already in the batch (carried over an epoch boundary) stay queued.
      for (std::size_t p = queue.cursor; p < queue.order.size() && taken < want; ++p) {
        const std::size_t item = queue.order[p];
        if (std::find(batch.begin(), batch.end(), item) != batch.end()) continue;
        std::swap(queue.order[p], queue.order[queue.cursor]);
        ++queue.cursor;
        --state.remaining_;
        batch.push_back(item);
        ++taken;
      }
      count += taken;
      stalled = taken == 0 ? stalled + 1 : 0;
      if (stalled > state.class_order_.size()) {
        // Every unfinished class is capped or only holds items already in this batch.
        state.remaining_ = 0;
      }
    }
    if (batch_has_pairs(data, batch)) return batch;
  }
  throw Error(ErrorKind::InvalidConfig,
              "sampler could not form a batch with positive and negative pairs");
}

}  // namespace histloss
