#pragma once

// Small feed-forward encoder with hand-written forward/backward passes, an
// L2-normalization output layer, ADAM, and a value-exact checkpoint format.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "histloss/error.hpp"
#include "histloss/matrix.hpp"

namespace histloss {

enum class Activation { Relu, Identity };

inline const char* to_string(Activation a) { return a == Activation::Relu ? "relu" : "identity"; }

struct Layer {
  Matrix weight;  // out x in
  std::vector<double> bias;
  Activation activation = Activation::Identity;

  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t out_dim() const noexcept { return weight.rows(); }

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct EncoderParams {
  std::vector<Layer> layers;

  std::size_t input_dim() const noexcept { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t embedding_dim() const noexcept {
    return layers.empty() ? 0 : layers.back().out_dim();
  }
  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }
  std::vector<std::size_t> dims() const {
    std::vector<std::size_t> d;
    if (layers.empty()) return d;
    d.push_back(input_dim());
    for (const auto& l : layers) d.push_back(l.out_dim());
    return d;
  }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

/// Gradients share the parameter layout.
using ParamGrads = EncoderParams;

/// Same shapes and activations as `params`, all values zero.
inline EncoderParams zeros_like(const EncoderParams& params) {
  EncoderParams z;
  for (const auto& l : params.layers) {
    z.layers.push_back({Matrix(l.out_dim(), l.in_dim()), std::vector<double>(l.out_dim(), 0.0),
                        l.activation});
  }
  return z;
}

inline void check_layer_chain(const EncoderParams& params) {
  if (params.layers.empty()) throw Error(ErrorKind::InvalidConfig, "encoder has no layers");
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const auto& l = params.layers[k];
    if (l.bias.size() != l.out_dim()) {
      throw Error(ErrorKind::Shape, "layer " + std::to_string(k) + " bias length mismatch");
    }
    if (k + 1 < params.layers.size() && l.out_dim() != params.layers[k + 1].in_dim()) {
      throw Error(ErrorKind::Shape, "layer " + std::to_string(k) + " output dim " +
                                        std::to_string(l.out_dim()) + " does not feed layer " +
                                        std::to_string(k + 1));
    }
  }
}

enum class InitScheme {
  /// Each rectifier layer holds a +Q / -Q pair of row blocks with Q
  /// semi-orthogonal, so relu(Qx) - relu(-Qx) = Qx and the untrained network
  /// is an isometry of its input (up to the narrowest layer).
  Mirrored,
  /// Independent uniform draws on [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  Uniform,
};

inline const char* to_string(InitScheme s) { return s == InitScheme::Mirrored ? "mirrored" : "uniform"; }

namespace detail {

/// rows x cols matrix with orthonormal rows (rows <= cols) or orthonormal
/// columns (rows > cols), by Gram-Schmidt over uniform draws.
inline Matrix semi_orthogonal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const bool by_rows = rows <= cols;
  const std::size_t count = by_rows ? rows : cols;
  const std::size_t len = by_rows ? cols : rows;
  std::vector<std::vector<double>> basis(count, std::vector<double>(len));
  for (std::size_t i = 0; i < count; ++i) {
    auto& v = basis[i];
    double norm = 0.0;
    while (norm < 1e-6) {
      for (auto& x : v) x = dist(rng);
      for (std::size_t j = 0; j < i; ++j) {
        const double proj = dot(v, basis[j]);
        for (std::size_t k = 0; k < len; ++k) v[k] -= proj * basis[j][k];
      }
      norm = std::sqrt(dot(v, v));
    }
    for (auto& x : v) x /= norm;
  }
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t k = 0; k < len; ++k) {
      if (by_rows) {
        m(i, k) = basis[i][k];
      } else {
        m(k, i) = basis[i][k];
      }
    }
  }
  return m;
}

}  // namespace detail

/// Rectifier on every hidden layer, identity on the output layer, biases zero.
/// Deterministic for a given seed.
inline EncoderParams init_params(std::uint64_t seed, std::span<const std::size_t> layer_dims,
                                 InitScheme scheme = InitScheme::Mirrored) {
  if (layer_dims.size() < 2) {
    throw Error(ErrorKind::InvalidConfig, "need at least an input and an output dimension");
  }
  for (auto d : layer_dims) {
    if (d == 0) throw Error(ErrorKind::InvalidConfig, "layer dimensions must be positive");
  }
  std::mt19937_64 rng(seed);
  EncoderParams params;
  std::size_t mirrored_half = 0;  // > 0 when the previous layer's output is a mirrored pair
  for (std::size_t k = 0; k + 1 < layer_dims.size(); ++k) {
    const std::size_t in = layer_dims[k];
    const std::size_t out = layer_dims[k + 1];
    const bool relu = k + 2 < layer_dims.size();
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-scale, scale);
    Layer layer{Matrix(out, in), std::vector<double>(out, 0.0),
                relu ? Activation::Relu : Activation::Identity};

    if (scheme == InitScheme::Uniform || (relu && out < 2)) {
      for (auto& w : layer.weight.values()) w = dist(rng);
      mirrored_half = 0;
      params.layers.push_back(std::move(layer));
      continue;
    }

    const std::size_t effective_in = mirrored_half > 0 ? mirrored_half : in;
    const std::size_t block_rows = relu ? out / 2 : out;
    const Matrix q = detail::semi_orthogonal(block_rows, effective_in, rng);
    auto& w = layer.weight;
    for (std::size_t r = 0; r < block_rows; ++r) {
      for (std::size_t c = 0; c < effective_in; ++c) {
        w(r, c) = q(r, c);
        if (mirrored_half > 0) w(r, c + mirrored_half) = -q(r, c);
        if (relu) {
          w(r + block_rows, c) = -q(r, c);
          if (mirrored_half > 0) w(r + block_rows, c + mirrored_half) = q(r, c);
        }
      }
    }
    // Odd widths leave one unpaired row.
    if (relu && out % 2 == 1) {
      for (auto& x : w.row(out - 1)) x = dist(rng);
    }
    mirrored_half = relu ? block_rows : 0;
    params.layers.push_back(std::move(layer));
  }
  return params;
}

inline EncoderParams init_params(std::uint64_t seed, std::initializer_list<std::size_t> dims,
                                 InitScheme scheme = InitScheme::Mirrored) {
  return init_params(seed, std::span<const std::size_t>(dims.begin(), dims.size()), scheme);
}

/// Intermediates of one forward pass. `activations[0]` is the input;
/// `activations[k + 1]` is the output of layer k.
struct ForwardTrace {
  std::vector<Matrix> pre_activations;
  std::vector<Matrix> activations;
  std::vector<double> norms;  // per-row L2 norm of the final layer output
  Matrix embeddings;          // unit rows

  const Matrix& raw_output() const { return activations.back(); }
};

inline constexpr double kDegenerateNorm = 1e-12;

inline ForwardTrace forward(const EncoderParams& params, const Matrix& inputs) {
  check_layer_chain(params);
  if (inputs.rows() == 0) throw Error(ErrorKind::Shape, "forward needs at least one input row");
  if (inputs.cols() != params.input_dim()) {
    throw Error(ErrorKind::Shape, "input has " + std::to_string(inputs.cols()) +
                                      " features, encoder expects " +
                                      std::to_string(params.input_dim()));
  }
  ForwardTrace trace;
  trace.activations.push_back(inputs);
  for (const auto& layer : params.layers) {
    const Matrix& x = trace.activations.back();
    Matrix pre(x.rows(), layer.out_dim());
    for (std::size_t n = 0; n < x.rows(); ++n) {
      const auto xr = x.row(n);
      for (std::size_t o = 0; o < layer.out_dim(); ++o) {
        pre(n, o) = dot(layer.weight.row(o), xr) + layer.bias[o];
      }
    }
    Matrix act = pre;
    if (layer.activation == Activation::Relu) {
      for (auto& v : act.values()) v = v > 0.0 ? v : 0.0;
    }
    trace.pre_activations.push_back(std::move(pre));
    trace.activations.push_back(std::move(act));
  }

  const Matrix& out = trace.activations.back();
  trace.embeddings = Matrix(out.rows(), out.cols());
  trace.norms.resize(out.rows());
  for (std::size_t n = 0; n < out.rows(); ++n) {
    const double norm = std::sqrt(dot(out.row(n), out.row(n)));
    if (!(norm >= kDegenerateNorm)) {
      throw Error(ErrorKind::DegenerateEmbedding,
                  "row " + std::to_string(n) + " has pre-normalization norm " +
                      std::to_string(norm));
    }
    trace.norms[n] = norm;
    for (std::size_t e = 0; e < out.cols(); ++e) trace.embeddings(n, e) = out(n, e) / norm;
  }
  return trace;
}

/// Gradient with respect to x of a loss whose gradient with respect to
/// y = x/|x| is g, i.e. (I - y y^T) g / |x|.
inline std::vector<double> l2_normalize_backward(std::span<const double> x,
                                                 std::span<const double> g) {
  if (x.size() != g.size()) throw Error(ErrorKind::Shape, "x and g lengths differ");
  const double norm = std::sqrt(dot(x, x));
  if (!(norm >= kDegenerateNorm)) {
    throw Error(ErrorKind::DegenerateEmbedding, "cannot differentiate normalization at |x| = " +
                                                    std::to_string(norm));
  }
  double radial = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) radial += (x[k] / norm) * g[k];
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = (g[k] - radial * (x[k] / norm)) / norm;
  return out;
}

inline ParamGrads backward(const EncoderParams& params, const ForwardTrace& trace,
                           const Matrix& grad_embeddings) {
  check_layer_chain(params);
  if (trace.pre_activations.size() != params.layers.size()) {
    throw Error(ErrorKind::Shape, "trace layer count does not match params");
  }
  const Matrix& out = trace.raw_output();
  if (grad_embeddings.rows() != out.rows() || grad_embeddings.cols() != out.cols()) {
    throw Error(ErrorKind::Shape, "embedding gradient is " +
                                      std::to_string(grad_embeddings.rows()) + "x" +
                                      std::to_string(grad_embeddings.cols()) + ", expected " +
                                      std::to_string(out.rows()) + "x" +
                                      std::to_string(out.cols()));
  }

  ParamGrads grads = zeros_like(params);
  Matrix upstream(out.rows(), out.cols());
  for (std::size_t n = 0; n < out.rows(); ++n) {
    auto gx = l2_normalize_backward(out.row(n), grad_embeddings.row(n));
    std::copy(gx.begin(), gx.end(), upstream.row(n).begin());
  }

  for (std::size_t k = params.layers.size(); k-- > 0;) {
    const Layer& layer = params.layers[k];
    const Matrix& pre = trace.pre_activations[k];
    const Matrix& input = trace.activations[k];
    Matrix grad_pre = upstream;
    if (layer.activation == Activation::Relu) {
      for (std::size_t i = 0; i < grad_pre.size(); ++i) {
        if (!(pre.values()[i] > 0.0)) grad_pre.values()[i] = 0.0;
      }
    }
    Layer& g = grads.layers[k];
    for (std::size_t n = 0; n < grad_pre.rows(); ++n) {
      const auto in_row = input.row(n);
      for (std::size_t o = 0; o < layer.out_dim(); ++o) {
        const double gp = grad_pre(n, o);
        if (gp == 0.0) continue;
        g.bias[o] += gp;
        auto w_row = g.weight.row(o);
        for (std::size_t i = 0; i < in_row.size(); ++i) w_row[i] += gp * in_row[i];
      }
    }
    if (k == 0) break;
    Matrix next(grad_pre.rows(), layer.in_dim());
    for (std::size_t n = 0; n < grad_pre.rows(); ++n) {
      auto next_row = next.row(n);
      for (std::size_t o = 0; o < layer.out_dim(); ++o) {
        const double gp = grad_pre(n, o);
        if (gp == 0.0) continue;
        const auto w_row = layer.weight.row(o);
        for (std::size_t i = 0; i < next_row.size(); ++i) next_row[i] += gp * w_row[i];
      }
    }
    upstream = std::move(next);
  }
  return grads;
}

// Flat views in a fixed order (per layer: weights row-major, then bias).

inline std::vector<double> flatten(const EncoderParams& params) {
  std::vector<double> flat;
  flat.reserve(params.parameter_count());
  for (const auto& l : params.layers) {
    flat.insert(flat.end(), l.weight.values().begin(), l.weight.values().end());
    flat.insert(flat.end(), l.bias.begin(), l.bias.end());
  }
  return flat;
}

inline void unflatten(std::span<const double> flat, EncoderParams& params) {
  if (flat.size() != params.parameter_count()) {
    throw Error(ErrorKind::Shape, "flat parameter vector has wrong length");
  }
  std::size_t pos = 0;
  for (auto& l : params.layers) {
    for (auto& w : l.weight.values()) w = flat[pos++];
    for (auto& b : l.bias) b = flat[pos++];
  }
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct AdamState {
  EncoderParams first_moment;
  EncoderParams second_moment;
  std::uint64_t step = 0;
  AdamConfig config;

  static AdamState for_params(const EncoderParams& params, AdamConfig config = {}) {
    return {zeros_like(params), zeros_like(params), 0, config};
  }

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected ADAM update, applied in place.
inline void adam_step(EncoderParams& params, const ParamGrads& grads, AdamState& state) {
  const std::size_t count = params.parameter_count();
  if (grads.parameter_count() != count || state.first_moment.parameter_count() != count ||
      state.second_moment.parameter_count() != count ||
      grads.layers.size() != params.layers.size()) {
    throw Error(ErrorKind::Shape, "ADAM operands do not share the parameter layout");
  }
  const auto g = flatten(grads);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) {
      throw Error(ErrorKind::Numerical,
                  "non-finite gradient at flat parameter index " + std::to_string(i) +
                      " (step " + std::to_string(state.step + 1) + ")");
    }
  }
  auto p = flatten(params);
  auto m = flatten(state.first_moment);
  auto v = flatten(state.second_moment);
  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
    const double m_hat = m[i] / correction1;
    const double v_hat = v[i] / correction2;
    p[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
  }
  unflatten(p, params);
  unflatten(m, state.first_moment);
  unflatten(v, state.second_moment);
}

// ---------------------------------------------------------------------------
// Checkpoint: a line-oriented text container. Reals are written as hex floats
// so a save/load round trip is value-exact.

inline constexpr const char* kCheckpointMagic = "histloss-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::string hex(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::hex);
  return std::string(buf, res.ptr);
}

inline double parse_hex(const std::string& token) {
  double v = 0.0;
  const char* first = token.data();
  const char* last = first + token.size();
  bool negative = false;
  if (first != last && *first == '-') {
    negative = true;
    ++first;
  }
  auto res = std::from_chars(first, last, v, std::chars_format::hex);
  if (res.ec != std::errc() || res.ptr != last) {
    throw Error(ErrorKind::Data, "malformed checkpoint value '" + token + "'");
  }
  return negative ? -v : v;
}

inline void write_values(std::ostream& os, const char* tag, std::span<const double> values) {
  os << tag << ' ' << values.size();
  for (double v : values) os << ' ' << hex(v);
  os << '\n';
}

inline std::vector<double> read_values(std::istream& is, const std::string& tag) {
  std::string got;
  std::size_t n = 0;
  if (!(is >> got >> n) || got != tag) {
    throw Error(ErrorKind::Data, "checkpoint: expected '" + tag + "' record");
  }
  std::vector<double> values(n);
  std::string token;
  for (auto& v : values) {
    if (!(is >> token)) throw Error(ErrorKind::Data, "checkpoint: truncated '" + tag + "'");
    v = parse_hex(token);
  }
  return values;
}

inline void write_params(std::ostream& os, const EncoderParams& p) {
  for (const auto& l : p.layers) {
    write_values(os, "w", l.weight.values());
    write_values(os, "b", l.bias);
  }
}

inline void read_params_into(std::istream& is, EncoderParams& p) {
  for (auto& l : p.layers) {
    auto w = read_values(is, "w");
    auto b = read_values(is, "b");
    if (w.size() != l.weight.size() || b.size() != l.bias.size()) {
      throw Error(ErrorKind::Data, "checkpoint: layer size does not match header");
    }
    l.weight = Matrix(l.out_dim(), l.in_dim(), std::move(w));
    l.bias = std::move(b);
  }
}

}  // namespace detail

inline std::string serialize_checkpoint(const EncoderParams& params, const AdamState& adam) {
  std::ostringstream os;
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "layers " << params.layers.size() << '\n';
  for (const auto& l : params.layers) {
    os << "layer " << l.in_dim() << ' ' << l.out_dim() << ' ' << to_string(l.activation) << '\n';
  }
  detail::write_params(os, params);
  os << "adam " << adam.step << ' ' << detail::hex(adam.config.lr) << ' '
     << detail::hex(adam.config.beta1) << ' ' << detail::hex(adam.config.beta2) << ' '
     << detail::hex(adam.config.epsilon) << '\n';
  detail::write_params(os, adam.first_moment);
  detail::write_params(os, adam.second_moment);
  return os.str();
}

struct Checkpoint {
  EncoderParams params;
  AdamState adam;
};

inline Checkpoint deserialize_checkpoint(const std::string& text) {
  std::istringstream is(text);
  std::string magic, word;
  int version = 0;
  if (!(is >> magic >> version) || magic != kCheckpointMagic) {
    throw Error(ErrorKind::Data, "not a histloss checkpoint");
  }
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::Data, "unsupported checkpoint version " + std::to_string(version));
  }
  std::size_t layer_count = 0;
  if (!(is >> word >> layer_count) || word != "layers" || layer_count == 0) {
    throw Error(ErrorKind::Data, "checkpoint: bad layer count");
  }
  Checkpoint ck;
  for (std::size_t k = 0; k < layer_count; ++k) {
    std::size_t in = 0, out = 0;
    std::string act;
    if (!(is >> word >> in >> out >> act) || word != "layer" || in == 0 || out == 0) {
      throw Error(ErrorKind::Data, "checkpoint: bad layer header " + std::to_string(k));
    }
    if (act != "relu" && act != "identity") {
      throw Error(ErrorKind::Data, "checkpoint: unknown activation '" + act + "'");
    }
    ck.params.layers.push_back({Matrix(out, in), std::vector<double>(out, 0.0),
                                act == "relu" ? Activation::Relu : Activation::Identity});
  }
  check_layer_chain(ck.params);
  detail::read_params_into(is, ck.params);

  std::string lr, b1, b2, eps;
  if (!(is >> word >> ck.adam.step >> lr >> b1 >> b2 >> eps) || word != "adam") {
    throw Error(ErrorKind::Data, "checkpoint: missing optimizer state");
  }
  ck.adam.config = {detail::parse_hex(lr), detail::parse_hex(b1), detail::parse_hex(b2),
                    detail::parse_hex(eps)};
  ck.adam.first_moment = zeros_like(ck.params);
  ck.adam.second_moment = zeros_like(ck.params);
  detail::read_params_into(is, ck.adam.first_moment);
  detail::read_params_into(is, ck.adam.second_moment);
  return ck;
}

inline void save_checkpoint(const std::string& path, const EncoderParams& params,
                            const AdamState& adam) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  out << serialize_checkpoint(params, adam);
  if (!out) throw Error(ErrorKind::Io, "failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace histloss
