#pragma once

// Lightweight query model: tanh MLP with an L2-normalized output, with an
// exact hand-written backward pass.

#include "asymvpr/core.hpp"

#include <algorithm>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace asymvpr {

/// Dense layer y = W x + b with W stored row-major (out x in).
struct Layer {
  std::size_t in = 0;
  std::size_t out = 0;
  Vector weight;
  Vector bias;

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct QueryModelParams {
  std::vector<Layer> layers;
  std::uint64_t seed = 0;

  std::vector<std::size_t> dims() const {
    std::vector<std::size_t> d;
    if (layers.empty()) return d;
    d.push_back(layers.front().in);
    for (const auto& l : layers) d.push_back(l.out);
    return d;
  }
  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in; }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out; }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Weight and bias of every layer, in order.
  std::vector<std::span<double>> blocks() {
    std::vector<std::span<double>> b;
    for (auto& l : layers) {
      b.emplace_back(l.weight);
      b.emplace_back(l.bias);
    }
    return b;
  }

  void check_shapes() const {
    if (layers.empty()) throw Error(ErrorCode::BadDims, "model has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.in == 0 || l.out == 0) throw Error(ErrorCode::BadDims, "layer with zero width");
      if (l.weight.size() != l.in * l.out || l.bias.size() != l.out)
        throw Error(ErrorCode::BadDims, "layer " + std::to_string(i) + " parameter shape mismatch");
      if (i > 0 && layers[i - 1].out != l.in)
        throw Error(ErrorCode::BadDims, "layer " + std::to_string(i) + " input does not chain");
    }
  }

  void validate() const {
    check_shapes();
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (!all_finite(layers[i].weight) || !all_finite(layers[i].bias))
        throw Error(ErrorCode::BadDims, "layer " + std::to_string(i) + " has non-finite parameters");
  }

  friend bool operator==(const QueryModelParams&, const QueryModelParams&) = default;
};

/// Gradients share the parameter layout.
using ModelGrads = QueryModelParams;

inline ModelGrads zeros_like(const QueryModelParams& p) {
  ModelGrads g = p;
  for (auto& l : g.layers) {
    std::fill(l.weight.begin(), l.weight.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  return g;
}

/// Glorot-uniform weights, zero biases. dims = {raw_dim, hidden..., d}.
inline QueryModelParams init_params(std::span<const std::size_t> dims, std::uint64_t seed) {
  if (dims.size() < 2) throw Error(ErrorCode::BadDims, "need at least input and output dims");
  for (auto d : dims)
    if (d == 0) throw Error(ErrorCode::BadDims, "zero-width layer");
  std::mt19937_64 rng(seed);
  QueryModelParams p;
  p.seed = seed;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    Layer l{dims[i], dims[i + 1], Vector(dims[i] * dims[i + 1]), Vector(dims[i + 1], 0.0)};
    const double bound = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& w : l.weight) w = u(rng);
    p.layers.push_back(std::move(l));
  }
  return p;
}

inline QueryModelParams init_params(std::initializer_list<std::size_t> dims, std::uint64_t seed) {
  return init_params(std::span<const std::size_t>(dims.begin(), dims.size()), seed);
}

/// Intermediate values kept for the backward pass.
struct ForwardCache {
  std::vector<Vector> inputs;  // input to each layer (inputs[0] = raw)
  Vector pre_norm;             // final layer output before normalization
  double norm = 0.0;
  Vector q;
};

inline void affine(const Layer& l, std::span<const double> x, Vector& y) {
  y.assign(l.bias.begin(), l.bias.end());
  for (std::size_t o = 0; o < l.out; ++o) {
    const double* w = l.weight.data() + o * l.in;
    double s = 0.0;
    for (std::size_t i = 0; i < l.in; ++i) s += w[i] * x[i];
    y[o] += s;
  }
}

inline const Vector& forward(const QueryModelParams& params, std::span<const double> raw, ForwardCache& cache) {
  params.check_shapes();
  if (raw.size() != params.input_dim())
    throw Error(ErrorCode::ShapeMismatch, "raw feature has dim " + std::to_string(raw.size()) + ", model expects " +
                                              std::to_string(params.input_dim()));
  const std::size_t n = params.layers.size();
  cache.inputs.resize(n);
  cache.inputs[0].assign(raw.begin(), raw.end());
  for (std::size_t i = 0; i < n; ++i) {
    Vector& y = (i + 1 < n) ? cache.inputs[i + 1] : cache.pre_norm;
    affine(params.layers[i], cache.inputs[i], y);
    if (i + 1 < n)
      for (double& v : y) v = std::tanh(v);
  }
  cache.norm = l2_norm(cache.pre_norm);
  if (!(cache.norm > 1e-12)) throw Error(ErrorCode::ZeroPreNorm, "model output collapsed to zero");
  cache.q = cache.pre_norm;
  for (double& v : cache.q) v /= cache.norm;
  return cache.q;
}

inline Vector forward(const QueryModelParams& params, std::span<const double> raw) {
  ForwardCache cache;
  forward(params, raw, cache);
  return std::move(cache.q);
}

/// Accumulates d(grad_q . q)/d(params) into `grads` using a cache from forward().
inline void backward(const QueryModelParams& params, const ForwardCache& cache, std::span<const double> grad_q,
                     ModelGrads& grads, double scale = 1.0) {
  const std::size_t n = params.layers.size();
  if (cache.inputs.size() != n || grad_q.size() != cache.q.size() || grads.layers.size() != n)
    throw Error(ErrorCode::ShapeMismatch, "backward inputs do not match the model");
  // Normalization Jacobian: (I - q q^T) / ||pre||.
  const double radial = dot(grad_q, cache.q);
  Vector delta(grad_q.size());
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = (grad_q[i] - radial * cache.q[i]) / cache.norm;

  Vector prev;
  for (std::size_t li = n; li-- > 0;) {
    const Layer& l = params.layers[li];
    Layer& gl = grads.layers[li];
    const Vector& x = cache.inputs[li];
    for (std::size_t o = 0; o < l.out; ++o) {
      const double d = scale * delta[o];
      gl.bias[o] += d;
      double* gw = gl.weight.data() + o * l.in;
      for (std::size_t i = 0; i < l.in; ++i) gw[i] += d * x[i];
    }
    if (li == 0) break;
    prev.assign(l.in, 0.0);
    for (std::size_t o = 0; o < l.out; ++o) {
      const double* w = l.weight.data() + o * l.in;
      for (std::size_t i = 0; i < l.in; ++i) prev[i] += w[i] * delta[o];
    }
    // x = tanh(z) for hidden layers, so dx/dz = 1 - x^2.
    for (std::size_t i = 0; i < l.in; ++i) prev[i] *= 1.0 - x[i] * x[i];
    delta.swap(prev);
  }
}

inline ModelGrads backward(const QueryModelParams& params, std::span<const double> raw,
                           std::span<const double> grad_q) {
  ForwardCache cache;
  forward(params, raw, cache);
  if (grad_q.size() != cache.q.size()) throw Error(ErrorCode::ShapeMismatch, "grad_q dimension differs from q");
  ModelGrads g = zeros_like(params);
  backward(params, cache, grad_q, g);
  return g;
}

// Model file: JSON header {dims, seed, activation}, then an "AEBM" section of
// f64 parameters, layer by layer, weights (row-major) then bias.
inline constexpr std::array<char, 4> kModelMagic{'A', 'E', 'B', 'M'};

inline void save_model(const QueryModelParams& params, const std::string& path) {
  params.validate();
  nlohmann::json header{{"format", "asymvpr-query-model"},
                        {"dims", params.dims()},
                        {"seed", params.seed},
                        {"activation", "tanh"},
                        {"output", "l2-normalized"}};
  Vector payload;
  payload.reserve(params.num_parameters());
  for (const auto& l : params.layers) {
    payload.insert(payload.end(), l.weight.begin(), l.weight.end());
    payload.insert(payload.end(), l.bias.begin(), l.bias.end());
  }
  detail::write_json_blob(path, header, kModelMagic, payload);
}

inline QueryModelParams load_model(const std::string& path) {
  auto [header, payload] = detail::read_json_blob(path, kModelMagic);
  std::vector<std::size_t> dims;
  QueryModelParams p;
  try {
    dims = header.at("dims").get<std::vector<std::size_t>>();
    p.seed = header.at("seed").get<std::uint64_t>();
    if (header.at("activation").get<std::string>() != "tanh")
      throw Error(ErrorCode::CorruptFile, "unsupported activation");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptFile, std::string("bad model header: ") + e.what());
  }
  if (dims.size() < 2) throw Error(ErrorCode::BadDims, "model header needs at least two dims");
  std::size_t expected = 0;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) expected += dims[i] * dims[i + 1] + dims[i + 1];
  detail::check_payload(payload.size(), expected);
  std::size_t off = 0;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    Layer l{dims[i], dims[i + 1], {}, {}};
    l.weight.assign(payload.begin() + off, payload.begin() + off + l.in * l.out);
    off += l.in * l.out;
    l.bias.assign(payload.begin() + off, payload.begin() + off + l.out);
    off += l.out;
    p.layers.push_back(std::move(l));
  }
  p.validate();
  return p;
}

}  // namespace asymvpr
