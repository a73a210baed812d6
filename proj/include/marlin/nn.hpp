#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "marlin/rng.hpp"

namespace marlin {

struct InvalidShape : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NonFiniteUpdate : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One dense layer, weights row-major (out x in).
struct DenseLayer {
  int in = 0;
  int out = 0;
  std::vector<double> w;
  std::vector<double> b;
};

/// Fully connected net: tanh on hidden layers, identity on the output layer.
struct MlpParams {
  std::vector<DenseLayer> layers;

  int input_dim() const { return layers.front().in; }
  int output_dim() const { return layers.back().out; }

  bool finite() const {
    for (const DenseLayer& l : layers) {
      for (double v : l.w) {
        if (!std::isfinite(v)) return false;
      }
      for (double v : l.b) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }
};

/// Shape-congruent with MlpParams; also reused for the Adam moment buffers.
struct Gradients {
  std::vector<DenseLayer> layers;

  static Gradients zeros_like(const MlpParams& params) {
    Gradients g;
    for (const DenseLayer& l : params.layers) {
      g.layers.push_back(DenseLayer{l.in, l.out,
                                    std::vector<double>(l.w.size(), 0.0),
                                    std::vector<double>(l.b.size(), 0.0)});
    }
    return g;
  }

  void scale(double s) {
    for (DenseLayer& l : layers) {
      for (double& v : l.w) v *= s;
      for (double& v : l.b) v *= s;
    }
  }
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Gradients m;
  Gradients v;
  std::int64_t t = 0;
  AdamConfig cfg;

  static AdamState init(const MlpParams& params, AdamConfig cfg = {}) {
    return AdamState{Gradients::zeros_like(params), Gradients::zeros_like(params), 0, cfg};
  }
};

namespace detail {

// Columns of a tall Gaussian matrix orthonormalized by modified Gram-Schmidt
// with one re-orthogonalization pass. rows >= cols.
inline std::vector<double> orthonormal_columns(int rows, int cols, Rng& rng) {
  std::vector<double> q(static_cast<std::size_t>(rows) * cols);
  for (double& v : q) v = rng.normal();
  for (int c = 0; c < cols; ++c) {
    for (int pass = 0; pass < 2; ++pass) {
      for (int prev = 0; prev < c; ++prev) {
        double dot = 0;
        for (int r = 0; r < rows; ++r) dot += q[r * cols + c] * q[r * cols + prev];
        for (int r = 0; r < rows; ++r) q[r * cols + c] -= dot * q[r * cols + prev];
      }
    }
    double norm = 0;
    for (int r = 0; r < rows; ++r) norm += q[r * cols + c] * q[r * cols + c];
    norm = std::sqrt(norm);
    for (int r = 0; r < rows; ++r) q[r * cols + c] /= norm;
  }
  return q;
}

}  // namespace detail

/// Orthogonal initialization: hidden layers get gain sqrt(2) (tanh-friendly
/// semi-orthogonal rows or columns, whichever side is short), the output
/// layer gain 0.01 so initial policies are near uniform. Biases zero.
inline MlpParams mlp_init(const std::vector<int>& sizes, std::uint64_t seed) {
  if (sizes.size() < 2) throw InvalidShape("mlp_init: need at least two layer sizes");
  for (int s : sizes) {
    if (s <= 0) throw InvalidShape("mlp_init: layer sizes must be positive");
  }
  Rng rng(seed);
  MlpParams params;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const int in = sizes[l];
    const int out = sizes[l + 1];
    const bool last = (l + 2 == sizes.size());
    const double gain = last ? 0.01 : std::sqrt(2.0);
    DenseLayer layer{in, out, std::vector<double>(static_cast<std::size_t>(in) * out),
                     std::vector<double>(out, 0.0)};
    if (out <= in) {
      // rows orthonormal: W = Q^T with Q (in x out)
      const auto q = detail::orthonormal_columns(in, out, rng);
      for (int r = 0; r < out; ++r) {
        for (int c = 0; c < in; ++c) layer.w[r * in + c] = gain * q[c * out + r];
      }
    } else {
      // columns orthonormal: W = Q (out x in)
      const auto q = detail::orthonormal_columns(out, in, rng);
      for (int r = 0; r < out; ++r) {
        for (int c = 0; c < in; ++c) layer.w[r * in + c] = gain * q[r * in + c];
      }
    }
    params.layers.push_back(std::move(layer));
  }
  return params;
}

/// Activations entering each layer plus the final output; enough state to
/// run the backward pass without recomputation.
struct ForwardCache {
  std::vector<std::vector<double>> inputs;  // inputs[l] feeds layers[l]
  std::vector<double> output;
};

inline ForwardCache forward_cache(const MlpParams& params, const std::vector<double>& input) {
  if (static_cast<int>(input.size()) != params.input_dim()) {
    throw ShapeMismatch("forward: input length " + std::to_string(input.size()) +
                        " != " + std::to_string(params.input_dim()));
  }
  ForwardCache cache;
  cache.inputs.reserve(params.layers.size());
  std::vector<double> a = input;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const DenseLayer& layer = params.layers[l];
    cache.inputs.push_back(a);
    std::vector<double> z(layer.out);
    for (int r = 0; r < layer.out; ++r) {
      double acc = layer.b[r];
      const double* row = layer.w.data() + static_cast<std::size_t>(r) * layer.in;
      for (int c = 0; c < layer.in; ++c) acc += row[c] * a[c];
      z[r] = acc;
    }
    if (l + 1 < params.layers.size()) {
      for (double& v : z) v = std::tanh(v);
    }
    a = std::move(z);
  }
  cache.output = std::move(a);
  return cache;
}

inline std::vector<double> forward(const MlpParams& params, const std::vector<double>& input) {
  return forward_cache(params, input).output;
}

/// Reverse-mode step for one sample: accumulates dLoss/dParams into `accum`
/// given dLoss/dOutput. Layer inputs come from the cache; tanh derivative is
/// recovered from the cached activations (a' = 1 - a^2).
inline void backward(const MlpParams& params, const ForwardCache& cache,
                     const std::vector<double>& d_output, Gradients& accum) {
  std::vector<double> g = d_output;
  for (int l = static_cast<int>(params.layers.size()) - 1; l >= 0; --l) {
    const DenseLayer& layer = params.layers[l];
    const std::vector<double>& a_in = cache.inputs[l];
    DenseLayer& grad = accum.layers[l];
    for (int r = 0; r < layer.out; ++r) {
      grad.b[r] += g[r];
      double* grow = grad.w.data() + static_cast<std::size_t>(r) * layer.in;
      for (int c = 0; c < layer.in; ++c) grow[c] += g[r] * a_in[c];
    }
    if (l == 0) break;
    std::vector<double> g_prev(layer.in, 0.0);
    for (int r = 0; r < layer.out; ++r) {
      const double* row = layer.w.data() + static_cast<std::size_t>(r) * layer.in;
      for (int c = 0; c < layer.in; ++c) g_prev[c] += row[c] * g[r];
    }
    // a_in of this layer is the tanh output of the previous one
    for (int c = 0; c < layer.in; ++c) g_prev[c] *= 1.0 - a_in[c] * a_in[c];
    g = std::move(g_prev);
  }
}

/// Standard Adam with bias correction, in place. Throws NonFiniteUpdate and
/// leaves params untouched if the step would introduce a non-finite value.
inline void adam_step(MlpParams& params, const Gradients& grads, AdamState& state) {
  if (grads.layers.size() != params.layers.size()) {
    throw ShapeMismatch("adam_step: gradient/param layer count mismatch");
  }
  const AdamConfig& cfg = state.cfg;
  const std::int64_t t = state.t + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));

  MlpParams next = params;
  AdamState next_state = state;
  next_state.t = t;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto update = [&](std::vector<double>& p, const std::vector<double>& g,
                      std::vector<double>& m, std::vector<double>& v) {
      if (g.size() != p.size()) throw ShapeMismatch("adam_step: size mismatch");
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    };
    update(next.layers[l].w, grads.layers[l].w, next_state.m.layers[l].w,
           next_state.v.layers[l].w);
    update(next.layers[l].b, grads.layers[l].b, next_state.m.layers[l].b,
           next_state.v.layers[l].b);
  }
  if (!next.finite()) throw NonFiniteUpdate("adam_step: non-finite parameter");
  params = std::move(next);
  state = std::move(next_state);
}

/// Numerically stable softmax.
inline std::vector<double> softmax(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

inline double log_softmax_at(const std::vector<double>& logits, int index) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0;
  for (double v : logits) sum += std::exp(v - mx);
  return logits[index] - mx - std::log(sum);
}

inline int argmax(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

/// Draws from softmax(logits); returns the index and its log-probability.
inline std::pair<int, double> categorical_sample(const std::vector<double>& logits, Rng& rng) {
  const std::vector<double> p = softmax(logits);
  const double u = rng.uniform();
  double acc = 0;
  int pick = static_cast<int>(p.size()) - 1;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) {
      pick = static_cast<int>(i);
      break;
    }
  }
  return {pick, log_softmax_at(logits, pick)};
}

// ------------------------------------------------------------- checkpoints
//
// Text format, one token per value, doubles as hex-encoded IEEE-754 bits so
// the round trip is exact. Layout per net:
//   net <layer_count>
//   layer <in> <out>
//   <out*in weight words> <out bias words>
// Adam state appends moment buffers in the same layout plus the timestep.

namespace detail {

inline void put_doubles(std::ostream& out, const std::vector<double>& v) {
  for (double x : v) {
    out << ' ' << std::hex << std::bit_cast<std::uint64_t>(x) << std::dec;
  }
  out << '\n';
}

inline void get_doubles(std::istream& in, std::vector<double>& v) {
  for (double& x : v) {
    std::uint64_t word = 0;
    in >> std::hex >> word >> std::dec;
    x = std::bit_cast<double>(word);
  }
}

}  // namespace detail

inline void save_params(std::ostream& out, const MlpParams& params) {
  out << "net " << params.layers.size() << '\n';
  for (const DenseLayer& l : params.layers) {
    out << "layer " << l.in << ' ' << l.out << '\n';
    detail::put_doubles(out, l.w);
    detail::put_doubles(out, l.b);
  }
}

inline MlpParams load_params(std::istream& in) {
  std::string tag;
  std::size_t count = 0;
  in >> tag >> count;
  if (tag != "net" || !in) throw CheckpointError("checkpoint: expected 'net <count>'");
  MlpParams params;
  for (std::size_t i = 0; i < count; ++i) {
    DenseLayer l;
    in >> tag >> l.in >> l.out;
    if (tag != "layer" || !in || l.in <= 0 || l.out <= 0) {
      throw CheckpointError("checkpoint: bad layer header");
    }
    l.w.resize(static_cast<std::size_t>(l.in) * l.out);
    l.b.resize(l.out);
    detail::get_doubles(in, l.w);
    detail::get_doubles(in, l.b);
    params.layers.push_back(std::move(l));
  }
  if (!in) throw CheckpointError("checkpoint: truncated");
  return params;
}

inline void save_adam(std::ostream& out, const AdamState& state) {
  out << "adam " << state.t << ' ' << std::hex
      << std::bit_cast<std::uint64_t>(state.cfg.lr) << ' '
      << std::bit_cast<std::uint64_t>(state.cfg.beta1) << ' '
      << std::bit_cast<std::uint64_t>(state.cfg.beta2) << ' '
      << std::bit_cast<std::uint64_t>(state.cfg.eps) << std::dec << '\n';
  for (const Gradients* g : {&state.m, &state.v}) {
    for (const DenseLayer& l : g->layers) {
      detail::put_doubles(out, l.w);
      detail::put_doubles(out, l.b);
    }
  }
}

inline AdamState load_adam(std::istream& in, const MlpParams& shape) {
  std::string tag;
  in >> tag;
  if (tag != "adam" || !in) throw CheckpointError("checkpoint: expected 'adam'");
  AdamState state = AdamState::init(shape);
  in >> state.t;
  std::uint64_t lr = 0, b1 = 0, b2 = 0, eps = 0;
  in >> std::hex >> lr >> b1 >> b2 >> eps >> std::dec;
  state.cfg = AdamConfig{std::bit_cast<double>(lr), std::bit_cast<double>(b1),
                         std::bit_cast<double>(b2), std::bit_cast<double>(eps)};
  for (Gradients* g : {&state.m, &state.v}) {
    for (DenseLayer& l : g->layers) {
      detail::get_doubles(in, l.w);
      detail::get_doubles(in, l.b);
    }
  }
  if (!in) throw CheckpointError("checkpoint: truncated adam state");
  return state;
}

}  // namespace marlin
