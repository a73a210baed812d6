#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <sstream>

#include "marlin/nn.hpp"
#include "oracles.hpp"

using namespace marlin;

namespace {

std::vector<double> flatten(const MlpParams& p) {
  std::vector<double> out;
  for (const DenseLayer& l : p.layers) {
    out.insert(out.end(), l.w.begin(), l.w.end());
    out.insert(out.end(), l.b.begin(), l.b.end());
  }
  return out;
}

void unflatten(MlpParams& p, const std::vector<double>& x) {
  std::size_t k = 0;
  for (DenseLayer& l : p.layers) {
    for (double& v : l.w) v = x[k++];
    for (double& v : l.b) v = x[k++];
  }
}

// Straightforward re-implementation of the forward pass for cross-checking.
std::vector<double> forward_reference(const MlpParams& p, const std::vector<double>& in) {
  std::vector<long double> a(in.begin(), in.end());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const DenseLayer& layer = p.layers[l];
    std::vector<long double> z(layer.out, 0.0L);
    for (int r = 0; r < layer.out; ++r) {
      long double acc = layer.b[r];
      for (int c = 0; c < layer.in; ++c) {
        acc += static_cast<long double>(layer.w[r * layer.in + c]) * a[c];
      }
      z[r] = (l + 1 < p.layers.size()) ? std::tanh(acc) : acc;
    }
    a = std::move(z);
  }
  return std::vector<double>(a.begin(), a.end());
}

MlpParams random_params(const std::vector<int>& sizes, Rng& rng, double scale = 0.5) {
  MlpParams p = mlp_init(sizes, 99);
  for (DenseLayer& l : p.layers) {
    for (double& v : l.w) v = scale * rng.normal();
    for (double& v : l.b) v = scale * rng.normal();
  }
  return p;
}

// Squared-error batch loss used by the gradient checks.
double batch_loss(const MlpParams& p, const std::vector<std::vector<double>>& xs,
                  const std::vector<std::vector<double>>& ys) {
  double total = 0;
  for (std::size_t s = 0; s < xs.size(); ++s) {
    const std::vector<double> out = forward(p, xs[s]);
    for (std::size_t i = 0; i < out.size(); ++i) {
      total += 0.5 * (out[i] - ys[s][i]) * (out[i] - ys[s][i]);
    }
  }
  return total;
}

Gradients batch_grad(const MlpParams& p, const std::vector<std::vector<double>>& xs,
                     const std::vector<std::vector<double>>& ys) {
  Gradients g = Gradients::zeros_like(p);
  for (std::size_t s = 0; s < xs.size(); ++s) {
    const ForwardCache cache = forward_cache(p, xs[s]);
    std::vector<double> d_out(cache.output.size());
    for (std::size_t i = 0; i < d_out.size(); ++i) d_out[i] = cache.output[i] - ys[s][i];
    backward(p, cache, d_out, g);
  }
  return g;
}

}  // namespace

TEST_CASE("mlp_init is deterministic and rejects bad shapes") {
  const MlpParams a = mlp_init({4, 256, 256, 5}, 7);
  const MlpParams b = mlp_init({4, 256, 256, 5}, 7);
  REQUIRE(a.layers.size() == 3);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    CHECK(a.layers[l].w == b.layers[l].w);
    CHECK(a.layers[l].b == b.layers[l].b);
  }
  CHECK_THROWS_AS(mlp_init({4}, 0), InvalidShape);
  CHECK_THROWS_AS(mlp_init({4, 0, 2}, 0), InvalidShape);
}

TEST_CASE("mlp_init produces the critic shapes") {
  const MlpParams critic = mlp_init({13, 16, 1}, 3);
  REQUIRE(critic.layers.size() == 2);
  CHECK(critic.layers[0].in == 13);
  CHECK(critic.layers[0].out == 16);
  CHECK(critic.layers[0].w.size() == 16u * 13u);
  CHECK(critic.layers[1].in == 16);
  CHECK(critic.layers[1].out == 1);
  for (const DenseLayer& l : critic.layers) {
    for (double bias : l.b) CHECK(bias == 0.0);
  }
}

TEST_CASE("hidden layers are orthogonal with gain sqrt(2)") {
  const MlpParams p = mlp_init({8, 8, 2}, 11);
  const DenseLayer& hidden = p.layers[0];
  // W W^T = 2 I for the square hidden layer
  double worst = 0;
  for (int r = 0; r < 8; ++r) {
    for (int c = 0; c < 8; ++c) {
      double dot = 0;
      for (int k = 0; k < 8; ++k) dot += hidden.w[r * 8 + k] * hidden.w[c * 8 + k];
      worst = std::max(worst, std::abs(dot - (r == c ? 2.0 : 0.0)));
    }
  }
  CHECK(worst < 1e-6);

  // output layer scaled to 0.01
  const MlpParams actor = mlp_init({4, 256, 256, 5}, 7);
  double mx = 0;
  for (double v : actor.layers.back().w) mx = std::max(mx, std::abs(v));
  CHECK(mx <= 0.01 + 1e-12);
  CHECK(mx > 1e-4);
}

TEST_CASE("forward basics") {
  MlpParams zero;
  zero.layers.push_back(DenseLayer{3, 2, std::vector<double>(6, 0.0), {0.0, 0.0}});
  CHECK(forward(zero, {1.0, -2.0, 3.0}) == std::vector<double>{0.0, 0.0});

  MlpParams ident;
  ident.layers.push_back(DenseLayer{3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0}});
  const std::vector<double> x{0.3, -1.7, 2.5};
  CHECK(forward(ident, x) == x);

  CHECK_THROWS_AS(forward(ident, {1.0, 2.0}), ShapeMismatch);
}

TEST_CASE("forward matches the reference implementation") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const MlpParams p = random_params({5, 7, 3}, rng);
    std::vector<double> x(5);
    for (double& v : x) v = rng.normal();
    const std::vector<double> got = forward(p, x);
    const std::vector<double> want = forward_reference(p, x);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-12));
    }
    // purity: bit-identical on repeat
    REQUIRE(forward(p, x) == got);
  }
}

TEST_CASE("backward: constant loss gives zero gradients") {
  Rng rng(5);
  const MlpParams p = random_params({3, 4, 2}, rng);
  Gradients g = Gradients::zeros_like(p);
  const ForwardCache cache = forward_cache(p, {0.1, 0.2, 0.3});
  backward(p, cache, {0.0, 0.0}, g);
  for (const DenseLayer& l : g.layers) {
    for (double v : l.w) CHECK(v == 0.0);
    for (double v : l.b) CHECK(v == 0.0);
  }
}

TEST_CASE("backward: single linear layer gradient is the outer product") {
  MlpParams p;
  p.layers.push_back(DenseLayer{3, 2, {0.5, -1.0, 2.0, 1.5, 0.25, -0.75}, {0.1, -0.2}});
  const std::vector<double> x{1.0, -2.0, 0.5};
  const ForwardCache cache = forward_cache(p, x);
  // L = 0.5*||out||^2, dL/dout = out
  Gradients g = Gradients::zeros_like(p);
  backward(p, cache, cache.output, g);
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 3; ++c) {
      CHECK(g.layers[0].w[r * 3 + c] == Catch::Approx(cache.output[r] * x[c]));
    }
    CHECK(g.layers[0].b[r] == Catch::Approx(cache.output[r]));
  }
}

TEST_CASE("gradients match central finite differences on 50 random nets") {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);
  double worst_rel = 0;
  for (int net = 0; net < 50; ++net) {
    const std::vector<int> sizes = (net % 2 == 0) ? std::vector<int>{3, 4, 2}
                                                  : std::vector<int>{2, 5, 3, 1};
    MlpParams p = random_params(sizes, rng, 0.7);
    std::vector<std::vector<double>> xs, ys;
    for (int s = 0; s < 4; ++s) {
      std::vector<double> x(sizes.front()), y(sizes.back());
      for (double& v : x) v = rng.normal();
      for (double& v : y) v = rng.normal();
      xs.push_back(x);
      ys.push_back(y);
    }
    const Gradients got = batch_grad(p, xs, ys);
    const std::vector<double> flat_got = flatten(MlpParams{got.layers});

    MlpParams probe = p;
    const auto fd = oracle::fd_grad(
        [&](const std::vector<double>& flat) {
          unflatten(probe, flat);
          return batch_loss(probe, xs, ys);
        },
        flatten(p), 1e-5);

    for (std::size_t i = 0; i < fd.size(); ++i) {
      const double denom = std::max({std::abs(fd[i]), std::abs(flat_got[i]), 1e-8});
      worst_rel = std::max(worst_rel, std::abs(fd[i] - flat_got[i]) / denom);
    }
  }
  CHECK(worst_rel < 1e-4);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 10.0);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  Rng rng(8);
  MlpParams p = random_params({3, 4, 2}, rng);
  const MlpParams before = p;
  AdamState st = AdamState::init(p);
  adam_step(p, Gradients::zeros_like(p), st);
  CHECK(st.t == 1);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    CHECK(p.layers[l].w == before.layers[l].w);
    CHECK(p.layers[l].b == before.layers[l].b);
  }
}

TEST_CASE("adam: first step moves by about lr in the gradient sign direction") {
  MlpParams p;
  p.layers.push_back(DenseLayer{1, 2, {1.0, -2.0}, {0.5, 0.25}});
  const MlpParams before = p;
  Gradients g = Gradients::zeros_like(p);
  g.layers[0].w = {0.3, -4.0};
  g.layers[0].b = {1e-3, -2.0};
  AdamState st = AdamState::init(p);
  adam_step(p, g, st);
  const double lr = st.cfg.lr;
  for (int i = 0; i < 2; ++i) {
    const double dw = p.layers[0].w[i] - before.layers[0].w[i];
    const double sign = g.layers[0].w[i] > 0 ? 1.0 : -1.0;
    CHECK(dw == Catch::Approx(-lr * sign).epsilon(1e-4));
  }
}

TEST_CASE("adam converges on a quadratic bowl") {
  MlpParams p;
  p.layers.push_back(DenseLayer{1, 2, {0.3, -0.3}, {0.0, 0.0}});
  AdamState st = AdamState::init(p, AdamConfig{0.003, 0.9, 0.999, 1e-8});
  auto loss = [&]() {
    return 0.5 * (p.layers[0].w[0] * p.layers[0].w[0] + p.layers[0].w[1] * p.layers[0].w[1]);
  };
  std::vector<double> history;
  for (int step = 0; step < 200; ++step) {
    Gradients g = Gradients::zeros_like(p);
    g.layers[0].w = {p.layers[0].w[0], p.layers[0].w[1]};
    adam_step(p, g, st);
    history.push_back(loss());
  }
  CHECK(history.back() < 1e-3);
  for (std::size_t i = 10; i + 1 < history.size(); ++i) {
    CHECK(history[i + 1] <= history[i] + 1e-15);
  }
}

TEST_CASE("adam rejects non-finite updates") {
  MlpParams p;
  p.layers.push_back(DenseLayer{1, 1, {1.0}, {0.0}});
  const MlpParams before = p;
  Gradients g = Gradients::zeros_like(p);
  g.layers[0].w = {std::numeric_limits<double>::quiet_NaN()};
  AdamState st = AdamState::init(p);
  CHECK_THROWS_AS(adam_step(p, g, st), NonFiniteUpdate);
  CHECK(p.layers[0].w == before.layers[0].w);
  CHECK(st.t == 0);
}

TEST_CASE("categorical_sample is uniform at equal logits") {
  Rng rng(31337);
  const std::vector<double> logits(5, 0.7);
  std::vector<int> counts(5, 0);
  const int trials = 100000;
  for (int i = 0; i < trials; ++i) ++counts[categorical_sample(logits, rng).first];
  for (int a = 0; a < 5; ++a) {
    CHECK(std::abs(counts[a] / double(trials) - 0.2) < 0.015);
  }
}

TEST_CASE("categorical_sample concentrates on a dominant logit") {
  Rng rng(99);
  std::vector<double> logits{0, 0, 50, 0, 0};
  int hits = 0;
  const int trials = 20000;
  for (int i = 0; i < trials; ++i) hits += categorical_sample(logits, rng).first == 2;
  CHECK(hits / double(trials) > 0.999);
}

TEST_CASE("categorical_sample log-probability matches the softmax oracle") {
  Rng rng(512);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(5);
    for (double& v : logits) v = 3.0 * rng.normal();
    const auto [a, lp] = categorical_sample(logits, rng);
    const auto probs = oracle::softmax(logits);
    REQUIRE(std::abs(lp - std::log(probs[a])) < 1e-12);
  }
}

TEST_CASE("softmax normalizes and is shift invariant") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> logits(5), shifted(5);
    const double shift = 10.0 * rng.normal();
    for (int i = 0; i < 5; ++i) {
      logits[i] = 2.0 * rng.normal();
      shifted[i] = logits[i] + shift;
    }
    const auto p = softmax(logits);
    const auto q = softmax(shifted);
    double sum = 0;
    for (double v : p) sum += v;
    REQUIRE(std::abs(sum - 1.0) < 1e-12);
    CHECK(argmax(p) == argmax(q));
    for (int i = 0; i < 5; ++i) REQUIRE(std::abs(p[i] - q[i]) < 1e-12);
  }
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  Rng rng(4242);
  MlpParams p = mlp_init({4, 16, 5}, 17);
  AdamState st = AdamState::init(p, AdamConfig{1e-3, 0.9, 0.999, 1e-8});
  // take a few steps so the state is nontrivial
  for (int step = 0; step < 5; ++step) {
    Gradients g = Gradients::zeros_like(p);
    for (DenseLayer& l : g.layers) {
      for (double& v : l.w) v = rng.normal();
      for (double& v : l.b) v = rng.normal();
    }
    adam_step(p, g, st);
  }

  std::stringstream buf;
  save_params(buf, p);
  save_adam(buf, st);

  const MlpParams p2 = load_params(buf);
  const AdamState st2 = load_adam(buf, p2);
  REQUIRE(p2.layers.size() == p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    REQUIRE(p2.layers[l].w == p.layers[l].w);
    REQUIRE(p2.layers[l].b == p.layers[l].b);
    REQUIRE(st2.m.layers[l].w == st.m.layers[l].w);
    REQUIRE(st2.v.layers[l].w == st.v.layers[l].w);
  }
  CHECK(st2.t == st.t);
  CHECK(st2.cfg.lr == st.cfg.lr);

  std::stringstream bad("net x");
  CHECK_THROWS_AS(load_params(bad), CheckpointError);
}
