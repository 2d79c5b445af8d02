#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "graph.hpp"

// A small reverse-mode network engine over a sequential layer chain.
// Everything is double precision; batches are [N, features...] row-major.

namespace fcgosr::nn {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)) {
    values.assign(element_count(shape), fill);
  }
  Tensor(std::vector<std::size_t> s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != element_count(shape)) throw Error("tensor value count does not match its shape");
  }

  static std::size_t element_count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t batch() const { return shape.empty() ? 0 : shape.front(); }
  std::size_t features() const { return batch() == 0 ? 0 : values.size() / batch(); }

  std::span<double> row(std::size_t n) { return {values.data() + n * features(), features()}; }
  std::span<const double> row(std::size_t n) const { return {values.data() + n * features(), features()}; }

  double& at(std::size_t n, std::size_t f) { return values[n * features() + f]; }
  double at(std::size_t n, std::size_t f) const { return values[n * features() + f]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Stacks adjacency matrices into an [N, S, S] batch.
inline Tensor stack(std::span<const AdjacencyTensor* const> items) {
  if (items.empty()) throw Error("cannot stack an empty batch");
  const std::size_t s = items.front()->size;
  Tensor t({items.size(), s, s});
  for (std::size_t n = 0; n < items.size(); ++n) {
    if (items[n]->size != s) throw Error("adjacency tensors in a batch must share one padded size");
    std::copy(items[n]->data.begin(), items[n]->data.end(), t.values.begin() + static_cast<std::ptrdiff_t>(n * s * s));
  }
  return t;
}

inline Tensor stack(std::span<const AdjacencyTensor> items) {
  std::vector<const AdjacencyTensor*> ptrs;
  for (const auto& a : items) ptrs.push_back(&a);
  return stack(std::span<const AdjacencyTensor* const>(ptrs));
}

// ---- layers --------------------------------------------------------------

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weights;  // [in][out]
  std::vector<double> bias;     // [out]

  Dense() = default;
  Dense(std::size_t in_dim, std::size_t out_dim)
      : in(in_dim), out(out_dim), weights(in_dim * out_dim, 0.0), bias(out_dim, 0.0) {}

  /// Glorot-uniform weights, zero bias.
  static Dense glorot(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
    Dense d(in_dim, out_dim);
    const double limit = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
    for (auto& w : d.weights) w = rng.uniform(-limit, limit);
    return d;
  }

  friend bool operator==(const Dense&, const Dense&) = default;
};

struct Relu {
  friend bool operator==(const Relu&, const Relu&) = default;
};

/// Inverted dropout: survivors are scaled by 1 / (1 - rate) in train mode.
struct Dropout {
  double rate = 0.0;
  friend bool operator==(const Dropout&, const Dropout&) = default;
};

struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};

/// Logistic squashing to (0, 1); used on reconstruction outputs.
struct Sigmoid {
  friend bool operator==(const Sigmoid&, const Sigmoid&) = default;
};

using Layer = std::variant<Dense, Relu, Dropout, Flatten, Sigmoid>;

inline std::string layer_kind(const Layer& l) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, Dense>) return "dense";
        if constexpr (std::is_same_v<T, Relu>) return "relu";
        if constexpr (std::is_same_v<T, Dropout>) return "dropout";
        if constexpr (std::is_same_v<T, Flatten>) return "flatten";
        if constexpr (std::is_same_v<T, Sigmoid>) return "sigmoid";
      },
      l);
}

enum class Mode { train, eval };

class Network {
 public:
  Network() = default;
  explicit Network(std::vector<Layer> layers) : layers_(std::move(layers)) {}

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t size() const { return layers_.size(); }

  void append(Layer l) { layers_.push_back(std::move(l)); }

  /// Feature count produced for a given input feature count.
  std::size_t output_features(std::size_t input_features) const {
    std::size_t f = input_features;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (const auto* d = std::get_if<Dense>(&layers_[i])) {
        if (d->in != f) throw Error(describe(i) + ": expected " + std::to_string(d->in) + " features, got " + std::to_string(f));
        f = d->out;
      }
    return f;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_)
      if (const auto* d = std::get_if<Dense>(&l)) n += d->weights.size() + d->bias.size();
    return n;
  }

  std::string describe(std::size_t i) const {
    std::string s = "layer " + std::to_string(i) + " (" + layer_kind(layers_[i]);
    if (const auto* d = std::get_if<Dense>(&layers_[i])) s += " " + std::to_string(d->in) + "->" + std::to_string(d->out);
    return s + ")";
  }

  friend bool operator==(const Network&, const Network&) = default;

 private:
  std::vector<Layer> layers_;
};

/// Layer outputs of one forward pass. activations[0] is the input and
/// activations[i + 1] the output of layer i.
struct ForwardTrace {
  std::vector<Tensor> activations;
  std::vector<std::vector<double>> dropout_scale;  // per layer; empty unless train-mode dropout

  const Tensor& output() const { return activations.back(); }
};

namespace detail {

inline constexpr std::size_t kBlock = 512;

// Four independent partial sums so the loop vectorizes under strict FP.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace detail

inline ForwardTrace forward(const Network& net, Tensor batch, Mode mode = Mode::eval, std::uint64_t seed = 0) {
  if (batch.shape.empty()) throw Error("forward: input has no batch dimension");
  ForwardTrace trace;
  trace.activations.reserve(net.size() + 1);
  trace.dropout_scale.resize(net.size());
  trace.activations.push_back(std::move(batch));

  for (std::size_t i = 0; i < net.size(); ++i) {
    const Tensor& x = trace.activations.back();
    const std::size_t n = x.batch();
    Tensor y;
    const Layer& layer = net.layers()[i];
    if (const auto* d = std::get_if<Dense>(&layer)) {
      if (x.shape.size() != 2 || x.shape[1] != d->in)
        throw Error(net.describe(i) + ": expected input [N, " + std::to_string(d->in) + "], got " +
                    std::to_string(x.features()) + " features over " + std::to_string(x.shape.size()) + " dims");
      y = Tensor({n, d->out});
      for (std::size_t s = 0; s < n; ++s)
        std::copy(d->bias.begin(), d->bias.end(), y.values.data() + s * d->out);
      // column blocks keep a slice of wide weight matrices cache-resident across the batch
      for (std::size_t o0 = 0; o0 < d->out; o0 += detail::kBlock) {
        const std::size_t o1 = std::min(d->out, o0 + detail::kBlock);
        for (std::size_t s = 0; s < n; ++s) {
          double* yr = y.values.data() + s * d->out;
          const double* xr = x.values.data() + s * d->in;
          for (std::size_t k = 0; k < d->in; ++k) {
            const double xk = xr[k];
            if (xk == 0.0) continue;  // adjacency inputs are sparse
            const double* wk = d->weights.data() + k * d->out;
            for (std::size_t o = o0; o < o1; ++o) yr[o] += xk * wk[o];
          }
        }
      }
    } else if (std::holds_alternative<Relu>(layer)) {
      y = x;
      for (auto& v : y.values) v = v > 0.0 ? v : 0.0;
    } else if (const auto* dr = std::get_if<Dropout>(&layer)) {
      y = x;
      if (mode == Mode::train && dr->rate > 0.0) {
        if (dr->rate >= 1.0) throw Error(net.describe(i) + ": dropout rate must be below 1");
        Rng rng(derive_seed(seed, i));
        const double keep_scale = 1.0 / (1.0 - dr->rate);
        auto& scale = trace.dropout_scale[i];
        scale.resize(y.values.size());
        for (std::size_t k = 0; k < y.values.size(); ++k) {
          scale[k] = rng.bernoulli(dr->rate) ? 0.0 : keep_scale;
          y.values[k] *= scale[k];
        }
      }
    } else if (std::holds_alternative<Flatten>(layer)) {
      y = x;
      y.shape = {n, x.features()};
    } else if (std::holds_alternative<Sigmoid>(layer)) {
      y = x;
      for (auto& v : y.values) v = 1.0 / (1.0 + std::exp(-v));
    }
    trace.activations.push_back(std::move(y));
  }
  return trace;
}

inline Tensor predict(const Network& net, Tensor batch) { return forward(net, std::move(batch), Mode::eval).output(); }

/// Per-layer parameter gradients (empty vectors for parameter-free layers).
struct Gradients {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> bias;

  explicit Gradients(const Network& net) : weights(net.size()), bias(net.size()) {
    for (std::size_t i = 0; i < net.size(); ++i)
      if (const auto* d = std::get_if<Dense>(&net.layers()[i])) {
        weights[i].assign(d->weights.size(), 0.0);
        bias[i].assign(d->bias.size(), 0.0);
      }
  }

  void clear() {
    for (auto& w : weights) std::fill(w.begin(), w.end(), 0.0);
    for (auto& b : bias) std::fill(b.begin(), b.end(), 0.0);
  }
};

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output).
/// Returns d(loss)/d(input) when `input_grad` is set, else an empty tensor.
inline Tensor backward(const Network& net, const ForwardTrace& trace, Tensor grad_out, Gradients& grads,
                       bool input_grad = false) {
  if (grad_out.values.size() != trace.output().values.size())
    throw Error("backward: gradient shape does not match the network output");
  std::size_t first_dense = 0;
  while (first_dense < net.size() && !std::holds_alternative<Dense>(net.layers()[first_dense])) ++first_dense;
  Tensor g = std::move(grad_out);
  for (std::size_t idx = net.size(); idx-- > 0;) {
    const Tensor& x = trace.activations[idx];
    const Tensor& y = trace.activations[idx + 1];
    const Layer& layer = net.layers()[idx];
    const bool need_dx = input_grad || idx > first_dense;
    if (const auto* d = std::get_if<Dense>(&layer)) {
      const std::size_t n = x.batch();
      Tensor dx;
      if (need_dx) dx = Tensor({n, d->in});
      auto& dw = grads.weights[idx];
      auto& db = grads.bias[idx];
      for (std::size_t s = 0; s < n; ++s) {
        const double* gr = g.values.data() + s * d->out;
        for (std::size_t o = 0; o < d->out; ++o) db[o] += gr[o];
      }
      for (std::size_t o0 = 0; o0 < d->out; o0 += detail::kBlock) {
        const std::size_t o1 = std::min(d->out, o0 + detail::kBlock);
        for (std::size_t s = 0; s < n; ++s) {
          const double* gr = g.values.data() + s * d->out;
          const double* xr = x.values.data() + s * d->in;
          for (std::size_t k = 0; k < d->in; ++k) {
            const double xk = xr[k];
            if (xk != 0.0) {
              double* dwk = dw.data() + k * d->out;
              for (std::size_t o = o0; o < o1; ++o) dwk[o] += xk * gr[o];
            }
            if (need_dx) dx.values[s * d->in + k] += detail::dot(d->weights.data() + k * d->out + o0, gr + o0, o1 - o0);
          }
        }
      }
      g = std::move(dx);
    } else if (std::holds_alternative<Relu>(layer)) {
      for (std::size_t k = 0; k < g.values.size(); ++k)
        if (!(y.values[k] > 0.0)) g.values[k] = 0.0;
    } else if (std::holds_alternative<Dropout>(layer)) {
      const auto& scale = trace.dropout_scale[idx];
      if (!scale.empty())
        for (std::size_t k = 0; k < g.values.size(); ++k) g.values[k] *= scale[k];
    } else if (std::holds_alternative<Flatten>(layer)) {
      g.shape = x.shape;
    } else if (std::holds_alternative<Sigmoid>(layer)) {
      for (std::size_t k = 0; k < g.values.size(); ++k) g.values[k] *= y.values[k] * (1.0 - y.values[k]);
    }
    if (!need_dx) return {};
    g.shape = x.shape;
  }
  return g;
}

// ---- optimizer -------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam moments for one network, with bias-corrected updates.
class Adam {
 public:
  Adam(const Network& net, AdamConfig cfg = {}) : cfg_(cfg), m_(net), v_(net) {}

  std::uint64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

  void step(Network& net, const Gradients& grads) {
    for (std::size_t i = 0; i < grads.weights.size(); ++i) {
      for (double g : grads.weights[i])
        if (!std::isfinite(g)) throw Error("non-finite gradient in " + net.describe(i));
      for (double g : grads.bias[i])
        if (!std::isfinite(g)) throw Error("non-finite gradient in " + net.describe(i));
    }
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < net.size(); ++i) {
      auto* d = std::get_if<Dense>(&net.layers()[i]);
      if (!d) continue;
      update(d->weights, grads.weights[i], m_.weights[i], v_.weights[i], c1, c2);
      update(d->bias, grads.bias[i], m_.bias[i], v_.bias[i], c1, c2);
    }
  }

 private:
  void update(std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m, std::vector<double>& v,
              double c1, double c2) const {
    const double b1 = cfg_.beta1, b2 = cfg_.beta2, lr = cfg_.learning_rate, eps = cfg_.epsilon;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    }
  }

  AdamConfig cfg_;
  Gradients m_;
  Gradients v_;
  std::uint64_t step_ = 0;
};

/// Backpropagates `grad_out` through `net` and applies one Adam step.
inline void backward_and_step(Network& net, const ForwardTrace& trace, Tensor grad_out, Adam& adam) {
  Gradients grads(net);
  backward(net, trace, std::move(grad_out), grads);
  adam.step(net, grads);
}

// ---- losses --------------------------------------------------------------

struct LossResult {
  double value = 0.0;
  Tensor grad;  // d(value) / d(loss input)
};

/// Half the summed squared error between one reconstruction view and the
/// original batch. Summing this over the M views gives the DTAE objective.
inline LossResult dtae_view_loss(const Tensor& originals, const Tensor& reconstruction) {
  if (originals.values.size() != reconstruction.values.size() || originals.batch() != reconstruction.batch())
    throw Error("dtae loss: reconstruction shape does not match the originals");
  LossResult r{0.0, Tensor(reconstruction.shape)};
  for (std::size_t k = 0; k < originals.values.size(); ++k) {
    const double diff = reconstruction.values[k] - originals.values[k];
    r.value += diff * diff;
    r.grad.values[k] = diff;
  }
  r.value *= 0.5;
  return r;
}

/// 1/2 * sum over views t and samples i of ||x_i - xhat_it||^2.
inline double dtae_loss(const Tensor& originals, std::span<const Tensor> views) {
  if (views.empty()) throw Error("dtae loss needs at least one view");
  double total = 0.0;
  for (const auto& v : views) total += dtae_view_loss(originals, v).value;
  return total;
}

inline Tensor softmax(const Tensor& logits) {
  Tensor p = logits;
  for (std::size_t n = 0; n < p.batch(); ++n) {
    auto row = p.row(n);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) z += (v = std::exp(v - mx));
    for (auto& v : row) v /= z;
  }
  return p;
}

/// Mean negative log-likelihood of the labelled class under softmax.
inline LossResult cross_entropy_loss(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.batch(), c = logits.features();
  if (labels.size() != n) throw Error("cross entropy: label count differs from batch size");
  LossResult r{0.0, softmax(logits)};
  for (std::size_t s = 0; s < n; ++s) {
    if (labels[s] < 0 || static_cast<std::size_t>(labels[s]) >= c)
      throw Error("cross entropy: label " + std::to_string(labels[s]) + " outside 0.." + std::to_string(c - 1));
    const auto row = logits.row(s);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    r.value += std::log(z) - (row[static_cast<std::size_t>(labels[s])] - mx);
    r.grad.at(s, static_cast<std::size_t>(labels[s])) -= 1.0;
  }
  const double inv = 1.0 / static_cast<double>(n);
  r.value *= inv;
  for (auto& g : r.grad.values) g *= inv;
  return r;
}

/// Batch-all triplet loss: mean of max(0, |a-p|^2 - |a-n|^2 + margin) over
/// the triplets with positive loss (0 when every triplet meets the margin).
inline LossResult triplet_loss(const Tensor& reps, std::span<const int> labels, double margin) {
  const std::size_t n = reps.batch(), d = reps.features();
  if (labels.size() != n) throw Error("triplet loss: label count differs from batch size");

  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = reps.at(i, k) - reps.at(j, k);
        s += diff * diff;
      }
      dist[i * n + j] = dist[j * n + i] = s;
    }

  LossResult r{0.0, Tensor(reps.shape)};
  std::size_t valid = 0, active = 0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t q = 0; q < n; ++q) {
        if (labels[q] == labels[a]) continue;
        ++valid;
        const double l = dist[a * n + p] - dist[a * n + q] + margin;
        if (l <= 0.0) continue;
        ++active;
        r.value += l;
        for (std::size_t k = 0; k < d; ++k) {
          const double ak = reps.at(a, k), pk = reps.at(p, k), qk = reps.at(q, k);
          r.grad.at(a, k) += 2.0 * (qk - pk);
          r.grad.at(p, k) -= 2.0 * (ak - pk);
          r.grad.at(q, k) += 2.0 * (ak - qk);
        }
      }
    }
  if (valid == 0) throw Error("triplet loss: degenerate batch without any (anchor, positive, negative) triplet");
  if (active > 0) {
    const double inv = 1.0 / static_cast<double>(active);
    r.value *= inv;
    for (auto& g : r.grad.values) g *= inv;
  }
  return r;
}

// ---- finite-difference verification -----------------------------------------

using LossFn = std::function<LossResult(const Tensor& output)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

/// Compares backprop gradients against central differences on up to
/// `samples` randomly chosen parameters. The same (mode, seed) is used for
/// every evaluation so train-mode dropout masks stay fixed. The relative
/// error denominator is floored at `floor`, so gradients that are exactly
/// zero are judged by absolute error against roundoff.
inline GradCheckResult grad_check(Network net, const LossFn& loss, const Tensor& batch, Mode mode = Mode::eval,
                                  std::uint64_t seed = 0, double eps = 1e-5, std::size_t samples = 100,
                                  std::uint64_t sample_seed = 1, double floor = 1e-6) {
  Gradients grads(net);
  {
    const auto trace = forward(net, batch, mode, seed);
    backward(net, trace, loss(trace.output()).grad, grads);
  }

  struct Slot {
    double* param;
    double analytic;
  };
  std::vector<Slot> slots;
  for (std::size_t i = 0; i < net.size(); ++i)
    if (auto* d = std::get_if<Dense>(&net.layers()[i])) {
      for (std::size_t k = 0; k < d->weights.size(); ++k) slots.push_back({&d->weights[k], grads.weights[i][k]});
      for (std::size_t k = 0; k < d->bias.size(); ++k) slots.push_back({&d->bias[k], grads.bias[i][k]});
    }
  if (slots.size() > samples) {
    Rng rng(sample_seed);
    rng.shuffle(slots.begin(), slots.end());
    slots.resize(samples);
  }

  GradCheckResult result;
  for (auto& slot : slots) {
    const double saved = *slot.param;
    *slot.param = saved + eps;
    const double up = loss(forward(net, batch, mode, seed).output()).value;
    *slot.param = saved - eps;
    const double down = loss(forward(net, batch, mode, seed).output()).value;
    *slot.param = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double rel = std::abs(slot.analytic - numeric) /
                       std::max(floor, std::abs(slot.analytic) + std::abs(numeric));
    result.max_relative_error = std::max(result.max_relative_error, rel);
    ++result.checked;
  }
  return result;
}

// ---- serialization -------------------------------------------------------

inline nlohmann::json to_json(const Layer& l) {
  nlohmann::json j{{"kind", layer_kind(l)}};
  if (const auto* d = std::get_if<Dense>(&l)) {
    j["shape"] = {d->in, d->out};
    j["weights"] = d->weights;
    j["bias"] = d->bias;
  } else if (const auto* dr = std::get_if<Dropout>(&l)) {
    j["rate"] = dr->rate;
  }
  return j;
}

inline Layer layer_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "dense") {
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw Error("dense layer shape must be [in, out]");
    Dense d(shape[0], shape[1]);
    d.weights = j.at("weights").get<std::vector<double>>();
    d.bias = j.at("bias").get<std::vector<double>>();
    if (d.weights.size() != d.in * d.out || d.bias.size() != d.out) throw Error("dense layer weight count mismatch");
    return d;
  }
  if (kind == "relu") return Relu{};
  if (kind == "dropout") return Dropout{j.at("rate").get<double>()};
  if (kind == "flatten") return Flatten{};
  if (kind == "sigmoid") return Sigmoid{};
  throw Error("unknown layer kind '" + kind + "'");
}

inline nlohmann::json to_json(const Network& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers()) layers.push_back(to_json(l));
  return layers;
}

inline Network network_from_json(const nlohmann::json& j) {
  std::vector<Layer> layers;
  for (const auto& l : j) layers.push_back(layer_from_json(l));
  return Network(std::move(layers));
}

}  // namespace fcgosr::nn
