#pragma once

// Dense ReLU network with exact backpropagation in double precision.
//
// Parameter layout: for each layer in order, an out x in row-major weight
// matrix (row r holds the weights feeding output unit r) followed by out
// biases. The whole model is one flat vector so that FedAvg can average it
// elementwise.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedpkd/error.hpp"
#include "fedpkd/rng.hpp"

namespace fedpkd {

using Vector = std::vector<double>;

struct LayerShape {
  std::size_t in = 0;
  std::size_t out = 0;

  std::size_t parameter_count() const noexcept { return in * out + out; }
  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

// Applied after every layer except the last. Only the rectifier exists.
enum class Activation { Relu };

inline std::vector<LayerShape> mlp_layers(std::size_t input_dim,
                                          std::span<const std::size_t> hidden,
                                          std::size_t output_dim) {
  std::vector<LayerShape> layers;
  std::size_t prev = input_dim;
  for (std::size_t width : hidden) {
    layers.push_back({prev, width});
    prev = width;
  }
  layers.push_back({prev, output_dim});
  return layers;
}

class ModelParams {
 public:
  ModelParams() = default;

  // Zero-initialized model. Consecutive layers must chain (out_l == in_{l+1}).
  explicit ModelParams(std::vector<LayerShape> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw InvalidArgument("model needs at least one layer");
    std::size_t total = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].in == 0 || layers_[l].out == 0) {
        throw DimensionError(l, "zero-sized layer");
      }
      if (l > 0 && layers_[l].in != layers_[l - 1].out) {
        throw DimensionError(l, "in_dim " + std::to_string(layers_[l].in) +
                                    " does not match previous out_dim " +
                                    std::to_string(layers_[l - 1].out));
      }
      offsets_.push_back(total);
      total += layers_[l].parameter_count();
    }
    values_.assign(total, 0.0);
  }

  // Weights uniform in [-1/sqrt(in), 1/sqrt(in)], biases zero.
  static ModelParams initialized(std::vector<LayerShape> layers, std::uint64_t seed) {
    ModelParams model(std::move(layers));
    Rng rng(seed);
    for (std::size_t l = 0; l < model.layer_count(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(model.layers_[l].in));
      for (double& w : model.weights(l)) w = (2.0 * rng.uniform() - 1.0) * bound;
    }
    return model;
  }

  const std::vector<LayerShape>& layers() const noexcept { return layers_; }
  std::size_t layer_count() const noexcept { return layers_.size(); }
  std::size_t input_dim() const noexcept { return layers_.empty() ? 0 : layers_.front().in; }
  std::size_t output_dim() const noexcept { return layers_.empty() ? 0 : layers_.back().out; }
  // Width of the representation fed to the final layer.
  std::size_t feature_dim() const noexcept { return layers_.empty() ? 0 : layers_.back().in; }
  Activation activation() const noexcept { return Activation::Relu; }

  std::size_t size() const noexcept { return values_.size(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  std::span<double> weights(std::size_t l) noexcept {
    return {values_.data() + offsets_[l], layers_[l].in * layers_[l].out};
  }
  std::span<const double> weights(std::size_t l) const noexcept {
    return {values_.data() + offsets_[l], layers_[l].in * layers_[l].out};
  }
  std::span<double> biases(std::size_t l) noexcept {
    return {values_.data() + offsets_[l] + layers_[l].in * layers_[l].out, layers_[l].out};
  }
  std::span<const double> biases(std::size_t l) const noexcept {
    return {values_.data() + offsets_[l] + layers_[l].in * layers_[l].out, layers_[l].out};
  }

  bool same_shape(const ModelParams& other) const noexcept { return layers_ == other.layers_; }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  std::vector<LayerShape> layers_;
  std::vector<std::size_t> offsets_;
  Vector values_;
};

struct ForwardResult {
  Vector logits;
  // Post-activation output of the last hidden layer (the input itself for a
  // single-layer model).
  Vector features;
};

namespace detail {

// y = W x + b for one layer.
inline void dense(const ModelParams& m, std::size_t l, std::span<const double> x,
                  std::span<double> y) noexcept {
  const auto shape = m.layers()[l];
  const auto w = m.weights(l);
  const auto b = m.biases(l);
  for (std::size_t r = 0; r < shape.out; ++r) {
    const double* row = w.data() + r * shape.in;
    double acc = b[r];
    for (std::size_t c = 0; c < shape.in; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
}

inline void relu(std::span<double> v) noexcept {
  for (double& x : v) x = x > 0.0 ? x : 0.0;
}

inline double max_of(std::span<const double> v) noexcept {
  return *std::max_element(v.begin(), v.end());
}

// log sum_j exp(v_j / t), overflow-safe.
inline double log_sum_exp(std::span<const double> v, double t) noexcept {
  const double m = max_of(v);
  double s = 0.0;
  for (double x : v) s += std::exp((x - m) / t);
  return m / t + std::log(s);
}

}  // namespace detail

inline ForwardResult forward(const ModelParams& model, std::span<const double> input) {
  if (model.layer_count() == 0) throw InvalidArgument("forward on an empty model");
  if (input.size() != model.input_dim()) {
    throw DimensionError(0, "input length " + std::to_string(input.size()) +
                                " != in_dim " + std::to_string(model.input_dim()));
  }
  Vector current(input.begin(), input.end());
  Vector next;
  const std::size_t last = model.layer_count() - 1;
  for (std::size_t l = 0; l < last; ++l) {
    next.assign(model.layers()[l].out, 0.0);
    detail::dense(model, l, current, next);
    detail::relu(next);
    std::swap(current, next);
  }
  ForwardResult out;
  out.logits.assign(model.output_dim(), 0.0);
  detail::dense(model, last, current, out.logits);
  out.features = std::move(current);
  return out;
}

inline std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw InvalidArgument("argmax of empty vector");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline Vector softmax_t(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  if (logits.empty()) throw InvalidArgument("softmax of empty logits");
  const double m = detail::max_of(logits);
  Vector p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - m) / temperature);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

// D_KL(p || q) = sum_i p_i ln(p_i / q_i), with 0 ln 0 = 0.
inline double kl_div(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw InvalidArgument("kl_div length mismatch: " + std::to_string(p.size()) + " vs " +
                          std::to_string(q.size()));
  }
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) d += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return d;
}

inline double cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw InvalidArgument("label " + std::to_string(label) + " out of range for " +
                          std::to_string(logits.size()) + " classes");
  }
  return detail::log_sum_exp(logits, 1.0) - logits[label];
}

// Which argument the student distribution takes in the KL term.
enum class KlDirection {
  StudentTeacher,  // D_KL(p_s || p_e)
  TeacherStudent,  // D_KL(p_e || p_s), conventional KD
};

// Teacher distribution for one sample, over a subset of the student's outputs.
struct DistillTarget {
  std::vector<std::size_t> classes;  // student output positions, in teacher order
  Vector teacher_probs;              // p_e, one entry per class above
};

inline Vector restrict_logits(std::span<const double> logits,
                              std::span<const std::size_t> classes) {
  Vector out;
  out.reserve(classes.size());
  for (std::size_t c : classes) {
    if (c >= logits.size()) throw InvalidArgument("restricted class out of range");
    out.push_back(logits[c]);
  }
  return out;
}

// KL term between the student's softmax restricted to target.classes and the
// teacher probabilities, both at the given temperature.
inline double distill_divergence(std::span<const double> student_logits,
                                 const DistillTarget& target, double temperature,
                                 KlDirection direction) {
  const Vector sub = restrict_logits(student_logits, target.classes);
  const Vector ps = softmax_t(sub, temperature);
  return direction == KlDirection::StudentTeacher ? kl_div(ps, target.teacher_probs)
                                                  : kl_div(target.teacher_probs, ps);
}

struct Batch {
  std::vector<std::span<const double>> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

// Mean cross-entropy, optionally plus lambda times the mean distillation term
// over the samples that carry a target. Teacher probabilities are constants.
struct LossSpec {
  double lambda = 0.0;
  double temperature = 1.0;
  KlDirection direction = KlDirection::StudentTeacher;
  // Empty, or one entry per batch sample (nullopt: sample not distilled).
  std::vector<std::optional<DistillTarget>> targets;

  bool has_distillation() const noexcept { return lambda != 0.0 && !targets.empty(); }
};

struct LossValue {
  double total = 0.0;
  double cross_entropy = 0.0;  // batch mean
  double distill = 0.0;        // mean over distilled samples, 0 if none
  std::size_t distilled = 0;
};

struct LossGrad {
  LossValue loss;
  ModelParams gradient;
};

namespace detail {

inline void check_batch(const ModelParams& model, const Batch& batch, const LossSpec& spec) {
  if (batch.inputs.size() != batch.labels.size()) {
    throw InvalidArgument("batch inputs/labels length mismatch");
  }
  if (batch.size() == 0) throw InvalidArgument("empty batch");
  if (!spec.targets.empty() && spec.targets.size() != batch.size()) {
    throw InvalidArgument("distillation targets must match batch size");
  }
  if (spec.lambda < 0.0) throw InvalidArgument("lambda must be >= 0");
  if (!(spec.temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  for (std::size_t label : batch.labels) {
    if (label >= model.output_dim()) {
      throw InvalidArgument("label " + std::to_string(label) + " out of range");
    }
  }
}

inline std::size_t count_targets(const LossSpec& spec) {
  if (!spec.has_distillation()) return 0;
  return static_cast<std::size_t>(std::count_if(
      spec.targets.begin(), spec.targets.end(), [](const auto& t) { return t.has_value(); }));
}

}  // namespace detail

// Loss value by plain forward composition, without backpropagation.
inline LossValue evaluate_loss(const ModelParams& model, const Batch& batch,
                               const LossSpec& spec) {
  detail::check_batch(model, batch, spec);
  LossValue v;
  v.distilled = detail::count_targets(spec);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto fwd = forward(model, batch.inputs[i]);
    v.cross_entropy += cross_entropy(fwd.logits, batch.labels[i]);
    if (v.distilled > 0 && spec.targets[i]) {
      v.distill +=
          distill_divergence(fwd.logits, *spec.targets[i], spec.temperature, spec.direction);
    }
  }
  v.cross_entropy /= static_cast<double>(batch.size());
  if (v.distilled > 0) v.distill /= static_cast<double>(v.distilled);
  v.total = v.cross_entropy + (v.distilled > 0 ? spec.lambda * v.distill : 0.0);
  return v;
}

// Exact gradient of evaluate_loss(model, batch, spec).total.
inline LossGrad backward(const ModelParams& model, const Batch& batch, const LossSpec& spec) {
  detail::check_batch(model, batch, spec);
  const std::size_t n_layers = model.layer_count();
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  LossGrad out;
  out.loss.distilled = detail::count_targets(spec);
  out.gradient = ModelParams(model.layers());
  const double kd_scale =
      out.loss.distilled > 0 ? spec.lambda / static_cast<double>(out.loss.distilled) : 0.0;

  // acts[l] is the input to layer l.
  std::vector<Vector> acts(n_layers);
  Vector logits(model.output_dim());
  Vector delta;
  Vector prev_delta;

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto input = batch.inputs[i];
    if (input.size() != model.input_dim()) {
      throw DimensionError(0, "input length " + std::to_string(input.size()) +
                                  " != in_dim " + std::to_string(model.input_dim()));
    }
    acts[0].assign(input.begin(), input.end());
    for (std::size_t l = 0; l + 1 < n_layers; ++l) {
      acts[l + 1].assign(model.layers()[l].out, 0.0);
      detail::dense(model, l, acts[l], acts[l + 1]);
      detail::relu(acts[l + 1]);
    }
    detail::dense(model, n_layers - 1, acts[n_layers - 1], logits);

    // dL/dlogits for the cross-entropy part.
    const std::size_t label = batch.labels[i];
    const Vector p = softmax_t(logits, 1.0);
    out.loss.cross_entropy += cross_entropy(logits, label);
    delta.assign(p.size(), 0.0);
    for (std::size_t k = 0; k < p.size(); ++k) {
      delta[k] = (p[k] - (k == label ? 1.0 : 0.0)) * inv_batch;
    }

    if (out.loss.distilled > 0 && spec.targets[i]) {
      const DistillTarget& t = *spec.targets[i];
      const Vector sub = restrict_logits(logits, t.classes);
      const Vector ps = softmax_t(sub, spec.temperature);
      const double inv_t = 1.0 / spec.temperature;
      if (spec.direction == KlDirection::StudentTeacher) {
        const double kl = kl_div(ps, t.teacher_probs);
        out.loss.distill += kl;
        const double lse = detail::log_sum_exp(sub, spec.temperature);
        for (std::size_t j = 0; j < sub.size(); ++j) {
          const double log_ps = sub[j] / spec.temperature - lse;
          const double g = ps[j] * (log_ps - std::log(t.teacher_probs[j]) - kl) * inv_t;
          delta[t.classes[j]] += kd_scale * g;
        }
      } else {
        out.loss.distill += kl_div(t.teacher_probs, ps);
        for (std::size_t j = 0; j < sub.size(); ++j) {
          delta[t.classes[j]] += kd_scale * (ps[j] - t.teacher_probs[j]) * inv_t;
        }
      }
    }

    for (std::size_t l = n_layers; l-- > 0;) {
      const auto shape = model.layers()[l];
      auto gw = out.gradient.weights(l);
      auto gb = out.gradient.biases(l);
      const Vector& x = acts[l];
      for (std::size_t r = 0; r < shape.out; ++r) {
        const double d = delta[r];
        if (d == 0.0) continue;
        double* row = gw.data() + r * shape.in;
        for (std::size_t c = 0; c < shape.in; ++c) row[c] += d * x[c];
        gb[r] += d;
      }
      if (l == 0) break;
      const auto w = model.weights(l);
      prev_delta.assign(shape.in, 0.0);
      for (std::size_t r = 0; r < shape.out; ++r) {
        const double d = delta[r];
        if (d == 0.0) continue;
        const double* row = w.data() + r * shape.in;
        for (std::size_t c = 0; c < shape.in; ++c) prev_delta[c] += row[c] * d;
      }
      // ReLU derivative, taken as 0 at the kink.
      for (std::size_t c = 0; c < shape.in; ++c) {
        if (!(x[c] > 0.0)) prev_delta[c] = 0.0;
      }
      std::swap(delta, prev_delta);
    }
  }

  out.loss.cross_entropy *= inv_batch;
  if (out.loss.distilled > 0) out.loss.distill /= static_cast<double>(out.loss.distilled);
  out.loss.total =
      out.loss.cross_entropy + (out.loss.distilled > 0 ? spec.lambda * out.loss.distill : 0.0);
  return out;
}

// In-place w <- w - lr * g.
inline void apply_sgd(ModelParams& model, const ModelParams& gradient, double lr) {
  if (!model.same_shape(gradient)) throw InvalidArgument("gradient shape mismatch");
  if (!(lr >= 0.0)) throw InvalidArgument("learning rate must be >= 0");
  if (!gradient.all_finite()) throw NumericError("non-finite gradient");
  auto w = model.values();
  const auto g = gradient.values();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
  if (!model.all_finite()) throw NumericError("non-finite parameters after SGD step");
}

inline ModelParams sgd_step(ModelParams model, const ModelParams& gradient, double lr) {
  apply_sgd(model, gradient, lr);
  return model;
}

// Multiply-add counts: 2*in*out per dense layer forward, twice that backward.
inline double forward_flops(std::span<const LayerShape> layers) noexcept {
  double f = 0.0;
  for (const auto& s : layers) f += 2.0 * static_cast<double>(s.in) * static_cast<double>(s.out);
  return f;
}

inline double backward_flops(std::span<const LayerShape> layers) noexcept {
  return 2.0 * forward_flops(layers);
}

}  // namespace fedpkd
