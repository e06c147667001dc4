#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmf/util.hpp"

namespace tmf {

enum class Activation { Tanh, ReLU, Identity, Softmax };
enum class Loss { MSE, CrossEntropy };

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using VectorF = Vector<float>;
using BoolMask = Eigen::Array<bool, Eigen::Dynamic, 1>;

struct LayerSpec {
  int input_dim = 0;
  int output_dim = 0;
  Activation activation = Activation::Identity;
};

// A validated dense layer chain together with the canonical flat parameter
// layout. Flattening order: layers in order; within a layer the out x in
// weight matrix in row-major (output-major) order, then the bias vector.
class NetworkSpec {
 public:
  NetworkSpec(std::vector<LayerSpec> layers, Loss loss)
      : layers_(std::move(layers)), loss_(loss) {
    if (layers_.empty()) throw std::invalid_argument("network needs at least one layer");
    int offset = 0;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const LayerSpec& l = layers_[k];
      if (l.input_dim < 1 || l.output_dim < 1) {
        throw std::invalid_argument("layer dimensions must be positive");
      }
      if (k + 1 < layers_.size()) {
        if (l.output_dim != layers_[k + 1].input_dim) {
          throw std::invalid_argument("layer " + std::to_string(k) +
                                      " output does not chain into layer " +
                                      std::to_string(k + 1));
        }
        if (l.activation == Activation::Softmax) {
          throw std::invalid_argument("softmax is only allowed on the final layer");
        }
      }
      weight_offsets_.push_back(offset);
      offset += l.input_dim * l.output_dim + l.output_dim;
    }
    param_count_ = offset;
    const Activation last = layers_.back().activation;
    if (loss_ == Loss::CrossEntropy && last != Activation::Softmax) {
      throw std::invalid_argument("cross-entropy requires a softmax output layer");
    }
    if (loss_ == Loss::MSE && last != Activation::Identity) {
      throw std::invalid_argument("mse requires an identity output layer");
    }
  }

  // Chain of equal-width hidden layers, e.g. dense(1, {16,16,16}, 1, ...)
  static NetworkSpec dense(int input, const std::vector<int>& hidden, int output,
                           Activation hidden_activation, Loss loss) {
    std::vector<LayerSpec> layers;
    int in = input;
    for (int h : hidden) {
      layers.push_back({in, h, hidden_activation});
      in = h;
    }
    const Activation out_act =
        loss == Loss::CrossEntropy ? Activation::Softmax : Activation::Identity;
    layers.push_back({in, output, out_act});
    return NetworkSpec(std::move(layers), loss);
  }

  const std::vector<LayerSpec>& layers() const { return layers_; }
  Loss loss() const { return loss_; }
  int param_count() const { return param_count_; }
  int input_dim() const { return layers_.front().input_dim; }
  int output_dim() const { return layers_.back().output_dim; }

  int weight_offset(std::size_t layer) const { return weight_offsets_[layer]; }
  int bias_offset(std::size_t layer) const {
    return weight_offsets_[layer] + layers_[layer].input_dim * layers_[layer].output_dim;
  }
  int layer_param_count(std::size_t layer) const {
    return layers_[layer].input_dim * layers_[layer].output_dim + layers_[layer].output_dim;
  }

 private:
  std::vector<LayerSpec> layers_;
  Loss loss_;
  std::vector<int> weight_offsets_;
  int param_count_ = 0;
};

template <typename Scalar>
struct SampleT {
  Vector<Scalar> input;
  Vector<Scalar> target;  // one-hot for classification
};

using Sample = SampleT<float>;

// Per-layer pre-activations and activations kept for the backward pass.
template <typename Scalar>
struct ForwardTrace {
  std::vector<Vector<Scalar>> pre;
  std::vector<Vector<Scalar>> post;
};

// Glorot-uniform weights, zero biases. Draws are consumed in layout order,
// so a given seed always yields the same vector.
template <typename Scalar>
Vector<Scalar> init_weights(const NetworkSpec& spec, std::uint64_t seed) {
  Vector<Scalar> w = Vector<Scalar>::Zero(spec.param_count());
  Rng rng(seed);
  for (std::size_t k = 0; k < spec.layers().size(); ++k) {
    const LayerSpec& l = spec.layers()[k];
    const double limit = std::sqrt(6.0 / (l.input_dim + l.output_dim));
    Scalar* dst = w.data() + spec.weight_offset(k);
    const int n = l.input_dim * l.output_dim;
    for (int i = 0; i < n; ++i) {
      dst[i] = static_cast<Scalar>(rng.uniform(-limit, limit));
    }
    // biases stay zero
  }
  return w;
}

namespace detail {

template <typename Scalar>
void check_weight_layout(const NetworkSpec& spec, const Vector<Scalar>& w) {
  if (w.size() != spec.param_count()) {
    throw std::invalid_argument("weight vector length " + std::to_string(w.size()) +
                                " does not match param count " +
                                std::to_string(spec.param_count()));
  }
}

template <typename Scalar>
void apply_activation(Activation act, const Vector<Scalar>& z, Vector<Scalar>& out) {
  switch (act) {
    case Activation::Tanh:
      out = z.array().tanh();
      break;
    case Activation::ReLU:
      out = z.array().max(Scalar(0));
      break;
    case Activation::Identity:
      out = z;
      break;
    case Activation::Softmax: {
      const Scalar m = z.maxCoeff();
      out = (z.array() - m).exp();
      out /= out.sum();
      break;
    }
  }
}

}  // namespace detail

template <typename Scalar>
void forward_into(const NetworkSpec& spec, const Vector<Scalar>& w,
                  const Vector<Scalar>& x, ForwardTrace<Scalar>& trace) {
  detail::check_weight_layout(spec, w);
  if (x.size() != spec.input_dim()) {
    throw std::invalid_argument("input length does not match first layer");
  }
  const std::size_t depth = spec.layers().size();
  trace.pre.resize(depth);
  trace.post.resize(depth);
  const Vector<Scalar>* a = &x;
  for (std::size_t k = 0; k < depth; ++k) {
    const LayerSpec& l = spec.layers()[k];
    Eigen::Map<const MatrixRM<Scalar>> W(w.data() + spec.weight_offset(k),
                                         l.output_dim, l.input_dim);
    Eigen::Map<const Vector<Scalar>> b(w.data() + spec.bias_offset(k), l.output_dim);
    trace.pre[k].noalias() = W * (*a);
    trace.pre[k] += b;
    detail::apply_activation(l.activation, trace.pre[k], trace.post[k]);
    a = &trace.post[k];
  }
}

template <typename Scalar>
Vector<Scalar> forward(const NetworkSpec& spec, const Vector<Scalar>& w,
                       const Vector<Scalar>& x, ForwardTrace<Scalar>* trace = nullptr) {
  ForwardTrace<Scalar> local;
  ForwardTrace<Scalar>& t = trace ? *trace : local;
  forward_into(spec, w, x, t);
  return t.post.back();
}

namespace detail {

// Loss of the network output against the target. Cross-entropy is evaluated
// through log-sum-exp on the pre-activations so its gradient p - t is exact.
template <typename Scalar>
Scalar loss_from_trace(const NetworkSpec& spec, const ForwardTrace<Scalar>& trace,
                       const Vector<Scalar>& target) {
  if (target.size() != spec.output_dim()) {
    throw std::invalid_argument("target length does not match output layer");
  }
  if (spec.loss() == Loss::MSE) {
    return (trace.post.back() - target).squaredNorm() / Scalar(spec.output_dim());
  }
  const Vector<Scalar>& z = trace.pre.back();
  const Scalar m = z.maxCoeff();
  const Scalar lse = m + std::log((z.array() - m).exp().sum());
  return (target.array() * (lse - z.array())).sum();
}

}  // namespace detail

template <typename Scalar>
Scalar loss_value(const NetworkSpec& spec, const Vector<Scalar>& w,
                  const SampleT<Scalar>& sample) {
  ForwardTrace<Scalar> trace;
  forward_into(spec, w, sample.input, trace);
  return detail::loss_from_trace(spec, trace, sample.target);
}

// Workspace so tight training loops do not reallocate per step.
template <typename Scalar>
struct BackwardWorkspace {
  ForwardTrace<Scalar> trace;
  Vector<Scalar> delta;
  Vector<Scalar> delta_prev;
};

// Loss and gradient of one sample. When `trainable` is given, gradient
// entries outside it are forced to exactly zero, which is how weight
// freezing is implemented throughout.
template <typename Scalar>
Scalar backward_into(const NetworkSpec& spec, const Vector<Scalar>& w,
                     const SampleT<Scalar>& sample, Vector<Scalar>& grad,
                     BackwardWorkspace<Scalar>& ws, const BoolMask* trainable = nullptr) {
  forward_into(spec, w, sample.input, ws.trace);
  const Scalar loss = detail::loss_from_trace(spec, ws.trace, sample.target);

  grad.resize(spec.param_count());
  const std::size_t depth = spec.layers().size();

  // dL/dz at the output layer. Both supported losses pair with an output
  // activation that collapses to this simple form.
  if (spec.loss() == Loss::MSE) {
    ws.delta = (ws.trace.post.back() - sample.target) *
               (Scalar(2) / Scalar(spec.output_dim()));
  } else {
    ws.delta = ws.trace.post.back() - sample.target;
  }

  for (std::size_t k = depth; k-- > 0;) {
    const LayerSpec& l = spec.layers()[k];
    const Vector<Scalar>& a_prev = (k == 0) ? sample.input : ws.trace.post[k - 1];
    Eigen::Map<MatrixRM<Scalar>> gw(grad.data() + spec.weight_offset(k),
                                    l.output_dim, l.input_dim);
    Eigen::Map<Vector<Scalar>> gb(grad.data() + spec.bias_offset(k), l.output_dim);
    gw.noalias() = ws.delta * a_prev.transpose();
    gb = ws.delta;
    if (k == 0) break;

    Eigen::Map<const MatrixRM<Scalar>> W(w.data() + spec.weight_offset(k),
                                         l.output_dim, l.input_dim);
    ws.delta_prev.noalias() = W.transpose() * ws.delta;
    const LayerSpec& below = spec.layers()[k - 1];
    switch (below.activation) {
      case Activation::Tanh:
        ws.delta_prev.array() *=
            Scalar(1) - ws.trace.post[k - 1].array().square();
        break;
      case Activation::ReLU:
        ws.delta_prev.array() *=
            (ws.trace.pre[k - 1].array() > Scalar(0)).template cast<Scalar>();
        break;
      case Activation::Identity:
        break;
      case Activation::Softmax:
        throw std::logic_error("softmax below the output layer");
    }
    std::swap(ws.delta, ws.delta_prev);
  }

  if (trainable) {
    if (trainable->size() != grad.size()) {
      throw std::invalid_argument("trainable mask length does not match layout");
    }
    grad = trainable->select(grad.array(), Scalar(0)).matrix();
  }
  return loss;
}

template <typename Scalar>
std::pair<Scalar, Vector<Scalar>> backward(const NetworkSpec& spec, const Vector<Scalar>& w,
                                           const SampleT<Scalar>& sample,
                                           const BoolMask* trainable = nullptr) {
  BackwardWorkspace<Scalar> ws;
  Vector<Scalar> grad;
  const Scalar loss = backward_into(spec, w, sample, grad, ws, trainable);
  return {loss, std::move(grad)};
}

template <typename Scalar>
void sgd_step_in_place(Vector<Scalar>& w, const Vector<Scalar>& grad, Scalar beta) {
  if (w.size() != grad.size()) {
    throw std::invalid_argument("weight and gradient layouts differ");
  }
  if (!(beta > Scalar(0))) throw std::invalid_argument("learning rate must be positive");
  w -= beta * grad;
}

template <typename Scalar>
Vector<Scalar> sgd_step(const Vector<Scalar>& w, const Vector<Scalar>& grad, Scalar beta) {
  Vector<Scalar> out = w;
  sgd_step_in_place(out, grad, beta);
  return out;
}

}  // namespace tmf
