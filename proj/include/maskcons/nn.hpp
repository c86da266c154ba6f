#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "maskcons/rng.hpp"
#include "maskcons/tensor.hpp"

namespace maskcons {

enum class LayerKind {
  dense,         // x[B x F_in] -> x W + b, W[F_in x F_out]
  conv3x3,       // x[B x C x H x W] -> conv, stride 1, pad 1, + bias
  relu,
  maxpool2,      // 2x2, stride 2; H, W must be even
  upsample2,     // nearest-neighbor 2x
  concat_skip,   // channel-concat with the activation at skip_src
  softmax_head,  // per-position softmax over the class axis (axis 1)
};

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

struct LayerSpec {
  LayerKind kind;
  size_t in_ch = 0;    // dense: input features; conv3x3: input channels
  size_t out_ch = 0;   // dense: output features; conv3x3: output channels
  size_t skip_src = 0; // concat_skip: activation index (0 = network input)
};

LayerSpec dense_layer(size_t in, size_t out);
LayerSpec conv3x3_layer(size_t in_ch, size_t out_ch);
LayerSpec relu_layer();
LayerSpec maxpool2_layer();
LayerSpec upsample2_layer();
LayerSpec concat_skip_layer(size_t skip_src);
LayerSpec softmax_head_layer();

// Ordered layer stack with one flat parameter store. Initialization is a pure
// function of (specs, input shape, seed): He-scaled normals for weights
// (std = sqrt(2/fan_in)), zero biases.
class Network {
 public:
  Network() = default;
  Network(std::vector<LayerSpec> layers, std::vector<size_t> input_shape, uint64_t seed);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<size_t>& input_shape() const { return input_shape_; }
  // Per-item shape of each activation; act_shape(0) is the input shape.
  const std::vector<size_t>& act_shape(size_t i) const { return act_shapes_[i]; }
  size_t n_params() const { return params_.size(); }
  size_t layer_offset(size_t i) const { return offsets_[i]; }
  size_t layer_param_count(size_t i) const { return offsets_[i + 1] - offsets_[i]; }
  uint64_t rng_seed() const { return rng_seed_; }

  const Tensor& params() const { return params_; }
  // Any parameter mutation invalidates outstanding tapes.
  Tensor& mutable_params() {
    ++version_;
    return params_;
  }
  uint64_t version() const { return version_; }

 private:
  std::vector<LayerSpec> layers_;
  std::vector<size_t> input_shape_;
  std::vector<std::vector<size_t>> act_shapes_;
  std::vector<size_t> offsets_;  // layers_.size() + 1 entries
  Tensor params_;
  uint64_t rng_seed_ = 0;
  uint64_t version_ = 0;
};

// Activations recorded during a cached forward pass; acts[0] is the input and
// acts[i+1] the output of layer i. maxpool layers also record their argmax.
struct ActivationTape {
  std::vector<Tensor> acts;
  std::vector<std::vector<uint32_t>> pool_argmax;
  uint64_t net_version = 0;
};

// Batched forward pass; x is [B x input_shape...]. The softmax head emits
// per-position class probabilities. Throws on shape mismatch and on
// non-finite activations (divergence).
Tensor forward(const Network& net, const Tensor& x);
std::pair<Tensor, ActivationTape> forward_cached(const Network& net, const Tensor& x);

struct Gradients {
  Tensor params;
  Tensor input;
};

// Gradients of a scalar loss with given dLoss/dOutput; tape must come from a
// forward pass on the current parameters.
Gradients backward(const Network& net, const ActivationTape& tape, const Tensor& dloss_dy);

struct AdamState {
  Tensor m, v;
  int64_t t = 0;
  real lr = real(1e-3);
  real beta1 = real(0.9);
  real beta2 = real(0.999);
  real eps = real(1e-8);

  AdamState() = default;
  AdamState(size_t n_params, real lr_);
};

// Bias-corrected Adam update in place. Throws on non-finite gradients.
void adam_step(AdamState& state, Tensor& params, const Tensor& grads);

struct EmaConfig {
  real alpha = real(0.99);
};

// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
void ema_update(Tensor& teacher, const Tensor& student, const EmaConfig& cfg);

// Scalar loss over the network output, with its gradient.
struct ScalarLoss {
  std::function<real(const Tensor& y)> value;
  std::function<Tensor(const Tensor& y)> grad;
};

ScalarLoss sum_loss();
// targets: [B x spatial...] integer class labels; pred axis 1 is the class axis.
ScalarLoss xent_loss(Tensor targets);
ScalarLoss sqerr_to_target_loss(Tensor target);

// Central-difference check of backward() against the loss: perturbs a random
// subset (>= min(n_check, n_params)) of parameters and every input element,
// and returns the worst relative error with denominator
// max(|analytic|, |numeric|, 1e-8). 64-bit builds only.
real finite_diff_check(const Network& net, const Tensor& x, const ScalarLoss& loss, real h,
                       size_t n_check, Rng& rng);

// Checkpoint: text layer-spec header followed by the params in TNSR format.
void save_network(const std::string& path, const Network& net);
Network load_network(const std::string& path);

}  // namespace maskcons
