#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "layerskip/ops.hpp"
#include "layerskip/tensor.hpp"

namespace layerskip {

struct ModelConfig {
  int n_layers = 8;
  int dim = 128;
  int n_heads = 4;
  int vocab = 257;
  int max_context = 256;
  int ffn_hidden = 256;

  int head_dim() const { return dim / n_heads; }

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct BasicLayerWeights {
  BasicParameter<T> attention_norm;  // [dim]
  BasicParameter<T> wq;              // [dim x dim]
  BasicParameter<T> wk;
  BasicParameter<T> wv;
  BasicParameter<T> wo;
  BasicParameter<T> ffn_norm;  // [dim]
  BasicParameter<T> w_gate;    // [dim x ffn_hidden]
  BasicParameter<T> w_up;      // [dim x ffn_hidden]
  BasicParameter<T> w_down;    // [ffn_hidden x dim]

  template <typename F>
  void for_each(F&& f) {
    f("attention_norm", attention_norm);
    f("attention.wq", wq);
    f("attention.wk", wk);
    f("attention.wv", wv);
    f("attention.wo", wo);
    f("ffn_norm", ffn_norm);
    f("feed_forward.w_gate", w_gate);
    f("feed_forward.w_up", w_up);
    f("feed_forward.w_down", w_down);
  }
};

/// All weights of the decoder. One final norm + LM head pair is shared by
/// every exit; the token embedding is a separate (untied) matrix.
template <typename T>
struct BasicModelParams {
  ModelConfig config;
  BasicParameter<T> token_embedding;  // [vocab x dim]
  std::vector<BasicLayerWeights<T>> layers;
  BasicParameter<T> final_norm;  // [dim]
  BasicParameter<T> lm_head;     // [dim x vocab]

  /// Visits parameters in manifest order with their checkpoint names.
  template <typename F>
  void for_each_parameter(F&& f) {
    f(std::string("tok_embeddings"), token_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string prefix = "layers." + std::to_string(l) + ".";
      layers[l].for_each([&](const char* name, BasicParameter<T>& p) { f(prefix + name, p); });
    }
    f(std::string("norm"), final_norm);
    f(std::string("output"), lm_head);
  }

  template <typename F>
  void for_each_parameter(F&& f) const {
    const_cast<BasicModelParams*>(this)->for_each_parameter(
        [&](const std::string& name, BasicParameter<T>& p) { f(name, static_cast<const BasicParameter<T>&>(p)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, const BasicParameter<T>& p) { n += p.value.size(); });
    return n;
  }

  void zero_grad() {
    for_each_parameter([](const std::string&, BasicParameter<T>& p) { p.zero_grad(); });
  }

  /// Allocates empty (zero) weights for `cfg`.
  static BasicModelParams zeros(const ModelConfig& cfg);

  template <typename U>
  BasicModelParams<U> cast() const {
    BasicModelParams<U> out = BasicModelParams<U>::zeros(config);
    std::vector<const BasicParameter<T>*> src;
    for_each_parameter([&](const std::string&, const BasicParameter<T>& p) { src.push_back(&p); });
    std::size_t i = 0;
    out.for_each_parameter([&](const std::string&, BasicParameter<U>& p) { p = src[i++]->template cast<U>(); });
    return out;
  }
};

using ModelParams = BasicModelParams<float>;
using LayerWeights = BasicLayerWeights<float>;

/// Scaled-normal init (std 0.02; attention and FFN output projections scaled
/// by 1/sqrt(2L)); norm gains start at 1. Deterministic in `seed`.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Parameter count implied by the block structure.
std::size_t closed_form_parameter_count(const ModelConfig& config);

bool bitwise_equal(const ModelParams& a, const ModelParams& b);

/// Per-layer, per-sample layer-dropout decisions. `dropped(l, b)` means
/// layer l contributes nothing to sample b's residual stream.
class DropMask {
 public:
  DropMask() = default;
  DropMask(int n_layers, int batch_size, bool value = false)
      : n_layers_(n_layers), batch_size_(batch_size),
        bits_(static_cast<std::size_t>(n_layers) * static_cast<std::size_t>(batch_size), value ? 1 : 0) {}

  int n_layers() const { return n_layers_; }
  int batch_size() const { return batch_size_; }
  bool dropped(int layer, int sample) const { return bits_[index(layer, sample)] != 0; }
  void set(int layer, int sample, bool value) { bits_[index(layer, sample)] = value ? 1 : 0; }

  /// Column for one sample, indexed by layer.
  std::vector<bool> sample(int b) const {
    std::vector<bool> out(static_cast<std::size_t>(n_layers_));
    for (int l = 0; l < n_layers_; ++l) out[static_cast<std::size_t>(l)] = dropped(l, b);
    return out;
  }

  int count_dropped() const {
    int n = 0;
    for (auto v : bits_) n += v;
    return n;
  }

  friend bool operator==(const DropMask&, const DropMask&) = default;

 private:
  std::size_t index(int layer, int sample) const {
    return static_cast<std::size_t>(layer) * static_cast<std::size_t>(batch_size_) + static_cast<std::size_t>(sample);
  }

  int n_layers_ = 0;
  int batch_size_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// x[0] = embeddings, x[l + 1] = output of layer l; each [seq x dim].
template <typename T>
struct HiddenStates {
  std::vector<BasicTensor<T>> x;
};

namespace detail {

template <typename T>
struct LayerTrace {
  std::vector<T> inv_rms_attn;
  BasicTensor<T> h_attn;
  BasicTensor<T> q, k, v;  // post-rotary q and k
  std::vector<BasicTensor<T>> probs;  // per head [seq x seq]
  BasicTensor<T> attn_out;  // concatenated heads before wo
  BasicTensor<T> y;         // x + attention
  std::vector<T> inv_rms_ffn;
  BasicTensor<T> h_ffn;
  BasicTensor<T> gate, up, act;
};

}  // namespace detail

/// Forward pass over one sequence with all activations kept for backward.
template <typename T>
struct SequenceForward {
  std::vector<int> tokens;
  std::vector<bool> dropped;
  HiddenStates<T> hidden;
  std::vector<detail::LayerTrace<T>> traces;
};

template <typename T>
const RopeTable<T>& rope_table(const ModelConfig& config);

template <typename T>
SequenceForward<T> forward_sequence(const BasicModelParams<T>& params, std::span<const int> tokens,
                                    const std::vector<bool>& dropped_layers);

/// Backpropagates `hidden_grads` (dLoss/dx_l for l = 0..L, consumed) through
/// the layers and the embedding, accumulating into `params` gradients.
template <typename T>
void backward_sequence(BasicModelParams<T>& params, const SequenceForward<T>& fwd,
                       std::vector<BasicTensor<T>>& hidden_grads);

/// Training-time forward over a batch; drop_mask is [L x batch].
template <typename T>
std::vector<HiddenStates<T>> forward_train(const BasicModelParams<T>& params,
                                           const std::vector<std::vector<int>>& batch, const DropMask& drop_mask);

/// Shared exit head: lm_head * rms_norm(x, final_norm). `x` is one position.
template <typename T>
void unembed(const BasicModelParams<T>& params, std::span<const T> x, std::span<T> logits);

std::vector<float> unembed(const ModelParams& params, std::span<const float> x);

/// Row-wise unembedding of [n x dim] hidden states into [n x vocab] logits.
template <typename T>
BasicTensor<T> unembed_rows(const BasicModelParams<T>& params, const BasicTensor<T>& x);

void validate_tokens(const ModelConfig& config, std::span<const int> tokens);

}  // namespace layerskip
