#include "layerskip/kvq_cache.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace layerskip {

KVQCache::KVQCache(const ModelConfig& config)
    : n_layers_(config.n_layers), capacity_(config.max_context), dim_(config.dim) {
  config.validate();
  const std::size_t n = static_cast<std::size_t>(capacity_) * static_cast<std::size_t>(dim_);
  keys_.assign(static_cast<std::size_t>(n_layers_), std::vector<float>(n, 0.0f));
  values_.assign(static_cast<std::size_t>(n_layers_), std::vector<float>(n, 0.0f));
  valid_len_.assign(static_cast<std::size_t>(n_layers_), 0);
}

std::size_t KVQCache::offset(int layer, int pos) const {
  if (layer < 0 || layer >= n_layers_) throw CacheError("layer " + std::to_string(layer) + " out of range");
  if (pos < 0 || pos >= capacity_) {
    throw ContextOverflow("position " + std::to_string(pos) + " exceeds context capacity " + std::to_string(capacity_));
  }
  return static_cast<std::size_t>(pos) * static_cast<std::size_t>(dim_);
}

std::span<const float> KVQCache::key(int layer, int pos) const {
  if (pos >= valid_len(layer)) throw CacheError("no key at layer " + std::to_string(layer) + " position " + std::to_string(pos));
  return std::span<const float>(keys_[static_cast<std::size_t>(layer)]).subspan(offset(layer, pos), static_cast<std::size_t>(dim_));
}

std::span<const float> KVQCache::value(int layer, int pos) const {
  if (pos >= valid_len(layer)) throw CacheError("no value at layer " + std::to_string(layer) + " position " + std::to_string(pos));
  return std::span<const float>(values_[static_cast<std::size_t>(layer)]).subspan(offset(layer, pos), static_cast<std::size_t>(dim_));
}

void KVQCache::write(int layer, int pos, std::span<const float> k, std::span<const float> v) {
  const std::size_t off = offset(layer, pos);
  int& len = valid_len_[static_cast<std::size_t>(layer)];
  if (pos > len) {
    throw CacheError("non-contiguous write at layer " + std::to_string(layer) + ": position " + std::to_string(pos) +
                     " but cache holds " + std::to_string(len));
  }
  std::copy(k.begin(), k.end(), keys_[static_cast<std::size_t>(layer)].begin() + static_cast<std::ptrdiff_t>(off));
  std::copy(v.begin(), v.end(), values_[static_cast<std::size_t>(layer)].begin() + static_cast<std::ptrdiff_t>(off));
  len = std::max(len, pos + 1);
}

bool KVQCache::has_exit_state(int layer, int pos) const {
  return layer == exit_layer_ && pos >= exit_begin_ && pos < exit_begin_ + exit_count();
}

std::span<const float> KVQCache::exit_state(int layer, int pos) const {
  if (!has_exit_state(layer, pos)) {
    throw CacheError("missing exit state for layer " + std::to_string(layer) + " position " + std::to_string(pos));
  }
  return std::span<const float>(exit_states_).subspan(static_cast<std::size_t>(pos - exit_begin_) * static_cast<std::size_t>(dim_),
                                                      static_cast<std::size_t>(dim_));
}

void KVQCache::record_exit_state(int layer, int pos, std::span<const float> x) {
  if (static_cast<int>(x.size()) != dim_) throw ShapeError("exit state has wrong width");
  if (layer != exit_layer_ || pos != exit_begin_ + exit_count()) {
    exit_states_.clear();
    exit_layer_ = layer;
    exit_begin_ = pos;
  }
  exit_states_.insert(exit_states_.end(), x.begin(), x.end());
}

void KVQCache::clear_exit_states() {
  exit_states_.clear();
  exit_layer_ = -1;
  exit_begin_ = 0;
}

void KVQCache::commit(int len) {
  for (int l = 0; l < n_layers_; ++l) {
    if (valid_len(l) < len) {
      throw CacheError("cannot commit " + std::to_string(len) + " positions: layer " + std::to_string(l) + " holds " +
                       std::to_string(valid_len(l)));
    }
  }
  committed_len_ = len;
}

void KVQCache::truncate(int len) {
  for (int& v : valid_len_) v = std::min(v, len);
  committed_len_ = std::min(committed_len_, len);
  if (exit_layer_ >= 0 && exit_begin_ + exit_count() > len) {
    const int keep = std::max(0, len - exit_begin_);
    exit_states_.resize(static_cast<std::size_t>(keep) * static_cast<std::size_t>(dim_));
    if (keep == 0) clear_exit_states();
  }
}

void KVQCache::reset() {
  std::fill(valid_len_.begin(), valid_len_.end(), 0);
  committed_len_ = 0;
  clear_exit_states();
}

Tensor embed_rows(const ModelParams& params, std::span<const int> tokens) {
  validate_tokens(params.config, tokens);
  const std::size_t d = static_cast<std::size_t>(params.config.dim);
  Tensor x({tokens.size(), d});
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    auto src = params.token_embedding.value.row(static_cast<std::size_t>(tokens[r]));
    std::copy(src.begin(), src.end(), x.row(r).begin());
  }
  return x;
}

namespace {

// One transformer block over n rows; same arithmetic as the training
// forward, one row at a time for attention.
void cached_layer(const LayerWeights& w, const ModelConfig& cfg, const RopeTable<float>& rope, Tensor& x, int p0,
                  KVQCache& cache, int layer) {
  const std::size_t n = x.rows();
  const std::size_t d = static_cast<std::size_t>(cfg.dim);
  const std::size_t f = static_cast<std::size_t>(cfg.ffn_hidden);
  const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  Tensor h({n, d});
  for (std::size_t r = 0; r < n; ++r) rms_norm<float>(x.row(r), w.attention_norm.value.span(), h.row(r));
  Tensor q, k, v;
  matmul(h, w.wq.value, q);
  matmul(h, w.wk.value, k);
  matmul(h, w.wv.value, v);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t pos = static_cast<std::size_t>(p0) + r;
    rope.apply(q.row(r), heads, pos);
    rope.apply(k.row(r), heads, pos);
    cache.write(layer, static_cast<int>(pos), k.row(r), v.row(r));
  }

  Tensor attn_in({n, d});
  std::vector<float> scores;
  for (std::size_t r = 0; r < n; ++r) {
    const int pos = p0 + static_cast<int>(r);
    scores.resize(static_cast<std::size_t>(pos) + 1);
    auto qrow = q.row(r);
    auto out = attn_in.row(r);
    for (std::size_t hh = 0; hh < heads; ++hh) {
      const float* qh = qrow.data() + hh * hd;
      for (int j = 0; j <= pos; ++j) {
        const float* kh = cache.key(layer, j).data() + hh * hd;
        float s = 0.0f;
        for (std::size_t e = 0; e < hd; ++e) s += qh[e] * kh[e];
        scores[static_cast<std::size_t>(j)] = s * scale;
      }
      softmax_inplace<float>(scores);
      float* oh = out.data() + hh * hd;
      for (int j = 0; j <= pos; ++j) {
        const float p = scores[static_cast<std::size_t>(j)];
        const float* vh = cache.value(layer, j).data() + hh * hd;
        for (std::size_t e = 0; e < hd; ++e) oh[e] += p * vh[e];
      }
    }
  }

  Tensor attn;
  matmul(attn_in, w.wo.value, attn);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = x[i] + attn[i];

  for (std::size_t r = 0; r < n; ++r) rms_norm<float>(x.row(r), w.ffn_norm.value.span(), h.row(r));
  Tensor gate, up;
  matmul(h, w.w_gate.value, gate);
  matmul(h, w.w_up.value, up);
  Tensor act({n, f});
  for (std::size_t i = 0; i < act.size(); ++i) act[i] = silu(gate[i]) * up[i];
  Tensor ffn;
  matmul(act, w.w_down.value, ffn);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = x[i] + ffn[i];
}

}  // namespace

void forward_layers(const ModelParams& params, Tensor& x, int p0, KVQCache& cache, int layer_begin, int layer_end,
                    const HiddenObserver& observer) {
  const ModelConfig& cfg = params.config;
  if (layer_begin < 0 || layer_end > cfg.n_layers || layer_begin > layer_end) {
    throw std::out_of_range("forward_layers: bad layer range");
  }
  const int n = static_cast<int>(x.rows());
  if (p0 + n > cfg.max_context) {
    throw ContextOverflow("positions up to " + std::to_string(p0 + n) + " exceed max_context " +
                          std::to_string(cfg.max_context));
  }
  const RopeTable<float>& rope = rope_table<float>(cfg);
  for (int l = layer_begin; l < layer_end; ++l) {
    if (cache.valid_len(l) < p0) {
      throw CacheError("layer " + std::to_string(l) + " holds " + std::to_string(cache.valid_len(l)) +
                       " positions; cannot process position " + std::to_string(p0));
    }
    cached_layer(params.layers[static_cast<std::size_t>(l)], cfg, rope, x, p0, cache, l);
    require_finite(x, "layer output");
    if (observer) observer(l + 1, x);
  }
}

Tensor forward_step(const ModelParams& params, std::span<const int> tokens, KVQCache& cache, int exit_layer,
                    const HiddenObserver& observer) {
  const ModelConfig& cfg = params.config;
  if (exit_layer < 0 || exit_layer > cfg.n_layers) {
    throw std::out_of_range("exit layer " + std::to_string(exit_layer) + " outside [0, " + std::to_string(cfg.n_layers) + "]");
  }
  if (tokens.empty()) throw ShapeError("forward_step: no tokens");
  const int p0 = cache.valid_len(0);
  for (int l = 1; l < exit_layer; ++l) {
    if (cache.valid_len(l) != p0) {
      throw CacheError("forward_step: layers below the exit hold different lengths");
    }
  }
  Tensor x = embed_rows(params, tokens);
  if (observer) observer(0, x);
  forward_layers(params, x, p0, cache, 0, exit_layer, observer);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    cache.record_exit_state(exit_layer, p0 + static_cast<int>(r), x.row(r));
  }
  return x;
}

Tensor forward_remainder(const ModelParams& params, KVQCache& cache, int from_layer, int begin, int count) {
  const ModelConfig& cfg = params.config;
  if (from_layer < 0 || from_layer > cfg.n_layers) throw std::out_of_range("forward_remainder: bad exit layer");
  const std::size_t d = static_cast<std::size_t>(cfg.dim);
  Tensor x({static_cast<std::size_t>(count), d});
  for (int i = 0; i < count; ++i) {
    auto src = cache.exit_state(from_layer, begin + i);
    std::copy(src.begin(), src.end(), x.row(static_cast<std::size_t>(i)).begin());
  }
  forward_layers(params, x, begin, cache, from_layer, cfg.n_layers);
  return x;
}

}  // namespace layerskip
