#include "layerskip/model.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <mutex>
#include <random>
#include <memory>

namespace layerskip {

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (dim < 1) throw ConfigError("dim must be >= 1");
  if (n_heads < 1 || dim % n_heads != 0) throw ConfigError("dim must be divisible by n_heads");
  if (head_dim() % 2 != 0) throw ConfigError("head_dim must be even for rotary embeddings");
  if (vocab < 2) throw ConfigError("vocab must be >= 2");
  if (max_context < 1) throw ConfigError("max_context must be >= 1");
  if (ffn_hidden < 1) throw ConfigError("ffn_hidden must be >= 1");
}

template <typename T>
BasicModelParams<T> BasicModelParams<T>::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.dim);
  const auto v = static_cast<std::size_t>(cfg.vocab);
  const auto f = static_cast<std::size_t>(cfg.ffn_hidden);
  BasicModelParams<T> p;
  p.config = cfg;
  p.token_embedding = BasicParameter<T>({v, d});
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& layer : p.layers) {
    layer.attention_norm = BasicParameter<T>({d});
    layer.wq = BasicParameter<T>({d, d});
    layer.wk = BasicParameter<T>({d, d});
    layer.wv = BasicParameter<T>({d, d});
    layer.wo = BasicParameter<T>({d, d});
    layer.ffn_norm = BasicParameter<T>({d});
    layer.w_gate = BasicParameter<T>({d, f});
    layer.w_up = BasicParameter<T>({d, f});
    layer.w_down = BasicParameter<T>({f, d});
  }
  p.final_norm = BasicParameter<T>({d});
  p.lm_head = BasicParameter<T>({d, v});
  return p;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = ModelParams::zeros(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 0.02f);
  const float out_scale = 1.0f / std::sqrt(2.0f * static_cast<float>(config.n_layers));
  auto fill = [&](Parameter& param, float scale) {
    for (float& w : param.value.span()) w = normal(rng) * scale;
  };
  fill(p.token_embedding, 1.0f);
  for (auto& layer : p.layers) {
    layer.attention_norm.value.fill(1.0f);
    fill(layer.wq, 1.0f);
    fill(layer.wk, 1.0f);
    fill(layer.wv, 1.0f);
    fill(layer.wo, out_scale);
    layer.ffn_norm.value.fill(1.0f);
    fill(layer.w_gate, 1.0f);
    fill(layer.w_up, 1.0f);
    fill(layer.w_down, out_scale);
  }
  p.final_norm.value.fill(1.0f);
  fill(p.lm_head, 1.0f);
  return p;
}

std::size_t closed_form_parameter_count(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.dim);
  const auto v = static_cast<std::size_t>(c.vocab);
  const auto f = static_cast<std::size_t>(c.ffn_hidden);
  const std::size_t per_layer = 4 * d * d + 3 * d * f + 2 * d;
  return v * d + static_cast<std::size_t>(c.n_layers) * per_layer + d + d * v;
}

bool bitwise_equal(const ModelParams& a, const ModelParams& b) {
  if (!(a.config == b.config)) return false;
  std::vector<const Tensor*> lhs;
  a.for_each_parameter([&](const std::string&, const Parameter& p) { lhs.push_back(&p.value); });
  std::size_t i = 0;
  bool same = true;
  b.for_each_parameter([&](const std::string&, const Parameter& p) {
    const Tensor& x = *lhs[i++];
    same = same && x.shape() == p.value.shape() &&
           std::memcmp(x.data(), p.value.data(), x.size() * sizeof(float)) == 0;
  });
  return same;
}

void validate_tokens(const ModelConfig& config, std::span<const int> tokens) {
  for (int t : tokens) {
    if (t < 0 || t >= config.vocab) {
      throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary of size " +
                              std::to_string(config.vocab));
    }
  }
}

template <typename T>
const RopeTable<T>& rope_table(const ModelConfig& config) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, std::unique_ptr<RopeTable<T>>> tables;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = tables[{config.max_context, config.head_dim()}];
  if (!slot) {
    slot = std::make_unique<RopeTable<T>>(static_cast<std::size_t>(config.max_context),
                                          static_cast<std::size_t>(config.head_dim()));
  }
  return *slot;
}

namespace {

template <typename T>
void rms_norm_rows(const BasicTensor<T>& x, const BasicTensor<T>& gain, BasicTensor<T>& out, std::vector<T>& inv) {
  out = BasicTensor<T>(x.shape());
  inv.resize(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    inv[r] = rms_norm<T>(x.row(r), gain.span(), out.row(r));
  }
}

template <typename T>
void project(const BasicTensor<T>& x, const BasicTensor<T>& w, BasicTensor<T>& y) {
  matmul(x, w, y);
}

// dx += dy * w^T ; dw += x^T * dy
template <typename T>
void project_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dy,
                      BasicTensor<T>& dx, BasicTensor<T>& dw) {
  const std::size_t n = x.rows(), k = x.cols(), m = w.cols();
  matmul_accumulate_xt_dy(x.data(), k, n, k, dy.data(), m, m, dw.data(), m);
  BasicTensor<T> wt = transpose(w);
  BasicTensor<T> tmp({n, k});
  matmul(dy.data(), m, n, m, wt.data(), k, k, tmp.data(), k);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += tmp[i];
}

template <typename T>
void layer_forward(const BasicLayerWeights<T>& w, const ModelConfig& cfg, const RopeTable<T>& rope,
                   const BasicTensor<T>& x, BasicTensor<T>& out, detail::LayerTrace<T>& tr) {
  const std::size_t seq = x.rows();
  const std::size_t d = static_cast<std::size_t>(cfg.dim);
  const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));

  rms_norm_rows(x, w.attention_norm.value, tr.h_attn, tr.inv_rms_attn);
  project(tr.h_attn, w.wq.value, tr.q);
  project(tr.h_attn, w.wk.value, tr.k);
  project(tr.h_attn, w.wv.value, tr.v);
  for (std::size_t r = 0; r < seq; ++r) {
    rope.apply(tr.q.row(r), heads, r);
    rope.apply(tr.k.row(r), heads, r);
  }

  tr.attn_out = BasicTensor<T>({seq, d});
  tr.probs.assign(heads, BasicTensor<T>({seq, seq}));
  BasicTensor<T> kt({hd, seq});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t j = 0; j < seq; ++j) {
      for (std::size_t e = 0; e < hd; ++e) kt.at(e, j) = tr.k.at(j, h * hd + e);
    }
    BasicTensor<T>& p = tr.probs[h];
    matmul(tr.q.data() + h * hd, d, seq, hd, kt.data(), seq, seq, p.data(), seq);
    for (std::size_t i = 0; i < seq; ++i) {
      auto row = p.row(i);
      for (std::size_t j = 0; j <= i; ++j) row[j] *= scale;
      softmax_inplace<T>(row.subspan(0, i + 1));
      for (std::size_t j = i + 1; j < seq; ++j) row[j] = T{0};
    }
    matmul(p.data(), seq, seq, seq, tr.v.data() + h * hd, d, hd, tr.attn_out.data() + h * hd, d);
  }

  BasicTensor<T> attn;
  project(tr.attn_out, w.wo.value, attn);
  tr.y = BasicTensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) tr.y[i] = x[i] + attn[i];

  rms_norm_rows(tr.y, w.ffn_norm.value, tr.h_ffn, tr.inv_rms_ffn);
  project(tr.h_ffn, w.w_gate.value, tr.gate);
  project(tr.h_ffn, w.w_up.value, tr.up);
  tr.act = BasicTensor<T>(tr.gate.shape());
  for (std::size_t i = 0; i < tr.act.size(); ++i) tr.act[i] = silu(tr.gate[i]) * tr.up[i];
  BasicTensor<T> ffn;
  project(tr.act, w.w_down.value, ffn);
  out = BasicTensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = tr.y[i] + ffn[i];
}

// dout is dLoss/d(layer output); returns dLoss/d(layer input) in dx (overwritten).
template <typename T>
void layer_backward(BasicLayerWeights<T>& w, const ModelConfig& cfg, const RopeTable<T>& rope,
                    const BasicTensor<T>& x, const detail::LayerTrace<T>& tr, const BasicTensor<T>& dout,
                    BasicTensor<T>& dx) {
  const std::size_t seq = x.rows();
  const std::size_t d = static_cast<std::size_t>(cfg.dim);
  const std::size_t f = static_cast<std::size_t>(cfg.ffn_hidden);
  const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));

  // Feed-forward: out = y + w_down(silu(gate) * up)
  BasicTensor<T> dact({seq, f});
  project_backward(tr.act, w.w_down.value, dout, dact, w.w_down.grad);
  BasicTensor<T> dgate({seq, f}), dup({seq, f});
  for (std::size_t i = 0; i < dact.size(); ++i) {
    dgate[i] = dact[i] * tr.up[i] * silu_grad(tr.gate[i]);
    dup[i] = dact[i] * silu(tr.gate[i]);
  }
  BasicTensor<T> dh_ffn({seq, d});
  project_backward(tr.h_ffn, w.w_gate.value, dgate, dh_ffn, w.w_gate.grad);
  project_backward(tr.h_ffn, w.w_up.value, dup, dh_ffn, w.w_up.grad);

  BasicTensor<T> dy = dout;
  for (std::size_t r = 0; r < seq; ++r) {
    rms_norm_backward<T>(tr.y.row(r), w.ffn_norm.value.span(), tr.inv_rms_ffn[r], dh_ffn.row(r), dy.row(r),
                         w.ffn_norm.grad.span());
  }

  // Attention: y = x + wo(attn_out)
  BasicTensor<T> dattn_out({seq, d});
  project_backward(tr.attn_out, w.wo.value, dy, dattn_out, w.wo.grad);

  BasicTensor<T> dq({seq, d}), dk({seq, d}), dv({seq, d});
  BasicTensor<T> vt({hd, seq});
  BasicTensor<T> dp({seq, seq});
  for (std::size_t h = 0; h < heads; ++h) {
    const BasicTensor<T>& p = tr.probs[h];
    for (std::size_t j = 0; j < seq; ++j) {
      for (std::size_t e = 0; e < hd; ++e) vt.at(e, j) = tr.v.at(j, h * hd + e);
    }
    matmul(dattn_out.data() + h * hd, d, seq, hd, vt.data(), seq, seq, dp.data(), seq);
    matmul_accumulate_xt_dy(p.data(), seq, seq, seq, dattn_out.data() + h * hd, d, hd, dv.data() + h * hd, d);
    for (std::size_t i = 0; i < seq; ++i) {
      auto prow = p.row(i);
      auto drow = dp.row(i);
      T dot = 0;
      for (std::size_t j = 0; j <= i; ++j) dot += prow[j] * drow[j];
      for (std::size_t j = 0; j <= i; ++j) drow[j] = prow[j] * (drow[j] - dot) * scale;
      for (std::size_t j = i + 1; j < seq; ++j) drow[j] = T{0};
    }
    matmul(dp.data(), seq, seq, seq, tr.k.data() + h * hd, d, hd, dq.data() + h * hd, d);
    matmul_accumulate_xt_dy(dp.data(), seq, seq, seq, tr.q.data() + h * hd, d, hd, dk.data() + h * hd, d);
  }
  for (std::size_t r = 0; r < seq; ++r) {
    rope.apply(dq.row(r), heads, r, /*inverse=*/true);
    rope.apply(dk.row(r), heads, r, /*inverse=*/true);
  }

  BasicTensor<T> dh_attn({seq, d});
  project_backward(tr.h_attn, w.wq.value, dq, dh_attn, w.wq.grad);
  project_backward(tr.h_attn, w.wk.value, dk, dh_attn, w.wk.grad);
  project_backward(tr.h_attn, w.wv.value, dv, dh_attn, w.wv.grad);

  dx = dy;
  for (std::size_t r = 0; r < seq; ++r) {
    rms_norm_backward<T>(x.row(r), w.attention_norm.value.span(), tr.inv_rms_attn[r], dh_attn.row(r), dx.row(r),
                         w.attention_norm.grad.span());
  }
}

}  // namespace

template <typename T>
SequenceForward<T> forward_sequence(const BasicModelParams<T>& params, std::span<const int> tokens,
                                    const std::vector<bool>& dropped_layers) {
  const ModelConfig& cfg = params.config;
  const auto n_layers = static_cast<std::size_t>(cfg.n_layers);
  if (tokens.empty()) throw ShapeError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_context)) {
    throw ContextOverflow("forward: " + std::to_string(tokens.size()) + " tokens exceed max_context " +
                          std::to_string(cfg.max_context));
  }
  if (dropped_layers.size() != n_layers) throw ShapeError("forward: drop mask must have one entry per layer");
  validate_tokens(cfg, tokens);

  const RopeTable<T>& rope = rope_table<T>(cfg);
  const std::size_t seq = tokens.size();
  const std::size_t d = static_cast<std::size_t>(cfg.dim);

  SequenceForward<T> fwd;
  fwd.tokens.assign(tokens.begin(), tokens.end());
  fwd.dropped = dropped_layers;
  fwd.hidden.x.resize(n_layers + 1);
  fwd.traces.resize(n_layers);

  BasicTensor<T>& x0 = fwd.hidden.x[0];
  x0 = BasicTensor<T>({seq, d});
  for (std::size_t r = 0; r < seq; ++r) {
    auto src = params.token_embedding.value.row(static_cast<std::size_t>(tokens[r]));
    std::copy(src.begin(), src.end(), x0.row(r).begin());
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (dropped_layers[l]) {
      fwd.hidden.x[l + 1] = fwd.hidden.x[l];
      continue;
    }
    layer_forward(params.layers[l], cfg, rope, fwd.hidden.x[l], fwd.hidden.x[l + 1], fwd.traces[l]);
    require_finite(fwd.hidden.x[l + 1], "layer output");
  }
  return fwd;
}

template <typename T>
void backward_sequence(BasicModelParams<T>& params, const SequenceForward<T>& fwd,
                       std::vector<BasicTensor<T>>& hidden_grads) {
  const ModelConfig& cfg = params.config;
  const auto n_layers = static_cast<std::size_t>(cfg.n_layers);
  if (hidden_grads.size() != n_layers + 1) throw ShapeError("backward: need L+1 hidden gradients");
  const RopeTable<T>& rope = rope_table<T>(cfg);
  const std::size_t seq = fwd.tokens.size();
  const std::size_t d = static_cast<std::size_t>(cfg.dim);
  for (auto& g : hidden_grads) {
    if (g.empty()) g = BasicTensor<T>({seq, d});
  }

  for (std::size_t l = n_layers; l-- > 0;) {
    BasicTensor<T>& dout = hidden_grads[l + 1];
    if (fwd.dropped[l]) {
      for (std::size_t i = 0; i < dout.size(); ++i) hidden_grads[l][i] += dout[i];
      continue;
    }
    BasicTensor<T> dx;
    layer_backward(params.layers[l], cfg, rope, fwd.hidden.x[l], fwd.traces[l], dout, dx);
    for (std::size_t i = 0; i < dx.size(); ++i) hidden_grads[l][i] += dx[i];
  }
  const BasicTensor<T>& dx0 = hidden_grads[0];
  for (std::size_t r = 0; r < seq; ++r) {
    auto dst = params.token_embedding.grad.row(static_cast<std::size_t>(fwd.tokens[r]));
    auto src = dx0.row(r);
    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
  }
}

template <typename T>
std::vector<HiddenStates<T>> forward_train(const BasicModelParams<T>& params,
                                           const std::vector<std::vector<int>>& batch, const DropMask& drop_mask) {
  if (drop_mask.n_layers() != params.config.n_layers || drop_mask.batch_size() != static_cast<int>(batch.size())) {
    throw ShapeError("forward_train: drop mask must be [L x batch]");
  }
  std::vector<HiddenStates<T>> out;
  out.reserve(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    out.push_back(std::move(forward_sequence(params, batch[b], drop_mask.sample(static_cast<int>(b))).hidden));
  }
  return out;
}

template <typename T>
void unembed(const BasicModelParams<T>& params, std::span<const T> x, std::span<T> logits) {
  const std::size_t d = static_cast<std::size_t>(params.config.dim);
  const std::size_t v = static_cast<std::size_t>(params.config.vocab);
  if (x.size() != d || logits.size() != v) throw ShapeError("unembed: dimension mismatch");
  std::vector<T> h(d);
  rms_norm<T>(x, params.final_norm.value.span(), h);
  matmul(h.data(), d, 1, d, params.lm_head.value.data(), v, v, logits.data(), v);
}

std::vector<float> unembed(const ModelParams& params, std::span<const float> x) {
  std::vector<float> logits(static_cast<std::size_t>(params.config.vocab));
  unembed<float>(params, x, logits);
  return logits;
}

template <typename T>
BasicTensor<T> unembed_rows(const BasicModelParams<T>& params, const BasicTensor<T>& x) {
  const std::size_t d = static_cast<std::size_t>(params.config.dim);
  const std::size_t v = static_cast<std::size_t>(params.config.vocab);
  BasicTensor<T> h({x.rows(), d});
  for (std::size_t r = 0; r < x.rows(); ++r) rms_norm<T>(x.row(r), params.final_norm.value.span(), h.row(r));
  BasicTensor<T> logits({x.rows(), v});
  matmul(h.data(), d, x.rows(), d, params.lm_head.value.data(), v, v, logits.data(), v);
  return logits;
}

#define LAYERSKIP_INSTANTIATE(T)                                                                              \
  template struct BasicModelParams<T>;                                                                        \
  template const RopeTable<T>& rope_table<T>(const ModelConfig&);                                             \
  template SequenceForward<T> forward_sequence<T>(const BasicModelParams<T>&, std::span<const int>,           \
                                                  const std::vector<bool>&);                                  \
  template void backward_sequence<T>(BasicModelParams<T>&, const SequenceForward<T>&,                         \
                                     std::vector<BasicTensor<T>>&);                                           \
  template std::vector<HiddenStates<T>> forward_train<T>(const BasicModelParams<T>&,                          \
                                                         const std::vector<std::vector<int>>&, const DropMask&); \
  template void unembed<T>(const BasicModelParams<T>&, std::span<const T>, std::span<T>);                     \
  template BasicTensor<T> unembed_rows<T>(const BasicModelParams<T>&, const BasicTensor<T>&);

LAYERSKIP_INSTANTIATE(float)
LAYERSKIP_INSTANTIATE(double)

#undef LAYERSKIP_INSTANTIATE

}  // namespace layerskip
