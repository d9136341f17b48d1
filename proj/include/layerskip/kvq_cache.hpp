#pragma once

#include <functional>
#include <span>
#include <vector>

#include "layerskip/model.hpp"

namespace layerskip {

/// Unified per-session cache: keys/values for every layer plus the hidden
/// states entering the exit layer E ("exit query") for positions that have
/// been drafted but not yet verified. Layers can run ahead of each other:
/// after a draft, layers < E hold more positions than layers >= E.
class KVQCache {
 public:
  explicit KVQCache(const ModelConfig& config);

  int n_layers() const { return n_layers_; }
  int capacity() const { return capacity_; }
  int dim() const { return dim_; }

  int valid_len(int layer) const { return valid_len_.at(static_cast<std::size_t>(layer)); }
  /// Positions whose entries are final in every layer.
  int committed_len() const { return committed_len_; }

  std::span<const float> key(int layer, int pos) const;
  std::span<const float> value(int layer, int pos) const;

  /// Writes K/V for `pos`; `pos` may overwrite an existing entry or extend
  /// the layer by exactly one position.
  void write(int layer, int pos, std::span<const float> k, std::span<const float> v);

  int exit_layer() const { return exit_layer_; }
  int exit_begin() const { return exit_begin_; }
  int exit_count() const { return static_cast<int>(exit_states_.size() / static_cast<std::size_t>(dim_)); }
  bool has_exit_state(int layer, int pos) const;
  std::span<const float> exit_state(int layer, int pos) const;
  /// Appends the hidden state entering `layer` at `pos`. A record that is not
  /// contiguous with the stored run (or targets another layer) replaces it.
  void record_exit_state(int layer, int pos, std::span<const float> x);
  void clear_exit_states();

  /// Marks [0, len) final; every layer must already hold `len` positions.
  void commit(int len);
  /// Discards everything at positions >= len in every layer.
  void truncate(int len);
  void reset();

 private:
  std::size_t offset(int layer, int pos) const;

  int n_layers_;
  int capacity_;
  int dim_;
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
  std::vector<int> valid_len_;
  int committed_len_ = 0;
  int exit_layer_ = -1;
  int exit_begin_ = 0;
  std::vector<float> exit_states_;
};

/// Called with (i, x_i) for each hidden state the incremental pass produces.
using HiddenObserver = std::function<void(int, const Tensor&)>;

/// Runs layers [layer_begin, layer_end) over rows of `x` at positions
/// p0 .. p0+n-1, reading and writing K/V in `cache`. Each row's result is
/// independent of how many rows are processed together.
void forward_layers(const ModelParams& params, Tensor& x, int p0, KVQCache& cache, int layer_begin, int layer_end,
                    const HiddenObserver& observer = {});

/// Embeds `tokens` at positions starting at the first-layer cache length,
/// runs layers 0..E-1 and records x_E as exit states. Returns x_E rows.
Tensor forward_step(const ModelParams& params, std::span<const int> tokens, KVQCache& cache, int exit_layer,
                    const HiddenObserver& observer = {});

/// Resumes from cached exit states at layer E for positions
/// [begin, begin + count) and runs layers E..L-1. Returns x_L rows.
Tensor forward_remainder(const ModelParams& params, KVQCache& cache, int from_layer, int begin, int count);

Tensor embed_rows(const ModelParams& params, std::span<const int> tokens);

}  // namespace layerskip
