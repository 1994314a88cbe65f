#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ahbd/error.hpp"
#include "ahbd/ops.hpp"
#include "ahbd/tape.hpp"
#include "ahbd/tensor.hpp"

namespace ahbd {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 8;
  int d_model = 64;
  int d_head = 8;
  int d_ff = 128;
  int vocab_size = 64;
  int max_seq = 64;

  void validate() const;
  int total_heads() const { return n_layers * n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

struct HeadId {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadId&) const = default;
};

enum class OwnerKind : std::uint8_t { head, layer, global };

// Which partition of the model a parameter belongs to. Head-owned tensors
// can be frozen or given their own learning rate independently of siblings.
struct ParamOwner {
  OwnerKind kind = OwnerKind::global;
  int layer = -1;
  int head = -1;

  static ParamOwner of_head(int l, int h) { return {OwnerKind::head, l, h}; }
  static ParamOwner of_layer(int l) { return {OwnerKind::layer, l, -1}; }
  static ParamOwner global() { return {OwnerKind::global, -1, -1}; }
  bool operator==(const ParamOwner&) const = default;
  std::string str() const;
};

struct InitOptions {
  std::uint64_t seed = 0;
  double std = 0.1;
};

// Tensors of the decoder, stored in ownership-table order:
//   tok_emb, pos_emb,
//   for each layer: ln1.g, ln1.b, for each head: wq, wk, wv, wo,
//                   ln2.g, ln2.b, mlp.w1, mlp.b1, mlp.w2, mlp.b2,
//   lnf.g, lnf.b, w_out.
// The checkpoint format serializes entries in exactly this order.
template <class Real>
class BasicModelParams {
 public:
  struct Entry {
    std::string name;
    ParamOwner owner;
    BasicTensor<Real> tensor;
  };
  struct HeadSlots {
    std::size_t wq, wk, wv, wo;
  };
  struct LayerSlots {
    std::size_t ln1_g, ln1_b;
    std::vector<HeadSlots> heads;
    std::size_t ln2_g, ln2_b, w1, b1, w2, b2;
  };

  BasicModelParams() = default;

  // Zero-initialized tensors with layer-norm scales at 1.
  explicit BasicModelParams(const ModelConfig& cfg);

  static BasicModelParams init(const ModelConfig& cfg, const InitOptions& opt);

  const ModelConfig& config() const { return config_; }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  BasicTensor<Real>& tensor(std::size_t i) { return entries_[i].tensor; }
  const BasicTensor<Real>& tensor(std::size_t i) const { return entries_[i].tensor; }

  const LayerSlots& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
  const HeadSlots& head(int l, int h) const { return layer(l).heads.at(static_cast<std::size_t>(h)); }
  std::size_t tok_emb() const { return tok_emb_; }
  std::size_t pos_emb() const { return pos_emb_; }
  std::size_t lnf_g() const { return lnf_g_; }
  std::size_t lnf_b() const { return lnf_b_; }
  std::size_t w_out() const { return w_out_; }

  // Entry indices owned by head (l, h).
  std::vector<std::size_t> head_entries(int l, int h) const;

  std::size_t parameter_count() const;
  void clear_grads();

  template <class Other>
  BasicModelParams<Other> cast() const {
    BasicModelParams<Other> out(config_);
    for (std::size_t i = 0; i < entries_.size(); ++i) out.tensor(i) = entries_[i].tensor.template cast<Other>();
    return out;
  }

  bool operator==(const BasicModelParams& o) const;

 private:
  ModelConfig config_;
  std::vector<Entry> entries_;
  std::vector<LayerSlots> layers_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0, w_out_ = 0;
};

using ModelParams = BasicModelParams<float>;

// Per-head attention matrix A (T x T, lower-triangular, row-stochastic) and
// head output H = A V (T x d_head), as plain values.
struct AttentionRecord {
  int layer = 0;
  int head = 0;
  Tensor attn;
  Tensor head_out;
};

// Same as AttentionRecord but still attached to the tape, so losses built
// on attention can be backpropagated.
template <class Real>
struct BasicTapeRecord {
  int layer = 0;
  int head = 0;
  BasicVar<Real> attn;
  BasicVar<Real> head_out;
};

template <class Real>
struct BasicForwardResult {
  BasicVar<Real> logits;  // [T x V]
  std::vector<BasicTapeRecord<Real>> records;
};

enum class GradMode { none, all, mask };

struct ForwardOptions {
  bool capture = false;
  // Make every head output a differentiable node (implies capture).
  bool watch_head_outputs = false;
  GradMode grads = GradMode::none;
  // Entry-indexed flags, used with GradMode::mask.
  std::vector<std::uint8_t> grad_mask;
  // Optional multiplier per head (layer-major) applied to H before the
  // output projection; empty means 1 everywhere.
  std::vector<double> head_scale;
};

template <class Real>
BasicForwardResult<Real> forward(BasicTape<Real>& tape, BasicModelParams<Real>& params, std::span<const int> tokens,
                                 const ForwardOptions& opt = {});

// Value-only forward; never touches parameter gradients.
template <class Real>
BasicTensor<Real> forward_logits(const BasicModelParams<Real>& params, std::span<const int> tokens);

std::vector<AttentionRecord> materialize(const std::vector<BasicTapeRecord<float>>& records);

struct Generation {
  std::vector<int> tokens;  // prompt followed by generated tokens
  std::size_t prompt_len = 0;
  std::size_t generated_len = 0;
  std::vector<AttentionRecord> records;  // over the full sequence, layer-major
};

// Greedy decoding; ties in the argmax resolve to the lowest token id.
Generation generate(const ModelParams& params, std::span<const int> prompt, std::size_t max_new);

// Greedy next token after the sequence (the answer token for a prompt).
int predict_next(const ModelParams& params, std::span<const int> tokens);

template <class Real>
int argmax_row(const BasicTensor<Real>& logits, std::size_t row);

}  // namespace ahbd
