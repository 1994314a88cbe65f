#include "ahbd/transformer.hpp"

#include <algorithm>
#include <cmath>

namespace ahbd {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_ff < 1 || vocab_size < 1 || max_seq < 1) {
    throw ContractError("model config: all counts must be >= 1");
  }
  if (d_model != n_heads * d_head) {
    throw ContractError("model config: d_model (" + std::to_string(d_model) + ") != n_heads * d_head (" +
                        std::to_string(n_heads * d_head) + ")");
  }
}

std::string ParamOwner::str() const {
  switch (kind) {
    case OwnerKind::head:
      return "head(" + std::to_string(layer) + "," + std::to_string(head) + ")";
    case OwnerKind::layer:
      return "layer(" + std::to_string(layer) + ")";
    case OwnerKind::global:
      break;
  }
  return "global";
}

template <class Real>
BasicModelParams<Real>::BasicModelParams(const ModelConfig& cfg) : config_(cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto dh = static_cast<std::size_t>(cfg.d_head);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto t = static_cast<std::size_t>(cfg.max_seq);
  auto add = [&](std::string name, ParamOwner owner, Shape shape) {
    entries_.push_back({std::move(name), owner, BasicTensor<Real>(std::move(shape))});
    return entries_.size() - 1;
  };
  auto ones = [&](std::size_t i) {
    for (auto& x : entries_[i].tensor.values()) x = Real{1};
  };
  tok_emb_ = add("tok_emb", ParamOwner::global(), {v, d});
  pos_emb_ = add("pos_emb", ParamOwner::global(), {t, d});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const auto lo = ParamOwner::of_layer(l);
    LayerSlots slots{};
    slots.ln1_g = add(p + "ln1.g", lo, {d});
    ones(slots.ln1_g);
    slots.ln1_b = add(p + "ln1.b", lo, {d});
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::string hp = p + "head" + std::to_string(h) + ".";
      const auto ho = ParamOwner::of_head(l, h);
      HeadSlots hs{};
      hs.wq = add(hp + "wq", ho, {d, dh});
      hs.wk = add(hp + "wk", ho, {d, dh});
      hs.wv = add(hp + "wv", ho, {d, dh});
      hs.wo = add(hp + "wo", ho, {dh, d});
      slots.heads.push_back(hs);
    }
    slots.ln2_g = add(p + "ln2.g", lo, {d});
    ones(slots.ln2_g);
    slots.ln2_b = add(p + "ln2.b", lo, {d});
    slots.w1 = add(p + "mlp.w1", lo, {d, ff});
    slots.b1 = add(p + "mlp.b1", lo, {ff});
    slots.w2 = add(p + "mlp.w2", lo, {ff, d});
    slots.b2 = add(p + "mlp.b2", lo, {d});
    layers_.push_back(std::move(slots));
  }
  lnf_g_ = add("lnf.g", ParamOwner::global(), {d});
  ones(lnf_g_);
  lnf_b_ = add("lnf.b", ParamOwner::global(), {d});
  w_out_ = add("w_out", ParamOwner::global(), {d, v});
}

template <class Real>
BasicModelParams<Real> BasicModelParams<Real>::init(const ModelConfig& cfg, const InitOptions& opt) {
  BasicModelParams p(cfg);
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, opt.std);
  for (auto& e : p.entries_) {
    // Vectors are layer-norm parameters or biases: keep their defaults.
    if (e.tensor.rank() != 2) continue;
    for (auto& x : e.tensor.values()) x = static_cast<Real>(normal(rng));
  }
  return p;
}

template <class Real>
std::vector<std::size_t> BasicModelParams<Real>::head_entries(int l, int h) const {
  const auto& hs = head(l, h);
  return {hs.wq, hs.wk, hs.wv, hs.wo};
}

template <class Real>
std::size_t BasicModelParams<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

template <class Real>
void BasicModelParams<Real>::clear_grads() {
  for (auto& e : entries_) e.tensor.clear_grad();
}

template <class Real>
bool BasicModelParams<Real>::operator==(const BasicModelParams& o) const {
  if (!(config_ == o.config_) || entries_.size() != o.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!(entries_[i].tensor == o.entries_[i].tensor)) return false;
  }
  return true;
}

template class BasicModelParams<float>;
template class BasicModelParams<double>;

namespace {

template <class Real>
void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.empty()) throw LengthError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq)) {
    throw LengthError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  for (int id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw IndexError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
    }
  }
}

}  // namespace

template <class Real>
BasicForwardResult<Real> forward(BasicTape<Real>& tape, BasicModelParams<Real>& params, std::span<const int> tokens,
                                 const ForwardOptions& opt) {
  using V = BasicVar<Real>;
  const ModelConfig& cfg = params.config();
  check_tokens<Real>(cfg, tokens);
  if (opt.grads == GradMode::mask && opt.grad_mask.size() != params.size()) {
    throw ContractError("forward: grad mask has " + std::to_string(opt.grad_mask.size()) + " entries, model has " +
                        std::to_string(params.size()));
  }
  if (!opt.head_scale.empty() && opt.head_scale.size() != static_cast<std::size_t>(cfg.total_heads())) {
    throw ContractError("forward: head_scale must have one entry per head");
  }
  const bool capture = opt.capture || opt.watch_head_outputs;
  const std::size_t T = tokens.size();

  auto param = [&](std::size_t i) -> V {
    const bool rg = opt.grads == GradMode::all || (opt.grads == GradMode::mask && opt.grad_mask[i] != 0);
    return rg ? tape.leaf(params.tensor(i), true) : tape.input(params.tensor(i));
  };

  BasicForwardResult<Real> result;
  std::vector<int> positions(T);
  for (std::size_t t = 0; t < T; ++t) positions[t] = static_cast<int>(t);
  V x = ops::add(ops::embedding(param(params.tok_emb()), tokens),
                 ops::embedding(param(params.pos_emb()), std::span<const int>(positions)));

  const auto mask = ops::AttentionMask::causal(T);
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& ls = params.layer(l);
    V h = ops::layer_norm(x, param(ls.ln1_g), param(ls.ln1_b));
    std::optional<V> attn_out;
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      const auto& hs = ls.heads[static_cast<std::size_t>(hd)];
      V q = ops::matmul(h, param(hs.wq));
      V k = ops::matmul(h, param(hs.wk));
      V v = ops::matmul(h, param(hs.wv));
      V a = ops::softmax_rows(ops::scale(ops::matmul_nt(q, k), score_scale), mask);
      V ho = ops::matmul(a, v);
      if (opt.watch_head_outputs) tape.watch(ho);
      if (capture) result.records.push_back({l, hd, a, ho});
      V contrib = ho;
      if (!opt.head_scale.empty()) {
        const double s = opt.head_scale[static_cast<std::size_t>(l * cfg.n_heads + hd)];
        if (s != 1.0) contrib = ops::scale(ho, s);
      }
      V o = ops::matmul(contrib, param(hs.wo));
      attn_out = attn_out ? ops::add(*attn_out, o) : o;
    }
    x = ops::add(x, *attn_out);
    V h2 = ops::layer_norm(x, param(ls.ln2_g), param(ls.ln2_b));
    V ff = ops::gelu(ops::add_row(ops::matmul(h2, param(ls.w1)), param(ls.b1)));
    x = ops::add(x, ops::add_row(ops::matmul(ff, param(ls.w2)), param(ls.b2)));
  }
  V hf = ops::layer_norm(x, param(params.lnf_g()), param(params.lnf_b()));
  result.logits = ops::matmul(hf, param(params.w_out()));
  return result;
}

template BasicForwardResult<float> forward(BasicTape<float>&, BasicModelParams<float>&, std::span<const int>,
                                           const ForwardOptions&);
template BasicForwardResult<double> forward(BasicTape<double>&, BasicModelParams<double>&, std::span<const int>,
                                            const ForwardOptions&);

template <class Real>
BasicTensor<Real> forward_logits(const BasicModelParams<Real>& params, std::span<const int> tokens) {
  BasicTape<Real> tape;
  // GradMode::none only reads parameters through tape.input().
  auto& mutable_params = const_cast<BasicModelParams<Real>&>(params);
  auto res = forward(tape, mutable_params, tokens, {});
  return res.logits.value();
}

template BasicTensor<float> forward_logits(const BasicModelParams<float>&, std::span<const int>);
template BasicTensor<double> forward_logits(const BasicModelParams<double>&, std::span<const int>);

std::vector<AttentionRecord> materialize(const std::vector<BasicTapeRecord<float>>& records) {
  std::vector<AttentionRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.layer, r.head, r.attn.value(), r.head_out.value()});
  return out;
}

template <class Real>
int argmax_row(const BasicTensor<Real>& logits, std::size_t row) {
  const std::size_t n = logits.cols();
  int best = 0;
  for (std::size_t j = 1; j < n; ++j) {
    if (logits.at(row, j) > logits.at(row, static_cast<std::size_t>(best))) best = static_cast<int>(j);
  }
  return best;
}

template int argmax_row(const BasicTensor<float>&, std::size_t);
template int argmax_row(const BasicTensor<double>&, std::size_t);

int predict_next(const ModelParams& params, std::span<const int> tokens) {
  const auto logits = forward_logits(params, tokens);
  return argmax_row(logits, tokens.size() - 1);
}

Generation generate(const ModelParams& params, std::span<const int> prompt, std::size_t max_new) {
  if (prompt.empty()) throw ContractError("generate: empty prompt");
  const auto& cfg = params.config();
  if (prompt.size() + max_new > static_cast<std::size_t>(cfg.max_seq)) {
    throw LengthError("generate: prompt (" + std::to_string(prompt.size()) + ") + max_new (" +
                      std::to_string(max_new) + ") exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  Generation g;
  g.tokens.assign(prompt.begin(), prompt.end());
  g.prompt_len = prompt.size();
  for (std::size_t i = 0; i < max_new; ++i) g.tokens.push_back(predict_next(params, g.tokens));
  g.generated_len = max_new;
  Tape tape;
  ForwardOptions opt;
  opt.capture = true;
  auto res = forward(tape, const_cast<ModelParams&>(params), std::span<const int>(g.tokens), opt);
  g.records = materialize(res.records);
  return g;
}

}  // namespace ahbd
