#include <random>
#include <set>
#include <sstream>

#include "ahbd/checkpoint.hpp"
#include "ahbd/training.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace ahbd;
using namespace ahbd::test;

namespace {

ModelParams tiny_model(std::uint64_t seed = 1) { return ModelParams::init(tiny_config(), {seed, 0.3}); }

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.d_model = 9;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = tiny_config();
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("every head owns four disjoint projection tensors") {
  const auto p = tiny_model();
  std::set<std::size_t> seen;
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 2; ++h) {
      const auto e = p.head_entries(l, h);
      CHECK(e.size() == 4);
      for (auto i : e) {
        CHECK(p.entries()[i].owner == ParamOwner::of_head(l, h));
        CHECK(seen.insert(i).second);
      }
    }
}

TEST_CASE("attention rows are causal and stochastic") {
  const auto p = tiny_model();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto toks = random_tokens(rng, 3 + trial, 16);
    const auto g = generate(p, toks, 2);
    CHECK(g.records.size() == 4);
    for (const auto& r : g.records) {
      const std::size_t T = g.tokens.size();
      REQUIRE(r.attn.shape() == Shape{T, T});
      for (std::size_t i = 0; i < T; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < T; ++j) {
          if (j > i) CHECK(r.attn.at(i, j) == 0.0f);
          s += r.attn.at(i, j);
        }
        CHECK(std::abs(s - 1.0) <= 1e-5);
      }
    }
  }
}

TEST_CASE("forward input validation") {
  auto p = tiny_model();
  Tape tape;
  const std::vector<int> empty;
  CHECK_THROWS_AS(forward(tape, p, empty), LengthError);
  const std::vector<int> bad{0, 16};
  CHECK_THROWS_AS(forward(tape, p, bad), IndexError);
  const std::vector<int> too_long(17, 1);
  CHECK_THROWS_AS(forward(tape, p, too_long), LengthError);
  const std::vector<int> prompt(15, 1);
  CHECK_THROWS_AS(generate(p, prompt, 2), LengthError);
}

TEST_CASE("greedy decoding is deterministic and consistent with forward_logits") {
  const auto p = tiny_model(9);
  std::mt19937_64 rng(6);
  const auto toks = random_tokens(rng, 6, 16);
  const auto a = generate(p, toks, 3);
  const auto b = generate(p, toks, 3);
  CHECK(a.tokens == b.tokens);
  const auto logits = forward_logits(p, std::span<const int>(toks));
  CHECK(predict_next(p, toks) == argmax_row(logits, toks.size() - 1));
  CHECK(a.tokens[toks.size()] == predict_next(p, toks));
}

TEST_CASE("finite differences: full model answer loss in double precision") {
  auto p = BasicModelParams<double>::init(tiny_config(), {3, 0.3});
  std::mt19937_64 rng(7);
  const auto toks = random_tokens(rng, 5, 16);
  const int target = 2;
  auto loss_of = [&](BasicModelParams<double>& m, GradMode mode) {
    BasicTape<double> tape;
    ForwardOptions opt;
    opt.grads = mode;
    auto fwd = forward(tape, m, std::span<const int>(toks), opt);
    auto loss = answer_loss(fwd, toks.size(), target);
    if (mode != GradMode::none) tape.backward(loss);
    return loss.value().item();
  };
  p.clear_grads();
  loss_of(p, GradMode::all);
  const double h = 1e-4;
  double worst = 0;
  std::uniform_int_distribution<std::size_t> pick_entry(0, p.size() - 1);
  for (int k = 0; k < 60; ++k) {
    const auto e = pick_entry(rng);
    auto& t = p.tensor(e);
    if (!t.has_grad()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, t.size() - 1);
    const auto i = pick(rng);
    const double g = t.grad()[i];
    const double keep = t[i];
    t[i] = keep + h;
    const double up = loss_of(p, GradMode::none);
    t[i] = keep - h;
    const double dn = loss_of(p, GradMode::none);
    t[i] = keep;
    worst = std::max(worst, rel_err(g, (up - dn) / (2 * h)));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("checkpoint round trip is exact") {
  const auto p = tiny_model(4);
  std::stringstream ss;
  save_checkpoint(p, ss);
  const auto q = load_checkpoint(ss);
  CHECK(q == p);
  CHECK(q.config() == p.config());
}

TEST_CASE("checkpoint rejects corrupt input") {
  const auto p = tiny_model(4);
  std::stringstream ss;
  save_checkpoint(p, ss);
  const std::string bytes = ss.str();
  std::stringstream bad_magic("XXXX" + bytes.substr(4));
  CHECK_THROWS_AS(load_checkpoint(bad_magic), FormatError);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_checkpoint(truncated), FormatError);
  std::stringstream trailing(bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(trailing), FormatError);
  CHECK_THROWS_AS(load_checkpoint(std::filesystem::path("/nonexistent/model.ckpt")), FormatError);
}

TEST_CASE("sgd_apply moves only entries with gradient and non-zero rate") {
  auto p = tiny_model(2);
  const auto before = p;
  const std::vector<int> prompt{3, 4, 5, 0};
  std::vector<std::uint8_t> mask(p.size(), 0);
  const auto heads = p.head_entries(1, 0);
  for (auto e : heads) mask[e] = 1;
  accumulate_sample_grad(p, prompt, 1, GradMode::mask, mask);
  std::vector<double> lr(p.size(), 0.5);
  lr[heads[0]] = 0.0;
  sgd_apply(p, lr);
  for (std::size_t e = 0; e < p.size(); ++e) {
    const bool should_move = mask[e] && e != heads[0];
    if (!should_move) CHECK(p.tensor(e) == before.tensor(e));
    CHECK_FALSE(p.tensor(e).has_grad());
  }
  CHECK_FALSE(p.tensor(heads[1]) == before.tensor(heads[1]));
}

TEST_CASE("run_sgd contracts") {
  auto p = tiny_model();
  std::vector<double> lr(p.size(), 0.1);
  std::vector<Sample> none;
  CHECK_THROWS_AS(run_sgd(p, none, {1, 4, 0}, lr), ContractError);
  std::vector<Sample> one{{{3, 4, 0}, 1, false, TriggerKind::none}};
  CHECK_THROWS_AS(run_sgd(p, one, {1, 0, 0}, lr), ContractError);
  std::vector<double> short_lr(2, 0.1);
  CHECK_THROWS_AS(run_sgd(p, one, {1, 1, 0}, short_lr), ContractError);
}

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const BasicTensor<double>& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

Mat mul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat layer_norm(const Mat& x, const BasicTensor<double>& g, const BasicTensor<double>& b) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mu = 0, var = 0;
    for (double v : x[i]) mu += v / static_cast<double>(x[i].size());
    for (double v : x[i]) var += (v - mu) * (v - mu) / static_cast<double>(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return y;
}

// Straightforward pre-LN decoder written without the tape.
Mat naive_logits(const BasicModelParams<double>& p, const std::vector<int>& toks) {
  const auto& cfg = p.config();
  const std::size_t T = toks.size(), d = static_cast<std::size_t>(cfg.d_model);
  Mat x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j)
      x[t][j] = p.tensor(p.tok_emb()).at(static_cast<std::size_t>(toks[t]), j) + p.tensor(p.pos_emb()).at(t, j);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& ls = p.layer(l);
    const Mat h = layer_norm(x, p.tensor(ls.ln1_g), p.tensor(ls.ln1_b));
    Mat add(T, std::vector<double>(d, 0.0));
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      const auto& hs = p.head(l, hd);
      const Mat q = mul(h, to_mat(p.tensor(hs.wq))), k = mul(h, to_mat(p.tensor(hs.wk)));
      const Mat v = mul(h, to_mat(p.tensor(hs.wv)));
      Mat a(T, std::vector<double>(T, 0.0));
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300, z = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          s[j] = 0;
          for (std::size_t c = 0; c < q[i].size(); ++c) s[j] += q[i][c] * k[j][c];
          s[j] /= std::sqrt(static_cast<double>(cfg.d_head));
          mx = std::max(mx, s[j]);
        }
        for (std::size_t j = 0; j <= i; ++j) z += std::exp(s[j] - mx);
        for (std::size_t j = 0; j <= i; ++j) a[i][j] = std::exp(s[j] - mx) / z;
      }
      const Mat o = mul(mul(a, v), to_mat(p.tensor(hs.wo)));
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < d; ++j) add[i][j] += o[i][j];
    }
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += add[i][j];
    Mat f = mul(layer_norm(x, p.tensor(ls.ln2_g), p.tensor(ls.ln2_b)), to_mat(p.tensor(ls.w1)));
    for (auto& row : f)
      for (std::size_t j = 0; j < row.size(); ++j) {
        const double u = row[j] + p.tensor(ls.b1)[j];
        row[j] = 0.5 * u * (1 + std::tanh(std::sqrt(2 / M_PI) * (u + 0.044715 * u * u * u)));
      }
    const Mat m = mul(f, to_mat(p.tensor(ls.w2)));
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += m[i][j] + p.tensor(ls.b2)[j];
  }
  return mul(layer_norm(x, p.tensor(p.lnf_g()), p.tensor(p.lnf_b())), to_mat(p.tensor(p.w_out())));
}

}  // namespace

TEST_CASE("forward matches a naive re-implementation") {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 32;
  c.d_head = 8;
  c.d_ff = 64;
  c.vocab_size = 16;
  c.max_seq = 16;
  const auto pf = ModelParams::init(c, {17, 0.2});
  const auto p = pf.cast<double>();
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const auto toks = random_tokens(rng, 4 + 2 * static_cast<std::size_t>(trial), 16);
    const auto ref = naive_logits(p, toks);
    const auto got = forward_logits(pf, std::span<const int>(toks));
    double worst = 0;
    for (std::size_t i = 0; i < ref.size(); ++i)
      for (std::size_t j = 0; j < ref[i].size(); ++j) worst = std::max(worst, std::abs(ref[i][j] - got.at(i, j)));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("equal scores give uniform causal attention") {
  auto p = tiny_model(3);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 2; ++h) {
      auto& wq = p.tensor(p.head(l, h).wq);
      for (auto& v : wq.values()) v = 0;
    }
  const std::vector<int> toks{1, 2, 3, 4, 5};
  const auto g = generate(p, toks, 0);
  CHECK(g.tokens == toks);
  CHECK(g.generated_len == 0);
  for (const auto& r : g.records) {
    REQUIRE(r.attn.rows() == 5);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j <= i; ++j) CHECK(r.attn.at(i, j) == doctest::Approx(1.0 / static_cast<double>(i + 1)));
  }
  const std::vector<int> five{1, 2, 3, 4, 5};
  const auto g3 = generate(p, five, 3);
  CHECK(g3.records.front().attn.rows() == 8);
}
