#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ahbd/ops.hpp"
#include "ahbd/tape.hpp"
#include "ahbd/tensor.hpp"
#include "ahbd/transformer.hpp"

namespace ahbd::test {

using DTensor = BasicTensor<double>;
using DTape = BasicTape<double>;
using DVar = BasicVar<double>;

inline DTensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1, double hi = 1) {
  DTensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

inline Tensor random_float_tensor(std::mt19937_64& rng, Shape shape, double lo = -1, double hi = 1) {
  return random_tensor(rng, std::move(shape), lo, hi).cast<float>();
}

// Central-difference relative error, using a floor on the denominator so
// near-zero gradients compare on an absolute scale.
inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::max(std::abs(analytic), std::abs(numeric)));
}

struct GradCheck {
  double max_rel_err = 0;
  std::size_t checked = 0;
};

// Compares the tape gradient of f(inputs) against central differences for
// every input element. `f` builds a scalar on the tape from leaf vars.
inline GradCheck check_gradients(std::vector<DTensor>& inputs,
                                 const std::function<DVar(DTape&, std::vector<DVar>&)>& f, double h = 1e-4) {
  GradCheck out;
  for (auto& t : inputs) t.clear_grad();
  {
    DTape tape;
    std::vector<DVar> vars;
    for (auto& t : inputs) vars.push_back(tape.leaf(t));
    tape.backward(f(tape, vars));
  }
  auto eval = [&] {
    DTape tape;
    std::vector<DVar> vars;
    for (auto& t : inputs) vars.push_back(tape.input(t));
    return f(tape, vars).value().item();
  };
  for (auto& t : inputs) {
    const std::vector<double> g(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = t[i];
      t[i] = keep + h;
      const double up = eval();
      t[i] = keep - h;
      const double dn = eval();
      t[i] = keep;
      out.max_rel_err = std::max(out.max_rel_err, rel_err(g[i], (up - dn) / (2 * h)));
      ++out.checked;
    }
  }
  return out;
}

// Scalar readout <out, R> with a fixed random R, so every output element
// carries a distinct upstream gradient.
inline DVar readout(DTape& tape, DVar out, const DTensor& r) {
  return ops::sum(ops::mul(out, tape.constant(r)));
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_ff = 12;
  c.vocab_size = 16;
  c.max_seq = 16;
  return c;
}

inline std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t n, int vocab) {
  std::uniform_int_distribution<int> u(0, vocab - 1);
  std::vector<int> t(n);
  for (auto& v : t) v = u(rng);
  return t;
}

}  // namespace ahbd::test
