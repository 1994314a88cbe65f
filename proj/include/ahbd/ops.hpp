#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ahbd/error.hpp"
#include "ahbd/tape.hpp"
#include "ahbd/tensor.hpp"

// Differentiable operations over BasicTape. Every op validates shapes,
// computes its value eagerly and, when any input requires grad, records a
// closure that accumulates input gradients during backward().
namespace ahbd::ops {

// Additive penalty applied to disallowed logits before the softmax; the
// corresponding probabilities are then set to exactly zero.
inline constexpr double kMaskPenalty = -1e9;

class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t rows, std::size_t cols, bool fill)
      : rows_(rows), cols_(cols), allowed_(rows * cols, fill ? 1 : 0) {}

  // allowed(t, k) iff k <= t.
  static AttentionMask causal(std::size_t n) {
    AttentionMask m(n, n, false);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t k = 0; k <= t; ++k) m.set(t, k, true);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool allowed(std::size_t r, std::size_t c) const { return allowed_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { allowed_[r * cols_ + c] = v ? 1 : 0; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> allowed_;
};

namespace detail {

template <class Real>
void require_same_tape(BasicVar<Real> a, BasicVar<Real> b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands on different tapes");
}

template <class Real>
void require_rank2(const BasicTensor<Real>& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

template <class Real>
void require_same_shape(const BasicTensor<Real>& a, const BasicTensor<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace detail

// [m x k] * [k x n] -> [m x n]
template <class Real>
BasicVar<Real> matmul(BasicVar<Real> a, BasicVar<Real> b) {
  detail::require_same_tape(a, b, "matmul");
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_rank2(A, "matmul");
  detail::require_rank2(B, "matmul");
  const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
  if (B.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(A.shape()) + " x " +
                         shape_string(B.shape()));
  }
  BasicTensor<Real> C({m, n});
  Real* c = C.data();
  const Real* pa = A.data();
  const Real* pb = B.data();
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = pa[i * k + p];
      const Real* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  const std::uint32_t ia = a.id, ib = b.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(C), rg, [ia, ib, out, m, k, n](BasicTape<Real>& t) {
    const Real* dc = t.grad_of(out).data();
    const Real* pa = t.value_of(ia).data();
    const Real* pb = t.value_of(ib).data();
    if (t.requires_grad(ia)) {
      Real* da = t.grad_buffer(ia).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          Real acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += dc[i * n + j] * pb[p * n + j];
          da[i * k + p] += acc;
        }
    }
    if (t.requires_grad(ib)) {
      Real* db = t.grad_buffer(ib).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const Real aip = pa[i * k + p];
          for (std::size_t j = 0; j < n; ++j) db[p * n + j] += aip * dc[i * n + j];
        }
    }
  });
}

// [m x k] * [n x k]^T -> [m x n]
template <class Real>
BasicVar<Real> matmul_nt(BasicVar<Real> a, BasicVar<Real> b) {
  detail::require_same_tape(a, b, "matmul_nt");
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_rank2(A, "matmul_nt");
  detail::require_rank2(B, "matmul_nt");
  const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[0];
  if (B.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree " + shape_string(A.shape()) + " x " +
                         shape_string(B.shape()) + "^T");
  }
  BasicTensor<Real> C({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      Real acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
      C[i * n + j] = acc;
    }
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  const std::uint32_t ia = a.id, ib = b.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(C), rg, [ia, ib, out, m, k, n](BasicTape<Real>& t) {
    const Real* dc = t.grad_of(out).data();
    const Real* pa = t.value_of(ia).data();
    const Real* pb = t.value_of(ib).data();
    if (t.requires_grad(ia)) {
      Real* da = t.grad_buffer(ia).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const Real g = dc[i * n + j];
          for (std::size_t p = 0; p < k; ++p) da[i * k + p] += g * pb[j * k + p];
        }
    }
    if (t.requires_grad(ib)) {
      Real* db = t.grad_buffer(ib).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const Real g = dc[i * n + j];
          for (std::size_t p = 0; p < k; ++p) db[j * k + p] += g * pa[i * k + p];
        }
    }
  });
}

namespace detail {

// Shared body of add/sub: out = a + sign * b.
template <class Real>
BasicVar<Real> add_signed(BasicVar<Real> a, BasicVar<Real> b, Real sign, const char* op) {
  require_same_tape(a, b, op);
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& B = b.value();
  require_same_shape(A, B, op);
  BasicTensor<Real> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] + sign * B[i];
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  const std::uint32_t ia = a.id, ib = b.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(C), rg, [ia, ib, out, sign](BasicTape<Real>& t) {
    auto dc = t.grad_of(out);
    if (t.requires_grad(ia)) {
      auto da = t.grad_buffer(ia);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dc[i];
    }
    if (t.requires_grad(ib)) {
      auto db = t.grad_buffer(ib);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += sign * dc[i];
    }
  });
}

}  // namespace detail

template <class Real>
BasicVar<Real> add(BasicVar<Real> a, BasicVar<Real> b) {
  return detail::add_signed(a, b, Real{1}, "add");
}

template <class Real>
BasicVar<Real> sub(BasicVar<Real> a, BasicVar<Real> b) {
  return detail::add_signed(a, b, Real{-1}, "sub");
}

// Elementwise product.
template <class Real>
BasicVar<Real> mul(BasicVar<Real> a, BasicVar<Real> b) {
  detail::require_same_tape(a, b, "mul");
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_same_shape(A, B, "mul");
  BasicTensor<Real> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  const std::uint32_t ia = a.id, ib = b.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(C), rg, [ia, ib, out](BasicTape<Real>& t) {
    auto dc = t.grad_of(out);
    const auto& A = t.value_of(ia);
    const auto& B = t.value_of(ib);
    if (t.requires_grad(ia)) {
      auto da = t.grad_buffer(ia);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dc[i] * B[i];
    }
    if (t.requires_grad(ib)) {
      auto db = t.grad_buffer(ib);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dc[i] * A[i];
    }
  });
}

template <class Real>
BasicVar<Real> scale(BasicVar<Real> a, double factor) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  const Real c = static_cast<Real>(factor);
  BasicTensor<Real> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * c;
  const std::uint32_t ia = a.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(C), tape.requires_grad(a), [ia, out, c](BasicTape<Real>& t) {
    auto dc = t.grad_of(out);
    auto da = t.grad_buffer(ia);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += dc[i] * c;
  });
}

// [m x n] + bias[n] broadcast over rows.
template <class Real>
BasicVar<Real> add_row(BasicVar<Real> a, BasicVar<Real> bias) {
  detail::require_same_tape(a, bias, "add_row");
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& Bv = bias.value();
  detail::require_rank2(A, "add_row");
  const std::size_t m = A.shape()[0], n = A.shape()[1];
  if (Bv.size() != n) throw DimensionError("add_row: bias length " + std::to_string(Bv.size()) + " vs " + std::to_string(n));
  BasicTensor<Real> C(A.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C[i * n + j] = A[i * n + j] + Bv[j];
  const bool rg = tape.requires_grad(a) || tape.requires_grad(bias);
  const std::uint32_t ia = a.id, ib = bias.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(C), rg, [ia, ib, out, m, n](BasicTape<Real>& t) {
    auto dc = t.grad_of(out);
    if (t.requires_grad(ia)) {
      auto da = t.grad_buffer(ia);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dc[i];
    }
    if (t.requires_grad(ib)) {
      auto db = t.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += dc[i * n + j];
    }
  });
}

// tanh approximation of GELU.
template <class Real>
BasicVar<Real> gelu(BasicVar<Real> a) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  BasicTensor<Real> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) {
    const double x = A[i];
    C[i] = static_cast<Real>(0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x))));
  }
  const std::uint32_t ia = a.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(C), tape.requires_grad(a), [ia, out](BasicTape<Real>& t) {
    auto dc = t.grad_of(out);
    const auto& A = t.value_of(ia);
    auto da = t.grad_buffer(ia);
    for (std::size_t i = 0; i < da.size(); ++i) {
      const double x = A[i];
      const double u = kC * (x + 0.044715 * x * x * x);
      const double th = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
      const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
      da[i] += static_cast<Real>(dc[i] * d);
    }
  });
}

// Row-wise layer normalization with learned scale and offset of length n.
template <class Real>
BasicVar<Real> layer_norm(BasicVar<Real> x, BasicVar<Real> gamma, BasicVar<Real> beta, double eps = 1e-5) {
  detail::require_same_tape(x, gamma, "layer_norm");
  detail::require_same_tape(x, beta, "layer_norm");
  auto& tape = *x.tape;
  const auto& X = x.value();
  detail::require_rank2(X, "layer_norm");
  const std::size_t m = X.shape()[0], n = X.shape()[1];
  if (gamma.value().size() != n || beta.value().size() != n) throw DimensionError("layer_norm: gamma/beta length mismatch");
  const auto& G = gamma.value();
  const auto& Bt = beta.value();
  BasicTensor<Real> Y(X.shape());
  // Normalized input and inverse std per row are needed again in backward.
  std::vector<Real> xhat(m * n);
  std::vector<double> rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += X[i * n + j];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = X[i * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const Real h = static_cast<Real>((X[i * n + j] - mean) * rstd[i]);
      xhat[i * n + j] = h;
      Y[i * n + j] = h * G[j] + Bt[j];
    }
  }
  const bool rg = tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
  const std::uint32_t ix = x.id, ig = gamma.id, ib = beta.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(Y), rg,
                     [ix, ig, ib, out, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](BasicTape<Real>& t) {
                       auto dy = t.grad_of(out);
                       const auto& G = t.value_of(ig);
                       if (t.requires_grad(ig)) {
                         auto dg = t.grad_buffer(ig);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) dg[j] += dy[i * n + j] * xhat[i * n + j];
                       }
                       if (t.requires_grad(ib)) {
                         auto db = t.grad_buffer(ib);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
                       }
                       if (t.requires_grad(ix)) {
                         auto dx = t.grad_buffer(ix);
                         for (std::size_t i = 0; i < m; ++i) {
                           double mean_d = 0, mean_dx = 0;
                           for (std::size_t j = 0; j < n; ++j) {
                             const double d = static_cast<double>(dy[i * n + j]) * G[j];
                             mean_d += d;
                             mean_dx += d * xhat[i * n + j];
                           }
                           mean_d /= static_cast<double>(n);
                           mean_dx /= static_cast<double>(n);
                           for (std::size_t j = 0; j < n; ++j) {
                             const double d = static_cast<double>(dy[i * n + j]) * G[j];
                             dx[i * n + j] += static_cast<Real>(rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx));
                           }
                         }
                       }
                     });
}

// Row softmax restricted to allowed positions. Disallowed entries receive
// kMaskPenalty before exponentiation and are then written as exact zeros.
template <class Real>
BasicVar<Real> softmax_rows(BasicVar<Real> scores, const AttentionMask& mask) {
  auto& tape = *scores.tape;
  const auto& S = scores.value();
  detail::require_rank2(S, "softmax_rows");
  const std::size_t m = S.shape()[0], n = S.shape()[1];
  if (mask.rows() != m || mask.cols() != n) {
    throw DimensionError("softmax_rows: mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                         " does not match scores " + shape_string(S.shape()));
  }
  BasicTensor<Real> P(S.shape());
  std::vector<double> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    bool any = false;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const bool ok = mask.allowed(i, j);
      any = any || ok;
      row[j] = static_cast<double>(S[i * n + j]) + (ok ? 0.0 : kMaskPenalty);
      mx = std::max(mx, row[j]);
    }
    if (!any) throw DegenerateError("softmax_rows: row " + std::to_string(i) + " has no allowed position");
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) P[i * n + j] = mask.allowed(i, j) ? static_cast<Real>(row[j] / z) : Real{0};
  }
  const std::uint32_t is = scores.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(P), tape.requires_grad(scores), [is, out, m, n](BasicTape<Real>& t) {
    auto dp = t.grad_of(out);
    const auto& P = t.value_of(out);
    auto ds = t.grad_buffer(is);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(P[i * n + j]) * dp[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        ds[i * n + j] += static_cast<Real>(P[i * n + j] * (dp[i * n + j] - dot));
      }
    }
  });
}

// Rows of an embedding table [V x d] selected by id -> [T x d].
template <class Real>
BasicVar<Real> embedding(BasicVar<Real> table, std::span<const int> ids) {
  auto& tape = *table.tape;
  const auto& W = table.value();
  detail::require_rank2(W, "embedding");
  const std::size_t vocab = W.shape()[0], d = W.shape()[1];
  BasicTensor<Real> E({ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[t]) + " outside table of " + std::to_string(vocab));
    }
    std::copy_n(W.data() + static_cast<std::size_t>(ids[t]) * d, d, E.data() + t * d);
  }
  const std::uint32_t iw = table.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  std::vector<int> rows(ids.begin(), ids.end());
  return tape.record(std::move(E), tape.requires_grad(table), [iw, out, d, rows = std::move(rows)](BasicTape<Real>& t) {
    auto de = t.grad_of(out);
    auto dw = t.grad_buffer(iw);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) dw[static_cast<std::size_t>(rows[r]) * d + j] += de[r * d + j];
  });
}

// Rows [begin, begin+count) of a matrix.
template <class Real>
BasicVar<Real> slice_rows(BasicVar<Real> x, std::size_t begin, std::size_t count) {
  auto& tape = *x.tape;
  const auto& X = x.value();
  detail::require_rank2(X, "slice_rows");
  const std::size_t m = X.shape()[0], n = X.shape()[1];
  if (begin + count > m) throw IndexError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) + ") outside " + std::to_string(m));
  BasicTensor<Real> Y({count, n});
  std::copy_n(X.data() + begin * n, count * n, Y.data());
  const std::uint32_t ix = x.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(Y), tape.requires_grad(x), [ix, out, begin, n](BasicTape<Real>& t) {
    auto dy = t.grad_of(out);
    auto dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[begin * n + i] += dy[i];
  });
}

// Row r of a matrix as a rank-1 tensor.
template <class Real>
BasicVar<Real> select_row(BasicVar<Real> x, std::size_t r) {
  auto row = slice_rows(x, r, 1);
  // Reshape in place: a [1 x n] row shares layout with [n].
  auto& tape = *x.tape;
  const auto& Y = row.value();
  BasicTensor<Real> v({Y.size()}, std::vector<Real>(Y.values().begin(), Y.values().end()));
  const std::uint32_t iy = row.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(std::move(v), tape.requires_grad(row), [iy, out](BasicTape<Real>& t) {
    auto dv = t.grad_of(out);
    auto dy = t.grad_buffer(iy);
    for (std::size_t i = 0; i < dy.size(); ++i) dy[i] += dv[i];
  });
}

// -log softmax(logits)[target] for a rank-1 logit vector; log-sum-exp is
// accumulated in double.
template <class Real>
BasicVar<Real> cross_entropy(BasicVar<Real> logits, int target) {
  auto& tape = *logits.tape;
  const auto& Z = logits.value();
  if (Z.rank() != 1 && !(Z.rank() == 2 && Z.shape()[0] == 1)) {
    throw DimensionError("cross_entropy: expected a logit vector, got " + shape_string(Z.shape()));
  }
  const std::size_t v = Z.size();
  if (target < 0 || static_cast<std::size_t>(target) >= v) {
    throw IndexError("cross_entropy: target " + std::to_string(target) + " outside [0, " + std::to_string(v) + ")");
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(Z[j]));
  double z = 0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(Z[j]) - mx);
  const double lse = mx + std::log(z);
  const double loss = lse - static_cast<double>(Z[static_cast<std::size_t>(target)]);
  const std::uint32_t iz = logits.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(BasicTensor<Real>::scalar(static_cast<Real>(loss)), tape.requires_grad(logits),
                     [iz, out, v, lse, target](BasicTape<Real>& t) {
                       const double g = t.grad_of(out)[0];
                       const auto& Z = t.value_of(iz);
                       auto dz = t.grad_buffer(iz);
                       for (std::size_t j = 0; j < v; ++j) {
                         const double p = std::exp(static_cast<double>(Z[j]) - lse);
                         const double onehot = (static_cast<int>(j) == target) ? 1.0 : 0.0;
                         dz[j] += static_cast<Real>(g * (p - onehot));
                       }
                     });
}

template <class Real>
BasicVar<Real> sum(BasicVar<Real> x) {
  auto& tape = *x.tape;
  const auto& X = x.value();
  double s = 0;
  for (std::size_t i = 0; i < X.size(); ++i) s += X[i];
  const std::uint32_t ix = x.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(BasicTensor<Real>::scalar(static_cast<Real>(s)), tape.requires_grad(x), [ix, out](BasicTape<Real>& t) {
    const Real g = t.grad_of(out)[0];
    auto dx = t.grad_buffer(ix);
    for (auto& d : dx) d += g;
  });
}

// Squared Frobenius norm.
template <class Real>
BasicVar<Real> sum_squares(BasicVar<Real> x) {
  auto& tape = *x.tape;
  const auto& X = x.value();
  double s = 0;
  for (std::size_t i = 0; i < X.size(); ++i) s += static_cast<double>(X[i]) * X[i];
  const std::uint32_t ix = x.id;
  const std::uint32_t out = static_cast<std::uint32_t>(tape.size());
  return tape.record(BasicTensor<Real>::scalar(static_cast<Real>(s)), tape.requires_grad(x), [ix, out](BasicTape<Real>& t) {
    const Real g = t.grad_of(out)[0];
    const auto& X = t.value_of(ix);
    auto dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2 * g * X[i];
  });
}

// Value-only copy with no gradient path (stop-gradient).
template <class Real>
BasicVar<Real> detach(BasicVar<Real> x) {
  return x.tape->constant(x.value());
}

}  // namespace ahbd::ops
