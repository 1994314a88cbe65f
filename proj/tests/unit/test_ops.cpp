#include <random>

#include "doctest.h"
#include "support.hpp"

using namespace ahbd;
using namespace ahbd::test;

TEST_CASE("matmul matches a hand-computed product") {
  DTape tape;
  auto a = tape.constant(DTensor::matrix({{1, 2}, {3, 4}}));
  auto b = tape.constant(DTensor::matrix({{5, 6}, {7, 8}}));
  const auto c = ops::matmul(a, b).value();
  CHECK(c.at(0, 0) == 19);
  CHECK(c.at(0, 1) == 22);
  CHECK(c.at(1, 0) == 43);
  CHECK(c.at(1, 1) == 50);
}

TEST_CASE("matmul rejects inner-dimension mismatch") {
  DTape tape;
  auto a = tape.constant(DTensor({2, 3}));
  auto b = tape.constant(DTensor({2, 3}));
  CHECK_THROWS_AS(ops::matmul(a, b), DimensionError);
  CHECK_NOTHROW(ops::matmul_nt(a, b));
}

TEST_CASE("softmax_rows under a causal mask") {
  DTape tape;
  std::mt19937_64 rng(3);
  auto s = tape.constant(random_tensor(rng, {5, 5}, -4, 4));
  const auto p = ops::softmax_rows(s, ops::AttentionMask::causal(5)).value();
  for (std::size_t i = 0; i < 5; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      if (j > i) CHECK(p.at(i, j) == 0.0);
      row += p.at(i, j);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(p.at(0, 0) == 1.0);
}

TEST_CASE("softmax_rows with an empty row is degenerate") {
  DTape tape;
  auto s = tape.constant(DTensor({2, 2}));
  ops::AttentionMask m(2, 2, true);
  m.set(1, 0, false);
  m.set(1, 1, false);
  CHECK_THROWS_AS(ops::softmax_rows(s, m), DegenerateError);
}

TEST_CASE("cross_entropy of uniform logits is log V") {
  DTape tape;
  auto z = tape.constant(DTensor({1, 4}));
  CHECK(ops::cross_entropy(z, 2).value().item() == doctest::Approx(std::log(4.0)));
  CHECK_THROWS_AS(ops::cross_entropy(z, 4), IndexError);
}

TEST_CASE("embedding rejects out-of-range ids") {
  DTape tape;
  auto w = tape.constant(DTensor({4, 2}));
  const std::vector<int> ids{0, 4};
  CHECK_THROWS_AS(ops::embedding(w, std::span<const int>(ids)), IndexError);
}

TEST_CASE("detach cuts the gradient path") {
  DTensor x = DTensor::vector({1.0, 2.0});
  DTape tape;
  auto v = tape.leaf(x);
  auto y = ops::sum_squares(ops::detach(v));
  CHECK_THROWS_AS(tape.backward(y), ContractError);
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("finite differences: elementwise and reduction ops") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const DTensor r = random_tensor(rng, {3, 4});
    std::vector<DTensor> in{random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})};
    auto check = [&](auto f) { CHECK(check_gradients(in, f).max_rel_err < 1e-6); };
    check([&](DTape& t, std::vector<DVar>& v) { return readout(t, ops::add(v[0], v[1]), r); });
    check([&](DTape& t, std::vector<DVar>& v) { return readout(t, ops::sub(v[0], v[1]), r); });
    check([&](DTape& t, std::vector<DVar>& v) { return readout(t, ops::mul(v[0], v[1]), r); });
    check([&](DTape& t, std::vector<DVar>& v) { return readout(t, ops::scale(v[0], -0.7), r); });
    check([&](DTape& t, std::vector<DVar>& v) { return readout(t, ops::gelu(v[0]), r); });
    check([&](DTape&, std::vector<DVar>& v) { return ops::sum_squares(ops::sub(v[0], v[1])); });
  }
}

TEST_CASE("finite differences: matrix ops") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<DTensor> in{random_tensor(rng, {3, 4}), random_tensor(rng, {4, 5})};
    const DTensor r = random_tensor(rng, {3, 5});
    CHECK(check_gradients(in, [&](DTape& t, std::vector<DVar>& v) { return readout(t, ops::matmul(v[0], v[1]), r); })
              .max_rel_err < 1e-6);

    std::vector<DTensor> nt{random_tensor(rng, {3, 4}), random_tensor(rng, {5, 4})};
    CHECK(check_gradients(nt, [&](DTape& t, std::vector<DVar>& v) { return readout(t, ops::matmul_nt(v[0], v[1]), r); })
              .max_rel_err < 1e-6);

    std::vector<DTensor> ln{random_tensor(rng, {3, 6}), random_tensor(rng, {6}, 0.5, 1.5), random_tensor(rng, {6})};
    const DTensor r6 = random_tensor(rng, {3, 6});
    CHECK(check_gradients(ln, [&](DTape& t, std::vector<DVar>& v) {
            return readout(t, ops::layer_norm(v[0], v[1], v[2]), r6);
          }).max_rel_err < 1e-6);

    std::vector<DTensor> ar{random_tensor(rng, {3, 6}), random_tensor(rng, {6})};
    CHECK(check_gradients(ar, [&](DTape& t, std::vector<DVar>& v) { return readout(t, ops::add_row(v[0], v[1]), r6); })
              .max_rel_err < 1e-6);
  }
}

TEST_CASE("finite differences: softmax, cross entropy, indexing") {
  std::mt19937_64 rng(13);
  const auto mask = ops::AttentionMask::causal(4);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<DTensor> s{random_tensor(rng, {4, 4}, -3, 3)};
    const DTensor r = random_tensor(rng, {4, 4});
    CHECK(check_gradients(s, [&](DTape& t, std::vector<DVar>& v) { return readout(t, ops::softmax_rows(v[0], mask), r); })
              .max_rel_err < 1e-6);

    std::vector<DTensor> z{random_tensor(rng, {1, 7}, -2, 2)};
    CHECK(check_gradients(z, [&](DTape&, std::vector<DVar>& v) { return ops::cross_entropy(v[0], 3); }).max_rel_err <
          1e-6);

    std::vector<DTensor> w{random_tensor(rng, {6, 3})};
    const std::vector<int> ids{1, 4, 1, 0};
    const DTensor r43 = random_tensor(rng, {4, 3});
    const DTensor r23 = random_tensor(rng, {2, 3});
    CHECK(check_gradients(w, [&](DTape& t, std::vector<DVar>& v) {
            return readout(t, ops::embedding(v[0], std::span<const int>(ids)), r43);
          }).max_rel_err < 1e-6);
    CHECK(check_gradients(w, [&](DTape& t, std::vector<DVar>& v) { return readout(t, ops::slice_rows(v[0], 2, 2), r23); })
              .max_rel_err < 1e-6);
  }
}

TEST_CASE("softmax_rows worked examples") {
  DTape tape;
  ops::AttentionMask all(1, 3, true);
  const auto u = ops::softmax_rows(tape.constant(DTensor::matrix({{0, 0, 0}})), all).value();
  for (std::size_t j = 0; j < 3; ++j) CHECK(u[j] == doctest::Approx(1.0 / 3));
  ops::AttentionMask first(1, 2, true);
  first.set(0, 1, false);
  const auto one = ops::softmax_rows(tape.constant(DTensor::matrix({{0, 5}})), first).value();
  CHECK(one[0] == 1.0);
  CHECK(one[1] == 0.0);
  ops::AttentionMask both(1, 2, true);
  const auto two = ops::softmax_rows(tape.constant(DTensor::matrix({{0, std::log(2.0)}})), both).value();
  CHECK(two[0] == doctest::Approx(1.0 / 3));
  CHECK(two[1] == doctest::Approx(2.0 / 3));
}

TEST_CASE("matmul worked examples") {
  DTape tape;
  auto m = tape.constant(DTensor::matrix({{1, 2}, {3, 4}}));
  const DTensor id = ops::matmul(tape.constant(DTensor::matrix({{1, 0}, {0, 1}})), m).value();
  const DTensor zero = ops::matmul(m, tape.constant(DTensor::matrix({{0, 0}, {0, 0}}))).value();
  CHECK(id == DTensor::matrix({{1, 2}, {3, 4}}));
  CHECK(zero == DTensor::matrix({{0, 0}, {0, 0}}));
}

TEST_CASE("cross_entropy worked examples") {
  DTape tape;
  auto sure = tape.constant(DTensor::matrix({{-1e4, 0, -1e4}}));
  CHECK(ops::cross_entropy(sure, 1).value().item() == doctest::Approx(0.0));
  // p(target) = 3/4 with logits (ln 3, 0).
  auto z = tape.constant(DTensor::matrix({{std::log(3.0), 0}}));
  CHECK(ops::cross_entropy(z, 0).value().item() == doctest::Approx(-std::log(0.75)));
}

TEST_CASE("backward worked examples") {
  DTensor a = DTensor::matrix({{1, 2}, {3, 4}});
  {
    DTape tape;
    tape.backward(ops::sum(tape.leaf(a)));
  }
  for (double g : a.grad()) CHECK(g == 1.0);
  DTensor x = DTensor::scalar(3.0);
  {
    DTape tape;
    tape.backward(ops::sum_squares(tape.leaf(x)));
  }
  CHECK(x.grad()[0] == 6.0);
  DTape tape;
  auto v = tape.leaf(a);
  CHECK_THROWS_AS(tape.backward(v), ContractError);
}

TEST_CASE("backward is linear") {
  std::mt19937_64 rng(21);
  DTensor x = random_tensor(rng, {3, 3});
  const DTensor r = random_tensor(rng, {3, 3});
  auto grad_of = [&](double wa, double wb) {
    x.clear_grad();
    DTape tape;
    auto v = tape.leaf(x);
    auto f = readout(tape, ops::gelu(v), r);
    auto g = ops::sum_squares(v);
    tape.backward(ops::add(ops::scale(f, wa), ops::scale(g, wb)));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  const auto gf = grad_of(1, 0), gg = grad_of(0, 1), mix = grad_of(2.5, -0.75);
  for (std::size_t i = 0; i < mix.size(); ++i) CHECK(std::abs(mix[i] - (2.5 * gf[i] - 0.75 * gg[i])) < 1e-6);
}

TEST_CASE("apply_gradient worked examples") {
  DTensor p = DTensor::scalar(1.0);
  CHECK_THROWS_AS(apply_gradient(p, 0.1), ContractError);
  p.grad()[0] = 2.0;
  apply_gradient(p, 0.0);
  CHECK(p.item() == 1.0);
  CHECK_FALSE(p.has_grad());
  p.grad()[0] = 2.0;
  apply_gradient(p, 0.1);
  CHECK(p.item() == doctest::Approx(0.8));

  DTensor a = DTensor::scalar(1.0), b = DTensor::scalar(1.0);
  for (int k = 0; k < 2; ++k) {
    a.grad()[0] = 0.5;
    apply_gradient(a, 0.25);
  }
  b.grad()[0] = 0.5;
  apply_gradient(b, 0.5);
  CHECK(a.item() == doctest::Approx(b.item()).epsilon(1e-15));
}
