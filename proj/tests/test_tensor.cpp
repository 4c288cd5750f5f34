#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "xrag/kernels.hpp"
#include "xrag/tensor.hpp"

using namespace xrag;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape s, double scale = 1.0) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  auto v = oracle::random_vec(rng, n, -scale, scale);
  return Tensor(std::move(s), std::move(v));
}

// A graph touching every differentiable op.
Var everything(Tape& t, const ParameterSet& P) {
  auto p = [&](const char* n) { return t.param(P.at(n)); };
  auto x = p("x");  // [4, 6]
  auto h = ops::relu(t, ops::linear(t, x, p("w"), p("b")));  // [4, 8]
  auto s = ops::sigmoid(t, ops::bias_add(t, ops::matmul(t, x, p("w")), p("b")));
  auto mixed = ops::sub(t, ops::add(t, h, ops::scale(t, s, 0.5)), ops::affine(t, s, -0.3, 0.1));
  DropoutStream ds{11, 3, 1};
  auto dropped = ops::dropout(t, mixed, 0.25, true, ds);
  auto heads = ops::split_heads(t, dropped, 2, 2);  // [4, 2, 4]
  auto logits = ops::bmm_bt(t, heads, heads);       // [4, 2, 2]
  auto probs = ops::softmax_lastdim(t, logits);
  auto ctx = ops::bmm(t, probs, heads);             // [4, 2, 4]
  auto merged = ops::merge_heads(t, ctx, 2, 2);     // [4, 8]
  auto joined = ops::concat_lastdim(t, merged, h);  // [4, 16]
  auto g = ops::sigmoid(t, ops::matmul(t, joined, p("v")));  // [4, 1]
  auto gated = ops::mul_rows(t, joined, g);
  auto pooled = ops::mean_axis(t, ops::reshape(t, gated, {2, 2, 16}), 1);  // [2, 16]
  return ops::sum_all(t, ops::scale(t, pooled, 0.7));
}

ParameterSet everything_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet P;
  P.add("x", random_tensor(rng, {4, 6}));
  P.add("w", random_tensor(rng, {6, 8}));
  P.add("b", random_tensor(rng, {8}, 0.3));
  P.add("v", random_tensor(rng, {16, 1}));
  return P;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("softmax examples and row sums") {
    Tape t;
    auto z = t.constant(Tensor({1, 3}, 0.0));
    const auto& p = t.value(ops::softmax_lastdim(t, z));
    for (double v : p.data()) CHECK(std::abs(v - 1.0 / 3.0) <= 1e-12);

    std::mt19937_64 rng(1);
    auto big = t.constant(random_tensor(rng, {50, 9}, 40.0));
    const auto& q = t.value(ops::softmax_lastdim(t, big));
    for (std::size_t r = 0; r < 50; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 9; ++c) {
        CHECK(q.at(r, c) >= 0.0);
        CHECK(q.at(r, c) <= 1.0);
        s += q.at(r, c);
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }

  TEST_CASE("identity matmul and mean of identical rows") {
    std::mt19937_64 rng(2);
    Tape t;
    Tensor I({3, 3}, 0.0);
    for (int i = 0; i < 3; ++i) I.at(i, i) = 1.0;
    const auto M = random_tensor(rng, {3, 7});
    CHECK(t.value(ops::matmul(t, t.constant(I), t.constant(M))) == M);

    const auto row = oracle::random_vec(rng, 5);
    std::vector<double> rows;
    for (int i = 0; i < 6; ++i) rows.insert(rows.end(), row.begin(), row.end());
    const auto& m = t.value(ops::mean_axis(t, t.constant(Tensor({6, 5}, rows)), 0));
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(m[i] - row[i]) <= 1e-15);
  }

  TEST_CASE("shape errors are reported") {
    Tape t;
    auto a = t.constant(Tensor({2, 3}));
    auto b = t.constant(Tensor({2, 3}));
    CHECK_THROWS_AS(ops::matmul(t, a, b), ShapeError);
    CHECK_THROWS_AS(ops::add(t, a, t.constant(Tensor({3, 2}))), ShapeError);
    CHECK_THROWS_AS(ops::bias_add(t, a, t.constant(Tensor({2}))), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  }

  TEST_CASE("gradient of sum(W x) is an outer product") {
    ParameterSet P;
    P.add("W", Tensor({2, 2}, std::vector<double>{1, 2, 3, 4}));
    Tape t;
    auto x = t.constant(Tensor({2, 1}, std::vector<double>{5, -7}));
    auto g = t.backward(ops::sum_all(t, ops::matmul(t, t.param(P.at("W")), x)));
    // d/dW_ij sum_i (W x)_i = x_j for every row i.
    CHECK(g.at("W") == Tensor({2, 2}, std::vector<double>{5, -7, 5, -7}));
  }

  TEST_CASE("softmax gradient sums to zero") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      ParameterSet P;
      P.add("z", random_tensor(rng, {1, 3}, 3.0));
      Tape t;
      auto w = t.constant(random_tensor(rng, {3, 1}));
      auto g = t.backward(ops::sum_all(t, ops::matmul(t, ops::softmax_lastdim(t, t.param(P.at("z"))), w)));
      const auto& gz = g.at("z");
      CHECK(std::abs(gz[0] + gz[1] + gz[2]) <= 1e-12);
    }
  }

  TEST_CASE("backward is linear") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto P = everything_params(seed);
      std::mt19937_64 rng(seed + 100);
      const double alpha = oracle::random_vec(rng, 1, -2, 2)[0], beta = oracle::random_vec(rng, 1, -2, 2)[0];
      auto second = [&](Tape& t) {
        auto x = t.param(P.at("x"));
        auto y = ops::sigmoid(t, ops::linear(t, x, t.param(P.at("w")), t.param(P.at("b"))));
        auto g = ops::matmul(t, ops::concat_lastdim(t, y, y), t.param(P.at("v")));
        return ops::sum_all(t, ops::mul_rows(t, y, g));
      };
      Tape tf, tg, th;
      const auto gf = tf.backward(everything(tf, P));
      const auto gg = tg.backward(second(tg));
      auto combined = ops::add(th, ops::scale(th, everything(th, P), alpha), ops::scale(th, second(th), beta));
      const auto gh = th.backward(combined);
      for (const auto& [name, grad] : gh) {
        for (std::size_t i = 0; i < grad.size(); ++i) {
          const double expect = alpha * gf.at(name)[i] + beta * gg.at(name)[i];
          CHECK(std::abs(grad[i] - expect) <= 1e-10);
        }
      }
    }
  }

  TEST_CASE("dropout") {
    std::mt19937_64 rng(4);
    Tape t;
    auto x = t.constant(random_tensor(rng, {10, 10}));
    DropoutStream ds{1, 2, 3};
    auto off = ops::dropout(t, x, 0.5, false, ds);
    CHECK(t.value(off) == t.value(x));
    const Tensor a = t.value(ops::dropout(t, x, 0.5, true, ds));
    const Tensor b = t.value(ops::dropout(t, x, 0.5, true, ds));
    CHECK(a == b);
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] == 0.0) {
        ++zeros;
      } else {
        CHECK(a[i] == t.value(x)[i] * 2.0);
      }
    }
    CHECK(zeros > 25);
    CHECK(zeros < 75);
    DropoutStream other{1, 3, 3};
    CHECK(t.value(ops::dropout(t, x, 0.5, true, other)) != a);
    CHECK_THROWS(ops::dropout(t, x, 1.0, true, ds));
  }

  TEST_CASE("grad check is exact on a quadratic") {
    ParameterSet P;
    P.add("w", Tensor({1, 1}, std::vector<double>{3.0}));
    auto f = [](Tape& t, const ParameterSet& p) {
      auto w = t.param(p.at("w"));
      return ops::sum_all(t, ops::matmul(t, w, w));
    };
    const auto r = grad_check(f, P);
    CHECK(r.coordinates_checked == 1);
    CHECK(r.max_relative_error <= 1e-9);
  }

  TEST_CASE("grad check covers every op") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto r = grad_check(everything, everything_params(seed));
      CHECK(r.max_relative_error <= 1e-6);
      CHECK(r.coordinates_checked == 24 + 48 + 8 + 16);
    }
  }

  TEST_CASE("grad check nudges off relu kinks") {
    ParameterSet P;
    P.add("x", Tensor({1, 4}, std::vector<double>{0.0, 0.5, -0.25, 0.0}));
    auto f = [](Tape& t, const ParameterSet& p) {
      auto x = t.param(p.at("x"));
      return ops::sum_all(t, ops::relu(t, ops::scale(t, x, 2.0)));
    };
    const auto r = grad_check(f, P);
    CHECK(r.nudged >= 2);
    CHECK(r.max_relative_error <= 1e-9);
  }

  TEST_CASE("parallel gemm matches the serial reference bitwise") {
    std::mt19937_64 rng(5);
    for (kernels::GemmShape s : {kernels::GemmShape{1, 17, 23, 9}, kernels::GemmShape{6, 5, 8, 4},
                                 kernels::GemmShape{1, 300, 64, 64}}) {
      const auto a = oracle::random_vec(rng, s.groups * s.m * s.n);
      const auto b = oracle::random_vec(rng, s.groups * s.n * s.p);
      const auto bt = oracle::random_vec(rng, s.groups * s.p * s.n);
      const auto at = oracle::random_vec(rng, s.groups * s.n * s.m);  // stored m x n per group, read transposed
      for (bool acc : {false, true}) {
        std::vector<double> c1 = oracle::random_vec(rng, s.groups * s.m * s.p), c2 = c1;
        kernels::gemm(a, b, c1, s, acc);
        kernels::serial::gemm(a, b, c2, s, acc);
        CHECK(c1 == c2);
        kernels::gemm_bt(a, bt, c1, s, acc);
        kernels::serial::gemm_bt(a, bt, c2, s, acc);
        CHECK(c1 == c2);
        // gemm_at: a stored [m', n'] = [n, m] gives [m, p] output with b [n, p].
        kernels::GemmShape st{s.groups, s.n, s.m, s.p};
        std::vector<double> d1(s.groups * s.m * s.p, 0.0), d2 = d1;
        kernels::gemm_at(at, b, d1, st, acc);
        kernels::serial::gemm_at(at, b, d2, st, acc);
        CHECK(d1 == d2);
      }
      // Against a triple loop.
      std::vector<double> c(s.groups * s.m * s.p);
      kernels::gemm(a, b, c, s);
      for (std::size_t g = 0; g < s.groups; ++g) {
        for (std::size_t i = 0; i < s.m; ++i) {
          for (std::size_t j = 0; j < s.p; ++j) {
            double r = 0.0;
            for (std::size_t k = 0; k < s.n; ++k) r += a[(g * s.m + i) * s.n + k] * b[(g * s.n + k) * s.p + j];
            CHECK(std::abs(c[(g * s.m + i) * s.p + j] - r) <= 1e-12);
          }
        }
      }
    }
  }

  TEST_CASE("parameter sets and checkpoints") {
    std::mt19937_64 rng(6);
    ParameterSet P;
    P.add("a/x", random_tensor(rng, {3, 4}));
    P.add("a/y", random_tensor(rng, {5}), false);
    P.add("b/z", random_tensor(rng, {2, 2}));
    CHECK(P.scalar_count() == 21);
    CHECK(P.scalar_count(true) == 16);
    CHECK(P.scalar_count(false) == 5);
    CHECK(P.subset("a/").size() == 2);
    CHECK_THROWS(P.add("a/x", Tensor({1})));

    TempDir dir;
    save_checkpoint(P, dir.path / "p.ckpt");
    const auto back = load_checkpoint(dir.path / "p.ckpt");
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(back.items()[i].name == P.items()[i].name);
      CHECK(back.items()[i].value == P.items()[i].value);
    }
    CHECK(fingerprint(back) == fingerprint(P));
    CHECK(fingerprint(P, "a/") != fingerprint(P, "b/"));
    auto Q = P;
    Q.at("b/z").value[0] += 1e-12;
    CHECK(fingerprint(Q, "a/") == fingerprint(P, "a/"));
    CHECK(fingerprint(Q, "b/") != fingerprint(P, "b/"));

    const auto bytes = slurp(dir.path / "p.ckpt");
    std::ofstream(dir.path / "cut.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    CHECK_THROWS_AS(load_checkpoint(dir.path / "cut.ckpt"), CheckpointError);
  }
}
