#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "support/gradcheck.hpp"
#include "thgen/autodiff.hpp"
#include "thgen/rng.hpp"

using namespace thgen;
using namespace thgen::ad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(shape_numel(shape));
  for (auto& x : d) x = rng.uniform(lo, hi);
  return parameter(std::move(shape), std::move(d));
}

}  // namespace

TEST_CASE("matmul identity and one-hot selection") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor prod = matmul(eye, m);
  for (std::size_t i = 0; i < 4; ++i) CHECK(prod.at(i) == m.at(i));

  Tensor onehot = Tensor::row({1, 0, 0});
  Tensor bank = Tensor::from_data({3, 4}, {10, 11, 12, 13, 20, 21, 22, 23, 30, 31, 32, 33});
  Tensor picked = matmul(onehot, bank);
  REQUIRE(picked.shape() == Shape{1, 4});
  for (std::size_t j = 0; j < 4; ++j) CHECK(picked.at(j) == bank.at2(0, j));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(7);
  Tensor a = random_tensor({3, 3}, rng);
  Tensor b = random_tensor({3, 3}, rng);
  auto res = gradcheck::check({a, b}, [&] { return sum(matmul(a, b)); });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("softmax basics") {
  Tensor u = softmax(Tensor::from_data({3}, {0, 0, 0}));
  for (std::size_t i = 0; i < 3; ++i) CHECK(u.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor big = softmax(Tensor::from_data({2}, {1000, 0}));
  CHECK(std::isfinite(big.at(0)));
  CHECK(big.at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(big.at(1) < 1e-300);

  Tensor nan_in = Tensor::from_data({2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(softmax(nan_in), std::domain_error);
}

TEST_CASE("softmax lands on the probability simplex") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({5}, rng, -50.0, 50.0);
    Tensor y = softmax(x);
    double total = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(y.at(i) >= 0.0);
      total += y.at(i);
    }
    CHECK(std::fabs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("softmax along rows and columns of a matrix") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor by_row = softmax(x, 1);
  for (std::size_t r = 0; r < 2; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) total += by_row.at2(r, c);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor by_col = softmax(x, 0);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(by_col.at2(0, c) + by_col.at2(1, c) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax gradient matches finite differences") {
  Rng rng(13);
  Tensor x = random_tensor({5}, rng, -2.0, 2.0);
  Tensor w = random_tensor({5}, rng);
  auto res = gradcheck::check({x}, [&] { return sum(mul(softmax(x), w)); });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("cosine similarity canonical values") {
  Tensor a = Tensor::from_data({2}, {3, 4});
  CHECK(cosine_similarity(a, a).item() == doctest::Approx(1.0).epsilon(1e-8));

  Tensor ex = Tensor::from_data({2}, {1, 0});
  Tensor ey = Tensor::from_data({2}, {0, 1});
  CHECK(cosine_similarity(ex, ey).item() == doctest::Approx(0.0).epsilon(1e-12));

  Tensor neg = Tensor::from_data({2}, {-1, 0});
  CHECK(cosine_similarity(ex, neg).item() == doctest::Approx(-1.0).epsilon(1e-8));
}

TEST_CASE("cosine similarity survives a zero vector and stays in range") {
  Tensor zero = Tensor::zeros({3});
  Tensor v = Tensor::from_data({3}, {1, 2, 3});
  CHECK(cosine_similarity(zero, v).item() == 0.0);

  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor u = random_tensor({4}, rng, -10.0, 10.0);
    Tensor w = random_tensor({4}, rng, -10.0, 10.0);
    const double c = cosine_similarity(u, w).item();
    CHECK(c >= -1.0 - 1e-9);
    CHECK(c <= 1.0 + 1e-9);
  }
}

TEST_CASE("cosine similarity gradient matches finite differences") {
  Rng rng(19);
  Tensor u = random_tensor({6}, rng);
  Tensor v = random_tensor({6}, rng);
  auto res = gradcheck::check({u, v}, [&] { return cosine_similarity(u, v); });
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("elementwise basics") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);

  for (double x = -5.0; x <= 5.0; x += 0.5) {
    CHECK(log(exp(Tensor::scalar(x))).item() == doctest::Approx(x).epsilon(1e-12));
  }

  CHECK_THROWS_AS(log(Tensor::scalar(0.0)), std::domain_error);
  CHECK_THROWS_AS(log(Tensor::scalar(-1.0)), std::domain_error);
  CHECK_THROWS_AS(ad::sqrt(Tensor::scalar(-4.0)), std::domain_error);

  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = Tensor::from_data({3}, {1, 2, 3});
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
}

TEST_CASE("every elementwise op passes a finite-difference check") {
  Rng rng(23);
  Tensor a = random_tensor({2, 3}, rng, 0.2, 2.0);  // positive: safe for log/sqrt/div
  Tensor b = random_tensor({2, 3}, rng, 0.2, 2.0);

  struct Named {
    const char* name;
    std::function<Tensor()> fwd;
  };
  const std::vector<Named> cases = {
      {"add", [&] { return sum(add(a, b)); }},
      {"sub", [&] { return sum(sub(a, b)); }},
      {"mul", [&] { return sum(mul(a, b)); }},
      {"div", [&] { return sum(div(a, b)); }},
      {"exp", [&] { return sum(exp(a)); }},
      {"log", [&] { return sum(log(a)); }},
      {"tanh", [&] { return sum(tanh(a)); }},
      {"sigmoid", [&] { return sum(sigmoid(a)); }},
      {"softplus", [&] { return sum(softplus(a)); }},
      {"sqrt", [&] { return sum(ad::sqrt(a)); }},
      {"mean", [&] { return mean(mul(a, b)); }},
      {"add_scalar", [&] { return sum(add_scalar(a, 1.5)); }},
      {"mul_scalar", [&] { return sum(mul_scalar(a, -2.5)); }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    auto res = gradcheck::check({a, b}, c.fwd);
    CHECK(res.max_rel_err < 1e-5);
    a.zero_grad();
    b.zero_grad();
  }
}

TEST_CASE("shape ops: reshape, concat, slice, pooling") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});

  Tensor flat = reshape(a, {6});
  REQUIRE(flat.shape() == Shape{6});
  CHECK(flat.at(4) == 5);
  CHECK_THROWS_AS(reshape(a, Shape{4}), std::invalid_argument);

  Tensor b = Tensor::from_data({1, 3}, {7, 8, 9});
  Tensor stacked = concat({a, b}, 0);
  REQUIRE(stacked.shape() == (Shape{3, 3}));
  CHECK(stacked.at2(2, 1) == 8);

  Tensor side = concat({a, Tensor::from_data({2, 1}, {-1, -2})}, 1);
  REQUIRE(side.shape() == (Shape{2, 4}));
  CHECK(side.at2(0, 3) == -1);
  CHECK(side.at2(1, 0) == 4);

  Tensor cut = slice(a, 1, 1, 2);
  REQUIRE(cut.shape() == (Shape{2, 2}));
  CHECK(cut.at2(1, 0) == 5);
  CHECK_THROWS_AS(slice(a, 1, 2, 2), std::invalid_argument);

  Tensor r = row_of(a, 1);
  REQUIRE(r.shape() == (Shape{1, 3}));
  CHECK(r.at(0) == 4);

  Tensor pooled = avg_pool_rows(Tensor::from_data({5, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}), 2);
  REQUIRE(pooled.shape() == (Shape{2, 2}));  // trailing row dropped
  CHECK(pooled.at2(0, 0) == 2.0);
  CHECK(pooled.at2(1, 1) == 7.0);

  Tensor cols = mean_rows(a);
  REQUIRE(cols.shape() == (Shape{1, 3}));
  CHECK(cols.at(0) == doctest::Approx(2.5));
}

TEST_CASE("shape op gradients match finite differences") {
  Rng rng(29);
  Tensor a = random_tensor({4, 3}, rng);
  Tensor b = random_tensor({2, 3}, rng);
  Tensor w = random_tensor({6, 3}, rng);

  auto res = gradcheck::check({a, b}, [&] {
    Tensor joined = concat({a, b}, 0);
    Tensor weighted = mul(joined, w);
    Tensor part = slice(weighted, 0, 1, 4);
    Tensor pooled = avg_pool_rows(part, 2);
    Tensor flat = reshape(pooled, {6});
    return sum(mul(flat, flat));
  });
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("add_rows broadcasts a bias row across a matrix") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor bias = Tensor::from_data({1, 3}, {10, 20, 30});
  Tensor out = add_rows(a, bias);
  REQUIRE(out.shape() == (Shape{2, 3}));
  CHECK(out.at2(0, 0) == 11);
  CHECK(out.at2(1, 2) == 36);
  CHECK_THROWS_AS(add_rows(a, Tensor::from_data({1, 2}, {1, 2})), std::invalid_argument);
  CHECK_THROWS_AS(add_rows(Tensor::from_data({3}, {1, 2, 3}), bias), std::invalid_argument);

  Rng rng(31);
  Tensor m = random_tensor({4, 3}, rng);
  Tensor r = random_tensor({1, 3}, rng);
  auto res = gradcheck::check({m, r}, [&] { return sum(mul(add_rows(m, r), add_rows(m, r))); });
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("logsumexp is stable and differentiable") {
  Tensor x = Tensor::from_data({3}, {1000, 999, 998});
  const double lse = logsumexp(x).item();
  CHECK(std::isfinite(lse));
  CHECK(lse == doctest::Approx(1000 + std::log(1 + std::exp(-1.0) + std::exp(-2.0))).epsilon(1e-12));

  Rng rng(31);
  Tensor y = random_tensor({5}, rng, -3.0, 3.0);
  auto res = gradcheck::check({y}, [&] { return logsumexp(y); });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("backward: sum gives ones, half squared norm gives the parameter") {
  Tensor p = parameter({4}, {1.5, -2.0, 0.25, 3.0});
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(p));
  }
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.grad()[i] == 1.0);

  p.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(mul_scalar(sum(mul(p, p)), 0.5));
  }
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.grad()[i] == doctest::Approx(p.at(i)).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar and foreign losses") {
  Tensor p = parameter({2}, {1, 2});
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor v = mul(p, p);
    CHECK_THROWS_AS(tape.backward(v), std::invalid_argument);
  }
  Tensor elsewhere = Tensor::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(elsewhere), std::invalid_argument);
}

TEST_CASE("repeated backward accumulates leaf gradients") {
  Tensor p = parameter({3}, {1, 2, 3});
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum(mul(p, p));
    tape.backward(loss);
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(p.grad()[i] == doctest::Approx(4.0 * p.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("detach blocks the gradient path") {
  Tensor p = parameter({2}, {2, 5});
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor held = detach(mul(p, p));
    Tensor loss = sum(mul(held, p));
    tape.backward(loss);
  }
  // d(sum(c * p))/dp = c with c = p*p held constant.
  CHECK(p.grad()[0] == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(p.grad()[1] == doctest::Approx(25.0).epsilon(1e-12));
}

TEST_CASE("composite graphs match finite differences across 50 seeds") {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed);
    Tensor x = random_tensor({1, 4}, rng);
    Tensor w1 = random_tensor({4, 5}, rng);
    Tensor w2 = random_tensor({5, 3}, rng);
    Tensor m = random_tensor({3, 3}, rng);

    auto res = gradcheck::check({x, w1, w2, m}, [&] {
      Tensor h = tanh(matmul(x, w1));
      Tensor logits = matmul(sigmoid(matmul(h, w2)), m);
      Tensor probs = softmax(reshape(logits, {3}));
      Tensor picked = matmul(reshape(probs, {1, 3}), m);
      Tensor score = cosine_similarity(picked, row_of(m, 0));
      return add(score, logsumexp(reshape(logits, {3})));
    });
    worst = std::max(worst, res.max_rel_err);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("backward is bit-deterministic") {
  auto run = [](std::vector<double>& out) {
    Rng rng(101);
    Tensor x = parameter({1, 6}, [&] {
      std::vector<double> d(6);
      for (auto& v : d) v = rng.uniform(-1.0, 1.0);
      return d;
    }());
    Tensor w = parameter({6, 6}, [&] {
      std::vector<double> d(36);
      for (auto& v : d) v = rng.uniform(-1.0, 1.0);
      return d;
    }());
    Tape tape;
    {
      TapeScope scope(tape);
      Tensor loss = sum(softmax(reshape(tanh(matmul(x, w)), {6})));
      Tensor full = add(loss, mean(mul(w, w)));
      tape.backward(full);
    }
    out = w.grad();
  };
  std::vector<double> g1, g2;
  run(g1);
  run(g2);
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("ops outside a tape scope do not record") {
  Tensor p = parameter({2}, {1, 2});
  Tensor q = mul(p, p);  // no active tape
  CHECK_FALSE(q.requires_grad());
  Tape tape;
  CHECK(tape.num_ops() == 0);
}
