#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "vtc/random.hpp"
#include "vtc/tape.hpp"

using vtc::Rng;
using vtc::Tape;
using vtc::Tensor;

namespace {

Tensor random_tensor(Rng& rng, int r, int c, double lo = -2.0, double hi = 2.0) {
  Tensor t(r, c);
  for (double& x : t.v) x = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul forward") {
  Tape tape;
  Tensor a(2, 2);
  a.v = {1, 2, 3, 4};
  Tensor b(2, 1);
  b.v = {5, 6};
  const int c = tape.matmul(tape.leaf(a), tape.leaf(b));
  REQUIRE(tape.val(c).rows == 2);
  REQUIRE(tape.val(c).at(0, 0) == 17.0);
  REQUIRE(tape.val(c).at(1, 0) == 39.0);
}

TEST_CASE("softmax row with max subtraction") {
  Tape tape;
  Tensor x(1, 2);
  x.v = {0.0, std::log(2.0)};
  const int y = tape.softmax_row(tape.leaf(x));
  REQUIRE_THAT(tape.val(y).at(0, 0), Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
  REQUIRE_THAT(tape.val(y).at(0, 1), Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));

  // Rows sum to one even with extreme inputs.
  Tensor big(1, 3);
  big.v = {1e4, -1e4, 0.0};
  const int z = tape.softmax_row(tape.leaf(big));
  double s = 0.0;
  for (double e : tape.val(z).v) {
    REQUIRE(std::isfinite(e));
    s += e;
  }
  REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("log sigmoid at zero") {
  Tape tape;
  const int y = tape.log_sigmoid(tape.constant(0.0));
  REQUIRE_THAT(tape.val(y).item(), Catch::Matchers::WithinAbs(-std::log(2.0), 1e-15));
}

TEST_CASE("sum and squared norm gradients") {
  Tape tape;
  Rng rng(7);
  const Tensor x = random_tensor(rng, 3, 4);
  const int leaf = tape.leaf(x, true);

  const Tensor gsum = tape.gradient_single(tape.sum(leaf), leaf);
  for (double g : gsum.v) REQUIRE(g == 1.0);

  Tape tape2;
  const int leaf2 = tape2.leaf(x, true);
  const Tensor gsq = tape2.gradient_single(tape2.squared_norm(leaf2), leaf2);
  for (size_t k = 0; k < x.numel(); ++k)
    REQUIRE_THAT(gsq.v[k], Catch::Matchers::WithinAbs(2.0 * x.v[k], 1e-12));
}

TEST_CASE("pairwise logistic loss gradient at equal scores") {
  // loss = -log sigmoid(a - b) at a = b = 0: d/da = -1/2, d/db = +1/2
  Tape tape;
  const int a = tape.leaf(Tensor::scalar(0.0), true);
  const int b = tape.leaf(Tensor::scalar(0.0), true);
  const int loss = tape.neg(tape.log_sigmoid(tape.sub(a, b)));
  const std::array<int, 2> wrt{a, b};
  auto g = tape.gradient(loss, wrt);
  REQUIRE_THAT(g.at(a).item(), Catch::Matchers::WithinAbs(-0.5, 1e-12));
  REQUIRE_THAT(g.at(b).item(), Catch::Matchers::WithinAbs(0.5, 1e-12));
}

TEST_CASE("clip pass-through value and straight-through gradient") {
  Tape tape;
  Tensor x(1, 4);
  x.v = {-0.5, 0.25, 0.75, 1.5};
  const int leaf = tape.leaf(x, true);
  const int y = tape.clip_pass(leaf, 0.0, 1.0);
  REQUIRE(tape.val(y).v == std::vector<double>{0.0, 0.25, 0.75, 1.0});
  const Tensor g = tape.gradient_single(tape.sum(y), leaf);
  REQUIRE(g.v == std::vector<double>{0.0, 1.0, 1.0, 0.0});
}

TEST_CASE("every primitive matches central finite differences") {
  // Relative error < 1e-5 over randomized inputs with dims <= 64.
  Rng rng(42);
  auto check = [&](auto&& build, const Tensor& x0) {
    auto f = [&](const Tensor& x) -> std::pair<double, Tensor> {
      Tape tape;
      const int leaf = tape.leaf(x, true);
      const int loss = build(tape, leaf);
      return {tape.val(loss).item(), tape.gradient_single(loss, leaf)};
    };
    return vtc::finite_difference_check(f, x0, 1e-5);
  };

  for (int rep = 0; rep < 25; ++rep) {
    const int r = rng.uniform_int(1, 8);
    const int c = rng.uniform_int(1, 8);
    const Tensor x = random_tensor(rng, r, c);

    // matmul, all transpose combinations
    for (const bool ta : {false, true}) {
      for (const bool tb : {false, true}) {
        const int br = tb ? 5 : (ta ? r : c);
        const int bc = tb ? (ta ? r : c) : 5;
        const Tensor m = random_tensor(rng, br, bc);
        const double err = check(
            [&](Tape& t, int leaf) {
              return t.sum(t.matmul(leaf, t.leaf(m), ta, tb));
            },
            x);
        REQUIRE(err < 1e-5);
      }
    }

    const Tensor other = random_tensor(rng, r, c);
    REQUIRE(check([&](Tape& t, int l) { return t.sum(t.mul(l, t.leaf(other))); }, x) < 1e-5);
    REQUIRE(check([&](Tape& t, int l) { return t.sum(t.add(l, t.leaf(other))); }, x) < 1e-5);
    REQUIRE(check([&](Tape& t, int l) {
              return t.sum(t.mul(t.softmax_row(l), t.leaf(other)));
            }, x) < 1e-5);
    REQUIRE(check([&](Tape& t, int l) { return t.sum(t.log_sigmoid(l)); }, x) < 1e-5);
    REQUIRE(check([&](Tape& t, int l) { return t.mean(l); }, x) < 1e-5);
    REQUIRE(check([&](Tape& t, int l) { return t.squared_norm(l); }, x) < 1e-5);
    REQUIRE(check([&](Tape& t, int l) {
              return t.sum(t.concat(l, t.leaf(other), rep % 2));
            }, x) < 1e-5);

    // slice with duplicate gather indices accumulates
    std::vector<int> idx;
    for (int k = 0; k < 6; ++k)
      idx.push_back(rng.uniform_int(0, static_cast<int>(x.numel()) - 1));
    REQUIRE(check([&](Tape& t, int l) {
              auto copy = idx;
              return t.squared_norm(t.slice(l, std::move(copy), 1, 6));
            }, x) < 1e-5);

    // clip_pass away from its kinks
    REQUIRE(check([&](Tape& t, int l) {
              return t.sum(t.clip_pass(l, -5.0, 5.0));
            }, x) < 1e-5);
  }
}

TEST_CASE("rms norm gradients match finite differences") {
  // Fixed inputs whose gradient entries are bounded away from zero; the
  // max-relative-error criterion is meaningless at entries that cancel to the
  // roundoff floor.
  Tensor x(2, 3);
  x.v = {0.5, -1.2, 0.8, 1.5, 0.4, -0.7};
  Tensor g(1, 3);
  g.v = {1.1, 0.9, 1.3};
  Tensor w(2, 3);
  w.v = {0.3, -0.5, 0.7, -0.2, 0.6, 0.9};

  auto fx = [&](const Tensor& xx) -> std::pair<double, Tensor> {
    Tape t;
    const int l = t.leaf(xx, true);
    const int loss = t.sum(t.mul(t.rms_norm_row(l, t.leaf(g)), t.leaf(w)));
    return {t.val(loss).item(), t.gradient_single(loss, l)};
  };
  REQUIRE(vtc::finite_difference_check(fx, x, 1e-5) < 1e-5);

  auto fg = [&](const Tensor& gg) -> std::pair<double, Tensor> {
    Tape t;
    const int lx = t.leaf(x);
    const int lg = t.leaf(gg, true);
    const int loss = t.sum(t.mul(t.rms_norm_row(lx, lg), t.leaf(w)));
    return {t.val(loss).item(), t.gradient_single(loss, lg)};
  };
  REQUIRE(vtc::finite_difference_check(fg, g, 1e-5) < 1e-5);
}

TEST_CASE("forward evaluation is pure and bit-identical") {
  Rng rng(3);
  const Tensor x = random_tensor(rng, 6, 6);
  const Tensor w = random_tensor(rng, 6, 6);
  auto run = [&]() {
    Tape tape;
    const int l = tape.leaf(x, true);
    const int y = tape.softmax_row(tape.matmul(l, tape.leaf(w)));
    const int loss = tape.mean(y);
    const Tensor g = tape.gradient_single(loss, l);
    std::vector<double> out = tape.val(loss).v;
    out.insert(out.end(), g.v.begin(), g.v.end());
    return out;
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == b.size());
  REQUIRE(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("shape mismatch is rejected with the offending node id") {
  Tape tape;
  const int a = tape.leaf(Tensor(2, 3));
  const int b = tape.leaf(Tensor(2, 3));
  try {
    tape.matmul(a, b);
    FAIL("expected shape mismatch");
  } catch (const std::invalid_argument& e) {
    REQUIRE(std::string(e.what()).find("tape node 2") != std::string::npos);
  }
}

TEST_CASE("non-scalar loss is rejected") {
  Tape tape;
  const int a = tape.leaf(Tensor(2, 2), true);
  REQUIRE_THROWS_AS(tape.gradient_single(a, a), std::invalid_argument);
}

TEST_CASE("finite difference checker validates its step") {
  auto f = [](const Tensor& x) -> std::pair<double, Tensor> {
    Tensor g(x.rows, x.cols);
    double s = 0.0;
    for (size_t k = 0; k < x.numel(); ++k) {
      s += x.v[k] * x.v[k];
      g.v[k] = 2.0 * x.v[k];
    }
    return {s, g};
  };
  const Tensor at = Tensor::full(1, 3, 0.5);
  REQUIRE(vtc::finite_difference_check(f, at, 1e-4) < 1e-8);
  REQUIRE_THROWS_AS(vtc::finite_difference_check(f, at, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(vtc::finite_difference_check(f, at, 0.5), std::invalid_argument);
}
