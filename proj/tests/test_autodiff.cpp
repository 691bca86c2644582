#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "p2plab/autodiff.hpp"

using namespace p2plab;
using namespace p2plab::ad;

namespace {

Mat random_mat(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Mat m(r, c);
  for (auto& v : m.a) v = d(rng);
  return m;
}

}  // namespace

TEST_CASE("softmax of zeros is uniform and rows sum to one") {
  Tape t;
  Var x = t.value(Mat(3, 4, 0.0));
  Var y = t.softmax_rows(x);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      CHECK(y.val().at(r, c) == Catch::Approx(0.25).margin(1e-15));

  Rng rng(7);
  Var z = t.softmax_rows(t.value(random_mat(5, 9, rng, -30.0, 30.0)));
  for (int r = 0; r < 5; ++r) {
    double s = 0.0;
    for (int c = 0; c < 9; ++c) {
      CHECK(z.val().at(r, c) > 0.0);
      s += z.val().at(r, c);
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("matmul with identity returns input") {
  Rng rng(3);
  Mat a = random_mat(4, 4, rng);
  Mat eye(4, 4);
  for (int i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  Tape t;
  Var y = t.matmul(t.constant(a), t.constant(eye));
  for (std::size_t k = 0; k < a.size(); ++k)
    CHECK(y.val().a[k] == Catch::Approx(a.a[k]).margin(1e-15));
}

TEST_CASE("tanh(0) is 0, d(x^2)/dx at 3 is 6") {
  Tape t;
  CHECK(t.tanh(t.value(Mat::scalar(0.0))).val().a[0] == 0.0);

  Mat x = Mat::scalar(3.0);
  Tape t2;
  Var xv = t2.param(x);
  Var loss = t2.sum(t2.square(xv));
  t2.backward(loss);
  CHECK(t2.grad_of(x).a[0] == Catch::Approx(6.0).margin(1e-12));
}

TEST_CASE("unreached parameters get zero gradient; frozen leaves have none") {
  Mat used = Mat::scalar(2.0);
  Mat unused = Mat::scalar(5.0);
  Mat frozen = Mat::scalar(4.0);
  Tape t;
  Var u = t.param(used);
  (void)t.param(unused);
  Var f = t.constant(frozen);
  Var loss = t.sum(t.mul(u, f));
  t.backward(loss);
  CHECK(t.grad_of(used).a[0] == Catch::Approx(4.0));
  CHECK(t.grad_of(unused).a[0] == 0.0);
  CHECK_THROWS_AS(t.grad_of(frozen), NumericalError);
}

TEST_CASE("three-layer MLP gradient matches finite differences") {
  Rng rng(11);
  Mat x = random_mat(5, 6, rng);
  Mat w1 = random_mat(6, 8, rng), b1 = random_mat(1, 8, rng);
  Mat w2 = random_mat(8, 8, rng), b2 = random_mat(1, 8, rng);
  Mat w3 = random_mat(8, 2, rng), b3 = random_mat(1, 2, rng);
  auto f = [&](Tape& t, std::vector<Var>& vs) {
    Var h1 = t.tanh(t.add(t.matmul(t.constant(x), vs[0]), vs[1]));
    Var h2 = t.tanh(t.add(t.matmul(h1, vs[2]), vs[3]));
    Var out = t.add(t.matmul(h2, vs[4]), vs[5]);
    return t.mean(t.square(out));
  };
  double err = grad_check(f, {w1, b1, w2, b2, w3, b3}, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("grad_check on a linear map is exact to 1e-9") {
  Rng rng(13);
  Mat x = random_mat(3, 4, rng);
  Mat c = random_mat(3, 4, rng);
  auto f = [&](Tape& t, std::vector<Var>& vs) {
    return t.sum(t.mul(vs[0], t.constant(c)));
  };
  CHECK(grad_check(f, {x}, 1e-5) < 1e-9);
}

TEST_CASE("grad_check on softmax cross-entropy composite") {
  Rng rng(17);
  Mat logits = random_mat(4, 5, rng, -2.0, 2.0);
  Mat targets(4, 5);
  for (int r = 0; r < 4; ++r) targets.at(r, r % 5) = 1.0;
  auto f = [&](Tape& t, std::vector<Var>& vs) {
    Var p = t.softmax_rows(vs[0]);
    Var ll = t.mul(t.log(p), t.constant(targets));
    return t.scale(t.mean(ll), -1.0);
  };
  CHECK(grad_check(f, {logits}, 1e-5) < 1e-4);
}

TEST_CASE("deliberately wrong gradient is flagged with error near 1") {
  // Same relative-error metric grad_check uses, applied to a doctored
  // analytic gradient (2x the true one): error should sit near 1.0, far
  // above any tolerance used in the suite.
  Mat x = Mat::scalar(1.7);
  Tape t;
  Var xv = t.param(x);
  t.backward(t.sum(t.square(xv)));
  double analytic = t.grad_of(x).a[0];
  double doctored = 2.0 * analytic;
  double h = 1e-5;
  auto f = [](double v) { return v * v; };
  double fd = (f(1.7 + h) - f(1.7 - h)) / (2 * h);
  double err = std::abs(doctored - fd) / std::max(std::abs(fd), 1e-6);
  CHECK(err == Catch::Approx(1.0).margin(1e-3));
}

TEST_CASE("per-op gradients agree with finite differences") {
  Rng rng(23);
  const double tol = 1e-4;

  SECTION("matmul incl. transpose flags") {
    Mat a = random_mat(3, 4, rng), b = random_mat(4, 2, rng);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                return t.mean(t.square(t.matmul(v[0], v[1])));
              },
              {a, b}) < tol);
    Mat bt = random_mat(2, 4, rng);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                return t.mean(t.square(t.matmul(v[0], v[1], false, true)));
              },
              {a, bt}) < tol);
    Mat at = random_mat(4, 3, rng);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                return t.mean(t.square(t.matmul(v[0], v[1], true, false)));
              },
              {at, b}) < tol);
  }

  SECTION("bmm both variants") {
    Mat q = random_mat(6, 4, rng), k = random_mat(6, 4, rng);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                return t.mean(t.square(t.bmm(v[0], v[1], 3, true)));
              },
              {q, k}) < tol);
    Mat p = random_mat(6, 3, rng), val = random_mat(6, 5, rng);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                return t.mean(t.square(t.bmm(v[0], v[1], 3, false)));
              },
              {p, val}) < tol);
  }

  SECTION("add/sub/mul with broadcasts") {
    Mat a = random_mat(3, 4, rng), b = random_mat(3, 4, rng);
    Mat bias = random_mat(1, 4, rng), sc = random_mat(1, 1, rng);
    for (auto* rhs : {&b, &bias, &sc}) {
      CHECK(grad_check(
                [&](Tape& t, std::vector<Var>& v) {
                  return t.mean(t.square(t.add(v[0], v[1])));
                },
                {a, *rhs}) < tol);
      CHECK(grad_check(
                [&](Tape& t, std::vector<Var>& v) {
                  return t.mean(t.square(t.sub(v[0], v[1])));
                },
                {a, *rhs}) < tol);
      CHECK(grad_check(
                [&](Tape& t, std::vector<Var>& v) {
                  return t.mean(t.square(t.mul(v[0], v[1])));
                },
                {a, *rhs}) < tol);
    }
  }

  SECTION("unary chain: scale tanh exp log sqrt square abs_smooth clamp") {
    Mat a = random_mat(2, 5, rng, 0.3, 1.5);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                Var y = t.scale(v[0], 1.7, -0.2);
                y = t.tanh(y);
                y = t.exp(y);
                y = t.log(y);
                y = t.square(y);
                y = t.abs_smooth(y, 1e-3);
                y = t.sqrt(y);
                return t.mean(y);
              },
              {a}) < tol);
    // clamp: keep samples away from the kinks
    Mat b = random_mat(2, 5, rng, -0.4, 0.4);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                return t.mean(t.square(t.clamp(v[0], -0.5, 0.5)));
              },
              {b}) < tol);
  }

  SECTION("softmax, min, reductions") {
    Mat a = random_mat(3, 6, rng), b = random_mat(3, 6, rng);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                return t.mean(t.square(t.softmax_rows(v[0])));
              },
              {a}) < tol);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                return t.mean(t.square(t.minimum(v[0], v[1])));
              },
              {a, b}) < tol);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                return t.square(t.sum(v[0]));
              },
              {a}) < tol);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                return t.mean(t.square(t.sum_rows(v[0])));
              },
              {a}) < tol);
  }

  SECTION("structure ops: concat slice gather reshape") {
    Mat a = random_mat(3, 4, rng), b = random_mat(3, 2, rng);
    Mat c = random_mat(2, 4, rng);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                Var cc = t.concat_cols(v[0], v[1]);
                Var s = t.slice_cols(cc, 1, 3);
                return t.mean(t.square(s));
              },
              {a, b}) < tol);
    CHECK(grad_check(
              [&](Tape& t, std::vector<Var>& v) {
                Var rr = t.concat_rows(v[0], v[1]);
                Var g = t.gather_rows(rr, {4, 0, 2, 2});
                Var rs = t.reshape(g, 2, 8);
                return t.mean(t.square(rs));
              },
              {a, c}) < tol);
  }
}

TEST_CASE("backward is deterministic across repeated runs") {
  Rng rng(31);
  Mat x = random_mat(4, 4, rng), w = random_mat(4, 4, rng);
  auto run = [&]() {
    Tape t;
    Var xv = t.param(x);
    Var wv = t.param(w);
    Var y = t.softmax_rows(t.matmul(t.tanh(xv), wv));
    t.backward(t.mean(t.square(y)));
    return std::make_pair(t.grad_of(x), t.grad_of(w));
  };
  auto [gx1, gw1] = run();
  auto [gx2, gw2] = run();
  for (std::size_t k = 0; k < gx1.size(); ++k) CHECK(gx1.a[k] == gx2.a[k]);
  for (std::size_t k = 0; k < gw1.size(); ++k) CHECK(gw1.a[k] == gw2.a[k]);
}

TEST_CASE("nan guard throws on non-finite op output") {
  set_nan_guard(true);
  Tape t;
  Var x = t.value(Mat::scalar(-1.0));
  CHECK_THROWS_AS(t.sqrt(x), NumericalError);
  CHECK_THROWS_AS(t.log(x), NumericalError);
  set_nan_guard(false);
}

TEST_CASE("re-attaching a parameter reuses the leaf and sums both uses") {
  // loss = sum(x) + sum(x^2): two separate param() calls on the same matrix
  // must land on one leaf, so the gradient is 1 + 2x, not just one branch.
  Mat x(1, 3);
  x.a = {0.5, -1.0, 2.0};
  Tape t;
  Var a = t.param(x);
  Var b = t.param(x);
  CHECK(a.id == b.id);
  Var loss = t.add(t.sum(a), t.sum(t.square(b)));
  t.backward(loss);
  Mat g = t.grad_of(x);
  for (int j = 0; j < 3; ++j)
    CHECK(g.a[j] == Catch::Approx(1.0 + 2.0 * x.a[j]).margin(1e-12));
}
