#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "chaosmetro/spin_core.hpp"

using namespace chaosmetro;
using C = std::complex<double>;
constexpr double kPi = std::numbers::pi;

namespace {

double max_abs(const Eigen::MatrixXcd& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("single spin-1/2 operators are Pauli/2") {
  const auto [sys, ops] = build_spin_system(1);
  CHECK(sys.dim() == 2);
  Eigen::Matrix2cd sz, sx, sy;
  sz << 0.5, 0, 0, -0.5;
  sx << 0, 0.5, 0.5, 0;
  sy << 0, C(0, -0.5), C(0, 0.5), 0;
  CHECK(max_abs(ops.sz - sz) < 1e-15);
  CHECK(max_abs(ops.sx - sx) < 1e-15);
  CHECK(max_abs(ops.sy - sy) < 1e-15);
}

TEST_CASE("operator algebra: hermiticity, commutators, Casimir, ladder structure") {
  for (int n : {1, 2, 4, 7, 40}) {
    CAPTURE(n);
    const auto [sys, ops] = build_spin_system(n);
    const double j = sys.j();
    const auto id = Eigen::MatrixXcd::Identity(sys.dim(), sys.dim());
    for (const auto* m : {&ops.sx, &ops.sy, &ops.sz}) CHECK(max_abs(*m - m->adjoint()) < 1e-12);
    const C i(0, 1);
    CHECK(max_abs(ops.sx * ops.sy - ops.sy * ops.sx - i * ops.sz) < 1e-10);
    CHECK(max_abs(ops.sy * ops.sz - ops.sz * ops.sy - i * ops.sx) < 1e-10);
    CHECK(max_abs(ops.sz * ops.sx - ops.sx * ops.sz - i * ops.sy) < 1e-10);
    const Eigen::MatrixXcd casimir = ops.sx * ops.sx + ops.sy * ops.sy + ops.sz * ops.sz;
    CHECK(max_abs(casimir - j * (j + 1) * id) < 1e-10);
    for (Eigen::Index r = 0; r < sys.dim(); ++r)
      for (Eigen::Index c = 0; c < sys.dim(); ++c)
        if (std::abs(r - c) > 1) {
          CHECK(std::abs(ops.sx(r, c)) == 0.0);
          CHECK(std::abs(ops.sy(r, c)) == 0.0);
        }
  }
  const auto [sys4, ops4] = build_spin_system(4);
  CHECK(max_abs(ops4.sx * ops4.sy - ops4.sy * ops4.sx - C(0, 1) * ops4.sz) < 1e-12);
  const auto [sys2, ops2] = build_spin_system(2);
  CHECK(max_abs(ops2.sx * ops2.sx + ops2.sy * ops2.sy + ops2.sz * ops2.sz - 2.0 * Eigen::MatrixXcd::Identity(3, 3)) <
        1e-12);
}

TEST_CASE("build_spin_system rejects bad particle numbers") {
  CHECK_THROWS_AS(build_spin_system(0), ValidationError);
  CHECK_THROWS_AS(build_spin_system(10, 8), ValidationError);
}

TEST_CASE("coherent state amplitudes") {
  const SpinSystem s2{2};
  const auto psi = coherent_state(s2, kPi / 2, 0.0);
  CHECK(std::abs(psi(0) - 0.5) < 1e-15);
  CHECK(std::abs(psi(1) - 1 / std::sqrt(2.0)) < 1e-15);
  CHECK(std::abs(psi(2) - 0.5) < 1e-15);

  const SpinSystem s9{9};
  const auto north = coherent_state(s9, 0.0, 1.3);
  CHECK(std::abs(north(0)) == doctest::Approx(1.0));
  CHECK(north.tail(9).norm() < 1e-15);
  const auto south = coherent_state(s9, kPi, 1.3);
  CHECK(std::abs(south(9)) == doctest::Approx(1.0));
  CHECK(south.head(9).norm() < 1e-15);

  // the closed form, evaluated with plain binomials at small N
  const SpinSystem s6{6};
  const double th = 1.1, ph = 2.5;
  const auto scs = coherent_state(s6, th, ph);
  for (int k = 0; k <= 6; ++k) {
    const double binom = std::tgamma(7.0) / (std::tgamma(k + 1.0) * std::tgamma(7.0 - k));
    const C expect = std::sqrt(binom) * std::pow(std::sin(th / 2), k) * std::pow(std::cos(th / 2), 6 - k) *
                     std::polar(1.0, k * ph);
    CHECK(std::abs(scs(k) - expect) < 1e-13);
  }
}

TEST_CASE("coherent states are normalised and maximal-spin up to N = 2000") {
  for (int n : {1, 20, 300, 2000}) {
    CAPTURE(n);
    const SpinSystem sys{n};
    const auto ops = shared_spin_operators(n);
    for (double th : {0.0, 0.3, kPi / 2, 2.423, kPi}) {
      const auto psi = coherent_state(sys, th, 1.126);
      CHECK(std::abs(psi.norm() - 1) < 1e-12);
      const double j = sys.j();
      const double sx = expectation(psi, ops->sx), sy = expectation(psi, ops->sy), sz = expectation(psi, ops->sz);
      CHECK(std::abs(sx * sx + sy * sy + sz * sz - j * j) < 1e-8 * j * j);
      CHECK(std::abs(sz - j * std::cos(th)) < 1e-9 * std::max(1.0, j));
    }
  }
  CHECK_THROWS_AS(coherent_state(SpinSystem{3}, -0.1, 0.0), ValidationError);
  CHECK_THROWS_AS(coherent_state(SpinSystem{3}, 1.0, 7.0), ValidationError);
}

TEST_CASE("expectation values") {
  const auto [sys, ops] = build_spin_system(20);
  CHECK(std::abs(expectation(coherent_state(sys, kPi / 2, 0.0), ops.sz)) < 1e-12);
  CHECK(expectation(coherent_state(sys, 0.0, 0.0), ops.sz) == doctest::Approx(10.0));
  CHECK(std::abs(expectation(coherent_state(sys, 0.7, 0.4), ops.sz) - 10 * std::cos(0.7)) < 1e-10);
  const Eigen::MatrixXcd wrong = Eigen::MatrixXcd::Identity(3, 3);
  CHECK_THROWS_AS(expectation(coherent_state(sys, 0.7, 0.4), wrong), std::invalid_argument);
  const Eigen::MatrixXcd anti = C(0, 1) * Eigen::MatrixXcd::Identity(sys.dim(), sys.dim());
  CHECK_THROWS_AS(expectation(coherent_state(sys, 0.7, 0.4), anti), NumericalError);
}

TEST_CASE("dicke states") {
  const SpinSystem sys{4};
  CHECK(dicke_state(sys, 2.0)(0) == C(1, 0));
  CHECK(dicke_state(sys, -2.0)(4) == C(1, 0));
  CHECK_THROWS_AS(dicke_state(sys, 0.5), ValidationError);
  CHECK_THROWS_AS(dicke_state(sys, 3.0), ValidationError);
}

TEST_CASE("measurement bases diagonalise their operator") {
  for (int n : {1, 6, 31}) {
    CAPTURE(n);
    const auto ops = shared_spin_operators(n);
    const double j = 0.5 * n;
    for (Axis a : {Axis::X, Axis::Y, Axis::Z}) {
      CAPTURE(to_string(a));
      const auto basis = measurement_basis(*ops, a);
      const Eigen::MatrixXcd& op = a == Axis::X ? ops->sx : a == Axis::Y ? ops->sy : ops->sz;
      const Eigen::MatrixXcd d = basis->vectors.adjoint() * op * basis->vectors;
      const Eigen::MatrixXcd expect = basis->eigenvalues.cast<C>().asDiagonal();
      CHECK(max_abs(d - expect) < 1e-10);
      for (Eigen::Index k = 0; k <= n; ++k) CHECK(std::abs(basis->eigenvalues(k) - (-j + k)) < 1e-10);
      CHECK(measurement_basis(*ops, a).get() == basis.get());
    }
  }
  const auto ops1 = shared_spin_operators(1);
  const auto bx = measurement_basis(*ops1, Axis::X);
  CHECK(std::abs(std::abs(bx->vectors(0, 0)) - 1 / std::sqrt(2.0)) < 1e-12);
  CHECK(std::abs(bx->vectors(0, 0) + bx->vectors(1, 0)) < 1e-12);  // (1, -1)/sqrt 2 for -1/2
  CHECK(parse_axis("y") == Axis::Y);
  CHECK_THROWS_AS(parse_axis("w"), ValidationError);
}
