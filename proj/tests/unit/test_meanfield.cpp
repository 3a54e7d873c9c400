#include <doctest.h>

#include <cmath>
#include <numbers>

#include "chaosmetro/meanfield.hpp"
#include "chaosmetro/metrology.hpp"

using namespace chaosmetro;
constexpr double kPi = std::numbers::pi;

namespace {

ModelParams fig1(double bx) {
  ModelParams p;
  p.chi = 10;
  p.bz = kPi / 2;
  p.bx = bx;
  return p;
}

// One stroboscopic period of the classical map.
MeanFieldState period_map(const MeanFieldState& s, const ModelParams& p) {
  const auto sec = poincare_section({s}, p, 1, 1000, 1);
  return sec.trajectories[0].points[0];
}

double phase_diff(double a, double b) { return std::remainder(a - b, 2 * kPi); }

}  // namespace

TEST_CASE("right-hand side examples") {
  const ModelParams p = fig1(1.5);
  const auto d = mf_rhs({kPi / 2, 0.5}, 0.0, p);
  CHECK(d.dz_dt == doctest::Approx(1.5 * std::sqrt(0.75)).epsilon(1e-12));
  CHECK(d.dphi_dt == doctest::Approx(5 - kPi / 2).epsilon(1e-12));
  for (double phi : {0.0, 1.0, 4.0})
    for (double t : {0.0, 0.3, 0.71}) CHECK(mf_rhs({phi, 0.0}, t, p).dphi_dt == -p.bz);
  const ModelParams still = fig1(0.0);
  for (double z : {-0.9, 0.1, 0.99}) CHECK(mf_rhs({2.0, z}, 0.4, still).dz_dt == 0.0);
  const auto pole = mf_rhs({1.0, 1.0}, 0.0, p);
  CHECK(pole.clamped);
  CHECK(std::isfinite(pole.dphi_dt));
}

TEST_CASE("undriven closed form") {
  const ModelParams p = fig1(0.0);
  const auto tr = integrate({0.4, 0.3}, p, 10.0, 1e-3, 100);
  for (std::size_t k = 0; k < tr.states.size(); ++k) {
    CHECK(std::abs(tr.states[k].z - 0.3) < 1e-12);
    CHECK(std::abs(tr.states[k].phi - (0.4 + (0.3 * p.chi - p.bz) * tr.times[k])) < 1e-8);
  }
  CHECK(tr.clamp_events == 0);
}

TEST_CASE("RK4 converges at fourth order") {
  const ModelParams p = fig1(1.5);
  const MeanFieldState s0{1.0, 0.2};
  const auto ref = integrate(s0, p, 2.0, 1.0 / 3200, 1);
  auto err = [&](int k) {
    const auto tr = integrate(s0, p, 2.0, 1.0 / k, 1);
    double e = 0;
    for (std::size_t i = 0; i < tr.states.size(); ++i) {
      const auto& r = ref.states[i * (3200 / k)];
      e = std::max({e, std::abs(tr.states[i].z - r.z), std::abs(tr.states[i].phi - r.phi)});
    }
    return e;
  };
  const double ratio = err(100) / err(200);
  CHECK(ratio > 13.0);
  CHECK(ratio < 19.0);
}

TEST_CASE("static drive conserves the classical energy") {
  ModelParams p = fig1(1.5);
  p.omega = 1e-12;
  const MeanFieldState s0{0.7, -0.4};
  const double e0 = mf_energy(s0, 0.0, p);
  const auto tr = integrate(s0, p, 100.0, 1e-3, 1000);
  for (std::size_t k = 0; k < tr.states.size(); ++k)
    CHECK(std::abs(mf_energy(tr.states[k], tr.times[k], p) - e0) < 1e-6);
}

TEST_CASE("integrate validates its inputs") {
  CHECK_THROWS_AS(integrate({0, 0}, fig1(1.5), 1.0, 0.3), ValidationError);
  CHECK_THROWS_AS(integrate({0, 0}, fig1(1.5), 1.0, -0.1), ValidationError);
}

TEST_CASE("undriven sections are horizontal and never chaotic") {
  const auto sec = poincare_section(seed_grid(8), fig1(0.0), 200, 1000);
  for (const auto& tr : sec.trajectories) {
    REQUIRE(tr.points.size() == 200);
    double mean = 0, var = 0;
    for (const auto& pt : tr.points) mean += pt.z;
    mean /= tr.points.size();
    for (const auto& pt : tr.points) var += (pt.z - mean) * (pt.z - mean);
    CHECK(var / tr.points.size() < 1e-20);
    for (const auto& pt : tr.points) {
      CHECK(pt.phi >= 0);
      CHECK(pt.phi < 2 * kPi);
    }
  }
}

TEST_CASE("sections are deterministic and worker independent") {
  const auto a = poincare_section(seed_grid(5), fig1(3.0), 100, 500, 1);
  const auto b = poincare_section(seed_grid(5), fig1(3.0), 100, 500, 4);
  for (std::size_t i = 0; i < a.trajectories.size(); ++i)
    for (std::size_t k = 0; k < a.trajectories[i].points.size(); ++k) {
      CHECK(a.trajectories[i].points[k].phi == b.trajectories[i].points[k].phi);
      CHECK(a.trajectories[i].points[k].z == b.trajectories[i].points[k].z);
    }
}

TEST_CASE("clamp events stay rare on the driven parameter sets") {
  for (double bx : {1.5, 3.0, 5.5}) {
    const auto sec = poincare_section(seed_grid(8), fig1(bx), 200, 1000);
    CHECK(static_cast<double>(sec.total_clamps()) < 1e-3 * sec.total_steps());
    for (const auto& tr : sec.trajectories) {
      CHECK_FALSE(tr.aborted);
      for (const auto& pt : tr.points) CHECK(std::abs(pt.z) <= 1.0);
    }
  }
}

TEST_CASE("stable fixed point of the period map stays put") {
  // Newton iteration on P(s) - s from a point inside the regular island.
  const ModelParams p = fig1(1.5);
  MeanFieldState s{3.065, 0.853};
  double jac_trace = 0, jac_det = 0;
  for (int it = 0; it < 20; ++it) {
    const MeanFieldState f = period_map(s, p);
    const double g0 = phase_diff(f.phi, s.phi), g1 = f.z - s.z;
    const double h = 1e-6;
    const MeanFieldState fp = period_map({s.phi + h, s.z}, p);
    const MeanFieldState fz = period_map({s.phi, s.z + h}, p);
    const double a = phase_diff(fp.phi, f.phi) / h, b = phase_diff(fz.phi, f.phi) / h;
    const double c = (fp.z - f.z) / h, d = (fz.z - f.z) / h;
    jac_trace = a + d;
    jac_det = a * d - b * c;
    // solve (DP - I) delta = -g
    const double m00 = a - 1, m01 = b, m10 = c, m11 = d - 1;
    const double det = m00 * m11 - m01 * m10;
    s.phi -= (m11 * g0 - m01 * g1) / det;
    s.z -= (-m10 * g0 + m00 * g1) / det;
    if (std::hypot(g0, g1) < 1e-12) break;
  }
  CAPTURE(s.phi);
  CAPTURE(s.z);
  CHECK(jac_det == doctest::Approx(1.0).epsilon(1e-4));  // area preserving
  CHECK(std::abs(jac_trace) < 2.0);                       // elliptic
  const auto sec = poincare_section({s}, p, 500, 1000);
  for (const auto& pt : sec.trajectories[0].points)
    CHECK(std::hypot(phase_diff(pt.phi, s.phi), pt.z - s.z) < 1e-3);
}

TEST_CASE("Bloch-to-classical mapping follows the quantum spin direction") {
  // One short period (T = 0.02) at large N: the SCS centre moves like the
  // classical point mapped through classical_from_bloch.
  ModelParams p = fig1(1.5);
  p.omega = 2 * kPi / 0.02;
  p.n_atoms = 1000;
  const double th = 2.0, ph = 1.0;
  const SpinSystem sys{p.n_atoms};
  const auto ops = shared_spin_operators(p.n_atoms);
  const auto prop = period_propagator(p, 200);
  const auto psi = stroboscopic_evolve(prop, coherent_state(sys, th, ph), 1).states.back();
  const Eigen::Vector3d s = spin_vector(psi, *ops);
  const double th1 = std::acos(s(2) / s.norm()), ph1 = std::atan2(s(1), s(0));

  const auto tr = integrate(classical_from_bloch(th, ph), p, 0.02, 1e-4, 200);
  const auto expect = classical_from_bloch(th1, wrap_phase(ph1));
  const auto start = classical_from_bloch(th, ph);
  const double moved = std::hypot(phase_diff(expect.phi, start.phi), expect.z - start.z);
  CHECK(moved > 0.05);  // the test is not vacuous
  CHECK(std::abs(phase_diff(tr.states.back().phi, expect.phi)) < 2e-3);
  CHECK(std::abs(tr.states.back().z - expect.z) < 2e-3);
}

TEST_CASE("mapping conventions") {
  const auto c = classical_from_bloch(0.0, 1.0);
  CHECK(c.z == doctest::Approx(-1.0));
  CHECK(c.phi == doctest::Approx(2 * kPi - 1.0));
  CHECK(wrap_phase(-0.5) == doctest::Approx(2 * kPi - 0.5));
  CHECK(wrap_phase(2 * kPi) == 0.0);
  const auto seeds = seed_grid(24);
  CHECK(seeds.size() == 576);
  CHECK(seeds.front().z == doctest::Approx(-0.98));
  CHECK(seeds.back().z == doctest::Approx(0.98));
}
