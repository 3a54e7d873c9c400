#include "chaosmetro/meanfield.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "chaosmetro/parallel.hpp"

namespace chaosmetro {

namespace {

constexpr double kTwoPi = 2 * std::numbers::pi;
// Longer periods (omega -> 0) evaluate the drive on the fly.
constexpr double kMaxTable = 1 << 20;

struct Derivative {
  double dphi;
  double dz;
};

// RHS in (phi, z) with the drive value supplied by the caller.
inline Derivative rhs_with_drive(double phi, double z, double drive, const ModelParams& p, long& clamps) {
  constexpr double zmax = 1.0 - kPoleGuard;
  if (z > zmax || z < -zmax) {
    z = std::copysign(zmax, z);
    ++clamps;
  }
  const double root = std::sqrt(1.0 - z * z);
  const double s = std::sin(phi);
  const double c = std::cos(phi);
  return {z * p.chi - z * drive * c / root - p.bz, drive * root * s};
}

// The (phi, z) equations are the precession dn/dt = Omega x n of the unit
// vector n = (sqrt(1-z^2) cos phi, sqrt(1-z^2) sin phi, z) about
// Omega = (B_x cos wt, 0, chi n_z - B_z). Integrating n avoids the
// coordinate singularity at the poles.
struct Vec3 {
  double x, y, z;
};

inline Vec3 precession(const Vec3& n, double drive, const ModelParams& p) {
  const double wz = p.chi * n.z - p.bz;
  return {-wz * n.y, wz * n.x - drive * n.z, drive * n.y};
}

inline Vec3 axpy(const Vec3& a, double s, const Vec3& d) { return {a.x + s * d.x, a.y + s * d.y, a.z + s * d.z}; }

Vec3 to_cartesian(const MeanFieldState& st) {
  const double z = std::max(-1.0, std::min(1.0, st.z));
  const double r = std::sqrt(1.0 - z * z);
  return {r * std::cos(st.phi), r * std::sin(st.phi), z};
}

// Fixed-step RK4 whose drive values come from a per-period table when the
// step divides the period, so every period replays identical coefficients.
class Rk4 {
 public:
  Rk4(const ModelParams& p, double h) : p_(p), h_(h) {
    const double period = p.period();
    const double k = std::round(period / h);
    if (k >= 1 && k <= kMaxTable && std::abs(k * h - period) <= 1e-12 * period) {
      steps_per_period_ = static_cast<long>(k);
      table_.resize(2 * steps_per_period_ + 1);
      for (std::size_t i = 0; i < table_.size(); ++i)
        table_[i] = p.bx * std::cos(kTwoPi * static_cast<double>(i) / (2.0 * steps_per_period_));
    }
  }

  // Advances n from step index k (time k h) by one step.
  void step(long k, Vec3& n) const {
    double d0, dh, d1;
    if (steps_per_period_ > 0) {
      const long j = k % steps_per_period_;
      d0 = table_[2 * j];
      dh = table_[2 * j + 1];
      d1 = table_[2 * j + 2];
    } else {
      const double t = k * h_;
      d0 = p_.bx * std::cos(p_.omega * t);
      dh = p_.bx * std::cos(p_.omega * (t + h_ / 2));
      d1 = p_.bx * std::cos(p_.omega * (t + h_));
    }
    const double hh = h_ / 2;
    const Vec3 k1 = precession(n, d0, p_);
    const Vec3 k2 = precession(axpy(n, hh, k1), dh, p_);
    const Vec3 k3 = precession(axpy(n, hh, k2), dh, p_);
    const Vec3 k4 = precession(axpy(n, h_, k3), d1, p_);
    n.x += h_ / 6 * (k1.x + 2 * k2.x + 2 * k3.x + k4.x);
    n.y += h_ / 6 * (k1.y + 2 * k2.y + 2 * k3.y + k4.y);
    n.z += h_ / 6 * (k1.z + 2 * k2.z + 2 * k3.z + k4.z);
    // RK4 leaves |n| = 1 up to O(h^5) per step; project back onto the sphere.
    const double inv = 1.0 / std::sqrt(n.x * n.x + n.y * n.y + n.z * n.z);
    n.x *= inv;
    n.y *= inv;
    n.z *= inv;
  }

 private:
  const ModelParams& p_;
  double h_;
  long steps_per_period_ = 0;
  std::vector<double> table_;
};

double clamp_unit(double z) { return std::max(-1.0, std::min(1.0, z)); }

// z of the renormalized vector; counts the (rare) reports that needed clamping.
double report_z(const Vec3& n, long& clamps) {
  const double z = n.z / std::sqrt(n.x * n.x + n.y * n.y + n.z * n.z);
  if (std::abs(z) > 1.0) ++clamps;
  return clamp_unit(z);
}

// The branch of `angle` (+2 pi k) closest to `reference`.
double unwrap_towards(double angle, double reference) {
  return angle + kTwoPi * std::round((reference - angle) / kTwoPi);
}

}  // namespace

double wrap_phase(double phi) {
  double w = std::fmod(phi, kTwoPi);
  if (w < 0) w += kTwoPi;
  if (w >= kTwoPi) w = 0;
  return w;
}

MeanFieldState classical_from_bloch(double theta, double phi) { return {wrap_phase(-phi), -std::cos(theta)}; }

MeanFieldRhs mf_rhs(const MeanFieldState& state, double t, const ModelParams& params) {
  long clamps = 0;
  const double drive = params.bx * std::cos(params.omega * t);
  const Derivative d = rhs_with_drive(state.phi, state.z, drive, params, clamps);
  return {d.dphi, d.dz, clamps > 0};
}

double mf_energy(const MeanFieldState& state, double t, const ModelParams& params) {
  const double z = clamp_unit(state.z);
  return 0.5 * params.chi * z * z - params.bz * z +
         params.bx * std::cos(params.omega * t) * std::sqrt(1.0 - z * z) * std::cos(state.phi);
}

MeanFieldTrajectory integrate(const MeanFieldState& initial, const ModelParams& params, double t_end, double h,
                              long record_every) {
  if (!(h > 0)) throw ValidationError("h", "step must be positive");
  if (!(t_end >= 0)) throw ValidationError("t_end", "must be non-negative");
  if (record_every < 1) throw ValidationError("record_every", "must be >= 1");
  const double steps_real = std::round(t_end / h);
  if (std::abs(steps_real * h - t_end) > 1e-9 * std::max(1.0, t_end))
    throw ValidationError("h", "step must divide the integration window");
  const long steps = static_cast<long>(steps_real);

  MeanFieldTrajectory out;
  const Rk4 rk4(params, h);
  Vec3 n = to_cartesian(initial);
  double phi = initial.phi;
  out.times.push_back(0.0);
  out.states.push_back({phi, report_z(n, out.clamp_events)});
  for (long k = 0; k < steps; ++k) {
    rk4.step(k, n);
    if ((k + 1) % record_every == 0) {
      phi = unwrap_towards(std::atan2(n.y, n.x), phi);
      out.times.push_back((k + 1) * h);
      out.states.push_back({phi, report_z(n, out.clamp_events)});
    }
  }
  out.steps = steps;
  return out;
}

long PoincareSection::total_clamps() const {
  long total = 0;
  for (const auto& tr : trajectories) total += tr.clamp_events;
  return total;
}

long PoincareSection::total_steps() const {
  return static_cast<long>(trajectories.size()) * n_periods * steps_per_period;
}

PoincareSection poincare_section(const std::vector<MeanFieldState>& initials, const ModelParams& params,
                                 long n_periods, int steps_per_period, unsigned workers) {
  if (initials.empty()) throw ValidationError("seeds", "need at least one initial condition");
  if (n_periods < 1) throw ValidationError("periods", "must be >= 1");
  if (steps_per_period < 1) throw ValidationError("rk4_divisor", "must be >= 1");
  if (!(params.omega > 0)) throw ValidationError("omega", "must be positive");

  PoincareSection section;
  section.params = params;
  section.n_periods = n_periods;
  section.steps_per_period = steps_per_period;
  section.trajectories.resize(initials.size());

  const double h = params.period() / steps_per_period;
  const Rk4 rk4(params, h);

  parallel_for(initials.size(), workers, [&](std::size_t i) {
    SectionTrajectory& tr = section.trajectories[i];
    tr.seed = initials[i];
    tr.points.reserve(n_periods);
    Vec3 n = to_cartesian(initials[i]);
    long k = 0;
    for (long period = 1; period <= n_periods; ++period) {
      for (int s = 0; s < steps_per_period; ++s, ++k) rk4.step(k, n);
      if (!std::isfinite(n.x) || !std::isfinite(n.y) || !std::isfinite(n.z)) {
        tr.aborted = true;
        break;
      }
      tr.points.push_back({wrap_phase(std::atan2(n.y, n.x)), report_z(n, tr.clamp_events)});
    }
  });
  return section;
}

std::vector<MeanFieldState> seed_grid(int n, double z_min, double z_max) {
  if (n < 1) throw ValidationError("seed_grid", "need at least one seed per axis");
  std::vector<MeanFieldState> seeds;
  seeds.reserve(static_cast<std::size_t>(n) * n);
  for (int iz = 0; iz < n; ++iz) {
    const double z = n > 1 ? z_min + (z_max - z_min) * iz / (n - 1) : 0.5 * (z_min + z_max);
    for (int ip = 0; ip < n; ++ip) seeds.push_back({kTwoPi * ip / n, z});
  }
  return seeds;
}

}  // namespace chaosmetro
