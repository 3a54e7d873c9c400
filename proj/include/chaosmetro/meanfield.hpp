#pragma once

// Classical mean-field dynamics in (phi, z):
//   dphi/dt = z chi - z B_x cos(wt) cos(phi) / sqrt(1 - z^2) - B_z
//   dz/dt   = B_x cos(wt) sqrt(1 - z^2) sin(phi)
// Integration runs on the equivalent unit vector
// n = (sqrt(1 - z^2) cos phi, sqrt(1 - z^2) sin phi, z), which has no pole
// singularity; mf_rhs evaluates the (phi, z) form directly.

#include <cstddef>
#include <vector>

#include "chaosmetro/propagation.hpp"

namespace chaosmetro {

/// mf_rhs clamps z to +-(1 - kPoleGuard).
inline constexpr double kPoleGuard = 1e-12;
inline constexpr int kDefaultRk4Divisor = 1000;
inline constexpr long kDefaultSectionPeriods = 500;

struct MeanFieldState {
  double phi = 0;  ///< unwrapped
  double z = 0;
};

struct MeanFieldRhs {
  double dphi_dt = 0;
  double dz_dt = 0;
  bool clamped = false;
};

MeanFieldRhs mf_rhs(const MeanFieldState& state, double t, const ModelParams& params);

/// Classical energy whose Hamilton equations (dphi/dt = dH/dz,
/// dz/dt = -dH/dphi) are the equations above.
double mf_energy(const MeanFieldState& state, double t, const ModelParams& params);

struct MeanFieldTrajectory {
  std::vector<double> times;
  std::vector<MeanFieldState> states;
  /// Recorded samples whose z needed clamping into [-1, 1].
  long clamp_events = 0;
  long steps = 0;
};

/// Fixed-step classical RK4 from t = 0 to t_end, recording every
/// `record_every` steps (the initial state is always recorded).
MeanFieldTrajectory integrate(const MeanFieldState& initial, const ModelParams& params, double t_end,
                              double h, long record_every = 1);

struct SectionTrajectory {
  MeanFieldState seed;
  /// Samples at t = T, 2T, ..., phi wrapped to [0, 2 pi).
  std::vector<MeanFieldState> points;
  long clamp_events = 0;
  bool aborted = false;
};

struct PoincareSection {
  std::vector<SectionTrajectory> trajectories;
  ModelParams params;
  long n_periods = 0;
  int steps_per_period = kDefaultRk4Divisor;

  long total_clamps() const;
  long total_steps() const;
};

PoincareSection poincare_section(const std::vector<MeanFieldState>& initials, const ModelParams& params,
                                 long n_periods = kDefaultSectionPeriods,
                                 int steps_per_period = kDefaultRk4Divisor, unsigned workers = 0);

/// Uniform n x n seeds over [0, 2 pi) x [z_min, z_max].
std::vector<MeanFieldState> seed_grid(int n = 24, double z_min = -0.98, double z_max = 0.98);

double wrap_phase(double phi);

/// Classical point matching the spin coherent state |theta, phi> under the
/// quantum dynamics: z = -cos(theta), phi -> -phi (see README, "Coordinates").
MeanFieldState classical_from_bloch(double theta, double phi);

}  // namespace chaosmetro
