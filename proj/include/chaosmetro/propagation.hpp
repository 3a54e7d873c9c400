#pragma once

// One-period Floquet propagators for
//   H(t) = (chi/N) Sz^2 + B_z Sz + B_x cos(omega t) Sx
// and stroboscopic evolution, including the B_z-derivative of final states.

#include <Eigen/Dense>

#include <compare>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "chaosmetro/spin_core.hpp"

namespace chaosmetro {

inline constexpr int kDefaultSteps = 1000;
inline constexpr double kDefaultEpsilon = 1e-5;

struct ModelParams {
  double chi = 10.0;
  double bz = std::numbers::pi / 2;
  double bx = 1.5;
  double omega = 2 * std::numbers::pi;
  int n_atoms = 100;

  double period() const noexcept { return 2 * std::numbers::pi / omega; }
  double j() const noexcept { return 0.5 * n_atoms; }
  ModelParams with_bz(double value) const {
    ModelParams p = *this;
    p.bz = value;
    return p;
  }
  /// Throws ValidationError naming the offending field.
  void validate() const;

  auto operator<=>(const ModelParams&) const = default;
};

enum class StepMethod { SplitStep, ExactStep };

/// Order of the split-step scheme: plain Strang, or the symmetric
/// triple-jump composition of Strang substeps.
enum class SplitOrder { Second = 2, Fourth = 4 };
inline constexpr SplitOrder kDefaultSplitOrder = SplitOrder::Fourth;

struct PeriodPropagator {
  Eigen::MatrixXcd u;
  ModelParams params;
  int steps = kDefaultSteps;
  StepMethod method = StepMethod::SplitStep;
  SplitOrder order = kDefaultSplitOrder;
};

/// Split-step factors of a single period, applicable to any block of
/// column vectors without forming U. Each Strang substep uses the drive at
/// its own midpoint.
class SplitStepper {
 public:
  SplitStepper(const ModelParams& params, int steps, SplitOrder order = kDefaultSplitOrder);

  /// block <- U(T;0) block
  void apply_period(Eigen::MatrixXcd& block) const;
  /// U(T;0); for an even step count built from the first half-period alone.
  Eigen::MatrixXcd period_matrix() const;
  Eigen::Index dim() const noexcept { return full_phase_.size(); }
  /// Strang substeps per period.
  Eigen::Index substeps() const noexcept { return drive_phases_.cols(); }

 private:
  void apply_substeps(Eigen::MatrixXcd& block, Eigen::Index count) const;

  Eigen::VectorXcd full_phase_;   // exp(-i H1 T), used when B_x = 0
  Eigen::VectorXcd edge_half_;    // exp(-i H1 tau / 2) for the first and last substep
  Eigen::MatrixXcd to_x_;         // Vx^dagger
  Eigen::MatrixXcd from_x_;       // Vx
  std::vector<Eigen::MatrixXcd> bridges_;  // Vx^dagger exp(-i H1 (tau_j + tau_j+1)/2) Vx
  std::vector<int> bridge_index_;          // substep j -> bridges_ entry after it
  Eigen::MatrixXcd drive_phases_;  // column j: exp(-i cos(w t_j) B_x lambda tau_j)
  int steps_ = 0;
  bool static_ = false;
};

PeriodPropagator period_propagator(const ModelParams& params, int steps = kDefaultSteps,
                                   StepMethod method = StepMethod::SplitStep,
                                   SplitOrder order = kDefaultSplitOrder);

/// max |U^dagger U - I|
double unitarity_defect(const Eigen::MatrixXcd& u);

/// Process-safe memo of propagators keyed on every input that affects U.
class PropagatorCache {
 public:
  std::shared_ptr<const PeriodPropagator> get(const ModelParams& params, int steps = kDefaultSteps,
                                              StepMethod method = StepMethod::SplitStep,
                                              SplitOrder order = kDefaultSplitOrder);
  std::size_t size() const;

 private:
  using Key = std::tuple<double, double, double, double, int, int, StepMethod, SplitOrder>;
  mutable std::mutex mutex_;
  std::map<Key, std::shared_ptr<const PeriodPropagator>> entries_;
};

/// U^(2^k) built by repeated squaring; apply(n) uses the binary expansion of n.
class PropagatorPowers {
 public:
  PropagatorPowers(Eigen::MatrixXcd u, long max_periods);

  Eigen::VectorXcd apply(long n, const Eigen::VectorXcd& psi) const;
  Eigen::MatrixXcd power(long n) const;
  long max_periods() const noexcept { return max_periods_; }

 private:
  std::vector<Eigen::MatrixXcd> squares_;  // squares_[k] = U^(2^k)
  long max_periods_;
};

enum class EvolveMode { MatVec, RepeatedSquaring };

struct Trajectory {
  std::vector<long> periods;
  std::vector<Eigen::VectorXcd> states;
  double max_norm_drift = 0;
  int renormalizations = 0;
  std::vector<std::string> warnings;
};

/// psi(nT) = U^n psi0, recorded at the requested periods (final state only
/// when `record` is empty).
Trajectory stroboscopic_evolve(const PeriodPropagator& prop, const Eigen::VectorXcd& psi0,
                               long n_periods, std::span<const long> record = {},
                               EvolveMode mode = EvolveMode::MatVec);

struct DerivativeBundle {
  std::shared_ptr<const PeriodPropagator> u_minus;
  std::shared_ptr<const PeriodPropagator> u_plus;
  double epsilon = kDefaultEpsilon;
};

DerivativeBundle derivative_bundle(const ModelParams& params, double epsilon, int steps = kDefaultSteps,
                                   StepMethod method = StepMethod::SplitStep,
                                   PropagatorCache* cache = nullptr);

enum class EncodingStrategy { Auto, Direct, Propagator };

struct EncodingOptions {
  double epsilon = kDefaultEpsilon;
  int steps = kDefaultSteps;
  StepMethod method = StepMethod::SplitStep;
  SplitOrder order = kDefaultSplitOrder;
  /// false: evolve at B_z only (dpsi empty, qfi NaN).
  bool derivative = true;
  bool richardson = true;
  double richardson_rtol = 1e-3;
  EncodingStrategy strategy = EncodingStrategy::Auto;
};

/// Final states at B_z - eps, B_z, B_z + eps, all from one schedule.
struct EncodedStates {
  Eigen::VectorXcd psi_minus;
  Eigen::VectorXcd psi_mid;
  Eigen::VectorXcd psi_plus;
  double epsilon = 0;
  long n_periods = 0;
};

struct DerivativeResult {
  Eigen::VectorXcd psi_f;
  Eigen::VectorXcd dpsi;
  EncodedStates encoded;
  double qfi = 0;
  /// QFI from the eps/2 central difference; NaN when the check is disabled.
  double qfi_half = 0;
  bool richardson_ok = true;
  std::vector<std::string> warnings;
};

/// Step size that keeps eps * t * J well inside the central-difference
/// regime: min(base, scale / (t J)).
double auto_epsilon(double t, double j, double base = kDefaultEpsilon, double scale = 1e-2);

/// Evolves initial states at B_z and at the finite-difference offsets around
/// it. Construction does the expensive part; encode() is const and safe to
/// call from many threads.
class ParameterEncoder {
 public:
  ParameterEncoder(const ModelParams& params, long n_periods, const EncodingOptions& options = {},
                   std::size_t expected_states = 1, PropagatorCache* cache = nullptr);

  DerivativeResult encode(const Eigen::VectorXcd& psi0) const;
  /// One result per entry of `periods` (each <= n_periods, ascending).
  std::vector<DerivativeResult> encode_schedule(const Eigen::VectorXcd& psi0,
                                                std::span<const long> periods) const;

  EncodingStrategy strategy() const noexcept { return strategy_; }
  const ModelParams& params() const noexcept { return params_; }
  long n_periods() const noexcept { return n_periods_; }
  double epsilon() const noexcept { return options_.epsilon; }

 private:
  DerivativeResult assemble(std::vector<Eigen::VectorXcd> finals, long n) const;

  ModelParams params_;
  long n_periods_;
  EncodingOptions options_;
  EncodingStrategy strategy_;
  std::vector<double> offsets_;                 // B_z offsets, mid first
  std::vector<SplitStepper> steppers_;          // Direct strategy
  std::vector<PropagatorPowers> powers_;        // Propagator strategy
  std::vector<Eigen::MatrixXcd> final_maps_;    // U^n for the common single-n case
};

DerivativeResult derivative_state(const ModelParams& params, const Eigen::VectorXcd& psi0,
                                  long n_periods, const EncodingOptions& options = {});

struct FloquetHamiltonian {
  Eigen::MatrixXcd h;
  /// -arg(eigenvalue of U) / T, ascending
  Eigen::VectorXd quasienergies;
  bool branch_cut_flagged = false;
};

/// H_F = (i/T) log U on the principal branch.
FloquetHamiltonian floquet_hamiltonian(const PeriodPropagator& prop);

}  // namespace chaosmetro
