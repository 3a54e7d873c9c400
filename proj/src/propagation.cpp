#include "chaosmetro/propagation.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

#include "chaosmetro/metrology.hpp"

namespace chaosmetro {

namespace {

constexpr double kUnitarityTol = 1e-9;
constexpr double kNormDriftTol = 1e-10;

Eigen::VectorXd static_energies(const ModelParams& p, const Eigen::VectorXd& m) {
  return (p.chi / p.n_atoms) * m.array().square() + p.bz * m.array();
}

Eigen::VectorXcd phase_vector(const Eigen::VectorXd& energies, double dt) {
  Eigen::VectorXcd out(energies.size());
  for (Eigen::Index k = 0; k < energies.size(); ++k) out(k) = std::polar(1.0, -energies(k) * dt);
  return out;
}

void check_unitary(const Eigen::MatrixXcd& u, int steps) {
  const double defect = unitarity_defect(u);
  if (!(defect < kUnitarityTol))
    throw NumericalError("period propagator with " + std::to_string(steps) +
                         " steps is not unitary (max |U^dag U - I| = " + std::to_string(defect) + ")");
}

Eigen::MatrixXcd exact_step_propagator(const ModelParams& p, int steps) {
  const auto ops = shared_spin_operators(p.n_atoms);
  const double dt = p.period() / steps;
  const Eigen::VectorXd h1 = static_energies(p, ops->m);
  const Eigen::MatrixXd sx = ops->sx.real();
  const Eigen::Index dim = h1.size();

  Eigen::MatrixXcd u = Eigen::MatrixXcd::Identity(dim, dim);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(dim);
  for (int k = 0; k < steps; ++k) {
    const double drive = p.bx * std::cos(p.omega * (k + 0.5) * dt);
    Eigen::MatrixXd h = drive * sx;
    h.diagonal() += h1;
    solver.compute(h);
    if (solver.info() != Eigen::Success) throw NumericalError("eigensolver failed in exact-step propagator");
    const Eigen::MatrixXcd v = solver.eigenvectors().cast<std::complex<double>>();
    const Eigen::MatrixXcd uk = v * phase_vector(solver.eigenvalues(), dt).asDiagonal() * v.adjoint();
    u = (uk * u).eval();
  }
  return u;
}

}  // namespace

void ModelParams::validate() const {
  if (!std::isfinite(chi)) throw ValidationError("chi", "must be finite");
  if (!std::isfinite(bz)) throw ValidationError("bz", "must be finite");
  if (!std::isfinite(bx)) throw ValidationError("bx", "must be finite");
  if (!(omega > 0) || !std::isfinite(omega)) throw ValidationError("omega", "must be positive");
  if (n_atoms < 1) throw ValidationError("n", "particle number must be >= 1");
  if (n_atoms > kDefaultMaxAtoms) throw ValidationError("n", "particle number exceeds the supported maximum");
}

SplitStepper::SplitStepper(const ModelParams& params, int steps, SplitOrder order) {
  params.validate();
  if (steps < 1) throw ValidationError("steps", "must be >= 1");
  const auto ops = shared_spin_operators(params.n_atoms);
  const double period = params.period();
  const double dt = period / steps;
  const Eigen::VectorXd h1 = static_energies(params, ops->m);

  full_phase_ = phase_vector(h1, period);
  steps_ = steps;
  static_ = params.bx == 0.0;
  if (static_) return;

  // Substep fractions of one step; the fourth-order variant is the
  // symmetric triple jump of the Strang step.
  std::vector<double> fractions{1.0};
  if (order == SplitOrder::Fourth) {
    const double cbrt2 = std::cbrt(2.0);
    const double outer = 1.0 / (2.0 - cbrt2);
    fractions = {outer, -cbrt2 * outer, outer};
  }
  const auto per_step = static_cast<Eigen::Index>(fractions.size());

  const auto basis = measurement_basis(*ops, Axis::X);
  from_x_ = basis->vectors;
  to_x_ = from_x_.adjoint();
  edge_half_ = phase_vector(h1, fractions.front() * dt / 2);

  drive_phases_.resize(h1.size(), steps * per_step);
  std::vector<double> durations;
  durations.reserve(steps * per_step);
  for (int k = 0; k < steps; ++k) {
    double t = k * dt;
    for (double f : fractions) {
      const double tau = f * dt;
      const double drive = params.bx * std::cos(params.omega * (t + tau / 2));
      drive_phases_.col(static_cast<Eigen::Index>(durations.size())) = phase_vector(drive * basis->eigenvalues, tau);
      durations.push_back(tau);
      t += tau;
    }
  }

  // Adjacent H1 half-substeps merge into one rotation-conjugated phase; only
  // a couple of distinct merged durations occur.
  std::vector<double> bridge_durations;
  for (std::size_t j = 0; j + 1 < durations.size(); ++j) {
    const double merged = 0.5 * (durations[j] + durations[j + 1]);
    auto it = std::find_if(bridge_durations.begin(), bridge_durations.end(),
                           [&](double d) { return std::abs(d - merged) <= 1e-14 * period; });
    if (it == bridge_durations.end()) {
      bridge_durations.push_back(merged);
      bridges_.push_back(to_x_ * phase_vector(h1, merged).asDiagonal() * from_x_);
      it = bridge_durations.end() - 1;
    }
    bridge_index_.push_back(static_cast<int>(it - bridge_durations.begin()));
  }
}

void SplitStepper::apply_substeps(Eigen::MatrixXcd& block, Eigen::Index count) const {
  // prod_j Dh_j Vx P_j Vx^dag Dh_j; each adjacent Vx^dag Dh_j Dh_j+1 Vx pair
  // is a precomputed bridge, so a substep costs one dense product. Every
  // step starts and ends with the same fraction, so edge_half_ closes any
  // whole number of steps.
  Eigen::MatrixXcd tmp(block.rows(), block.cols());
  tmp.noalias() = to_x_ * (edge_half_.asDiagonal() * block);
  for (Eigen::Index j = 0; j < count; ++j) {
    tmp = drive_phases_.col(j).asDiagonal() * tmp;
    if (j + 1 < count) {
      block.noalias() = bridges_[bridge_index_[j]] * tmp;
      tmp.swap(block);
    }
  }
  block.noalias() = from_x_ * tmp;
  block = edge_half_.asDiagonal() * block;
}

void SplitStepper::apply_period(Eigen::MatrixXcd& block) const {
  if (static_) {
    block = full_phase_.asDiagonal() * block;
    return;
  }
  apply_substeps(block, drive_phases_.cols());
}

Eigen::MatrixXcd SplitStepper::period_matrix() const {
  Eigen::MatrixXcd u = Eigen::MatrixXcd::Identity(dim(), dim());
  if (static_ || steps_ % 2 != 0) {
    apply_period(u);
    return u;
  }
  // H(T - t) = H(t) and every factor is a symmetric matrix, so the second
  // half-period is the transpose of the first: U(T) = V^T V, V = U(T/2).
  apply_substeps(u, drive_phases_.cols() / 2);
  Eigen::MatrixXcd full(dim(), dim());
  full.noalias() = u.transpose() * u;
  return full;
}

double unitarity_defect(const Eigen::MatrixXcd& u) {
  Eigen::MatrixXcd g = u.adjoint() * u;
  g.diagonal().array() -= 1.0;
  return g.cwiseAbs().maxCoeff();
}

PeriodPropagator period_propagator(const ModelParams& params, int steps, StepMethod method, SplitOrder order) {
  params.validate();
  if (steps < 1) throw ValidationError("steps", "must be >= 1");
  PeriodPropagator out;
  out.params = params;
  out.steps = steps;
  out.method = method;
  out.order = order;
  if (params.bx == 0.0 || method == StepMethod::SplitStep) {
    out.u = SplitStepper(params, steps, order).period_matrix();
  } else {
    out.u = exact_step_propagator(params, steps);
  }
  check_unitary(out.u, steps);
  return out;
}

std::shared_ptr<const PeriodPropagator> PropagatorCache::get(const ModelParams& params, int steps,
                                                             StepMethod method, SplitOrder order) {
  const Key key{params.chi, params.bz, params.bx, params.omega, params.n_atoms, steps, method, order};
  {
    std::lock_guard lock(mutex_);
    if (auto it = entries_.find(key); it != entries_.end()) return it->second;
  }
  auto built = std::make_shared<const PeriodPropagator>(period_propagator(params, steps, method, order));
  std::lock_guard lock(mutex_);
  auto [it, inserted] = entries_.emplace(key, std::move(built));
  return it->second;
}

std::size_t PropagatorCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

PropagatorPowers::PropagatorPowers(Eigen::MatrixXcd u, long max_periods) : max_periods_(max_periods) {
  if (max_periods < 0) throw ValidationError("periods", "must be >= 0");
  const int bits = max_periods > 0 ? std::bit_width(static_cast<unsigned long>(max_periods)) : 1;
  squares_.reserve(bits);
  squares_.push_back(std::move(u));
  for (int k = 1; k < bits; ++k) squares_.push_back(squares_.back() * squares_.back());
}

Eigen::VectorXcd PropagatorPowers::apply(long n, const Eigen::VectorXcd& psi) const {
  if (n < 0 || n > max_periods_) throw std::out_of_range("PropagatorPowers::apply: period out of range");
  Eigen::VectorXcd out = psi;
  for (int k = 0; n >> k; ++k)
    if ((n >> k) & 1L) out = squares_[k] * out;
  return out;
}

Eigen::MatrixXcd PropagatorPowers::power(long n) const {
  if (n < 0 || n > max_periods_) throw std::out_of_range("PropagatorPowers::power: period out of range");
  Eigen::MatrixXcd out = Eigen::MatrixXcd::Identity(squares_[0].rows(), squares_[0].cols());
  bool first = true;
  for (int k = 0; n >> k; ++k) {
    if (!((n >> k) & 1L)) continue;
    if (first) {
      out = squares_[k];
      first = false;
    } else {
      out = squares_[k] * out;
    }
  }
  return out;
}

Trajectory stroboscopic_evolve(const PeriodPropagator& prop, const Eigen::VectorXcd& psi0, long n_periods,
                               std::span<const long> record, EvolveMode mode) {
  if (psi0.size() != prop.u.rows()) throw std::invalid_argument("stroboscopic_evolve: dimension mismatch");
  if (n_periods < 0) throw ValidationError("periods", "must be >= 0");
  std::vector<long> schedule(record.begin(), record.end());
  if (schedule.empty()) schedule.push_back(n_periods);
  for (long p : schedule)
    if (p < 0 || p > n_periods)
      throw ValidationError("record", "schedule entry " + std::to_string(p) + " lies beyond " +
                                          std::to_string(n_periods) + " periods");
  std::sort(schedule.begin(), schedule.end());

  Trajectory out;
  auto track_norm = [&out](Eigen::VectorXcd& psi) {
    const double drift = std::abs(psi.norm() - 1.0);
    out.max_norm_drift = std::max(out.max_norm_drift, drift);
    if (drift > kNormDriftTol) {
      psi.normalize();
      ++out.renormalizations;
    }
  };

  if (mode == EvolveMode::RepeatedSquaring) {
    const PropagatorPowers powers(prop.u, n_periods);
    for (long p : schedule) {
      Eigen::VectorXcd psi = powers.apply(p, psi0);
      track_norm(psi);
      out.periods.push_back(p);
      out.states.push_back(std::move(psi));
    }
  } else {
    Eigen::VectorXcd psi = psi0;
    Eigen::VectorXcd next(psi.size());
    long n = 0;
    for (long p : schedule) {
      for (; n < p; ++n) {
        next.noalias() = prop.u * psi;
        psi.swap(next);
        track_norm(psi);
      }
      out.periods.push_back(p);
      out.states.push_back(psi);
    }
  }
  if (out.renormalizations > 0)
    out.warnings.push_back("renormalized " + std::to_string(out.renormalizations) +
                           " times (max norm drift " + std::to_string(out.max_norm_drift) + ")");
  return out;
}

DerivativeBundle derivative_bundle(const ModelParams& params, double epsilon, int steps, StepMethod method,
                                   PropagatorCache* cache) {
  if (!(epsilon > 0)) throw ValidationError("epsilon", "must be positive");
  auto build = [&](double bz) {
    const ModelParams p = params.with_bz(bz);
    return cache ? cache->get(p, steps, method)
                 : std::make_shared<const PeriodPropagator>(period_propagator(p, steps, method));
  };
  return {build(params.bz - epsilon), build(params.bz + epsilon), epsilon};
}

double auto_epsilon(double t, double j, double base, double scale) {
  const double tj = t * std::max(j, 0.5);
  return tj > 0 ? std::min(base, scale / tj) : base;
}

ParameterEncoder::ParameterEncoder(const ModelParams& params, long n_periods, const EncodingOptions& options,
                                   std::size_t expected_states, PropagatorCache* cache)
    : params_(params), n_periods_(n_periods), options_(options), strategy_(options.strategy) {
  params_.validate();
  if (n_periods < 0) throw ValidationError("periods", "must be >= 0");
  if (!(options.epsilon > 0)) throw ValidationError("epsilon", "must be positive");
  if (options.steps < 1) throw ValidationError("steps", "must be >= 1");

  // Smallest relative change of the state the difference quotient can resolve.
  const double perturbation = options.epsilon * n_periods * params.period() * params.j();
  if (options.derivative && n_periods > 0 && perturbation < 1e3 * std::numeric_limits<double>::epsilon())
    throw NumericalError("epsilon = " + std::to_string(options.epsilon) +
                         " is too small to resolve psi(+eps) - psi(-eps) above rounding noise; use a larger epsilon");

  const double eps = options.epsilon;
  offsets_ = {0.0};
  if (options.derivative) {
    offsets_.push_back(-eps);
    offsets_.push_back(eps);
  }
  if (options.derivative && options.richardson) {
    offsets_.push_back(-eps / 2);
    offsets_.push_back(eps / 2);
  }

  if (strategy_ == EncodingStrategy::Auto) {
    const double d = static_cast<double>(params.n_atoms + 1);
    const double k = options.steps * static_cast<double>(options.order == SplitOrder::Fourth ? 3 : 1) + 2.0;
    const double states = static_cast<double>(std::max<std::size_t>(expected_states, 1));
    const double bits = n_periods > 0 ? std::bit_width(static_cast<unsigned long>(n_periods)) : 1;
    const double direct = states * n_periods * k * d * d;
    const double propagator = (k + 2 * bits) * d * d * d + states * d * d;
    strategy_ = direct <= propagator ? EncodingStrategy::Direct : EncodingStrategy::Propagator;
  }
  if (options.method == StepMethod::ExactStep) strategy_ = EncodingStrategy::Propagator;

  for (double off : offsets_) {
    const ModelParams p = params_.with_bz(params_.bz + off);
    if (strategy_ == EncodingStrategy::Direct) {
      steppers_.emplace_back(p, options.steps, options.order);
    } else {
      Eigen::MatrixXcd u = cache ? cache->get(p, options.steps, options.method, options.order)->u
                                 : period_propagator(p, options.steps, options.method, options.order).u;
      powers_.emplace_back(std::move(u), n_periods);
      final_maps_.push_back(powers_.back().power(n_periods));
    }
  }
}

DerivativeResult ParameterEncoder::assemble(std::vector<Eigen::VectorXcd> finals, long n) const {
  const double eps = options_.epsilon;
  DerivativeResult out;
  out.encoded.psi_mid = finals[0];
  if (options_.derivative) {
    out.encoded.psi_minus = finals[1];
    out.encoded.psi_plus = finals[2];
  }
  out.encoded.epsilon = eps;
  out.encoded.n_periods = n;
  out.psi_f = finals[0];
  out.qfi_half = std::numeric_limits<double>::quiet_NaN();
  if (!options_.derivative) {
    out.qfi = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  out.dpsi = (finals[2] - finals[1]) / (2 * eps);
  out.qfi = qfi_value(out.psi_f, out.dpsi);
  if (options_.richardson) {
    const Eigen::VectorXcd dpsi_half = (finals[4] - finals[3]) / eps;
    out.qfi_half = qfi_value(out.psi_f, dpsi_half);
    const double t = n * params_.period();
    const double floor = 1e-9 * std::pow(2 * params_.j() * t, 2);
    const double diff = std::abs(out.qfi - out.qfi_half);
    out.richardson_ok = diff <= options_.richardson_rtol * std::max(out.qfi, out.qfi_half) + floor;
    if (!out.richardson_ok)
      out.warnings.push_back("Richardson check failed: QFI(eps) = " + std::to_string(out.qfi) +
                             ", QFI(eps/2) = " + std::to_string(out.qfi_half));
  }
  return out;
}

std::vector<DerivativeResult> ParameterEncoder::encode_schedule(const Eigen::VectorXcd& psi0,
                                                                std::span<const long> periods) const {
  if (psi0.size() != params_.n_atoms + 1) throw std::invalid_argument("encode: state dimension mismatch");
  for (std::size_t i = 0; i < periods.size(); ++i) {
    if (periods[i] < 0 || periods[i] > n_periods_)
      throw ValidationError("record", "schedule entry " + std::to_string(periods[i]) + " lies beyond " +
                                          std::to_string(n_periods_) + " periods");
    if (i > 0 && periods[i] < periods[i - 1]) throw ValidationError("record", "schedule must be ascending");
  }

  std::vector<std::vector<Eigen::VectorXcd>> per_time(periods.size(),
                                                      std::vector<Eigen::VectorXcd>(offsets_.size()));
  for (std::size_t b = 0; b < offsets_.size(); ++b) {
    if (strategy_ == EncodingStrategy::Direct) {
      Eigen::MatrixXcd psi = psi0;
      long n = 0;
      for (std::size_t i = 0; i < periods.size(); ++i) {
        for (; n < periods[i]; ++n) {
          steppers_[b].apply_period(psi);
          if (std::abs(psi.norm() - 1.0) > kNormDriftTol) psi.normalize();
        }
        per_time[i][b] = psi.col(0);
      }
    } else {
      for (std::size_t i = 0; i < periods.size(); ++i) {
        Eigen::VectorXcd psi = periods[i] == n_periods_ ? Eigen::VectorXcd(final_maps_[b] * psi0)
                                                        : powers_[b].apply(periods[i], psi0);
        if (std::abs(psi.norm() - 1.0) > kNormDriftTol) psi.normalize();
        per_time[i][b] = std::move(psi);
      }
    }
  }

  std::vector<DerivativeResult> out;
  out.reserve(periods.size());
  for (std::size_t i = 0; i < periods.size(); ++i) out.push_back(assemble(std::move(per_time[i]), periods[i]));
  return out;
}

DerivativeResult ParameterEncoder::encode(const Eigen::VectorXcd& psi0) const {
  const long n = n_periods_;
  return encode_schedule(psi0, std::span<const long>(&n, 1)).front();
}

DerivativeResult derivative_state(const ModelParams& params, const Eigen::VectorXcd& psi0, long n_periods,
                                  const EncodingOptions& options) {
  return ParameterEncoder(params, n_periods, options).encode(psi0);
}

FloquetHamiltonian floquet_hamiltonian(const PeriodPropagator& prop) {
  const double defect = unitarity_defect(prop.u);
  if (!(defect < kUnitarityTol)) throw NumericalError("floquet_hamiltonian: propagator is not unitary");

  // U is normal, so its Schur form is diagonal up to rounding and the Schur
  // vectors stay orthonormal even for degenerate quasienergies.
  Eigen::ComplexSchur<Eigen::MatrixXcd> schur(prop.u);
  if (schur.info() != Eigen::Success) throw NumericalError("floquet_hamiltonian: Schur decomposition failed");
  const Eigen::MatrixXcd& z = schur.matrixU();
  const Eigen::MatrixXcd& t = schur.matrixT();
  const double period = prop.params.period();

  FloquetHamiltonian out;
  Eigen::VectorXd energies(t.rows());
  for (Eigen::Index k = 0; k < t.rows(); ++k) {
    double phase = std::arg(t(k, k));
    if (std::numbers::pi - std::abs(phase) < 1e-12) {
      out.branch_cut_flagged = true;
      phase = std::numbers::pi;
    }
    energies(k) = -phase / period;
  }
  Eigen::MatrixXcd h = z * energies.cast<std::complex<double>>().asDiagonal() * z.adjoint();
  out.h = 0.5 * (h + h.adjoint());
  out.quasienergies = energies;
  std::sort(out.quasienergies.begin(), out.quasienergies.end());
  return out;
}

}  // namespace chaosmetro
