#pragma once

// Figures of merit for a pure final state encoded with B_z.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <string>
#include <vector>

#include "chaosmetro/errors.hpp"
#include "chaosmetro/spin_core.hpp"

namespace chaosmetro {

struct QfiResult {
  double value = 0;
  double epsilon_used = 0;
  bool richardson_ok = true;
};

struct FiResult {
  Axis axis = Axis::Z;
  double value = 0;
  double floor_used = 0;
  /// Outcomes skipped because their probability fell under the floor.
  int excluded = 0;
  /// Set when a skipped outcome still carried a non-negligible derivative.
  bool floor_flagged = false;
};

inline constexpr double kDefaultProbabilityFloor = 1e-12;

/// 4 (<dpsi|dpsi> - |<dpsi|psi>|^2). Small negative round-off is clipped to 0;
/// anything clearly negative means the derivative is garbage.
template <typename DerivedA, typename DerivedB>
double qfi_value(const Eigen::MatrixBase<DerivedA>& psi_f, const Eigen::MatrixBase<DerivedB>& dpsi) {
  if (psi_f.size() != dpsi.size())
    throw std::invalid_argument("qfi: state and derivative lengths differ");
  const double norm2 = dpsi.squaredNorm();
  const double overlap2 = std::norm(dpsi.dot(psi_f));
  const double value = 4.0 * (norm2 - overlap2);
  if (value < -1e-6 * std::max(1.0, 4.0 * norm2))
    throw NumericalError("qfi: negative value " + std::to_string(value) +
                         "; the finite-difference step is too small, try a larger epsilon");
  return std::max(value, 0.0);
}

template <typename DerivedA, typename DerivedB>
QfiResult qfi(const Eigen::MatrixBase<DerivedA>& psi_f, const Eigen::MatrixBase<DerivedB>& dpsi,
              double epsilon_used = 0, bool richardson_ok = true) {
  return {qfi_value(psi_f, dpsi), epsilon_used, richardson_ok};
}

/// |<psi0|psi_n>|^2
template <typename DerivedA, typename DerivedB>
double fidelity(const Eigen::MatrixBase<DerivedA>& psi0, const Eigen::MatrixBase<DerivedB>& psi_n) {
  if (psi0.size() != psi_n.size()) throw std::invalid_argument("fidelity: dimension mismatch");
  return std::clamp(std::norm(psi0.dot(psi_n)), 0.0, 1.0);
}

/// Collective spin vector (<Sx>, <Sy>, <Sz>).
template <typename Derived>
Eigen::Vector3d spin_vector(const Eigen::MatrixBase<Derived>& state, const SpinOperators<double>& ops) {
  return {expectation(state, ops.sx), expectation(state, ops.sy), expectation(state, ops.sz)};
}

/// 1/2 (1 - |<S>|^2 / J^2); 0 for coherent states, 1/2 when every first moment vanishes.
template <typename Derived>
double linear_entropy(const Eigen::MatrixBase<Derived>& state, const SpinOperators<double>& ops,
                      double j) {
  const double s = 0.5 * (1.0 - spin_vector(state, ops).squaredNorm() / (j * j));
  return std::clamp(s, 0.0, 0.5);
}

FiResult fisher_information(const BasisTransform<double>& basis, const Eigen::VectorXcd& psi_plus,
                            const Eigen::VectorXcd& psi_minus, double epsilon,
                            double floor = kDefaultProbabilityFloor);

/// Outcome probabilities |<m_axis|psi>|^2 in ascending eigenvalue order.
Eigen::VectorXd outcome_probabilities(const BasisTransform<double>& basis, const Eigen::VectorXcd& psi);

/// Delta B_z = Delta O / |d<O>/dB_z|, variance at the midpoint state and the
/// slope by central difference. Returns +infinity at insensitive points.
double error_propagation(const Eigen::MatrixXcd& observable, const Eigen::VectorXcd& psi_plus,
                         const Eigen::VectorXcd& psi_minus, const Eigen::VectorXcd& psi_mid,
                         double epsilon);

struct AngularGrid {
  int n_theta = 181;
  int n_phi = 361;

  /// Uniform in [0, pi] including both poles.
  double theta(int i) const;
  /// Uniform in [0, 2 pi), periodic.
  double phi(int j) const;
};

struct HusimiGrid {
  std::vector<double> thetas;
  std::vector<double> phis;
  /// values(i, j) = Q(thetas[i], phis[j])
  Eigen::MatrixXd values;

  /// Integral of Q sin(theta) dtheta dphi: Clenshaw-Curtis in cos(theta), rectangle
  /// in phi. Exact when both grids have more than N points.
  double integral() const;
};

HusimiGrid husimi_q(const SpinSystem& sys, const Eigen::VectorXcd& state, const AngularGrid& grid = {});

}  // namespace chaosmetro
