#pragma once

// Collective spin-J algebra in the Dicke basis.
//
// Basis index k holds |J, m_z = J - k>, so |J,J> is the first component.
// Everything here is templated on the real scalar; the rest of the library
// instantiates it with double.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>

#include "chaosmetro/errors.hpp"

namespace chaosmetro {

template <typename Real>
using CVector = Eigen::Matrix<std::complex<Real>, Eigen::Dynamic, 1>;
template <typename Real>
using CMatrix = Eigen::Matrix<std::complex<Real>, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Real>
using RVector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
template <typename Real>
using RMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr int kDefaultMaxAtoms = 4096;

struct SpinSystem {
  int n_atoms = 1;

  /// Pseudospin length N/2. Exact in binary floating point.
  double j() const noexcept { return 0.5 * n_atoms; }
  Eigen::Index dim() const noexcept { return n_atoms + 1; }
  /// m_z of basis index k.
  double m(Eigen::Index k) const noexcept { return j() - static_cast<double>(k); }
};

template <typename Real = double>
struct SpinOperators {
  CMatrix<Real> sx;
  CMatrix<Real> sy;
  CMatrix<Real> sz;
  RMatrix<Real> sz2;
  /// Diagonal of sz, J down to -J.
  RVector<Real> m;
};

enum class Axis { X, Y, Z };

constexpr std::string_view to_string(Axis axis) noexcept {
  switch (axis) {
    case Axis::X: return "x";
    case Axis::Y: return "y";
    case Axis::Z: return "z";
  }
  return "?";
}

inline Axis parse_axis(std::string_view s) {
  if (s == "x") return Axis::X;
  if (s == "y") return Axis::Y;
  if (s == "z") return Axis::Z;
  throw ValidationError("axis", "expected one of x, y, z, got '" + std::string(s) + "'");
}

/// Eigenbasis of one spin component. Columns of `vectors` are eigenvectors
/// sorted by ascending eigenvalue, each phase-fixed so that its
/// largest-magnitude entry is real and positive.
template <typename Real = double>
struct BasisTransform {
  Axis axis = Axis::Z;
  CMatrix<Real> vectors;
  RVector<Real> eigenvalues;
};

template <typename Real = double>
std::pair<SpinSystem, SpinOperators<Real>> build_spin_system(int n_atoms,
                                                            int max_atoms = kDefaultMaxAtoms) {
  if (n_atoms < 1) throw ValidationError("n", "particle number must be >= 1");
  if (n_atoms > max_atoms)
    throw ValidationError("n", "particle number " + std::to_string(n_atoms) +
                                   " exceeds the configured maximum " + std::to_string(max_atoms));

  using C = std::complex<Real>;
  const SpinSystem sys{n_atoms};
  const Eigen::Index dim = sys.dim();
  const Real j = static_cast<Real>(n_atoms) / Real(2);

  SpinOperators<Real> ops;
  ops.m.resize(dim);
  for (Eigen::Index k = 0; k < dim; ++k) ops.m(k) = j - static_cast<Real>(k);

  // S+ |m> = sqrt(J(J+1) - m(m+1)) |m+1>; |m+1> sits one row above |m>.
  CMatrix<Real> raise = CMatrix<Real>::Zero(dim, dim);
  for (Eigen::Index k = 1; k < dim; ++k) {
    const Real m = ops.m(k);
    raise(k - 1, k) = C(std::sqrt(j * (j + 1) - m * (m + 1)), 0);
  }
  const CMatrix<Real> lower = raise.adjoint();

  ops.sx = (raise + lower) * C(Real(0.5), 0);
  ops.sy = (raise - lower) * C(0, Real(-0.5));
  ops.sz = ops.m.template cast<C>().asDiagonal();
  ops.sz2 = ops.m.array().square().matrix().asDiagonal();
  return {sys, std::move(ops)};
}

/// Spin coherent state |theta, phi> with amplitude at m_z
///   sqrt(C(2J, J-m)) sin(theta/2)^(J-m) cos(theta/2)^(J+m) exp(i (J-m) phi).
/// Binomials are evaluated through log-gamma so N in the thousands is safe.
template <typename Real = double>
CVector<Real> coherent_state(const SpinSystem& sys, Real theta, Real phi) {
  constexpr Real pi = std::numbers::pi_v<Real>;
  constexpr Real slack = Real(1e-12);
  if (!(theta >= -slack && theta <= pi + slack))
    throw ValidationError("theta", "polar angle must lie in [0, pi]");
  if (!(phi >= -slack && phi < 2 * pi + slack))
    throw ValidationError("phi", "azimuthal angle must lie in [0, 2pi)");

  const int n = sys.n_atoms;
  const Real s = std::sin(theta / 2);
  const Real c = std::cos(theta / 2);
  const Real log_s = s > 0 ? std::log(s) : Real(0);
  const Real log_c = c > 0 ? std::log(c) : Real(0);
  const Real lg_n = std::lgamma(static_cast<Real>(n) + 1);

  CVector<Real> psi(sys.dim());
  for (int k = 0; k <= n; ++k) {
    // k = J - m_z, n - k = J + m_z
    if ((k > 0 && s <= 0) || (n - k > 0 && c <= 0)) {
      psi(k) = 0;
      continue;
    }
    const Real log_binom =
        lg_n - std::lgamma(static_cast<Real>(k) + 1) - std::lgamma(static_cast<Real>(n - k) + 1);
    const Real log_mag = Real(0.5) * log_binom + k * log_s + (n - k) * log_c;
    psi(k) = std::polar(std::exp(log_mag), static_cast<Real>(k) * phi);
  }
  psi /= psi.norm();
  return psi;
}

template <typename Real = double>
CVector<Real> dicke_state(const SpinSystem& sys, double m) {
  const double k = sys.j() - m;
  const auto idx = static_cast<Eigen::Index>(std::llround(k));
  if (std::abs(k - static_cast<double>(idx)) > 1e-9 || idx < 0 || idx >= sys.dim())
    throw ValidationError("m", "not a valid m_z for J = " + std::to_string(sys.j()));
  CVector<Real> psi = CVector<Real>::Zero(sys.dim());
  psi(idx) = 1;
  return psi;
}

/// <psi|op|psi>. The imaginary residue must be negligible.
template <typename DerivedV, typename DerivedM>
typename DerivedV::RealScalar expectation(const Eigen::MatrixBase<DerivedV>& state,
                                          const Eigen::MatrixBase<DerivedM>& op) {
  using Real = typename DerivedV::RealScalar;
  if (op.rows() != state.size() || op.cols() != state.size())
    throw std::invalid_argument("expectation: operator is " + std::to_string(op.rows()) + "x" +
                                std::to_string(op.cols()) + " but state has length " +
                                std::to_string(state.size()));
  const std::complex<Real> value = state.dot(op * state);
  const Real scale = std::max<Real>(Real(1), std::abs(value));
  if (std::abs(value.imag()) >= Real(1e-10) * scale)
    throw NumericalError("expectation: operator is not Hermitian on this state (imaginary part " +
                         std::to_string(static_cast<double>(value.imag())) + ")");
  return value.real();
}

namespace detail {

template <typename Real>
void fix_eigenvector_phases(CMatrix<Real>& vectors) {
  for (Eigen::Index col = 0; col < vectors.cols(); ++col) {
    auto v = vectors.col(col);
    const Real peak = v.cwiseAbs().maxCoeff();
    // First entry within a relative hair of the peak, so ties from symmetric
    // eigenvectors resolve the same way regardless of rounding noise.
    Eigen::Index pick = 0;
    while (std::abs(v(pick)) < peak * (1 - Real(1e-9))) ++pick;
    const std::complex<Real> phase = std::conj(v(pick)) / std::abs(v(pick));
    v *= phase;
    v(pick) = std::abs(v(pick));
  }
}

template <typename Real>
BasisTransform<Real> compute_basis(const SpinOperators<Real>& ops, Axis axis) {
  const Eigen::Index dim = ops.sz.rows();
  BasisTransform<Real> out;
  out.axis = axis;
  if (axis == Axis::Z) {
    out.vectors = CMatrix<Real>::Zero(dim, dim);
    out.eigenvalues.resize(dim);
    for (Eigen::Index k = 0; k < dim; ++k) {
      out.vectors(dim - 1 - k, k) = 1;
      out.eigenvalues(k) = ops.m(dim - 1 - k);
    }
    return out;
  }
  if (axis == Axis::X) {
    // Sx is real symmetric in the Dicke basis.
    Eigen::SelfAdjointEigenSolver<RMatrix<Real>> solver(ops.sx.real());
    if (solver.info() != Eigen::Success) throw NumericalError("eigensolver failed for Sx");
    out.eigenvalues = solver.eigenvalues();
    out.vectors = solver.eigenvectors().template cast<std::complex<Real>>();
  } else {
    Eigen::SelfAdjointEigenSolver<CMatrix<Real>> solver(ops.sy);
    if (solver.info() != Eigen::Success) throw NumericalError("eigensolver failed for Sy");
    out.eigenvalues = solver.eigenvalues();
    out.vectors = solver.eigenvectors();
  }
  fix_eigenvector_phases(out.vectors);
  return out;
}

}  // namespace detail

/// Eigenbasis of S_axis. Computed once per (N, axis) and shared afterwards;
/// repeated calls return the same object.
template <typename Real = double>
std::shared_ptr<const BasisTransform<Real>> measurement_basis(const SpinOperators<Real>& ops,
                                                              Axis axis) {
  static std::mutex mutex;
  static std::map<std::pair<Eigen::Index, Axis>, std::shared_ptr<const BasisTransform<Real>>> cache;

  const auto key = std::make_pair(ops.sz.rows(), axis);
  {
    std::lock_guard lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  auto basis = std::make_shared<const BasisTransform<Real>>(detail::compute_basis(ops, axis));
  std::lock_guard lock(mutex);
  // Another thread may have raced us here; keep whichever landed first.
  auto [it, inserted] = cache.emplace(key, std::move(basis));
  return it->second;
}

/// Spin operators for N, shared process-wide.
template <typename Real = double>
std::shared_ptr<const SpinOperators<Real>> shared_spin_operators(int n_atoms) {
  static std::mutex mutex;
  static std::map<int, std::shared_ptr<const SpinOperators<Real>>> cache;
  {
    std::lock_guard lock(mutex);
    if (auto it = cache.find(n_atoms); it != cache.end()) return it->second;
  }
  auto ops = std::make_shared<const SpinOperators<Real>>(build_spin_system<Real>(n_atoms).second);
  std::lock_guard lock(mutex);
  auto [it, inserted] = cache.emplace(n_atoms, std::move(ops));
  return it->second;
}

}  // namespace chaosmetro
