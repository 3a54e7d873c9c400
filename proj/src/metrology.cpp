#include "chaosmetro/metrology.hpp"

#include <numbers>

namespace chaosmetro {

Eigen::VectorXd outcome_probabilities(const BasisTransform<double>& basis, const Eigen::VectorXcd& psi) {
  if (basis.vectors.rows() != psi.size())
    throw std::invalid_argument("outcome_probabilities: basis and state dimensions differ");
  return (basis.vectors.adjoint() * psi).cwiseAbs2();
}

FiResult fisher_information(const BasisTransform<double>& basis, const Eigen::VectorXcd& psi_plus,
                            const Eigen::VectorXcd& psi_minus, double epsilon, double floor) {
  if (psi_plus.size() != psi_minus.size())
    throw std::invalid_argument("fisher_information: psi_plus and psi_minus lengths differ");
  if (!(epsilon > 0)) throw std::invalid_argument("fisher_information: epsilon must be positive");

  const Eigen::VectorXd p_plus = outcome_probabilities(basis, psi_plus);
  const Eigen::VectorXd p_minus = outcome_probabilities(basis, psi_minus);

  FiResult out;
  out.axis = basis.axis;
  out.floor_used = floor;
  for (Eigen::Index k = 0; k < p_plus.size(); ++k) {
    const double p = 0.5 * (p_plus(k) + p_minus(k));
    const double dp = (p_plus(k) - p_minus(k)) / (2 * epsilon);
    if (p < floor) {
      ++out.excluded;
      if (dp * dp > 1e-10) out.floor_flagged = true;
      continue;
    }
    out.value += dp * dp / p;
  }
  return out;
}

double error_propagation(const Eigen::MatrixXcd& observable, const Eigen::VectorXcd& psi_plus,
                         const Eigen::VectorXcd& psi_minus, const Eigen::VectorXcd& psi_mid,
                         double epsilon) {
  if (!(epsilon > 0)) throw std::invalid_argument("error_propagation: epsilon must be positive");
  const Eigen::VectorXcd o_mid = observable * psi_mid;
  const double mean = expectation(psi_mid, observable);
  const double second = o_mid.squaredNorm();  // <O^2> for Hermitian O
  const double variance = std::max(second - mean * mean, 0.0);
  const double slope = (expectation(psi_plus, observable) - expectation(psi_minus, observable)) / (2 * epsilon);
  if (std::abs(slope) < 1e-12) return std::numeric_limits<double>::infinity();
  return std::sqrt(variance) / std::abs(slope);
}

double AngularGrid::theta(int i) const {
  return n_theta > 1 ? std::numbers::pi * i / (n_theta - 1) : 0.0;
}

double AngularGrid::phi(int j) const { return 2 * std::numbers::pi * j / n_phi; }

double HusimiGrid::integral() const {
  const auto nt = static_cast<Eigen::Index>(thetas.size());
  const auto np = static_cast<Eigen::Index>(phis.size());
  if (nt < 2 || np < 1) return 0;
  // Equispaced theta with both poles are Clenshaw-Curtis nodes in x = cos(theta).
  // The phi-averaged Q is a degree-2J polynomial in x, so the rule is exact for
  // n_theta > 2J; the phi trapezoid is exact for n_phi > 2J.
  const Eigen::Index n = nt - 1;
  const double dphi = 2 * std::numbers::pi / static_cast<double>(np);
  double total = 0;
  for (Eigen::Index i = 0; i <= n; ++i) {
    double w = 1;
    for (Eigen::Index k = 1; 2 * k <= n; ++k) {
      const double b = 2 * k == n ? 1.0 : 2.0;
      w -= b * std::cos(2.0 * k * thetas[i]) / (4.0 * k * k - 1);
    }
    w *= (i == 0 || i == n ? 1.0 : 2.0) / static_cast<double>(n);
    total += w * values.row(i).sum();
  }
  return total * dphi;
}

HusimiGrid husimi_q(const SpinSystem& sys, const Eigen::VectorXcd& state, const AngularGrid& grid) {
  if (state.size() != sys.dim()) throw std::invalid_argument("husimi_q: state dimension mismatch");
  if (grid.n_theta < 2 || grid.n_phi < 1) throw ValidationError("grid", "need at least 2x1 points");

  HusimiGrid out;
  out.thetas.resize(grid.n_theta);
  out.phis.resize(grid.n_phi);
  for (int i = 0; i < grid.n_theta; ++i) out.thetas[i] = grid.theta(i);
  for (int j = 0; j < grid.n_phi; ++j) out.phis[j] = grid.phi(j);
  out.values.resize(grid.n_theta, grid.n_phi);

  const double prefactor = (2 * sys.j() + 1) / (4 * std::numbers::pi);
  const Eigen::Index dim = sys.dim();

  // <theta,phi|psi> = sum_k a_k(theta) e^{-i k phi} psi_k. Build the phase
  // table once and reuse it for every theta row.
  Eigen::MatrixXcd phases(dim, grid.n_phi);
  for (int j = 0; j < grid.n_phi; ++j)
    for (Eigen::Index k = 0; k < dim; ++k)
      phases(k, j) = std::polar(1.0, -static_cast<double>(k) * out.phis[j]);

  for (int i = 0; i < grid.n_theta; ++i) {
    // The SCS at phi = 0 has real non-negative amplitudes a_k(theta).
    const Eigen::VectorXd a = coherent_state(sys, out.thetas[i], 0.0).real();
    const Eigen::VectorXcd weighted = a.cast<std::complex<double>>().cwiseProduct(state);
    const Eigen::RowVectorXcd overlaps = weighted.transpose() * phases;
    out.values.row(i) = prefactor * overlaps.cwiseAbs2();
  }
  return out;
}

}  // namespace chaosmetro
