#include "chaosmetro/scans.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "chaosmetro/errors.hpp"
#include "chaosmetro/parallel.hpp"

namespace chaosmetro {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kTwoPi = 2 * std::numbers::pi;
constexpr std::size_t kMaxReportedErrors = 5;

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

// Collects per-item failure messages without flooding the manifest.
class ErrorLog {
 public:
  void add(std::size_t index, const std::string& what) {
    std::lock_guard lock(mutex_);
    ++count_;
    if (first_.size() < kMaxReportedErrors) first_.emplace_back(index, what);
  }
  void flush(std::vector<std::string>& warnings, std::string_view what) {
    std::sort(first_.begin(), first_.end());
    for (const auto& [i, msg] : first_) warnings.push_back(std::string(what) + " " + std::to_string(i) + ": " + msg);
    if (count_ > first_.size())
      warnings.push_back(std::to_string(count_ - first_.size()) + " further " + std::string(what) + " failures");
  }

 private:
  std::mutex mutex_;
  std::size_t count_ = 0;
  std::vector<std::pair<std::size_t, std::string>> first_;
};

std::vector<long> as_periods(std::span<const double> values) {
  std::vector<long> out;
  out.reserve(values.size());
  for (double v : values) {
    if (!(v >= 0) || v != std::floor(v) || v > 1e15)
      throw ValidationError("periods", "period counts must be non-negative integers");
    out.push_back(static_cast<long>(v));
  }
  return out;
}

void require_increasing(std::span<const double> values, const std::string& field) {
  if (values.empty()) throw ValidationError(field, "need at least one value");
  for (std::size_t i = 1; i < values.size(); ++i)
    if (!(values[i] > values[i - 1])) throw ValidationError(field, "values must be strictly increasing");
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t k = i;
    while (k + 1 < order.size() && v[order[k + 1]] == v[order[i]]) ++k;
    const double r = 0.5 * static_cast<double>(i + k);
    for (std::size_t m = i; m <= k; ++m) ranks[order[m]] = r;
    i = k + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return kNaN;
  return sab / std::sqrt(saa * sbb);
}

struct GridPoint {
  std::size_t i, j;
  double theta, phi, q;
};

// Mean direction of the set on the unit sphere, reported with the grid point
// nearest to it; falls back to the most central member when the directions
// cancel.
GridPoint centroid(const std::vector<GridPoint>& set, const std::vector<GridPoint>& all) {
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (const auto& p : set)
    c += Eigen::Vector3d(std::sin(p.theta) * std::cos(p.phi), std::sin(p.theta) * std::sin(p.phi), std::cos(p.theta));
  GridPoint out{};
  if (c.norm() < 1e-9 * static_cast<double>(set.size())) {
    double best_sum = std::numeric_limits<double>::infinity();
    for (const auto& a : set) {
      double sum = 0;
      for (const auto& b : set) sum += sphere_distance(a.theta, a.phi, b.theta, b.phi);
      if (sum < best_sum) {
        best_sum = sum;
        out = a;
      }
    }
    return out;
  }
  const double theta = std::acos(std::clamp(c.z() / c.norm(), -1.0, 1.0));
  const double phi = wrap_phase(std::atan2(c.y(), c.x()));
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : all) {
    const double d = sphere_distance(theta, phi, p.theta, p.phi);
    if (d < best) {
      best = d;
      out = p;
    }
  }
  out.theta = theta;
  out.phi = phi;
  return out;
}

SeedPick pick(const GridPoint& p, std::string label) { return {std::move(label), p.i, p.j, p.theta, p.phi, p.q}; }

}  // namespace

double ScanNumerics::epsilon_for(double t, double j) const {
  return auto_epsilon ? chaosmetro::auto_epsilon(t, j, encoding.epsilon) : encoding.epsilon;
}

// ---------------------------------------------------------------- phase maps

std::string_view to_string(MapQuantity q) noexcept {
  switch (q) {
    case MapQuantity::Entropy: return "entropy";
    case MapQuantity::Fidelity: return "fidelity";
    case MapQuantity::Qfi: return "qfi";
  }
  return "?";
}

MapQuantity parse_map_quantity(std::string_view s) {
  const std::string v = lowercase(s);
  if (v == "entropy") return MapQuantity::Entropy;
  if (v == "fidelity") return MapQuantity::Fidelity;
  if (v == "qfi") return MapQuantity::Qfi;
  throw ValidationError("quantity", "expected entropy, fidelity or qfi, got '" + std::string(s) + "'");
}

MapGrid MapGrid::uniform(int n_theta, int n_phi, double phi_max) {
  if (n_theta < 1) throw ValidationError("n_theta", "must be >= 1");
  if (n_phi < 1) throw ValidationError("n_phi", "must be >= 1");
  if (!(phi_max > 0) || phi_max > kTwoPi) throw ValidationError("phi_max", "must lie in (0, 2 pi]");
  MapGrid g;
  for (int i = 0; i < n_theta; ++i)
    g.thetas.push_back(n_theta > 1 ? std::numbers::pi * i / (n_theta - 1) : std::numbers::pi / 2);
  const bool closed = phi_max < kTwoPi;
  for (int j = 0; j < n_phi; ++j) {
    const double denom = closed && n_phi > 1 ? n_phi - 1 : n_phi;
    g.phis.push_back(phi_max * j / denom);
  }
  return g;
}

void MapGrid::validate() const {
  if (thetas.empty() || phis.empty()) throw ValidationError("grid", "grid axes must be nonempty");
  for (double t : thetas)
    if (!(t >= 0 && t <= std::numbers::pi)) throw ValidationError("theta", "grid theta values must lie in [0, pi]");
  for (double p : phis)
    if (!(p >= 0 && p < kTwoPi)) throw ValidationError("phi", "grid phi values must lie in [0, 2 pi)");
}

std::vector<PhaseMap> phase_maps(std::span<const MapQuantity> quantities, const MapGrid& grid,
                                 const ModelParams& params, long n_periods, const ScanNumerics& numerics) {
  if (quantities.empty()) throw ValidationError("quantity", "need at least one quantity");
  grid.validate();
  params.validate();
  if (n_periods < 0) throw ValidationError("periods", "must be >= 0");

  const bool need_qfi = std::find(quantities.begin(), quantities.end(), MapQuantity::Qfi) != quantities.end();
  EncodingOptions enc = numerics.encoding;
  enc.derivative = need_qfi;
  enc.epsilon = numerics.epsilon_for(n_periods * params.period(), params.j());
  const ParameterEncoder encoder(params, n_periods, enc, grid.size());
  const auto ops = shared_spin_operators(params.n_atoms);
  const SpinSystem sys{params.n_atoms};

  const auto rows = static_cast<Eigen::Index>(grid.thetas.size());
  const auto cols = static_cast<Eigen::Index>(grid.phis.size());
  Eigen::MatrixXd entropy = Eigen::MatrixXd::Constant(rows, cols, kNaN);
  Eigen::MatrixXd fid = entropy;
  Eigen::MatrixXd q = entropy;
  std::vector<char> richardson_ok(grid.size(), 1);
  ErrorLog errors;

  parallel_for(grid.size(), numerics.workers, [&](std::size_t k) {
    const auto i = static_cast<Eigen::Index>(k / grid.phis.size());
    const auto j = static_cast<Eigen::Index>(k % grid.phis.size());
    try {
      const Eigen::VectorXcd psi0 = coherent_state<double>(sys, grid.thetas[i], grid.phis[j]);
      const DerivativeResult r = encoder.encode(psi0);
      entropy(i, j) = linear_entropy(r.psi_f, *ops, params.j());
      fid(i, j) = fidelity(psi0, r.psi_f);
      if (need_qfi) {
        q(i, j) = r.qfi;
        richardson_ok[k] = r.richardson_ok;
      }
    } catch (const std::exception& e) {
      entropy(i, j) = fid(i, j) = q(i, j) = kNaN;
      errors.add(k, e.what());
    }
  });

  std::vector<std::string> warnings;
  errors.flush(warnings, "grid point");
  std::vector<PhaseMap> out;
  for (MapQuantity quantity : quantities) {
    PhaseMap m;
    m.quantity = quantity;
    m.thetas = grid.thetas;
    m.phis = grid.phis;
    m.values = quantity == MapQuantity::Entropy ? entropy : quantity == MapQuantity::Fidelity ? fid : q;
    m.params = params;
    m.n_periods = n_periods;
    m.epsilon = need_qfi ? enc.epsilon : 0.0;
    m.missing = static_cast<std::size_t>((!m.values.array().isFinite()).count());
    if (quantity == MapQuantity::Qfi) {
      m.richardson_failures = static_cast<std::size_t>(std::count(richardson_ok.begin(), richardson_ok.end(), 0));
      if (m.richardson_failures > 0)
        m.warnings.push_back("Richardson check failed at " + std::to_string(m.richardson_failures) + " grid points");
    }
    m.warnings.insert(m.warnings.end(), warnings.begin(), warnings.end());
    out.push_back(std::move(m));
  }
  return out;
}

PhaseMap phase_map(MapQuantity quantity, const MapGrid& grid, const ModelParams& params, long n_periods,
                   const ScanNumerics& numerics) {
  const MapQuantity q[] = {quantity};
  return std::move(phase_maps(q, grid, params, n_periods, numerics).front());
}

// ------------------------------------------------------------------ scaling

std::string_view to_string(ScalingVariable v) noexcept { return v == ScalingVariable::Time ? "time" : "atoms"; }

std::string_view to_string(FigureOfMerit m) noexcept {
  switch (m) {
    case FigureOfMerit::Qfi: return "qfi";
    case FigureOfMerit::FiX: return "fi_x";
    case FigureOfMerit::FiY: return "fi_y";
    case FigureOfMerit::FiZ: return "fi_z";
  }
  return "?";
}

FigureOfMerit parse_figure_of_merit(std::string_view s) {
  const std::string v = lowercase(s);
  if (v == "qfi") return FigureOfMerit::Qfi;
  if (v == "fi_x" || v == "fix") return FigureOfMerit::FiX;
  if (v == "fi_y" || v == "fiy") return FigureOfMerit::FiY;
  if (v == "fi_z" || v == "fiz") return FigureOfMerit::FiZ;
  throw ValidationError("merit", "expected qfi, fi_x, fi_y or fi_z, got '" + std::string(s) + "'");
}

namespace {

struct MeritSample {
  double value[4] = {kNaN, kNaN, kNaN, kNaN};
  bool floor_flagged = false;
};

MeritSample evaluate_merits(const DerivativeResult& r, int n_atoms, std::span<const FigureOfMerit> merits,
                            double floor) {
  MeritSample s;
  const auto ops = shared_spin_operators(n_atoms);
  for (FigureOfMerit m : merits) {
    if (m == FigureOfMerit::Qfi) {
      s.value[0] = r.qfi;
      continue;
    }
    const Axis axis = m == FigureOfMerit::FiX ? Axis::X : m == FigureOfMerit::FiY ? Axis::Y : Axis::Z;
    const FiResult fi =
        fisher_information(*measurement_basis(*ops, axis), r.encoded.psi_plus, r.encoded.psi_minus, r.encoded.epsilon, floor);
    s.value[static_cast<int>(m)] = fi.value;
    s.floor_flagged = s.floor_flagged || fi.floor_flagged;
  }
  return s;
}

}  // namespace

std::vector<ScalingSeries> scaling_sweeps(ScalingVariable variable, std::span<const double> values, double theta,
                                          double phi, const ModelParams& params, long n_periods,
                                          std::span<const FigureOfMerit> merits, const ScanNumerics& numerics) {
  if (merits.empty()) throw ValidationError("merit", "need at least one figure of merit");
  require_increasing(values, variable == ScalingVariable::Time ? "periods" : "n");
  params.validate();
  const SpinSystem probe{params.n_atoms};
  (void)coherent_state<double>(probe, theta, phi);  // validates the angles

  const std::size_t count = values.size();
  std::vector<MeritSample> samples(count);
  std::vector<double> epsilons(count, kNaN);
  std::vector<char> richardson(count, 1);
  std::vector<std::string> errors(count);
  std::vector<long> periods;
  std::vector<double> xs(values.begin(), values.end());
  std::vector<std::string> warnings;

  if (variable == ScalingVariable::Time) {
    periods = as_periods(values);
    EncodingOptions enc = numerics.encoding;
    enc.epsilon = numerics.epsilon_for(periods.back() * params.period(), params.j());
    try {
      const ParameterEncoder encoder(params, periods.back(), enc);
      const auto results = encoder.encode_schedule(coherent_state<double>(probe, theta, phi), periods);
      for (std::size_t i = 0; i < count; ++i) {
        samples[i] = evaluate_merits(results[i], params.n_atoms, merits, numerics.probability_floor);
        epsilons[i] = enc.epsilon;
        richardson[i] = results[i].richardson_ok;
      }
    } catch (const std::exception& e) {
      for (auto& err : errors) err = e.what();
    }
    for (std::size_t i = 0; i < count; ++i) xs[i] = static_cast<double>(periods[i]) * params.period();
  } else {
    if (n_periods < 0) throw ValidationError("periods", "must be >= 0");
    periods.assign(1, n_periods);
    for (double v : values)
      if (!(v >= 1) || v != std::floor(v)) throw ValidationError("n", "particle numbers must be positive integers");
    parallel_for(count, numerics.workers, [&](std::size_t i) {
      try {
        ModelParams p = params;
        p.n_atoms = static_cast<int>(values[i]);
        EncodingOptions enc = numerics.encoding;
        enc.epsilon = numerics.epsilon_for(n_periods * p.period(), p.j());
        const ParameterEncoder encoder(p, n_periods, enc);
        const DerivativeResult r = encoder.encode(coherent_state<double>(SpinSystem{p.n_atoms}, theta, phi));
        samples[i] = evaluate_merits(r, p.n_atoms, merits, numerics.probability_floor);
        epsilons[i] = enc.epsilon;
        richardson[i] = r.richardson_ok;
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    });
  }

  for (std::size_t i = 0; i < count; ++i) {
    if (!errors[i].empty()) warnings.push_back("sample " + std::to_string(i) + " failed: " + errors[i]);
    if (!richardson[i]) warnings.push_back("Richardson check failed at sample " + std::to_string(i));
    if (samples[i].floor_flagged)
      warnings.push_back("FI probability floor excluded outcomes with non-negligible slope at sample " +
                         std::to_string(i));
  }

  std::vector<ScalingSeries> out;
  for (FigureOfMerit m : merits) {
    ScalingSeries s;
    s.variable = variable;
    s.merit = m;
    s.xs = xs;
    for (const auto& smp : samples) s.ys.push_back(smp.value[static_cast<int>(m)]);
    s.epsilons = epsilons;
    s.richardson_ok = richardson;
    s.errors = errors;
    s.theta = theta;
    s.phi = phi;
    s.params = params;
    s.periods = periods;
    s.warnings = warnings;
    out.push_back(std::move(s));
  }
  return out;
}

ScalingSeries scaling_sweep(ScalingVariable variable, std::span<const double> values, double theta, double phi,
                            const ModelParams& params, long n_periods, FigureOfMerit merit,
                            const ScanNumerics& numerics) {
  const FigureOfMerit m[] = {merit};
  return std::move(scaling_sweeps(variable, values, theta, phi, params, n_periods, m, numerics).front());
}

// ---------------------------------------------------------- parameter sweeps

std::string_view to_string(SweepVariable v) noexcept { return v == SweepVariable::Chi ? "chi" : "bz"; }

SweepVariable parse_sweep_variable(std::string_view s) {
  const std::string v = lowercase(s);
  if (v == "chi") return SweepVariable::Chi;
  if (v == "bz" || v == "b_z") return SweepVariable::Bz;
  throw ValidationError("sweep", "expected chi or bz, got '" + std::string(s) + "'");
}

std::optional<SweepOptimum> SweepTable::optimum(std::string_view column) const {
  for (const auto& o : optima)
    if (o.column == column) return o;
  return std::nullopt;
}

SweepTable parameter_sweep(SweepVariable variable, std::span<const double> values, double theta, double phi,
                           const ModelParams& params, long n_periods, const SweepOutputs& outputs,
                           const ScanNumerics& numerics) {
  if (values.empty()) throw ValidationError(std::string(to_string(variable)), "need at least one value");
  if (n_periods < 0) throw ValidationError("periods", "must be >= 0");
  params.validate();
  const SpinSystem sys{params.n_atoms};
  const Eigen::VectorXcd psi0 = coherent_state<double>(sys, theta, phi);
  const auto ops = shared_spin_operators(params.n_atoms);

  std::vector<FigureOfMerit> merits;
  if (outputs.qfi) merits.push_back(FigureOfMerit::Qfi);
  if (outputs.fi_x) merits.push_back(FigureOfMerit::FiX);
  if (outputs.fi_y) merits.push_back(FigureOfMerit::FiY);
  if (outputs.fi_z) merits.push_back(FigureOfMerit::FiZ);

  SweepTable table;
  table.variable = variable;
  table.outputs = outputs;
  table.params = params;
  table.n_periods = n_periods;
  table.theta = theta;
  table.phi = phi;
  table.rows.resize(values.size());

  const Eigen::MatrixXcd sz = ops->sz;
  parallel_for(values.size(), numerics.workers, [&](std::size_t i) {
    SweepRow& row = table.rows[i];
    row.value = values[i];
    try {
      ModelParams p = params;
      (variable == SweepVariable::Chi ? p.chi : p.bz) = values[i];
      EncodingOptions enc = numerics.encoding;
      enc.epsilon = numerics.epsilon_for(n_periods * p.period(), p.j());
      if (merits.empty() && !outputs.delta_bz) enc.derivative = false;
      // The eps/2 pair only serves the QFI consistency check.
      if (!outputs.qfi) enc.richardson = false;
      const ParameterEncoder encoder(p, n_periods, enc);
      const DerivativeResult r = encoder.encode(psi0);
      row.epsilon = enc.derivative ? enc.epsilon : 0.0;
      row.richardson_ok = r.richardson_ok;
      const MeritSample s = evaluate_merits(r, p.n_atoms, merits, numerics.probability_floor);
      row.qfi = s.value[0];
      row.fi_x = s.value[1];
      row.fi_y = s.value[2];
      row.fi_z = s.value[3];
      row.fi_floor_flagged = s.floor_flagged;
      if (outputs.sz_moments) {
        row.sz_mean = expectation(r.psi_f, ops->sz);
        row.sz2_mean = r.psi_f.cwiseAbs2().dot(ops->m.cwiseAbs2());
      }
      if (outputs.delta_bz)
        row.delta_bz = error_propagation(sz, r.encoded.psi_plus, r.encoded.psi_minus, r.encoded.psi_mid, r.encoded.epsilon);
    } catch (const std::exception& e) {
      row = SweepRow{};
      row.value = values[i];
      row.error = e.what();
    }
  });

  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const SweepRow& row = table.rows[i];
    if (!row.error.empty()) table.warnings.push_back("row " + std::to_string(i) + " failed: " + row.error);
    if (!row.richardson_ok) table.warnings.push_back("Richardson check failed at row " + std::to_string(i));
    if (row.fi_floor_flagged)
      table.warnings.push_back("FI probability floor excluded outcomes with non-negligible slope at row " +
                               std::to_string(i));
  }

  auto add_optimum = [&](const char* column, double SweepRow::*field, bool maximize) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      const double v = table.rows[i].*field;
      if (!std::isfinite(v)) continue;
      if (!best || (maximize ? v > table.rows[*best].*field : v < table.rows[*best].*field)) best = i;
    }
    if (best) table.optima.push_back({column, *best, table.rows[*best].value, table.rows[*best].*field});
  };
  if (outputs.qfi) add_optimum("qfi", &SweepRow::qfi, true);
  if (outputs.fi_x) add_optimum("fi_x", &SweepRow::fi_x, true);
  if (outputs.fi_y) add_optimum("fi_y", &SweepRow::fi_y, true);
  if (outputs.fi_z) add_optimum("fi_z", &SweepRow::fi_z, true);
  if (outputs.delta_bz) add_optimum("delta_bz", &SweepRow::delta_bz, false);
  return table;
}

// --------------------------------------------------------- entropy line cut

std::vector<EntropyCut> entropy_line_cut(double phi_fixed, std::span<const double> thetas,
                                         const ModelParams& params, std::span<const int> n_atoms_list,
                                         long n_periods, const ScanNumerics& numerics) {
  if (thetas.empty()) throw ValidationError("theta", "need at least one theta value");
  for (double t : thetas)
    if (!(t >= 0 && t <= std::numbers::pi)) throw ValidationError("theta", "theta values must lie in [0, pi]");
  if (n_atoms_list.empty()) throw ValidationError("n", "need at least one particle number");
  if (n_periods < 0) throw ValidationError("periods", "must be >= 0");

  std::vector<EntropyCut> out;
  for (int n : n_atoms_list) {
    ModelParams p = params;
    p.n_atoms = n;
    EncodingOptions enc = numerics.encoding;
    enc.derivative = false;
    const ParameterEncoder encoder(p, n_periods, enc, thetas.size());
    const auto ops = shared_spin_operators(n);
    EntropyCut cut;
    cut.n_atoms = n;
    cut.thetas.assign(thetas.begin(), thetas.end());
    cut.entropy.assign(thetas.size(), kNaN);
    parallel_for(thetas.size(), numerics.workers, [&](std::size_t i) {
      const DerivativeResult r = encoder.encode(coherent_state<double>(SpinSystem{n}, thetas[i], phi_fixed));
      cut.entropy[i] = linear_entropy(r.psi_f, *ops, 0.5 * n);
    });
    for (std::size_t i = 1; i < cut.thetas.size(); ++i) {
      const double dtheta = cut.thetas[i] - cut.thetas[i - 1];
      if (dtheta != 0)
        cut.max_slope = std::max(cut.max_slope, std::abs((cut.entropy[i] - cut.entropy[i - 1]) / dtheta));
    }
    cut.argmin = static_cast<std::size_t>(std::min_element(cut.entropy.begin(), cut.entropy.end()) - cut.entropy.begin());
    cut.argmax = static_cast<std::size_t>(std::max_element(cut.entropy.begin(), cut.entropy.end()) - cut.entropy.begin());
    out.push_back(std::move(cut));
  }
  return out;
}

// ---------------------------------------------------------------- fitting

FitResult loglog_fit(std::span<const double> xs, std::span<const double> ys, std::size_t first, std::size_t last) {
  if (xs.size() != ys.size()) throw ValidationError("fit", "xs and ys differ in length");
  if (xs.empty()) throw ValidationError("fit", "no data");
  last = std::min(last, xs.size() - 1);
  if (first > last) throw ValidationError("fit_range", "empty fit window");
  if (last - first < 1) throw ValidationError("fit_range", "need at least two points");

  std::vector<std::size_t> bad;
  for (std::size_t i = first; i <= last; ++i)
    if (!(xs[i] > 0) || !(ys[i] > 0) || !std::isfinite(xs[i]) || !std::isfinite(ys[i])) bad.push_back(i);
  if (!bad.empty()) {
    std::string list;
    for (std::size_t i : bad) list += (list.empty() ? "" : ", ") + std::to_string(i);
    throw ValidationError("fit", "nonpositive or non-finite data at indices " + list);
  }

  const auto n = static_cast<double>(last - first + 1);
  double mx = 0, my = 0;
  for (std::size_t i = first; i <= last; ++i) {
    mx += std::log(xs[i]);
    my += std::log(ys[i]);
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = first; i <= last; ++i) {
    const double dx = std::log(xs[i]) - mx;
    const double dy = std::log(ys[i]) - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0) throw ValidationError("fit", "all x values in the window coincide");

  FitResult f;
  f.first = first;
  f.last = last;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (std::size_t i = first; i <= last; ++i) {
    const double r = std::log(ys[i]) - (f.intercept + f.slope * std::log(xs[i]));
    ss_res += r * r;
  }
  // A constant series is fitted exactly by slope 0.
  f.r_squared = syy > 0 ? std::clamp(1.0 - ss_res / syy, 0.0, 1.0) : 1.0;
  return f;
}

// ------------------------------------------------------ chaos classification

Occupancy trajectory_occupancy(const SectionTrajectory& trajectory, const ChaosCriteria& criteria) {
  if (criteria.box_cols < 1 || criteria.box_rows < 1) throw ValidationError("box_grid", "must be at least 1x1");
  std::vector<char> boxes(static_cast<std::size_t>(criteria.box_cols) * criteria.box_rows, 0);
  std::vector<char> cols(criteria.box_cols, 0), rows(criteria.box_rows, 0);
  for (const auto& pt : trajectory.points) {
    const int c = std::clamp(static_cast<int>(wrap_phase(pt.phi) / kTwoPi * criteria.box_cols), 0, criteria.box_cols - 1);
    const int r = std::clamp(static_cast<int>((pt.z + 1.0) / 2.0 * criteria.box_rows), 0, criteria.box_rows - 1);
    boxes[static_cast<std::size_t>(c) * criteria.box_rows + r] = 1;
    cols[c] = 1;
    rows[r] = 1;
  }
  Occupancy o;
  o.boxes = static_cast<int>(std::count(boxes.begin(), boxes.end(), 1));
  o.cols = static_cast<int>(std::count(cols.begin(), cols.end(), 1));
  o.rows = static_cast<int>(std::count(rows.begin(), rows.end(), 1));
  o.fill_ratio = o.boxes > 0 ? static_cast<double>(o.boxes) / (o.cols + o.rows - 1) : 0.0;
  o.chaotic = o.boxes > criteria.box_threshold && o.fill_ratio > criteria.fill_ratio_threshold;
  return o;
}

std::vector<Occupancy> section_occupancy(const PoincareSection& section, const ChaosCriteria& criteria) {
  std::vector<Occupancy> out;
  out.reserve(section.trajectories.size());
  for (const auto& tr : section.trajectories) out.push_back(trajectory_occupancy(tr, criteria));
  return out;
}

double chaos_fraction(const PoincareSection& section, const ChaosCriteria& criteria) {
  std::size_t classified = 0, chaotic = 0;
  for (const auto& tr : section.trajectories) {
    if (tr.aborted) continue;
    ++classified;
    if (trajectory_occupancy(tr, criteria).chaotic) ++chaotic;
  }
  return classified > 0 ? static_cast<double>(chaotic) / static_cast<double>(classified) : 0.0;
}

ClassicalMap classical_chaos_map(const MapGrid& grid, const ModelParams& params, long n_periods,
                                 int steps_per_period, const ChaosCriteria& criteria, unsigned workers) {
  grid.validate();
  std::vector<MeanFieldState> seeds;
  seeds.reserve(grid.size());
  for (double theta : grid.thetas)
    for (double phi : grid.phis) seeds.push_back(classical_from_bloch(theta, phi));
  const PoincareSection section = poincare_section(seeds, params, n_periods, steps_per_period, workers);

  ClassicalMap m;
  m.thetas = grid.thetas;
  m.phis = grid.phis;
  m.params = params;
  m.n_periods = n_periods;
  const auto rows = static_cast<Eigen::Index>(grid.thetas.size());
  const auto cols = static_cast<Eigen::Index>(grid.phis.size());
  m.fill_ratio.resize(rows, cols);
  m.boxes.resize(rows, cols);
  m.chaotic.resize(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      const auto& tr = section.trajectories[static_cast<std::size_t>(i * cols + j)];
      const Occupancy o = trajectory_occupancy(tr, criteria);
      m.fill_ratio(i, j) = tr.aborted ? kNaN : o.fill_ratio;
      m.boxes(i, j) = o.boxes;
      m.chaotic(i, j) = !tr.aborted && o.chaotic;
    }
  return m;
}

// ------------------------------------------------- representative seeds

RepresentativeSeeds select_representative_seeds(const PhaseMap& qfi_map) {
  const auto rows = qfi_map.values.rows();
  const auto cols = qfi_map.values.cols();
  std::vector<GridPoint> points;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      if (std::isfinite(qfi_map.values(i, j)))
        points.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), qfi_map.thetas[i], qfi_map.phis[j],
                          qfi_map.values(i, j)});
  if (points.size() < 10) throw ValidationError("qfi_map", "need at least ten finite grid points");

  std::vector<GridPoint> sorted = points;
  std::sort(sorted.begin(), sorted.end(), [](const GridPoint& a, const GridPoint& b) { return a.q < b.q; });
  const std::size_t decile = std::max<std::size_t>(1, sorted.size() / 10);
  const std::vector<GridPoint> bottom(sorted.begin(), sorted.begin() + decile);
  const std::vector<GridPoint> top(sorted.end() - decile, sorted.end());

  std::vector<double> flat;
  for (const auto& p : points) flat.push_back(p.q);
  const double med = median(flat);
  // The phi axis wraps when it samples the full circle at uniform spacing.
  const bool wraps = cols > 2 && std::abs(qfi_map.phis.back() + (qfi_map.phis[1] - qfi_map.phis[0]) - kTwoPi) < 1e-9;
  auto high = [&](Eigen::Index i, Eigen::Index j) { return qfi_map.values(i, j) > med; };
  std::optional<GridPoint> edge;
  for (const auto& p : points) {
    const auto i = static_cast<Eigen::Index>(p.i);
    const auto j = static_cast<Eigen::Index>(p.j);
    bool boundary = false;
    const Eigen::Index di[] = {-1, 1, 0, 0};
    const Eigen::Index dj[] = {0, 0, -1, 1};
    for (int k = 0; k < 4 && !boundary; ++k) {
      const Eigen::Index ni = i + di[k];
      Eigen::Index nj = j + dj[k];
      if (ni < 0 || ni >= rows) continue;
      if (nj < 0 || nj >= cols) {
        if (!wraps) continue;
        nj = (nj + cols) % cols;
      }
      if (!std::isfinite(qfi_map.values(ni, nj))) continue;
      boundary = high(ni, nj) != high(i, j);
    }
    if (boundary && (!edge || p.q > edge->q)) edge = p;
  }
  if (!edge) edge = sorted.back();

  return {pick(centroid(top, points), "chaotic"), pick(*edge, "edge"), pick(centroid(bottom, points), "regular")};
}

// -------------------------------------------------------------- statistics

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: lengths differ");
  std::vector<double> x, y;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::isfinite(a[i]) && std::isfinite(b[i])) {
      x.push_back(a[i]);
      y.push_back(b[i]);
    }
  if (x.size() < 2) return kNaN;
  return pearson(average_ranks(x), average_ranks(y));
}

double median(std::span<const double> values) {
  std::vector<double> v;
  for (double x : values)
    if (std::isfinite(x)) v.push_back(x);
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<char> above_median(std::span<const double> values) {
  const double m = median(values);
  std::vector<char> out(values.size(), 0);
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = std::isfinite(values[i]) && values[i] > m;
  return out;
}

double jaccard(std::span<const char> a, std::span<const char> b) {
  if (a.size() != b.size()) throw std::invalid_argument("jaccard: lengths differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

double sphere_distance(double theta1, double phi1, double theta2, double phi2) {
  const double c = std::cos(theta1) * std::cos(theta2) + std::sin(theta1) * std::sin(theta2) * std::cos(phi1 - phi2);
  return std::acos(std::clamp(c, -1.0, 1.0));
}

}  // namespace chaosmetro
