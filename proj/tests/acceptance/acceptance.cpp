// Desk-scale acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--only <id>[,<id>...]] [--list] [--workers n]
//
// Exit status 0 only when every selected criterion passes. Criteria that share
// expensive inputs (the N = 60 phase map, the N = 400 B_z sweep) compute them
// once.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "chaosmetro/cli.hpp"
#include "chaosmetro/meanfield.hpp"
#include "chaosmetro/metrology.hpp"
#include "chaosmetro/propagation.hpp"
#include "chaosmetro/scans.hpp"
#include "chaosmetro/spin_core.hpp"

using namespace chaosmetro;
namespace fs = std::filesystem;
using C = std::complex<double>;
constexpr double kPi = std::numbers::pi;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Collects sub-checks; the criterion passes when all of them do.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failed_.push_back(what);
    all_.push_back(what + (ok ? "" : " [x]"));
  }
  Outcome outcome() const {
    std::ostringstream os;
    for (std::size_t k = 0; k < all_.size(); ++k) os << (k ? "; " : "") << all_[k];
    return {failed_.empty(), os.str()};
  }

 private:
  std::vector<std::string> all_;
  std::vector<std::string> failed_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string list(const std::vector<double>& v, int precision = 4) {
  std::string s = "[";
  for (std::size_t k = 0; k < v.size(); ++k) s += (k ? ", " : "") + fmt(v[k], precision);
  return s + "]";
}

unsigned g_workers = 0;

ScanNumerics numerics() {
  ScanNumerics n;
  n.workers = g_workers;
  return n;
}

ModelParams model(double chi, double bx, int n = 100, double bz = kPi / 2) {
  ModelParams p;
  p.chi = chi;
  p.bx = bx;
  p.bz = bz;
  p.n_atoms = n;
  return p;
}

// --------------------------------------------------------- shared inputs

// N = 60 maps after 2^12 periods on a 41 x 41 grid, plus the classical
// indicator on the same grid.
struct DeskMaps {
  MapGrid grid;
  std::vector<PhaseMap> maps;  // entropy, fidelity, qfi
  ClassicalMap classical;
  RepresentativeSeeds seeds;
};

const DeskMaps& desk_maps() {
  static const DeskMaps d = [] {
    DeskMaps out;
    out.grid = MapGrid::uniform(41, 41);
    const ModelParams p = model(10, 1.5, 60);
    const std::vector<MapQuantity> q = {MapQuantity::Entropy, MapQuantity::Fidelity, MapQuantity::Qfi};
    out.maps = phase_maps(q, out.grid, p, 4096, numerics());
    out.classical = classical_chaos_map(out.grid, p, kDefaultSectionPeriods, kDefaultRk4Divisor, {}, g_workers);
    out.seeds = select_representative_seeds(out.maps[2]);
    return out;
  }();
  return d;
}

// chi = 17.1, B_x = 5.5, t = 3T, N = 400: FI_x,y,z and Delta B_z across B_z.
const std::vector<double> kBzGrid = [] {
  std::vector<double> v;
  for (int k = 0; k <= 80; ++k) v.push_back(3.2 * k / 80);
  return v;
}();

const SweepTable& bz_sweep_400() {
  static const SweepTable t = [] {
    SweepOutputs o;
    o.qfi = false;
    o.sz_moments = o.delta_bz = true;
    return parameter_sweep(SweepVariable::Bz, kBzGrid, 2.423, 1.126, model(17.1, 5.5, 400), 3, o, numerics());
  }();
  return t;
}

std::vector<double> flat(const Eigen::MatrixXd& m) {
  std::vector<double> v;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
  return v;
}

// -------------------------------------------------------------- criteria

Outcome algebra() {
  Checks c;
  double herm = 0, comm = 0, casimir = 0, basis = 0;
  for (int n : {1, 2, 4, 7, 50, 400}) {
    const auto [sys, ops] = build_spin_system(n);
    const double j = sys.j();
    const auto id = Eigen::MatrixXcd::Identity(sys.dim(), sys.dim());
    for (const auto* m : {&ops.sx, &ops.sy, &ops.sz}) herm = std::max(herm, (*m - m->adjoint()).cwiseAbs().maxCoeff());
    const C i(0, 1);
    comm = std::max({comm, (ops.sx * ops.sy - ops.sy * ops.sx - i * ops.sz).cwiseAbs().maxCoeff(),
                     (ops.sy * ops.sz - ops.sz * ops.sy - i * ops.sx).cwiseAbs().maxCoeff(),
                     (ops.sz * ops.sx - ops.sx * ops.sz - i * ops.sy).cwiseAbs().maxCoeff()});
    casimir = std::max(casimir, (ops.sx * ops.sx + ops.sy * ops.sy + ops.sz * ops.sz - j * (j + 1) * id)
                                    .cwiseAbs()
                                    .maxCoeff());
    if (n <= 50)
      for (Axis a : {Axis::X, Axis::Y, Axis::Z}) {
        const auto b = measurement_basis(ops, a);
        const Eigen::MatrixXcd& s = a == Axis::X ? ops.sx : a == Axis::Y ? ops.sy : ops.sz;
        const Eigen::MatrixXcd d = b->vectors.adjoint() * s * b->vectors;
        const Eigen::MatrixXcd want = b->eigenvalues.cast<C>().asDiagonal();
        basis = std::max(basis, (d - want).cwiseAbs().maxCoeff());
        for (Eigen::Index k = 0; k < sys.dim(); ++k)
          basis = std::max(basis, std::abs(b->eigenvalues(k) - (-j + static_cast<double>(k))));
      }
  }
  c.expect(herm < 1e-12, "hermiticity " + fmt(herm, 2));
  c.expect(comm < 1e-10, "commutators " + fmt(comm, 2));
  c.expect(casimir < 1e-10, "Casimir " + fmt(casimir, 2));
  c.expect(basis < 1e-10, "measurement bases " + fmt(basis, 2));

  // coherent states: norm, maximal spin, <S_z> = J cos(theta), zero entropy
  double norm = 0, spin = 0, sz = 0, entropy = 0;
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int n : {1, 20, 400, 2000}) {
    const auto ops = shared_spin_operators(n);
    const SpinSystem sys{n};
    const double j = sys.j();
    for (int k = 0; k < 5; ++k) {
      const double theta = kPi * u(rng), phi = 2 * kPi * u(rng);
      const auto psi = coherent_state(sys, theta, phi);
      norm = std::max(norm, std::abs(psi.norm() - 1));
      if (n > 400) continue;
      const Eigen::Vector3d s = spin_vector(psi, *ops);
      spin = std::max(spin, std::abs(s.squaredNorm() - j * j) / (j * j));
      sz = std::max(sz, std::abs(s.z() - j * std::cos(theta)));
      entropy = std::max(entropy, linear_entropy(psi, *ops, j));
    }
  }
  c.expect(norm < 1e-12, "SCS norm " + fmt(norm, 2));
  c.expect(spin < 1e-8, "SCS |<S>|^2/J^2 - 1 " + fmt(spin, 2));
  c.expect(sz < 1e-10, "SCS <S_z> " + fmt(sz, 2));
  c.expect(entropy < 1e-10, "SCS entropy " + fmt(entropy, 2));

  // random states: entropy in [0, 1/2], fidelity in [0, 1], Husimi integral 1
  const int n = 30;
  const SpinSystem sys{n};
  const auto ops = shared_spin_operators(n);
  std::normal_distribution<double> g;
  bool bounds = true;
  double husimi = 0;
  AngularGrid grid;
  grid.n_theta = 101;
  grid.n_phi = 200;
  for (int k = 0; k < 5; ++k) {
    Eigen::VectorXcd a(sys.dim()), b(sys.dim());
    for (auto& x : a) x = C(g(rng), g(rng));
    for (auto& x : b) x = C(g(rng), g(rng));
    a.normalize();
    b.normalize();
    const double s = linear_entropy(a, *ops, sys.j());
    const double f = fidelity(a, b);
    bounds = bounds && s >= 0 && s <= 0.5 && f >= 0 && f <= 1 && fidelity(a, a) > 1 - 1e-12;
    husimi = std::max(husimi, std::abs(husimi_q(sys, a, grid).integral() - 1));
  }
  const Eigen::VectorXcd zero_mean = dicke_state(sys, 0.0);
  c.expect(bounds, "entropy and fidelity bounds");
  c.expect(std::abs(linear_entropy(zero_mean, *ops, sys.j()) - 0.5) < 1e-10, "m = 0 Dicke entropy 1/2");
  c.expect(husimi < 1e-3, "Husimi integral " + fmt(husimi, 2));
  return c.outcome();
}

Outcome propagator() {
  Checks c;
  // the exact-step path freezes H at each step midpoint, a second-order rule,
  // so it serves as the reference at 8x the split-step count
  double split = 0;
  for (int n : {2, 4, 8, 12})
    for (const ModelParams& p : {model(10, 1.5, n), model(17.1, 5.5, n)}) {
      const auto a = period_propagator(p, 1000, StepMethod::SplitStep);
      const auto b = period_propagator(p, 8000, StepMethod::ExactStep);
      split = std::max(split, (a.u - b.u).cwiseAbs().maxCoeff());
    }
  c.expect(split < 1e-6, "split (1000 steps) vs exact (8000 steps), N <= 12: " + fmt(split, 2));

  const auto big = period_propagator(model(10, 1.5, 400));
  const double defect = unitarity_defect(big.u);
  c.expect(defect < 1e-9, "unitarity N=400 " + fmt(defect, 2));

  // B_x = 0: U = exp(-i (chi/N m^2 + B_z m) T), diagonal
  double closed = 0;
  for (int n : {5, 60}) {
    const ModelParams p = model(10, 0, n, 0.9);
    const auto u = period_propagator(p).u;
    Eigen::MatrixXcd want = Eigen::MatrixXcd::Zero(n + 1, n + 1);
    for (int k = 0; k <= n; ++k) {
      const double m = 0.5 * n - k;
      want(k, k) = std::polar(1.0, -(p.chi / n * m * m + p.bz * m) * p.period());
    }
    closed = std::max(closed, (u - want).cwiseAbs().maxCoeff());
  }
  c.expect(closed < 1e-12, "B_x=0 closed form " + fmt(closed, 2));
  return c.outcome();
}

Outcome metrology_oracle() {
  Checks c;
  const int n = 50;
  const long periods = 4;
  const double t = periods * 1.0;
  const SpinSystem sys{n};
  const auto ops = shared_spin_operators(n);
  const auto psi0 = coherent_state(sys, kPi / 2, 0.0);
  // <S_x>(B_z) = J cos(B_z t) is steepest at B_z t = pi/2
  const ModelParams p = model(0, 0, n, kPi / 2 / t);
  const auto r = derivative_state(p, psi0, periods);
  const double qfi_err = std::abs(r.qfi / (n * t * t) - 1);
  c.expect(qfi_err < 1e-3, "QFI/(N t^2) - 1 = " + fmt(qfi_err, 2));
  const double d = error_propagation(ops->sx, r.encoded.psi_plus, r.encoded.psi_minus, r.encoded.psi_mid,
                                     r.encoded.epsilon);
  const double ramsey = 1 / (std::sqrt(double(n)) * t);
  const double d_err = std::abs(d / ramsey - 1);
  c.expect(d_err < 1e-2, "Delta B_z / Ramsey - 1 = " + fmt(d_err, 2));
  return c.outcome();
}

Outcome chaos_fraction_growth() {
  Checks c;
  std::vector<double> fractions;
  for (double bx : {0.0, 1.5, 3.0, 5.5}) {
    const auto section = poincare_section(seed_grid(24), model(10, bx), 500, kDefaultRk4Divisor, g_workers);
    fractions.push_back(chaos_fraction(section));
  }
  bool increasing = true;
  for (std::size_t k = 1; k < fractions.size(); ++k) increasing = increasing && fractions[k] > fractions[k - 1];
  c.expect(increasing, "fractions " + list(fractions, 3) + " strictly increasing");
  c.expect(fractions[0] == 0.0, "B_x=0 fraction exactly 0");
  c.expect(fractions[3] > 0.8, "B_x=5.5 fraction > 0.8");
  return c.outcome();
}

Outcome phase_space() {
  Checks c;
  const DeskMaps& d = desk_maps();
  const auto entropy = flat(d.maps[0].values);
  const double rho = spearman(entropy, flat(d.maps[1].values));
  std::vector<char> sea;
  for (double v : flat(d.classical.chaotic.cast<double>())) sea.push_back(v > 0.5);
  const double jac = jaccard(above_median(entropy), sea);
  c.expect(rho < -0.5, "Spearman(entropy, fidelity) " + fmt(rho, 3) + " < -0.5");
  c.expect(jac > 0.6, "Jaccard(entropy > median, classical sea) " + fmt(jac, 3) + " > 0.6");
  return c.outcome();
}

Outcome seed_scaling() {
  Checks c;
  const DeskMaps& d = desk_maps();
  const ModelParams p = model(10, 1.5, 100);
  std::vector<double> periods;
  for (int k = 0; k <= 12; ++k) periods.push_back(std::ldexp(1.0, k));
  const std::vector<double> ns = {50, 100, 200, 400};
  for (const SeedPick* s : {&d.seeds.chaotic, &d.seeds.edge, &d.seeds.regular}) {
    const std::string seed = s->label + " (" + fmt(s->theta) + ", " + fmt(s->phi) + ")";
    const auto ts = scaling_sweep(ScalingVariable::Time, periods, s->theta, s->phi, p, 0, FigureOfMerit::Qfi,
                                  numerics());
    // fits start at t = 2^5 T
    const double t_slope = loglog_fit(ts.xs, ts.ys, 5).slope;
    const auto ns_series = scaling_sweep(ScalingVariable::Atoms, ns, s->theta, s->phi, p, 4096,
                                         FigureOfMerit::Qfi, numerics());
    const double n_slope = loglog_fit(ns_series.xs, ns_series.ys).slope;
    if (s->label == "regular") {
      c.expect(n_slope < 1.2, seed + " N-slope " + fmt(n_slope, 3) + " < 1.2 (t-slope " + fmt(t_slope, 3) + ")");
    } else {
      c.expect(std::abs(t_slope - 2.0) <= 0.15, seed + " t-slope " + fmt(t_slope, 3) + " in 2 +- 0.15");
      c.expect(n_slope > 1.5, seed + " N-slope " + fmt(n_slope, 3) + " > 1.5");
    }
  }
  return c.outcome();
}

Outcome early_time() {
  Checks c;
  const std::vector<double> ns = {50, 100, 200, 400};
  const ModelParams p = model(10, 5.5);
  auto slope_at = [&](long periods) {
    const auto s = scaling_sweep(ScalingVariable::Atoms, ns, 2.423, 1.126, p, periods, FigureOfMerit::Qfi, numerics());
    return loglog_fit(s.xs, s.ys).slope;
  };
  const double early = slope_at(3);
  const double late = slope_at(200);
  c.expect(early > late, "slope(3T) " + fmt(early, 3) + " > slope(200T) " + fmt(late, 3));
  c.expect(early > 1.5, "slope(3T) > 1.5");
  return c.outcome();
}

Outcome fisher() {
  Checks c;
  std::vector<double> chis;
  for (int k = 1; k <= 30; ++k) chis.push_back(k);
  const auto chi_sweep = parameter_sweep(SweepVariable::Chi, chis, 2.423, 1.126, model(0, 5.5), 3, {}, numerics());
  double worst = 0;
  bool complete = true;
  int above_sql = 0;
  for (const auto& r : chi_sweep.rows) {
    complete = complete && r.error.empty();
    for (double fi : {r.fi_x, r.fi_y, r.fi_z}) worst = std::max(worst, fi / r.qfi);
    above_sql += std::min({r.fi_x, r.fi_y, r.fi_z}) > 100;
  }
  c.expect(complete && worst <= 1.03, "max FI/QFI over chi " + fmt(worst, 4) + " <= 1.03");
  c.expect(above_sql > 0, std::to_string(above_sql) + " chi values with all FI > N");

  const SweepTable& t = bz_sweep_400();
  const std::vector<double> ns = {50, 100, 200, 400};
  for (FigureOfMerit m : {FigureOfMerit::FiX, FigureOfMerit::FiY, FigureOfMerit::FiZ}) {
    const std::string name(to_string(m));
    const auto opt = t.optimum(name);
    if (!opt) {
      c.expect(false, name + " has no finite optimum");
      continue;
    }
    const auto s = scaling_sweep(ScalingVariable::Atoms, ns, 2.423, 1.126, model(17.1, 5.5, 400, opt->value), 3, m,
                                 numerics());
    const double slope = loglog_fit(s.xs, s.ys).slope;
    c.expect(slope > 1.5, name + " at B_z=" + fmt(opt->value, 3) + " N-slope " + fmt(slope, 3) + " > 1.5");
  }
  return c.outcome();
}

Outcome sz_readout() {
  Checks c;
  const auto opt = bz_sweep_400().optimum("delta_bz");
  if (!opt) return {false, "no finite Delta B_z in the N=400 sweep"};
  SweepOutputs o;
  o.qfi = o.fi_x = o.fi_y = o.fi_z = false;
  o.delta_bz = true;
  const std::vector<double> ns = {100, 200, 300, 400};
  std::vector<double> d2;
  const std::vector<double> at = {opt->value};
  for (double n : ns) {
    const auto t = parameter_sweep(SweepVariable::Bz, at, 2.423, 1.126, model(17.1, 5.5, static_cast<int>(n)), 3, o,
                                   numerics());
    d2.push_back(t.rows.front().delta_bz * t.rows.front().delta_bz);
  }
  const double slope = loglog_fit(ns, d2).slope;
  c.expect(slope < -1.0, "B_z=" + fmt(opt->value, 3) + " Delta^2 B_z " + list(d2, 3) + " slope " + fmt(slope, 3) +
                             " < -1");
  return c.outcome();
}

Outcome entropy_cut() {
  Checks c;
  std::vector<double> thetas;
  for (int k = 0; k < 181; ++k) thetas.push_back(kPi * k / 180);
  const std::vector<int> ns = {100, 200, 400};
  const auto cuts = entropy_line_cut(kPi, thetas, model(10, 1.5), ns, 4096, numerics());
  std::vector<double> sharp;
  for (const auto& cut : cuts) sharp.push_back(cut.max_slope);
  c.expect(sharp[0] < sharp[1] && sharp[1] < sharp[2], "max |dS/dtheta| " + list(sharp, 3) + " strictly increasing");
  return c.outcome();
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv = {"chaosmetro"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

Outcome determinism() {
  Checks c;
  const fs::path root = fs::temp_directory_path() / ("chaosmetro-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(root);
  const std::vector<std::vector<std::string>> runs = {
      {"evolve", "--n", "40", "--periods", "64"},
      {"phase-map", "--n", "16", "--n-theta", "9", "--n-phi", "9", "--periods", "64", "--classical",
       "--classical-periods", "100", "--steps", "200", "--workers", "3"},
      {"error-propagation", "--n", "30", "--range", "0:3:7", "--atoms", "20,30"},
  };
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const fs::path first = root / ("run" + std::to_string(k));
    const fs::path again = root / ("rerun" + std::to_string(k));
    auto args = runs[k];
    args.insert(args.end(), {"--out", first.string()});
    const int a = run_cli(args);
    const int b = run_cli({"rerun", "--manifest", (first / "manifest.json").string(), "--out", again.string()});
    c.expect(a == 0 && b == 0, runs[k][0] + " rerun exit " + std::to_string(b));
  }
  fs::remove_all(root);
  return c.outcome();
}

struct Criterion {
  std::string id;
  std::string title;
  std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all = {
      {"algebra", "algebraic exactness", algebra},
      {"propagator", "propagator correctness", propagator},
      {"oracle", "analytic metrology oracle", metrology_oracle},
      {"chaos-fraction", "chaos fraction grows with B_x", chaos_fraction_growth},
      {"phase-space", "quantum/classical phase-space correspondence (N=60)", phase_space},
      {"seed-scaling", "QFI scaling for chaotic / edge / regular seeds", seed_scaling},
      {"early-time", "QFI N-slope decays from t=3T to t=200T", early_time},
      {"fisher", "FI <= QFI across chi; optimal-B_z FI N-slopes", fisher},
      {"sz-readout", "S_z readout Delta^2 B_z N-slope", sz_readout},
      {"entropy-cut", "entropy transition sharpens with N", entropy_cut},
      {"determinism", "reruns reproduce checksums", determinism},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale acceptance criteria"};
  std::vector<std::string> only;
  bool list_only = false;
  app.add_option("--only", only, "criterion ids to run (default: all)")->delimiter(',');
  app.add_flag("--list", list_only, "print the criterion ids and exit");
  app.add_option("--workers", g_workers, "worker threads (0 = hardware concurrency)");
  CLI11_PARSE(app, argc, argv);

  if (list_only) {
    for (const auto& c : criteria()) std::cout << c.id << "  " << c.title << "\n";
    return 0;
  }
  for (const auto& id : only)
    if (std::none_of(criteria().begin(), criteria().end(), [&](const Criterion& c) { return c.id == id; })) {
      std::cerr << "unknown criterion '" << id << "' (see --list)\n";
      return 2;
    }

  int failures = 0;
  for (const auto& c : criteria()) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.id << "  " << c.title << " -- " << o.detail << " ("
              << fmt(secs, 3) << " s)" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
