#pragma once

// Experiment drivers: phase-space maps, scaling sweeps in t and N, sweeps in
// chi and B_z, entropy line cuts, chaos fractions and log-log fits.

#include <Eigen/Dense>

#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chaosmetro/meanfield.hpp"
#include "chaosmetro/metrology.hpp"
#include "chaosmetro/propagation.hpp"

namespace chaosmetro {

/// Numerical settings shared by every quantum scan.
struct ScanNumerics {
  EncodingOptions encoding;
  /// Replace encoding.epsilon by auto_epsilon(t, J) for each evolution time.
  bool auto_epsilon = true;
  double probability_floor = kDefaultProbabilityFloor;
  unsigned workers = 0;

  /// The epsilon actually used for evolution time t at spin length j.
  double epsilon_for(double t, double j) const;
};

// ---------------------------------------------------------------- phase maps

enum class MapQuantity { Entropy, Fidelity, Qfi };
std::string_view to_string(MapQuantity q) noexcept;
MapQuantity parse_map_quantity(std::string_view s);

/// Initial coherent states |theta, phi> on a product grid.
struct MapGrid {
  std::vector<double> thetas;
  std::vector<double> phis;

  /// n_theta points over [0, pi] (both poles) times n_phi points over
  /// [0, phi_max), or [0, phi_max] when phi_max < 2 pi.
  static MapGrid uniform(int n_theta, int n_phi, double phi_max = 2 * std::numbers::pi);
  std::size_t size() const noexcept { return thetas.size() * phis.size(); }
  void validate() const;
};

struct PhaseMap {
  MapQuantity quantity = MapQuantity::Entropy;
  std::vector<double> thetas;
  std::vector<double> phis;
  /// rows: theta, cols: phi; NaN marks a point whose evolution failed
  Eigen::MatrixXd values;
  ModelParams params;
  long n_periods = 0;
  double epsilon = 0;
  std::size_t missing = 0;
  std::size_t richardson_failures = 0;
  std::vector<std::string> warnings;
};

/// All requested quantities from one pass over the grid: one propagator (plus
/// the +-eps set when QFI is requested) shared by every point, with U^n taken
/// by repeated squaring.
std::vector<PhaseMap> phase_maps(std::span<const MapQuantity> quantities, const MapGrid& grid,
                                 const ModelParams& params, long n_periods, const ScanNumerics& numerics = {});

PhaseMap phase_map(MapQuantity quantity, const MapGrid& grid, const ModelParams& params, long n_periods,
                   const ScanNumerics& numerics = {});

// ------------------------------------------------------------------ scaling

enum class ScalingVariable { Time, Atoms };
enum class FigureOfMerit { Qfi, FiX, FiY, FiZ };
std::string_view to_string(ScalingVariable v) noexcept;
std::string_view to_string(FigureOfMerit m) noexcept;
FigureOfMerit parse_figure_of_merit(std::string_view s);

struct ScalingSeries {
  ScalingVariable variable = ScalingVariable::Time;
  FigureOfMerit merit = FigureOfMerit::Qfi;
  /// t = n T for Time, N for Atoms
  std::vector<double> xs;
  /// NaN where the sample failed (see errors)
  std::vector<double> ys;
  std::vector<double> epsilons;
  std::vector<char> richardson_ok;
  std::vector<std::string> errors;
  double theta = 0;
  double phi = 0;
  ModelParams params;
  /// periods for Time samples; the fixed evolution time for Atoms
  std::vector<long> periods;
  std::vector<std::string> warnings;
};

/// variable = Time: `values` are period counts, evaluated from one encoder
/// with checkpointed powers. variable = Atoms: `values` are particle numbers,
/// each evolved for `n_periods`, in parallel across N.
std::vector<ScalingSeries> scaling_sweeps(ScalingVariable variable, std::span<const double> values, double theta,
                                          double phi, const ModelParams& params, long n_periods,
                                          std::span<const FigureOfMerit> merits, const ScanNumerics& numerics = {});

ScalingSeries scaling_sweep(ScalingVariable variable, std::span<const double> values, double theta, double phi,
                            const ModelParams& params, long n_periods, FigureOfMerit merit = FigureOfMerit::Qfi,
                            const ScanNumerics& numerics = {});

// ---------------------------------------------------------- parameter sweeps

enum class SweepVariable { Chi, Bz };
std::string_view to_string(SweepVariable v) noexcept;
SweepVariable parse_sweep_variable(std::string_view s);

struct SweepOutputs {
  bool qfi = true;
  bool fi_x = true;
  bool fi_y = true;
  bool fi_z = true;
  bool sz_moments = false;
  bool delta_bz = false;
};

struct SweepRow {
  double value = 0;
  double qfi = std::numeric_limits<double>::quiet_NaN();
  double fi_x = std::numeric_limits<double>::quiet_NaN();
  double fi_y = std::numeric_limits<double>::quiet_NaN();
  double fi_z = std::numeric_limits<double>::quiet_NaN();
  double sz_mean = std::numeric_limits<double>::quiet_NaN();
  double sz2_mean = std::numeric_limits<double>::quiet_NaN();
  double delta_bz = std::numeric_limits<double>::quiet_NaN();
  double epsilon = 0;
  bool richardson_ok = true;
  bool fi_floor_flagged = false;
  std::string error;  ///< empty when the row succeeded
};

struct SweepOptimum {
  std::string column;
  std::size_t index = 0;
  double value = 0;      ///< swept parameter at the optimum
  double objective = 0;  ///< column value there
};

struct SweepTable {
  SweepVariable variable = SweepVariable::Chi;
  SweepOutputs outputs;
  std::vector<SweepRow> rows;
  ModelParams params;
  long n_periods = 0;
  double theta = 0;
  double phi = 0;
  /// max for qfi / fi_*, min for delta_bz; only columns with a finite entry
  std::vector<SweepOptimum> optima;
  std::vector<std::string> warnings;

  std::optional<SweepOptimum> optimum(std::string_view column) const;
};

SweepTable parameter_sweep(SweepVariable variable, std::span<const double> values, double theta, double phi,
                           const ModelParams& params, long n_periods, const SweepOutputs& outputs = {},
                           const ScanNumerics& numerics = {});

// --------------------------------------------------------- entropy line cut

struct EntropyCut {
  int n_atoms = 0;
  std::vector<double> thetas;
  std::vector<double> entropy;
  /// max |dS/dtheta| over adjacent samples
  double max_slope = 0;
  std::size_t argmin = 0;
  std::size_t argmax = 0;
};

/// Linear entropy after n_periods for SCS |theta, phi_fixed>, one curve per N.
std::vector<EntropyCut> entropy_line_cut(double phi_fixed, std::span<const double> thetas,
                                         const ModelParams& params, std::span<const int> n_atoms_list,
                                         long n_periods, const ScanNumerics& numerics = {});

// ---------------------------------------------------------------- fitting

struct FitResult {
  double slope = 0;
  double intercept = 0;
  double r_squared = 0;
  std::size_t first = 0;  ///< inclusive index window
  std::size_t last = 0;
};

/// Ordinary least squares on (ln x, ln y) over indices [first, last].
FitResult loglog_fit(std::span<const double> xs, std::span<const double> ys, std::size_t first = 0,
                     std::size_t last = static_cast<std::size_t>(-1));

// ------------------------------------------------------ chaos classification

/// A trajectory is chaotic when its section points visit more than
/// `box_threshold` boxes of a box_cols x box_rows grid over [0, 2 pi) x
/// [-1, 1] AND fill the bounding rows/columns like an area rather than a
/// curve: boxes / (cols + rows - 1) > fill_ratio_threshold. A curve that is
/// monotone in each coordinate has ratio <= 1 and a closed loop about 2;
/// the B_x = 0 section (one z row per trajectory) has ratio exactly 1.
struct ChaosCriteria {
  int box_cols = 50;
  int box_rows = 50;
  int box_threshold = 40;
  double fill_ratio_threshold = 3.0;
};

struct Occupancy {
  int boxes = 0;
  int cols = 0;
  int rows = 0;
  double fill_ratio = 0;
  bool chaotic = false;
};

Occupancy trajectory_occupancy(const SectionTrajectory& trajectory, const ChaosCriteria& criteria = {});
std::vector<Occupancy> section_occupancy(const PoincareSection& section, const ChaosCriteria& criteria = {});

/// Fraction of (non-aborted) trajectories classified chaotic.
double chaos_fraction(const PoincareSection& section, const ChaosCriteria& criteria = {});

/// Classical indicator on a quantum grid: each (theta, phi) is seeded at
/// classical_from_bloch(theta, phi) and classified.
struct ClassicalMap {
  std::vector<double> thetas;
  std::vector<double> phis;
  Eigen::MatrixXd fill_ratio;
  Eigen::MatrixXi boxes;
  Eigen::MatrixXi chaotic;
  ModelParams params;
  long n_periods = 0;
};

ClassicalMap classical_chaos_map(const MapGrid& grid, const ModelParams& params,
                                 long n_periods = kDefaultSectionPeriods,
                                 int steps_per_period = kDefaultRk4Divisor, const ChaosCriteria& criteria = {},
                                 unsigned workers = 0);

// ------------------------------------------------- representative seeds

struct SeedPick {
  std::string label;
  std::size_t i = 0;  ///< theta index
  std::size_t j = 0;  ///< phi index
  double theta = 0;
  double phi = 0;
  double qfi = 0;
};

struct RepresentativeSeeds {
  SeedPick chaotic;
  SeedPick edge;
  SeedPick regular;
};

/// From a QFI map: chaotic = centroid (mean direction on the sphere) of the
/// top-decile QFI points, regular = centroid of the bottom decile, edge =
/// argmax QFI on the boundary band of the median-binarized map (points with a
/// 4-neighbour on the other side of the median). theta/phi of a centroid pick
/// are the centroid itself; i, j and qfi belong to the nearest grid point.
RepresentativeSeeds select_representative_seeds(const PhaseMap& qfi_map);

// -------------------------------------------------------------- statistics

/// Spearman rank correlation (average ranks for ties) over pairs where both
/// values are finite.
double spearman(std::span<const double> a, std::span<const double> b);

/// Median of the finite entries.
double median(std::span<const double> values);

/// values > median; non-finite entries map to false.
std::vector<char> above_median(std::span<const double> values);

/// |A & B| / |A | B|; 1 when both are empty.
double jaccard(std::span<const char> a, std::span<const char> b);

/// Great-circle distance between two points of the unit sphere.
double sphere_distance(double theta1, double phi1, double theta2, double phi2);

}  // namespace chaosmetro
