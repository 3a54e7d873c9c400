#include "chaosmetro/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include "chaosmetro/errors.hpp"
#include "chaosmetro/meanfield.hpp"
#include "chaosmetro/metrology.hpp"
#include "chaosmetro/scans.hpp"

namespace chaosmetro::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ------------------------------------------------------------ option table

struct KeySpec {
  const char* key;
  const char* fallback;
  const char* help;
};

// Defaults shared by every command; per-command overrides follow.
const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = {
      {"n", "100", "particle number N (J = N/2)"},
      {"chi", "10", "nonlinearity chi"},
      {"bz", "1.5707963267948966", "static field B_z (the estimated parameter)"},
      {"bx", "1.5", "drive amplitude B_x"},
      {"omega", "6.2831853071795862", "drive frequency omega (T = 2 pi / omega)"},
      {"steps", "1000", "split steps per period"},
      {"split_order", "4", "split-step order: 2 (Strang) or 4 (triple jump)"},
      {"method", "split", "propagator method: split or exact"},
      {"epsilon", "auto", "finite-difference step in B_z, or 'auto' = min(1e-5, 1e-2/(t J))"},
      {"richardson", "true", "check the QFI against the eps/2 difference"},
      {"probability_floor", "1e-12", "FI outcomes below this probability are skipped"},
      {"theta", "2.423", "initial coherent state polar angle (radians)"},
      {"phi", "1.126", "initial coherent state azimuth (radians)"},
      {"periods", "1024", "number of drive periods"},
      {"record", "", "comma-separated periods to record (default: powers of two)"},
      {"qfi", "true", "also compute the QFI along the trajectory"},
      {"quantities", "entropy,fidelity,qfi", "phase-map quantities"},
      {"n_theta", "41", "theta grid points over [0, pi]"},
      {"n_phi", "41", "phi grid points"},
      {"phi_max", "6.2831853071795862", "phi grid upper end ([0, phi_max) when 2 pi)"},
      {"classical", "false", "add the classical chaos indicator to the phase map"},
      {"classical_periods", "500", "periods per classical trajectory"},
      {"rk4_divisor", "1000", "RK4 steps per drive period"},
      {"seeds", "24", "seed grid size per axis (seeds x seeds trajectories)"},
      {"z_min", "-0.98", "lowest seed z"},
      {"z_max", "0.98", "highest seed z"},
      {"box_cols", "50", "chaos classifier boxes along phi"},
      {"box_rows", "50", "chaos classifier boxes along z"},
      {"box_threshold", "40", "a chaotic trajectory visits more boxes than this"},
      {"fill_ratio", "3", "a chaotic trajectory has boxes/(cols+rows-1) above this"},
      {"variable", "atoms", "scaling variable: time or atoms"},
      {"period_list", "", "comma-separated periods for time scaling (default: powers of two up to periods)"},
      {"atoms", "50,100,200,400", "comma-separated particle numbers"},
      {"merits", "qfi", "figures of merit: qfi, fi_x, fi_y, fi_z"},
      {"fit_from", "0", "fit only samples with x >= fit_from"},
      {"values", "", "comma-separated sweep values"},
      {"range", "", "sweep values as start:stop:count (used when values is empty)"},
      {"out", "", "output directory (default: $CHAOSMETRO_OUTPUT_DIR, else chaosmetro-out)"},
      {"overwrite", "false", "replace the outputs of an earlier run in the same directory"},
      {"workers", "0", "worker threads (0 = hardware concurrency)"},
  };
  return specs;
}

const KeySpec& spec_for(const std::string& key) {
  for (const auto& s : key_specs())
    if (key == s.key) return s;
  throw std::logic_error("no spec for key " + key);
}

const std::vector<std::string> kModel = {"n", "chi", "bz", "bx", "omega"};
const std::vector<std::string> kClassicalModel = {"chi", "bz", "bx", "omega"};
const std::vector<std::string> kQuantum = {"steps", "split_order", "method", "epsilon", "richardson"};
const std::vector<std::string> kIo = {"out", "overwrite", "workers"};
const std::set<std::string> kBooleanKeys = {"overwrite", "richardson", "classical", "qfi"};
const std::vector<std::string> kBoxes = {"box_cols", "box_rows", "box_threshold", "fill_ratio"};

struct CommandSpec {
  std::string name;
  std::string help;
  std::vector<std::vector<std::string>> key_groups;
  std::map<std::string, std::string> defaults;
};

const std::vector<CommandSpec>& command_specs() {
  static const std::vector<CommandSpec> specs = {
      {"poincare",
       "classical stroboscopic section from a uniform seed grid, with chaos classification",
       {kClassicalModel, {"periods", "rk4_divisor", "seeds", "z_min", "z_max"}, kBoxes, kIo},
       {{"periods", "500"}}},
      {"phase-map",
       "entropy / fidelity / QFI after n periods for coherent states on a (theta, phi) grid",
       {kModel, kQuantum, {"quantities", "n_theta", "n_phi", "phi_max", "periods", "classical", "classical_periods",
                           "rk4_divisor"},
        kBoxes, kIo},
       {{"n", "60"}, {"periods", "4096"}}},
      {"evolve",
       "stroboscopic evolution of one coherent state: spin moments, entropy, fidelity, QFI",
       {kModel, kQuantum, {"theta", "phi", "periods", "record", "qfi"}, kIo},
       {}},
      {"qfi-scaling",
       "QFI / FI against evolution time or particle number, with log-log fits",
       {kModel, kQuantum, {"theta", "phi", "variable", "periods", "period_list", "atoms", "merits", "fit_from",
                           "probability_floor"},
        kIo},
       {{"periods", "3"}}},
      {"fi-sweep",
       "QFI and FI_x,y,z across nonlinearity strengths chi",
       {kModel, kQuantum, {"theta", "phi", "periods", "values", "range", "merits", "probability_floor"}, kIo},
       {{"periods", "3"}, {"bx", "5.5"}, {"range", "1:30:30"}, {"merits", "qfi,fi_x,fi_y,fi_z"}}},
      {"bz-sweep",
       "QFI and FI_x,y,z across B_z; optional N scaling at each optimum",
       {kModel, kQuantum, {"theta", "phi", "periods", "values", "range", "merits", "atoms", "probability_floor"},
        kIo},
       {{"periods", "3"}, {"bx", "5.5"}, {"chi", "17.1"}, {"range", "0:3.2:33"}, {"merits", "fi_x,fi_y,fi_z"},
        {"atoms", ""}}},
      {"error-propagation",
       "<S_z>, <S_z^2> and Delta B_z across B_z; optional N scaling at the optimum",
       {kModel, kQuantum, {"theta", "phi", "periods", "values", "range", "atoms"}, kIo},
       {{"periods", "3"}, {"bx", "5.5"}, {"chi", "17.1"}, {"range", "0:3.2:33"}, {"atoms", ""}}},
      {"entropy-cut",
       "linear entropy along a fixed-phi line for several N",
       {kClassicalModel, kQuantum, {"phi", "n_theta", "atoms", "periods"}, kIo},
       {{"phi", "3.1415926535897931"}, {"n_theta", "181"}, {"atoms", "100,200,400"}, {"periods", "4096"}}},
      {"husimi",
       "Husimi Q function of the evolved coherent state",
       {kModel, kQuantum, {"theta", "phi", "periods", "n_theta", "n_phi"}, kIo},
       {{"n_theta", "181"}, {"n_phi", "361"}}},
      {"floquet-h",
       "Floquet Hamiltonian H_F = (i/T) log U(T) and its quasienergies",
       {kModel, {"steps", "split_order", "method"}, kIo},
       {}},
  };
  return specs;
}

const CommandSpec& command_spec(const std::string& name) {
  for (const auto& c : command_specs())
    if (c.name == name) return c;
  throw UsageError("unknown command '" + name + "'");
}

std::string normalize_key(std::string key) {
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// ------------------------------------------------------------ value parsing

double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  const auto text = trim(s);
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw ValidationError(key, "expected a number, got '" + s + "'");
  if (!std::isfinite(v)) throw ValidationError(key, "must be finite");
  return v;
}

long parse_long(const std::string& key, const std::string& s) {
  long v = 0;
  const auto text = trim(s);
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw ValidationError(key, "expected an integer, got '" + s + "'");
  return v;
}

long parse_positive(const std::string& key, const std::string& s) {
  const long v = parse_long(key, s);
  if (v < 1) throw ValidationError(key, "must be >= 1");
  return v;
}

long parse_nonnegative(const std::string& key, const std::string& s) {
  const long v = parse_long(key, s);
  if (v < 0) throw ValidationError(key, "must be >= 0");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  std::string v = trim(s);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError(key, "expected true or false, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(parse_double(key, item));
  return out;
}

std::vector<long> parse_long_list(const std::string& key, const std::string& s, long min_value) {
  std::vector<long> out;
  for (const auto& item : split_list(s)) {
    const long v = parse_long(key, item);
    if (v < min_value) throw ValidationError(key, "entries must be >= " + std::to_string(min_value));
    out.push_back(v);
  }
  return out;
}

std::vector<double> parse_range(const std::string& key, const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ':')) parts.push_back(item);
  if (parts.size() != 3) throw ValidationError(key, "expected start:stop:count, got '" + s + "'");
  const double a = parse_double(key, parts[0]);
  const double b = parse_double(key, parts[1]);
  const long count = parse_positive(key, parts[2]);
  std::vector<double> out;
  for (long i = 0; i < count; ++i) out.push_back(count > 1 ? a + (b - a) * static_cast<double>(i) / (count - 1) : a);
  return out;
}

// --------------------------------------------------------------- output

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::general, 17);
  return std::string(buf.data(), ptr);
}

struct Cell {
  std::string text;
  Cell(double v) : text(format_double(v)) {}
  Cell(int v) : text(std::to_string(v)) {}
  Cell(long v) : text(std::to_string(v)) {}
  Cell(unsigned long v) : text(std::to_string(v)) {}
  Cell(bool v) : text(v ? "1" : "0") {}
  Cell(const std::string& v) : text(quote(v)) {}
  Cell(const char* v) : text(quote(v)) {}

  static std::string quote(const std::string& v) {
    if (v.find_first_of(",\"\n") == std::string::npos) return v;
    std::string out = "\"";
    for (char c : v) {
      if (c == '"') out += '"';
      out += c == '\n' ? ' ' : c;
    }
    return out + "\"";
  }
};

class CsvFile {
 public:
  CsvFile(const fs::path& path, const std::vector<std::string>& header)
      : out_(path, std::ios::binary | std::ios::trunc), columns_(header.size()) {
    if (!out_) throw NumericalError("cannot open " + path.string() + " for writing");
    write(header);
  }
  void row(const std::vector<Cell>& cells) {
    if (cells.size() != columns_) throw std::logic_error("csv row width mismatch");
    std::vector<std::string> text;
    text.reserve(cells.size());
    for (const auto& c : cells) text.push_back(c.text);
    write(text);
  }
  void close() {
    out_.close();
    if (!out_) throw NumericalError("failed to write CSV output");
  }

 private:
  void write(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << fields[i];
    }
    out_ << '\n';
  }
  std::ofstream out_;
  std::size_t columns_;
};

// Tracks everything a run writes so a failed run leaves nothing behind.
class OutputSet {
 public:
  explicit OutputSet(fs::path dir) : dir_(std::move(dir)) {}

  CsvFile open(const std::string& name, const std::vector<std::string>& header) {
    files_.push_back(name);
    return CsvFile(dir_ / name, header);
  }
  void track(const std::string& name) { files_.push_back(name); }
  const std::vector<std::string>& files() const { return files_; }
  const fs::path& dir() const { return dir_; }

  void remove_all() noexcept {
    std::error_code ec;
    for (const auto& f : files_) fs::remove(dir_ / f, ec);
    fs::remove(dir_ / "manifest.json", ec);
  }

 private:
  fs::path dir_;
  std::vector<std::string> files_;
};

struct RunContext {
  const RunConfig& config;
  OutputSet& outputs;
  json results = json::object();
  std::vector<std::string> warnings;
};

void prepare_output_dir(const RunConfig& config) {
  std::error_code ec;
  fs::create_directories(config.output_dir, ec);
  if (ec) throw ValidationError("out", "cannot create " + config.output_dir.string() + ": " + ec.message());
  if (!fs::is_directory(config.output_dir))
    throw ValidationError("out", config.output_dir.string() + " is not a directory");
  const fs::path probe = config.output_dir / ".chaosmetro-write-probe";
  {
    std::ofstream f(probe);
    if (!f) throw ValidationError("out", config.output_dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
  if (!config.overwrite && fs::exists(config.output_dir / "manifest.json"))
    throw ValidationError("out", config.output_dir.string() +
                                     " already holds a run (manifest.json); pass --overwrite to replace it");
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ------------------------------------------------------------ shared bits

ScanNumerics scan_numerics(const RunConfig& c) {
  ScanNumerics n;
  n.encoding.steps = c.steps;
  n.encoding.order = c.split_order;
  n.encoding.method = c.method;
  n.encoding.richardson = c.richardson;
  if (c.epsilon) {
    n.encoding.epsilon = *c.epsilon;
    n.auto_epsilon = false;
  }
  n.probability_floor = c.probability_floor;
  n.workers = c.workers;
  return n;
}

const std::string& value(const RunConfig& c, const std::string& key) {
  const auto it = c.values.find(key);
  if (it == c.values.end()) throw std::logic_error("command does not define key " + key);
  return it->second;
}

double get_double(const RunConfig& c, const std::string& key) { return parse_double(key, value(c, key)); }
long get_periods(const RunConfig& c) { return parse_nonnegative("periods", value(c, "periods")); }

std::vector<double> sweep_values(const RunConfig& c) {
  std::vector<double> v = parse_double_list("values", value(c, "values"));
  if (v.empty() && !trim(value(c, "range")).empty()) v = parse_range("range", value(c, "range"));
  if (v.empty()) throw ValidationError("values", "give sweep values or a range");
  return v;
}

std::vector<FigureOfMerit> merits_of(const RunConfig& c) {
  std::vector<FigureOfMerit> out;
  for (const auto& m : split_list(value(c, "merits"))) {
    const FigureOfMerit f = parse_figure_of_merit(m);
    if (std::find(out.begin(), out.end(), f) != out.end()) throw ValidationError("merits", "duplicate entry " + m);
    out.push_back(f);
  }
  if (out.empty()) throw ValidationError("merits", "need at least one figure of merit");
  return out;
}

ChaosCriteria criteria_of(const RunConfig& c) {
  ChaosCriteria k;
  k.box_cols = static_cast<int>(parse_positive("box_cols", value(c, "box_cols")));
  k.box_rows = static_cast<int>(parse_positive("box_rows", value(c, "box_rows")));
  k.box_threshold = static_cast<int>(parse_nonnegative("box_threshold", value(c, "box_threshold")));
  k.fill_ratio_threshold = get_double(c, "fill_ratio");
  return k;
}

void check_angles(double theta, double phi) {
  if (!(theta >= 0 && theta <= std::numbers::pi)) throw ValidationError("theta", "must lie in [0, pi]");
  if (!std::isfinite(phi)) throw ValidationError("phi", "must be finite");
}

void add_warnings(RunContext& ctx, const std::vector<std::string>& w) {
  ctx.warnings.insert(ctx.warnings.end(), w.begin(), w.end());
}

// Rough single-core cost of one propagator, to flag long-running requests.
void runtime_warning(RunContext& ctx, int n_atoms, long periods, std::size_t points) {
  if (n_atoms <= 400 && periods <= 4096 && points <= 41 * 41) return;
  const double d = n_atoms + 1.0;
  const double propagator_s = 20.0 * std::pow(d / 401.0, 3);
  const double squaring_s = 0.013 * std::pow(d / 401.0, 3) * std::log2(std::max<long>(periods, 2));
  ctx.warnings.push_back("beyond desk scale (N=" + std::to_string(n_atoms) + ", " + std::to_string(periods) +
                         " periods, " + std::to_string(points) + " states): expect roughly " +
                         format_double(std::round(3 * (propagator_s + squaring_s))) +
                         " s per propagator set on one core");
}

json fit_json(const FitResult& f) {
  return {{"slope", f.slope}, {"intercept", f.intercept}, {"r_squared", f.r_squared},
          {"first_index", f.first}, {"last_index", f.last}};
}

// Writes one fit.csv row; a failed fit becomes a NaN row plus a warning.
std::optional<FitResult> fit_row(RunContext& ctx, CsvFile& csv, const std::string& label,
                                 const std::vector<double>& xs, const std::vector<double>& ys, double fit_from) {
  std::size_t first = 0;
  while (first < xs.size() && xs[first] < fit_from) ++first;
  try {
    if (first >= xs.size()) throw ValidationError("fit_from", "no samples at or beyond " + format_double(fit_from));
    const FitResult f = loglog_fit(xs, ys, first);
    csv.row({label, f.slope, f.intercept, f.r_squared, f.first, f.last, f.last - f.first + 1});
    return f;
  } catch (const UsageError& e) {
    ctx.warnings.push_back("fit for " + label + " failed: " + e.what());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    csv.row({label, nan, nan, nan, first, xs.empty() ? 0UL : xs.size() - 1, 0UL});
    return std::nullopt;
  }
}

// ---------------------------------------------------------------- commands

void cmd_poincare(RunContext& ctx) {
  const RunConfig& c = ctx.config;
  const long periods = parse_positive("periods", value(c, "periods"));
  const int divisor = static_cast<int>(parse_positive("rk4_divisor", value(c, "rk4_divisor")));
  const int n_seeds = static_cast<int>(parse_positive("seeds", value(c, "seeds")));
  const double z_min = get_double(c, "z_min");
  const double z_max = get_double(c, "z_max");
  if (!(z_min >= -1 && z_max <= 1 && z_min <= z_max)) throw ValidationError("z_min", "need -1 <= z_min <= z_max <= 1");
  const ChaosCriteria criteria = criteria_of(c);

  const auto seeds = seed_grid(n_seeds, z_min, z_max);
  const PoincareSection section = poincare_section(seeds, c.model, periods, divisor, c.workers);
  const auto occupancy = section_occupancy(section, criteria);

  auto points = ctx.outputs.open("poincare.csv", {"seed_index", "period", "phi", "z"});
  auto seed_csv = ctx.outputs.open("seeds.csv", {"seed_index", "phi0", "z0", "boxes", "cols", "rows", "fill_ratio",
                                                 "chaotic", "clamp_events", "aborted"});
  std::size_t aborted = 0;
  for (std::size_t i = 0; i < section.trajectories.size(); ++i) {
    const auto& tr = section.trajectories[i];
    for (std::size_t k = 0; k < tr.points.size(); ++k)
      points.row({i, static_cast<unsigned long>(k + 1), tr.points[k].phi, tr.points[k].z});
    const auto& o = occupancy[i];
    seed_csv.row({i, tr.seed.phi, tr.seed.z, o.boxes, o.cols, o.rows, o.fill_ratio, o.chaotic && !tr.aborted,
                  tr.clamp_events, tr.aborted});
    aborted += tr.aborted;
  }
  points.close();
  seed_csv.close();

  const double fraction = chaos_fraction(section, criteria);
  ctx.results["chaos_fraction"] = fraction;
  ctx.results["trajectories"] = section.trajectories.size();
  ctx.results["clamp_events"] = section.total_clamps();
  ctx.results["rk4_steps"] = section.total_steps();
  if (section.total_clamps() > 0)
    ctx.warnings.push_back("z clamped into [-1, 1] at " + std::to_string(section.total_clamps()) +
                           " section samples");
  if (aborted > 0) ctx.warnings.push_back(std::to_string(aborted) + " trajectories aborted on non-finite values");
}

void cmd_phase_map(RunContext& ctx) {
  const RunConfig& c = ctx.config;
  std::vector<MapQuantity> quantities;
  for (const auto& q : split_list(value(c, "quantities"))) {
    const MapQuantity m = parse_map_quantity(q);
    if (std::find(quantities.begin(), quantities.end(), m) != quantities.end())
      throw ValidationError("quantities", "duplicate entry " + q);
    quantities.push_back(m);
  }
  if (quantities.empty()) throw ValidationError("quantities", "need at least one quantity");
  const long periods = get_periods(c);
  const MapGrid grid = MapGrid::uniform(static_cast<int>(parse_positive("n_theta", value(c, "n_theta"))),
                                        static_cast<int>(parse_positive("n_phi", value(c, "n_phi"))),
                                        get_double(c, "phi_max"));
  const bool classical = parse_bool("classical", value(c, "classical"));
  const long classical_periods = parse_positive("classical_periods", value(c, "classical_periods"));
  const int divisor = static_cast<int>(parse_positive("rk4_divisor", value(c, "rk4_divisor")));
  const ChaosCriteria criteria = criteria_of(c);
  runtime_warning(ctx, c.model.n_atoms, periods, grid.size());

  const auto maps = phase_maps(quantities, grid, c.model, periods, scan_numerics(c));
  std::optional<ClassicalMap> cmap;
  if (classical) cmap = classical_chaos_map(grid, c.model, classical_periods, divisor, criteria, c.workers);

  std::vector<std::string> header = {"theta_index", "phi_index", "theta", "phi"};
  for (const auto& m : maps) header.emplace_back(to_string(m.quantity));
  if (cmap) {
    header.emplace_back("classical_fill_ratio");
    header.emplace_back("classical_chaotic");
  }
  auto csv = ctx.outputs.open("phase_map.csv", header);
  for (std::size_t i = 0; i < grid.thetas.size(); ++i)
    for (std::size_t j = 0; j < grid.phis.size(); ++j) {
      std::vector<Cell> row = {i, j, grid.thetas[i], grid.phis[j]};
      for (const auto& m : maps) row.emplace_back(m.values(i, j));
      if (cmap) {
        row.emplace_back(cmap->fill_ratio(i, j));
        row.emplace_back(static_cast<bool>(cmap->chaotic(i, j)));
      }
      csv.row(row);
    }
  csv.close();

  auto flat = [](const Eigen::MatrixXd& m) {
    std::vector<double> v;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
    return v;
  };
  const PhaseMap* entropy = nullptr;
  const PhaseMap* fid = nullptr;
  for (const auto& m : maps) {
    json r = {{"missing", m.missing}, {"n_periods", m.n_periods}};
    if (m.quantity == MapQuantity::Qfi) {
      r["epsilon"] = m.epsilon;
      r["richardson_failures"] = m.richardson_failures;
    }
    ctx.results[std::string(to_string(m.quantity))] = r;
    if (m.quantity == MapQuantity::Entropy) entropy = &m;
    if (m.quantity == MapQuantity::Fidelity) fid = &m;
    add_warnings(ctx, m.warnings);
  }
  if (!maps.empty()) {
    // warnings shared by all quantities are repeated per map; keep one copy
    std::sort(ctx.warnings.begin(), ctx.warnings.end());
    ctx.warnings.erase(std::unique(ctx.warnings.begin(), ctx.warnings.end()), ctx.warnings.end());
  }
  if (entropy && fid) ctx.results["spearman_entropy_fidelity"] = spearman(flat(entropy->values), flat(fid->values));
  if (entropy && cmap) {
    std::vector<char> sea;
    for (Eigen::Index i = 0; i < cmap->chaotic.rows(); ++i)
      for (Eigen::Index j = 0; j < cmap->chaotic.cols(); ++j) sea.push_back(static_cast<char>(cmap->chaotic(i, j)));
    ctx.results["jaccard_entropy_classical"] = jaccard(above_median(flat(entropy->values)), sea);
    ctx.results["classical_chaotic_fraction"] = cmap->chaotic.cast<double>().mean();
  }

  for (const auto& m : maps) {
    if (m.quantity != MapQuantity::Qfi) continue;
    const RepresentativeSeeds s = select_representative_seeds(m);
    auto seeds = ctx.outputs.open("seeds.csv", {"label", "theta_index", "phi_index", "theta", "phi", "qfi"});
    json picks = json::object();
    for (const SeedPick* p : {&s.chaotic, &s.edge, &s.regular}) {
      seeds.row({p->label, p->i, p->j, p->theta, p->phi, p->qfi});
      picks[p->label] = {{"theta", p->theta}, {"phi", p->phi}, {"qfi", p->qfi}};
    }
    seeds.close();
    ctx.results["representative_seeds"] = picks;
  }
}

std::vector<long> default_record(long periods) {
  std::vector<long> out = {0};
  for (long p = 1; p <= periods; p *= 2) out.push_back(p);
  if (out.back() != periods) out.push_back(periods);
  return out;
}

void cmd_evolve(RunContext& ctx) {
  const RunConfig& c = ctx.config;
  const long periods = get_periods(c);
  const double theta = get_double(c, "theta");
  const double phi = get_double(c, "phi");
  check_angles(theta, phi);
  const bool with_qfi = parse_bool("qfi", value(c, "qfi"));
  std::vector<long> record = parse_long_list("record", value(c, "record"), 0);
  if (record.empty()) record = default_record(periods);
  std::sort(record.begin(), record.end());
  record.erase(std::unique(record.begin(), record.end()), record.end());
  if (record.back() > periods) throw ValidationError("record", "entries must not exceed periods");
  runtime_warning(ctx, c.model.n_atoms, periods, 1);

  ScanNumerics num = scan_numerics(c);
  EncodingOptions enc = num.encoding;
  enc.derivative = with_qfi;
  enc.epsilon = num.epsilon_for(periods * c.model.period(), c.model.j());
  const ParameterEncoder encoder(c.model, periods, enc);
  const SpinSystem sys{c.model.n_atoms};
  const Eigen::VectorXcd psi0 = coherent_state<double>(sys, theta, phi);
  const auto results = encoder.encode_schedule(psi0, record);
  const auto ops = shared_spin_operators(c.model.n_atoms);

  auto csv = ctx.outputs.open("evolution.csv",
                              {"period", "t", "sx", "sy", "sz", "entropy", "fidelity", "qfi", "richardson_ok"});
  std::size_t richardson_failures = 0;
  for (std::size_t k = 0; k < record.size(); ++k) {
    const auto& r = results[k];
    const Eigen::Vector3d s = spin_vector(r.psi_f, *ops);
    csv.row({record[k], record[k] * c.model.period(), s(0), s(1), s(2), linear_entropy(r.psi_f, *ops, c.model.j()),
             fidelity(psi0, r.psi_f), r.qfi, r.richardson_ok});
    richardson_failures += !r.richardson_ok;
  }
  csv.close();
  ctx.results["strategy"] = encoder.strategy() == EncodingStrategy::Direct ? "direct" : "propagator";
  if (with_qfi) ctx.results["epsilon"] = enc.epsilon;
  if (richardson_failures)
    ctx.warnings.push_back("Richardson check failed at " + std::to_string(richardson_failures) + " recorded periods");
}

void write_scaling(RunContext& ctx, const std::vector<ScalingSeries>& series, double fit_from) {
  const ScalingSeries& first = series.front();
  std::vector<std::string> header = {"variable", "x", "period", "n_atoms"};
  for (const auto& s : series) header.emplace_back(to_string(s.merit));
  header.insert(header.end(), {"epsilon", "richardson_ok", "error"});
  auto csv = ctx.outputs.open("scaling.csv", header);
  for (std::size_t i = 0; i < first.xs.size(); ++i) {
    const bool time = first.variable == ScalingVariable::Time;
    std::vector<Cell> row = {std::string(to_string(first.variable)), first.xs[i],
                             time ? first.periods[i] : first.periods.front(),
                             time ? first.params.n_atoms : static_cast<int>(first.xs[i])};
    for (const auto& s : series) row.emplace_back(s.ys[i]);
    row.emplace_back(first.epsilons[i]);
    row.emplace_back(static_cast<bool>(first.richardson_ok[i]));
    row.emplace_back(first.errors[i]);
    csv.row(row);
  }
  csv.close();

  auto fit = ctx.outputs.open("fit.csv", {"merit", "slope", "intercept", "r_squared", "first_index", "last_index",
                                          "n_points"});
  json fits = json::object();
  for (const auto& s : series) {
    const std::string label(to_string(s.merit));
    if (auto f = fit_row(ctx, fit, label, s.xs, s.ys, fit_from)) fits[label] = fit_json(*f);
  }
  fit.close();
  ctx.results["fits"] = fits;
  add_warnings(ctx, first.warnings);
}

void cmd_qfi_scaling(RunContext& ctx) {
  const RunConfig& c = ctx.config;
  const double theta = get_double(c, "theta");
  const double phi = get_double(c, "phi");
  check_angles(theta, phi);
  const auto merits = merits_of(c);
  const std::string variable = trim(value(c, "variable"));
  const double fit_from = get_double(c, "fit_from");
  const long periods = get_periods(c);

  std::vector<ScalingSeries> series;
  if (variable == "time") {
    std::vector<long> list = parse_long_list("period_list", value(c, "period_list"), 0);
    if (list.empty()) {
      list = default_record(periods);
      list.erase(list.begin());  // t = 0 has no place on a log axis
    }
    if (list.empty()) throw ValidationError("periods", "time scaling needs at least one positive period");
    const std::vector<double> values(list.begin(), list.end());
    runtime_warning(ctx, c.model.n_atoms, static_cast<long>(values.back()), 1);
    series = scaling_sweeps(ScalingVariable::Time, values, theta, phi, c.model, 0, merits, scan_numerics(c));
  } else if (variable == "atoms") {
    const auto atoms = parse_long_list("atoms", value(c, "atoms"), 1);
    if (atoms.empty()) throw ValidationError("atoms", "need at least one particle number");
    const std::vector<double> values(atoms.begin(), atoms.end());
    runtime_warning(ctx, static_cast<int>(atoms.back()), periods, 1);
    series = scaling_sweeps(ScalingVariable::Atoms, values, theta, phi, c.model, periods, merits, scan_numerics(c));
  } else {
    throw ValidationError("variable", "expected time or atoms, got '" + variable + "'");
  }
  write_scaling(ctx, series, fit_from);
}

void write_sweep(RunContext& ctx, const SweepTable& t, const std::string& name) {
  const std::string var(to_string(t.variable));
  std::vector<std::string> header = {var};
  const SweepOutputs& o = t.outputs;
  if (o.qfi) header.emplace_back("qfi");
  if (o.fi_x) header.emplace_back("fi_x");
  if (o.fi_y) header.emplace_back("fi_y");
  if (o.fi_z) header.emplace_back("fi_z");
  if (o.sz_moments) header.insert(header.end(), {"sz_mean", "sz2_mean"});
  if (o.delta_bz) header.emplace_back("delta_bz");
  header.insert(header.end(), {"epsilon", "richardson_ok", "error"});
  auto csv = ctx.outputs.open(name, header);
  for (const auto& r : t.rows) {
    std::vector<Cell> row = {r.value};
    if (o.qfi) row.emplace_back(r.qfi);
    if (o.fi_x) row.emplace_back(r.fi_x);
    if (o.fi_y) row.emplace_back(r.fi_y);
    if (o.fi_z) row.emplace_back(r.fi_z);
    if (o.sz_moments) {
      row.emplace_back(r.sz_mean);
      row.emplace_back(r.sz2_mean);
    }
    if (o.delta_bz) row.emplace_back(r.delta_bz);
    row.emplace_back(r.epsilon);
    row.emplace_back(r.richardson_ok);
    row.emplace_back(r.error);
    csv.row(row);
  }
  csv.close();
  add_warnings(ctx, t.warnings);
}

void write_optima(RunContext& ctx, const SweepTable& t) {
  auto csv = ctx.outputs.open("optimum.csv", {"column", "index", std::string(to_string(t.variable)), "objective"});
  json optima = json::object();
  for (const auto& o : t.optima) {
    csv.row({o.column, o.index, o.value, o.objective});
    optima[o.column] = {{"index", o.index}, {"value", o.value}, {"objective", o.objective}};
  }
  csv.close();
  ctx.results["optima"] = optima;
}

SweepOutputs outputs_for(const std::vector<FigureOfMerit>& merits) {
  SweepOutputs o;
  o.qfi = o.fi_x = o.fi_y = o.fi_z = false;
  for (FigureOfMerit m : merits) {
    if (m == FigureOfMerit::Qfi) o.qfi = true;
    if (m == FigureOfMerit::FiX) o.fi_x = true;
    if (m == FigureOfMerit::FiY) o.fi_y = true;
    if (m == FigureOfMerit::FiZ) o.fi_z = true;
  }
  return o;
}

void cmd_fi_sweep(RunContext& ctx, SweepVariable variable) {
  const RunConfig& c = ctx.config;
  const double theta = get_double(c, "theta");
  const double phi = get_double(c, "phi");
  check_angles(theta, phi);
  const long periods = get_periods(c);
  const auto merits = merits_of(c);
  const auto values = sweep_values(c);
  runtime_warning(ctx, c.model.n_atoms, periods, values.size());
  const ScanNumerics num = scan_numerics(c);

  const SweepTable table = parameter_sweep(variable, values, theta, phi, c.model, periods, outputs_for(merits), num);
  write_sweep(ctx, table, "sweep.csv");
  write_optima(ctx, table);

  if (variable != SweepVariable::Bz) return;
  const auto atoms = parse_long_list("atoms", value(c, "atoms"), 1);
  if (atoms.empty()) return;
  // N scaling of each figure of merit at its own optimal B_z.
  const std::vector<double> ns(atoms.begin(), atoms.end());
  auto csv = ctx.outputs.open("scaling.csv", {"merit", "bz", "n_atoms", "value", "epsilon", "error"});
  std::vector<std::pair<std::string, ScalingSeries>> all;
  for (FigureOfMerit m : merits) {
    const auto opt = table.optimum(std::string(to_string(m)));
    if (!opt) {
      ctx.warnings.push_back("no finite optimum for " + std::string(to_string(m)) + "; scaling skipped");
      continue;
    }
    ScalingSeries s = scaling_sweep(ScalingVariable::Atoms, ns, theta, phi, c.model.with_bz(opt->value), periods, m, num);
    for (std::size_t i = 0; i < s.xs.size(); ++i)
      csv.row({std::string(to_string(m)), opt->value, static_cast<long>(s.xs[i]), s.ys[i], s.epsilons[i], s.errors[i]});
    add_warnings(ctx, s.warnings);
    all.emplace_back(std::string(to_string(m)), std::move(s));
  }
  csv.close();
  auto fit = ctx.outputs.open("fit.csv", {"merit", "slope", "intercept", "r_squared", "first_index", "last_index",
                                          "n_points"});
  json fits = json::object();
  for (const auto& [label, s] : all)
    if (auto f = fit_row(ctx, fit, label, s.xs, s.ys, 0)) fits[label] = fit_json(*f);
  fit.close();
  ctx.results["fits"] = fits;
}

void cmd_error_propagation(RunContext& ctx) {
  const RunConfig& c = ctx.config;
  const double theta = get_double(c, "theta");
  const double phi = get_double(c, "phi");
  check_angles(theta, phi);
  const long periods = get_periods(c);
  const auto values = sweep_values(c);
  runtime_warning(ctx, c.model.n_atoms, periods, values.size());
  const ScanNumerics num = scan_numerics(c);
  SweepOutputs outputs;
  outputs.qfi = outputs.fi_x = outputs.fi_y = outputs.fi_z = false;
  outputs.sz_moments = outputs.delta_bz = true;

  const SweepTable table = parameter_sweep(SweepVariable::Bz, values, theta, phi, c.model, periods, outputs, num);
  write_sweep(ctx, table, "sweep.csv");
  write_optima(ctx, table);

  const auto atoms = parse_long_list("atoms", value(c, "atoms"), 1);
  if (atoms.empty()) return;
  // Delta B_z for every N at the B_z that minimises it for the swept N.
  const auto best = table.optimum("delta_bz");
  if (!best) {
    ctx.warnings.push_back("no finite Delta B_z in the sweep; scaling skipped");
    return;
  }
  auto csv = ctx.outputs.open("scaling.csv", {"n_atoms", "bz", "delta_bz", "delta_bz_sq", "sz_mean", "sz2_mean",
                                              "error"});
  std::vector<double> ns, d2;
  const std::vector<double> at = {best->value};
  for (long n : atoms) {
    ModelParams p = c.model;
    p.n_atoms = static_cast<int>(n);
    const SweepTable t = parameter_sweep(SweepVariable::Bz, at, theta, phi, p, periods, outputs, num);
    add_warnings(ctx, t.warnings);
    const SweepRow& r = t.rows.front();
    csv.row({n, best->value, r.delta_bz, r.delta_bz * r.delta_bz, r.sz_mean, r.sz2_mean, r.error});
    ns.push_back(static_cast<double>(n));
    d2.push_back(r.delta_bz * r.delta_bz);
  }
  csv.close();
  auto fit = ctx.outputs.open("fit.csv", {"merit", "slope", "intercept", "r_squared", "first_index", "last_index",
                                          "n_points"});
  json fits = json::object();
  if (auto f = fit_row(ctx, fit, "delta_bz_sq", ns, d2, 0)) fits["delta_bz_sq"] = fit_json(*f);
  fit.close();
  ctx.results["fits"] = fits;
}

void cmd_entropy_cut(RunContext& ctx) {
  const RunConfig& c = ctx.config;
  const double phi = get_double(c, "phi");
  const long periods = get_periods(c);
  const int n_theta = static_cast<int>(parse_positive("n_theta", value(c, "n_theta")));
  const auto atoms = parse_long_list("atoms", value(c, "atoms"), 1);
  if (atoms.empty()) throw ValidationError("atoms", "need at least one particle number");
  const std::vector<int> ns(atoms.begin(), atoms.end());
  const MapGrid grid = MapGrid::uniform(n_theta, 1);
  runtime_warning(ctx, *std::max_element(ns.begin(), ns.end()), periods, grid.thetas.size());

  const auto cuts = entropy_line_cut(phi, grid.thetas, c.model, ns, periods, scan_numerics(c));
  auto csv = ctx.outputs.open("entropy_cut.csv", {"n_atoms", "theta", "entropy"});
  auto sharp = ctx.outputs.open("sharpness.csv", {"n_atoms", "max_slope", "theta_min_entropy", "theta_max_entropy"});
  json sharpness = json::object();
  for (const auto& cut : cuts) {
    for (std::size_t i = 0; i < cut.thetas.size(); ++i) csv.row({cut.n_atoms, cut.thetas[i], cut.entropy[i]});
    sharp.row({cut.n_atoms, cut.max_slope, cut.thetas[cut.argmin], cut.thetas[cut.argmax]});
    sharpness[std::to_string(cut.n_atoms)] = cut.max_slope;
  }
  csv.close();
  sharp.close();
  ctx.results["max_slope"] = sharpness;
}

void cmd_husimi(RunContext& ctx) {
  const RunConfig& c = ctx.config;
  const double theta = get_double(c, "theta");
  const double phi = get_double(c, "phi");
  check_angles(theta, phi);
  const long periods = get_periods(c);
  AngularGrid grid;
  grid.n_theta = static_cast<int>(parse_positive("n_theta", value(c, "n_theta")));
  grid.n_phi = static_cast<int>(parse_positive("n_phi", value(c, "n_phi")));
  runtime_warning(ctx, c.model.n_atoms, periods, 1);

  EncodingOptions enc = scan_numerics(c).encoding;
  enc.derivative = false;
  const ParameterEncoder encoder(c.model, periods, enc);
  const SpinSystem sys{c.model.n_atoms};
  const Eigen::VectorXcd psi = encoder.encode(coherent_state<double>(sys, theta, phi)).psi_f;
  const HusimiGrid q = husimi_q(sys, psi, grid);

  auto csv = ctx.outputs.open("husimi.csv", {"theta", "phi", "q"});
  for (std::size_t i = 0; i < q.thetas.size(); ++i)
    for (std::size_t j = 0; j < q.phis.size(); ++j)
      csv.row({q.thetas[i], q.phis[j], q.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))});
  csv.close();
  const double integral = q.integral();
  ctx.results["integral"] = integral;
  if (std::abs(integral - 1.0) > 1e-3)
    ctx.warnings.push_back("Husimi integral on this grid is " + format_double(integral) + "; refine the grid");
}

void cmd_floquet(RunContext& ctx) {
  const RunConfig& c = ctx.config;
  runtime_warning(ctx, c.model.n_atoms, 1, 1);
  const PeriodPropagator prop = period_propagator(c.model, c.steps, c.method, c.split_order);
  const FloquetHamiltonian f = floquet_hamiltonian(prop);
  auto q = ctx.outputs.open("quasienergies.csv", {"index", "quasienergy"});
  for (Eigen::Index k = 0; k < f.quasienergies.size(); ++k) q.row({static_cast<long>(k), f.quasienergies(k)});
  q.close();
  auto h = ctx.outputs.open("floquet_h.csv", {"row", "col", "re", "im"});
  for (Eigen::Index i = 0; i < f.h.rows(); ++i)
    for (Eigen::Index j = 0; j < f.h.cols(); ++j)
      h.row({static_cast<long>(i), static_cast<long>(j), f.h(i, j).real(), f.h(i, j).imag()});
  h.close();
  ctx.results["unitarity_defect"] = unitarity_defect(prop.u);
  ctx.results["branch_cut_flagged"] = f.branch_cut_flagged;
  if (f.branch_cut_flagged)
    ctx.warnings.push_back("an eigenphase of U(T) sits on the branch cut; its phase was set to +pi (quasienergy -pi/T)");
}

void dispatch(RunContext& ctx) {
  const std::string& cmd = ctx.config.command;
  if (cmd == "poincare") return cmd_poincare(ctx);
  if (cmd == "phase-map") return cmd_phase_map(ctx);
  if (cmd == "evolve") return cmd_evolve(ctx);
  if (cmd == "qfi-scaling") return cmd_qfi_scaling(ctx);
  if (cmd == "fi-sweep") return cmd_fi_sweep(ctx, SweepVariable::Chi);
  if (cmd == "bz-sweep") return cmd_fi_sweep(ctx, SweepVariable::Bz);
  if (cmd == "error-propagation") return cmd_error_propagation(ctx);
  if (cmd == "entropy-cut") return cmd_entropy_cut(ctx);
  if (cmd == "husimi") return cmd_husimi(ctx);
  if (cmd == "floquet-h") return cmd_floquet(ctx);
  throw UsageError("unknown command '" + cmd + "'");
}

void write_manifest(const RunContext& ctx, const std::string& started, double seconds) {
  json manifest;
  manifest["tool"] = kToolName;
  manifest["version"] = kToolVersion;
  manifest["command"] = ctx.config.command;
  manifest["config"] = {{"command", ctx.config.command}, {"values", ctx.config.values}};
  manifest["started_utc"] = started;
  manifest["wall_seconds"] = seconds;
  json files = json::array();
  for (const auto& f : ctx.outputs.files()) {
    const fs::path p = ctx.outputs.dir() / f;
    files.push_back({{"file", f}, {"sha256", sha256_file(p)}, {"bytes", fs::file_size(p)}});
  }
  manifest["outputs"] = files;
  manifest["warnings"] = ctx.warnings;
  manifest["results"] = ctx.results;

  const fs::path tmp = ctx.outputs.dir() / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << '\n';
    if (!out) throw NumericalError("failed to write manifest");
  }
  fs::rename(tmp, ctx.outputs.dir() / "manifest.json");
}

}  // namespace

// ------------------------------------------------------------- public API

std::vector<std::string> commands() {
  std::vector<std::string> out;
  for (const auto& c : command_specs()) out.push_back(c.name);
  return out;
}

std::vector<std::string> command_keys(const std::string& command) {
  std::vector<std::string> out;
  for (const auto& group : command_spec(command).key_groups) out.insert(out.end(), group.begin(), group.end());
  return out;
}

std::map<std::string, std::string> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config", "cannot read " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config", path.string() + ":" + std::to_string(number) + ": expected key = value");
    const std::string key = normalize_key(trim(line.substr(0, eq)));
    if (key.empty()) throw ValidationError("config", path.string() + ":" + std::to_string(number) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

RunConfig make_config(const std::string& command, const std::map<std::string, std::string>& file_values,
                      const std::map<std::string, std::string>& flag_values) {
  const CommandSpec& spec = command_spec(command);
  const auto keys = command_keys(command);
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : file_values)
    if (!allowed.contains(k)) throw UsageError("unknown key '" + k + "' for command " + command);
  for (const auto& [k, v] : flag_values)
    if (!allowed.contains(k)) throw UsageError("unknown option '--" + dashed(k) + "' for command " + command);

  RunConfig c;
  c.command = command;
  for (const auto& k : keys) {
    std::string v = spec_for(k).fallback;
    if (auto it = spec.defaults.find(k); it != spec.defaults.end()) v = it->second;
    if (auto it = file_values.find(k); it != file_values.end()) v = it->second;
    if (auto it = flag_values.find(k); it != flag_values.end()) v = it->second;
    c.values[k] = v;
  }

  auto has = [&](const char* k) { return c.values.contains(k); };
  if (has("n")) c.model.n_atoms = static_cast<int>(parse_positive("n", c.values["n"]));
  if (has("chi")) c.model.chi = parse_double("chi", c.values["chi"]);
  if (has("bz")) c.model.bz = parse_double("bz", c.values["bz"]);
  if (has("bx")) c.model.bx = parse_double("bx", c.values["bx"]);
  if (has("omega")) c.model.omega = parse_double("omega", c.values["omega"]);
  c.model.validate();
  if (has("steps")) c.steps = static_cast<int>(parse_positive("steps", c.values["steps"]));
  if (has("split_order")) {
    const long order = parse_long("split_order", c.values["split_order"]);
    if (order != 2 && order != 4) throw ValidationError("split_order", "must be 2 or 4");
    c.split_order = order == 2 ? SplitOrder::Second : SplitOrder::Fourth;
  }
  if (has("method")) {
    const std::string m = trim(c.values["method"]);
    if (m == "split") c.method = StepMethod::SplitStep;
    else if (m == "exact") c.method = StepMethod::ExactStep;
    else throw ValidationError("method", "expected split or exact, got '" + m + "'");
  }
  if (has("epsilon") && trim(c.values["epsilon"]) != "auto") {
    const double eps = parse_double("epsilon", c.values["epsilon"]);
    if (!(eps > 0)) throw ValidationError("epsilon", "must be positive");
    c.epsilon = eps;
  }
  if (has("richardson")) c.richardson = parse_bool("richardson", c.values["richardson"]);
  if (has("probability_floor")) {
    c.probability_floor = parse_double("probability_floor", c.values["probability_floor"]);
    if (!(c.probability_floor >= 0)) throw ValidationError("probability_floor", "must be >= 0");
  }
  if (has("periods")) parse_nonnegative("periods", c.values["periods"]);
  c.workers = static_cast<unsigned>(parse_nonnegative("workers", c.values["workers"]));
  c.overwrite = parse_bool("overwrite", c.values["overwrite"]);

  std::string out = trim(c.values["out"]);
  if (out.empty())
    if (const char* env = std::getenv(kOutputDirEnv); env && *env) out = env;
  if (out.empty()) out = kDefaultOutputDir;
  c.output_dir = out;
  return c;
}

std::optional<RunConfig> parse_config(int argc, const char* const* argv) {
  CLI::App app{"Chaos-assisted metrology in a driven Bose-Josephson (spin-J) system", kToolName};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  struct Sub {
    CLI::App* app;
    std::map<std::string, std::string> flags;
    std::map<std::string, CLI::Option*> options;
    std::string config;
  };
  std::vector<std::unique_ptr<Sub>> subs;
  for (const auto& spec : command_specs()) {
    auto sub = std::make_unique<Sub>();
    sub->app = app.add_subcommand(spec.name, spec.help);
    sub->app->add_option("--config", sub->config, "flat key = value file; flags override it");
    for (const auto& key : command_keys(spec.name)) {
      const KeySpec& ks = spec_for(key);
      std::string def = ks.fallback;
      if (auto it = spec.defaults.find(key); it != spec.defaults.end()) def = it->second;
      std::string help = ks.help;
      if (!def.empty()) help += " [" + def + "]";
      if (kBooleanKeys.contains(key))
        // bare --key means true; --key=false still works
        sub->options[key] = sub->app->add_flag("--" + dashed(key) + "{true}", sub->flags[key], help);
      else
        sub->options[key] = sub->app->add_option("--" + dashed(key), sub->flags[key], help);
    }
    subs.push_back(std::move(sub));
  }

  std::string manifest_path;
  std::string rerun_out;
  bool rerun_overwrite = false;
  CLI::App* rerun = app.add_subcommand("rerun", "repeat a run from its manifest and verify the output checksums");
  rerun->add_option("--manifest", manifest_path, "manifest.json of the earlier run")->required();
  rerun->add_option("--out", rerun_out, "output directory (default: the original one)");
  rerun->add_flag("--overwrite", rerun_overwrite, "replace existing outputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return std::nullopt;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e);
    return std::nullopt;
  } catch (const CLI::CallForVersion& e) {
    app.exit(e);
    return std::nullopt;
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }

  if (rerun->parsed()) {
    std::ifstream in(manifest_path);
    if (!in) throw ValidationError("manifest", "cannot read " + manifest_path);
    json m;
    try {
      m = json::parse(in);
    } catch (const json::exception& e) {
      throw ValidationError("manifest", std::string("not valid JSON: ") + e.what());
    }
    if (!m.contains("config") || !m["config"].contains("command") || !m["config"].contains("values"))
      throw ValidationError("manifest", "missing config section");
    std::map<std::string, std::string> values = m["config"]["values"].get<std::map<std::string, std::string>>();
    if (!rerun_out.empty()) values["out"] = rerun_out;
    if (values["out"].empty()) values["out"] = fs::path(manifest_path).parent_path().string();
    values["overwrite"] = rerun_overwrite ? "true" : "false";
    RunConfig c = make_config(m["config"]["command"].get<std::string>(), {}, values);
    for (const auto& f : m.value("outputs", json::array())) c.expected_checksums[f.at("file")] = f.at("sha256");
    return c;
  }

  for (const auto& sub : subs) {
    if (!sub->app->parsed()) continue;
    std::map<std::string, std::string> flags;
    for (const auto& [key, opt] : sub->options)
      if (opt->count() > 0) flags[key] = sub->flags[key];
    std::map<std::string, std::string> file;
    if (!sub->config.empty()) file = read_config_file(sub->config);
    return make_config(sub->app->get_name(), file, flags);
  }
  throw UsageError("no command given");
}

int execute(const RunConfig& config) {
  try {
    prepare_output_dir(config);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  OutputSet outputs(config.output_dir);
  RunContext ctx{config, outputs, json::object(), {}};
  const auto started = std::chrono::steady_clock::now();
  const std::string started_utc = utc_timestamp();
  try {
    // A replaced run must not leave a stale manifest describing old files.
    std::error_code ec;
    fs::remove(config.output_dir / "manifest.json", ec);
    dispatch(ctx);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_manifest(ctx, started_utc, seconds);
  } catch (const UsageError& e) {
    outputs.remove_all();
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    outputs.remove_all();
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  }

  for (const auto& w : ctx.warnings) std::cerr << "warning: " << w << '\n';

  if (!config.expected_checksums.empty()) {
    int mismatches = 0;
    for (const auto& [file, sum] : config.expected_checksums) {
      const fs::path p = config.output_dir / file;
      const std::string now = fs::exists(p) ? sha256_file(p) : "missing";
      if (now != sum) {
        std::cerr << "checksum mismatch: " << file << " (" << now << " != " << sum << ")\n";
        ++mismatches;
      }
    }
    if (mismatches > 0) return kExitNumerical;
    std::cout << "reproduced " << config.expected_checksums.size() << " outputs\n";
  }
  std::cout << "wrote " << outputs.files().size() << " files and manifest.json to " << config.output_dir.string()
            << '\n';
  return kExitOk;
}

int run(int argc, const char* const* argv) {
  std::optional<RunConfig> config;
  try {
    config = parse_config(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\nrun with --help for usage\n";
    return kExitUsage;
  }
  if (!config) return kExitOk;
  return execute(*config);
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NumericalError("cannot read " + path.string() + " for checksumming");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw NumericalError("SHA-256 initialisation failed");
  }
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest.data(), &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

}  // namespace chaosmetro::cli
