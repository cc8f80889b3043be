/// Command-line driver: reproducible experiments, seeded randomization,
/// report aggregation, and plot-ready CSV export.
///
///   pqflow run --config cfg.json [--seed N] [--out DIR] [...]
///   pqflow suite --config manifest.json [--out DIR] [...]
///   pqflow identities [--n N] [--seed N]
///
/// Exit code 0 iff every executed experiment passes.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pqflow/knot.hpp"

using json = nlohmann::json;
using namespace pqflow;

namespace {

struct Tolerances {
  double rtol = 1e-8;
  double atol = 1e-10;
  double h = 1e-4;
  double band = 0.05;
  int bins = 36;
};

struct ExperimentConfig {
  std::string kind;
  std::uint64_t seed = 2026;
  std::string output_dir = "pqflow-out";
  Tolerances tol;
  json params = json::object();
  bool force_overwrite = false;
};

struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void parse_into(ExperimentConfig& cfg, const json& j) {
  if (j.contains("kind")) cfg.kind = j.at("kind").get<std::string>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("output_dir"))
    cfg.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("parameters")) cfg.params = j.at("parameters");
  if (j.contains("tolerances")) {
    const json& t = j.at("tolerances");
    if (t.contains("rtol")) cfg.tol.rtol = t.at("rtol").get<double>();
    if (t.contains("atol")) cfg.tol.atol = t.at("atol").get<double>();
    if (t.contains("h")) cfg.tol.h = t.at("h").get<double>();
    if (t.contains("band")) cfg.tol.band = t.at("band").get<double>();
    if (t.contains("bins")) cfg.tol.bins = t.at("bins").get<int>();
  }
  if (!(cfg.tol.rtol > 0.0 && cfg.tol.atol > 0.0 && cfg.tol.h > 0.0 &&
        cfg.tol.band > 0.0 && cfg.tol.bins > 0))
    throw usage_error("tolerances: all entries must be positive");
}

double param(const ExperimentConfig& cfg, const std::string& key, double dflt) {
  return cfg.params.contains(key) ? cfg.params.at(key).get<double>() : dflt;
}

int iparam(const ExperimentConfig& cfg, const std::string& key, int dflt) {
  return cfg.params.contains(key) ? cfg.params.at(key).get<int>() : dflt;
}

/// Opens an artifact for writing; refuses to clobber without the flag.
std::ofstream open_artifact(const ExperimentConfig& cfg,
                            const std::string& name) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  fs::path p = fs::path(cfg.output_dir) / name;
  if (fs::exists(p) && !cfg.force_overwrite)
    throw usage_error("refusing to overwrite " + p.string() +
                      " (pass --force-overwrite)");
  std::ofstream os(p);
  if (!os) throw usage_error("cannot open " + p.string() + " for writing");
  return os;
}

// ---------------------------------------------------------------------------
// experiment kinds

json run_flow(const ExperimentConfig& cfg) {
  SpiralParams sparams;
  sparams.delta = param(cfg, "delta", 1.0);
  SpiralPotential pot{sparams};
  const int n_metrics = iparam(cfg, "metrics", 20);
  const int n_starts = iparam(cfg, "starts", 5);

  SplitMix64 rng(cfg.seed);
  SplitMix64 start_rng = rng.split("flow-starts");
  SplitMix64 metric_rng = rng.split("flow-metrics");

  double cov_min = 1.0, wind_min = 1e300, z_sup_max = 0.0;
  bool ok = true, first = true;
  for (int m = 0; m < n_metrics; ++m) {
    RandomMetricSpec spec;
    spec.seed = metric_rng.next_u64();
    Metric2 g2 = random_metric2(spec);
    for (int k = 0; k < n_starts; ++k) {
      ChartPoint x0(
          (Vec(2) << start_rng.uniform(-0.6, -0.35),
           start_rng.uniform(0.0, 2.0 * 3.141592653589793))
              .finished(),
          {1});
      StopCriteria stop;
      stop.s_stop = param(cfg, "s_stop", 0.0376);
      stop.rtol = cfg.tol.rtol;
      stop.atol = cfg.tol.atol;
      FlowTrajectory traj = integrate_flow_stiff(pot, g2, x0, stop);
      LimitSetReport rep = detect_omega_limit(traj, cfg.tol.band, cfg.tol.bins);
      cov_min = std::min(cov_min, rep.coverage);
      wind_min = std::min(wind_min, rep.windings);
      z_sup_max = std::max(z_sup_max, rep.z_sup);
      ok = ok && rep.coverage == 1.0 && rep.windings >= 3.0 &&
           std::isfinite(rep.z_sup);
      if (first) {
        std::ofstream os = open_artifact(cfg, "flow-trajectory.csv");
        trajectory_to_csv(traj, os);
        first = false;
      }
    }
  }
  return json{{"coverage_min", cov_min},
              {"windings_min", wind_min},
              {"z_sup_max", z_sup_max},
              {"metrics", n_metrics},
              {"starts", n_starts},
              {"passed", ok}};
}

json run_annulus(const ExperimentConfig& cfg) {
  const int n = iparam(cfg, "n", 1);
  AnnulusParams par;
  par.r_minus = param(cfg, "r_minus", 1.0);
  par.r_plus = param(cfg, "r_plus", 2.0);
  AnnulusOptions opt;
  opt.band = cfg.tol.band;
  opt.bins = cfg.tol.bins;

  Vec w0 = Vec::Zero(2 * n);
  w0[2 * n - 1] = param(cfg, "r_start", 0.5 * (par.r_minus + par.r_plus));
  AnnulusExperiment ex = build_annulus_cylinder(n, par, w0, 0.0, 0.0, opt);

  EnergyFormulaResult energy = hofer_energy_formula(ex.space, ex.cyl);
  CylinderMap map = as_map(ex.cyl, false);
  MassReport mass =
      puncture_mass(map, contact_lambda_f(ex.space).lambda,
                    {ex.cyl.s_min(), 0.0, ex.cyl.s_max()});

  {
    std::ofstream os = open_artifact(cfg, "annulus-cylinder.csv");
    cylinder_to_csv(ex.cyl, os);
  }

  const bool ok = std::abs(energy.value - two_pi) <= 1e-3 * two_pi &&
                  energy.monotone_bounded && mass.monotone &&
                  ex.forward.coverage == 1.0 && ex.backward.coverage == 1.0;
  return json{{"energy", energy.value},
              {"energy_target", two_pi},
              {"mass_min", mass.mass_curve.front()},
              {"mass_max", mass.mass_curve.back()},
              {"coverage_forward", ex.forward.coverage},
              {"coverage_backward", ex.backward.coverage},
              {"windings_forward", ex.forward.windings},
              {"passed", ok}};
}

json run_plane(const ExperimentConfig& cfg) {
  const int n = iparam(cfg, "n", 1);
  const double r0 = param(cfg, "r0", 1.0);
  const double theta0 = param(cfg, "theta0", 0.3);
  const double rho0 = param(cfg, "rho0", -1.5);
  Vec p0;
  if (cfg.params.contains("p0")) {
    const json& jp = cfg.params.at("p0");
    p0 = Vec::Zero(static_cast<int>(jp.size()));
    for (std::size_t i = 0; i < jp.size(); ++i)
      p0[static_cast<int>(i)] = jp.at(i).get<double>();
  }

  WSpace w = build_W_structures(n, false, cfg.seed);
  LiftedPlane plane = build_plane(w, r0, theta0, p0, rho0);
  RemovabilityReport rem = removable_singularity_check(plane);
  TorusCoverage tc =
      plane_torus_coverage(w, r0, theta0, rho0, cfg.tol.band, cfg.tol.bins);
  EnergyFormulaResult energy = hofer_energy_formula(plane.space, plane.cyl);
  const double target = two_pi * r0 * r0;

  {
    std::ofstream os = open_artifact(cfg, "plane-cylinder.csv");
    cylinder_to_csv(plane.cyl, os);
  }

  const bool ok = rem.passed && tc.fiber_coverage == 1.0 &&
                  tc.base_coverage == 1.0 &&
                  std::abs(energy.value - target) <= 0.01 * target;
  return json{{"energy", energy.value},
              {"energy_target", target},
              {"a_coeff", rem.a_coeff},
              {"a_coeff_predicted", rem.a_coeff_predicted},
              {"a_fit_residual", rem.a_fit_residual},
              {"decay_ratio", rem.decay_ratio},
              {"mass_at_r_lo", rem.mass_at_r_lo},
              {"coverage_base", tc.base_coverage},
              {"tail_fit_residual", plane.tail_fit_residual},
              {"passed", ok}};
}

json run_identities(const ExperimentConfig& cfg) {
  const int n = iparam(cfg, "n", 2);
  WSpace w = build_W_structures(n, true, cfg.seed);  // throws on failure
  KnotModel model{n};
  const int d = 2 * n;
  SplitMix64 rng(cfg.seed);

  double worst_pull = 0.0, worst_j = 0.0, worst_g = 0.0, worst_ext = 0.0;
  for (int k = 0; k < 100; ++k) {
    Vec m(d + 1);
    for (int i = 0; i <= d; ++i) m[i] = rng.uniform(-1.0, 1.0);
    m[0] = rng.uniform(0.0, 6.283);
    worst_pull = std::max(worst_pull, phi_pullback_check(w, m));

    Vec p(d);
    for (int i = 0; i < d; ++i) p[i] = rng.uniform(-1.0, 1.0);
    Mat J = w.j1(p);
    worst_j = std::max(
        worst_j, (J * J + Mat::Identity(d, d)).cwiseAbs().maxCoeff());
    worst_g = std::max(
        worst_g, (w.beta.d(p) * J - w.g_j1.g(p)).cwiseAbs().maxCoeff());

    Vec q(d + 1);
    for (int i = 0; i <= d; ++i) q[i] = rng.uniform(-1.0, 1.0);
    q[d - 1] += (q[d - 1] >= 0.0 ? 0.5 : -0.5);
    Mat Je = extended_J(model, q);
    Mat Jp = extended_J_via_phi(w, q);
    OneForm alpha = alpha_form(n);
    for (int c = 0; c < d; ++c) {
      Vec v = Vec::Zero(d);
      v[c] = 1.0;
      Vec l(d + 1);
      l[0] = -alpha(q.tail(d)).dot(v);
      l.tail(d) = v;
      worst_ext =
          std::max(worst_ext, (Je * l - Jp * l).cwiseAbs().maxCoeff());
    }
  }
  const bool ok = worst_pull <= 1e-10 && worst_j <= 1e-12 &&
                  worst_g <= 1e-9 && worst_ext <= 1e-9;
  return json{{"n", n},
              {"pullback_residual", worst_pull},
              {"j1_square_residual", worst_j},
              {"metric_residual", worst_g},
              {"extension_residual", worst_ext},
              {"passed", ok}};
}

json run_energy(const ExperimentConfig& cfg) {
  auto vec2 = [](double x, double y) {
    Vec v(2);
    v << x, y;
    return v;
  };
  OneForm beta;
  beta.eval = [vec2](const Vec& w) { return vec2(0.0, w[0]); };
  beta.d_closed_form = [](const Vec&) {
    Mat D(2, 2);
    D << 0.0, 1.0, -1.0, 0.0;
    return D;
  };
  AlmostComplexStructure j;
  j.J = [](const Vec&) {
    Mat J(2, 2);
    J << 0.0, -1.0, 1.0, 0.0;
    return J;
  };
  ScalarField fz;
  fz.eval = [](const Vec&) { return 0.0; };
  fz.differential = [vec2](const Vec&) { return vec2(0.0, 0.0); };
  ScalarField fa;
  fa.eval = [](const Vec& w) { return std::atan(w[0]); };
  fa.differential = [vec2](const Vec& w) {
    return vec2(1.0 / (1.0 + w[0] * w[0]), 0.0);
  };

  PrequantSpace sp0 = make_prequant(2, beta, j, fz);
  LiftedCylinder c0 = build_cylinder(sp0, vec2(0.3, -0.2), 0.1, 0.0, -1.0, 1.0);
  EnergyReport r0 = hofer_energy_quadrature(sp0, c0, {4.0, 16.0}, -0.9, 0.9);

  PrequantSpace sp1 = make_prequant(2, beta, j, fa);
  const double s_hi = param(cfg, "s_hi", 500.0);
  LiftedCylinder c1 = build_cylinder(sp1, vec2(0.0, 0.0), 0.0, 0.0, -2.0, s_hi);
  EnergyReport r1 =
      hofer_energy_quadrature(sp1, c1, {0.01, 0.3}, -2.0, 0.95 * s_hi);

  auto sup = [](const EnergyReport& r) {
    double s = 0.0;
    for (double q : r.quadrature_values) s = std::max(s, q);
    return s;
  };
  const double limit = two_pi * std::exp(0.5 * 3.141592653589793);
  const bool ok =
      std::abs(sup(r0) - r0.formula_value) <= 0.01 * r0.formula_value &&
      std::abs(sup(r1) - r1.formula_value) <= 0.01 * r1.formula_value &&
      r1.formula_value < limit;
  return json{{"trivial_formula", r0.formula_value},
              {"trivial_quadrature_sup", sup(r0)},
              {"arctan_formula", r1.formula_value},
              {"arctan_quadrature_sup", sup(r1)},
              {"arctan_limit", limit},
              {"passed", ok}};
}

json run_experiment(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  json rep;
  if (cfg.kind == "flow")
    rep = run_flow(cfg);
  else if (cfg.kind == "annulus-cylinder")
    rep = run_annulus(cfg);
  else if (cfg.kind == "plane")
    rep = run_plane(cfg);
  else if (cfg.kind == "identities")
    rep = run_identities(cfg);
  else if (cfg.kind == "energy")
    rep = run_energy(cfg);
  else
    throw usage_error("kind: must be one of flow, annulus-cylinder, plane, "
                      "identities, energy (got '" + cfg.kind + "')");
  rep["kind"] = cfg.kind;
  rep["seed"] = cfg.seed;
  rep["wall_clock_s"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return rep;
}

json load_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw usage_error("config: cannot read " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw usage_error("config: " + std::string(e.what()));
  }
  return j;
}

struct FlagOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<double> rtol;
  std::optional<double> band;
  std::optional<int> bins;
  bool force = false;

  void apply(ExperimentConfig& cfg) const {
    if (seed) cfg.seed = *seed;
    if (out) cfg.output_dir = *out;
    if (rtol) cfg.tol.rtol = *rtol;
    if (band) cfg.tol.band = *band;
    if (bins) cfg.tol.bins = *bins;
    cfg.force_overwrite = force;
    if (!(cfg.tol.rtol > 0.0 && cfg.tol.band > 0.0 && cfg.tol.bins > 0))
      throw usage_error("tolerances: all entries must be positive");
  }
};

void add_override_flags(CLI::App* app, FlagOverrides& ov) {
  app->add_option("--seed", ov.seed, "Experiment seed (overrides config)");
  app->add_option("--out", ov.out, "Output directory (overrides config)");
  app->add_option("--rtol", ov.rtol, "Relative tolerance (overrides config)");
  app->add_option("--band", ov.band, "Limit-set band epsilon");
  app->add_option("--bins", ov.bins, "Angular histogram bins");
  app->add_flag("--force-overwrite", ov.force,
                "Allow clobbering existing artifacts");
}

void print_entry(const json& rep) {
  std::cout << (rep.at("passed").get<bool>() ? "PASS" : "FAIL") << "  "
            << rep.at("kind").get<std::string>() << "  ("
            << rep.at("wall_clock_s").get<double>() << "s)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"numerical laboratory for lifted gradient-flow cylinders"};
  app.require_subcommand(1);

  std::string config_path;
  FlagOverrides ov_run, ov_suite;
  int id_n = 2;

  CLI::App* run = app.add_subcommand("run", "Run a single experiment");
  run->add_option("--config", config_path, "Experiment config (JSON)")
      ->required();
  add_override_flags(run, ov_run);

  std::string manifest_path;
  CLI::App* suite = app.add_subcommand("suite", "Run an experiment manifest");
  suite->add_option("--config", manifest_path, "Manifest (JSON)")->required();
  add_override_flags(suite, ov_suite);

  FlagOverrides ov_id;
  CLI::App* ident =
      app.add_subcommand("identities", "Run the structure identity checks");
  ident->add_option("--n", id_n, "Number of complex base directions");
  add_override_flags(ident, ov_id);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      ExperimentConfig cfg;
      parse_into(cfg, load_json(config_path));
      ov_run.apply(cfg);
      json rep = run_experiment(cfg);
      {
        std::ofstream os = open_artifact(cfg, cfg.kind + "-report.json");
        os << rep.dump(2) << "\n";
      }
      print_entry(rep);
      return rep.at("passed").get<bool>() ? 0 : 1;
    }

    if (ident->parsed()) {
      ExperimentConfig cfg;
      cfg.kind = "identities";
      cfg.params["n"] = id_n;
      ov_id.apply(cfg);
      json rep = run_experiment(cfg);
      print_entry(rep);
      std::cout << rep.dump(2) << "\n";
      return rep.at("passed").get<bool>() ? 0 : 1;
    }

    // suite
    json manifest = load_json(manifest_path);
    json entries =
        manifest.is_array() ? manifest : manifest.value("experiments", json::array());
    json reports = json::array();
    bool all_ok = true;
    int index = 0;
    for (const json& je : entries) {
      ExperimentConfig cfg;
      parse_into(cfg, je);
      ov_suite.apply(cfg);
      // per-entry subdirectory so repeated kinds never collide
      cfg.output_dir = (std::filesystem::path(cfg.output_dir) /
                        ("exp-" + std::to_string(index++) + "-" + cfg.kind))
                           .string();
      json rep;
      try {
        rep = run_experiment(cfg);
      } catch (const std::exception& e) {
        rep = json{{"kind", cfg.kind}, {"seed", cfg.seed},
                   {"error", e.what()}, {"passed", false},
                   {"wall_clock_s", 0.0}};
      }
      print_entry(rep);
      all_ok = all_ok && rep.at("passed").get<bool>();
      reports.push_back(rep);
    }
    json summary{{"experiments", reports}, {"passed", all_ok}};
    if (!entries.empty()) {
      ExperimentConfig out_cfg;
      if (ov_suite.out) out_cfg.output_dir = *ov_suite.out;
      out_cfg.force_overwrite = ov_suite.force;
      std::ofstream os = open_artifact(out_cfg, "suite-report.json");
      os << summary.dump(2) << "\n";
    }
    std::cout << (all_ok ? "suite passed" : "suite FAILED") << "\n";
    return all_ok ? 0 : 1;
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
