#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "pqflow/flow.hpp"

using namespace pqflow;

namespace {

ChartPoint start2(double s, double t) {
  Vec p(2);
  p << s, t;
  return ChartPoint(p, {1});
}

/// Distance from `q` to the Hermite interpolant of `traj`, refined by
/// golden-section search around the nearest dense sample.
double orbit_distance(const FlowTrajectory& traj, const Vec& q, int dense = 4000) {
  const double t0 = traj.tau_samples.front(), t1 = traj.tau_samples.back();
  double best = 1e300, best_tau = t0;
  for (int k = 0; k <= dense; ++k) {
    const double tau = t0 + (t1 - t0) * k / dense;
    const double d = (traj.sol.eval_hermite(tau) - q).norm();
    if (d < best) {
      best = d;
      best_tau = tau;
    }
  }
  const double h = (t1 - t0) / dense;
  double a = std::max(t0, best_tau - h), b = std::min(t1, best_tau + h);
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - gr * (b - a), d = a + gr * (b - a);
  auto f = [&](double tau) { return (traj.sol.eval_hermite(tau) - q).norm(); };
  for (int it = 0; it < 60; ++it) {
    if (f(c) < f(d)) {
      b = d;
    } else {
      a = c;
    }
    c = b - gr * (b - a);
    d = a + gr * (b - a);
  }
  return f(0.5 * (a + b));
}

}  // namespace

TEST_CASE("dopri5 on the harmonic oscillator") {
  OdeRhs rhs = [](double, const Vec& y) {
    Vec d(2);
    d << y[1], -y[0];
    return d;
  };
  Vec y0(2);
  y0 << 1.0, 0.0;

  SECTION("accuracy at tight tolerance") {
    OdeOptions opt;
    opt.rtol = 1e-10;
    opt.atol = 1e-12;
    OdeSolution sol = integrate_dopri5(rhs, 0.0, y0, 10.0, opt);
    REQUIRE(sol.status == OdeStatus::ok);
    CHECK(std::abs(sol.y.back()[0] - std::cos(10.0)) < 1e-8);
    CHECK(std::abs(sol.y.back()[1] + std::sin(10.0)) < 1e-8);
  }
  SECTION("error shrinks with tolerance") {
    auto endpoint_error = [&](double rtol) {
      OdeOptions opt;
      opt.rtol = rtol;
      opt.atol = 1e-14;
      OdeSolution sol = integrate_dopri5(rhs, 0.0, y0, 10.0, opt);
      return std::abs(sol.y.back()[0] - std::cos(10.0));
    };
    const double e_loose = endpoint_error(1e-4);
    const double e_tight = endpoint_error(1e-8);
    CHECK(e_tight < e_loose / 10.0);
  }
  SECTION("eval_precise beats the Hermite interpolant") {
    OdeOptions opt;
    opt.rtol = 1e-6;
    opt.atol = 1e-9;
    OdeSolution sol = integrate_dopri5(rhs, 0.0, y0, 10.0, opt);
    double herm = 0.0, prec = 0.0;
    for (double xq : {1.37, 4.81, 7.73, 9.29}) {
      Vec exact(2);
      exact << std::cos(xq), -std::sin(xq);
      herm = std::max(herm, (sol.eval_hermite(xq) - exact).norm());
      prec = std::max(prec, (sol.eval_precise(rhs, xq, 1e-3) - exact).norm());
    }
    CHECK(prec < herm);
    CHECK(prec < 1e-6);
  }
  SECTION("stop predicate") {
    OdeOptions opt;
    opt.stop = [](double, const Vec& y) { return y[0] < 0.0; };
    OdeSolution sol = integrate_dopri5(rhs, 0.0, y0, 10.0, opt);
    CHECK(sol.status == OdeStatus::stopped);
    CHECK(sol.x.back() > 0.5 * 3.14159265358979);
    CHECK(sol.x.back() < 0.5 * 3.14159265358979 + 0.5);
  }
  SECTION("step budget") {
    OdeOptions opt;
    opt.max_steps = 5;
    OdeSolution sol = integrate_dopri5(rhs, 0.0, y0, 10.0, opt);
    CHECK(sol.status == OdeStatus::max_steps);
  }
  SECTION("non-finite field detected") {
    OdeRhs bad = [](double, const Vec& y) {
      Vec d(2);
      d << std::numeric_limits<double>::quiet_NaN(), y[0];
      return d;
    };
    OdeSolution sol = integrate_dopri5(bad, 0.0, y0, 1.0);
    CHECK(sol.status == OdeStatus::non_finite);
  }
}

TEST_CASE("riemannian gradient") {
  ScalarField F;
  F.eval = [](const Vec& p) { return p[0] * p[0] + p[1] * p[1]; };
  F.differential = [](const Vec& p) {
    Vec d(2);
    d << 2 * p[0], 2 * p[1];
    return d;
  };
  Vec p(2);
  p << 0.3, -0.7;
  Vec ge = riemannian_gradient(F, euclidean_metric(2), p);
  CHECK(ge[0] == Catch::Approx(0.6).margin(1e-14));
  CHECK(ge[1] == Catch::Approx(-1.4).margin(1e-14));
  Vec gs = riemannian_gradient(F, euclidean_metric(2, 2.0), p);
  CHECK(gs[0] == Catch::Approx(0.3).margin(1e-14));
  CHECK(gs[1] == Catch::Approx(-0.7).margin(1e-14));
}

TEST_CASE("linear region of the spiral flow") {
  SpiralPotential pot{SpiralParams{1.0, 1.25}};
  ScalarField F = pot.as_field();
  MetricField g = euclidean_metric(2);

  SECTION("raw time: unit translation in s") {
    StopCriteria stop;
    stop.budget = 1.5;
    FlowTrajectory traj =
        integrate_flow(F, g, start2(-3.0, 0.7), FlowMode::raw_time, stop);
    Vec end = traj.sol.eval_hermite(1.5);
    CHECK(end[0] == Catch::Approx(-1.5).margin(1e-10));
    CHECK(end[1] == Catch::Approx(0.7).margin(1e-10));
    CHECK(traj.arc_length.back() == Catch::Approx(1.5).margin(1e-8));
  }
  SECTION("unit speed traces the same line at arc-length pace") {
    StopCriteria stop;
    stop.budget = 1.0;
    FlowTrajectory traj =
        integrate_flow(F, g, start2(-3.0, 0.7), FlowMode::unit_speed, stop);
    CHECK(traj.final_s() == Catch::Approx(-2.0).margin(1e-9));
    CHECK(traj.back_state().lift(1) == Catch::Approx(0.7).margin(1e-10));
  }
}

TEST_CASE("spiral flow winds into the circle") {
  SpiralPotential pot{SpiralParams{1.0, 1.25}};
  MetricField g = euclidean_metric(2);
  // shared across sections; the deep run is deterministic
  static const FlowTrajectory traj =
      integrate_flow_stiff(pot, euclidean_metric2(), start2(-0.5, 0.0));

  SECTION("reaches the stop band and winds") {
    CHECK(traj.final_s() > -0.0101);
    const double windings =
        (traj.back_state().lift(1) - traj.states.front().lift(1)) / two_pi;
    CHECK(windings > 3.0);
  }
  SECTION("potential is monotone along the flow") {
    for (std::size_t i = 1; i < traj.size(); ++i)
      CHECK(traj.potential_values[i] >= traj.potential_values[i - 1] - 1e-10);
  }
  SECTION("z stays bounded and is tolerance-stable") {
    const double z1 = track_z(traj);
    CHECK(z1 < 6.0);
    StopCriteria tight;
    tight.rtol = 0.5e-8;
    tight.atol = 0.5e-10;
    FlowTrajectory traj2 =
        integrate_flow_stiff(pot, euclidean_metric2(), start2(-0.5, 0.0), tight);
    CHECK(std::abs(track_z(traj2) - z1) < 1e-3);
  }
  SECTION("stabilized stepper agrees with the explicit pair") {
    StopCriteria shallow;
    shallow.s_stop = 0.045;
    FlowTrajectory stiff =
        integrate_flow_stiff(pot, euclidean_metric2(), start2(-0.5, 0.0), shallow);
    FlowTrajectory expl =
        integrate_flow_fast(pot, euclidean_metric2(), start2(-0.5, 0.0), shallow);
    CHECK(std::abs(track_z(stiff) - track_z(expl)) < 1e-4);
    // the endpoint angle is steep in the stop-crossing s (dt/ds ~ 1/s^2),
    // so compare the chart-invariant z = 1/s + t instead
    const double z_stiff =
        1.0 / stiff.final_s() + stiff.back_state().lift(1);
    const double z_expl = 1.0 / expl.final_s() + expl.back_state().lift(1);
    CHECK(std::abs(z_stiff - z_expl) < 1e-4);
  }
  SECTION("omega-limit histogram covers the circle") {
    LimitSetReport rep = detect_omega_limit(traj, 0.05, 36);
    CHECK(rep.coverage == 1.0);
    CHECK(rep.windings > 3.0);
    LimitSetReport fine = detect_omega_limit(traj, 0.05, 360);
    CHECK(fine.coverage == 1.0);
  }
  SECTION("z-barrier certificate (euclidean)") {
    ZBarrierReport rep = verify_z_barrier(traj, pot, g);
    CHECK(rep.passed);
    CHECK(rep.samples_checked > 100);
    CHECK(rep.kappa >= 0.0);
  }
  SECTION("s_star outside the pure-spiral region is rejected") {
    CHECK_THROWS_AS(verify_z_barrier(traj, pot, g, -0.7), contract_violation);
  }
}

TEST_CASE("no winding without the spiral term") {
  ScalarField F;
  F.eval = [](const Vec& p) { return p[0]; };
  F.differential = [](const Vec&) {
    Vec d(2);
    d << 1.0, 0.0;
    return d;
  };
  FlowTrajectory traj = integrate_flow(F, euclidean_metric(2),
                                       start2(-0.5, 0.3), FlowMode::unit_speed);
  LimitSetReport rep = detect_omega_limit(traj, 0.05, 36);
  CHECK(std::abs(rep.windings) < 0.05);
  CHECK(rep.coverage <= 2.0 / 36.0);
}

TEST_CASE("insufficient integration is reported") {
  SpiralPotential pot{SpiralParams{1.0, 1.25}};
  ScalarField F = pot.as_field();
  MetricField g = euclidean_metric(2);

  SECTION("stationary start outside the band") {
    FlowTrajectory traj =
        integrate_flow(F, g, start2(0.5, 0.0), FlowMode::unit_speed);
    CHECK_THROWS_AS(detect_omega_limit(traj, 0.05, 36),
                    insufficient_integration);
  }
  SECTION("budget too small to reach the band") {
    StopCriteria stop;
    stop.budget = 0.1;
    FlowTrajectory traj =
        integrate_flow(F, g, start2(-0.5, 0.0), FlowMode::unit_speed, stop);
    CHECK_THROWS_AS(detect_omega_limit(traj, 0.05, 36),
                    insufficient_integration);
  }
}

TEST_CASE("random metric fields") {
  SECTION("deterministic in the seed") {
    RandomMetricSpec spec;
    spec.seed = 42;
    MetricField a = random_metric(spec);
    MetricField b = random_metric(spec);
    SplitMix64 rng(5);
    for (int k = 0; k < 20; ++k) {
      Vec p(2);
      p << rng.uniform(-2.0, -0.01), rng.uniform(0.0, two_pi);
      CHECK((a.g(p) - b.g(p)).cwiseAbs().maxCoeff() == 0.0);
      CHECK((a.g(p) * a.g_inv(p) - Mat::Identity(2, 2)).cwiseAbs().maxCoeff() <
            1e-12);
    }
  }
  SECTION("zero amplitude gives the ellipticity floor") {
    RandomMetricSpec spec;
    spec.seed = 1;
    spec.amplitude = 0.0;
    MetricField g = random_metric(spec);
    Vec p(2);
    p << -0.7, 1.1;
    CHECK((g.g(p) - spec.mu * Mat::Identity(2, 2)).cwiseAbs().maxCoeff() ==
          0.0);
  }
  SECTION("eigenvalue sweep rejects wild metrics") {
    RandomMetricSpec spec;
    spec.seed = 1;
    spec.amplitude = 10.0;
    CHECK_THROWS_AS(random_metric(spec), metric_spec_rejected);
  }
  SECTION("invalid ellipticity floor") {
    RandomMetricSpec spec;
    spec.mu = 0.0;
    CHECK_THROWS_AS(random_metric(spec), contract_violation);
  }
}

TEST_CASE("z-barrier under random metrics") {
  SpiralPotential pot{SpiralParams{1.0, 1.25}};
  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    RandomMetricSpec spec;
    spec.seed = seed;
    Metric2 g2 = random_metric2(spec);
    MetricField g = g2.as_field();
    FlowTrajectory traj = integrate_flow_stiff(pot, g2, start2(-0.45, 0.6));
    ZBarrierReport rep = verify_z_barrier(traj, pot, g);
    INFO("seed " << seed << " max_excess " << rep.max_excess << " at s "
                 << rep.worst_s);
    CHECK(rep.passed);
    LimitSetReport lim = detect_omega_limit(traj, 0.05, 36);
    CHECK(lim.coverage == 1.0);
  }
}

TEST_CASE("parametrization invariance of the orbit") {
  SpiralPotential pot{SpiralParams{1.0, 1.25}};
  ScalarField F = pot.as_field();
  MetricField g = euclidean_metric(2);
  StopCriteria stop;
  stop.rtol = 1e-7;
  stop.atol = 1e-9;
  stop.s_stop = 0.2;  // shallow window keeps the raw-time clock tractable
  FlowTrajectory unit =
      integrate_flow(F, g, start2(-0.5, 0.3), FlowMode::unit_speed, stop);
  FlowTrajectory raw =
      integrate_flow(F, g, start2(-0.5, 0.3), FlowMode::raw_time, stop);
  double worst = 0.0;
  for (std::size_t i = 0; i < raw.size(); i += 3)
    worst = std::max(worst, orbit_distance(unit, raw.sol.y[i]));
  CHECK(worst < 1e-4);
}

TEST_CASE("trajectory CSV export") {
  SpiralPotential pot{SpiralParams{1.0, 1.25}};
  ScalarField F = pot.as_field();
  MetricField g = euclidean_metric(2);
  StopCriteria stop;
  stop.budget = 1.0;
  FlowTrajectory traj =
      integrate_flow(F, g, start2(-3.0, 7.0), FlowMode::raw_time, stop);
  std::ostringstream os;
  trajectory_to_csv(traj, os);
  std::istringstream is(os.str());
  std::string line;
  REQUIRE(std::getline(is, line));
  CHECK(line == "tau,s,t_canonical,t_lift,z,F,arclen");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == traj.size());
  // first data row: tau 0, canonical angle wrapped, lift preserved
  std::istringstream first(os.str().substr(os.str().find('\n') + 1));
  std::string cell;
  std::getline(first, cell, ',');
  CHECK(std::stod(cell) == 0.0);
  std::getline(first, cell, ',');
  CHECK(std::stod(cell) == -3.0);
  std::getline(first, cell, ',');
  CHECK(std::stod(cell) == Catch::Approx(wrap_angle(7.0)).margin(1e-12));
  std::getline(first, cell, ',');
  CHECK(std::stod(cell) == 7.0);
}
