#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "pqflow/prequant.hpp"

using namespace pqflow;

namespace {

Vec vec2(double x, double y) {
  Vec v(2);
  v << x, y;
  return v;
}

/// beta = x dy on R^2, d beta = dx ^ dy.
OneForm beta_xdy() {
  OneForm b;
  b.eval = [](const Vec& w) { return vec2(0.0, w[0]); };
  b.d_closed_form = [](const Vec&) {
    Mat D(2, 2);
    D << 0.0, 1.0, -1.0, 0.0;
    return D;
  };
  return b;
}

/// beta = (x dy - y dx) / 2, the rotation-invariant primitive.
OneForm beta_rot() {
  OneForm b;
  b.eval = [](const Vec& w) { return vec2(-0.5 * w[1], 0.5 * w[0]); };
  b.d_closed_form = [](const Vec&) {
    Mat D(2, 2);
    D << 0.0, 1.0, -1.0, 0.0;
    return D;
  };
  return b;
}

AlmostComplexStructure j_std() {
  AlmostComplexStructure j;
  j.J = [](const Vec&) {
    Mat J(2, 2);
    J << 0.0, -1.0, 1.0, 0.0;
    return J;
  };
  return j;
}

ScalarField f_zero() {
  ScalarField f;
  f.eval = [](const Vec&) { return 0.0; };
  f.differential = [](const Vec&) { return vec2(0.0, 0.0); };
  return f;
}

ScalarField f_arctan() {
  ScalarField f;
  f.eval = [](const Vec& w) { return std::atan(w[0]); };
  f.differential = [](const Vec& w) {
    return vec2(1.0 / (1.0 + w[0] * w[0]), 0.0);
  };
  return f;
}

/// Concave paraboloid with maximum value c at the origin.
ScalarField f_paraboloid(double c) {
  ScalarField f;
  f.eval = [c](const Vec& w) { return c - w.squaredNorm(); };
  f.differential = [](const Vec& w) { return vec2(-2.0 * w[0], -2.0 * w[1]); };
  return f;
}

}  // namespace

TEST_CASE("lifting system right-hand side") {
  SECTION("constant deformation gives a pure a-translation") {
    PrequantSpace sp = make_prequant(2, beta_xdy(), j_std(), f_zero());
    OdeRhs rhs = lift_ode_rhs(sp);
    Vec y(4);
    y << 0.7, -0.3, 1.0, 5.0;
    Vec d = rhs(0.0, y);
    CHECK(d[0] == Catch::Approx(0.0).margin(1e-14));
    CHECK(d[1] == Catch::Approx(0.0).margin(1e-14));
    CHECK(d[2] == Catch::Approx(0.0).margin(1e-14));
    CHECK(d[3] == Catch::Approx(two_pi).margin(1e-12));
  }
  SECTION("arctan deformation with beta = x dy") {
    PrequantSpace sp = make_prequant(2, beta_xdy(), j_std(), f_arctan());
    OdeRhs rhs = lift_ode_rhs(sp);
    Vec y(4);
    y << 1.0, 2.0, 0.0, 0.0;
    Vec d = rhs(0.0, y);
    // grad f = (1/(1+x^2), 0); beta only sees the dy-component
    CHECK(d[0] == Catch::Approx(two_pi * 0.5).margin(1e-12));
    CHECK(d[1] == Catch::Approx(0.0).margin(1e-14));
    CHECK(d[2] == Catch::Approx(0.0).margin(1e-14));
    CHECK(d[3] == Catch::Approx(13.780891).margin(1e-5));
    CHECK(d[3] == Catch::Approx(two_pi * std::exp(std::atan(1.0))).margin(1e-12));
  }
  SECTION("rotation-invariant primitive feeds the angle equation") {
    PrequantSpace sp = make_prequant(2, beta_rot(), j_std(), f_arctan());
    OdeRhs rhs = lift_ode_rhs(sp);
    Vec y(4);
    y << 1.0, 2.0, 0.0, 0.0;
    Vec d = rhs(0.0, y);
    // beta(grad f) = (x * 0 - y * 1/2) / 2 = -1/2, so theta' = pi
    CHECK(d[2] == Catch::Approx(3.14159265358979).margin(1e-10));
  }
  SECTION("primitive without a closed-form derivative is rejected") {
    OneForm b;
    b.eval = [](const Vec& w) { return vec2(0.0, w[0]); };
    CHECK_THROWS_AS(make_prequant(2, b, j_std(), f_zero()),
                    contract_violation);
  }
}

TEST_CASE("trivial cylinder for the constant deformation") {
  PrequantSpace sp = make_prequant(2, beta_xdy(), j_std(), f_zero());
  LiftedCylinder cyl = build_cylinder(sp, vec2(0.4, -0.2), 0.9, 0.0, -1.0, 1.0);

  SECTION("base point and fiber angle are frozen, a is linear") {
    for (double s : {-0.8, -0.3, 0.0, 0.5, 1.0}) {
      Vec y = cyl.state(s);
      CHECK(y[0] == Catch::Approx(0.4).margin(1e-12));
      CHECK(y[1] == Catch::Approx(-0.2).margin(1e-12));
      CHECK(y[2] == Catch::Approx(0.9).margin(1e-12));
      CHECK(y[3] == Catch::Approx(two_pi * s).margin(1e-9));
    }
  }
  SECTION("energy equals the area of the fiber circle") {
    EnergyFormulaResult e = hofer_energy_formula(sp, cyl);
    CHECK(e.value == Catch::Approx(two_pi).margin(1e-12));
    CHECK(e.converged);
    CHECK(e.monotone_bounded);
    CHECK_FALSE(e.infinite);
  }
  SECTION("holomorphy residuals vanish to stencil accuracy") {
    ContactData contact = contact_lambda_f(sp);
    CylinderMap map = as_map(cyl);
    ResidualReport rep = holomorphy_residual(map, contact, -0.5, 0.5, 6, 6);
    CHECK(rep.max_R1 < 1e-9);
    CHECK(rep.max_R2 < 1e-8);
  }
  SECTION("mass is the constant 2 pi") {
    ContactData contact = contact_lambda_f(sp);
    CylinderMap map = as_map(cyl);
    MassReport mass =
        puncture_mass(map, contact.lambda, {-0.9, -0.4, 0.0, 0.4, 0.9});
    for (double m : mass.mass_curve)
      CHECK(m == Catch::Approx(two_pi).margin(1e-6));
    CHECK(mass.monotone);
  }
}

TEST_CASE("arctan cylinder: finite energy without periodic limits") {
  PrequantSpace sp = make_prequant(2, beta_xdy(), j_std(), f_arctan());
  LiftedCylinder cyl = build_cylinder(sp, vec2(0.0, 0.3), 0.0, 0.0, -2.0, 2.0);

  SECTION("first integral x + x^3/3 = 2 pi s") {
    for (double s : {-1.5, -0.5, 0.5, 1.9}) {
      const double x = cyl.gamma(s)[0];
      CHECK(x + x * x * x / 3.0 == Catch::Approx(two_pi * s).margin(1e-7));
      CHECK(cyl.gamma(s)[1] == Catch::Approx(0.3).margin(1e-10));
    }
  }
  SECTION("energy climbs toward 2 pi e^{pi/2} and never exceeds it") {
    const double cap = two_pi * std::exp(0.5 * 3.14159265358979);
    LiftedCylinder mid = build_cylinder(sp, vec2(0.0, 0.3), 0.0, 0.0, 0.0, 50.0);
    LiftedCylinder far = build_cylinder(sp, vec2(0.0, 0.3), 0.0, 0.0, 0.0, 500.0);
    EnergyFormulaResult em = hofer_energy_formula(sp, mid);
    EnergyFormulaResult ef = hofer_energy_formula(sp, far);
    CHECK(em.monotone_bounded);
    CHECK(ef.monotone_bounded);
    CHECK(em.value < ef.value);
    CHECK(ef.value < cap);
    CHECK(ef.value > 0.9 * cap);
  }
  SECTION("boundary expression matches the two-form quadrature") {
    EnergyReport rep =
        hofer_energy_quadrature(sp, cyl, {0.5, 2.0, 8.0}, -1.5, 1.5);
    REQUIRE(rep.boundary_values.size() == 3);
    for (double b : rep.boundary_values) CHECK(b > 0.0);
    CHECK(rep.max_discrepancy < 1e-6 * std::max(1.0, rep.supremum));
    // the sharp cutoff saturates at the right boundary term
    const double f1 = std::atan(cyl.gamma(1.5)[0]);
    CHECK(rep.supremum == Catch::Approx(two_pi * std::exp(f1)).epsilon(1e-3));
    CHECK(rep.supremum < rep.formula_value + 1e-9);
    CHECK_THROWS_AS(hofer_energy_quadrature(sp, cyl, {-1.0}, -1.0, 1.0),
                    contract_violation);
  }
  SECTION("mass curve is 2 pi e^{f(gamma)} and nondecreasing") {
    ContactData contact = contact_lambda_f(sp);
    CylinderMap map = as_map(cyl);
    MassReport mass =
        puncture_mass(map, contact.lambda, {-1.5, -0.5, 0.5, 1.5});
    REQUIRE(mass.mass_curve.size() == 4);
    const std::vector<double> sg = {-1.5, -0.5, 0.5, 1.5};
    for (std::size_t i = 0; i < sg.size(); ++i) {
      const double expected = two_pi * std::exp(std::atan(cyl.gamma(sg[i])[0]));
      CHECK(mass.mass_curve[i] == Catch::Approx(expected).epsilon(1e-5));
    }
    CHECK(mass.monotone);
    CHECK(mass.refinement_error < 1e-8);
  }
  SECTION("holomorphy residuals shrink at second order") {
    ContactData contact = contact_lambda_f(sp);
    CylinderMap map = as_map(cyl);
    ResidualReport coarse =
        holomorphy_residual(map, contact, -0.5, 0.5, 5, 4, 2e-4);
    ResidualReport fine =
        holomorphy_residual(map, contact, -0.5, 0.5, 5, 4, 1e-4);
    CHECK(coarse.max_R1 + coarse.max_R2 < 1e-4);
    const double order = residual_order(coarse, fine);
    CHECK(order > 3.0);
    CHECK(order < 5.0);
  }
  SECTION("negative control: mismatched contact data is detected") {
    PrequantSpace flat = make_prequant(2, beta_xdy(), j_std(), f_zero());
    ContactData wrong = contact_lambda_f(flat);
    CylinderMap map = as_map(cyl);
    ResidualReport rep = holomorphy_residual(map, wrong, 0.5, 1.5, 4, 4);
    CHECK(rep.max_R2 > 0.1);
  }
}

TEST_CASE("gradient flow into a maximum") {
  PrequantSpace sp = make_prequant(2, beta_rot(), j_std(), f_paraboloid(0.37));
  LiftedCylinder cyl = build_cylinder(sp, vec2(0.3, 0.4), 0.0, 0.0, -0.5, 6.0);

  SECTION("base contracts exponentially onto the critical point") {
    CHECK(cyl.gamma(3.0).norm() < 1e-12);
    const double r1 = cyl.gamma(0.5).norm();
    const double r0 = cyl.gamma(0.0).norm();
    // gamma' = -4 pi gamma, so half a unit of s contracts by e^{-2 pi}
    CHECK(r1 / r0 == Catch::Approx(std::exp(-two_pi)).epsilon(1e-6));
  }
  SECTION("energy converges to 2 pi e^{max f}") {
    EnergyFormulaResult e = hofer_energy_formula(sp, cyl);
    CHECK(e.converged);
    CHECK(e.monotone_bounded);
    CHECK(e.value == Catch::Approx(two_pi * std::exp(0.37)).epsilon(1e-9));
  }
  SECTION("closed Reeb orbit over the critical point has period 2 pi e^f") {
    ContactData contact = contact_lambda_f(sp);
    Vec m(3);
    m << 1.2, 0.0, 0.0;  // (theta, w) over the maximum
    Vec X = contact.reeb(m);
    CHECK(X[0] == Catch::Approx(std::exp(-0.37)).epsilon(1e-10));
    CHECK(std::abs(X[1]) < 1e-12);
    CHECK(std::abs(X[2]) < 1e-12);
    // theta' = e^{-f}: the 2 pi fiber closes after time 2 pi e^{f}
    const double period = two_pi / X[0];
    CHECK(period == Catch::Approx(two_pi * std::exp(0.37)).epsilon(1e-10));
  }
  SECTION("Reeb field solves the defining equations off the critical locus") {
    ContactData contact = contact_lambda_f(sp);
    Vec m(3);
    m << 0.4, 0.25, -0.35;
    Vec X = contact.reeb(m);
    CHECK(contact.lambda(m).dot(X) == Catch::Approx(1.0).margin(1e-10));
    Vec contraction = contact.lambda.d(m) * X;
    CHECK(contraction.cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("cylinder construction guards and CSV export") {
  PrequantSpace sp = make_prequant(2, beta_xdy(), j_std(), f_arctan());

  SECTION("interval must contain s = 0") {
    CHECK_THROWS_AS(build_cylinder(sp, vec2(0, 0), 0, 0, 0.5, 1.0),
                    contract_violation);
    CHECK_THROWS_AS(build_cylinder(sp, vec2(0, 0), 0, 0, -1.0, -0.5),
                    contract_violation);
  }
  SECTION("CSV rows are ordered in s with a single origin row") {
    LiftedCylinder cyl =
        build_cylinder(sp, vec2(0.0, 0.0), 0.0, 0.0, -1.0, 1.0);
    std::ostringstream os;
    cylinder_to_csv(cyl, os);
    std::istringstream is(os.str());
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(line == "s,a,theta_lift,w0,w1");
    double prev = -std::numeric_limits<double>::infinity();
    std::size_t rows = 0, zeros = 0;
    while (std::getline(is, line)) {
      const double s = std::stod(line.substr(0, line.find(',')));
      CHECK(s > prev);
      prev = s;
      if (s == 0.0) ++zeros;
      ++rows;
    }
    CHECK(rows == cyl.fwd.x.size() + cyl.bwd.x.size() - 1);
    CHECK(zeros == 1);
  }
}
