#pragma once

#include <cmath>
#include <ostream>
#include <vector>

#include "pqflow/diffgeo.hpp"
#include "pqflow/fields.hpp"
#include "pqflow/ode.hpp"

namespace pqflow {

/// Trivial prequantization space S^1 x W over an exact symplectic base
/// (W, omega = d beta), with compatible j and a deformation function f.
/// The contact manifold M = S^1 x W carries coordinates (theta, w) and
/// the contact form lambda_f = e^{pi* f} (d theta + pi* beta).
struct PrequantSpace {
  int w_dim = 0;
  std::vector<int> w_angular;  // indices of angular coordinates of W
  OneForm beta;                // must carry closed-form d (= omega)
  AlmostComplexStructure j;    // compatible with omega
  ScalarField f;

  Mat omega(const Vec& w) const { return beta.d(w); }

  /// g_j = omega(., j .)
  Mat metric(const Vec& w) const { return omega(w) * j(w); }

  Vec gradient_f(const Vec& w) const {
    Mat g = metric(w);
    Eigen::PartialPivLU<Mat> lu(g);
    return lu.solve(f.d(w));
  }
};

inline PrequantSpace make_prequant(int w_dim, OneForm beta,
                                   AlmostComplexStructure j, ScalarField f,
                                   std::vector<int> w_angular = {}) {
  if (!beta.has_d())
    throw contract_violation("make_prequant: beta needs a closed-form d");
  PrequantSpace sp;
  sp.w_dim = w_dim;
  sp.w_angular = std::move(w_angular);
  sp.beta = std::move(beta);
  sp.j = std::move(j);
  sp.f = std::move(f);
  return sp;
}

/// Right-hand side of the lifting system in the state layout
/// y = (w_0, ..., w_{d-1}, theta, a):
///   w'     = 2 pi grad f(w)
///   theta' = -2 pi beta(grad f(w))
///   a'     = 2 pi e^{f(w)}
inline OdeRhs lift_ode_rhs(const PrequantSpace& space) {
  return [space](double, const Vec& y) -> Vec {
    const int d = space.w_dim;
    Vec w = y.head(d);
    const double fv = space.f(w);
    if (!std::isfinite(fv)) throw evaluation_error("lift_ode_rhs: f not finite");
    Vec grad = space.gradient_f(w);
    Vec dy(d + 2);
    dy.head(d) = two_pi * grad;
    dy[d] = -two_pi * space.beta(w).dot(grad);
    dy[d + 1] = two_pi * std::exp(fv);
    return dy;
  };
}

/// Discretized lift u~(s, t) = (a(s), theta(s) + 2 pi t, gamma(s)) with
/// domain t in R/Z and fiber circle R/2piZ.  Built by integrating the
/// lifting system from s = 0 in both directions.
struct LiftedCylinder {
  int w_dim = 0;
  OdeRhs rhs;
  OdeSolution fwd;  // s in [0, s_max]
  OdeSolution bwd;  // s in [s_min, 0], stored with decreasing x

  double s_min() const { return bwd.x.empty() ? fwd.x_front() : bwd.x_back(); }
  double s_max() const { return fwd.x_back(); }

  /// Full ODE state (w, theta, a) at s via cubic Hermite interpolation.
  Vec state(double s) const {
    if (s >= 0.0 || bwd.x.empty()) return fwd.eval_hermite(s);
    return bwd.eval_hermite(s);
  }

  /// State at s via local re-integration; accuracy set by the substep,
  /// suitable for small finite-difference stencils.
  Vec state_precise(double s, double substep = 1e-3) const {
    if (s >= 0.0 || bwd.x.empty()) return fwd.eval_precise(rhs, s, substep);
    return bwd.eval_precise(rhs, s, substep);
  }

  Vec gamma(double s) const { return state(s).head(w_dim); }
  double theta(double s) const { return state(s)[w_dim]; }
  double a(double s) const { return state(s)[w_dim + 1]; }

  /// Map value (a, theta + 2 pi t, w...) from a given state vector.
  Vec map_from_state(const Vec& y, double t) const {
    Vec m(w_dim + 2);
    m[0] = y[w_dim + 1];
    m[1] = y[w_dim] + two_pi * t;
    m.tail(w_dim) = y.head(w_dim);
    return m;
  }

  Vec map(double s, double t) const { return map_from_state(state(s), t); }

  Vec map_precise(double s, double t, double substep = 1e-3) const {
    return map_from_state(state_precise(s, substep), t);
  }
};

/// Evaluator of a map R x S^1 -> R x M; returns (a, m-coordinates).
struct CylinderMap {
  int m_dim = 0;
  std::function<Vec(double, double)> eval;
};

inline CylinderMap as_map(const LiftedCylinder& cyl, bool precise = true,
                          double substep = 1e-3) {
  CylinderMap m;
  m.m_dim = cyl.w_dim + 1;
  if (precise)
    m.eval = [&cyl, substep](double s, double t) {
      return cyl.map_precise(s, t, substep);
    };
  else
    m.eval = [&cyl](double s, double t) { return cyl.map(s, t); };
  return m;
}

struct CylinderOptions {
  double rtol = 1e-10;
  double atol = 1e-12;
  double max_step = 0.0;
  long max_steps = 2'000'000;
  std::function<bool(double, const Vec&)> stop_forward;   // optional
  std::function<bool(double, const Vec&)> stop_backward;  // optional
};

/// Integrates the lifting system from (gamma(0), theta(0), a(0)) =
/// (w0, theta0, a0) over [s_lo, s_hi] (s_lo <= 0 <= s_hi).
inline LiftedCylinder build_cylinder(const PrequantSpace& space, const Vec& w0,
                                     double theta0, double a0, double s_lo,
                                     double s_hi,
                                     const CylinderOptions& opt = {}) {
  if (s_lo > 0.0 || s_hi < 0.0)
    throw contract_violation("build_cylinder: need s_lo <= 0 <= s_hi");
  LiftedCylinder cyl;
  cyl.w_dim = space.w_dim;
  cyl.rhs = lift_ode_rhs(space);

  Vec y0(space.w_dim + 2);
  y0.head(space.w_dim) = w0;
  y0[space.w_dim] = theta0;
  y0[space.w_dim + 1] = a0;

  OdeOptions oopt;
  oopt.rtol = opt.rtol;
  oopt.atol = opt.atol;
  oopt.max_step = opt.max_step;
  oopt.max_steps = opt.max_steps;
  oopt.stop = opt.stop_forward;
  cyl.fwd = integrate_dopri5(cyl.rhs, 0.0, y0, s_hi, oopt);
  if (!cyl.fwd.ok())
    throw evaluation_error("build_cylinder: forward integration failed");
  if (s_lo < 0.0) {
    oopt.stop = opt.stop_backward;
    cyl.bwd = integrate_dopri5(cyl.rhs, 0.0, y0, s_lo, oopt);
    if (!cyl.bwd.ok())
      throw evaluation_error("build_cylinder: backward integration failed");
  }
  return cyl;
}

/// The contact form lambda_f = e^{pi* f} (d theta + pi* beta) on
/// M = S^1 x W with its closed-form exterior derivative, Reeb field
/// (linear solve), projection onto xi, and the complex structure on xi
/// induced by j through the horizontal lift.
inline ContactData contact_lambda_f(const PrequantSpace& space) {
  const int d = space.w_dim + 1;
  const PrequantSpace sp = space;

  ContactData c;
  c.lambda.eval = [sp, d](const Vec& m) -> Vec {
    Vec w = m.tail(sp.w_dim);
    Vec l(d);
    l[0] = 1.0;
    l.tail(sp.w_dim) = sp.beta(w);
    return std::exp(sp.f(w)) * l;
  };
  c.lambda.d_closed_form = [sp, d](const Vec& m) -> Mat {
    Vec w = m.tail(sp.w_dim);
    const double ef = std::exp(sp.f(w));
    Vec lam(d), df(d);
    lam[0] = 1.0;
    lam.tail(sp.w_dim) = sp.beta(w);
    df[0] = 0.0;
    df.tail(sp.w_dim) = sp.f.d(w);
    Mat D = Mat::Zero(d, d);
    D.block(1, 1, sp.w_dim, sp.w_dim) = sp.omega(w);
    D += df * lam.transpose() - lam * df.transpose();
    return ef * D;
  };
  c.reeb = [c](const Vec& m) { return reeb_solve(c.lambda, m); };
  c.xi_projection = [c](const Vec& m) {
    return xi_projection_matrix(c.lambda(m), c.reeb(m));
  };
  c.J_xi.J = [sp, c, d](const Vec& m) -> Mat {
    Vec w = m.tail(sp.w_dim);
    Mat P = c.xi_projection(m);
    Mat jw = sp.j(w);
    Vec bw = sp.beta(w);
    Mat J = Mat::Zero(d, d);
    for (int i = 0; i < d; ++i) {
      Vec vW = P.col(i).tail(sp.w_dim);  // d pi of the xi-component
      Vec jv = jw * vW;
      J(0, i) = -bw.dot(jv);  // horizontal lift of j (d pi v)
      J.block(1, i, sp.w_dim, 1) = jv;
    }
    return J;
  };
  return c;
}

struct EnergyFormulaResult {
  double value = 0.0;  // 2 pi e^{f(gamma(s_max))}
  double f_end = 0.0;
  bool converged = false;         // relative tail change below 1e-6
  bool monotone_bounded = false;  // f nondecreasing and finite along gamma
  bool infinite = false;          // f unbounded along the flow
};

/// Energy from the closed-form limit: 2 pi e^{f(gamma(s))} at the right
/// endpoint, with convergence diagnostics.
inline EnergyFormulaResult hofer_energy_formula(const PrequantSpace& space,
                                                const LiftedCylinder& cyl) {
  EnergyFormulaResult r;
  const double s1 = cyl.s_max();
  const double s0 = cyl.s_min();
  r.f_end = space.f(cyl.gamma(s1));
  // probe one decade (or a tenth of the span) back from the endpoint
  const double s_probe =
      (s1 > 1.0) ? 0.1 * s1 : s1 - 0.1 * std::max(s1 - s0, 1e-8);
  const double f_probe = space.f(cyl.gamma(std::max(s_probe, s0)));
  r.converged = std::abs(r.f_end - f_probe) <= 1e-6 * (1.0 + std::abs(r.f_end));

  bool monotone = true, finite = true;
  double prev = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cyl.fwd.x.size(); ++i) {
    const double fv = space.f(cyl.fwd.y[i].head(cyl.w_dim));
    if (!std::isfinite(fv)) finite = false;
    if (fv < prev - 1e-9) monotone = false;
    prev = fv;
  }
  r.monotone_bounded = monotone && finite;
  r.infinite = !finite;
  r.value = two_pi * std::exp(r.f_end);
  return r;
}

namespace detail {

/// Overflow-safe logistic sigmoid.
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double sigmoid_derivative(double x) {
  const double s = sigmoid(x);
  return s * (1.0 - s);
}

template <class F>
double adaptive_simpson_rec(F&& f, double a, double b, double fa, double fm,
                            double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol)
    return left + right + (left + right - whole) / 15.0;
  return adaptive_simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         adaptive_simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

template <class F>
double adaptive_simpson(F&& f, double a, double b, double tol,
                        int max_depth = 48) {
  const double fa = f(a), fm = f(0.5 * (a + b)), fb = f(b);
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return adaptive_simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth);
}

}  // namespace detail

struct EnergyReport {
  double formula_value = 0.0;
  double s0 = 0.0, s1 = 0.0;
  std::vector<double> ks;
  std::vector<double> boundary_values;    // exact boundary-term expression
  std::vector<double> quadrature_values;  // independent 2-D quadrature
  double supremum = 0.0;
  double max_discrepancy = 0.0;  // |quadrature - boundary| over the family
};

/// Energy lower bounds over a sigmoid family phi_k(a) =
/// sigmoid(k (a - a_mid)): the boundary-term expression vs an
/// independent quadrature of the pulled-back 2-form d(phi lambda_f).
inline EnergyReport hofer_energy_quadrature(const PrequantSpace& space,
                                            const LiftedCylinder& cyl,
                                            const std::vector<double>& ks,
                                            double s0, double s1,
                                            double quad_tol = 1e-9) {
  EnergyReport rep;
  rep.s0 = s0;
  rep.s1 = s1;
  rep.ks = ks;
  rep.formula_value = hofer_energy_formula(space, cyl).value;

  const double a0 = cyl.a(s0), a1 = cyl.a(s1);
  const double a_mid = 0.5 * (a0 + a1);
  const double f0 = space.f(cyl.gamma(s0)), f1 = space.f(cyl.gamma(s1));

  ContactData contact = contact_lambda_f(space);

  for (double k : ks) {
    if (k <= 0.0)
      throw contract_violation("hofer_energy_quadrature: k must be positive");
    auto phi = [k, a_mid](double a) { return detail::sigmoid(k * (a - a_mid)); };
    auto dphi = [k, a_mid](double a) {
      return k * detail::sigmoid_derivative(k * (a - a_mid));
    };

    const double boundary =
        two_pi * (phi(a1) * std::exp(f1) - phi(a0) * std::exp(f0));
    rep.boundary_values.push_back(boundary);

    // integrand of u~* d(phi lambda_f) on (d_s, d_t):
    //   phi'(a) (a_s lambda_f(u_t) - a_t lambda_f(u_s))
    //   + phi(a) d lambda_f(u_s, u_t)
    auto integrand_s = [&](double s) -> double {
      Vec y = cyl.state(s);
      Vec dy = cyl.rhs(s, y);
      Vec m = cyl.map_from_state(y, 0.0);
      // u_s = (theta', gamma'), u_t = (2 pi, 0); a_s = a', a_t = 0
      Vec us(cyl.w_dim + 1), ut = Vec::Zero(cyl.w_dim + 1);
      us[0] = dy[cyl.w_dim];
      us.tail(cyl.w_dim) = dy.head(cyl.w_dim);
      ut[0] = two_pi;
      const double a_s = dy[cyl.w_dim + 1];
      const double av = y[cyl.w_dim + 1];
      Vec lam = contact.lambda(m);
      Mat dlam = contact.lambda.d(m);
      return dphi(av) * a_s * lam.dot(ut) + phi(av) * us.dot(dlam * ut);
    };
    const double scale = std::max(1.0, std::abs(boundary));
    const double quad =
        detail::adaptive_simpson(integrand_s, s0, s1, quad_tol * scale);
    rep.quadrature_values.push_back(quad);
    rep.max_discrepancy =
        std::max(rep.max_discrepancy, std::abs(quad - boundary));
    rep.supremum = std::max(rep.supremum, boundary);
  }
  return rep;
}

struct MassReport {
  std::vector<double> s_grid;
  std::vector<double> mass_curve;
  double limit_estimate = 0.0;
  double refinement_error = 0.0;  // trapezoid refinement discrepancy
  bool monotone = true;           // nondecreasing with slack 1e-8
};

/// Mass curve s -> int_{S^1} v(s)* lambda, computed by trapezoid
/// quadrature of lambda(u_t) with u_t from central differences in t.
inline MassReport puncture_mass(const CylinderMap& map, const OneForm& lambda,
                                const std::vector<double>& s_grid, int nt = 64,
                                double ht = 1e-5) {
  auto action = [&](double s, int n) -> double {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / n;
      Vec up = map.eval(s, t + ht), um = map.eval(s, t - ht);
      Vec ut = (up.tail(map.m_dim) - um.tail(map.m_dim)) / (2.0 * ht);
      Vec m = map.eval(s, t).tail(map.m_dim);
      sum += lambda(m).dot(ut);
    }
    return sum / n;  // periodic trapezoid on t in [0, 1)
  };

  MassReport rep;
  rep.s_grid = s_grid;
  for (double s : s_grid) {
    const double coarse = action(s, nt / 2);
    const double fine = action(s, nt);
    rep.refinement_error =
        std::max(rep.refinement_error, std::abs(fine - coarse));
    rep.mass_curve.push_back(fine);
  }
  for (std::size_t i = 1; i < rep.mass_curve.size(); ++i)
    if (rep.mass_curve[i] < rep.mass_curve[i - 1] - 1e-8) rep.monotone = false;
  if (!rep.mass_curve.empty()) rep.limit_estimate = rep.mass_curve.back();
  return rep;
}

struct ResidualReport {
  double max_R1 = 0.0;  // complex-linearity defect on xi
  double max_R2 = 0.0;  // contact/Reeb component defect
  double h = 0.0;
  int ns = 0, nt = 0;
};

/// Finite-difference check of the holomorphy system on a grid over
/// [s_lo, s_hi] x S^1:
///   R1 = pi_lambda du j - J pi_lambda du  (evaluated on d_s and d_t),
///   R2 = u* lambda . j - da.
inline ResidualReport holomorphy_residual(const CylinderMap& map,
                                          const ContactData& contact,
                                          double s_lo, double s_hi, int ns,
                                          int nt, double h = 1e-4) {
  ResidualReport rep;
  rep.h = h;
  rep.ns = ns;
  rep.nt = nt;
  for (int i = 0; i < ns; ++i) {
    const double s = s_lo + (s_hi - s_lo) * (i + 0.5) / ns;
    for (int jt = 0; jt < nt; ++jt) {
      const double t = static_cast<double>(jt) / nt;
      Vec c0 = map.eval(s, t);
      Vec cps = map.eval(s + h, t), cms = map.eval(s - h, t);
      Vec cpt = map.eval(s, t + h), cmt = map.eval(s, t - h);
      if (!c0.allFinite() || !cps.allFinite() || !cpt.allFinite())
        throw evaluation_error("holomorphy_residual: non-finite map value");

      const double a_s = (cps[0] - cms[0]) / (2.0 * h);
      const double a_t = (cpt[0] - cmt[0]) / (2.0 * h);
      Vec us = (cps.tail(map.m_dim) - cms.tail(map.m_dim)) / (2.0 * h);
      Vec ut = (cpt.tail(map.m_dim) - cmt.tail(map.m_dim)) / (2.0 * h);
      Vec m = c0.tail(map.m_dim);

      Vec lam = contact.lambda(m);
      Mat P = contact.xi_projection(m);
      Mat J = contact.J_xi(m);

      Vec r1a = P * ut - J * (P * us);   // (pi du j - J pi du)(d_s)
      Vec r1b = -(P * us) - J * (P * ut);  // (pi du j - J pi du)(d_t)
      const double r2a = lam.dot(ut) - a_s;   // (u*lambda . j - da)(d_s)
      const double r2b = -lam.dot(us) - a_t;  // (u*lambda . j - da)(d_t)

      rep.max_R1 = std::max({rep.max_R1, r1a.norm(), r1b.norm()});
      rep.max_R2 = std::max({rep.max_R2, std::abs(r2a), std::abs(r2b)});
    }
  }
  return rep;
}

/// Order estimate from residuals at h and h/2 (expect ~4 for O(h^2)).
inline double residual_order(const ResidualReport& coarse,
                             const ResidualReport& fine) {
  const double c = coarse.max_R1 + coarse.max_R2;
  const double f = fine.max_R1 + fine.max_R2;
  if (f <= 0.0) return std::numeric_limits<double>::infinity();
  return c / f;
}

/// CSV export: s, a, theta_lift, gamma coordinates.
inline void cylinder_to_csv(const LiftedCylinder& cyl, std::ostream& os) {
  os << "s,a,theta_lift";
  for (int i = 0; i < cyl.w_dim; ++i) os << ",w" << i;
  os << '\n';
  os.precision(17);
  auto dump = [&](const OdeSolution& sol, bool reversed) {
    const std::size_t n = sol.x.size();
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = reversed ? n - 1 - k : k;
      if (reversed && i == 0) continue;  // s = 0 emitted once
      os << sol.x[i] << ',' << sol.y[i][cyl.w_dim + 1] << ','
         << sol.y[i][cyl.w_dim];
      for (int c = 0; c < cyl.w_dim; ++c) os << ',' << sol.y[i][c];
      os << '\n';
    }
  };
  if (!cyl.bwd.x.empty()) dump(cyl.bwd, true);
  dump(cyl.fwd, false);
}

}  // namespace pqflow
