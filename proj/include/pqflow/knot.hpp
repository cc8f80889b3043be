#pragma once

#include <cmath>
#include <vector>

#include "pqflow/diffgeo.hpp"
#include "pqflow/flow.hpp"
#include "pqflow/prequant.hpp"
#include "pqflow/rng.hpp"
#include "pqflow/spiral.hpp"

namespace pqflow {

/// alpha_k = sum_i x_i dy_i - y_i dx_i on R^{2k}, coordinates ordered
/// (x_1, y_1, ..., x_k, y_k).
inline OneForm alpha_form(int k) {
  OneForm a;
  a.eval = [k](const Vec& p) -> Vec {
    Vec v(2 * k);
    for (int i = 0; i < k; ++i) {
      v[2 * i] = -p[2 * i + 1];
      v[2 * i + 1] = p[2 * i];
    }
    return v;
  };
  a.d_closed_form = [k](const Vec&) -> Mat {
    Mat D = Mat::Zero(2 * k, 2 * k);
    for (int i = 0; i < k; ++i) {
      D(2 * i, 2 * i + 1) = 2.0;
      D(2 * i + 1, 2 * i) = -2.0;
    }
    return D;
  };
  return a;
}

/// Block-diagonal standard complex structure on R^{2k}: d_{x_i} -> d_{y_i}.
inline Mat j_standard(int k) {
  Mat J = Mat::Zero(2 * k, 2 * k);
  for (int i = 0; i < k; ++i) {
    J(2 * i + 1, 2 * i) = 1.0;
    J(2 * i, 2 * i + 1) = -1.0;
  }
  return J;
}

/// Standard transverse-knot model: S^1 x R^{2n} with lambda_0 = d theta
/// + alpha_n, coordinates (theta, x_1, y_1, ..., x_n, y_n).
struct KnotModel {
  int n = 1;

  int dim() const { return 1 + 2 * n; }

  OneForm lambda0() const {
    const int nn = n;
    OneForm alpha = alpha_form(nn);
    OneForm l;
    l.eval = [alpha, nn](const Vec& m) -> Vec {
      Vec v(1 + 2 * nn);
      v[0] = 1.0;
      v.tail(2 * nn) = alpha(m.tail(2 * nn));
      return v;
    };
    l.d_closed_form = [alpha, nn](const Vec& m) -> Mat {
      Mat D = Mat::Zero(1 + 2 * nn, 1 + 2 * nn);
      D.block(1, 1, 2 * nn, 2 * nn) = alpha.d(m.tail(2 * nn));
      return D;
    };
    return l;
  }
};

/// Prequantization data of the annulus construction: W = R^{2n},
/// beta = alpha_n (so omega = 2 sum dx ^ dy, g_j = 2 I), f the ambient
/// annulus potential.
inline PrequantSpace annulus_space(int n, const AnnulusParams& params) {
  if (!params.valid()) throw contract_violation("annulus_space: bad params");
  AlmostComplexStructure j;
  Mat jm = j_standard(n);
  j.J = [jm](const Vec&) { return jm; };
  return make_prequant(2 * n, alpha_form(n), j, ambient_F(n, params));
}

struct AnnulusOptions {
  double rho_margin = 1.0 / 12.0;  // stop once rho passes -margin / -1+margin
  double s_budget = 1e6;
  double rtol = 1e-10;
  double atol = 1e-12;
  double band = 0.05;
  int bins = 36;
};

struct AnnulusExperiment {
  PrequantSpace space;
  LiftedCylinder cyl;
  LimitSetReport forward;   // coverage of the |z| = r_plus torus
  LimitSetReport backward;  // coverage of the |z| = r_minus torus
  double rho_forward_end = 0.0;
  double rho_backward_end = 0.0;
};

/// Reduced chart metric on (rho, phi): pullback of 2 x Euclidean under
/// the annulus map p, g = 2 r(rho)^2 diag(L^2, 1).
inline MetricField annulus_chart_metric(const AnnulusParams& params) {
  AnnulusMap map{params};
  MetricField g;
  g.g = [map](const Vec& p) -> Mat {
    const double r2 = map.radius(p[0]) * map.radius(p[0]);
    const double L = map.log_ratio();
    Mat m = Mat::Zero(2, 2);
    m(0, 0) = 2.0 * r2 * L * L;
    m(1, 1) = 2.0 * r2;
    return m;
  };
  g.g_inv = [gg = g.g](const Vec& p) -> Mat {
    Mat m = gg(p);
    Mat inv = Mat::Zero(2, 2);
    inv(0, 0) = 1.0 / m(0, 0);
    inv(1, 1) = 1.0 / m(1, 1);
    return inv;
  };
  return g;
}

/// Annulus profile as a 2-d scalar field on (rho, phi).
inline ScalarField annulus_profile_field() {
  AnnulusProfile prof;
  ScalarField f;
  f.eval = [prof](const Vec& p) { return prof.eval(p[0], p[1]); };
  f.differential = [prof](const Vec& p) { return prof.differential(p[0], p[1]); };
  f.differential_scaled = [prof](const Vec& p) {
    return prof.differential_scaled(p[0], p[1]);
  };
  return f;
}

/// Annulus lab: lifts the ambient annulus-potential flow through a
/// start point with r_- < |z_n| < r_+ to a cylinder in R x S^1 x R^{2n}
/// and certifies both limit tori with unit-speed chart flows.
inline AnnulusExperiment build_annulus_cylinder(int n,
                                                const AnnulusParams& params,
                                                const Vec& w0, double theta0,
                                                double a0,
                                                const AnnulusOptions& opt = {}) {
  AnnulusMap map{params};
  const double zx = w0[2 * n - 2], zy = w0[2 * n - 1];
  const double r = std::hypot(zx, zy);
  if (!(r > params.r_minus && r < params.r_plus))
    throw contract_violation(
        "build_annulus_cylinder: start radius must lie strictly between "
        "r_minus and r_plus");

  AnnulusExperiment ex;
  ex.space = annulus_space(n, params);

  const int ix = 2 * n - 2, iy = 2 * n - 1;
  auto rho_of = [map, ix, iy](const Vec& y) {
    return std::log(std::hypot(y[ix], y[iy]) / map.params.r_plus) /
           map.log_ratio();
  };
  CylinderOptions copt;
  copt.rtol = opt.rtol;
  copt.atol = opt.atol;
  const double margin = opt.rho_margin;
  copt.stop_forward = [rho_of, margin](double, const Vec& y) {
    return rho_of(y) > -margin;
  };
  copt.stop_backward = [rho_of, margin](double, const Vec& y) {
    return rho_of(y) < -1.0 + margin;
  };
  ex.cyl = build_cylinder(ex.space, w0, theta0, a0, -opt.s_budget,
                          opt.s_budget, copt);
  ex.rho_forward_end = rho_of(ex.cyl.fwd.y.back());
  ex.rho_backward_end = rho_of(ex.cyl.bwd.y.back());

  // limit tori via stabilized unit-speed flows in the (rho, phi) chart,
  // with an allocation-free field for the deep band
  ScalarField prof = annulus_profile_field();
  MetricField g = annulus_chart_metric(params);
  Vec rp = map.inverse(zx, zy);
  ChartPoint x0(rp, {1});

  AnnulusProfile aprof;
  const double L = map.log_ratio();
  const double rplus = params.r_plus;
  auto chart_flow = [&](double sign) {
    StopCriteria stop;
    stop.s_stop = std::min(1e-2, 0.2 * opt.band);
    stop.budget = 1e5;
    stop.sign = sign;
    auto field = [aprof, L, rplus, sign](const Eigen::Vector2d& p) {
      Eigen::Vector2d w;
      aprof.differential_scaled2(p[0], p[1], w);
      const double r2 = rplus * rplus * std::exp(2.0 * L * p[0]);
      Eigen::Vector2d u(w[0] / (2.0 * r2 * L * L), w[1] / (2.0 * r2));
      const double n2 = w.dot(u);
      if (!(n2 > 0.0)) return Eigen::Vector2d(0.0, 0.0);
      return Eigen::Vector2d((sign / std::sqrt(n2)) * u);
    };
    auto pot_eval = [aprof](const Eigen::Vector2d& p) {
      return aprof.eval(p[0], p[1]);
    };
    FlowTrajectory traj;
    traj.mode = FlowMode::unit_speed;
    traj.rhs = [prof, g, sign](double, const Vec& p) -> Vec {
      ScaledCovector sc = prof.d_scaled(p);
      Vec u = g.g_inv(p) * sc.w;
      const double n2 = sc.w.dot(u);
      if (!(n2 > 0.0)) return Vec::Zero(2);
      return Vec((sign / std::sqrt(n2)) * u);
    };
    return detail::rkc2_unit_flow(field, pot_eval, std::move(traj), x0, stop,
                                  2e-3);
  };
  FlowTrajectory fwd = chart_flow(1.0);
  ex.forward = detect_omega_limit(fwd, opt.band, opt.bins, 0.0);
  FlowTrajectory bwd = chart_flow(-1.0);
  ex.backward = detect_omega_limit(bwd, opt.band, opt.bins, -1.0);
  return ex;
}

/// The exact symplectic base of the plane construction:
/// W = S^1 x R^{2(n-1)} x R with coordinates (theta, x_i, y_i, rho),
/// beta = e^{-2 rho}(d theta + alpha_{n-1}), j_1, and the closed-form
/// metric g_{j_1}.
struct WSpace {
  int n = 1;

  int dim() const { return 2 * n; }
  int rho_index() const { return 2 * n - 1; }

  OneForm beta;
  AlmostComplexStructure j0;  // constant, on the middle R^{2(n-1)}
  AlmostComplexStructure j1;
  MetricField g_j1;
};

namespace detail {

inline Vec alpha_middle(int n, const Vec& w) {
  // covector of alpha_{n-1} on the middle block, embedded in R^{2n}
  Vec a = Vec::Zero(2 * n);
  for (int i = 0; i < n - 1; ++i) {
    a[1 + 2 * i] = -w[2 + 2 * i];
    a[2 + 2 * i] = w[1 + 2 * i];
  }
  return a;
}

}  // namespace detail

struct construction_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline WSpace build_W_structures(int n, bool verify = true,
                                 std::uint64_t seed = 2026) {
  if (n < 1) throw contract_violation("build_W_structures: n >= 1");
  WSpace w;
  w.n = n;
  const int d = 2 * n;
  const int ir = d - 1;
  const int mid = 2 * (n - 1);

  w.beta.eval = [n, d, ir](const Vec& p) -> Vec {
    Vec b = detail::alpha_middle(n, p);
    b[0] = 1.0;
    b *= std::exp(-2.0 * p[ir]);
    return b;
  };
  w.beta.d_closed_form = [n, d, ir](const Vec& p) -> Mat {
    const double e = std::exp(-2.0 * p[ir]);
    Vec u = detail::alpha_middle(n, p);
    u[0] = 1.0;  // d theta + alpha_{n-1}
    Mat D = Mat::Zero(d, d);
    // -2 e^{-2rho} d rho ^ (d theta + alpha)
    for (int i = 0; i < d; ++i) {
      D(ir, i) += -2.0 * e * u[i];
      D(i, ir) -= -2.0 * e * u[i];
    }
    // e^{-2rho} d alpha
    for (int i = 0; i < n - 1; ++i) {
      D(1 + 2 * i, 2 + 2 * i) += 2.0 * e;
      D(2 + 2 * i, 1 + 2 * i) -= 2.0 * e;
    }
    return D;
  };

  Mat j0m = j_standard(n - 1);
  w.j0.J = [j0m](const Vec&) { return j0m; };

  w.j1.J = [n, d, ir, mid, j0m](const Vec& p) -> Mat {
    const double e2 = std::exp(2.0 * p[ir]);
    Mat J = Mat::Zero(d, d);
    J(0, ir) = -e2;        // j1 d_rho = -e^{2rho} d_theta
    J(ir, 0) = 1.0 / e2;   // j1 d_theta = e^{-2rho} d_rho
    Vec a = detail::alpha_middle(n, p);
    for (int c = 0; c < mid; ++c) {
      Vec v = Vec::Zero(d);
      v[1 + c] = 1.0;
      Vec jv = Vec::Zero(d);
      jv.segment(1, mid) = j0m * v.segment(1, mid);
      Vec col = jv;
      col[0] -= a.dot(jv);          // -alpha(j0 v) d_theta
      col[ir] += a.dot(v) / e2;     // alpha(v) e^{-2rho} d_rho
      J.col(1 + c) = col;
    }
    return J;
  };

  // g_{j1} = 2 drho x drho + 2 e^{-4rho} u x u + e^{-2rho} dalpha(., j0 .)
  w.g_j1.g = [n, d, ir, mid, j0m](const Vec& p) -> Mat {
    const double e2 = std::exp(2.0 * p[ir]);
    Vec u = detail::alpha_middle(n, p);
    u[0] = 1.0;
    Mat g = Mat::Zero(d, d);
    g(ir, ir) = 2.0;
    g += (2.0 / (e2 * e2)) * (u * u.transpose());
    Mat omega0 = Mat::Zero(mid, mid);
    for (int i = 0; i < n - 1; ++i) {
      omega0(2 * i, 2 * i + 1) = 2.0;
      omega0(2 * i + 1, 2 * i) = -2.0;
    }
    g.block(1, 1, mid, mid) += (omega0 * j0m) / e2;
    return g;
  };
  w.g_j1.g_inv = [gg = w.g_j1.g](const Vec& p) -> Mat {
    return Eigen::PartialPivLU<Mat>(gg(p)).inverse();
  };

  if (verify) {
    SplitMix64 rng(seed);
    for (int k = 0; k < 100; ++k) {
      Vec p(d);
      for (int i = 0; i < d; ++i) p[i] = rng.uniform(-1.0, 1.0);
      Mat J = w.j1(p);
      if ((J * J + Mat::Identity(d, d)).cwiseAbs().maxCoeff() > 1e-12)
        throw construction_error("build_W_structures: j1^2 != -I");
      Mat lhs = w.beta.d(p) * J;  // d beta (., j1 .)
      if ((lhs - w.g_j1.g(p)).cwiseAbs().maxCoeff() > 1e-9)
        throw construction_error("build_W_structures: g_{j1} mismatch");
      // symplectic check: d beta^n = (-2)^n e^{-2n rho} (drho dtheta
      // dx dy ...) is nonzero; test via determinant
      if (std::abs(w.beta.d(p).determinant()) < 1e-12)
        throw construction_error("build_W_structures: d beta degenerate");
    }
  }
  return w;
}

/// The contactomorphism Phi: S^1 x W -> S^1 x (R^{2n} \ 0),
/// (phi, theta, x_i, y_i, rho) -> (theta, x_i, y_i, e^rho cos phi,
/// e^rho sin phi).
struct PhiMap {
  int n = 1;

  int dim() const { return 2 * n + 1; }

  Vec forward(const Vec& m) const {
    const int d = dim();
    Vec out(d);
    out[0] = m[1];  // theta
    for (int i = 0; i < 2 * (n - 1); ++i) out[1 + i] = m[2 + i];
    const double er = std::exp(m[d - 1]);
    out[d - 2] = er * std::cos(m[0]);
    out[d - 1] = er * std::sin(m[0]);
    return out;
  }

  Vec inverse(const Vec& q) const {
    const int d = dim();
    const double x = q[d - 2], y = q[d - 1];
    const double r = std::hypot(x, y);
    if (r == 0.0) throw evaluation_error("PhiMap::inverse: x_n = y_n = 0");
    Vec m(d);
    m[0] = std::atan2(y, x);
    m[1] = q[0];
    for (int i = 0; i < 2 * (n - 1); ++i) m[2 + i] = q[1 + i];
    m[d - 1] = std::log(r);
    return m;
  }

  Mat jacobian(const Vec& m) const {
    const int d = dim();
    Mat J = Mat::Zero(d, d);
    J(0, 1) = 1.0;
    for (int i = 0; i < 2 * (n - 1); ++i) J(1 + i, 2 + i) = 1.0;
    const double er = std::exp(m[d - 1]);
    const double c = std::cos(m[0]), s = std::sin(m[0]);
    J(d - 2, 0) = -er * s;
    J(d - 2, d - 1) = er * c;
    J(d - 1, 0) = er * c;
    J(d - 1, d - 1) = er * s;
    return J;
  }
};

/// Pullback of a covector through a map with the given Jacobian.
inline Vec pullback_covector(const Mat& jac, const Vec& covector) {
  return jac.transpose() * covector;
}

/// max |Phi^* lambda_0 - e^{2 rho} (d phi + pi^* beta)| at m.
inline double phi_pullback_check(const WSpace& w, const Vec& m) {
  PhiMap phi{w.n};
  KnotModel model{w.n};
  Vec lhs = pullback_covector(phi.jacobian(m), model.lambda0()(phi.forward(m)));
  const int d = phi.dim();
  Vec rhs(d);
  rhs[0] = 1.0;
  rhs.tail(d - 1) = w.beta(m.tail(d - 1));
  rhs *= std::exp(2.0 * m[d - 1]);
  return (lhs - rhs).cwiseAbs().maxCoeff();
}

/// The smooth extension of Phi_* j~_1 to a complex structure on xi_0
/// over S^1 x R^{2n}: ambient matrix annihilating d_theta, acting on
/// the xi_0 lift of a base vector v by the lift of A v with A = j_0 on
/// the middle block and the standard rotation on the (x_n, y_n) pair.
inline Mat extended_J(const KnotModel& model, const Vec& q) {
  const int n = model.n;
  const int d = 1 + 2 * n;
  Mat A = j_standard(n);
  OneForm alpha = alpha_form(n);
  Vec a = alpha(q.tail(2 * n));
  Mat J = Mat::Zero(d, d);
  for (int i = 1; i < d; ++i) {
    Vec v = Vec::Zero(2 * n);
    v[i - 1] = 1.0;
    Vec Av = A * v;
    J(0, i) = -a.dot(Av);
    J.block(1, i, 2 * n, 1) = Av;
  }
  return J;
}

/// Oracle for the extension: d Phi . j~_1 . d Phi^{-1} as a map of xi_0
/// frames (defined only off the x_n = y_n = 0 locus).  Returns the
/// matrix T with T(P_0 e_i) = d Phi (j~_1 (d Phi^{-1} P_0 e_i)).
inline Mat extended_J_via_phi(const WSpace& w, const Vec& q) {
  PhiMap phi{w.n};
  const int d = phi.dim();
  Vec m = phi.inverse(q);
  Mat jac = phi.jacobian(m);
  Mat jac_inv = Eigen::PartialPivLU<Mat>(jac).inverse();

  // j~_1 on S^1 x W: lift of j_1 through beta
  Mat j1 = w.j1(m.tail(d - 1));
  Vec bw = w.beta(m.tail(d - 1));
  Mat jt = Mat::Zero(d, d);
  // on xi = {(-beta(v), v)}: maps the lift of v to the lift of j_1 v;
  // kill the d_phi direction by projecting along X = d_phi with
  // lambda = d phi + beta
  for (int i = 0; i < d; ++i) {
    Vec e = Vec::Zero(d);
    e[i] = 1.0;
    Vec v = e.tail(d - 1);  // base part of the xi-projection of e_i
    Vec jv = j1 * v;
    jt(0, i) = -bw.dot(jv);
    jt.block(1, i, d - 1, 1) = jv;
  }
  return jac * jt * jac_inv;
}

/// Plane-profile potential on W: G(theta, p, rho) =
/// 2 (F_1(rho - log r0, theta) + log r0), independent of p.
inline ScalarField plane_potential(int n, double r0) {
  if (!(r0 > 0.0)) throw contract_violation("plane_potential: r0 > 0");
  PlaneProfile prof{r0};
  const int d = 2 * n;
  const int ir = d - 1;
  ScalarField f;
  f.eval = [prof, ir](const Vec& p) { return prof.eval(p[0], p[ir]); };
  f.differential = [prof, d, ir](const Vec& p) -> Vec {
    Vec g = prof.partials(p[0], p[ir]);
    Vec out = Vec::Zero(d);
    out[0] = g[0];
    out[ir] = g[1];
    return out;
  };
  f.differential_scaled = [prof, d, ir](const Vec& p) -> ScaledCovector {
    ScaledCovector sc =
        prof.unit.differential_scaled(p[ir] - prof.log_r0(), p[0]);
    ScaledCovector out;
    out.log_scale = sc.log_scale;
    out.w = Vec::Zero(d);
    out.w[0] = 2.0 * sc.w[1];
    out.w[ir] = 2.0 * sc.w[0];
    return out;
  };
  return f;
}

inline PrequantSpace plane_space(const WSpace& w, double r0) {
  return make_prequant(w.dim(), w.beta, w.j1, plane_potential(w.n, r0), {0});
}

/// Closed-form g_{j_1}-gradient of the plane potential (the general-p
/// formula of the closing remark, with q = g_{j_0}(p, p) / 2):
///   grad G = (G_rho / 2) d_rho
///          + (G_theta / 2)(e^{4rho} + e^{2rho} q) d_theta
///          - (G_theta e^{2rho} / 2) j_0 p.
inline Vec grad_plane_profile(const WSpace& w, const Vec& wp, double r0) {
  const int d = w.dim();
  const int ir = d - 1;
  const int mid = 2 * (w.n - 1);
  PlaneProfile prof{r0};
  Vec g = prof.partials(wp[0], wp[ir]);  // (G_theta, G_rho)
  const double e2 = std::exp(2.0 * wp[ir]);

  Vec p = wp.segment(1, mid);
  Mat j0 = w.j0(wp).topLeftCorner(mid, mid);
  Mat omega0 = Mat::Zero(mid, mid);
  for (int i = 0; i < w.n - 1; ++i) {
    omega0(2 * i, 2 * i + 1) = 2.0;
    omega0(2 * i + 1, 2 * i) = -2.0;
  }
  const double q = 0.5 * p.dot(omega0 * (j0 * p));  // g_{j0}(p, p) / 2

  Vec out = Vec::Zero(d);
  out[ir] = 0.5 * g[1];
  out[0] = 0.5 * g[0] * (e2 * e2 + e2 * q);
  out.segment(1, mid) = -0.5 * g[0] * e2 * (j0 * p);
  return out;
}

struct PlaneOptions {
  double s_lo = -2.0;
  double s_budget = 1e5;
  double rho_margin = 1.0 / 9.0;  // forward stop at rho > log r0 - margin
  double rtol = 1e-12;
  double atol = 1e-13;
  double tail_margin = 0.1;
};

/// The lifted plane: a cylinder in S^1_phi x W pushed through Phi
/// to a plane in R x S^1 x R^{2n}, with tail constants fitted on the
/// linear region rho < log r0 - 1 - tail_margin.
struct LiftedPlane {
  WSpace wspace;
  PrequantSpace space;
  double r0 = 1.0;
  LiftedCylinder cyl;  // state (w, phi, a), w = (theta, x, y, rho)

  double a1 = 0.0, theta1 = 0.0, s1 = 0.0, t1 = 0.0;
  double tail_fit_residual = 0.0;
  double tail_s_hi = 0.0;  // upper end of the fit window

  int target_dim() const { return 2 * wspace.n + 1; }

  /// Pushed map (a, Phi(u(s, t))) in R x S^1 x R^{2n}.
  Vec pushed_from_state(const Vec& y, double t) const {
    PhiMap phi{wspace.n};
    const int d = wspace.dim();
    Vec m(d + 1);
    m[0] = y[d] + two_pi * t;  // fiber angle
    m.tail(d) = y.head(d);
    Vec out(1 + target_dim());
    out[0] = y[d + 1];
    out.tail(target_dim()) = phi.forward(m);
    return out;
  }

  Vec pushed(double s, double t) const {
    return pushed_from_state(cyl.state(s), t);
  }

  Vec pushed_precise(double s, double t, double substep = 1e-3) const {
    return pushed_from_state(cyl.state_precise(s, substep), t);
  }

  /// v~ composed with psi(z) = (log|z|/2pi, arg z/2pi).
  Vec at_z(double x, double y) const {
    const double r = std::hypot(x, y);
    if (r == 0.0) {
      // smooth extension value at the puncture
      Vec out = Vec::Zero(1 + target_dim());
      out[0] = a1;
      out[1] = wrap_angle(theta1);
      return out;
    }
    return pushed(std::log(r) / two_pi, std::atan2(y, x) / two_pi);
  }

  CylinderMap as_map(bool precise = true, double substep = 1e-3) const {
    CylinderMap m;
    m.m_dim = target_dim();
    if (precise)
      m.eval = [this, substep](double s, double t) {
        return pushed_precise(s, t, substep);
      };
    else
      m.eval = [this](double s, double t) { return pushed(s, t); };
    return m;
  }
};

inline LiftedPlane build_plane(const WSpace& w, double r0, double theta0,
                               const Vec& p0, double rho0,
                               const PlaneOptions& opt = {}) {
  if (!(rho0 < std::log(r0)))
    throw contract_violation("build_plane: need rho0 < log r0");
  LiftedPlane plane;
  plane.wspace = w;
  plane.r0 = r0;
  plane.space = plane_space(w, r0);

  const int d = w.dim();
  Vec w0 = Vec::Zero(d);
  w0[0] = theta0;
  if (p0.size() > 0) w0.segment(1, 2 * (w.n - 1)) = p0;
  w0[d - 1] = rho0;

  CylinderOptions copt;
  copt.rtol = opt.rtol;
  copt.atol = opt.atol;
  const double rho_stop = std::log(r0) - opt.rho_margin;
  const int ir = d - 1;
  copt.stop_forward = [rho_stop, ir](double, const Vec& y) {
    return y[ir] > rho_stop;
  };
  plane.cyl =
      build_cylinder(plane.space, w0, 0.0, 0.0, opt.s_lo, opt.s_budget, copt);

  // tail fit on the linear region rho(s) < log r0 - 1 - margin
  const double rho_tail = std::log(r0) - 1.0 - opt.tail_margin;
  std::vector<double> ss;
  std::vector<Vec> ys;
  for (std::size_t i = 0; i < plane.cyl.bwd.x.size(); ++i) {
    if (plane.cyl.bwd.y[i][ir] < rho_tail) {
      ss.push_back(plane.cyl.bwd.x[i]);
      ys.push_back(plane.cyl.bwd.y[i]);
    }
  }
  if (ss.size() < 4)
    throw evaluation_error("build_plane: tail window too short for the fit");
  plane.tail_s_hi = *std::max_element(ss.begin(), ss.end());

  // rho(s) = 2 pi s + s1, theta = theta1, phi = t1,
  // a(s) = a1 + (e^{2 s1} / 2) e^{4 pi s}
  double s1 = 0.0, th1 = 0.0, t1 = 0.0;
  for (std::size_t i = 0; i < ss.size(); ++i) {
    s1 += ys[i][ir] - two_pi * ss[i];
    th1 += ys[i][0];
    t1 += ys[i][d];
  }
  s1 /= ss.size();
  th1 /= ss.size();
  t1 /= ss.size();
  double a1 = 0.0;
  for (std::size_t i = 0; i < ss.size(); ++i)
    a1 += ys[i][d + 1] - 0.5 * std::exp(2.0 * s1 + 2.0 * two_pi * ss[i]);
  a1 /= ss.size();

  double resid = 0.0;
  for (std::size_t i = 0; i < ss.size(); ++i) {
    resid = std::max(resid, std::abs(ys[i][ir] - (two_pi * ss[i] + s1)));
    resid = std::max(resid, std::abs(ys[i][0] - th1));
    resid = std::max(resid, std::abs(ys[i][d] - t1));
    resid = std::max(
        resid, std::abs(ys[i][d + 1] -
                        (a1 + 0.5 * std::exp(2.0 * s1 + 2.0 * two_pi * ss[i]))));
  }
  plane.s1 = s1;
  plane.theta1 = th1;
  plane.t1 = t1;
  plane.a1 = a1;
  plane.tail_fit_residual = resid;
  return plane;
}

/// F~ = (pi* G - 2 rho) o Phi^{-1}, extended by 0 over x_n = y_n = 0;
/// equals 2 (F_1(rho - log r0, theta) - (rho - log r0)) at rho = log|z|.
inline ScalarField plane_target_potential(int n, double r0) {
  SpiralPotential unit{SpiralParams{1.0, 1.25}};
  const int d = 1 + 2 * n;
  const double lr0 = std::log(r0);
  ScalarField f;
  f.eval = [unit, d, lr0](const Vec& q) -> double {
    const double r = std::hypot(q[d - 2], q[d - 1]);
    if (r == 0.0) return 0.0;
    const double x = std::log(r) - lr0;
    if (x < -1.0) return 0.0;
    return 2.0 * (unit.eval(x, q[0]) - x);
  };
  f.differential = [unit, d, lr0](const Vec& q) -> Vec {
    Vec out = Vec::Zero(d);
    const double r2 = q[d - 2] * q[d - 2] + q[d - 1] * q[d - 1];
    if (r2 == 0.0) return out;
    const double x = 0.5 * std::log(r2) - lr0;
    if (x < -1.0) return out;
    Vec df = unit.differential(x, q[0]);  // (F_s, F_t); zero covector for x >= 0
    if (x >= 0.0) df = Vec::Zero(2);
    out[0] = 2.0 * df[1];
    const double c = 2.0 * (df[0] - 1.0) / r2;  // 2 (F_s - 1) d rho
    out[d - 2] = c * q[d - 2];
    out[d - 1] = c * q[d - 1];
    return out;
  };
  return f;
}

/// Contact data of the plane target: lambda~ = e^{F~} lambda_0 with the
/// smoothly extended J on xi_0.
inline ContactData contact_plane_target(int n, double r0) {
  KnotModel model{n};
  OneForm lam0 = model.lambda0();
  ScalarField F = plane_target_potential(n, r0);
  const int d = 1 + 2 * n;

  ContactData c;
  c.lambda.eval = [lam0, F](const Vec& q) -> Vec {
    return std::exp(F(q)) * lam0(q);
  };
  c.lambda.d_closed_form = [lam0, F, d](const Vec& q) -> Mat {
    const double ef = std::exp(F(q));
    Vec l = lam0(q);
    Vec df = F.d(q);
    Mat D = lam0.d(q);
    D += df * l.transpose() - l * df.transpose();
    return ef * D;
  };
  c.reeb = [c](const Vec& q) { return reeb_solve(c.lambda, q); };
  c.xi_projection = [c](const Vec& q) {
    return xi_projection_matrix(c.lambda(q), c.reeb(q));
  };
  c.J_xi.J = [model](const Vec& q) { return extended_J(model, q); };
  return c;
}

struct RemovabilityReport {
  double a_coeff = 0.0;           // fitted C in a = a1 + C |z|^2
  double a_coeff_predicted = 0.0; // e^{2 s1} / 2
  double a_fit_residual = 0.0;    // relative
  double z_scale_re = 0.0, z_scale_im = 0.0;  // fitted C1 in v_z = C1 z
  double linear_residual_hi = 0.0;  // full-map first-order residual, r_hi
  double linear_residual_lo = 0.0;  // same at r_lo
  double decay_ratio = 0.0;
  double theta_variance = 0.0;      // over the r_lo circle
  double middle_max = 0.0;          // max |middle coordinates|
  double mass_at_r_lo = 0.0;
  bool passed = false;
};

/// Verifies the closed-form behavior near the puncture: quadratic
/// a-component, complex-linear (x_n, y_n) pair, constant remaining
/// coordinates, vanishing mass.
inline RemovabilityReport removable_singularity_check(const LiftedPlane& plane,
                                                      double r_hi = 1e-2,
                                                      double r_lo = 1e-3,
                                                      int samples = 64) {
  RemovabilityReport rep;
  const int d = plane.target_dim();
  rep.a_coeff_predicted = 0.5 * std::exp(2.0 * plane.s1);

  // fit C1 = mean(v_z / z) on the outer circle
  double cre = 0.0, cim = 0.0;
  for (int i = 0; i < samples; ++i) {
    const double ang = two_pi * i / samples;
    const double zx = r_hi * std::cos(ang), zy = r_hi * std::sin(ang);
    Vec v = plane.at_z(zx, zy);
    const double vx = v[d - 1], vy = v[d];
    // v_z / z with z = zx + i zy
    cre += (vx * zx + vy * zy) / (r_hi * r_hi);
    cim += (vy * zx - vx * zy) / (r_hi * r_hi);
  }
  cre /= samples;
  cim /= samples;
  rep.z_scale_re = cre;
  rep.z_scale_im = cim;

  // fit C on (|z|^2, a - a1) over both circles
  double num = 0.0, den = 0.0;
  auto circle_scan = [&](double r, double& lin_res, bool stats) {
    double th_mean = 0.0, th_m2 = 0.0;
    lin_res = 0.0;
    for (int i = 0; i < samples; ++i) {
      const double ang = two_pi * i / samples;
      const double zx = r * std::cos(ang), zy = r * std::sin(ang);
      Vec v = plane.at_z(zx, zy);
      num += (v[0] - plane.a1) * r * r;
      den += r * r * r * r;
      // full-map first-order Taylor residual around z = 0
      double rr = 0.0;
      rr = std::max(rr, std::abs(v[0] - plane.a1));  // a has no linear part
      rr = std::max(rr, std::abs(v[1] - plane.theta1));
      for (int kk = 2; kk < d - 1; ++kk) rr = std::max(rr, std::abs(v[kk]));
      rr = std::max(rr, std::abs(v[d - 1] - (cre * zx - cim * zy)));
      rr = std::max(rr, std::abs(v[d] - (cre * zy + cim * zx)));
      lin_res = std::max(lin_res, rr);
      if (stats) {
        const double delta = v[1] - th_mean;
        th_mean += delta / (i + 1);
        th_m2 += delta * (v[1] - th_mean);
        for (int kk = 2; kk < d - 1; ++kk)
          rep.middle_max = std::max(rep.middle_max, std::abs(v[kk]));
      }
    }
    if (stats) rep.theta_variance = th_m2 / samples;
  };
  circle_scan(r_hi, rep.linear_residual_hi, false);
  circle_scan(r_lo, rep.linear_residual_lo, true);
  rep.a_coeff = num / den;

  double ares = 0.0;
  for (int i = 0; i < samples; ++i) {
    const double ang = two_pi * i / samples;
    Vec v = plane.at_z(r_hi * std::cos(ang), r_hi * std::sin(ang));
    ares = std::max(ares,
                    std::abs(v[0] - plane.a1 - rep.a_coeff * r_hi * r_hi));
  }
  rep.a_fit_residual = ares / (std::abs(rep.a_coeff) * r_hi * r_hi);

  // guard: the lower circle sits near the integrator noise floor when
  // the quadratic term there is below tolerance-scale errors
  const double floor_est = 100.0 * std::numeric_limits<double>::epsilon() *
                           (1.0 + std::abs(plane.a1));
  rep.decay_ratio =
      rep.linear_residual_hi / std::max(rep.linear_residual_lo, floor_est);

  // mass of the shrinking loop against lambda~ (= lambda_0 in the tail)
  ContactData target = contact_plane_target(plane.wspace.n, plane.r0);
  const double s_lo_mass = std::log(r_lo) / two_pi;
  MassReport mr = puncture_mass(plane.as_map(false), target.lambda,
                                {s_lo_mass}, 64);
  rep.mass_at_r_lo = mr.mass_curve.front();

  rep.passed = rep.a_fit_residual <= 1e-6 &&
               rep.decay_ratio >= 80.0 && rep.decay_ratio <= 120.0 &&
               rep.theta_variance <= 1e-10 && rep.mass_at_r_lo <= 1e-5;
  return rep;
}

struct TorusCoverage {
  double fiber_coverage = 1.0;  // exact: the map carries theta(s) + 2 pi t
  double base_coverage = 0.0;
  double windings = 0.0;
};

/// Coverage of the limit torus of the plane: the fiber angle is swept
/// exactly by construction; the base angle is certified by a unit-speed
/// flow of the reduced (x, theta) system with the reduced metric
/// 2 dx^2 + 2 e^{-4 rho} dtheta^2 (on the p = 0 locus).
inline TorusCoverage plane_torus_coverage(const WSpace& w, double r0,
                                          double theta0, double rho0,
                                          double band = 0.05, int bins = 36) {
  const double lr0 = std::log(r0);
  SpiralPotential unit{SpiralParams{1.0, 1.25}};
  // chart (x, theta) with x = rho - log r0; potential 2 F_1(x, theta)
  ScalarField f;
  f.eval = [unit](const Vec& p) { return 2.0 * unit.eval(p[0], p[1]); };
  f.differential = [unit](const Vec& p) {
    return Vec(2.0 * unit.differential(p[0], p[1]));
  };
  f.differential_scaled = [unit](const Vec& p) {
    ScaledCovector sc = unit.differential_scaled(p[0], p[1]);
    sc.w *= 2.0;
    return sc;
  };
  MetricField g;
  g.g = [lr0](const Vec& p) -> Mat {
    Mat m = Mat::Zero(2, 2);
    m(0, 0) = 2.0;
    m(1, 1) = 2.0 * std::exp(-4.0 * (p[0] + lr0));
    return m;
  };
  g.g_inv = [gg = g.g](const Vec& p) -> Mat {
    Mat m = gg(p);
    Mat inv = Mat::Zero(2, 2);
    inv(0, 0) = 1.0 / m(0, 0);
    inv(1, 1) = 1.0 / m(1, 1);
    return inv;
  };

  Vec x0(2);
  x0[0] = rho0 - lr0;
  x0[1] = theta0;
  StopCriteria stop;
  stop.s_stop = std::min(1e-2, 0.2 * band);
  stop.budget = 1e5;
  auto field = [unit, lr0](const Eigen::Vector2d& p) {
    Eigen::Vector2d w;
    unit.differential_scaled2(p[0], p[1], w);
    const double e4 = std::exp(4.0 * (p[0] + lr0));
    Eigen::Vector2d u(0.5 * w[0], 0.5 * e4 * w[1]);
    const double n2 = w.dot(u);
    if (!(n2 > 0.0)) return Eigen::Vector2d(0.0, 0.0);
    return Eigen::Vector2d((1.0 / std::sqrt(n2)) * u);
  };
  auto pot_eval = [unit](const Eigen::Vector2d& p) {
    return 2.0 * unit.eval(p[0], p[1]);
  };
  FlowTrajectory seed;
  seed.mode = FlowMode::unit_speed;
  seed.rhs = [f, g](double, const Vec& p) -> Vec {
    ScaledCovector sc = f.d_scaled(p);
    Vec u = g.g_inv(p) * sc.w;
    const double n2 = sc.w.dot(u);
    if (!(n2 > 0.0)) return Vec::Zero(2);
    return Vec((1.0 / std::sqrt(n2)) * u);
  };
  FlowTrajectory traj = detail::rkc2_unit_flow(field, pot_eval,
                                               std::move(seed),
                                               ChartPoint(x0, {1}), stop, 2e-3);
  LimitSetReport rep = detect_omega_limit(traj, band, bins, 0.0);

  TorusCoverage cov;
  cov.base_coverage = rep.coverage;
  cov.windings = rep.windings;
  return cov;
}

/// Conserved quantity of the closing remark: g_{j0}(p, p) along the
/// flow (constant for constant j0).
inline double middle_norm_j0(const WSpace& w, const Vec& wp) {
  const int mid = 2 * (w.n - 1);
  Vec p = wp.segment(1, mid);
  Mat j0 = w.j0(wp).topLeftCorner(mid, mid);
  Mat omega0 = Mat::Zero(mid, mid);
  for (int i = 0; i < w.n - 1; ++i) {
    omega0(2 * i, 2 * i + 1) = 2.0;
    omega0(2 * i + 1, 2 * i) = -2.0;
  }
  return p.dot(omega0 * (j0 * p));
}

}  // namespace pqflow
