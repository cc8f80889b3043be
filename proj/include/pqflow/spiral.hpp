#pragma once

#include <array>
#include <cmath>

#include "pqflow/fields.hpp"

namespace pqflow {

/// Parameters of the spiral potential.  `c` is the oscillation offset
/// constant; any value strictly between 1 and sqrt(2) works, default
/// 5/4.  The barrier sandwich constants are c -/+ 1/8.
struct SpiralParams {
  double delta = 1.0;
  double c = 1.25;

  double barrier_lo() const { return c - 0.125; }
  double barrier_hi() const { return c + 0.125; }
};

struct AnnulusParams {
  double r_minus = 1.0;
  double r_plus = 2.0;

  bool valid() const { return r_plus > r_minus && r_minus > 0.0; }
};

struct PlaneParams {
  double r0 = 1.0;
  int n = 1;

  bool valid() const { return r0 > 0.0 && n >= 1; }
};

namespace detail {

// 16-point Gauss-Legendre rule on [-1, 1]
struct GL16 {
  static constexpr std::array<double, 8> x = {
      0.0950125098376374, 0.2816035507792589, 0.4580167776572274,
      0.6178762444026438, 0.7554044083550030, 0.8656312023878318,
      0.9445750230732326, 0.9894009349916499};
  static constexpr std::array<double, 8> w = {
      0.1894506104550685, 0.1826034150449236, 0.1691565193950025,
      0.1495959888165767, 0.1246289712555339, 0.0951585116824928,
      0.0622535239386479, 0.0271524594117541};
};

template <class F>
double gl16(F&& f, double a, double b) {
  const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
  double s = 0.0;
  for (int i = 0; i < 8; ++i)
    s += GL16::w[i] * (f(mid + half * GL16::x[i]) + f(mid - half * GL16::x[i]));
  return half * s;
}

inline double bump_integrand(double u) {
  if (u <= 0.0 || u >= 1.0) return 0.0;
  return std::exp(-1.0 / (u * (1.0 - u)));
}

// Normalized bump integral B(x) = int_0^x b / int_0^1 b, clamped to [0,1].
inline double bump_cdf(double x) {
  static const int panels = 64;
  struct Table {
    std::array<double, 65> prefix{};
    double total = 0.0;
    Table() {
      prefix[0] = 0.0;
      for (int k = 0; k < panels; ++k) {
        double a = static_cast<double>(k) / panels;
        double b = static_cast<double>(k + 1) / panels;
        prefix[k + 1] = prefix[k] + gl16(bump_integrand, a, b);
      }
      total = prefix[panels];
    }
  };
  static const Table tab;

  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  int k = static_cast<int>(x * panels);
  if (k >= panels) k = panels - 1;
  double a = static_cast<double>(k) / panels;
  return (tab.prefix[k] + gl16(bump_integrand, a, x)) / tab.total;
}

inline double bump_cdf_derivative(double x) {
  static const double total = [] {
    double t = 0.0;
    for (int k = 0; k < 64; ++k)
      t += gl16(bump_integrand, k / 64.0, (k + 1) / 64.0);
    return t;
  }();
  return bump_integrand(x) / total;
}

}  // namespace detail

/// Smooth cutoff: 0 for s <= -delta, 1 for s >= -delta/2, nondecreasing.
inline double eval_eta(double s, const SpiralParams& params) {
  return detail::bump_cdf((s + params.delta) / (0.5 * params.delta));
}

inline double eval_eta_derivative(double s, const SpiralParams& params) {
  return detail::bump_cdf_derivative((s + params.delta) / (0.5 * params.delta)) /
         (0.5 * params.delta);
}

/// G(s, t) = e^{1/s} (sin(1/s + t) - c) for s < 0, 0 for s >= 0.
inline double eval_G(double s, double t, double c = 1.25) {
  if (s >= 0.0) return 0.0;
  return std::exp(1.0 / s) * (std::sin(1.0 / s + t) - c);
}

/// Closed-form partials (G_s, G_t) for s < 0.
inline Vec grad_G(double s, double t, double c = 1.25) {
  if (s >= 0.0) throw contract_violation("grad_G: s >= 0");
  const double inv = 1.0 / s;
  const double e = std::exp(inv);
  Vec g(2);
  g[0] = -inv * inv * e * (std::sin(inv + t) + std::cos(inv + t) - c);
  g[1] = e * std::cos(inv + t);
  return g;
}

/// grad_G with the e^{1/s} factor kept in log scale; finite for all s < 0.
inline ScaledCovector grad_G_scaled(double s, double t, double c = 1.25) {
  if (s >= 0.0) throw contract_violation("grad_G_scaled: s >= 0");
  const double inv = 1.0 / s;
  ScaledCovector r;
  r.log_scale = inv;
  r.w = Vec(2);
  r.w[0] = -inv * inv * (std::sin(inv + t) + std::cos(inv + t) - c);
  r.w[1] = std::cos(inv + t);
  return r;
}

/// The spiral potential F_delta and its differential.
struct SpiralPotential {
  SpiralParams params;

  double eval(double s, double t) const {
    if (s >= 0.0) return 0.0;
    const double eta = eval_eta(s, params);
    double v = (1.0 - eta) * s;
    if (eta > 0.0) v += eta * eval_G(s, t, params.c);
    return v;
  }

  /// dF = eta'(G - s) ds + (1 - eta) ds + eta dG
  Vec differential(double s, double t) const {
    Vec d = Vec::Zero(2);
    if (s >= 0.0) return d;
    const double eta = eval_eta(s, params);
    const double deta = eval_eta_derivative(s, params);
    d[0] = (1.0 - eta);
    if (deta > 0.0) d[0] += deta * (eval_G(s, t, params.c) - s);
    if (eta > 0.0) {
      Vec dg = grad_G(s, t, params.c);
      d[0] += eta * dg[0];
      d[1] = eta * dg[1];
    }
    return d;
  }

  /// Differential with the exponentially flat factor in log scale.  On
  /// s > -delta/2 (where eta == 1) the whole covector carries e^{1/s};
  /// elsewhere |s| is bounded away from 0 and the plain form is exact.
  ScaledCovector differential_scaled(double s, double t) const {
    if (s >= 0.0) return ScaledCovector{0.0, Vec::Zero(2)};
    if (s > -0.5 * params.delta) return grad_G_scaled(s, t, params.c);
    return ScaledCovector{0.0, differential(s, t)};
  }

  /// Allocation-free variant of differential_scaled for hot loops;
  /// writes the mantissa into `w` and returns the log scale.
  double differential_scaled2(double s, double t, Eigen::Vector2d& w) const {
    if (s >= 0.0) {
      w.setZero();
      return 0.0;
    }
    if (s > -0.5 * params.delta) {
      const double inv = 1.0 / s;
      w[0] = -inv * inv *
             (std::sin(inv + t) + std::cos(inv + t) - params.c);
      w[1] = std::cos(inv + t);
      return inv;
    }
    Vec d = differential(s, t);
    w[0] = d[0];
    w[1] = d[1];
    return 0.0;
  }

  /// Critical-set certificate: dF(s^2 d_s + d_t), strictly positive for
  /// s < 0.
  double critical_bound(double s, double t) const {
    Vec d = differential(s, t);
    return s * s * d[0] + d[1];
  }

  /// Same certificate with the e^{1/s} factor in log scale, usable down
  /// to s = -1e-3 and beyond where the plain value underflows.  On the
  /// eta == 1 region s^2 G_s + G_t = e^{1/s}(c - sin(1/s + t)).
  ScaledValue critical_bound_scaled(double s, double t) const {
    if (s >= 0.0) return ScaledValue{0.0, 0.0};
    if (s > -0.5 * params.delta)
      return ScaledValue{1.0 / s, params.c - std::sin(1.0 / s + t)};
    return ScaledValue{0.0, critical_bound(s, t)};
  }

  ScalarField as_field() const {
    SpiralPotential self = *this;
    ScalarField f;
    f.eval = [self](const Vec& p) { return self.eval(p[0], p[1]); };
    f.differential = [self](const Vec& p) {
      return self.differential(p[0], p[1]);
    };
    f.differential_scaled = [self](const Vec& p) {
      return self.differential_scaled(p[0], p[1]);
    };
    return f;
  }
};

inline double eval_F_delta(double s, double t, const SpiralParams& params) {
  return SpiralPotential{params}.eval(s, t);
}

inline Vec dF_delta(double s, double t, const SpiralParams& params) {
  return SpiralPotential{params}.differential(s, t);
}

inline double critical_bound(double s, double t, const SpiralParams& params) {
  return SpiralPotential{params}.critical_bound(s, t);
}

/// Two-ended annulus profile built from F_{1/4}:
/// F_{1/4}(rho, phi) for rho > -3/4 and -F_{1/4}(-rho-1, phi) - 1 for
/// rho < -1/4; both branches equal rho on the overlap.
struct AnnulusProfile {
  SpiralPotential quarter{SpiralParams{0.25, 1.25}};

  double eval(double rho, double phi) const {
    if (rho >= -0.5) return quarter.eval(rho, phi);
    return -quarter.eval(-rho - 1.0, phi) - 1.0;
  }

  Vec differential(double rho, double phi) const {
    if (rho >= -0.5) return quarter.differential(rho, phi);
    Vec d = quarter.differential(-rho - 1.0, phi);
    d[0] = d[0];   // -F_s * d(-rho-1)/drho = +F_s
    d[1] = -d[1];
    return d;
  }

  ScaledCovector differential_scaled(double rho, double phi) const {
    if (rho >= -0.5) return quarter.differential_scaled(rho, phi);
    ScaledCovector r = quarter.differential_scaled(-rho - 1.0, phi);
    r.w[1] = -r.w[1];
    return r;
  }

  /// Allocation-free mantissa differential for hot loops; returns the
  /// log scale.
  double differential_scaled2(double rho, double phi,
                              Eigen::Vector2d& w) const {
    if (rho >= -0.5) return quarter.differential_scaled2(rho, phi, w);
    const double ls = quarter.differential_scaled2(-rho - 1.0, phi, w);
    w[1] = -w[1];
    return ls;
  }
};

inline double annulus_profile(double rho, double phi) {
  return AnnulusProfile{}.eval(rho, phi);
}

/// Diffeomorphism R x S^1 -> R^2 \ {0} carrying {-1} x S^1 and
/// {0} x S^1 to the circles |z| = r_minus and |z| = r_plus.
struct AnnulusMap {
  AnnulusParams params;

  double log_ratio() const { return std::log(params.r_plus / params.r_minus); }

  double radius(double rho) const {
    return params.r_plus * std::exp(log_ratio() * rho);
  }

  Vec forward(double rho, double phi) const {
    const double r = radius(rho);
    Vec z(2);
    z[0] = r * std::cos(phi);
    z[1] = r * std::sin(phi);
    return z;
  }

  /// Inverse via log and atan2; domain error at the origin.
  Vec inverse(double x, double y) const {
    const double r = std::hypot(x, y);
    if (r == 0.0) throw evaluation_error("AnnulusMap::inverse: origin");
    Vec rp(2);
    rp[0] = std::log(r / params.r_plus) / log_ratio();
    rp[1] = std::atan2(y, x);
    return rp;
  }
};

/// Ambient annulus potential on R^{2n}, constant in the first
/// 2(n-1) coordinates; equals the annulus profile of p^{-1}(x_n, y_n)
/// away from the puncture and the constant -1 on |z| <= r_minus.
inline ScalarField ambient_F(int n, const AnnulusParams& params) {
  if (!params.valid()) throw contract_violation("ambient_F: invalid params");
  AnnulusMap map{params};
  AnnulusProfile prof;
  const int dim = 2 * n;

  ScalarField f;
  f.eval = [map, prof, dim](const Vec& p) {
    const double x = p[dim - 2], y = p[dim - 1];
    const double r = std::hypot(x, y);
    if (r <= map.params.r_minus) return -1.0;
    Vec rp = map.inverse(x, y);
    return prof.eval(rp[0], rp[1]);
  };
  f.differential = [map, prof, dim](const Vec& p) {
    Vec d = Vec::Zero(dim);
    const double x = p[dim - 2], y = p[dim - 1];
    const double r2 = x * x + y * y;
    if (r2 <= map.params.r_minus * map.params.r_minus) return d;
    Vec rp = map.inverse(x, y);
    Vec dp = prof.differential(rp[0], rp[1]);
    const double L = map.log_ratio();
    // d rho = (x dx + y dy) / (r^2 L), d phi = (-y dx + x dy) / r^2
    d[dim - 2] = dp[0] * x / (r2 * L) - dp[1] * y / r2;
    d[dim - 1] = dp[0] * y / (r2 * L) + dp[1] * x / r2;
    return d;
  };
  return f;
}

/// Reduced plane profile: 2 (F_1(rho - log r0, theta) + log r0),
/// independent of the middle coordinates.
struct PlaneProfile {
  double r0 = 1.0;
  SpiralPotential unit{SpiralParams{1.0, 1.25}};

  double log_r0() const { return std::log(r0); }

  double eval(double theta, double rho) const {
    return 2.0 * (unit.eval(rho - log_r0(), theta) + log_r0());
  }

  /// (G_theta, G_rho)
  Vec partials(double theta, double rho) const {
    Vec d = unit.differential(rho - log_r0(), theta);
    Vec out(2);
    out[0] = 2.0 * d[1];  // theta partial
    out[1] = 2.0 * d[0];  // rho partial
    return out;
  }
};

inline double plane_profile(double theta, double rho, const PlaneParams& params) {
  return PlaneProfile{params.r0}.eval(theta, rho);
}

/// Symmetric profile of the Section 4 remark:
/// F_{eps/2}(s, t) + F_{eps/2}(-s, t + pi).
inline double two_sided_profile(double s, double t, double eps) {
  SpiralPotential half{SpiralParams{0.5 * eps, 1.25}};
  return half.eval(s, t) + half.eval(-s, t + 3.14159265358979323846);
}

}  // namespace pqflow
