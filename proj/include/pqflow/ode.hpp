#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "pqflow/chart.hpp"

namespace pqflow {

using OdeRhs = std::function<Vec(double, const Vec&)>;

enum class OdeStatus { ok, stopped, step_underflow, max_steps, non_finite };

struct OdeOptions {
  double rtol = 1e-8;
  double atol = 1e-10;
  double max_step = 0.0;   // 0 = unrestricted
  double initial_step = 0.0;
  long max_steps = 2'000'000;
  /// Called after each accepted step; returning true ends integration.
  std::function<bool(double, const Vec&)> stop;
};

/// Dense output of an adaptive integration: accepted nodes with their
/// derivatives.
struct OdeSolution {
  std::vector<double> x;
  std::vector<Vec> y;
  std::vector<Vec> f;
  OdeStatus status = OdeStatus::ok;

  bool ok() const {
    return status == OdeStatus::ok || status == OdeStatus::stopped;
  }

  double x_front() const { return x.front(); }
  double x_back() const { return x.back(); }

  std::size_t segment_of(double xq) const {
    const bool fwd = x.back() >= x.front();
    std::size_t lo = 0, hi = x.size() - 1;
    while (hi - lo > 1) {
      std::size_t mid = (lo + hi) / 2;
      if (fwd ? (x[mid] <= xq) : (x[mid] >= xq))
        lo = mid;
      else
        hi = mid;
    }
    return lo;
  }

  /// Cubic Hermite interpolation between accepted nodes.
  Vec eval_hermite(double xq) const {
    std::size_t i = segment_of(xq);
    const double h = x[i + 1] - x[i];
    const double u = (xq - x[i]) / h;
    const double u2 = u * u, u3 = u2 * u;
    return (2 * u3 - 3 * u2 + 1) * y[i] + (u3 - 2 * u2 + u) * h * f[i] +
           (-2 * u3 + 3 * u2) * y[i + 1] + (u3 - u2) * h * f[i + 1];
  }

  /// Derivative of the Hermite interpolant.
  Vec eval_hermite_derivative(double xq) const {
    std::size_t i = segment_of(xq);
    const double h = x[i + 1] - x[i];
    const double u = (xq - x[i]) / h;
    const double u2 = u * u;
    return ((6 * u2 - 6 * u) * y[i] + (3 * u2 - 4 * u + 1) * h * f[i] +
            (-6 * u2 + 6 * u) * y[i + 1] + (3 * u2 - 2 * u) * h * f[i + 1]) /
           h;
  }

  /// High-accuracy evaluation: fixed-step RK4 re-integration from the
  /// nearest accepted node.  Substantially more accurate than the cubic
  /// interpolant; used wherever finite differences of the solution are
  /// taken with small stencils.
  Vec eval_precise(const OdeRhs& rhs, double xq, double substep = 5e-4) const {
    std::size_t i = segment_of(xq);
    // start from the closer end of the bracketing segment
    double x0 = x[i];
    Vec yv = y[i];
    if (i + 1 < x.size() &&
        std::abs(x[i + 1] - xq) < std::abs(x[i] - xq)) {
      x0 = x[i + 1];
      yv = y[i + 1];
    }
    double dx = xq - x0;
    if (dx == 0.0) return yv;
    int n = static_cast<int>(std::ceil(std::abs(dx) / substep));
    n = std::max(n, 1);
    const double h = dx / n;
    for (int k = 0; k < n; ++k) {
      const double xk = x0 + k * h;
      Vec k1 = rhs(xk, yv);
      Vec k2 = rhs(xk + 0.5 * h, yv + 0.5 * h * k1);
      Vec k3 = rhs(xk + 0.5 * h, yv + 0.5 * h * k2);
      Vec k4 = rhs(xk + h, yv + h * k3);
      yv += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return yv;
  }
};

/// Embedded Dormand-Prince 5(4) pair with PI step-size control
/// (safety 0.9, exponents 0.7 and 0.4 scaled by the order).
inline OdeSolution integrate_dopri5(const OdeRhs& rhs, double x0, const Vec& y0,
                                    double x_end, const OdeOptions& opt = {}) {
  static const double a21 = 1.0 / 5;
  static const double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static const double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static const double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                      a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static const double a61 = 9017.0 / 3168, a62 = -355.0 / 33,
                      a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                      a65 = -5103.0 / 18656;
  static const double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                      b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  static const double e1 = b1 - 5179.0 / 57600, e3 = b3 - 7571.0 / 16695,
                      e4 = b4 - 393.0 / 640, e5 = b5 + 92097.0 / 339200,
                      e6 = b6 - 187.0 / 2100, e7 = -1.0 / 40;

  OdeSolution sol;
  const double dir = (x_end >= x0) ? 1.0 : -1.0;
  const double span = std::abs(x_end - x0);
  double hmax = (opt.max_step > 0.0) ? opt.max_step : span;

  double x = x0;
  Vec y = y0;
  Vec f1 = rhs(x, y);
  if (!f1.allFinite()) {
    sol.status = OdeStatus::non_finite;
    return sol;
  }
  sol.x.push_back(x);
  sol.y.push_back(y);
  sol.f.push_back(f1);

  double h = opt.initial_step > 0.0
                 ? opt.initial_step
                 : std::min(hmax, std::max(1e-8, 1e-2 * span));
  double err_prev = 1.0;
  const double hmin = std::max(1e-14 * span, 1e-300);

  for (long step = 0; step < opt.max_steps; ++step) {
    if (dir * (x - x_end) >= 0.0) return sol;
    h = std::min(h, hmax);
    if (dir * (x + dir * h - x_end) > 0.0) h = std::abs(x_end - x);
    if (h < hmin) {
      sol.status = OdeStatus::step_underflow;
      return sol;
    }
    const double hd = dir * h;

    Vec k2 = rhs(x + hd * a21, y + hd * (a21 * f1));
    Vec k3 = rhs(x + hd * 0.3, y + hd * (a31 * f1 + a32 * k2));
    Vec k4 = rhs(x + hd * 0.8, y + hd * (a41 * f1 + a42 * k2 + a43 * k3));
    Vec k5 = rhs(x + hd * (8.0 / 9),
                 y + hd * (a51 * f1 + a52 * k2 + a53 * k3 + a54 * k4));
    Vec k6 = rhs(x + hd,
                 y + hd * (a61 * f1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
    Vec ynew = y + hd * (b1 * f1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    Vec k7 = rhs(x + hd, ynew);
    Vec errv = hd * (e1 * f1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

    if (!ynew.allFinite() || !k7.allFinite()) {
      sol.status = OdeStatus::non_finite;
      return sol;
    }

    double err = 0.0;
    for (int i = 0; i < y.size(); ++i) {
      const double sc =
          opt.atol + opt.rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
      const double q = errv[i] / sc;
      err += q * q;
    }
    err = std::sqrt(err / y.size());

    if (err <= 1.0) {
      x += hd;
      y = ynew;
      f1 = k7;  // FSAL
      sol.x.push_back(x);
      sol.y.push_back(y);
      sol.f.push_back(f1);
      if (opt.stop && opt.stop(x, y)) {
        sol.status = OdeStatus::stopped;
        return sol;
      }
      const double e = std::max(err, 1e-10);
      double fac = 0.9 * std::pow(e, -0.7 / 5.0) * std::pow(err_prev, 0.4 / 5.0);
      err_prev = e;
      h *= std::clamp(fac, 0.2, 5.0);
    } else {
      h *= std::max(0.2, 0.9 * std::pow(err, -1.0 / 5.0));
    }
  }
  sol.status = OdeStatus::max_steps;
  return sol;
}

}  // namespace pqflow
