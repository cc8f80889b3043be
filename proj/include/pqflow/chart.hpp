#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

namespace pqflow {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

constexpr double two_pi = 6.283185307179586476925286766559;

/// Wrap an angle to its canonical representative in [0, 2*pi).
inline double wrap_angle(double a) {
  double r = std::fmod(a, two_pi);
  if (r < 0.0) r += two_pi;
  // fmod can return exactly two_pi after the correction when a is a tiny
  // negative number
  if (r >= two_pi) r -= two_pi;
  return r;
}

/// A point in a single coordinate chart.  Coordinates listed in
/// `angular` are circle-valued; `coords` stores their continuous lifts
/// and the canonical representative in [0, 2*pi) is derived on demand.
struct ChartPoint {
  Vec coords;                 // lifted coordinates
  std::vector<int> angular;   // indices of angular coordinates

  ChartPoint() = default;
  explicit ChartPoint(Vec c, std::vector<int> ang = {})
      : coords(std::move(c)), angular(std::move(ang)) {}

  int dim() const { return static_cast<int>(coords.size()); }

  bool is_angular(int i) const {
    for (int k : angular)
      if (k == i) return true;
    return false;
  }

  /// Canonical representative of coordinate i (wrapped if angular).
  double canonical(int i) const {
    return is_angular(i) ? wrap_angle(coords[i]) : coords[i];
  }

  /// Lift of coordinate i (identical to the raw stored value).
  double lift(int i) const { return coords[i]; }

  /// Winding offset: (lift - canonical) / 2*pi, an integer for angular
  /// coordinates.
  double winding(int i) const {
    return (coords[i] - canonical(i)) / two_pi;
  }
};

}  // namespace pqflow
