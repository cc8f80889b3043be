#pragma once

#include <functional>
#include <optional>
#include <stdexcept>
#include <utility>

#include "pqflow/chart.hpp"

namespace pqflow {

struct evaluation_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct contract_violation : std::logic_error {
  using std::logic_error::logic_error;
};

/// A value stored as exp(log_scale) * mantissa, for quantities whose
/// natural magnitude underflows double precision (e.g. e^{1/s} factors
/// near s = 0^-).
struct ScaledValue {
  double log_scale = 0.0;
  double value = 0.0;

  double to_double() const { return std::exp(log_scale) * value; }
};

/// A covector of the form exp(log_scale) * w with w of moderate size.
struct ScaledCovector {
  double log_scale = 0.0;
  Vec w;

  Vec to_vec() const { return std::exp(log_scale) * w; }
};

/// Smooth real function on a chart with its closed-form differential.
struct ScalarField {
  std::function<double(const Vec&)> eval;
  std::function<Vec(const Vec&)> differential;
  /// Optional log-scaled differential for fields with flat exponential
  /// tails; defaults to wrapping `differential` with zero scale.
  std::function<ScaledCovector(const Vec&)> differential_scaled;

  double operator()(const Vec& p) const { return eval(p); }

  Vec d(const Vec& p) const { return differential(p); }

  ScaledCovector d_scaled(const Vec& p) const {
    if (differential_scaled) return differential_scaled(p);
    return ScaledCovector{0.0, differential(p)};
  }
};

/// A 1-form on a chart; `d_closed_form`, when present, returns the
/// exterior derivative as an antisymmetric matrix in the coordinate
/// basis, d_ij = (d omega)(e_i, e_j).
struct OneForm {
  std::function<Vec(const Vec&)> eval;
  std::function<Mat(const Vec&)> d_closed_form;  // may be empty

  Vec operator()(const Vec& p) const { return eval(p); }

  bool has_d() const { return static_cast<bool>(d_closed_form); }

  Mat d(const Vec& p) const {
    if (!d_closed_form) throw contract_violation("OneForm: no closed-form d");
    return d_closed_form(p);
  }
};

/// Symmetric positive definite matrix field with its inverse.
struct MetricField {
  std::function<Mat(const Vec&)> g;
  std::function<Mat(const Vec&)> g_inv;
};

/// Pointwise square matrix field with J^2 = -I on the relevant bundle.
struct AlmostComplexStructure {
  std::function<Mat(const Vec&)> J;

  Mat operator()(const Vec& p) const { return J(p); }
};

/// Contact form with its Reeb field, projection onto the contact plane
/// along the Reeb field, and a compatible complex structure on the
/// contact plane (represented as an ambient matrix annihilating the
/// Reeb direction).
struct ContactData {
  OneForm lambda;
  std::function<Vec(const Vec&)> reeb;
  std::function<Mat(const Vec&)> xi_projection;
  AlmostComplexStructure J_xi;
};

}  // namespace pqflow
