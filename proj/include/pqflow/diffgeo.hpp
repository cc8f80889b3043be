#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pqflow/fields.hpp"

namespace pqflow {

/// Central-difference exterior derivative of a 1-form at p,
/// (d omega)(e_i, e_j) = d_i omega_j - d_j omega_i, error O(h^2).
inline Mat exterior_derivative_fd(const OneForm& omega, const Vec& p,
                                  double h = 1e-5) {
  const int n = static_cast<int>(p.size());
  Mat domega = Mat::Zero(n, n);
  // partial_i of all components at once
  Mat grad(n, n);  // grad(i, j) = d_i omega_j
  for (int i = 0; i < n; ++i) {
    Vec pp = p, pm = p;
    pp[i] += h;
    pm[i] -= h;
    Vec wp = omega(pp), wm = omega(pm);
    if (!wp.allFinite() || !wm.allFinite())
      throw evaluation_error("exterior_derivative_fd: non-finite 1-form value");
    grad.row(i) = ((wp - wm) / (2.0 * h)).transpose();
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) domega(i, j) = grad(i, j) - grad(j, i);
  return domega;
}

/// Exterior derivative of omega at p: closed form when available,
/// otherwise the finite-difference stencil.
inline Mat d_oneform(const OneForm& omega, const Vec& p, double h = 1e-5) {
  return omega.has_d() ? omega.d(p) : exterior_derivative_fd(omega, p, h);
}

namespace detail {

inline int permutation_sign(const std::vector<int>& perm) {
  int sign = 1;
  const int n = static_cast<int>(perm.size());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (perm[i] > perm[j]) sign = -sign;
  return sign;
}

}  // namespace detail

/// Evaluates lambda ^ (d lambda)^n on the coordinate basis
/// (e_0, ..., e_2n) by antisymmetrized expansion.  A nonzero value
/// certifies the contact condition at p.
inline double contact_volume(const OneForm& lambda, const Vec& p, int n,
                             double h = 1e-5) {
  const int dim = static_cast<int>(p.size());
  if (dim != 2 * n + 1)
    throw contract_violation("contact_volume: ambient dimension must be 2n+1");
  if (n > 3) throw contract_violation("contact_volume: n <= 3 required");

  const Vec lam = lambda(p);
  const Mat omega = d_oneform(lambda, p, h);

  std::vector<int> idx(dim);
  std::iota(idx.begin(), idx.end(), 0);
  double sum = 0.0;
  do {
    double term = lam[idx[0]];
    for (int k = 0; k < n; ++k) term *= omega(idx[2 * k + 1], idx[2 * k + 2]);
    if (term != 0.0) sum += detail::permutation_sign(idx) * term;
  } while (std::next_permutation(idx.begin(), idx.end()));
  // each 2-form factor contributes 1/2!, the 1-form 1/1!
  return sum / std::pow(2.0, n);
}

/// Solves d lambda(X, .) = 0, lambda(X) = 1 for the Reeb vector field.
inline Vec reeb_solve(const OneForm& lambda, const Vec& p, double h = 1e-5) {
  const int dim = static_cast<int>(p.size());
  const Vec lam = lambda(p);
  const Mat omega = d_oneform(lambda, p, h);

  Mat A(dim + 1, dim);
  A.topRows(dim) = omega;  // row i: d lambda(e_i, X) = -d lambda(X, e_i) = 0
  A.row(dim) = lam.transpose();
  Vec b = Vec::Zero(dim + 1);
  b[dim] = 1.0;
  Vec x = A.colPivHouseholderQr().solve(b);
  if ((A * x - b).norm() > 1e-10)
    throw contract_violation("reeb_solve: lambda not contact at p");
  return x;
}

/// Basis of the contact plane at p: kernel of the covector lambda(p),
/// returned as columns.
inline Mat contact_plane_basis(const Vec& lam) {
  const int dim = static_cast<int>(lam.size());
  Eigen::FullPivLU<Mat> lu(lam.transpose());
  Mat K = lu.kernel();  // dim x (dim-1)
  if (K.cols() != dim - 1)
    throw contract_violation("contact_plane_basis: lambda vanishes at p");
  return K;
}

/// Reeb vector field of e^f lambda computed from the rescaling
/// identities: solves for the section X_f of xi with
/// i_{X_f} d lambda = -df + df(X_lambda) lambda, then returns
/// e^{-f} (X_lambda - X_f).
inline Vec reeb_rescaled(const ContactData& contact, const ScalarField& f,
                         const Vec& p, double h = 1e-5) {
  const Vec lam = contact.lambda(p);
  const Mat omega = d_oneform(contact.lambda, p, h);
  const Vec X = contact.reeb(p);
  const Vec df = f.d(p);
  const Vec rhs_cov = -df + df.dot(X) * lam;

  const Mat K = contact_plane_basis(lam);
  const int m = static_cast<int>(K.cols());
  // d lambda(X_f, K_a) = rhs_cov(K_a),  X_f = K c
  Mat M(m, m);
  Vec r(m);
  for (int a = 0; a < m; ++a) {
    for (int b = 0; b < m; ++b) M(a, b) = K.col(b).dot(omega * K.col(a));
    r[a] = rhs_cov.dot(K.col(a));
  }
  Eigen::FullPivLU<Mat> lu(M);
  if (!lu.isInvertible())
    throw contract_violation("reeb_rescaled: degenerate d lambda on xi");
  Vec Xf = K * lu.solve(r);
  return std::exp(-f(p)) * (X - Xf);
}

/// R-invariant extension: matrix of J~ on R + T_pM in the basis
/// (d_a, e_0, ..., e_{d-1}) with J~ d_a = X_lambda, J~ X_lambda = -d_a,
/// J~|_xi = J.
inline Mat rinvariant_extension(const ContactData& contact, const Vec& p) {
  const int dim = static_cast<int>(p.size());
  const Vec lam = contact.lambda(p);
  const Vec X = contact.reeb(p);
  const Mat P = contact.xi_projection(p);
  const Mat J = contact.J_xi(p);

  Mat Jt = Mat::Zero(dim + 1, dim + 1);
  // column 0: image of d_a
  Jt.block(1, 0, dim, 1) = X;
  // column 1+i: image of e_i = lambda(e_i) X + pi(e_i):
  //   J~ e_i = -lambda(e_i) d_a + J pi(e_i)
  for (int i = 0; i < dim; ++i) {
    Jt(0, 1 + i) = -lam[i];
    Jt.block(1, 1 + i, dim, 1) = J * P.col(i);
  }
  return Jt;
}

/// Result of pairing a 2-form with a complex structure; asymmetry is a
/// diagnostic, not an error.
struct CompatibilityResult {
  Mat g;
  double asymmetry = 0.0;
  bool compatible = false;  // symmetric within 1e-10
};

/// g = omega(. , J .) as a matrix: G = Omega * J.
inline CompatibilityResult compatibility_metric(const Mat& omega, const Mat& J) {
  CompatibilityResult r;
  r.g = omega * J;
  r.asymmetry = (r.g - r.g.transpose()).cwiseAbs().maxCoeff();
  r.compatible = r.asymmetry <= 1e-10;
  return r;
}

/// Projection onto xi along the Reeb field: P = I - X tensor lambda.
inline Mat xi_projection_matrix(const Vec& lam, const Vec& reeb) {
  const int dim = static_cast<int>(lam.size());
  return Mat::Identity(dim, dim) - reeb * lam.transpose();
}

}  // namespace pqflow
