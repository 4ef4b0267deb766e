#include "spngd/linalg.hpp"

#include <cmath>

namespace spngd {

SymMatrix SymMatrix::pack(const Matrix& dense) {
  if (dense.rows() != dense.cols())
    throw ShapeMismatch("pack: matrix is not square");
  SymMatrix s(dense.rows());
  Index p = 0;
  for (Index i = 0; i < s.dim_; ++i)
    for (Index j = i; j < s.dim_; ++j) s.data_[p++] = dense(i, j);
  return s;
}

Matrix SymMatrix::unpack() const {
  Matrix dense(dim_, dim_);
  Index p = 0;
  for (Index i = 0; i < dim_; ++i)
    for (Index j = i; j < dim_; ++j) {
      dense(i, j) = data_[p];
      dense(j, i) = data_[p];
      ++p;
    }
  return dense;
}

SymMatrix spd_inverse(const SymMatrix& m, double damping) {
  const Index n = m.dim();
  if (n == 0) throw ShapeMismatch("spd_inverse: empty matrix");
  Matrix dense = m.unpack();
  dense.diagonal().array() += damping;
  if (!dense.allFinite())
    throw NotPositiveDefinite("spd_inverse: non-finite entries in input");

  Eigen::LLT<Eigen::MatrixXd> llt(dense);
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefinite("spd_inverse: Cholesky factorization failed");
  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(n, n));
  if (!inv.allFinite())
    throw NotPositiveDefinite("spd_inverse: inverse has non-finite entries");

  // The solve is symmetric only up to rounding; average before repacking so
  // the packed result represents exactly what it claims to.
  Matrix sym = 0.5 * (inv + inv.transpose());
  return SymMatrix::pack(sym);
}

std::tuple<double, double, double, double> inv2x2(double a, double b, double c,
                                                  double d) {
  const double det = a * d - b * c;
  if (std::abs(det) < 1e-30)
    throw SingularBlock("inv2x2: determinant below 1e-30");
  return {d / det, -b / det, -c / det, a / det};
}

Matrix kron_matvec(const SymMatrix& g, const SymMatrix& a, const Matrix& x) {
  if (x.rows() != g.dim() || x.cols() != a.dim())
    throw ShapeMismatch("kron_matvec: X must be dim(G) x dim(A)");
  return g.unpack() * x * a.unpack();
}

double avg_eigenvalue(const SymMatrix& m) {
  if (m.dim() == 0) throw ShapeMismatch("avg_eigenvalue: empty matrix");
  double trace = 0.0;
  for (Index i = 0; i < m.dim(); ++i) trace += m(i, i);
  return trace / static_cast<double>(m.dim());
}

double frob_norm(const SymMatrix& m) {
  double acc = 0.0;
  Index p = 0;
  for (Index i = 0; i < m.dim(); ++i)
    for (Index j = i; j < m.dim(); ++j, ++p) {
      const double w = (i == j) ? 1.0 : 2.0;
      acc += w * m.data()[p] * m.data()[p];
    }
  return std::sqrt(acc);
}

double rel_frob_distance(const SymMatrix& a, const SymMatrix& b) {
  if (a.dim() != b.dim())
    throw ShapeMismatch("rel_frob_distance: dimension mismatch");
  const double ref = frob_norm(b);
  if (ref == 0.0) throw ZeroReference("rel_frob_distance: zero-norm reference");
  double acc = 0.0;
  Index p = 0;
  for (Index i = 0; i < a.dim(); ++i)
    for (Index j = i; j < a.dim(); ++j, ++p) {
      const double w = (i == j) ? 1.0 : 2.0;
      const double d = a.data()[p] - b.data()[p];
      acc += w * d * d;
    }
  return std::sqrt(acc) / ref;
}

}  // namespace spngd
