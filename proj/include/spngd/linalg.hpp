#pragma once

#include <Eigen/Dense>

#include <tuple>
#include <utility>

#include "spngd/errors.hpp"

namespace spngd {

// All production arithmetic runs in 64-bit reals. Row-major storage so that
// a weight matrix W (d_out x d_in) serializes in the same order as its
// row-major vec, under which the Kronecker-factored curvature acts as
// X -> G X A.
using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Symmetric matrix held as the packed upper triangle in row-major order --
// exactly the payload the symmetry-aware collectives put on the wire, so
// packed length doubles as the communicated element count.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(Index dim)
      : dim_(dim), data_(Vector::Zero(packed_size(dim))) {}

  static Index packed_size(Index dim) { return dim * (dim + 1) / 2; }

  // Packs the upper triangle of a dense matrix. Entries below the diagonal
  // are ignored, which keeps pack(unpack(s)) bit-identical to s.
  static SymMatrix pack(const Matrix& dense);

  Matrix unpack() const;

  Index dim() const { return dim_; }
  Index size() const { return data_.size(); }

  double operator()(Index i, Index j) const { return data_[offset(i, j)]; }
  double& operator()(Index i, Index j) { return data_[offset(i, j)]; }

  const Vector& data() const { return data_; }
  Vector& data() { return data_; }

 private:
  Index offset(Index i, Index j) const {
    if (i > j) std::swap(i, j);
    return i * dim_ - i * (i - 1) / 2 + (j - i);
  }

  Index dim_ = 0;
  Vector data_;
};

// (m + damping*I)^-1 via Cholesky. Symmetric PSD input plus positive damping
// is the only supported regime; a failed factorization means the statistics
// are broken (non-finite entries, lambda <= 0 on singular input).
SymMatrix spd_inverse(const SymMatrix& m, double damping);

// Adjugate-formula inverse of [[a,b],[c,d]], returned in the same order.
std::tuple<double, double, double, double> inv2x2(double a, double b, double c,
                                                  double d);

// Applies G (x) A to the matrix-shaped vector X under row-major vec: G X A.
// Never materializes the Kronecker product.
Matrix kron_matvec(const SymMatrix& g, const SymMatrix& a, const Matrix& x);

// trace/dim -- exactly the mean eigenvalue, no decomposition needed.
double avg_eigenvalue(const SymMatrix& m);

// Frobenius norm computed on packed storage (off-diagonals weighted twice).
double frob_norm(const SymMatrix& m);

// ||a - b||_F / ||b||_F over packed storage.
double rel_frob_distance(const SymMatrix& a, const SymMatrix& b);

}  // namespace spngd
