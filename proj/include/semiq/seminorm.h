#pragma once

#include <cstdint>
#include <functional>

#include <Eigen/Dense>

namespace semiq {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// A map R^d -> R^d, e.g. a Bellman operator.
using Operator = std::function<Vector(const Vector&)>;

enum class SemiNormKind { Span, Sup };

const char* to_string(SemiNormKind kind);

// The semi-norm p(.) in force together with its vanishing subspace E and the
// monotone norm it induces:
//   Span: p(x) = max x - min x,  E = {c 1},  ||x|| = 2 max |x_i|
//   Sup:  p(x) = max |x_i|,      E = {0},    ||x|| = max |x_i|
// With these choices p(x) = min_{e in E} ||x - e||.
class SemiNorm {
 public:
  SemiNorm(SemiNormKind kind, Eigen::Index dim);

  SemiNormKind kind() const { return kind_; }
  Eigen::Index dim() const { return dim_; }

  double operator()(const Vector& x) const;
  double induced_norm(const Vector& x) const;

  // Canonical representative of x + E. For Span the result has
  // max + min = 0, so induced_norm(result) == (*this)(x).
  Vector project_mod_e(const Vector& x) const;

  // The e in E attaining ||x - e|| = p(x).
  Vector minimizing_shift(const Vector& x) const;

  // Operator semi-norm sup_{p(x) > 0} p(Mx) / p(x). For Span this is the
  // Dobrushin-type coefficient 1/2 max_{i,j} sum_k |M_ik - M_jk|, which is
  // only finite when M maps E into E (equal row sums); otherwise +inf.
  double of_matrix(const Matrix& m) const;

 private:
  void check_dim(const Vector& x) const;

  SemiNormKind kind_;
  Eigen::Index dim_;
};

// Empirical contraction factor: max over sampled pairs (x, y), drawn
// uniformly in the sup-ball of the given radius, of p(F x - F y) / p(x - y).
// Pairs with p(x - y) < 1e-12 are skipped. A lower bound on the true factor.
double estimate_contraction(const Operator& map, const SemiNorm& norm, int num_pairs,
                            double radius, std::uint64_t seed);

}  // namespace semiq
