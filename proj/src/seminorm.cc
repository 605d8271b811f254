#include "semiq/seminorm.h"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "semiq/rng.h"

namespace semiq {

const char* to_string(SemiNormKind kind) {
  return kind == SemiNormKind::Span ? "span" : "sup";
}

SemiNorm::SemiNorm(SemiNormKind kind, Eigen::Index dim) : kind_(kind), dim_(dim) {
  if (dim <= 0) throw std::invalid_argument("SemiNorm: dimension must be positive");
}

void SemiNorm::check_dim(const Vector& x) const {
  if (x.size() != dim_) {
    throw std::invalid_argument("SemiNorm: expected length " + std::to_string(dim_) +
                                ", got " + std::to_string(x.size()));
  }
}

double SemiNorm::operator()(const Vector& x) const {
  check_dim(x);
  if (kind_ == SemiNormKind::Span) return x.maxCoeff() - x.minCoeff();
  return x.cwiseAbs().maxCoeff();
}

double SemiNorm::induced_norm(const Vector& x) const {
  check_dim(x);
  const double sup = x.cwiseAbs().maxCoeff();
  return kind_ == SemiNormKind::Span ? 2.0 * sup : sup;
}

Vector SemiNorm::minimizing_shift(const Vector& x) const {
  check_dim(x);
  if (kind_ == SemiNormKind::Sup) return Vector::Zero(dim_);
  const double c = 0.5 * (x.maxCoeff() + x.minCoeff());
  return Vector::Constant(dim_, c);
}

Vector SemiNorm::project_mod_e(const Vector& x) const {
  return x - minimizing_shift(x);
}

double SemiNorm::of_matrix(const Matrix& m) const {
  if (m.rows() != dim_ || m.cols() != dim_) {
    throw std::invalid_argument("SemiNorm::of_matrix: dimension mismatch");
  }
  if (kind_ == SemiNormKind::Sup) return m.cwiseAbs().rowwise().sum().maxCoeff();

  const Vector row_sums = m.rowwise().sum();
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if (row_sums.maxCoeff() - row_sums.minCoeff() > 1e-12 * scale * static_cast<double>(dim_)) {
    return std::numeric_limits<double>::infinity();
  }
  double worst = 0.0;
  for (Eigen::Index i = 0; i < dim_; ++i) {
    for (Eigen::Index j = i + 1; j < dim_; ++j) {
      worst = std::max(worst, (m.row(i) - m.row(j)).cwiseAbs().sum());
    }
  }
  return 0.5 * worst;
}

double estimate_contraction(const Operator& map, const SemiNorm& norm, int num_pairs,
                            double radius, std::uint64_t seed) {
  if (num_pairs < 1) throw std::invalid_argument("estimate_contraction: num_pairs must be >= 1");
  if (!(radius > 0.0)) throw std::invalid_argument("estimate_contraction: radius must be > 0");

  const Eigen::Index d = norm.dim();
  CounterRng rng(stream_key({seed, 0xc0117ac7ULL}));
  Vector x(d), y(d);
  double beta = 0.0;
  for (int k = 0; k < num_pairs; ++k) {
    for (Eigen::Index i = 0; i < d; ++i) x[i] = rng.uniform(-radius, radius);
    for (Eigen::Index i = 0; i < d; ++i) y[i] = rng.uniform(-radius, radius);
    const double denom = norm(x - y);
    if (denom < 1e-12) continue;
    const Vector fx = map(x);
    const Vector fy = map(y);
    if (fx.size() != d || fy.size() != d) {
      throw std::invalid_argument("estimate_contraction: map output has wrong dimension");
    }
    beta = std::max(beta, norm(fx - fy) / denom);
  }
  return beta;
}

}  // namespace semiq
