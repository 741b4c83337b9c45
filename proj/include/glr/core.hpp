#ifndef GLR_CORE_HPP
#define GLR_CORE_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace glr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

/// Single random engine used throughout; every stochastic routine takes an
/// explicit seed and builds its own engine, so results are pure functions of
/// (inputs, seed).
using Rng = std::mt19937_64;

inline constexpr const char* kEngineVersion = "0.3.0";

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mixes a base seed with tags into an independent stream seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * tags.size());
  auto push = [&words](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(base);
  for (auto t : tags) push(t);
  std::seed_seq seq(words.begin(), words.end());
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> tags = {}) {
  return Rng(derive_seed(base, tags));
}

/// Fills an n x d matrix with independent standard normal draws, row by row.
inline Matrix standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) out(i, j) = normal(rng);
  return out;
}

/// Numerically stable log(sum(exp(values))).
inline double log_sum_exp(const Eigen::Ref<const Vector>& values) {
  const double top = values.maxCoeff();
  if (!std::isfinite(top)) return top;
  return top + std::log((values.array() - top).exp().sum());
}

/// Index of the largest entry; ties resolve to the smallest index.
inline Index argmax_first(const Eigen::Ref<const RowVector>& row) {
  Index best = 0;
  for (Index j = 1; j < row.size(); ++j)
    if (row(j) > row(best)) best = j;
  return best;
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

/// Selects rows of `m` in the order given by `rows`.
inline Matrix gather_rows(const Matrix& m, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

inline Matrix vstack(const Matrix& top, const Matrix& bottom) {
  if (top.rows() == 0) return bottom;
  if (bottom.rows() == 0) return top;
  if (top.cols() != bottom.cols()) throw Error("vstack: column mismatch");
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out << top, bottom;
  return out;
}

/// Squared Euclidean distances between every row of `a` and every row of `b`.
inline Matrix pairwise_sq_dist(const Matrix& a, const Matrix& b) {
  const Vector an = a.rowwise().squaredNorm();
  const Vector bn = b.rowwise().squaredNorm();
  Matrix d = -2.0 * (a * b.transpose());
  d.colwise() += an;
  d.rowwise() += bn.transpose();
  return d.cwiseMax(0.0);
}

}  // namespace glr

#endif  // GLR_CORE_HPP
