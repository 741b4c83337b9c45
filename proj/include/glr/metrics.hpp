#ifndef GLR_METRICS_HPP
#define GLR_METRICS_HPP

// Continual-learning metrics over the train-test accuracy matrix and
// fidelity metrics between real and generated latent populations.

#include "glr/core.hpp"
#include "glr/density.hpp"
#include "glr/latent_store.hpp"

#include <functional>
#include <optional>
#include <span>

namespace glr {

// ---------------------------------------------------------------------------
// Train-test matrix

/// p(i, j) = accuracy (percent) on test set j after training session i.
/// Entries with j > i are recorded but sit outside the metric protocol.
struct TrainTestMatrix {
  Matrix values;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> defined;

  TrainTestMatrix() = default;
  explicit TrainTestMatrix(Index t) : values(Matrix::Zero(t, t)), defined(t, t) { defined.setConstant(false); }

  /// Builds a fully defined matrix from nested rows (ragged rows leave the
  /// missing tail undefined).
  static TrainTestMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    TrainTestMatrix p(static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < rows[i].size() && j < rows.size(); ++j) p.set(static_cast<Index>(i), static_cast<Index>(j), rows[i][j]);
    return p;
  }

  Index size() const { return values.rows(); }
  static bool in_protocol(Index i, Index j) { return j <= i; }

  void set(Index i, Index j, double v) {
    if (!(v >= 0.0 && v <= 100.0)) throw Error("TrainTestMatrix: accuracy outside [0, 100]");
    values(i, j) = v;
    defined(i, j) = true;
  }

  double at(Index i, Index j) const {
    if (!defined(i, j)) throw Error("TrainTestMatrix: entry (" + std::to_string(i + 1) + "," + std::to_string(j + 1) + ") undefined");
    return values(i, j);
  }

  bool lower_triangle_defined() const {
    for (Index i = 0; i < size(); ++i)
      for (Index j = 0; j <= i; ++j)
        if (!defined(i, j)) return false;
    return true;
  }
};

/// Mean of the final row.
inline double acc(const TrainTestMatrix& p) {
  const Index t = p.size();
  if (t == 0) throw Error("acc: empty matrix");
  double sum = 0.0;
  for (Index j = 0; j < t; ++j) sum += p.at(t - 1, j);
  return sum / static_cast<double>(t);
}

/// Mean over the lower triangle including the diagonal.
inline double ilm(const TrainTestMatrix& p) {
  const Index t = p.size();
  if (t == 0) throw Error("ilm: empty matrix");
  double sum = 0.0;
  for (Index i = 0; i < t; ++i)
    for (Index j = 0; j <= i; ++j) sum += p.at(i, j);
  return 2.0 * sum / static_cast<double>(t * (t + 1));
}

/// Backward transfer; nullopt (not applicable) for T < 2.
inline std::optional<double> bwt(const TrainTestMatrix& p) {
  const Index t = p.size();
  if (t < 2) return std::nullopt;
  double outer = 0.0;
  for (Index j = 0; j + 1 < t; ++j) {
    double inner = 0.0;
    for (Index i = j + 1; i < t; ++i) inner += p.at(i, j) - p.at(j, j);
    outer += inner / static_cast<double>(t - 1 - j);
  }
  return outer / static_cast<double>(t - 1);
}

struct ClMetrics {
  double acc = 0.0;
  std::optional<double> ilm;
  std::optional<double> bwt;
};

/// ACC always; ILM/BWT only when the lower triangle exists (not for joint runs).
inline ClMetrics summarize(const TrainTestMatrix& p) {
  ClMetrics m;
  m.acc = acc(p);
  if (p.lower_triangle_defined()) {
    m.ilm = ilm(p);
    m.bwt = bwt(p);
  }
  return m;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

/// Mean and population standard deviation.
inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  r.count = xs.size();
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return r;
}

// ---------------------------------------------------------------------------
// Fidelity metrics

enum class Pairing { all_pairs, index_matched };
enum class FidMode { full, diagonal };
enum class BandwidthRule { median, fixed };

namespace detail {

inline void require_sets(const Matrix& a, const Matrix& b, const char* who) {
  if (a.rows() == 0 || b.rows() == 0) throw Error(std::string(who) + ": empty set");
  if (a.cols() != b.cols()) throw Error(std::string(who) + ": dimension mismatch");
}

inline Matrix normalized_rows(const Matrix& m, const char* who) {
  Matrix out = m;
  for (Index i = 0; i < m.rows(); ++i) {
    const double norm = m.row(i).norm();
    if (norm == 0.0) throw Error(std::string(who) + ": zero vector at row " + std::to_string(i));
    out.row(i) /= norm;
  }
  return out;
}

}  // namespace detail

/// Mean cosine similarity on a percent scale.
inline double cosine_avg(const Matrix& real, const Matrix& gen, Pairing pairing = Pairing::all_pairs) {
  detail::require_sets(real, gen, "cosine_avg");
  const Matrix a = detail::normalized_rows(real, "cosine_avg");
  const Matrix b = detail::normalized_rows(gen, "cosine_avg");
  if (pairing == Pairing::index_matched) {
    if (a.rows() != b.rows()) throw Error("cosine_avg: index-matched pairing needs equal set sizes");
    return 100.0 * a.cwiseProduct(b).rowwise().sum().mean();
  }
  // mean_{i,j} <a_i, b_j> = <mean_i a_i, mean_j b_j>
  return 100.0 * a.colwise().mean().dot(b.colwise().mean());
}

/// Mean Euclidean distance over all pairs or index-matched pairs.
inline double euclidean_avg(const Matrix& real, const Matrix& gen, Pairing pairing = Pairing::all_pairs) {
  detail::require_sets(real, gen, "euclidean_avg");
  if (pairing == Pairing::index_matched) {
    if (real.rows() != gen.rows()) throw Error("euclidean_avg: index-matched pairing needs equal set sizes");
    return (real - gen).rowwise().norm().mean();
  }
  double sum = 0.0;
  for (Index i = 0; i < real.rows(); ++i) sum += (gen.rowwise() - real.row(i)).rowwise().norm().sum();
  return sum / (static_cast<double>(real.rows()) * static_cast<double>(gen.rows()));
}

inline Matrix sample_covariance(const Matrix& x) {
  const Matrix centered = x.rowwise() - x.colwise().mean();
  return (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
inline Matrix psd_sqrt(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (s + s.transpose()));
  if (eig.info() != Eigen::Success) throw Error("psd_sqrt: eigendecomposition failed");
  const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

/// Frechet distance between Gaussian fits (sample mean, sample covariance
/// with n-1) of the two sets, with ridge added to both covariances.
inline double fid(const Matrix& real, const Matrix& gen, FidMode mode = FidMode::full, double ridge = 1e-6) {
  detail::require_sets(real, gen, "fid");
  if (real.rows() < 2 || gen.rows() < 2) throw Error("fid: each set needs at least 2 samples");
  const RowVector mu1 = real.colwise().mean();
  const RowVector mu2 = gen.colwise().mean();
  const double mean_term = (mu1 - mu2).squaredNorm();
  const Index d = real.cols();
  Matrix s1 = sample_covariance(real);
  Matrix s2 = sample_covariance(gen);
  s1.diagonal().array() += ridge;
  s2.diagonal().array() += ridge;

  double trace_term = 0.0;
  if (mode == FidMode::diagonal) {
    for (Index i = 0; i < d; ++i) trace_term += s1(i, i) + s2(i, i) - 2.0 * std::sqrt(s1(i, i) * s2(i, i));
  } else {
    const Matrix r1 = psd_sqrt(s1);
    const Matrix inner = r1 * s2 * r1;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    if (eig.info() != Eigen::Success) throw Error("fid: eigendecomposition failed");
    const double cross = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    trace_term = s1.trace() + s2.trace() - 2.0 * cross;
  }
  return std::max(0.0, mean_term + trace_term);
}

struct MmdResult {
  double mmd2 = 0.0;
  double gamma = 1.0;
  bool fallback = false;  // median heuristic degenerated, gamma forced to 1
};

/// Median of all pairwise distances within the pooled set.
inline double median_pairwise_distance(const Matrix& pooled) {
  const Matrix d2 = pairwise_sq_dist(pooled, pooled);
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(pooled.rows() * (pooled.rows() - 1) / 2));
  for (Index i = 0; i < pooled.rows(); ++i)
    for (Index j = i + 1; j < pooled.rows(); ++j) dist.push_back(std::sqrt(d2(i, j)));
  if (dist.empty()) return 0.0;
  const auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  double med = *mid;
  if (dist.size() % 2 == 0) med = 0.5 * (med + *std::max_element(dist.begin(), mid));
  return med;
}

/// Squared MMD with RBF kernel exp(-|x-y|^2 / (2 gamma^2)). The default
/// biased V-statistic is exactly zero for identical inputs.
inline MmdResult mmd(const Matrix& real, const Matrix& gen, BandwidthRule rule = BandwidthRule::median,
                     double fixed_gamma = 1.0, bool unbiased = false) {
  detail::require_sets(real, gen, "mmd");
  MmdResult r;
  if (rule == BandwidthRule::fixed) {
    if (!(fixed_gamma > 0.0)) throw Error("mmd: fixed bandwidth must be > 0");
    r.gamma = fixed_gamma;
  } else {
    r.gamma = median_pairwise_distance(vstack(real, gen));
    if (!(r.gamma > 0.0)) {
      r.gamma = 1.0;
      r.fallback = true;
    }
  }
  const double inv = 1.0 / (2.0 * r.gamma * r.gamma);
  auto kernel_sum = [inv](const Matrix& a, const Matrix& b, bool drop_diagonal) {
    const Matrix k = (-inv * pairwise_sq_dist(a, b)).array().exp().matrix();
    double s = k.sum();
    if (drop_diagonal) s -= k.trace();
    return s;
  };
  const double n = static_cast<double>(real.rows());
  const double m = static_cast<double>(gen.rows());
  if (unbiased) {
    if (real.rows() < 2 || gen.rows() < 2) throw Error("mmd: unbiased estimate needs >= 2 samples per set");
    r.mmd2 = kernel_sum(real, real, true) / (n * (n - 1)) + kernel_sum(gen, gen, true) / (m * (m - 1)) -
             2.0 * kernel_sum(real, gen, false) / (n * m);
  } else {
    const double xx = kernel_sum(real, real, false) / (n * n);
    const double yy = kernel_sum(gen, gen, false) / (m * m);
    const double xy = kernel_sum(real, gen, false) / (n * m);
    r.mmd2 = std::max(0.0, xx + yy - 2.0 * xy);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Fidelity report

/// Draws n latents with a given seed.
using LatentSampler = std::function<Matrix(Index n, std::uint64_t seed)>;

inline LatentSampler sampler_for(const KdeGenerator& g) {
  return [g](Index n, std::uint64_t seed) { return kde_sample(g, n, seed); };
}

inline LatentSampler sampler_for(const GmmBank& b) {
  return [b](Index n, std::uint64_t seed) { return b.sample(n, seed); };
}

struct FidelityConfig {
  std::optional<Index> beta;  // default: smallest past train size
  BandwidthRule mmd_rule = BandwidthRule::median;
  double mmd_gamma = 1.0;
  bool mmd_unbiased = false;
  FidMode fid_mode = FidMode::full;
  Pairing pairing = Pairing::all_pairs;
};

struct FidelityRow {
  int session = 0;  // 1-based training session t
  Index beta = 0;
  double cosine = 0.0;
  double euclidean = 0.0;
  double fid = 0.0;
  double mmd = 0.0;
};

struct FidelityReport {
  std::vector<FidelityRow> sessions;
  FidelityRow average;  // session-averaged metrics (session = 0)
};

/// At every session t >= 2: beta real latents from each past train set
/// (concatenated) against (t-1) * beta draws from the generator available
/// before session t. `generators[k]` is the generator after session k + 1.
inline FidelityReport fidelity_report(const std::vector<LatentSampler>& generators,
                                      const std::vector<LatentDataset>& train_sets, const FidelityConfig& cfg,
                                      std::uint64_t seed) {
  const std::size_t sessions = train_sets.size();
  if (sessions < 2) throw Error("fidelity_report: need at least 2 sessions");
  if (generators.size() + 1 < sessions) throw Error("fidelity_report: missing generator snapshots");
  FidelityReport rep;
  for (std::size_t t = 2; t <= sessions; ++t) {
    Index smallest = std::numeric_limits<Index>::max();
    for (std::size_t p = 0; p + 1 < t; ++p) smallest = std::min(smallest, train_sets[p].size());
    Index beta = smallest;
    if (cfg.beta) {
      if (*cfg.beta < 1 || *cfg.beta > smallest)
        throw Error("fidelity_report: beta " + std::to_string(*cfg.beta) + " exceeds smallest past domain size " +
                    std::to_string(smallest));
      beta = *cfg.beta;
    }
    Matrix real(0, train_sets.front().dim());
    for (std::size_t p = 0; p + 1 < t; ++p) {
      std::vector<Index> rows(static_cast<std::size_t>(train_sets[p].size()));
      std::iota(rows.begin(), rows.end(), Index{0});
      Rng rng = make_rng(seed, {0x666964ULL, t, p});
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(static_cast<std::size_t>(beta));
      real = vstack(real, gather_rows(train_sets[p].features, rows));
    }
    const Matrix gen = generators[t - 2](static_cast<Index>(t - 1) * beta, derive_seed(seed, {0x67656eULL, t}));

    FidelityRow row;
    row.session = static_cast<int>(t);
    row.beta = beta;
    row.cosine = cosine_avg(real, gen, cfg.pairing);
    row.euclidean = euclidean_avg(real, gen, cfg.pairing);
    row.fid = fid(real, gen, cfg.fid_mode);
    row.mmd = mmd(real, gen, cfg.mmd_rule, cfg.mmd_gamma, cfg.mmd_unbiased).mmd2;
    rep.sessions.push_back(row);
  }
  const double k = static_cast<double>(rep.sessions.size());
  for (const auto& r : rep.sessions) {
    rep.average.cosine += r.cosine / k;
    rep.average.euclidean += r.euclidean / k;
    rep.average.fid += r.fid / k;
    rep.average.mmd += r.mmd / k;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// KDE vs GMM log-likelihood as domains accumulate

struct LoglikRow {
  int prefix = 0;  // number of domains included
  double kde = 0.0;
  double gmm = 0.0;
};

/// For every prefix length t: mean log density of the pooled held-out
/// latents of domains 1..t under the KDE generator after t sessions
/// (`kde_per_prefix[t-1]`) and under the first t models of the GMM bank.
inline std::vector<LoglikRow> loglik_comparison(const std::vector<LatentDataset>& held_out,
                                                const std::vector<KdeGenerator>& kde_per_prefix,
                                                const GmmBank& bank) {
  if (held_out.empty()) throw Error("loglik_comparison: no domains");
  if (kde_per_prefix.size() < held_out.size() || bank.size() < held_out.size())
    throw Error("loglik_comparison: generator count does not cover every prefix");
  std::vector<LoglikRow> rows;
  Matrix pooled(0, held_out.front().dim());
  for (std::size_t t = 1; t <= held_out.size(); ++t) {
    pooled = vstack(pooled, held_out[t - 1].features);
    GmmBank prefix_bank{std::vector<GmmModel>(bank.models.begin(), bank.models.begin() + static_cast<std::ptrdiff_t>(t))};
    rows.push_back({static_cast<int>(t), kde_log_likelihood(kde_per_prefix[t - 1], pooled),
                    prefix_bank.log_likelihood(pooled)});
  }
  return rows;
}

}  // namespace glr

#endif  // GLR_METRICS_HPP
