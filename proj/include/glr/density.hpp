#ifndef GLR_DENSITY_HPP
#define GLR_DENSITY_HPP

// Latent generators: K-means compression with BIC model selection, the
// incremental isotropic KDE generator, and diagonal-covariance GMMs.

#include "glr/core.hpp"

#include <json.hpp>

#include <numbers>
#include <optional>

namespace glr {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // ln(2*pi)

// ---------------------------------------------------------------------------
// K-means

struct KMeansResult {
  Matrix centers;                   // K x d
  std::vector<Index> assignments;   // per point
  double sse = 0.0;
  int k = 0;
  int iterations = 0;
  std::vector<double> sse_history;  // SSE after each assignment step
};

namespace detail {

inline void require_points(const Matrix& points, const char* who) {
  if (points.rows() == 0 || points.cols() == 0) throw Error(std::string(who) + ": empty point set");
  if (!points.allFinite()) throw Error(std::string(who) + ": non-finite point");
}

/// k-means++ seeding: first center uniform, then D^2-weighted draws.
inline Matrix kmeanspp_seed(const Matrix& points, int k, Rng& rng) {
  const Index n = points.rows();
  Matrix centers(k, points.cols());
  std::uniform_int_distribution<Index> uniform(0, n - 1);
  std::vector<bool> chosen(static_cast<std::size_t>(n), false);
  Index first = uniform(rng);
  centers.row(0) = points.row(first);
  chosen[static_cast<std::size_t>(first)] = true;

  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = (points.row(i) - centers.row(0)).squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Index next = 0;
    if (total > 0.0) {
      std::discrete_distribution<Index> draw(d2.begin(), d2.end());
      next = draw(rng);
    } else {
      // Fewer distinct points than clusters: take any unused point.
      std::vector<Index> unused;
      for (Index i = 0; i < n; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) unused.push_back(i);
      std::uniform_int_distribution<std::size_t> pick(0, unused.size() - 1);
      next = unused[pick(rng)];
    }
    chosen[static_cast<std::size_t>(next)] = true;
    centers.row(c) = points.row(next);
    for (Index i = 0; i < n; ++i) {
      const double d = (points.row(i) - centers.row(c)).squaredNorm();
      auto& cur = d2[static_cast<std::size_t>(i)];
      if (d < cur) cur = d;
    }
  }
  return centers;
}

/// Nearest-center assignment, ties to the lower center index. Returns SSE.
inline double assign_nearest(const Matrix& points, const Matrix& centers, std::vector<Index>& assignments) {
  double sse = 0.0;
  for (Index i = 0; i < points.rows(); ++i) {
    Index best = 0;
    double best_d = (points.row(i) - centers.row(0)).squaredNorm();
    for (Index c = 1; c < centers.rows(); ++c) {
      const double d = (points.row(i) - centers.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    assignments[static_cast<std::size_t>(i)] = best;
    sse += best_d;
  }
  return sse;
}

inline double assigned_sse(const Matrix& points, const Matrix& centers, const std::vector<Index>& assignments) {
  double sse = 0.0;
  for (Index i = 0; i < points.rows(); ++i)
    sse += (points.row(i) - centers.row(assignments[static_cast<std::size_t>(i)])).squaredNorm();
  return sse;
}

}  // namespace detail

/// Lloyd's algorithm from k-means++ seeding. Stops at an assignment fixpoint
/// or after `max_iter` assignment steps. Empty clusters keep their center.
inline KMeansResult kmeans(const Matrix& points, int k, int max_iter, std::uint64_t seed) {
  detail::require_points(points, "kmeans");
  const Index n = points.rows();
  if (k <= 0) throw Error("kmeans: K must be >= 1");
  if (k > n) throw Error("kmeans: K=" + std::to_string(k) + " exceeds point count " + std::to_string(n));
  if (max_iter < 1) throw Error("kmeans: max_iter must be >= 1");

  Rng rng = make_rng(seed, {0x6b6dULL});
  KMeansResult res;
  res.k = k;
  res.centers = detail::kmeanspp_seed(points, k, rng);
  res.assignments.assign(static_cast<std::size_t>(n), -1);

  std::vector<Index> next(static_cast<std::size_t>(n));
  for (int iter = 0; iter < max_iter; ++iter) {
    const double sse = detail::assign_nearest(points, res.centers, next);
    res.sse_history.push_back(sse);
    res.iterations = iter + 1;
    const bool unchanged = next == res.assignments;
    res.assignments = next;
    if (unchanged) break;

    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<Index> counts(static_cast<std::size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
      const Index c = res.assignments[static_cast<std::size_t>(i)];
      sums.row(c) += points.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0)
        res.centers.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  res.sse = detail::assigned_sse(points, res.centers, res.assignments);
  return res;
}

/// Spherical-Gaussian BIC of a K-means fit with shared ML variance
/// SSE / (n d):  n d ln(SSE / (n d)) + K (d + 1) ln n.  A perfect fit
/// (SSE = 0) scores -infinity.
inline double kmeans_bic(double sse, Index n, Index d, int k) {
  const double nd = static_cast<double>(n * d);
  const double fit = sse > 0.0 ? nd * std::log(sse / nd) : -std::numeric_limits<double>::infinity();
  return fit + static_cast<double>(k) * static_cast<double>(d + 1) * std::log(static_cast<double>(n));
}

struct BicEntry {
  int k = 0;
  double bic = 0.0;
  KMeansResult fit;
};

struct BicSelection {
  int k_star = 0;
  std::vector<BicEntry> entries;
};

/// Fits K-means for every K in [k_min, k_max] and picks the BIC minimiser,
/// preferring the smaller K on ties.
inline BicSelection bic_select_k(const Matrix& points, int k_min, int k_max, std::uint64_t seed, int max_iter = 100) {
  detail::require_points(points, "bic_select_k");
  if (k_min < 1 || k_min > k_max) throw Error("bic_select_k: empty or invalid K range");
  if (k_max > points.rows()) throw Error("bic_select_k: k_max exceeds point count");
  BicSelection sel;
  double best = std::numeric_limits<double>::infinity();
  for (int k = k_min; k <= k_max; ++k) {
    auto fit = kmeans(points, k, max_iter, derive_seed(seed, {static_cast<std::uint64_t>(k)}));
    const double bic = kmeans_bic(fit.sse, points.rows(), points.cols(), k);
    if (sel.entries.empty() || bic < best) {
      best = bic;
      sel.k_star = k;
    }
    sel.entries.push_back({k, bic, std::move(fit)});
  }
  return sel;
}

// ---------------------------------------------------------------------------
// KDE generator

/// Silverman's rule for an isotropic kernel in d dimensions:
/// mean per-dimension sample std (n-1) times (4 / ((d+2) n))^(1/(d+4)).
inline double silverman_bandwidth(const Matrix& points) {
  detail::require_points(points, "silverman_bandwidth");
  const Index n = points.rows();
  const Index d = points.cols();
  if (n < 2) throw Error("silverman_bandwidth: need at least 2 points");
  const RowVector mean = points.colwise().sum() / static_cast<double>(n);
  double sigma_sum = 0.0;
  for (Index j = 0; j < d; ++j) {
    const double ss = (points.col(j).array() - mean(j)).square().sum();
    sigma_sum += std::sqrt(ss / static_cast<double>(n - 1));
  }
  if (sigma_sum == 0.0) throw Error("silverman_bandwidth: all dimensions have zero variance");
  const double sigma_bar = sigma_sum / static_cast<double>(d);
  const double factor = std::pow(4.0 / (static_cast<double>(d + 2) * static_cast<double>(n)),
                                 1.0 / static_cast<double>(d + 4));
  return sigma_bar * factor;
}

/// Isotropic Gaussian KDE over retained cluster centers of all tasks seen.
struct KdeGenerator {
  Matrix support;                     // N x d
  double bandwidth = 0.0;
  std::vector<Index> per_task_counts;

  Index size() const { return support.rows(); }
  Index dim() const { return support.cols(); }
  bool empty() const { return support.rows() == 0; }
};

/// Appends one task's centers and recomputes the bandwidth over the union.
inline KdeGenerator kde_update(const KdeGenerator& prev, const Matrix& new_centers) {
  if (new_centers.rows() == 0) throw Error("kde_update: no new centers");
  if (!prev.empty() && prev.dim() != new_centers.cols())
    throw Error("kde_update: dimension mismatch (" + std::to_string(prev.dim()) + " vs " +
                std::to_string(new_centers.cols()) + ")");
  KdeGenerator next;
  next.support = vstack(prev.support, new_centers);
  next.per_task_counts = prev.per_task_counts;
  next.per_task_counts.push_back(new_centers.rows());
  next.bandwidth = next.size() >= 2 ? silverman_bandwidth(next.support) : 0.0;
  return next;
}

/// Each draw: a uniformly chosen support row plus bandwidth * N(0, I).
inline Matrix kde_sample(const KdeGenerator& gen, Index n, std::uint64_t seed) {
  if (gen.empty()) throw Error("kde_sample: empty generator");
  Rng rng = make_rng(seed, {0x6b6465ULL});
  std::uniform_int_distribution<Index> pick(0, gen.size() - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(n, gen.dim());
  for (Index i = 0; i < n; ++i) {
    const Index s = pick(rng);
    for (Index j = 0; j < gen.dim(); ++j) out(i, j) = gen.support(s, j) + gen.bandwidth * normal(rng);
  }
  return out;
}

/// Per-point log density of the KDE.
inline Vector kde_log_density(const KdeGenerator& gen, const Matrix& points) {
  if (gen.empty()) throw Error("kde_log_likelihood: empty generator");
  if (points.rows() == 0) throw Error("kde_log_likelihood: no evaluation points");
  if (points.cols() != gen.dim()) throw Error("kde_log_likelihood: dimension mismatch");
  if (!(gen.bandwidth > 0.0)) throw Error("kde_log_likelihood: bandwidth must be positive");
  const double h2 = gen.bandwidth * gen.bandwidth;
  const double norm = -std::log(static_cast<double>(gen.size())) -
                      0.5 * static_cast<double>(gen.dim()) * (kLog2Pi + std::log(h2));
  Vector out(points.rows());
  Vector terms(gen.size());
  for (Index i = 0; i < points.rows(); ++i) {
    for (Index s = 0; s < gen.size(); ++s) terms(s) = -(points.row(i) - gen.support.row(s)).squaredNorm() / (2.0 * h2);
    out(i) = norm + log_sum_exp(terms);
  }
  return out;
}

/// Mean log-likelihood of `points` under the KDE.
inline double kde_log_likelihood(const KdeGenerator& gen, const Matrix& points) {
  return kde_log_density(gen, points).mean();
}

// ---------------------------------------------------------------------------
// Diagonal GMM

struct GmmModel {
  Vector weights;    // M
  Matrix means;      // M x d
  Matrix variances;  // M x d, diagonal covariances

  Index components() const { return means.rows(); }
  Index dim() const { return means.cols(); }

  void validate() const {
    if (means.rows() == 0) throw Error("GmmModel: no components");
    if (weights.size() != means.rows() || variances.rows() != means.rows() || variances.cols() != means.cols())
      throw Error("GmmModel: inconsistent shapes");
    if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-9)
      throw Error("GmmModel: weights must lie on the simplex");
    if ((variances.array() < 0.0).any()) throw Error("GmmModel: negative variance");
  }
};

struct GmmFit {
  GmmModel model;
  std::vector<double> log_likelihood_history;  // mean log-likelihood per E-step
  int iterations = 0;
  bool converged = false;
  double variance_floor = 0.0;
};

/// Per-point, per-component joint log density log(w_k N(x; mu_k, diag(v_k))).
inline Matrix gmm_component_log_density(const GmmModel& model, const Matrix& points) {
  const Index m = model.components();
  Matrix out(points.rows(), m);
  for (Index k = 0; k < m; ++k) {
    const double w = model.weights(k);
    const Eigen::ArrayXd var = model.variances.row(k).transpose().array();
    if ((var <= 0.0).any()) throw Error("gmm: log density needs strictly positive variances");
    const double log_norm = (w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity()) -
                            0.5 * (static_cast<double>(model.dim()) * kLog2Pi + var.log().sum());
    const RowVector inv = (1.0 / var).matrix().transpose();
    for (Index i = 0; i < points.rows(); ++i) {
      const double q = ((points.row(i) - model.means.row(k)).array().square() * inv.array()).sum();
      out(i, k) = log_norm - 0.5 * q;
    }
  }
  return out;
}

inline Vector gmm_log_density(const GmmModel& model, const Matrix& points) {
  if (points.rows() == 0) throw Error("gmm_log_likelihood: no evaluation points");
  if (points.cols() != model.dim()) throw Error("gmm_log_likelihood: dimension mismatch");
  const Matrix joint = gmm_component_log_density(model, points);
  Vector out(points.rows());
  for (Index i = 0; i < points.rows(); ++i) out(i) = log_sum_exp(joint.row(i).transpose());
  return out;
}

/// Mean log-likelihood of `points` under the mixture.
inline double gmm_log_likelihood(const GmmModel& model, const Matrix& points) {
  return gmm_log_density(model, points).mean();
}

/// EM for a diagonal GMM. Seeds means with k-means++, initialises weights and
/// variances from the induced hard partition, and floors every variance at
/// floor_ratio times the average per-dimension data variance.
inline GmmFit gmm_fit(const Matrix& points, int components, int max_iter, double tol, std::uint64_t seed,
                      double floor_ratio = 1e-6) {
  detail::require_points(points, "gmm_fit");
  const Index n = points.rows();
  const Index d = points.cols();
  if (components <= 0) throw Error("gmm_fit: component count must be >= 1");
  if (components > n) throw Error("gmm_fit: more components than points");
  if (max_iter < 1) throw Error("gmm_fit: max_iter must be >= 1");

  const RowVector data_mean = points.colwise().mean();
  const RowVector data_var = (points.rowwise() - data_mean).array().square().colwise().mean();
  double floor = floor_ratio * data_var.mean();
  if (!(floor > 0.0)) floor = 1e-12;

  GmmFit fit;
  fit.variance_floor = floor;
  GmmModel& g = fit.model;
  const int m = components;
  {
    Rng rng = make_rng(seed, {0x676d6dULL});
    g.means = detail::kmeanspp_seed(points, m, rng);
    std::vector<Index> assign(static_cast<std::size_t>(n));
    detail::assign_nearest(points, g.means, assign);
    g.weights = Vector::Zero(m);
    g.variances = Matrix::Zero(m, d);
    Matrix sums = Matrix::Zero(m, d);
    for (Index i = 0; i < n; ++i) {
      const Index k = assign[static_cast<std::size_t>(i)];
      g.weights(k) += 1.0;
      sums.row(k) += points.row(i);
    }
    for (Index k = 0; k < m; ++k)
      if (g.weights(k) > 0) g.means.row(k) = sums.row(k) / g.weights(k);
    for (Index i = 0; i < n; ++i) {
      const Index k = assign[static_cast<std::size_t>(i)];
      g.variances.row(k) += (points.row(i) - g.means.row(k)).array().square().matrix();
    }
    for (Index k = 0; k < m; ++k) {
      if (g.weights(k) >= 2)
        g.variances.row(k) /= g.weights(k);
      else
        g.variances.row(k) = data_var;
    }
    g.variances = g.variances.cwiseMax(floor);
    g.weights /= static_cast<double>(n);
  }

  Matrix resp(n, m);
  for (int iter = 0; iter < max_iter; ++iter) {
    // E-step
    const Matrix joint = gmm_component_log_density(g, points);
    double ll = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double lse = log_sum_exp(joint.row(i).transpose());
      ll += lse;
      resp.row(i) = (joint.row(i).array() - lse).exp().matrix();
    }
    ll /= static_cast<double>(n);
    fit.iterations = iter + 1;
    const bool done = !fit.log_likelihood_history.empty() && std::abs(ll - fit.log_likelihood_history.back()) < tol;
    fit.log_likelihood_history.push_back(ll);
    if (done) {
      fit.converged = true;
      break;
    }
    // M-step
    const Vector nk = resp.colwise().sum().transpose();
    for (Index k = 0; k < m; ++k) {
      if (nk(k) <= 0.0) continue;  // dead component keeps its parameters at zero weight
      const RowVector mu = (resp.col(k).transpose() * points) / nk(k);
      RowVector var = (resp.col(k).transpose() * (points.rowwise() - mu).array().square().matrix()) / nk(k);
      g.means.row(k) = mu;
      g.variances.row(k) = var.cwiseMax(floor);
    }
    g.weights = nk / nk.sum();
  }
  return fit;
}

/// Draws a component by weight, then a diagonal Gaussian sample.
inline Matrix gmm_sample(const GmmModel& model, Index n, std::uint64_t seed) {
  model.validate();
  Rng rng = make_rng(seed, {0x67736dULL});
  std::discrete_distribution<Index> pick(model.weights.data(), model.weights.data() + model.weights.size());
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(n, model.dim());
  for (Index i = 0; i < n; ++i) {
    const Index k = pick(rng);
    for (Index j = 0; j < model.dim(); ++j)
      out(i, j) = model.means(k, j) + std::sqrt(model.variances(k, j)) * normal(rng);
  }
  return out;
}

/// One GMM per past domain; sampling and density treat the domains as a
/// uniform mixture.
struct GmmBank {
  std::vector<GmmModel> models;

  bool empty() const { return models.empty(); }
  std::size_t size() const { return models.size(); }
  Index dim() const { return models.front().dim(); }

  Matrix sample(Index n, std::uint64_t seed) const {
    if (models.empty()) throw Error("GmmBank::sample: empty bank");
    Rng rng = make_rng(seed, {0x62616eULL});
    std::uniform_int_distribution<std::size_t> pick(0, models.size() - 1);
    std::vector<Index> per(models.size(), 0);
    std::vector<std::size_t> owner(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      owner[static_cast<std::size_t>(i)] = pick(rng);
      ++per[owner[static_cast<std::size_t>(i)]];
    }
    std::vector<Matrix> draws;
    for (std::size_t b = 0; b < models.size(); ++b) draws.push_back(gmm_sample(models[b], per[b], derive_seed(seed, {b})));
    Matrix out(n, dim());
    std::vector<Index> cursor(models.size(), 0);
    for (Index i = 0; i < n; ++i) {
      const auto b = owner[static_cast<std::size_t>(i)];
      out.row(i) = draws[b].row(cursor[b]++);
    }
    return out;
  }

  Vector log_density(const Matrix& points) const {
    if (models.empty()) throw Error("GmmBank::log_density: empty bank");
    Matrix per(points.rows(), static_cast<Index>(models.size()));
    for (std::size_t b = 0; b < models.size(); ++b) per.col(static_cast<Index>(b)) = gmm_log_density(models[b], points);
    Vector out(points.rows());
    const double log_m = std::log(static_cast<double>(models.size()));
    for (Index i = 0; i < points.rows(); ++i) out(i) = log_sum_exp(per.row(i).transpose()) - log_m;
    return out;
  }

  double log_likelihood(const Matrix& points) const { return log_density(points).mean(); }
};

// ---------------------------------------------------------------------------
// JSON (nlohmann writes doubles in shortest round-trip form, so these are lossless)

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, Index cols_hint = 0) {
  if (!j.is_array()) throw Error("expected a nested array");
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows > 0 ? static_cast<Index>(j.at(0).size()) : cols_hint;
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const auto& row = j.at(static_cast<std::size_t>(i));
    if (static_cast<Index>(row.size()) != cols) throw Error("ragged nested array");
    for (Index c = 0; c < cols; ++c) m(i, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

}  // namespace detail

inline nlohmann::json to_json(const KdeGenerator& g) {
  return {{"type", "kde"},
          {"format_version", 1},
          {"dim", g.dim()},
          {"bandwidth", g.bandwidth},
          {"per_task_counts", g.per_task_counts},
          {"support", detail::matrix_to_json(g.support)}};
}

inline KdeGenerator kde_from_json(const nlohmann::json& j) {
  if (j.value("type", "") != "kde") throw Error("not a KDE generator document");
  KdeGenerator g;
  g.bandwidth = j.at("bandwidth").get<double>();
  g.per_task_counts = j.at("per_task_counts").get<std::vector<Index>>();
  g.support = detail::matrix_from_json(j.at("support"), j.value("dim", Index{0}));
  Index total = 0;
  for (auto c : g.per_task_counts) total += c;
  if (total != g.size()) throw Error("KDE document: per_task_counts do not sum to support rows");
  return g;
}

inline nlohmann::json to_json(const GmmModel& g) {
  return {{"type", "gmm"},
          {"format_version", 1},
          {"weights", std::vector<double>(g.weights.data(), g.weights.data() + g.weights.size())},
          {"means", detail::matrix_to_json(g.means)},
          {"variances", detail::matrix_to_json(g.variances)}};
}

inline GmmModel gmm_from_json(const nlohmann::json& j) {
  if (j.value("type", "") != "gmm") throw Error("not a GMM document");
  GmmModel g;
  const auto w = j.at("weights").get<std::vector<double>>();
  g.weights = Eigen::Map<const Vector>(w.data(), static_cast<Index>(w.size()));
  g.means = detail::matrix_from_json(j.at("means"));
  g.variances = detail::matrix_from_json(j.at("variances"));
  g.validate();
  return g;
}

}  // namespace glr

#endif  // GLR_DENSITY_HPP
