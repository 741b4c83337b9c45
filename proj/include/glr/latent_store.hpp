#ifndef GLR_LATENT_STORE_HPP
#define GLR_LATENT_STORE_HPP

// Latent datasets: CSV/manifest ingestion, synthetic domain-shift domains,
// stratified splits and episode sequencing.

#include "glr/core.hpp"

#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string_view>
#include <utility>

namespace glr {

using LatentVector = Vector;

/// Labeled latent vectors of one domain. Row i of `features` carries label
/// `labels[i]`.
struct LatentDataset {
  std::string domain_id;
  int class_count = 0;
  Matrix features;
  std::vector<int> labels;

  Index size() const { return features.rows(); }
  Index dim() const { return features.cols(); }
  bool empty() const { return features.rows() == 0; }

  std::vector<Index> indices_of(int label) const {
    std::vector<Index> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) out.push_back(static_cast<Index>(i));
    return out;
  }

  std::vector<Index> class_counts() const {
    std::vector<Index> counts(static_cast<std::size_t>(std::max(class_count, 0)), 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

  /// Throws unless shapes agree, entries are finite and labels are in range.
  /// With `require_every_class`, each declared class must have a sample.
  void validate(bool require_every_class = false) const {
    if (class_count < 1) throw Error("dataset '" + domain_id + "': class_count must be >= 1");
    if (static_cast<Index>(labels.size()) != features.rows())
      throw Error("dataset '" + domain_id + "': label count does not match row count");
    if (features.rows() > 0 && features.cols() < 1)
      throw Error("dataset '" + domain_id + "': dim must be >= 1");
    if (!features.allFinite()) throw Error("dataset '" + domain_id + "': non-finite feature");
    for (int y : labels)
      if (y < 0 || y >= class_count)
        throw Error("dataset '" + domain_id + "': label " + std::to_string(y) + " out of range");
    if (require_every_class) {
      const auto counts = class_counts();
      for (std::size_t c = 0; c < counts.size(); ++c)
        if (counts[c] == 0)
          throw Error("dataset '" + domain_id + "': class " + std::to_string(c) + " has no samples");
    }
  }

  LatentDataset subset(const std::vector<Index>& rows) const {
    LatentDataset out{domain_id, class_count, gather_rows(features, rows), {}};
    out.labels.reserve(rows.size());
    for (Index r : rows) out.labels.push_back(labels[static_cast<std::size_t>(r)]);
    return out;
  }
};

/// Concatenates datasets that share dim and class_count.
inline LatentDataset concat(const std::vector<const LatentDataset*>& parts, std::string domain_id) {
  if (parts.empty()) throw Error("concat: no datasets");
  LatentDataset out{std::move(domain_id), parts.front()->class_count, Matrix(0, parts.front()->dim()), {}};
  for (const auto* p : parts) {
    if (p->class_count != out.class_count || p->dim() != out.dim())
      throw Error("concat: datasets disagree on dim or class_count");
    out.features = vstack(out.features, p->features);
    out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV + manifest I/O

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return cells;
}

inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline std::string line_error(const std::string& file, std::size_t line, const std::string& what) {
  return file + " row " + std::to_string(line) + ": " + what;
}

}  // namespace detail

/// Reads a feature CSV (`label,f0,...,f{d-1}`). Row numbers in errors count the
/// header as row 1.
inline LatentDataset read_feature_csv(const std::filesystem::path& path, int class_count,
                                      std::string domain_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open feature file " + path.string());
  const std::string name = path.string();

  std::string line;
  if (!std::getline(in, line)) throw Error(name + ": empty file, header expected");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_commas(line);
  if (header.size() < 2 || header[0] != "label")
    throw Error(name + ": header must be 'label,f0,...'");
  for (std::size_t j = 1; j < header.size(); ++j)
    if (header[j] != "f" + std::to_string(j - 1))
      throw Error(name + ": header column " + std::to_string(j) + " must be f" + std::to_string(j - 1));
  const Index dim = static_cast<Index>(header.size() - 1);

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_commas(line);
    if (static_cast<Index>(cells.size()) != dim + 1)
      throw Error(detail::line_error(name, row, "expected " + std::to_string(dim + 1) + " columns, got " +
                                                    std::to_string(cells.size())));
    int label = 0;
    {
      const auto c = cells[0];
      const auto res = std::from_chars(c.data(), c.data() + c.size(), label);
      if (res.ec != std::errc() || res.ptr != c.data() + c.size())
        throw Error(detail::line_error(name, row, "bad label '" + std::string(c) + "'"));
    }
    if (label < 0 || label >= class_count)
      throw Error(detail::line_error(name, row, "label " + std::to_string(label) + " outside [0, " +
                                                    std::to_string(class_count) + ")"));
    labels.push_back(label);
    for (std::size_t j = 1; j < cells.size(); ++j) {
      const auto c = cells[j];
      double v = 0.0;
      const auto res = std::from_chars(c.data(), c.data() + c.size(), v);
      if (res.ec != std::errc() || res.ptr != c.data() + c.size())
        throw Error(detail::line_error(name, row, "bad feature '" + std::string(c) + "'"));
      if (!std::isfinite(v)) throw Error(detail::line_error(name, row, "non-finite feature value"));
      values.push_back(v);
    }
  }

  LatentDataset ds{std::move(domain_id), class_count, Matrix(static_cast<Index>(labels.size()), dim), std::move(labels)};
  for (Index i = 0; i < ds.features.rows(); ++i)
    for (Index j = 0; j < dim; ++j) ds.features(i, j) = values[static_cast<std::size_t>(i * dim + j)];
  return ds;
}

/// Writes a feature CSV using shortest round-trip decimal encoding.
inline void write_feature_csv(const LatentDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "label";
  for (Index j = 0; j < ds.dim(); ++j) out << ",f" << j;
  out << '\n';
  for (Index i = 0; i < ds.size(); ++i) {
    out << ds.labels[static_cast<std::size_t>(i)];
    for (Index j = 0; j < ds.dim(); ++j) out << ',' << detail::format_double(ds.features(i, j));
    out << '\n';
  }
}

/// Loads a dataset through its JSON manifest
/// `{ "domain_id": ..., "class_count": ..., "features_csv": <path relative to manifest> }`.
inline LatentDataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw Error("cannot open manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(manifest_path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("domain_id") || !j.contains("class_count") || !j.contains("features_csv"))
    throw Error(manifest_path.string() + ": manifest needs domain_id, class_count, features_csv");
  const auto domain_id = j.at("domain_id").get<std::string>();
  const int class_count = j.at("class_count").get<int>();
  if (class_count < 1) throw Error(manifest_path.string() + ": class_count must be >= 1");
  const auto csv = manifest_path.parent_path() / j.at("features_csv").get<std::string>();
  return read_feature_csv(csv, class_count, domain_id);
}

/// Writes `<stem>.csv` next to the manifest and the manifest itself.
inline void save_dataset(const LatentDataset& ds, const std::filesystem::path& manifest_path) {
  const auto csv_name = manifest_path.stem().string() + ".csv";
  write_feature_csv(ds, manifest_path.parent_path() / csv_name);
  nlohmann::json j{{"domain_id", ds.domain_id}, {"class_count", ds.class_count}, {"features_csv", csv_name}};
  std::ofstream out(manifest_path);
  if (!out) throw Error("cannot write " + manifest_path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic domains

/// x' = scale * R x + shift, with R a seeded Haar-random rotation (identity
/// when no seed is given).
struct DomainTransform {
  std::optional<std::uint64_t> rotation_seed;
  Vector shift;
  double scale = 1.0;
};

/// Orthogonal matrix from the QR factorisation of a seeded Gaussian matrix,
/// with column signs fixed so the distribution is Haar.
inline Matrix random_rotation(Index dim, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x726f74ULL});
  const Matrix g = standard_normal(dim, dim, rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(dim, dim);
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < dim; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

/// Class-conditional Gaussian mixture plus a domain transform.
struct DomainSpec {
  std::string domain_id = "synthetic";
  int class_count = 3;
  int dim = 2;
  int components_per_class = 2;
  /// (class_count * components_per_class) x dim; row c*k + j is component j of class c.
  Matrix component_means;
  double spread = 1.0;
  DomainTransform transform;
  int train_per_class = 200;
  int test_per_class = 50;

  void validate() const {
    if (class_count < 1) throw Error("DomainSpec: class_count must be >= 1");
    if (dim < 1) throw Error("DomainSpec: dim must be >= 1");
    if (components_per_class < 1) throw Error("DomainSpec: components_per_class must be >= 1");
    if (component_means.rows() != class_count * components_per_class || component_means.cols() != dim)
      throw Error("DomainSpec: component_means must be (class_count*components_per_class) x dim");
    if (!(spread > 0.0) || !std::isfinite(spread)) throw Error("DomainSpec: spread must be > 0");
    if (!(transform.scale > 0.0)) throw Error("DomainSpec: scale factor must be > 0");
    if (transform.shift.size() != 0 && transform.shift.size() != dim)
      throw Error("DomainSpec: shift vector length must equal dim");
    if (train_per_class < 1 || test_per_class < 0) throw Error("DomainSpec: bad per-class counts");
  }

  Matrix rotation() const {
    return transform.rotation_seed ? random_rotation(dim, *transform.rotation_seed)
                                   : Matrix::Identity(dim, dim);
  }

  /// Applies the domain transform to each row of `points`.
  Matrix apply_transform(const Matrix& points) const {
    Matrix out = transform.scale * (points * rotation().transpose());
    if (transform.shift.size() == dim) out.rowwise() += transform.shift.transpose();
    return out;
  }

  Matrix transformed_means() const { return apply_transform(component_means); }
};

/// Draws (train_per_class + test_per_class) samples per class, ordered by
/// class. Each sample picks one of its class components uniformly.
inline LatentDataset synthesize_domain(const DomainSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = make_rng(seed, {0x73796eULL});
  std::uniform_int_distribution<int> pick(0, spec.components_per_class - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int per_class = spec.train_per_class + spec.test_per_class;
  const Index n = static_cast<Index>(per_class) * spec.class_count;

  Matrix raw(n, spec.dim);
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(n));
  Index row = 0;
  for (int c = 0; c < spec.class_count; ++c) {
    for (int i = 0; i < per_class; ++i, ++row) {
      const Index comp = static_cast<Index>(c) * spec.components_per_class + pick(rng);
      for (Index j = 0; j < spec.dim; ++j) raw(row, j) = spec.component_means(comp, j) + spec.spread * normal(rng);
      labels.push_back(c);
    }
  }
  return LatentDataset{spec.domain_id, spec.class_count, spec.apply_transform(raw), std::move(labels)};
}

struct DomainSplit {
  LatentDataset train;
  LatentDataset test;
};

/// Stratified split without replacement. Both halves keep input order.
inline DomainSplit make_split(const LatentDataset& ds, int test_per_class, std::uint64_t seed) {
  ds.validate();
  if (test_per_class < 0) throw Error("make_split: test_per_class must be >= 0");
  Rng rng = make_rng(seed, {0x73706cULL});
  std::vector<Index> train_rows;
  std::vector<Index> test_rows;
  for (int c = 0; c < ds.class_count; ++c) {
    auto rows = ds.indices_of(c);
    if (static_cast<int>(rows.size()) <= test_per_class)
      throw Error("make_split: class " + std::to_string(c) + " of '" + ds.domain_id + "' has " +
                  std::to_string(rows.size()) + " samples, need more than " + std::to_string(test_per_class));
    std::shuffle(rows.begin(), rows.end(), rng);
    test_rows.insert(test_rows.end(), rows.begin(), rows.begin() + test_per_class);
    train_rows.insert(train_rows.end(), rows.begin() + test_per_class, rows.end());
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(test_rows.begin(), test_rows.end());
  return {ds.subset(train_rows), ds.subset(test_rows)};
}

/// Subsamples every class down to the smallest class count.
inline LatentDataset balance_classes(const LatentDataset& ds, std::uint64_t seed) {
  const auto counts = ds.class_counts();
  const Index smallest = *std::min_element(counts.begin(), counts.end());
  Rng rng = make_rng(seed, {0x62616cULL});
  std::vector<Index> keep;
  for (int c = 0; c < ds.class_count; ++c) {
    auto rows = ds.indices_of(c);
    std::shuffle(rows.begin(), rows.end(), rng);
    keep.insert(keep.end(), rows.begin(), rows.begin() + smallest);
  }
  std::sort(keep.begin(), keep.end());
  return ds.subset(keep);
}

// ---------------------------------------------------------------------------
// Episode sequences

struct EpisodeSequence {
  std::string name;
  std::vector<DomainSplit> episodes;

  std::size_t length() const { return episodes.size(); }
  Index dim() const { return episodes.front().train.dim(); }
  int class_count() const { return episodes.front().train.class_count; }
};

/// Orders the given domains. `order` holds distinct indices into `domains`.
inline EpisodeSequence build_sequence(const std::vector<DomainSplit>& domains, const std::vector<int>& order,
                                      std::string name = "sequence") {
  if (order.empty()) throw Error("build_sequence: empty order");
  std::vector<bool> used(domains.size(), false);
  EpisodeSequence seq{std::move(name), {}};
  for (int idx : order) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= domains.size())
      throw Error("build_sequence: order index " + std::to_string(idx) + " out of range");
    if (used[static_cast<std::size_t>(idx)]) throw Error("build_sequence: order repeats index " + std::to_string(idx));
    used[static_cast<std::size_t>(idx)] = true;
    seq.episodes.push_back(domains[static_cast<std::size_t>(idx)]);
  }
  const auto& first = seq.episodes.front().train;
  for (const auto& ep : seq.episodes) {
    for (const auto* part : {&ep.train, &ep.test}) {
      if (part->class_count != first.class_count || (part->size() > 0 && part->dim() != first.dim()))
        throw Error("build_sequence: domain '" + part->domain_id + "' disagrees on dim or class_count");
    }
    ep.train.validate(true);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Standard synthetic benchmark

/// Parameters of the synthetic domain-shift benchmark. Component means are
/// drawn N(0, mean_scale^2 I) once and shared by all domains; every domain
/// then gets its own rotation, a shift of common_offset plus
/// N(0, shift_scale^2 I), and a scale drawn uniformly from
/// [1 - scale_jitter, 1 + scale_jitter].
struct SyntheticBenchmark {
  int domains = 4;
  int dim = 64;
  int class_count = 3;
  int components_per_class = 2;
  int train_per_class = 200;
  int test_per_class = 50;
  double mean_scale = 1.0;
  double spread = 0.9;
  double common_offset = 2.0;
  double shift_scale = 0.25;
  double scale_jitter = 0.1;
  std::uint64_t data_seed = 2024;

  void validate() const {
    if (domains < 1 || dim < 1 || class_count < 2 || components_per_class < 1)
      throw Error("synthetic benchmark: invalid sizes");
    if (train_per_class < 1 || test_per_class < 1) throw Error("synthetic benchmark: invalid per-class counts");
    if (!(spread > 0) || !(mean_scale > 0) || shift_scale < 0 || scale_jitter < 0 || scale_jitter >= 1)
      throw Error("synthetic benchmark: invalid scale parameters");
  }

  std::vector<DomainSpec> domain_specs() const {
    validate();
    Rng rng = make_rng(data_seed, {0x62656eULL});
    const Matrix means = mean_scale * standard_normal(static_cast<Index>(class_count) * components_per_class, dim, rng);
    std::uniform_real_distribution<double> scale_draw(1.0 - scale_jitter, 1.0 + scale_jitter);
    std::vector<DomainSpec> specs;
    for (int t = 0; t < domains; ++t) {
      DomainSpec s;
      s.domain_id = "D" + std::to_string(t + 1);
      s.class_count = class_count;
      s.dim = dim;
      s.components_per_class = components_per_class;
      s.component_means = means;
      s.spread = spread;
      s.train_per_class = train_per_class;
      s.test_per_class = test_per_class;
      s.transform.rotation_seed = derive_seed(data_seed, {0x726f74ULL, static_cast<std::uint64_t>(t)});
      s.transform.shift = Vector::Constant(dim, common_offset) + shift_scale * standard_normal(dim, 1, rng).col(0);
      s.transform.scale = scale_draw(rng);
      specs.push_back(std::move(s));
    }
    return specs;
  }

  /// Synthesizes every domain and splits it into train/test.
  std::vector<DomainSplit> generate() const {
    std::vector<DomainSplit> out;
    const auto specs = domain_specs();
    for (std::size_t t = 0; t < specs.size(); ++t) {
      const auto full = synthesize_domain(specs[t], derive_seed(data_seed, {0x646f6dULL, t}));
      out.push_back(make_split(full, test_per_class, derive_seed(data_seed, {0x73706cULL, t})));
    }
    return out;
  }
};

}  // namespace glr

#endif  // GLR_LATENT_STORE_HPP
