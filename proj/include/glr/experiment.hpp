#ifndef GLR_EXPERIMENT_HPP
#define GLR_EXPERIMENT_HPP

// Config-driven sweeps over strategies x sequences x seeds, aggregation and
// report/CSV emission.

#include "glr/continual.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace glr {

inline constexpr int kConfigSchemaVersion = 1;

/// Malformed or inconsistent experiment configuration.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// A runtime failure inside one (strategy, sequence, seed) cell.
class CellError : public Error {
 public:
  CellError(std::string cell, const std::string& what) : Error("cell " + cell + ": " + what), cell_(std::move(cell)) {}
  const std::string& cell() const { return cell_; }

 private:
  std::string cell_;
};

struct SequenceSpec {
  std::string name;
  std::vector<int> order;
};

/// A pair of manifests, or a single manifest split by stratified sampling.
struct ManifestEntry {
  std::filesystem::path train;
  std::optional<std::filesystem::path> test;
};

struct BenchmarkSource {
  std::optional<SyntheticBenchmark> synthetic;
  bool vary_data_with_seed = true;  // synthetic only: data_seed mixed with the run seed
  std::vector<ManifestEntry> manifests;
  int split_test_per_class = 50;
  std::uint64_t split_seed = 0;

  std::size_t domain_count() const {
    return synthetic ? static_cast<std::size_t>(synthetic->domains) : manifests.size();
  }
};

/// Generator-quality studies run next to the training cells.
struct EvaluationConfig {
  bool fidelity = false;
  bool loglik = false;
  int centers_per_domain = 10;
  int gmm_components = 10;
  int baseline_gmm_components = 1;
  FidelityConfig fidelity_cfg;
};

struct ExperimentConfig {
  std::string name = "experiment";
  BenchmarkSource benchmark;
  std::vector<SequenceSpec> sequences;
  std::vector<StrategyConfig> strategies;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir = "results";
  EvaluationConfig evaluation;
  std::vector<double> alpha_sweep;
  std::string source_text;  // config file bytes, echoed verbatim
};

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

using nlohmann::json;

/// Typed access to one JSON object; rejects unknown keys on finish().
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw SchemaError(path_ + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json& raw(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw SchemaError(path_ + "." + key + ": missing");
    return j_.at(key);
  }

  template <class T>
  bool get(const char* key, T& out) {
    if (!j_.contains(key)) return false;
    out = convert<T>(raw(key), path_ + "." + key);
    return true;
  }

  template <class T>
  T require(const char* key) {
    return convert<T>(raw(key), path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw SchemaError(path_ + ": unknown key '" + k + "'");
  }

  template <class T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw SchemaError(where + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw SchemaError(where + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) throw SchemaError(where + ": expected a non-negative integer");
      return v.get<std::uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw SchemaError(where + ": expected an integer");
      const auto x = v.get<long long>();
      if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max())
        throw SchemaError(where + ": integer out of range");
      return static_cast<T>(x);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw SchemaError(where + ": expected a number");
      return v.get<T>();
    } else {
      if (!v.is_array()) throw SchemaError(where + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline SyntheticBenchmark parse_synthetic(const json& j, const std::string& path) {
  SyntheticBenchmark b;
  Fields f(j, path);
  f.get("domains", b.domains);
  f.get("dim", b.dim);
  f.get("class_count", b.class_count);
  f.get("components_per_class", b.components_per_class);
  f.get("train_per_class", b.train_per_class);
  f.get("test_per_class", b.test_per_class);
  f.get("mean_scale", b.mean_scale);
  f.get("spread", b.spread);
  f.get("common_offset", b.common_offset);
  f.get("shift_scale", b.shift_scale);
  f.get("scale_jitter", b.scale_jitter);
  f.get("data_seed", b.data_seed);
  f.finish();
  try {
    b.validate();
  } catch (const Error& e) {
    throw SchemaError(path + ": " + e.what());
  }
  return b;
}

inline BenchmarkSource parse_benchmark(const json& j, const std::filesystem::path& base_dir) {
  BenchmarkSource src;
  Fields f(j, "benchmark");
  const bool syn = f.has("synthetic");
  const bool man = f.has("manifests");
  if (syn == man) throw SchemaError("benchmark: give exactly one of 'synthetic' or 'manifests'");
  if (syn) {
    src.synthetic = parse_synthetic(f.raw("synthetic"), "benchmark.synthetic");
    f.get("vary_data_with_seed", src.vary_data_with_seed);
  } else {
    const json& list = f.raw("manifests");
    if (!list.is_array() || list.empty()) throw SchemaError("benchmark.manifests: expected a non-empty array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string where = "benchmark.manifests[" + std::to_string(i) + "]";
      ManifestEntry e;
      if (list[i].is_string()) {
        e.train = base_dir / list[i].get<std::string>();
      } else {
        Fields m(list[i], where);
        e.train = base_dir / m.require<std::string>("train");
        e.test = base_dir / m.require<std::string>("test");
        m.finish();
      }
      src.manifests.push_back(std::move(e));
    }
    f.get("test_per_class", src.split_test_per_class);
    f.get("split_seed", src.split_seed);
    if (src.split_test_per_class < 1) throw SchemaError("benchmark.test_per_class: must be >= 1");
  }
  f.finish();
  return src;
}

inline StrategyConfig parse_strategy(const json& j, const std::string& path) {
  StrategyConfig s;
  Fields f(j, path);
  const auto kind = parse_strategy_kind(f.require<std::string>("kind"));
  if (!kind) throw SchemaError(path + ".kind: unknown strategy kind");
  s.kind = *kind;
  f.get("name", s.name);
  f.get("alpha", s.alpha);
  f.get("replay_fraction", s.replay_fraction);
  f.get("centers_per_domain", s.centers_per_domain);
  f.get("buffer_capacity", s.buffer_capacity);
  f.get("gmm_components", s.gmm_components);
  f.get("epochs", s.epochs);
  f.get("batch_size", s.batch_size);
  f.get("hidden_dims", s.hidden_dims);
  f.get("use_bic", s.use_bic);
  f.get("bic_k_min", s.bic_k_min);
  f.get("bic_k_max", s.bic_k_max);
  f.get("per_class_kmeans", s.per_class_kmeans);
  f.get("balance_classes", s.balance_classes);
  f.get("kmeans_max_iter", s.kmeans_max_iter);
  f.get("gmm_max_iter", s.gmm_max_iter);
  f.get("gmm_tol", s.gmm_tol);
  std::string dir;
  if (f.get("kl_direction", dir)) {
    if (dir == "teacher_student") s.kl_direction = KlDirection::teacher_student;
    else if (dir == "student_teacher") s.kl_direction = KlDirection::student_teacher;
    else throw SchemaError(path + ".kl_direction: expected teacher_student or student_teacher");
  }
  if (f.has("optimizer")) {
    Fields o(f.raw("optimizer"), path + ".optimizer");
    std::string k;
    if (o.get("kind", k)) {
      if (k == "adam") s.optimizer.kind = OptimizerKind::adam;
      else if (k == "sgd") s.optimizer.kind = OptimizerKind::sgd;
      else throw SchemaError(path + ".optimizer.kind: expected adam or sgd");
    }
    o.get("learning_rate", s.optimizer.learning_rate);
    o.get("beta1", s.optimizer.beta1);
    o.get("beta2", s.optimizer.beta2);
    o.get("epsilon", s.optimizer.epsilon);
    o.finish();
  }
  f.finish();
  for (int h : s.hidden_dims)
    if (h < 1) throw SchemaError(path + ".hidden_dims: widths must be >= 1");
  try {
    s.validate();
  } catch (const Error& e) {
    throw SchemaError(path + ": " + e.what());
  }
  return s;
}

inline EvaluationConfig parse_evaluation(const json& j) {
  EvaluationConfig e;
  Fields f(j, "evaluation");
  f.get("fidelity", e.fidelity);
  f.get("loglik", e.loglik);
  f.get("centers_per_domain", e.centers_per_domain);
  f.get("gmm_components", e.gmm_components);
  f.get("baseline_gmm_components", e.baseline_gmm_components);
  if (f.has("beta") && !f.raw("beta").is_null()) e.fidelity_cfg.beta = f.require<int>("beta");
  std::string s;
  if (f.get("mmd_bandwidth", s)) {
    if (s == "median") e.fidelity_cfg.mmd_rule = BandwidthRule::median;
    else if (s == "fixed") e.fidelity_cfg.mmd_rule = BandwidthRule::fixed;
    else throw SchemaError("evaluation.mmd_bandwidth: expected median or fixed");
  }
  f.get("mmd_gamma", e.fidelity_cfg.mmd_gamma);
  f.get("mmd_unbiased", e.fidelity_cfg.mmd_unbiased);
  if (f.get("fid_mode", s)) {
    if (s == "full") e.fidelity_cfg.fid_mode = FidMode::full;
    else if (s == "diagonal") e.fidelity_cfg.fid_mode = FidMode::diagonal;
    else throw SchemaError("evaluation.fid_mode: expected full or diagonal");
  }
  if (f.get("pairing", s)) {
    if (s == "all_pairs") e.fidelity_cfg.pairing = Pairing::all_pairs;
    else if (s == "index_matched") e.fidelity_cfg.pairing = Pairing::index_matched;
    else throw SchemaError("evaluation.pairing: expected all_pairs or index_matched");
  }
  f.finish();
  if (e.centers_per_domain < 1 || e.gmm_components < 1 || e.baseline_gmm_components < 1)
    throw SchemaError("evaluation: component counts must be >= 1");
  if (!(e.fidelity_cfg.mmd_gamma > 0.0)) throw SchemaError("evaluation.mmd_gamma: must be > 0");
  return e;
}

}  // namespace detail

/// Parses and validates a config document. `base_dir` anchors relative
/// manifest paths.
inline ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir = ".") {
  using detail::Fields;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  cfg.source_text = text;
  Fields f(j, "config");
  if (f.require<int>("schema_version") != kConfigSchemaVersion)
    throw SchemaError("config.schema_version: expected " + std::to_string(kConfigSchemaVersion));
  f.get("name", cfg.name);
  cfg.benchmark = detail::parse_benchmark(f.raw("benchmark"), base_dir);

  const std::size_t domains = cfg.benchmark.domain_count();
  const auto& seqs = f.raw("sequences");
  if (!seqs.is_array() || seqs.empty()) throw SchemaError("config.sequences: need at least one sequence");
  std::set<std::string> seq_names;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const std::string where = "config.sequences[" + std::to_string(i) + "]";
    Fields s(seqs[i], where);
    SequenceSpec spec;
    spec.name = s.require<std::string>("name");
    spec.order = s.require<std::vector<int>>("order");
    s.finish();
    auto sorted = spec.order;
    std::sort(sorted.begin(), sorted.end());
    bool permutation = sorted.size() == domains;
    for (std::size_t k = 0; permutation && k < sorted.size(); ++k) permutation = sorted[k] == static_cast<int>(k);
    if (!permutation)
      throw SchemaError(where + ".order: must be a permutation of 0.." + std::to_string(domains - 1));
    if (spec.name.empty() || spec.name == "ALL" || !seq_names.insert(spec.name).second)
      throw SchemaError(where + ".name: must be unique, non-empty and not 'ALL'");
    cfg.sequences.push_back(std::move(spec));
  }

  const auto& strats = f.raw("strategies");
  if (!strats.is_array() || strats.empty()) throw SchemaError("config.strategies: need at least one strategy");
  std::set<std::string> labels;
  for (std::size_t i = 0; i < strats.size(); ++i) {
    cfg.strategies.push_back(detail::parse_strategy(strats[i], "config.strategies[" + std::to_string(i) + "]"));
    if (!labels.insert(cfg.strategies.back().label()).second)
      throw SchemaError("config.strategies: duplicate label '" + cfg.strategies.back().label() + "'");
  }

  cfg.seeds = f.require<std::vector<std::uint64_t>>("seeds");
  if (cfg.seeds.empty()) throw SchemaError("config.seeds: need at least one seed");
  if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size())
    throw SchemaError("config.seeds: duplicate seed");

  std::string out;
  if (f.get("output_dir", out)) cfg.output_dir = out;
  if (f.has("evaluation")) cfg.evaluation = detail::parse_evaluation(f.raw("evaluation"));
  f.get("alpha_sweep", cfg.alpha_sweep);
  for (double a : cfg.alpha_sweep)
    if (!(a >= 0.0 && a <= 1.0)) throw SchemaError("config.alpha_sweep: values must lie in [0, 1]");
  f.finish();
  if ((cfg.evaluation.fidelity || cfg.evaluation.loglik) && domains < 2)
    throw SchemaError("evaluation: generator studies need at least 2 domains");
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str(), path.parent_path().empty() ? "." : path.parent_path());
}

// ---------------------------------------------------------------------------
// Data

/// Train/test domains for one run seed.
inline std::vector<DomainSplit> benchmark_domains(const BenchmarkSource& src, std::uint64_t seed) {
  std::vector<DomainSplit> out;
  if (src.synthetic) {
    SyntheticBenchmark b = *src.synthetic;
    if (src.vary_data_with_seed) b.data_seed = derive_seed(b.data_seed, {seed});
    return b.generate();
  }
  for (std::size_t i = 0; i < src.manifests.size(); ++i) {
    const auto& m = src.manifests[i];
    LatentDataset train = load_dataset(m.train);
    if (m.test) {
      out.push_back({std::move(train), load_dataset(*m.test)});
    } else {
      out.push_back(make_split(train, src.split_test_per_class, derive_seed(src.split_seed, {i})));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generator studies

/// KDE snapshots, the comparison GMM bank and the impoverished baseline bank,
/// all grown along one sequence's training sets.
struct GeneratorStudy {
  std::vector<KdeGenerator> kde_per_prefix;
  GmmBank gmm_bank;
  GmmBank baseline_bank;
};

inline GeneratorStudy generator_study(const EpisodeSequence& seq, const EvaluationConfig& ev, std::uint64_t seed) {
  GeneratorStudy st;
  KdeGenerator kde;
  for (std::size_t t = 0; t < seq.length(); ++t) {
    const auto& train = seq.episodes[t].train.features;
    const int n = static_cast<int>(train.rows());
    const std::uint64_t s = derive_seed(seed, {0x737475ULL, t});
    kde = kde_update(kde, kmeans(train, std::min(ev.centers_per_domain, n), 100, s).centers);
    st.kde_per_prefix.push_back(kde);
    st.gmm_bank.models.push_back(gmm_fit(train, std::min(ev.gmm_components, n), 100, 1e-6, s).model);
    st.baseline_bank.models.push_back(gmm_fit(train, std::min(ev.baseline_gmm_components, n), 100, 1e-6, s).model);
  }
  return st;
}

struct FidelityComparison {
  FidelityReport kde;
  FidelityReport baseline;
};

inline FidelityComparison fidelity_comparison(const EpisodeSequence& seq, const GeneratorStudy& st,
                                              const FidelityConfig& cfg, std::uint64_t seed) {
  std::vector<LatentDataset> trains;
  std::vector<LatentSampler> kde, base;
  for (std::size_t t = 0; t < seq.length(); ++t) {
    trains.push_back(seq.episodes[t].train);
    kde.push_back(sampler_for(st.kde_per_prefix[t]));
    base.push_back(sampler_for(GmmBank{std::vector<GmmModel>(
        st.baseline_bank.models.begin(), st.baseline_bank.models.begin() + static_cast<std::ptrdiff_t>(t + 1))}));
  }
  return {fidelity_report(kde, trains, cfg, seed), fidelity_report(base, trains, cfg, seed)};
}

/// Held-out pools are the test sets of the prefix domains.
inline std::vector<LoglikRow> loglik_study(const EpisodeSequence& seq, const GeneratorStudy& st) {
  std::vector<LatentDataset> held;
  for (const auto& ep : seq.episodes) held.push_back(ep.test);
  return loglik_comparison(held, st.kde_per_prefix, st.gmm_bank);
}

// ---------------------------------------------------------------------------
// Report

struct CellResult {
  std::string strategy;
  std::string sequence;
  std::uint64_t seed = 0;
  TrainTestMatrix matrix;
  ClMetrics metrics;
  double seconds = 0.0;
};

/// mean/std over seeds; NA when any contributing value is not applicable.
struct MetricAggregate {
  std::vector<std::optional<double>> values;
  std::optional<MeanStd> stats;
};

struct AggregateRow {
  std::string strategy;
  std::string sequence;  // "ALL" averages each seed over sequences first
  MetricAggregate acc, ilm, bwt;
};

struct CurvePoint {
  std::string strategy;
  std::string sequence;
  int session = 0;
  MeanStd stats;
};

struct AlphaSweepRow {
  double alpha = 0.0;
  MeanStd ilm;
  MeanStd acc;
};

struct FidelityCell {
  std::string sequence;
  std::uint64_t seed = 0;
  FidelityComparison result;
};

struct LoglikCell {
  std::string sequence;
  std::uint64_t seed = 0;
  std::vector<LoglikRow> rows;
};

struct RunReport {
  std::string config_text;
  std::vector<std::uint64_t> seeds;
  std::vector<CellResult> cells;
  std::vector<AggregateRow> aggregates;
  std::vector<CurvePoint> curves;
  std::vector<CellResult> alpha_cells;
  std::vector<AlphaSweepRow> alpha_sweep;
  std::vector<FidelityCell> fidelity;
  std::vector<LoglikCell> loglik;
  double total_seconds = 0.0;
};

inline MetricAggregate aggregate(std::vector<std::optional<double>> values) {
  MetricAggregate a;
  a.values = std::move(values);
  std::vector<double> xs;
  for (const auto& v : a.values) {
    if (!v) return a;
    xs.push_back(*v);
  }
  a.stats = mean_std(xs);
  return a;
}

namespace detail {

/// Per-seed metric averaged over sequences; NA if any sequence lacks it.
inline std::optional<double> mean_over(const std::vector<std::optional<double>>& xs) {
  double s = 0.0;
  for (const auto& x : xs) {
    if (!x) return std::nullopt;
    s += *x;
  }
  return s / static_cast<double>(xs.size());
}

}  // namespace detail

/// Aggregates, curves and the alpha-sweep table from finished cells.
inline void assemble_report(RunReport& rep, const ExperimentConfig& cfg) {
  auto find = [&](const std::vector<CellResult>& cells, const std::string& st, const std::string& sq,
                  std::uint64_t seed) -> const CellResult& {
    for (const auto& c : cells)
      if (c.strategy == st && c.sequence == sq && c.seed == seed) return c;
    throw Error("report: missing cell " + st + "/" + sq + "/" + std::to_string(seed));
  };
  using Opt = std::optional<double>;

  for (const auto& strat : cfg.strategies) {
    const std::string st = strat.label();
    for (const auto& seq : cfg.sequences) {
      std::vector<Opt> a, i, b;
      for (auto seed : cfg.seeds) {
        const auto& c = find(rep.cells, st, seq.name, seed);
        a.push_back(c.metrics.acc);
        i.push_back(c.metrics.ilm);
        b.push_back(c.metrics.bwt);
      }
      rep.aggregates.push_back({st, seq.name, aggregate(a), aggregate(i), aggregate(b)});
    }
    std::vector<Opt> a, i, b;
    for (auto seed : cfg.seeds) {
      std::vector<Opt> sa, si, sb;
      for (const auto& seq : cfg.sequences) {
        const auto& c = find(rep.cells, st, seq.name, seed);
        sa.push_back(c.metrics.acc);
        si.push_back(c.metrics.ilm);
        sb.push_back(c.metrics.bwt);
      }
      a.push_back(detail::mean_over(sa));
      i.push_back(detail::mean_over(si));
      b.push_back(detail::mean_over(sb));
    }
    rep.aggregates.push_back({st, "ALL", aggregate(a), aggregate(i), aggregate(b)});

    // accuracy on the sequence's first test set after each session
    for (const auto& seq : cfg.sequences) {
      const Index t_count = static_cast<Index>(seq.order.size());
      for (Index t = 0; t < t_count; ++t) {
        std::vector<double> xs;
        for (auto seed : cfg.seeds) {
          const auto& m = find(rep.cells, st, seq.name, seed).matrix;
          if (m.defined(t, 0)) xs.push_back(m.at(t, 0));
        }
        if (xs.size() == cfg.seeds.size()) rep.curves.push_back({st, seq.name, static_cast<int>(t + 1), mean_std(xs)});
      }
    }
  }

  for (double alpha : cfg.alpha_sweep) {
    std::vector<double> ilm_s, acc_s;
    for (auto seed : cfg.seeds) {
      double si = 0.0, sa = 0.0;
      for (const auto& seq : cfg.sequences) {
        for (const auto& c : rep.alpha_cells)
          if (c.seed == seed && c.sequence == seq.name && c.strategy == "alpha=" + nlohmann::json(alpha).dump()) {
            si += c.metrics.ilm.value_or(std::numeric_limits<double>::quiet_NaN());
            sa += c.metrics.acc;
          }
      }
      ilm_s.push_back(si / static_cast<double>(cfg.sequences.size()));
      acc_s.push_back(sa / static_cast<double>(cfg.sequences.size()));
    }
    rep.alpha_sweep.push_back({alpha, mean_std(ilm_s), mean_std(acc_s)});
  }
}

// ---------------------------------------------------------------------------
// Serialization

/// 17 significant digits, or NA.
inline std::string format_number(std::optional<double> v) {
  if (!v) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

inline std::string metrics_csv(const RunReport& rep, const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "strategy,sequence,seed_or_AGG,acc,acc_std,ilm,ilm_std,bwt,bwt_std\n";
  auto stat = [](const MetricAggregate& m) {
    return m.stats ? format_number(m.stats->mean) + "," + format_number(m.stats->std) : std::string("NA,NA");
  };
  for (const auto& strat : cfg.strategies) {
    const std::string st = strat.label();
    for (const auto& seq : cfg.sequences) {
      for (const auto& c : rep.cells)
        if (c.strategy == st && c.sequence == seq.name)
          out << st << ',' << seq.name << ',' << c.seed << ',' << format_number(c.metrics.acc) << ",NA,"
              << format_number(c.metrics.ilm) << ",NA," << format_number(c.metrics.bwt) << ",NA\n";
    }
    for (const auto& a : rep.aggregates)
      if (a.strategy == st)
        out << st << ',' << a.sequence << ",AGG," << stat(a.acc) << ',' << stat(a.ilm) << ',' << stat(a.bwt) << '\n';
  }
  return out.str();
}

inline std::string curves_csv(const RunReport& rep) {
  std::ostringstream out;
  out << "strategy,sequence,session,mean,std\n";
  for (const auto& c : rep.curves)
    out << c.strategy << ',' << c.sequence << ',' << c.session << ',' << format_number(c.stats.mean) << ','
        << format_number(c.stats.std) << '\n';
  return out.str();
}

inline std::string alpha_sweep_csv(const RunReport& rep) {
  std::ostringstream out;
  out << "alpha,ilm,ilm_std,acc,acc_std\n";
  for (const auto& r : rep.alpha_sweep)
    out << format_number(r.alpha) << ',' << format_number(r.ilm.mean) << ',' << format_number(r.ilm.std) << ','
        << format_number(r.acc.mean) << ',' << format_number(r.acc.std) << '\n';
  return out.str();
}

inline std::string fidelity_csv(const RunReport& rep) {
  std::ostringstream out;
  out << "sequence,seed,generator,session,beta,cosine,euclidean,fid,mmd\n";
  auto emit = [&](const FidelityCell& c, const char* gen, const FidelityReport& r) {
    for (const auto& row : r.sessions)
      out << c.sequence << ',' << c.seed << ',' << gen << ',' << row.session << ',' << row.beta << ','
          << format_number(row.cosine) << ',' << format_number(row.euclidean) << ',' << format_number(row.fid) << ','
          << format_number(row.mmd) << '\n';
    out << c.sequence << ',' << c.seed << ',' << gen << ",AVG,NA," << format_number(r.average.cosine) << ','
        << format_number(r.average.euclidean) << ',' << format_number(r.average.fid) << ','
        << format_number(r.average.mmd) << '\n';
  };
  for (const auto& c : rep.fidelity) {
    emit(c, "kde", c.result.kde);
    emit(c, "gmm_baseline", c.result.baseline);
  }
  return out.str();
}

inline std::string loglik_csv(const RunReport& rep) {
  std::ostringstream out;
  out << "sequence,seed,prefix,kde,gmm\n";
  for (const auto& c : rep.loglik)
    for (const auto& r : c.rows)
      out << c.sequence << ',' << c.seed << ',' << r.prefix << ',' << format_number(r.kde) << ','
          << format_number(r.gmm) << '\n';
  return out.str();
}

namespace detail {

inline nlohmann::json opt_json(std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline nlohmann::json matrix_json(const TrainTestMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < m.size(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index j = 0; j < m.size(); ++j) row.push_back(m.defined(i, j) ? nlohmann::json(m.values(i, j)) : nullptr);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json cell_json(const CellResult& c) {
  return {{"strategy", c.strategy}, {"sequence", c.sequence}, {"seed", c.seed},
          {"matrix", matrix_json(c.matrix)}, {"acc", c.metrics.acc}, {"ilm", opt_json(c.metrics.ilm)},
          {"bwt", opt_json(c.metrics.bwt)}, {"seconds", c.seconds}};
}

inline nlohmann::json aggregate_json(const MetricAggregate& a) {
  nlohmann::json values = nlohmann::json::array();
  for (const auto& v : a.values) values.push_back(opt_json(v));
  if (!a.stats) return {{"mean", nullptr}, {"std", nullptr}, {"count", a.values.size()}, {"values", values}};
  return {{"mean", a.stats->mean}, {"std", a.stats->std}, {"count", a.stats->count}, {"values", values}};
}

inline nlohmann::json fidelity_json(const FidelityReport& r) {
  auto row = [](const FidelityRow& x) {
    return nlohmann::json{{"session", x.session}, {"beta", x.beta},        {"cosine", x.cosine},
                          {"euclidean", x.euclidean}, {"fid", x.fid}, {"mmd", x.mmd}};
  };
  nlohmann::json s = nlohmann::json::array();
  for (const auto& x : r.sessions) s.push_back(row(x));
  nlohmann::json avg = row(r.average);
  avg.erase("session");
  avg.erase("beta");
  return {{"sessions", s}, {"average", avg}};
}

}  // namespace detail

inline nlohmann::json report_json(const RunReport& rep) {
  using nlohmann::json;
  json j;
  j["report_schema_version"] = 1;
  j["engine_version"] = kEngineVersion;
  j["config_text"] = rep.config_text;
  j["std_convention"] = "population (divide by n)";
  j["seeds"] = rep.seeds;
  j["cells"] = json::array();
  for (const auto& c : rep.cells) j["cells"].push_back(detail::cell_json(c));
  j["aggregates"] = json::array();
  for (const auto& a : rep.aggregates)
    j["aggregates"].push_back({{"strategy", a.strategy}, {"sequence", a.sequence},
                               {"acc", detail::aggregate_json(a.acc)}, {"ilm", detail::aggregate_json(a.ilm)},
                               {"bwt", detail::aggregate_json(a.bwt)}});
  j["curves"] = json::array();
  for (const auto& c : rep.curves)
    j["curves"].push_back({{"strategy", c.strategy}, {"sequence", c.sequence}, {"session", c.session},
                           {"mean", c.stats.mean}, {"std", c.stats.std}});
  if (!rep.alpha_sweep.empty()) {
    j["alpha_sweep"] = json::array();
    for (const auto& r : rep.alpha_sweep)
      j["alpha_sweep"].push_back({{"alpha", r.alpha}, {"ilm", {{"mean", r.ilm.mean}, {"std", r.ilm.std}}},
                                  {"acc", {{"mean", r.acc.mean}, {"std", r.acc.std}}}});
    j["alpha_cells"] = json::array();
    for (const auto& c : rep.alpha_cells) j["alpha_cells"].push_back(detail::cell_json(c));
  }
  if (!rep.fidelity.empty()) {
    j["fidelity"] = json::array();
    for (const auto& f : rep.fidelity)
      j["fidelity"].push_back({{"sequence", f.sequence}, {"seed", f.seed},
                               {"kde", detail::fidelity_json(f.result.kde)},
                               {"gmm_baseline", detail::fidelity_json(f.result.baseline)}});
  }
  if (!rep.loglik.empty()) {
    j["loglik"] = json::array();
    for (const auto& l : rep.loglik) {
      json rows = json::array();
      for (const auto& r : l.rows) rows.push_back({{"prefix", r.prefix}, {"kde", r.kde}, {"gmm", r.gmm}});
      j["loglik"].push_back({{"sequence", l.sequence}, {"seed", l.seed}, {"rows", rows}});
    }
  }
  j["timings"] = {{"total_seconds", rep.total_seconds}};
  return j;
}

// ---------------------------------------------------------------------------
// Runner

struct RunOptions {
  int jobs = 1;
  std::function<void(const std::string&)> log;  // progress lines; may be empty
};

namespace detail {

/// Runs tasks[i] for every i on `jobs` workers. On failure the exception of
/// the lowest failing index is rethrown after all workers stop.
inline void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& task) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count || failed.load()) return;
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
        failed = true;
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(count)));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int k = 0; k < n; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
  if (!out) throw Error("write failed for " + p.string());
}

}  // namespace detail

/// Executes every cell in memory. Cell results are ordered by
/// (strategy, sequence, seed) in config order regardless of `jobs`.
inline RunReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  RunReport rep;
  rep.config_text = cfg.source_text;
  rep.seeds = cfg.seeds;

  std::map<std::uint64_t, std::vector<DomainSplit>> data;
  for (auto seed : cfg.seeds) {
    try {
      data.emplace(seed, benchmark_domains(cfg.benchmark, seed));
    } catch (const Error& e) {
      throw CellError("data/seed=" + std::to_string(seed), e.what());
    }
  }
  auto sequence_for = [&](const SequenceSpec& s, std::uint64_t seed) {
    return build_sequence(data.at(seed), s.order, s.name);
  };
  std::mutex log_mu;
  auto log = [&](const std::string& line) {
    if (!opts.log) return;
    std::lock_guard<std::mutex> lock(log_mu);
    opts.log(line);
  };

  struct Job {
    StrategyConfig strategy;
    const SequenceSpec* sequence;
    std::uint64_t seed;
    bool sweep;
  };
  std::vector<Job> jobs;
  for (const auto& st : cfg.strategies)
    for (const auto& sq : cfg.sequences)
      for (auto seed : cfg.seeds) jobs.push_back({st, &sq, seed, false});
  if (!cfg.alpha_sweep.empty()) {
    StrategyConfig base;
    for (const auto& st : cfg.strategies)
      if (st.kind == StrategyKind::proposed) {
        base = st;
        break;
      }
    for (double a : cfg.alpha_sweep) {
      StrategyConfig s = base;
      s.alpha = a;
      s.name = "alpha=" + nlohmann::json(a).dump();
      for (const auto& sq : cfg.sequences)
        for (auto seed : cfg.seeds) jobs.push_back({s, &sq, seed, true});
    }
  }

  const std::size_t train_jobs = jobs.size();
  const std::size_t study_jobs =
      (cfg.evaluation.fidelity || cfg.evaluation.loglik) ? cfg.sequences.size() * cfg.seeds.size() : 0;
  std::vector<CellResult> results(train_jobs);
  std::vector<FidelityCell> fidelity(study_jobs);
  std::vector<LoglikCell> loglik(study_jobs);

  detail::parallel_for(train_jobs + study_jobs, opts.jobs, [&](std::size_t i) {
    if (i < train_jobs) {
      const Job& job = jobs[i];
      const std::string id = job.strategy.label() + "/" + job.sequence->name + "/seed=" + std::to_string(job.seed);
      try {
        const auto c0 = std::chrono::steady_clock::now();
        StrategyConfig s = job.strategy;
        s.seed = job.seed;
        const auto run = run_sequence(sequence_for(*job.sequence, job.seed), s);
        CellResult r;
        r.strategy = job.strategy.label();
        r.sequence = job.sequence->name;
        r.seed = job.seed;
        r.matrix = run.matrix;
        r.metrics = summarize(run.matrix);
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - c0).count();
        results[i] = std::move(r);
        log("done " + id + " acc=" + format_number(results[i].metrics.acc));
      } catch (const std::exception& e) {
        throw CellError(id, e.what());
      }
      return;
    }
    const std::size_t k = i - train_jobs;
    const SequenceSpec& sq = cfg.sequences[k / cfg.seeds.size()];
    const std::uint64_t seed = cfg.seeds[k % cfg.seeds.size()];
    const std::string id = "generators/" + sq.name + "/seed=" + std::to_string(seed);
    try {
      const auto seq = sequence_for(sq, seed);
      const auto st = generator_study(seq, cfg.evaluation, seed);
      if (cfg.evaluation.fidelity)
        fidelity[k] = {sq.name, seed, fidelity_comparison(seq, st, cfg.evaluation.fidelity_cfg, seed)};
      if (cfg.evaluation.loglik) loglik[k] = {sq.name, seed, loglik_study(seq, st)};
      log("done " + id);
    } catch (const std::exception& e) {
      throw CellError(id, e.what());
    }
  });

  for (std::size_t i = 0; i < train_jobs; ++i)
    (jobs[i].sweep ? rep.alpha_cells : rep.cells).push_back(std::move(results[i]));
  if (cfg.evaluation.fidelity) rep.fidelity = std::move(fidelity);
  if (cfg.evaluation.loglik) rep.loglik = std::move(loglik);
  assemble_report(rep, cfg);
  rep.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

/// Writes report.json, metrics.csv, curves.csv and the optional tables.
inline void write_report(const RunReport& rep, const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_file(dir / "report.json", report_json(rep).dump(2) + "\n");
  detail::write_file(dir / "metrics.csv", metrics_csv(rep, cfg));
  detail::write_file(dir / "curves.csv", curves_csv(rep));
  if (!rep.alpha_sweep.empty()) detail::write_file(dir / "alpha_sweep.csv", alpha_sweep_csv(rep));
  if (!rep.fidelity.empty()) detail::write_file(dir / "fidelity.csv", fidelity_csv(rep));
  if (!rep.loglik.empty()) detail::write_file(dir / "loglik.csv", loglik_csv(rep));
}

}  // namespace glr

#endif  // GLR_EXPERIMENT_HPP
