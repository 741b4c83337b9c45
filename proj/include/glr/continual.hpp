#ifndef GLR_CONTINUAL_HPP
#define GLR_CONTINUAL_HPP

// Episode loop for domain-incremental learning: replay strategies, hybrid
// batch assembly, teacher pseudo-labelling and generator maintenance.

#include "glr/classifier.hpp"
#include "glr/density.hpp"
#include "glr/latent_store.hpp"
#include "glr/metrics.hpp"

#include <functional>
#include <optional>
#include <string_view>
#include <variant>

namespace glr {

enum class StrategyKind { proposed, glrcl_gmm, latent_buffer, naive, joint, dst_only, glr_only };

inline constexpr std::array<std::pair<StrategyKind, std::string_view>, 7> kStrategyNames{{
    {StrategyKind::proposed, "proposed"},
    {StrategyKind::glrcl_gmm, "glrcl_gmm"},
    {StrategyKind::latent_buffer, "latent_buffer"},
    {StrategyKind::naive, "naive"},
    {StrategyKind::joint, "joint"},
    {StrategyKind::dst_only, "dst_only"},
    {StrategyKind::glr_only, "glr_only"},
}};

inline std::string to_string(StrategyKind k) {
  for (const auto& [kind, name] : kStrategyNames)
    if (kind == k) return std::string(name);
  return "unknown";
}

inline std::optional<StrategyKind> parse_strategy_kind(std::string_view s) {
  for (const auto& [kind, name] : kStrategyNames)
    if (name == s) return kind;
  return std::nullopt;
}

struct StrategyConfig {
  std::string name;  // report label; empty means the kind name
  StrategyKind kind = StrategyKind::proposed;
  double alpha = 0.1;
  double replay_fraction = 0.5;
  int centers_per_domain = 10;
  int buffer_capacity = 40;
  int gmm_components = 10;
  int epochs = 30;
  int batch_size = 64;
  OptimizerSettings optimizer;
  KlDirection kl_direction = KlDirection::teacher_student;
  std::vector<int> hidden_dims = kDefaultHiddenDims;
  bool use_bic = false;  // pick the per-domain center count by BIC instead of centers_per_domain
  int bic_k_min = 2;
  int bic_k_max = 20;
  bool per_class_kmeans = false;
  bool balance_classes = false;
  int kmeans_max_iter = 100;
  int gmm_max_iter = 100;
  double gmm_tol = 1e-6;
  std::uint64_t seed = 0;

  std::string label() const { return name.empty() ? to_string(kind) : name; }

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("strategy '" + label() + "': alpha must lie in [0, 1]");
    if (!(replay_fraction >= 0.0 && replay_fraction <= 1.0))
      throw Error("strategy '" + label() + "': replay_fraction must lie in [0, 1]");
    if (centers_per_domain < 1 || buffer_capacity < 0 || gmm_components < 1)
      throw Error("strategy '" + label() + "': capacities must be positive");
    if (epochs < 1 || batch_size < 1) throw Error("strategy '" + label() + "': epochs and batch_size must be >= 1");
    if (!(optimizer.learning_rate > 0.0)) throw Error("strategy '" + label() + "': learning rate must be > 0");
    if (use_bic && (bic_k_min < 1 || bic_k_min > bic_k_max)) throw Error("strategy '" + label() + "': bad BIC range");
  }

  bool uses_kde() const { return kind == StrategyKind::proposed || kind == StrategyKind::glr_only; }
};

// ---------------------------------------------------------------------------
// Replay memory

/// Reservoir sample of (latent, true label) pairs over every past training
/// stream.
struct LatentBuffer {
  int capacity = 0;
  Matrix features;
  std::vector<int> labels;
  long long seen = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  bool empty() const { return labels.empty(); }

  void add_stream(const LatentDataset& ds, Rng& rng) {
    if (features.cols() != ds.dim()) features.resize(0, ds.dim());
    for (Index i = 0; i < ds.size(); ++i) {
      ++seen;
      const int y = ds.labels[static_cast<std::size_t>(i)];
      if (size() < capacity) {
        features.conservativeResize(size() + 1, ds.dim());
        features.row(size()) = ds.features.row(i);
        labels.push_back(y);
      } else if (capacity > 0) {
        std::uniform_int_distribution<long long> slot(0, seen - 1);
        const long long j = slot(rng);
        if (j < capacity) {
          features.row(static_cast<Index>(j)) = ds.features.row(i);
          labels[static_cast<std::size_t>(j)] = y;
        }
      }
    }
  }
};

/// Whatever a strategy carries between episodes. Only the member matching
/// the strategy kind is populated.
struct ReplayMemory {
  KdeGenerator kde;
  GmmBank gmm;
  LatentBuffer buffer;
};

/// Non-owning view of the replay source used for one batch.
using ReplaySource = std::variant<std::monostate, std::reference_wrapper<const KdeGenerator>,
                                  std::reference_wrapper<const GmmBank>, std::reference_wrapper<const LatentBuffer>>;

// ---------------------------------------------------------------------------
// Batches

/// Teacher argmax labels for generated latents.
inline std::vector<int> pseudo_label(const MlpClassifier& teacher, const Matrix& latents) {
  return predict(teacher, latents);
}

/// ceil(replay_fraction * batch_size), robust to representation error.
inline Index generated_count(int batch_size, double replay_fraction) {
  return static_cast<Index>(std::ceil(replay_fraction * batch_size - 1e-9));
}

struct HybridBatch {
  Matrix features;  // real rows first, then generated rows
  std::vector<int> labels;
  std::optional<Matrix> teacher_logits;
  Index generated = 0;
};

/// Completes a batch of real current-task rows with generated ones.
/// Generated latents from a KDE or GMM bank are labelled by the teacher's
/// argmax; buffer rows keep their stored labels. Teacher logits cover the
/// whole batch when a teacher is given. `real_teacher_logits`, if set, holds
/// precomputed teacher logits for the real rows.
inline HybridBatch assemble_hybrid_batch(const Matrix& real, const std::vector<int>& real_labels,
                                         const ReplaySource& source, const MlpClassifier* teacher, int batch_size,
                                         double replay_fraction, std::uint64_t seed,
                                         const Matrix* real_teacher_logits = nullptr, Workspace* scratch = nullptr) {
  if (!(replay_fraction >= 0.0 && replay_fraction <= 1.0)) throw Error("assemble_hybrid_batch: bad replay_fraction");
  if (static_cast<Index>(real_labels.size()) != real.rows()) throw Error("assemble_hybrid_batch: label count mismatch");
  const Index n_gen = generated_count(batch_size, replay_fraction);
  HybridBatch batch;
  batch.generated = n_gen;
  Matrix generated(0, real.cols());
  std::vector<int> gen_labels;
  bool needs_pseudo_labels = false;

  if (n_gen > 0) {
    if (std::holds_alternative<std::monostate>(source))
      throw Error("assemble_hybrid_batch: replay requested but no generator exists yet (use replay_fraction = 0 in the first episode)");
    if (const auto* kde = std::get_if<std::reference_wrapper<const KdeGenerator>>(&source)) {
      if (kde->get().empty()) throw Error("assemble_hybrid_batch: empty KDE generator");
      generated = kde_sample(kde->get(), n_gen, seed);
      needs_pseudo_labels = true;
    } else if (const auto* bank = std::get_if<std::reference_wrapper<const GmmBank>>(&source)) {
      generated = bank->get().sample(n_gen, seed);
      needs_pseudo_labels = true;
    } else {
      const LatentBuffer& buf = std::get<std::reference_wrapper<const LatentBuffer>>(source).get();
      if (buf.empty()) throw Error("assemble_hybrid_batch: empty replay buffer");
      Rng rng = make_rng(seed, {0x627566ULL});
      std::uniform_int_distribution<Index> pick(0, buf.size() - 1);
      generated.resize(n_gen, buf.features.cols());
      for (Index i = 0; i < n_gen; ++i) {
        const Index r = pick(rng);
        generated.row(i) = buf.features.row(r);
        gen_labels.push_back(buf.labels[static_cast<std::size_t>(r)]);
      }
    }
    if (needs_pseudo_labels && teacher == nullptr)
      throw Error("assemble_hybrid_batch: generated latents need a teacher for pseudo-labels");
  }

  batch.features = vstack(real, generated);
  batch.labels = real_labels;
  if (teacher) {
    auto run = [&](const Matrix& x) { return scratch ? forward(*teacher, x, *scratch) : forward(*teacher, x); };
    if (real_teacher_logits) {
      if (real_teacher_logits->rows() != real.rows() || real_teacher_logits->cols() != teacher->class_count())
        throw Error("assemble_hybrid_batch: precomputed teacher logits shape mismatch");
      Matrix logits(batch.features.rows(), teacher->class_count());
      logits.topRows(real.rows()) = *real_teacher_logits;
      if (generated.rows() > 0) logits.bottomRows(generated.rows()) = run(generated);
      batch.teacher_logits = std::move(logits);
    } else {
      batch.teacher_logits = run(batch.features);
    }
    if (needs_pseudo_labels)
      for (Index i = real.rows(); i < batch.features.rows(); ++i)
        batch.labels.push_back(static_cast<int>(argmax_first(batch.teacher_logits->row(i))));
  }
  if (!needs_pseudo_labels) batch.labels.insert(batch.labels.end(), gen_labels.begin(), gen_labels.end());
  return batch;
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeOutcome {
  MlpClassifier model;
  ReplayMemory memory;
  std::vector<double> accuracy_row;  // filled by run_sequence
  LossBreakdown last_epoch_loss;     // batch-averaged over the final epoch
};

/// Per-domain cluster centers retained by the KDE generator.
inline Matrix domain_centers(const LatentDataset& train, const StrategyConfig& cfg, std::uint64_t seed) {
  auto centers_of = [&](const Matrix& pts, int k, std::uint64_t s) {
    if (cfg.use_bic) {
      const int hi = std::min<int>(cfg.bic_k_max, static_cast<int>(pts.rows()));
      const int lo = std::min(cfg.bic_k_min, hi);
      const auto sel = bic_select_k(pts, lo, hi, s, cfg.kmeans_max_iter);
      return sel.entries[static_cast<std::size_t>(sel.k_star - lo)].fit.centers;
    }
    return kmeans(pts, std::min<int>(k, static_cast<int>(pts.rows())), cfg.kmeans_max_iter, s).centers;
  };
  if (!cfg.per_class_kmeans) return centers_of(train.features, cfg.centers_per_domain, seed);

  Matrix out(0, train.dim());
  const int c = train.class_count;
  for (int y = 0; y < c; ++y) {
    const auto rows = train.indices_of(y);
    if (rows.empty()) continue;
    const int share = cfg.centers_per_domain / c + (y < cfg.centers_per_domain % c ? 1 : 0);
    if (share == 0 && !cfg.use_bic) continue;
    out = vstack(out, centers_of(gather_rows(train.features, rows), std::max(share, 1),
                                 derive_seed(seed, {static_cast<std::uint64_t>(y)})));
  }
  return out;
}

namespace detail {

enum SeedTag : std::uint64_t {
  kInitTag = 0x696e6974,
  kShuffleTag = 0x73687566,
  kReplayTag = 0x72706c79,
  kMemoryTag = 0x6d656d6f,
  kBalanceTag = 0x62616c61,
};

}  // namespace detail

/// One training session. `student` is the starting point (the teacher's
/// parameters from episode 2 on); the teacher is never modified. With no
/// teacher the objective is plain cross-entropy on current data.
inline EpisodeOutcome train_episode(const MlpClassifier& student, const MlpClassifier* teacher,
                                    const LatentDataset& train_data, const ReplayMemory& memory,
                                    const StrategyConfig& cfg, std::size_t episode) {
  cfg.validate();
  if (train_data.empty()) throw Error("train_episode: empty training set");
  if (train_data.dim() != student.input_dim()) throw Error("train_episode: data dim does not match model");

  const LatentDataset train = cfg.balance_classes
                                  ? balance_classes(train_data, derive_seed(cfg.seed, {detail::kBalanceTag, episode}))
                                  : train_data;
  const bool has_teacher = teacher != nullptr;
  const StrategyKind kind = cfg.kind;

  double alpha = 0.0;
  double replay_fraction = 0.0;
  ReplaySource source;
  if (has_teacher) {
    switch (kind) {
      case StrategyKind::proposed:
        alpha = cfg.alpha;
        replay_fraction = cfg.replay_fraction;
        source = std::cref(memory.kde);
        break;
      case StrategyKind::glr_only:
        replay_fraction = cfg.replay_fraction;
        source = std::cref(memory.kde);
        break;
      case StrategyKind::glrcl_gmm:
        alpha = cfg.alpha;
        replay_fraction = cfg.replay_fraction;
        source = std::cref(memory.gmm);
        break;
      case StrategyKind::latent_buffer:
        if (memory.buffer.capacity == 0 || memory.buffer.empty())
          throw Error("train_episode: latent_buffer strategy has an empty buffer after episode 1 (capacity " +
                      std::to_string(cfg.buffer_capacity) + ")");
        replay_fraction = cfg.replay_fraction;
        source = std::cref(memory.buffer);
        break;
      case StrategyKind::dst_only:
        alpha = cfg.alpha;
        break;
      case StrategyKind::naive:
      case StrategyKind::joint:
        break;
    }
  }
  const bool wants_teacher =
      alpha > 0.0 || (replay_fraction > 0.0 && kind != StrategyKind::latent_buffer);
  const MlpClassifier* batch_teacher = has_teacher && wants_teacher ? teacher : nullptr;

  EpisodeOutcome out{student, memory, {}, {}};
  OptimizerState opt = make_optimizer(cfg.optimizer);
  const Index n = train.size();
  const Index n_gen = replay_fraction > 0.0 ? generated_count(cfg.batch_size, replay_fraction) : 0;
  const Index n_real = cfg.batch_size - n_gen;
  const Index batches_per_epoch = n_real > 0 ? (n + n_real - 1) / n_real : (n + cfg.batch_size - 1) / cfg.batch_size;

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng shuffle_rng = make_rng(cfg.seed, {detail::kShuffleTag, episode});
  std::uint64_t batch_counter = 0;
  Workspace student_ws, teacher_ws;
  const std::optional<Matrix> teacher_train =
      batch_teacher ? std::optional<Matrix>(forward(*batch_teacher, train.features)) : std::nullopt;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossBreakdown epoch_loss;
    for (Index b = 0; b < batches_per_epoch; ++b) {
      std::vector<Index> rows;
      if (n_real > 0) {
        const Index begin = b * n_real;
        const Index end = std::min(n, begin + n_real);
        rows.assign(order.begin() + begin, order.begin() + end);
      }
      std::vector<int> labels;
      labels.reserve(rows.size());
      for (Index r : rows) labels.push_back(train.labels[static_cast<std::size_t>(r)]);
      const Matrix real_logits = teacher_train ? gather_rows(*teacher_train, rows) : Matrix();
      const HybridBatch batch =
          assemble_hybrid_batch(gather_rows(train.features, rows), labels, source, batch_teacher, cfg.batch_size,
                                replay_fraction, derive_seed(cfg.seed, {detail::kReplayTag, episode, batch_counter++}),
                                teacher_train ? &real_logits : nullptr, &teacher_ws);
      const Matrix* t_logits = (alpha > 0.0 && batch.teacher_logits) ? &*batch.teacher_logits : nullptr;
      const auto loss =
          loss_and_grad(out.model, batch.features, batch.labels, t_logits, alpha, cfg.kl_direction, student_ws);
      optimizer_step(out.model, student_ws.grads, opt);
      epoch_loss.total += loss.total;
      epoch_loss.ce += loss.ce;
      epoch_loss.kld += loss.kld;
    }
    const double k = static_cast<double>(batches_per_epoch);
    out.last_epoch_loss = {epoch_loss.total / k, epoch_loss.ce / k, epoch_loss.kld / k, alpha};
  }

  const std::uint64_t mem_seed = derive_seed(cfg.seed, {detail::kMemoryTag, episode});
  switch (kind) {
    case StrategyKind::proposed:
    case StrategyKind::glr_only:
      out.memory.kde = kde_update(out.memory.kde, domain_centers(train, cfg, mem_seed));
      break;
    case StrategyKind::glrcl_gmm: {
      const int m = std::min<int>(cfg.gmm_components, static_cast<int>(train.size()));
      out.memory.gmm.models.push_back(gmm_fit(train.features, m, cfg.gmm_max_iter, cfg.gmm_tol, mem_seed).model);
      break;
    }
    case StrategyKind::latent_buffer: {
      out.memory.buffer.capacity = cfg.buffer_capacity;
      Rng rng = make_rng(mem_seed);
      out.memory.buffer.add_stream(train, rng);
      break;
    }
    default:
      break;
  }
  return out;
}

struct SequenceRun {
  TrainTestMatrix matrix;
  std::vector<ReplayMemory> memory_after_session;  // one per session (empty for joint)
  MlpClassifier final_model;
  std::vector<LossBreakdown> episode_losses;
};

/// Trains the sequence episode by episode and evaluates on every test set
/// after each session. Joint training fits the union once and fills only the
/// final row.
inline SequenceRun run_sequence(const EpisodeSequence& seq, const StrategyConfig& cfg) {
  cfg.validate();
  const std::size_t t_count = seq.length();
  if (t_count == 0) throw Error("run_sequence: empty sequence");
  if (cfg.kind == StrategyKind::latent_buffer && cfg.buffer_capacity == 0 && t_count > 1)
    throw Error("run_sequence: latent_buffer with zero capacity cannot replay");

  SequenceRun run;
  run.matrix = TrainTestMatrix(static_cast<Index>(t_count));
  MlpClassifier init = mlp_init(static_cast<int>(seq.dim()), seq.class_count(),
                                derive_seed(cfg.seed, {detail::kInitTag}), cfg.hidden_dims);

  if (cfg.kind == StrategyKind::joint) {
    std::vector<const LatentDataset*> parts;
    for (const auto& ep : seq.episodes) parts.push_back(&ep.train);
    const LatentDataset all = concat(parts, seq.name + "/joint");
    auto outcome = train_episode(init, nullptr, all, ReplayMemory{}, cfg, 0);
    for (std::size_t j = 0; j < t_count; ++j)
      run.matrix.set(static_cast<Index>(t_count - 1), static_cast<Index>(j), accuracy(outcome.model, seq.episodes[j].test));
    run.episode_losses.push_back(outcome.last_epoch_loss);
    run.final_model = std::move(outcome.model);
    return run;
  }

  std::optional<MlpClassifier> teacher;
  ReplayMemory memory;
  for (std::size_t t = 0; t < t_count; ++t) {
    const MlpClassifier& start = teacher ? *teacher : init;
    auto outcome = train_episode(start, teacher ? &*teacher : nullptr, seq.episodes[t].train, memory, cfg, t);
    for (std::size_t j = 0; j < t_count; ++j) {
      const double a = accuracy(outcome.model, seq.episodes[j].test);
      outcome.accuracy_row.push_back(a);
      run.matrix.set(static_cast<Index>(t), static_cast<Index>(j), a);
    }
    run.episode_losses.push_back(outcome.last_epoch_loss);
    memory = std::move(outcome.memory);
    run.memory_after_session.push_back(memory);
    teacher = std::move(outcome.model);
  }
  run.final_model = std::move(*teacher);
  return run;
}

}  // namespace glr

#endif  // GLR_CONTINUAL_HPP
