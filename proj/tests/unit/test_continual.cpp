#include "glr/continual.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace glr;

namespace {

// Small benchmark so whole sequences train in well under a second.
std::vector<DomainSplit> small_domains(std::uint64_t seed = 3) {
  SyntheticBenchmark b;
  b.dim = 8;
  b.train_per_class = 20;
  b.test_per_class = 10;
  b.data_seed = seed;
  return b.generate();
}

StrategyConfig small_cfg(StrategyKind kind) {
  StrategyConfig cfg;
  cfg.kind = kind;
  cfg.hidden_dims = {16, 8};
  cfg.epochs = 2;
  cfg.seed = 11;
  return cfg;
}

MlpClassifier constant_teacher(int input_dim, int classes, int winner) {
  auto m = mlp_init(input_dim, classes, 1, {4});
  for (auto& l : m.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  if (winner >= 0) m.layers.back().bias(winner) = 1.0;
  return m;
}

}  // namespace

TEST(PseudoLabel, ConstantTeacherAndTies) {
  Rng rng(1);
  const Matrix x = standard_normal(9, 8, rng);
  EXPECT_EQ(pseudo_label(constant_teacher(8, 3, 1), x), std::vector<int>(9, 1));
  EXPECT_EQ(pseudo_label(constant_teacher(8, 3, -1), x), std::vector<int>(9, 0));
  EXPECT_THROW(pseudo_label(constant_teacher(8, 3, 1), Matrix::Zero(2, 5)), Error);
}

TEST(PseudoLabel, AccurateTeacherReproducesTrueLabels) {
  const auto domains = small_domains();
  auto cfg = small_cfg(StrategyKind::naive);
  cfg.epochs = 200;
  cfg.optimizer.learning_rate = 1e-2;
  const auto& train = domains[0].train;
  const auto out = train_episode(mlp_init(8, 3, 2, cfg.hidden_dims), nullptr, train, {}, cfg, 0);
  ASSERT_EQ(accuracy(out.model, train), 100.0);
  EXPECT_EQ(pseudo_label(out.model, train.features), train.labels);
}

TEST(HybridBatch, GeneratedCountIsCeiling) {
  EXPECT_EQ(generated_count(64, 0.5), 32);
  for (int b : {1, 7, 32, 64, 100})
    for (int k = 0; k <= 20; ++k) {
      const double f = k / 20.0;
      // Smallest g with g >= f * b, in exact integer arithmetic.
      Index want = 0;
      while (20 * want < k * b) ++want;
      EXPECT_EQ(generated_count(b, f), want) << b << " " << f;
    }
}

TEST(HybridBatch, EqualSplitAtHalfReplay) {
  const auto domains = small_domains();
  const KdeGenerator kde = kde_update({}, domains[0].train.features.topRows(10));
  const auto teacher = mlp_init(8, 3, 4, {16});
  const auto& cur = domains[1].train;
  const Matrix real = cur.features.topRows(32);
  const std::vector<int> labels(cur.labels.begin(), cur.labels.begin() + 32);
  const auto batch = assemble_hybrid_batch(real, labels, std::cref(kde), &teacher, 64, 0.5, 9);
  EXPECT_EQ(batch.generated, 32);
  ASSERT_EQ(batch.features.rows(), 64);
  ASSERT_EQ(batch.labels.size(), 64u);
  EXPECT_TRUE(batch.features.topRows(32) == real);
  EXPECT_EQ(std::vector<int>(batch.labels.begin(), batch.labels.begin() + 32), labels);
  ASSERT_TRUE(batch.teacher_logits.has_value());
  EXPECT_TRUE(*batch.teacher_logits == forward(teacher, batch.features));
  const auto gen_labels = pseudo_label(teacher, batch.features.bottomRows(32));
  EXPECT_EQ(std::vector<int>(batch.labels.begin() + 32, batch.labels.end()), gen_labels);
  // Generated rows come from the KDE: each lies within a few bandwidths of a center.
  const Matrix d2 = pairwise_sq_dist(batch.features.bottomRows(32), kde.support);
  for (Index i = 0; i < 32; ++i)
    EXPECT_LT(std::sqrt(d2.row(i).minCoeff()), kde.bandwidth * (std::sqrt(8.0) + 6.0));
}

TEST(HybridBatch, PrecomputedRealLogitsOnlyForwardGeneratedRows) {
  const auto domains = small_domains();
  const KdeGenerator kde = kde_update({}, domains[0].train.features.topRows(10));
  const auto teacher = mlp_init(8, 3, 4, {16});
  const auto& cur = domains[1].train;
  const Matrix real = cur.features.topRows(20);
  const std::vector<int> labels(cur.labels.begin(), cur.labels.begin() + 20);
  const Matrix cached = forward(teacher, real);
  Workspace ws;
  const auto plain = assemble_hybrid_batch(real, labels, std::cref(kde), &teacher, 40, 0.5, 3);
  const auto fast = assemble_hybrid_batch(real, labels, std::cref(kde), &teacher, 40, 0.5, 3, &cached, &ws);
  EXPECT_TRUE(fast.features == plain.features);
  EXPECT_EQ(fast.labels, plain.labels);
  ASSERT_TRUE(fast.teacher_logits && plain.teacher_logits);
  EXPECT_LE((*fast.teacher_logits - *plain.teacher_logits).cwiseAbs().maxCoeff(), 1e-12);
  const Matrix wrong = Matrix::Zero(19, 3);
  EXPECT_THROW(assemble_hybrid_batch(real, labels, std::cref(kde), &teacher, 40, 0.5, 3, &wrong), Error);
}

TEST(HybridBatch, ExtremeReplayFractions) {
  const auto domains = small_domains();
  const KdeGenerator kde = kde_update({}, domains[0].train.features.topRows(10));
  const auto teacher = mlp_init(8, 3, 4, {16});
  const auto& cur = domains[1].train;
  const std::vector<int> labels(cur.labels.begin(), cur.labels.begin() + 64);
  const auto pure = assemble_hybrid_batch(cur.features.topRows(64), labels, std::cref(kde), &teacher, 64, 0.0, 1);
  EXPECT_EQ(pure.generated, 0);
  EXPECT_TRUE(pure.features == cur.features.topRows(64));
  EXPECT_EQ(pure.labels, labels);
  const auto full = assemble_hybrid_batch(Matrix(0, 8), {}, std::cref(kde), &teacher, 64, 1.0, 1);
  EXPECT_EQ(full.generated, 64);
  EXPECT_EQ(full.features.rows(), 64);
  EXPECT_EQ(full.labels, pseudo_label(teacher, full.features));
}

TEST(HybridBatch, ErrorsWithoutGeneratorOrTeacher) {
  const auto domains = small_domains();
  const auto& cur = domains[0].train;
  const std::vector<int> labels(cur.labels.begin(), cur.labels.begin() + 32);
  const Matrix real = cur.features.topRows(32);
  EXPECT_THROW(assemble_hybrid_batch(real, labels, {}, nullptr, 64, 0.5, 1), Error);
  const KdeGenerator kde = kde_update({}, cur.features.topRows(10));
  EXPECT_THROW(assemble_hybrid_batch(real, labels, std::cref(kde), nullptr, 64, 0.5, 1), Error);
  const KdeGenerator empty;
  const auto teacher = mlp_init(8, 3, 4, {16});
  EXPECT_THROW(assemble_hybrid_batch(real, labels, std::cref(empty), &teacher, 64, 0.5, 1), Error);
  EXPECT_NO_THROW(assemble_hybrid_batch(real, labels, {}, nullptr, 32, 0.0, 1));
}

TEST(HybridBatch, BufferRowsKeepStoredLabels) {
  LatentBuffer buf;
  buf.capacity = 5;
  LatentDataset stream{"s", 3, Matrix(5, 2), {0, 1, 2, 1, 0}};
  for (Index i = 0; i < 5; ++i) stream.features.row(i) << static_cast<double>(i), -static_cast<double>(i);
  Rng rng(1);
  buf.add_stream(stream, rng);
  const auto batch = assemble_hybrid_batch(Matrix(0, 2), {}, std::cref(buf), nullptr, 20, 1.0, 3);
  ASSERT_EQ(batch.features.rows(), 20);
  EXPECT_FALSE(batch.teacher_logits.has_value());
  for (Index i = 0; i < 20; ++i) {
    const auto row = static_cast<std::size_t>(batch.features(i, 0));
    EXPECT_EQ(batch.features(i, 1), -batch.features(i, 0));
    EXPECT_EQ(batch.labels[static_cast<std::size_t>(i)], stream.labels[row]);
  }
}

TEST(Buffer, ReservoirRespectsCapacityAndIsUniform) {
  const int n = 100, cap = 10, reps = 3000;
  LatentDataset stream{"s", 1, Matrix(n, 1), std::vector<int>(n, 0)};
  for (Index i = 0; i < n; ++i) stream.features(i, 0) = static_cast<double>(i);
  std::vector<int> hits(n, 0);
  for (int r = 0; r < reps; ++r) {
    LatentBuffer buf;
    buf.capacity = cap;
    Rng rng(derive_seed(5, {static_cast<std::uint64_t>(r)}));
    // Two halves as separate streams: the reservoir spans both.
    buf.add_stream(stream.subset([] {
      std::vector<Index> v(50);
      std::iota(v.begin(), v.end(), 0);
      return v;
    }()), rng);
    ASSERT_LE(buf.size(), cap);
    buf.add_stream(stream.subset([] {
      std::vector<Index> v(50);
      std::iota(v.begin(), v.end(), 50);
      return v;
    }()), rng);
    ASSERT_EQ(buf.size(), cap);
    for (Index i = 0; i < buf.size(); ++i) ++hits[static_cast<std::size_t>(buf.features(i, 0))];
  }
  // Inclusion probability cap / n = 0.1; binomial sd ~ 0.0055.
  for (int h : hits) EXPECT_NEAR(h / static_cast<double>(reps), 0.1, 0.025);
}

TEST(Protocol, KdeSupportGrowsByTenPerEpisode) {
  const auto domains = small_domains();
  const auto seq = build_sequence(domains, {0, 1, 2, 3});
  const auto run = run_sequence(seq, small_cfg(StrategyKind::proposed));
  ASSERT_EQ(run.memory_after_session.size(), 4u);
  for (std::size_t t = 0; t < 4; ++t) {
    const auto& kde = run.memory_after_session[t].kde;
    EXPECT_EQ(kde.support.rows(), static_cast<Index>(10 * (t + 1)));
    EXPECT_EQ(kde.per_task_counts.size(), t + 1);
  }
  EXPECT_EQ(run.memory_after_session.back().kde.support.rows(), 40);
}

TEST(Protocol, GmmBankHoldsOneModelPerDomain) {
  const auto seq = build_sequence(small_domains(), {0, 1, 2});
  const auto run = run_sequence(seq, small_cfg(StrategyKind::glrcl_gmm));
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(run.memory_after_session[t].gmm.models.size(), t + 1);
    EXPECT_EQ(run.memory_after_session[t].gmm.models.back().weights.size(), 10);
  }
}

TEST(Protocol, BufferNeverExceedsForty) {
  const auto seq = build_sequence(small_domains(), {0, 1, 2, 3});
  const auto run = run_sequence(seq, small_cfg(StrategyKind::latent_buffer));
  for (const auto& mem : run.memory_after_session) {
    EXPECT_LE(mem.buffer.size(), 40);
    EXPECT_EQ(mem.buffer.capacity, 40);
  }
  EXPECT_EQ(run.memory_after_session.front().buffer.size(), 40);
  EXPECT_EQ(run.memory_after_session.back().buffer.seen, 4 * 60);
}

TEST(Protocol, HybridBatchesInsideEpisodeUseHalfReplay) {
  // Each episode after the first sees ceil(60 / 32) = 2 batches of 32 real + 32 generated.
  const auto domains = small_domains();
  const auto& cur = domains[1].train;
  const KdeGenerator kde = kde_update({}, domains[0].train.features.topRows(10));
  const auto teacher = mlp_init(8, 3, 4, {16});
  std::vector<int> labels(cur.labels.begin(), cur.labels.begin() + 28);
  const auto tail = assemble_hybrid_batch(cur.features.topRows(28), labels, std::cref(kde), &teacher, 64, 0.5, 2);
  EXPECT_EQ(tail.generated, 32);  // a short final batch still carries the full generated share
  EXPECT_EQ(tail.features.rows(), 60);
}

TEST(Reduction, ProposedWithoutReplayOrDistillationIsNaive) {
  const auto seq = build_sequence(small_domains(), {2, 0, 3, 1});
  auto prop = small_cfg(StrategyKind::proposed);
  prop.alpha = 0.0;
  prop.replay_fraction = 0.0;
  const auto naive = small_cfg(StrategyKind::naive);
  const auto a = run_sequence(seq, prop);
  const auto b = run_sequence(seq, naive);
  EXPECT_TRUE(a.final_model == b.final_model);
  EXPECT_TRUE(a.matrix.values == b.matrix.values);
  // Episode by episode as well.
  MlpClassifier start = mlp_init(8, 3, derive_seed(11, {detail::kInitTag}), prop.hidden_dims);
  ReplayMemory mem_a, mem_b;
  const MlpClassifier* teacher = nullptr;
  MlpClassifier prev;
  for (std::size_t t = 0; t < 4; ++t) {
    auto oa = train_episode(start, teacher, seq.episodes[t].train, mem_a, prop, t);
    auto ob = train_episode(start, teacher, seq.episodes[t].train, mem_b, naive, t);
    ASSERT_TRUE(oa.model == ob.model) << "episode " << t;
    mem_a = oa.memory;
    mem_b = ob.memory;
    prev = oa.model;
    start = prev;
    teacher = &prev;
  }
}

TEST(Episode, SingleEpisodeIsPlainSupervisedForEveryStrategy) {
  const auto seq = build_sequence(small_domains(), {1});
  const auto base = run_sequence(seq, small_cfg(StrategyKind::naive));
  for (auto kind : {StrategyKind::proposed, StrategyKind::glrcl_gmm, StrategyKind::latent_buffer,
                    StrategyKind::dst_only, StrategyKind::glr_only, StrategyKind::joint}) {
    const auto run = run_sequence(seq, small_cfg(kind));
    EXPECT_TRUE(run.final_model == base.final_model) << to_string(kind);
    EXPECT_EQ(run.matrix.at(0, 0), base.matrix.at(0, 0));
  }
  EXPECT_EQ(base.matrix.size(), 1);
}

TEST(Episode, TeacherIsUntouchedAndStudentStartsFromIt) {
  const auto domains = small_domains();
  const auto seq = build_sequence(domains, {0, 1});
  const auto cfg = small_cfg(StrategyKind::proposed);
  const auto init = mlp_init(8, 3, derive_seed(11, {detail::kInitTag}), cfg.hidden_dims);
  const auto first = train_episode(init, nullptr, seq.episodes[0].train, {}, cfg, 0);
  const MlpClassifier teacher = first.model;
  const MlpClassifier snapshot = teacher;
  const auto second = train_episode(teacher, &teacher, seq.episodes[1].train, first.memory, cfg, 1);
  EXPECT_TRUE(teacher == snapshot);
  EXPECT_FALSE(second.model == teacher);
  const auto run = run_sequence(seq, cfg);
  EXPECT_TRUE(run.final_model == second.model);
}

TEST(Sequence, JointFillsOnlyTheFinalRow) {
  const auto seq = build_sequence(small_domains(), {0, 1, 2});
  const auto run = run_sequence(seq, small_cfg(StrategyKind::joint));
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) EXPECT_EQ(run.matrix.defined(i, j), i == 2);
  const auto m = summarize(run.matrix);
  EXPECT_FALSE(m.ilm.has_value());
  EXPECT_FALSE(m.bwt.has_value());
  EXPECT_NEAR(m.acc, (run.matrix.at(2, 0) + run.matrix.at(2, 1) + run.matrix.at(2, 2)) / 3.0, 1e-12);
}

TEST(Sequence, FullRowsAndDeterminism) {
  const auto seq = build_sequence(small_domains(), {3, 2, 1, 0});
  const auto cfg = small_cfg(StrategyKind::proposed);
  const auto a = run_sequence(seq, cfg);
  const auto b = run_sequence(seq, cfg);
  EXPECT_TRUE(a.matrix.values == b.matrix.values);
  EXPECT_TRUE(a.final_model == b.final_model);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) {
      ASSERT_TRUE(a.matrix.defined(i, j));
      EXPECT_GE(a.matrix.at(i, j), 0.0);
      EXPECT_LE(a.matrix.at(i, j), 100.0);
    }
  auto other = cfg;
  other.seed = 12;
  EXPECT_FALSE(run_sequence(seq, other).final_model == a.final_model);
}

TEST(Sequence, DuplicatedDomainShowsNegligibleForgetting) {
  SyntheticBenchmark b;
  b.dim = 16;
  b.train_per_class = 100;
  b.test_per_class = 50;
  const auto d = b.generate();
  const auto seq = build_sequence({d[0], d[0], d[0], d[0]}, {0, 1, 2, 3});
  auto cfg = small_cfg(StrategyKind::proposed);
  cfg.hidden_dims = {64, 32};
  cfg.epochs = 30;
  const auto run = run_sequence(seq, cfg);
  EXPECT_GE(run.matrix.at(0, 0), 90.0);
  ASSERT_TRUE(bwt(run.matrix).has_value());
  EXPECT_GE(*bwt(run.matrix), -2.0);
}

TEST(Config, RejectsInvalidSettings) {
  auto cfg = small_cfg(StrategyKind::proposed);
  cfg.alpha = 1.5;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = small_cfg(StrategyKind::proposed);
  cfg.replay_fraction = -0.1;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = small_cfg(StrategyKind::latent_buffer);
  cfg.buffer_capacity = 0;
  const auto seq = build_sequence(small_domains(), {0, 1});
  EXPECT_THROW(run_sequence(seq, cfg), Error);
  EXPECT_NO_THROW(run_sequence(build_sequence(small_domains(), {0}), cfg));
  EXPECT_EQ(parse_strategy_kind("glr_only"), StrategyKind::glr_only);
  EXPECT_FALSE(parse_strategy_kind("ewc").has_value());
}
