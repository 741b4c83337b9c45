#include "glr/experiment.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace glr;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"({
  "schema_version": 1,
  "name": "small",
  "benchmark": {"synthetic": {"domains": 3, "dim": 8, "train_per_class": 20, "test_per_class": 10}},
  "sequences": [{"name": "A", "order": [0, 1, 2]}, {"name": "B", "order": [2, 0, 1]}],
  "strategies": [
    {"kind": "naive", "epochs": 2, "hidden_dims": [16, 8]},
    {"kind": "proposed", "epochs": 2, "hidden_dims": [16, 8], "alpha": 0.2}
  ],
  "seeds": [1, 2, 3]
})";

nlohmann::json small_json() { return nlohmann::json::parse(kSmallConfig); }

ExperimentConfig parse(const nlohmann::json& j) { return parse_experiment_config(j.dump()); }

std::string schema_error(const nlohmann::json& j) {
  try {
    parse(j);
  } catch (const SchemaError& e) {
    return e.what();
  }
  return "";
}

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

std::optional<double> number(const std::string& s) {
  if (s == "NA") return std::nullopt;
  return std::stod(s);
}

// Population mean / std written out directly.
std::pair<double, double> oracle_mean_std(const std::vector<double>& xs) {
  double m = 0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("glr_exp_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Config, ParsesSmallConfig) {
  const auto cfg = parse_experiment_config(kSmallConfig);
  EXPECT_EQ(cfg.name, "small");
  ASSERT_TRUE(cfg.benchmark.synthetic.has_value());
  EXPECT_EQ(cfg.benchmark.synthetic->dim, 8);
  EXPECT_EQ(cfg.sequences.size(), 2u);
  EXPECT_EQ(cfg.sequences[1].order, (std::vector<int>{2, 0, 1}));
  EXPECT_EQ(cfg.strategies[1].kind, StrategyKind::proposed);
  EXPECT_EQ(cfg.strategies[1].alpha, 0.2);
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(cfg.source_text, kSmallConfig);
}

TEST(Config, SchemaViolations) {
  EXPECT_NE(schema_error(nlohmann::json::array()), "");
  EXPECT_THROW(parse_experiment_config("{not json"), SchemaError);
  auto j = small_json();
  j["schema_version"] = 2;
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["bogus"] = 1;
  EXPECT_NE(schema_error(j).find("bogus"), std::string::npos);
  j = small_json();
  j["strategies"][0]["alpah"] = 0.1;
  EXPECT_NE(schema_error(j).find("alpah"), std::string::npos);
  j = small_json();
  j["sequences"][0]["order"] = {0, 1, 1};
  EXPECT_NE(schema_error(j).find("permutation"), std::string::npos);
  j = small_json();
  j["sequences"][0]["order"] = {0, 1};
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["sequences"][1]["name"] = "A";
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["sequences"][1]["name"] = "ALL";
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["seeds"] = {1, 1};
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["seeds"] = nlohmann::json::array();
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["seeds"] = {-1};
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["strategies"] = nlohmann::json::array();
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["strategies"][0]["kind"] = "ewc";
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["strategies"][1]["kind"] = "naive";
  EXPECT_NE(schema_error(j).find("duplicate"), std::string::npos);
  j = small_json();
  j["strategies"][0]["alpha"] = 2.0;
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["strategies"][0]["epochs"] = "many";
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["strategies"][0]["optimizer"] = {{"kind", "rmsprop"}};
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["alpha_sweep"] = {0.1, 1.5};
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["benchmark"]["manifests"] = {"a.json"};
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["benchmark"]["synthetic"]["spread"] = 0;
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j["evaluation"] = {{"fid_mode", "tri"}};
  EXPECT_NE(schema_error(j), "");
  j = small_json();
  j.erase("sequences");
  EXPECT_NE(schema_error(j).find("sequences"), std::string::npos);
}

TEST(Config, ParsesOptionalSections) {
  auto j = small_json();
  j["strategies"][1]["optimizer"] = {{"kind", "sgd"}, {"learning_rate", 0.05}};
  j["strategies"][1]["kl_direction"] = "student_teacher";
  j["evaluation"] = {{"fidelity", true}, {"loglik", true}, {"beta", 12}, {"fid_mode", "diagonal"},
                     {"mmd_bandwidth", "fixed"}, {"mmd_gamma", 0.5}, {"pairing", "index_matched"}};
  j["alpha_sweep"] = {0.01, 0.5};
  j["output_dir"] = "out/x";
  const auto cfg = parse(j);
  EXPECT_EQ(cfg.strategies[1].optimizer.kind, OptimizerKind::sgd);
  EXPECT_EQ(cfg.strategies[1].optimizer.learning_rate, 0.05);
  EXPECT_EQ(cfg.strategies[1].kl_direction, KlDirection::student_teacher);
  EXPECT_TRUE(cfg.evaluation.fidelity);
  EXPECT_EQ(cfg.evaluation.fidelity_cfg.beta, 12);
  EXPECT_EQ(cfg.evaluation.fidelity_cfg.fid_mode, FidMode::diagonal);
  EXPECT_EQ(cfg.evaluation.fidelity_cfg.mmd_rule, BandwidthRule::fixed);
  EXPECT_EQ(cfg.evaluation.fidelity_cfg.pairing, Pairing::index_matched);
  EXPECT_EQ(cfg.alpha_sweep, (std::vector<double>{0.01, 0.5}));
  EXPECT_EQ(cfg.output_dir, fs::path("out/x"));
}

TEST(Run, SingleCellSingleEpisode) {
  auto j = small_json();
  j["benchmark"]["synthetic"]["domains"] = 1;
  j["sequences"] = {{{"name", "only"}, {"order", {0}}}};
  j["strategies"] = {j["strategies"][1]};
  j["seeds"] = {7};
  const auto cfg = parse(j);
  const auto rep = run_experiment(cfg);
  ASSERT_EQ(rep.cells.size(), 1u);
  EXPECT_EQ(rep.cells[0].matrix.size(), 1);
  EXPECT_TRUE(rep.cells[0].matrix.defined(0, 0));
  EXPECT_FALSE(rep.cells[0].metrics.bwt.has_value());
  ASSERT_EQ(rep.curves.size(), 1u);
  EXPECT_EQ(rep.curves[0].session, 1);
  EXPECT_EQ(rep.curves[0].stats.mean, rep.cells[0].matrix.at(0, 0));
  const auto js = report_json(rep);
  EXPECT_EQ(js["cells"][0]["matrix"].size(), 1u);
  EXPECT_EQ(js["cells"][0]["bwt"], nullptr);
}

TEST(Run, AggregatesMatchListedValues) {
  const auto cfg = parse_experiment_config(kSmallConfig);
  const auto rep = run_experiment(cfg);
  EXPECT_EQ(rep.cells.size(), 2u * 2u * 3u);
  ASSERT_EQ(rep.aggregates.size(), 2u * 3u);
  for (const auto& a : rep.aggregates) {
    for (const auto* m : {&a.acc, &a.ilm, &a.bwt}) {
      ASSERT_EQ(m->values.size(), cfg.seeds.size());
      ASSERT_TRUE(m->stats.has_value());
      EXPECT_EQ(m->stats->count, cfg.seeds.size());
      std::vector<double> xs;
      for (const auto& v : m->values) xs.push_back(*v);
      const auto [mean, sd] = oracle_mean_std(xs);
      EXPECT_NEAR(m->stats->mean, mean, 1e-12);
      EXPECT_NEAR(m->stats->std, sd, 1e-12);
      const bool all_equal = std::all_of(xs.begin(), xs.end(), [&](double x) { return x == xs.front(); });
      EXPECT_EQ(m->stats->std == 0.0, all_equal);
    }
  }
  // Per-sequence aggregates list the cells; ALL lists per-seed means over sequences.
  for (const auto& a : rep.aggregates) {
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
      double sum = 0;
      int n = 0;
      for (const auto& c : rep.cells)
        if (c.strategy == a.strategy && c.seed == cfg.seeds[s] && (a.sequence == "ALL" || c.sequence == a.sequence)) {
          sum += c.metrics.acc;
          ++n;
        }
      EXPECT_NEAR(*a.acc.values[s], sum / n, 1e-12);
    }
  }
}

TEST(Run, CsvTablesParseBackExactly) {
  auto j = small_json();
  j["evaluation"] = {{"fidelity", true}, {"loglik", true}};
  j["alpha_sweep"] = {0.1, 0.3};
  const auto cfg = parse(j);
  const auto rep = run_experiment(cfg);

  const auto metrics = read_csv(metrics_csv(rep, cfg));
  ASSERT_EQ(metrics.front(),
            (std::vector<std::string>{"strategy", "sequence", "seed_or_AGG", "acc", "acc_std", "ilm", "ilm_std", "bwt",
                                      "bwt_std"}));
  std::size_t per_seed = 0, agg = 0;
  for (std::size_t r = 1; r < metrics.size(); ++r) {
    const auto& row = metrics[r];
    ASSERT_EQ(row.size(), 9u);
    if (row[2] == "AGG") {
      const AggregateRow* a = nullptr;
      for (const auto& x : rep.aggregates)
        if (x.strategy == row[0] && x.sequence == row[1]) a = &x;
      ASSERT_NE(a, nullptr);
      EXPECT_EQ(number(row[3]), a->acc.stats->mean);
      EXPECT_EQ(number(row[4]), a->acc.stats->std);
      EXPECT_EQ(number(row[5]), a->ilm.stats->mean);
      EXPECT_EQ(number(row[6]), a->ilm.stats->std);
      EXPECT_EQ(number(row[7]), a->bwt.stats->mean);
      EXPECT_EQ(number(row[8]), a->bwt.stats->std);
      ++agg;
    } else {
      const CellResult* c = nullptr;
      for (const auto& x : rep.cells)
        if (x.strategy == row[0] && x.sequence == row[1] && std::to_string(x.seed) == row[2]) c = &x;
      ASSERT_NE(c, nullptr);
      EXPECT_EQ(number(row[3]), c->metrics.acc);
      EXPECT_EQ(number(row[5]), c->metrics.ilm);
      EXPECT_EQ(number(row[7]), c->metrics.bwt);
      EXPECT_EQ(row[4], "NA");
      ++per_seed;
    }
  }
  EXPECT_EQ(per_seed, rep.cells.size());
  EXPECT_EQ(agg, rep.aggregates.size());

  const auto curves = read_csv(curves_csv(rep));
  ASSERT_EQ(curves.front(), (std::vector<std::string>{"strategy", "sequence", "session", "mean", "std"}));
  ASSERT_EQ(curves.size(), rep.curves.size() + 1);
  EXPECT_EQ(rep.curves.size(), 2u * 2u * 3u);
  for (std::size_t r = 0; r < rep.curves.size(); ++r) {
    const auto& row = curves[r + 1];
    EXPECT_EQ(row[0], rep.curves[r].strategy);
    EXPECT_EQ(row[1], rep.curves[r].sequence);
    EXPECT_EQ(std::stoi(row[2]), rep.curves[r].session);
    EXPECT_EQ(std::stod(row[3]), rep.curves[r].stats.mean);
    EXPECT_EQ(std::stod(row[4]), rep.curves[r].stats.std);
  }

  const auto sweep = read_csv(alpha_sweep_csv(rep));
  ASSERT_EQ(sweep.size(), 3u);
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_EQ(std::stod(sweep[r + 1][0]), rep.alpha_sweep[r].alpha);
    EXPECT_EQ(std::stod(sweep[r + 1][1]), rep.alpha_sweep[r].ilm.mean);
    EXPECT_EQ(std::stod(sweep[r + 1][2]), rep.alpha_sweep[r].ilm.std);
    EXPECT_EQ(std::stod(sweep[r + 1][3]), rep.alpha_sweep[r].acc.mean);
    EXPECT_EQ(std::stod(sweep[r + 1][4]), rep.alpha_sweep[r].acc.std);
  }

  const auto fid = read_csv(fidelity_csv(rep));
  std::size_t fid_rows = 0;
  for (const auto& c : rep.fidelity) fid_rows += 2 * (c.result.kde.sessions.size() + 1);
  ASSERT_EQ(fid.size(), fid_rows + 1);
  std::size_t r = 1;
  for (const auto& c : rep.fidelity)
    for (const auto* g : {&c.result.kde, &c.result.baseline}) {
      for (const auto& s : g->sessions) {
        EXPECT_EQ(std::stoi(fid[r][3]), s.session);
        EXPECT_EQ(std::stod(fid[r][5]), s.cosine);
        EXPECT_EQ(std::stod(fid[r][6]), s.euclidean);
        EXPECT_EQ(std::stod(fid[r][7]), s.fid);
        EXPECT_EQ(std::stod(fid[r][8]), s.mmd);
        ++r;
      }
      EXPECT_EQ(fid[r][3], "AVG");
      EXPECT_EQ(std::stod(fid[r][7]), g->average.fid);
      ++r;
    }

  const auto ll = read_csv(loglik_csv(rep));
  std::size_t k = 1;
  for (const auto& c : rep.loglik)
    for (const auto& row : c.rows) {
      EXPECT_EQ(std::stoi(ll[k][2]), row.prefix);
      EXPECT_EQ(std::stod(ll[k][3]), row.kde);
      EXPECT_EQ(std::stod(ll[k][4]), row.gmm);
      ++k;
    }
  EXPECT_EQ(k, ll.size());
  EXPECT_EQ(rep.loglik.size(), 2u * 3u);
}

TEST(Run, SingleAlphaSweepMatchesMainReport) {
  auto j = small_json();
  j["strategies"] = {j["strategies"][1]};
  j["alpha_sweep"] = {0.2};
  const auto cfg = parse(j);
  const auto rep = run_experiment(cfg);
  ASSERT_EQ(rep.alpha_sweep.size(), 1u);
  const AggregateRow* all = nullptr;
  for (const auto& a : rep.aggregates)
    if (a.sequence == "ALL") all = &a;
  ASSERT_NE(all, nullptr);
  EXPECT_NEAR(rep.alpha_sweep[0].ilm.mean, all->ilm.stats->mean, 1e-12);
  EXPECT_NEAR(rep.alpha_sweep[0].ilm.std, all->ilm.stats->std, 1e-12);
  EXPECT_NEAR(rep.alpha_sweep[0].acc.mean, all->acc.stats->mean, 1e-12);
  for (std::size_t i = 0; i < rep.cells.size(); ++i)
    EXPECT_TRUE(rep.alpha_cells[i].matrix.values == rep.cells[i].matrix.values);
}

TEST(Run, SixPointGridGivesSixRows) {
  auto j = small_json();
  j["strategies"] = {j["strategies"][1]};
  j["sequences"] = {j["sequences"][0]};
  j["seeds"] = {1};
  j["alpha_sweep"] = {0.01, 0.1, 0.2, 0.3, 0.4, 0.5};
  const auto cfg = parse(j);
  const auto rep = run_experiment(cfg);
  ASSERT_EQ(rep.alpha_sweep.size(), 6u);
  EXPECT_EQ(read_csv(alpha_sweep_csv(rep)).size(), 7u);
  EXPECT_EQ(rep.alpha_cells.size(), 6u);
}

TEST(Run, DeterministicAndIndependentOfJobs) {
  const auto cfg = parse_experiment_config(kSmallConfig);
  const auto a = run_experiment(cfg);
  const auto b = run_experiment(cfg);
  RunOptions par;
  par.jobs = 3;
  const auto c = run_experiment(cfg, par);
  EXPECT_EQ(metrics_csv(a, cfg), metrics_csv(b, cfg));
  EXPECT_EQ(metrics_csv(a, cfg), metrics_csv(c, cfg));
  EXPECT_EQ(curves_csv(a), curves_csv(c));
}

TEST(Run, SeedsVarySyntheticDataUnlessDisabled) {
  auto j = small_json();
  const auto cfg = parse(j);
  EXPECT_FALSE(benchmark_domains(cfg.benchmark, 1)[0].train.features ==
               benchmark_domains(cfg.benchmark, 2)[0].train.features);
  j["benchmark"]["vary_data_with_seed"] = false;
  const auto fixed = parse(j);
  EXPECT_TRUE(benchmark_domains(fixed.benchmark, 1)[0].train.features ==
              benchmark_domains(fixed.benchmark, 2)[0].train.features);
}

TEST(Run, FailingCellIsNamed) {
  auto j = small_json();
  j["strategies"] = {{{"kind", "latent_buffer"}, {"buffer_capacity", 0}, {"epochs", 1}, {"hidden_dims", {8}}}};
  const auto cfg = parse(j);
  try {
    run_experiment(cfg);
    FAIL() << "expected a cell failure";
  } catch (const CellError& e) {
    EXPECT_EQ(e.cell(), "latent_buffer/A/seed=1");
  }
}

TEST(Report, WritesFilesAndEchoesConfigBytes) {
  TempDir dir;
  // Odd spacing and key order must survive verbatim.
  const std::string text =
      "{\"seeds\":[4],   \"schema_version\" : 1,\n\t\"benchmark\": {\"synthetic\": {\"domains\": 2, \"dim\": 4,"
      " \"train_per_class\": 12, \"test_per_class\": 5}},\n\"sequences\": [{\"order\": [1, 0], \"name\": \"r\"}],"
      "\"strategies\": [{\"kind\": \"naive\", \"epochs\": 1, \"hidden_dims\": [4]}]}\n\n";
  {
    std::ofstream out(dir.path() / "cfg.json", std::ios::binary);
    out << text;
  }
  const auto cfg = load_experiment_config(dir.path() / "cfg.json");
  const auto rep = run_experiment(cfg);
  write_report(rep, cfg, dir.path() / "out");
  for (const char* f : {"report.json", "metrics.csv", "curves.csv"}) EXPECT_TRUE(fs::exists(dir.path() / "out" / f));
  EXPECT_FALSE(fs::exists(dir.path() / "out" / "fidelity.csv"));
  const auto js = nlohmann::json::parse(slurp(dir.path() / "out" / "report.json"));
  EXPECT_EQ(js["config_text"].get<std::string>(), text);
  EXPECT_EQ(js["report_schema_version"], 1);
  EXPECT_EQ(js["engine_version"], kEngineVersion);
  EXPECT_EQ(js["std_convention"], "population (divide by n)");
  EXPECT_EQ(slurp(dir.path() / "out" / "metrics.csv"), metrics_csv(rep, cfg));
  EXPECT_EQ(js["cells"][0]["acc"].get<double>(), rep.cells[0].metrics.acc);
}

TEST(Report, ManifestBenchmark) {
  TempDir dir;
  SyntheticBenchmark b;
  b.domains = 2;
  b.dim = 4;
  b.train_per_class = 15;
  const auto domains = b.generate();
  fs::create_directories(dir.path() / "data");
  save_dataset(domains[0].train, dir.path() / "data" / "d0_train.json");
  save_dataset(domains[0].test, dir.path() / "data" / "d0_test.json");
  LatentDataset whole = concat({&domains[1].train, &domains[1].test}, "D2");
  save_dataset(whole, dir.path() / "data" / "d1.json");
  const std::string text = R"({"schema_version": 1,
    "benchmark": {"manifests": [{"train": "data/d0_train.json", "test": "data/d0_test.json"}, "data/d1.json"],
                  "test_per_class": 10, "split_seed": 3},
    "sequences": [{"name": "s", "order": [0, 1]}],
    "strategies": [{"kind": "proposed", "epochs": 1, "hidden_dims": [4]}],
    "seeds": [1, 2]})";
  {
    std::ofstream out(dir.path() / "cfg.json");
    out << text;
  }
  const auto cfg = load_experiment_config(dir.path() / "cfg.json");
  const auto d = benchmark_domains(cfg.benchmark, 1);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_TRUE(d[0].test.features == domains[0].test.features);
  EXPECT_EQ(d[1].test.class_counts(), (std::vector<Index>{10, 10, 10}));
  EXPECT_EQ(d[1].train.size(), 3 * (15 + 50) - 30);
  EXPECT_EQ(run_experiment(cfg).cells.size(), 2u);
}

TEST(Cli, ExitCodes) {
  TempDir dir;
  const std::string cli = GLR_CLI_PATH;
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream out(dir.path() / name);
    out << text;
    return (dir.path() / name).string();
  };
  auto status = [&](const std::string& args) {
    const int raw = std::system((cli + " " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  auto j = small_json();
  j["seeds"] = {1};
  j["sequences"] = {j["sequences"][0]};
  const auto good = write("good.json", j.dump());
  EXPECT_EQ(status("run " + good + " --validate-only"), 0);
  EXPECT_EQ(status("run " + good + " --out " + (dir.path() / "out").string() + " -q"), 0);
  EXPECT_TRUE(fs::exists(dir.path() / "out" / "metrics.csv"));
  j["strategies"][0]["kind"] = "ewc";
  EXPECT_EQ(status("run " + write("bad.json", j.dump()) + " --validate-only"), 2);
  EXPECT_EQ(status("run " + (dir.path() / "missing.json").string()), 2);
  EXPECT_EQ(status("frobnicate"), 2);
  auto f = small_json();
  f["strategies"] = {{{"kind", "latent_buffer"}, {"buffer_capacity", 0}, {"epochs", 1}, {"hidden_dims", {8}}}};
  EXPECT_EQ(status("run " + write("fail.json", f.dump()) + " -q --out " + (dir.path() / "o2").string()), 1);
}
