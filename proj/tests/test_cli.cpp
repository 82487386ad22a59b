#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "histloss/cli.hpp"

namespace histloss::cli {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("histloss_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  struct Outcome {
    int code;
    std::string out;
    std::string err;
  };
  Outcome run_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = main_entry(args, out, err);
    return {code, out.str(), err.str()};
  }

  fs::path dir_;
};

ErrorKind parse_error(const std::vector<std::string>& args) {
  try {
    parse_config(args);
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "parse succeeded";
  return ErrorKind::ContractViolation;
}

TEST(ParseConfig, FlagMapping) {
  const auto cfg =
      parse_config({"train", "--loss", "histogram", "--bins", "201", "--batch-size", "128",
                    "--seed", "7"});
  EXPECT_EQ(cfg.command, Command::Train);
  EXPECT_EQ(cfg.train.loss.kind, LossKind::Histogram);
  EXPECT_EQ(cfg.train.loss.bins, 201u);
  EXPECT_DOUBLE_EQ(SoftHistogram{std::vector<double>(cfg.train.loss.bins)}.step(), 0.01);
  EXPECT_EQ(cfg.train.batch.batch_size, 128u);
  EXPECT_EQ(cfg.train.seed, 7u);
  EXPECT_EQ(cfg.synthetic.seed, 7u);
}

TEST(ParseConfig, Defaults) {
  const auto cfg = parse_config({"train"});
  EXPECT_EQ(cfg.train.batch.batch_size, 128u);
  EXPECT_EQ(cfg.train.adam.lr, 1e-4);
  EXPECT_EQ(cfg.train.batch.max_per_class, 10u);
  EXPECT_EQ(cfg.train.loss.bins, 201u);
  EXPECT_EQ(cfg.train.ks, std::vector<std::size_t>({1, 2, 4, 8}));
  EXPECT_EQ(cfg.synthetic.num_classes, 16u);
  EXPECT_EQ(cfg.synthetic.per_class, 32u);
  EXPECT_EQ(cfg.synthetic.dim, 32u);
  EXPECT_FALSE(cfg.data_path.has_value());
}

TEST(ParseConfig, LossParameters) {
  const auto m = parse_config({"train", "--loss", "histogram-margin", "--mu", "3"});
  EXPECT_EQ(m.train.loss.mu, 3u);
  const auto b = parse_config(
      {"train", "--loss", "binomial-deviance", "--alpha", "3", "--beta", "0.25", "--cost", "5"});
  EXPECT_EQ(b.train.loss.deviance.alpha, 3.0);
  EXPECT_EQ(b.train.loss.deviance.beta, 0.25);
  EXPECT_EQ(b.train.loss.deviance.cost, 5.0);
  const auto t = parse_config({"gradcheck", "--loss", "triplet-semihard", "--triplet-margin", "0.1"});
  EXPECT_EQ(t.train.loss.triplet_margin, 0.1);
  EXPECT_EQ(parse_config({"train", "--k", "1,5,10"}).train.ks, std::vector<std::size_t>({1, 5, 10}));
  EXPECT_EQ(parse_config({"train", "--hidden", "32"}).train.hidden, std::vector<std::size_t>({32}));
}

TEST(ParseConfig, UsageErrors) {
  EXPECT_EQ(parse_error({"train", "--bins", "1"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"train", "--bogus", "1"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"train", "--bins", "abc"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"train", "--lr", "-1"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"train", "--loss", "contrastive"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"train", "--mu", "2"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"train", "--loss", "histogram", "--cost", "2"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"train", "--triplet-margin", "0.3"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"train", "--data", "x.csv", "--classes", "4"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"train", "--eval-data", "x.csv"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"eval"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"synth", "--loss", "histogram"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"frobnicate"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({}), ErrorKind::InvalidConfig);
}

TEST(ParseConfig, OutputDefaultsFollowEnvironment) {
  ::setenv(kOutDirEnv, "/tmp/histloss_env_out", 1);
  EXPECT_EQ(parse_config({"train"}).out, "/tmp/histloss_env_out");
  EXPECT_EQ(parse_config({"synth"}).out, "/tmp/histloss_env_out/data.csv");
  ::unsetenv(kOutDirEnv);
  EXPECT_EQ(parse_config({"train"}).out, "out");
  EXPECT_EQ(parse_config({"train", "--out", "elsewhere"}).out, "elsewhere");
}

TEST_F(CliTest, ConfigFilePrecedence) {
  {
    std::ofstream f(path("cfg.json"));
    f << R"({"bins": 51, "batch-size": 64, "k": [1, 3], "lr": 0.001, "loss": "histogram"})";
  }
  const auto from_file = parse_config({"train", "--config", path("cfg.json")});
  EXPECT_EQ(from_file.train.loss.bins, 51u);
  EXPECT_EQ(from_file.train.batch.batch_size, 64u);
  EXPECT_EQ(from_file.train.ks, std::vector<std::size_t>({1, 3}));
  EXPECT_EQ(from_file.train.adam.lr, 0.001);
  EXPECT_EQ(from_file.train.batch.max_per_class, 10u);

  const auto overridden = parse_config({"train", "--config", path("cfg.json"), "--bins", "11"});
  EXPECT_EQ(overridden.train.loss.bins, 11u);
  EXPECT_EQ(overridden.train.batch.batch_size, 64u);
}

TEST_F(CliTest, ConfigFileRejections) {
  {
    std::ofstream f(path("unknown.json"));
    f << R"({"bins": 51, "momentum": 0.9})";
  }
  {
    std::ofstream f(path("broken.json"));
    f << R"({"bins": )";
  }
  EXPECT_EQ(parse_error({"train", "--config", path("unknown.json")}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"train", "--config", path("broken.json")}), ErrorKind::InvalidConfig);
  EXPECT_EQ(parse_error({"train", "--config", path("missing.json")}), ErrorKind::InvalidConfig);
}

TEST_F(CliTest, SynthWritesEveryRow) {
  const auto r = run_cli({"synth", "--classes", "16", "--per-class", "32", "--dim", "32",
                          "--seed", "3", "--out", path("data.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto data = load_dataset(path("data.csv"));
  EXPECT_EQ(data.size(), 512u);
  EXPECT_EQ(data.dim(), 32u);
  EXPECT_EQ(data.num_classes(), 16u);
}

TEST_F(CliTest, GradcheckPasses) {
  for (const char* loss : {"histogram", "histogram-margin", "binomial-deviance", "triplet-semihard"}) {
    const auto r = run_cli({"gradcheck", "--loss", loss, "--bins", "11", "--seed", "1", "--out",
                            path(std::string("gc_") + loss)});
    EXPECT_EQ(r.code, 0) << loss << ": " << r.err << r.out;
    const auto j = nlohmann::json::parse(slurp(dir_ / (std::string("gc_") + loss) / "gradcheck.json"));
    EXPECT_LT(j["max_rel_error"].get<double>(), 1e-4);
    EXPECT_TRUE(j["passed"].get<bool>());
  }
  const auto d = run_cli({"gradcheck", "--loss", "histogram", "--seed", "1", "--out", path("gc")});
  EXPECT_EQ(d.code, 0) << d.err;
}

std::vector<std::string> small_train(const std::string& out) {
  return {"train", "--classes", "8", "--per-class", "12", "--dim", "8", "--batch-size", "32",
          "--max-per-class", "4", "--iterations", "40", "--eval-interval", "20", "--hidden", "16",
          "--embedding-dim", "8", "--seed", "4", "--out", out};
}

TEST_F(CliTest, TrainThenEvalMatches) {
  const auto t = run_cli(small_train(path("run")));
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"metrics.json", "model", "histograms.csv"}) {
    EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
  }
  const auto e = run_cli({"eval", "--checkpoint", path("run/model"), "--classes", "8",
                          "--per-class", "12", "--dim", "8", "--seed", "4", "--out", path("ev")});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto metrics = nlohmann::json::parse(slurp(dir_ / "run" / "metrics.json"));
  const auto eval = nlohmann::json::parse(slurp(dir_ / "ev" / "eval.json"));
  EXPECT_EQ(metrics["recall"], eval["recall"]);
  EXPECT_EQ(metrics["meta"]["iterations"], 40);

  const auto h = run_cli({"hist-export", "--checkpoint", path("run/model"), "--classes", "8",
                          "--per-class", "12", "--dim", "8", "--seed", "4", "--out",
                          path("h.csv")});
  ASSERT_EQ(h.code, 0) << h.err;
  EXPECT_EQ(slurp(path("h.csv")), slurp(dir_ / "run" / "histograms.csv"));
  EXPECT_EQ(import_histograms(path("h.csv")).size(), 201u);
}

TEST_F(CliTest, RerunsAreByteIdentical) {
  ASSERT_EQ(run_cli(small_train(path("a"))).code, 0);
  ASSERT_EQ(run_cli(small_train(path("b"))).code, 0);
  for (const char* f : {"metrics.json", "model", "histograms.csv"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
  ASSERT_EQ(run_cli({"synth", "--seed", "9", "--out", path("s1.csv")}).code, 0);
  ASSERT_EQ(run_cli({"synth", "--seed", "9", "--out", path("s2.csv")}).code, 0);
  EXPECT_EQ(slurp(path("s1.csv")), slurp(path("s2.csv")));
}

TEST_F(CliTest, CsvDataSplitsByClass) {
  ASSERT_EQ(run_cli({"synth", "--classes", "8", "--per-class", "12", "--dim", "6", "--out",
                     path("d.csv")})
                .code,
            0);
  auto args = std::vector<std::string>{"train", "--data", path("d.csv"), "--batch-size", "16",
                                       "--iterations", "5", "--hidden", "8", "--embedding-dim",
                                       "4", "--out", path("csvrun")};
  const auto r = run_cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "csvrun" / "metrics.json"));
}

TEST_F(CliTest, FailuresExitNonZeroWithOneLine) {
  struct Case {
    std::vector<std::string> args;
    int code;
  };
  {
    std::ofstream f(path("ragged.csv"));
    f << "0,1,2\n1,3\n";
  }
  for (const auto& c : std::vector<Case>{
           {{"train", "--bins", "1"}, 2},
           {{"train", "--nope"}, 2},
           {{"train", "--data", path("ragged.csv"), "--out", path("x")}, 3},
           {{"train", "--data", path("absent.csv"), "--out", path("x")}, 5},
           {{"eval", "--checkpoint", path("absent.model"), "--out", path("x")}, 5},
           {{"train", "--classes", "4", "--per-class", "3", "--batch-size", "4", "--k", "20",
             "--out", path("x")},
            2},
       }) {
    const auto r = run_cli(c.args);
    EXPECT_EQ(r.code, c.code) << r.err;
    ASSERT_FALSE(r.err.empty());
    EXPECT_EQ(r.err.find('\n'), r.err.size() - 1) << r.err;
    EXPECT_EQ(r.err.rfind("histloss: ", 0), 0u) << r.err;
  }
}

TEST_F(CliTest, HelpExitsZero) {
  const auto r = run_cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("train"), std::string::npos);
}

}  // namespace
}  // namespace histloss::cli
