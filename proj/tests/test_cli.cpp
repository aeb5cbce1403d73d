// Copyright 2026 The RandQ Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "commands.hpp"
#include "experiment_config.hpp"
#include "randq/checkpoint.hpp"
#include "randq/error.hpp"

namespace randq {
namespace {

namespace fs = std::filesystem;
using cli::apply_set;
using cli::default_config;
using cli::qat_from_json;
using cli::resolve;
using nlohmann::json;

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "randq");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("randq_cli_" + std::to_string(counter_++) + "_" +
                                                 std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

std::vector<std::string> tiny_sets() {
  std::vector<std::string> out;
  for (const char* s : {"task.vocab_size=16", "task.seq_len=6", "task.n_train=120", "task.n_eval=20",
                        "model.n_enc_layers=1", "model.n_dec_layers=1", "model.d_model=8", "model.n_heads=2",
                        "model.d_ff=16", "model.quantize_scope=all_dense", "train.steps=6", "train.batch_size=8",
                        "train.warmup_steps=3", "train.eval_every=3"}) {
    out.push_back("--set");
    out.push_back(s);
  }
  return out;
}

std::vector<std::string> cmd(std::initializer_list<std::string> head, const std::vector<std::string>& tail = {}) {
  std::vector<std::string> out(head);
  out.insert(out.end(), tail.begin(), tail.end());
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

TEST(Dispatch, NoArgumentsPrintsUsageAndExitsTwo) {
  const CliRun r = run({});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_TRUE(r.out.empty());
}

TEST(Dispatch, UnknownSubcommandExitsTwo) {
  const CliRun r = run({"frobnicate"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("frobnicate"), std::string::npos);
}

TEST(Dispatch, UnknownFlagExitsTwo) {
  EXPECT_EQ(run({"train", "--no-such-flag"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"eval"}).code, cli::kExitUsage);  // --checkpoint is required
}

TEST(Dispatch, HelpExitsZero) {
  const CliRun r = run({"--help"});
  EXPECT_EQ(r.code, cli::kExitOk);
  for (const char* sub : {"gen-data", "train", "quantize", "eval", "sensitivity", "sweep", "report"}) {
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
  }
}

TEST(Dispatch, DomainErrorsExitOne) {
  TempDir dir;
  EXPECT_EQ(run(cmd({"gen-data", "--set", "nope=1", "-o", dir / "x"})).code, cli::kExitDomainError);
  EXPECT_EQ(run(cmd({"gen-data", "--set", "task.seq_len=\"long\"", "-o", dir / "x"})).code, cli::kExitDomainError);
  std::ofstream(dir / "bad.bin") << "not a checkpoint";
  const CliRun r = run(cmd({"eval", "--checkpoint", dir / "bad.bin", "-o", dir / "e"}));
  EXPECT_EQ(r.code, cli::kExitDomainError);
  EXPECT_NE(r.err.find("byte offset"), std::string::npos);
  EXPECT_EQ(run(cmd({"sweep", "-o", dir / "s"})).code, cli::kExitDomainError);  // empty grid
}

TEST(Config, SetOverridesExactlyOneKey) {
  const json base = resolve(std::nullopt, {}, nullptr).resolved;
  const json changed = resolve(std::nullopt, {"train.seed=7"}, nullptr).resolved;
  const json patch = json::diff(base, changed);
  ASSERT_EQ(patch.size(), 1u);
  EXPECT_EQ(patch[0]["path"], "/train/seed");
  EXPECT_EQ(patch[0]["value"], 7);
}

TEST(Config, SetComposesLeftToRight) {
  const auto cfg = resolve(std::nullopt, {"train.steps=10", "train.steps=20"}, nullptr);
  EXPECT_EQ(cfg.train.steps, 20);
}

TEST(Config, SetValueFallsBackToString) {
  json doc = default_config();
  apply_set(doc, "task.task=reverse");
  EXPECT_EQ(doc["task"]["task"], "reverse");
  apply_set(doc, "train.base_lr=0.5");
  EXPECT_EQ(doc["train"]["base_lr"], 0.5);
  EXPECT_THROW(apply_set(doc, "train.base_lr"), ConfigError);
  EXPECT_THROW(apply_set(doc, "train.nope=1"), ConfigError);
  EXPECT_THROW(apply_set(doc, "train=1"), ConfigError);  // replaces a section with a scalar
}

TEST(Config, UnknownKeysRejectedEverywhere) {
  EXPECT_THROW(resolve(std::nullopt, {"qat.bits=4"}, nullptr), ConfigError);
  EXPECT_THROW(resolve(std::nullopt, {R"(sweep.grid=[{"qat":{},"seed":[1]}])"}, nullptr), ConfigError);
  EXPECT_THROW(resolve(std::nullopt, {R"(sweep.grid=[{"qat":{"bits":4}}])"}, nullptr), ConfigError);
}

TEST(Config, TypeErrorsNameTheKey) {
  try {
    resolve(std::nullopt, {"train.steps=1.5"}, nullptr);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.steps"), std::string::npos);
  }
}

TEST(Config, SeedEnvironmentIsAFallback) {
  const auto env = resolve(std::nullopt, {}, "11");
  EXPECT_EQ(env.task.seed, 11u);
  EXPECT_EQ(env.train.seed, 11u);
  const auto set = resolve(std::nullopt, {"train.seed=3"}, "11");
  EXPECT_EQ(set.train.seed, 3u);
  EXPECT_EQ(set.task.seed, 11u);
  EXPECT_THROW(resolve(std::nullopt, {}, "-4"), ConfigError);
  EXPECT_THROW(resolve(std::nullopt, {}, "abc"), ConfigError);
}

TEST(Config, FileOverridesEnvironmentAndSetOverridesFile) {
  TempDir dir;
  std::ofstream(dir / "c.json") << R"({"train": {"seed": 5, "steps": 9}})";
  const auto cfg = resolve(fs::path(dir / "c.json"), {"train.steps=4"}, "11");
  EXPECT_EQ(cfg.train.seed, 5u);
  EXPECT_EQ(cfg.train.steps, 4);
  EXPECT_EQ(cfg.task.seed, 11u);
}

TEST(Config, QatObjectsMatchPresets) {
  EXPECT_EQ(qat_from_json({{"qat_method", "pqn"}, {"outlier_method", "norm"}}),
            QatConfig::qat_mode(QatMethod::kPqn, OutlierMethod::kNorm, 4, Granularity::kPerChannel));
  EXPECT_EQ(qat_from_json({{"qat_method", "ste"}, {"outlier_method", "none"}, {"bit", 8}}),
            QatConfig::qat_mode(QatMethod::kSte, OutlierMethod::kNone, 8, Granularity::kPerChannel));
  EXPECT_EQ(
      qat_from_json({{"qat_method", "pqn"}, {"outlier_method", "mixed"}, {"k", 3}, {"granularity", "per_tensor"}}),
      QatConfig::mixed_scale_mode(QatMethod::kPqn, 3, 4, Granularity::kPerTensor));
  EXPECT_EQ(qat_from_json({{"qat_method", "pqn"}, {"outlier_method", "lsc"}}),
            QatConfig::learnable_scale(QatMethod::kPqn, 4, Granularity::kPerChannel));
  EXPECT_EQ(qat_from_json({{"outlier_method", "vn"}, {"vn_std", 0.05}}), QatConfig::variational_noise(0.05f));
}

TEST(Config, QatNormAndScaleFields) {
  const QatConfig gen = qat_from_json({{"qat_method", "pqn"}, {"outlier_method", "norm"}, {"p", 2}, {"c", 0.3}});
  EXPECT_EQ(gen, QatConfig::generalization_mode(0.3, 4, Granularity::kPerChannel));
  EXPECT_TRUE(is_inf_norm(qat_from_json({{"p", "inf"}}).p));
  EXPECT_THROW(qat_from_json({{"p", "infinity"}}), ConfigError);
  // Norm decay with the scale gradient stopped is the outlier=none variant.
  EXPECT_FALSE(qat_from_json({{"qat_method", "pqn"}, {"outlier_method", "norm"}, {"stop_scale_gradient", true}})
                   .outlier_method == OutlierMethod::kNone);
  EXPECT_THROW(qat_from_json({{"qat_method", "pqn"}, {"stop_scale_gradient", false}}), ConfigError);
}

TEST(Config, CheckedInConfigsResolve) {
  std::size_t seen = 0;
  for (const auto& entry : fs::directory_iterator(RANDQ_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    SCOPED_TRACE(entry.path().string());
    EXPECT_NO_THROW(resolve(entry.path(), {}, nullptr));
    ++seen;
  }
  EXPECT_GE(seen, 3u);
}

TEST(Config, QatGridConfigIsNinetyRows) {
  const auto cfg = resolve(fs::path(RANDQ_CONFIG_DIR) / "qat_grid.json", {}, nullptr);
  std::size_t runs = 0;
  for (const SweepCell& c : cfg.grid) runs += c.seeds.size();
  EXPECT_EQ(cfg.grid.size(), 6u);
  EXPECT_EQ(runs * 3, 90u);
}

TEST(Config, DigestIgnoresOutputDir) {
  const auto a = resolve(std::nullopt, {"output_dir=a"}, nullptr);
  const auto b = resolve(std::nullopt, {"output_dir=b"}, nullptr);
  const auto c = resolve(std::nullopt, {"output_dir=a", "train.seed=1"}, nullptr);
  EXPECT_EQ(cli::digest(a.resolved), cli::digest(b.resolved));
  EXPECT_NE(cli::digest(a.resolved), cli::digest(c.resolved));
  EXPECT_EQ(cli::digest(a.resolved).size(), 16u);
}

TEST(Commands, PipelineWritesEveryArtifact) {
  TempDir dir;
  const auto sets = tiny_sets();
  ASSERT_EQ(run(cmd({"gen-data", "-o", dir / "data"}, sets)).code, 0);
  EXPECT_TRUE(fs::exists(dir.path() / "data" / "train.tsv"));
  EXPECT_TRUE(fs::exists(dir.path() / "data" / "eval.tsv"));

  const auto qat = cmd({"--set", "qat.qat_method=pqn", "--set", "qat.outlier_method=norm"}, sets);
  const CliRun tr = run(cmd({"train", "--data", dir / "data", "-o", dir / "run"}, qat));
  ASSERT_EQ(tr.code, 0) << tr.err;
  for (const char* f : {"checkpoint.bin", "trace.csv", "config.json", "config.digest"}) {
    EXPECT_TRUE(fs::exists(dir.path() / "run" / f)) << f;
  }
  const Checkpoint ckpt = load_checkpoint(dir.path() / "run" / "checkpoint.bin");
  EXPECT_EQ(ckpt.step, 6);
  std::string digest = slurp(dir.path() / "run" / "config.digest");
  EXPECT_EQ(ckpt.config_digest + "\n", digest);

  const std::string ck = dir / "run/checkpoint.bin";
  ASSERT_EQ(run(cmd({"quantize", "--checkpoint", ck, "-o", dir / "q"}, qat)).code, 0);
  const Checkpoint artifact = load_checkpoint(dir.path() / "q" / "artifact.bin");
  EXPECT_FALSE(artifact.quantized.empty());

  ASSERT_EQ(run(cmd({"eval", "--checkpoint", ck, "-o", dir / "e"}, qat)).code, 0);
  const auto rows = read_report(dir.path() / "e" / "eval.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].outlier_method, OutlierMethod::kNorm);
  EXPECT_GT(rows[0].model_size_bytes, rows[1].model_size_bytes);
  EXPECT_GT(rows[1].model_size_bytes, rows[2].model_size_bytes);

  const CliRun ea = run(cmd({"eval", "--checkpoint", dir / "q/artifact.bin", "-o", dir / "e2"}, qat));
  ASSERT_EQ(ea.code, 0) << ea.err;
  const auto artifact_rows = read_report(dir.path() / "e2" / "eval.csv");
  ASSERT_EQ(artifact_rows.size(), 1u);
  EXPECT_EQ(artifact_rows[0].eval_precision, "int4");
  EXPECT_EQ(artifact_rows[0].loss, rows[2].loss);

  const std::size_t int4 = rows[2].model_size_bytes;
  const std::string budget = "eval.budget_bytes=" + std::to_string(int4 + 1500);
  const CliRun sens = run(cmd({"sensitivity", "--checkpoint", ck, "--set", budget, "-o", dir / "s"}, qat));
  ASSERT_EQ(sens.code, 0) << sens.err;
  EXPECT_TRUE(fs::exists(dir.path() / "s" / "sensitivity.csv"));
  ASSERT_TRUE(fs::exists(dir.path() / "s" / "assignment.csv"));

  const CliRun mixed = run(cmd({"quantize", "--checkpoint", ck, "--assignment", dir / "s/assignment.csv", "-o",
                             dir / "q2"},
                            qat));
  ASSERT_EQ(mixed.code, 0) << mixed.err;
  const std::size_t mixed_size = model_size_bytes(load_checkpoint(dir.path() / "q2" / "artifact.bin"));
  EXPECT_GT(mixed_size, int4);
  EXPECT_LE(mixed_size, int4 + 1500);
}

TEST(Commands, OutputConfigRerunsBitIdentically) {
  TempDir dir;
  ASSERT_EQ(run(cmd({"train", "-o", dir / "a"}, tiny_sets())).code, 0);
  ASSERT_EQ(run({"train", "--config", dir / "a/config.json", "-o", dir / "b"}).code, 0);
  EXPECT_EQ(slurp(dir.path() / "a" / "checkpoint.bin"), slurp(dir.path() / "b" / "checkpoint.bin"));
  EXPECT_EQ(slurp(dir.path() / "a" / "trace.csv"), slurp(dir.path() / "b" / "trace.csv"));
}

TEST(Commands, SweepAndReport) {
  TempDir dir;
  auto sets = tiny_sets();
  sets.push_back("--set");
  sets.push_back(R"(sweep.grid=[{"qat":{"qat_method":"pqn","outlier_method":"norm"},"seeds":[1,2]},)"
                 R"({"qat":{"qat_method":"ste","outlier_method":"lsc"},"seeds":[3]}])");
  const CliRun sw = run(cmd({"sweep", "-o", dir / "w"}, sets));
  ASSERT_EQ(sw.code, 0) << sw.err;
  EXPECT_EQ(read_report(dir.path() / "w" / "report.csv").size(), 9u);

  const CliRun rep = run({"report", "--input", dir / "w/report.csv"});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_NE(rep.out.find("norm,pqn,4,int4,per_channel,2,0,"), std::string::npos) << rep.out;
  EXPECT_NE(rep.out.find("±"), std::string::npos);
}

}  // namespace
}  // namespace randq
