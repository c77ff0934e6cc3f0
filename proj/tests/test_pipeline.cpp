#include <doctest.h>

#include <sstream>

#include "groundcap/checkpoint.hpp"
#include "groundcap/cli.hpp"
#include "groundcap/pipeline.hpp"
#include "groundcap/trainer.hpp"
#include "test_util.hpp"

using namespace groundcap;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

SyntheticConfig tiny_world() {
  SyntheticConfig w;
  w.num_classes = 6;
  w.num_clutter = 2;
  w.regions = 6;
  w.feature_dim = 8;
  w.captions_per_scene = 2;
  w.min_objects = 2;
  w.max_objects = 3;
  w.train_scenes = 24;
  w.val_scenes = 6;
  w.test_scenes = 6;
  w.min_count = 1;
  w.max_len = 12;
  return w;
}

json tiny_experiment(const std::string& dataset) {
  return {{"name", "tiny"},
          {"dataset", dataset},
          {"matcher", {{"embed_dim", 8}, {"word_dim", 6}, {"epochs", 2}, {"batch_size", 8}}},
          {"captioner",
           {{"region_dim", 8}, {"word_dim", 6}, {"hidden", 8}, {"attention_dim", 8}}},
          {"stage1", {{"epochs", 2}, {"batch_size", 8}}},
          {"stage2", {{"epochs", 1}, {"batch_size", 8}}},
          {"max_len", 10}};
}

struct Cli {
  int code = 0;
  std::string out, err;
};

Cli cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Cli r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Lab with a generated dataset and a base experiment config.
struct Lab {
  test_util::TempDir tmp;
  fs::path data, config;

  Lab() {
    data = tmp.path() / "data";
    test_util::write(tmp.path() / "world.json", to_json(tiny_world()).dump());
    REQUIRE(cli({"generate-data", "--config", (tmp.path() / "world.json").string(), "--out",
                 data.string()})
                .code == 0);
    config = tmp.path() / "exp.json";
    test_util::write(config, tiny_experiment(data.string()).dump());
  }

  Cli train(const std::string& stage, std::vector<std::string> sets) {
    std::vector<std::string> args = {"train", stage, "--config", config.string()};
    for (auto& s : sets) {
      args.push_back("--set");
      args.push_back(s);
    }
    return cli(args);
  }
};

std::map<std::string, std::string> artifacts(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
    out[fs::relative(e.path(), dir).string()] = test_util::slurp(e.path());
  }
  return out;
}

// Runs the full chain under `root` and returns its artifacts.
std::map<std::string, std::string> full_chain(Lab& lab, const fs::path& root) {
  test_util::ScopedEnv env(kRunRootEnv, root.string());
  CHECK(lab.train("matcher", {"name=m", "matcher.noun_masked=true"}).code == 0);
  CHECK(lab.train("captioner-xe", {"name=xe", "stage1.teacher_run=m"}).code == 0);
  CHECK(lab.train("captioner-scst", {"name=rl", "stage2.init_run=xe", "stage2.matcher=pos-scan",
                                     "stage2.matcher_run=m"})
            .code == 0);
  CHECK(cli({"evaluate", "--run", "rl", "--split", "val"}).code == 0);
  CHECK(cli({"export-attention", "--run", "xe", "--split", "val", "--model", "captioner"}).code ==
        0);
  return artifacts(root);
}

}  // namespace

TEST_CASE("full chain writes every artifact and is deterministic") {
  Lab lab;
  const auto a = full_chain(lab, lab.tmp.path() / "runs-a");
  const auto b = full_chain(lab, lab.tmp.path() / "runs-b");
  CHECK(a == b);
  for (const char* f : {"m/ckpt-0.bin", "m/ckpt-best.bin", "m/ckpt-last.bin", "m/metrics.csv",
                        "m/config.json", "xe/ckpt-last.bin", "xe/metrics.csv", "rl/rewards.csv",
                        "rl/report-val.json", "rl/report-val.csv", "rl/captions-val.json",
                        "xe/attention-captioner-val.json"}) {
    INFO(f);
    CHECK(a.count(f) == 1);
  }
  const json report = json::parse(a.at("rl/report-val.json"));
  CHECK(report["M"].is_null());
  CHECK(report.contains("attention_accuracy"));

  const json manifest = json::parse(test_util::slurp(lab.tmp.path() / "runs-a/rl/manifest.json"));
  CHECK(manifest["subcommand"] == "train captioner-scst");
  CHECK(manifest["inputs"].contains("init"));
  CHECK(manifest["inputs"].contains("matcher"));
  CHECK(manifest["outputs"]["ckpt-last.bin"] ==
        file_sha256(lab.tmp.path() / "runs-a/rl/ckpt-last.bin"));
}

TEST_CASE("missing prerequisite stages exit with the dependency code") {
  Lab lab;
  test_util::ScopedEnv env(kRunRootEnv, (lab.tmp.path() / "runs").string());
  Cli r = lab.train("captioner-xe", {"name=xe", "stage1.teacher_run=nope"});
  CHECK(r.code == kExitDependency);
  CHECK(r.err.find("matcher") != std::string::npos);
  r = lab.train("captioner-scst", {"name=rl", "stage2.init_run=nope"});
  CHECK(r.code == kExitDependency);
  CHECK(r.err.find("captioner-xe") != std::string::npos);
  r = cli({"evaluate", "--run", "nope"});
  CHECK(r.code == kExitDependency);
  // A matcher run cannot initialize SCST.
  REQUIRE(lab.train("matcher", {"name=m", "matcher.epochs=1"}).code == 0);
  CHECK(lab.train("captioner-scst", {"name=rl", "stage2.init_run=m"}).code == kExitDependency);
  CHECK(lab.train("captioner-scst", {"name=rl", "stage2.init_run=m", "stage2.matcher=pos-scan",
                                     "stage2.matcher_run=m"})
            .code == kExitDependency);
  // The default matcher is SCAN, so it cannot teach POS-SCAN distillation.
  CHECK(lab.train("captioner-xe", {"name=xe", "stage1.teacher_run=m"}).code == kExitUsage);
}

TEST_CASE("malformed invocations exit with the usage code") {
  Lab lab;
  test_util::ScopedEnv env(kRunRootEnv, (lab.tmp.path() / "runs").string());
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"train", "bogus", "--config", lab.config.string()}).code == kExitUsage);
  CHECK(cli({"train", "matcher"}).code == kExitUsage);
  CHECK(lab.train("matcher", {"matcher.epoch=3"}).code == kExitUsage);
  CHECK(cli({"sweep-lambda1", "--config", lab.config.string(), "--lambdas", "a,b"}).code ==
        kExitUsage);
  CHECK(cli({"generate-data", "--config", (lab.tmp.path() / "none.json").string(), "--out",
             (lab.tmp.path() / "x").string()})
            .code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("greedy-only grounding metrics and beam evaluation") {
  Lab lab;
  test_util::ScopedEnv env(kRunRootEnv, (lab.tmp.path() / "runs").string());
  REQUIRE(lab.train("captioner-xe", {"name=xe", "stage1.supervision=none"}).code == 0);
  CHECK(cli({"evaluate", "--run", "xe", "--beam", "3"}).code == kExitUsage);
  const Cli r = cli({"evaluate", "--run", "xe", "--beam", "3", "--no-grounding"});
  CHECK(r.code == 0);
  const json report = json::parse(r.out);
  CHECK(report["C"].is_number());
}

TEST_CASE("lambda sweep writes one row per value") {
  Lab lab;
  test_util::ScopedEnv env(kRunRootEnv, (lab.tmp.path() / "runs").string());
  REQUIRE(lab.train("matcher", {"name=m", "matcher.epochs=1", "matcher.noun_masked=true"}).code ==
          0);
  const Cli r = cli({"sweep-lambda1", "--config", lab.config.string(), "--lambdas", "0,0.5",
                     "--set", "stage1.teacher_run=m", "--set", "stage1.epochs=1"});
  REQUIRE(r.code == 0);
  const std::string csv = test_util::slurp(lab.tmp.path() / "runs/tiny-sweep-lambda1.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(fs::exists(run_dir(sweep_run_name("tiny", 0.5)) / "report-val.json"));
}

TEST_CASE("matcher attention export holds stochastic rows for every caption") {
  Lab lab;
  test_util::ScopedEnv env(kRunRootEnv, (lab.tmp.path() / "runs").string());
  REQUIRE(lab.train("matcher", {"name=m", "matcher.epochs=1"}).code == 0);
  REQUIRE(cli({"export-attention", "--run", "m", "--split", "val", "--model", "matcher"}).code == 0);
  const json j = json::parse(test_util::slurp(run_dir("m") / "attention-matcher-val.json"));
  const Dataset ds = load_dataset(lab.data);
  size_t val_captions = 0;
  for (const auto& c : ds.captions) val_captions += ds.scene(c.scene_id).split == "val";
  REQUIRE(j["captions"].size() == val_captions);
  for (const auto& item : j["captions"]) {
    CHECK(item["rows"].size() == item["tokens"].size());
    for (const auto& row : item["rows"]) {
      double sum = 0;
      for (double v : row["weights"]) sum += v;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  CHECK(cli({"export-attention", "--run", "m", "--model", "captioner"}).code != kExitOk);
}

TEST_CASE("resumed training equals an uninterrupted run") {
  Lab lab;
  const Dataset ds = load_dataset(lab.data);
  ExperimentConfig cfg = experiment_config_from_json(tiny_experiment(lab.data.string()));
  const auto path = lab.tmp.path() / "state.bin";

  SUBCASE("matcher") {
    const MatcherState full = train_matcher(ds, cfg);
    ExperimentConfig one = cfg;
    one.matcher.epochs = 1;
    save_matcher_checkpoint(path, train_matcher(ds, one), one);
    MatcherState resumed = load_matcher_checkpoint(path);
    const MatcherState done = train_matcher(ds, cfg, &resumed);
    CHECK(done.epoch == full.epoch);
    for (size_t i = 0; i < full.params.tensors().size(); ++i) {
      CHECK(*done.params.tensors()[i].second == *full.params.tensors()[i].second);
      CHECK(*done.best.tensors()[i].second == *full.best.tensors()[i].second);
    }
    CHECK(done.history == full.history);
  }
  SUBCASE("stage 1") {
    cfg.stage1.loss.supervision = Supervision::kGroundTruth;
    const CaptionerState full = train_stage1(ds, cfg, nullptr);
    ExperimentConfig one = cfg;
    one.stage1.epochs = 1;
    save_captioner_checkpoint(path, train_stage1(ds, one, nullptr), one);
    CaptionerState resumed = load_captioner_checkpoint(path);
    const CaptionerState done = train_stage1(ds, cfg, nullptr, &resumed);
    for (size_t i = 0; i < full.params.tensors().size(); ++i) {
      CHECK(*done.params.tensors()[i].second == *full.params.tensors()[i].second);
    }
    CHECK(done.history == full.history);
  }
}

TEST_CASE("zero-weight distillation trains bit-identically to the unsupervised run") {
  Lab lab;
  const Dataset ds = load_dataset(lab.data);
  ExperimentConfig cfg = experiment_config_from_json(tiny_experiment(lab.data.string()));
  cfg.matcher.model.noun_masked = true;
  const MatcherState m = train_matcher(ds, cfg);
  const TeacherStore teacher = precompute_teacher_attention(ds, m.best, m.model);
  cfg.stage1.loss.supervision = Supervision::kNone;
  const CaptionerState plain = train_stage1(ds, cfg, nullptr);
  cfg.stage1.loss.supervision = Supervision::kPosScan;
  cfg.stage1.loss.lambda1 = 0.0;
  const CaptionerState zero = train_stage1(ds, cfg, &teacher);
  for (size_t i = 0; i < plain.params.tensors().size(); ++i) {
    CHECK(*zero.params.tensors()[i].second == *plain.params.tensors()[i].second);
  }
  CHECK(zero.history == plain.history);
}

TEST_CASE("rerunning a finished run resumes and a changed config starts over") {
  Lab lab;
  test_util::ScopedEnv env(kRunRootEnv, (lab.tmp.path() / "runs").string());
  REQUIRE(lab.train("matcher", {"name=m"}).code == 0);
  const std::string first = test_util::slurp(run_dir("m") / "ckpt-last.bin");
  REQUIRE(lab.train("matcher", {"name=m"}).code == 0);
  CHECK(test_util::slurp(run_dir("m") / "ckpt-last.bin") == first);
  test_util::write(run_dir("m") / "stale.txt", "x");
  REQUIRE(lab.train("matcher", {"name=m", "seed=2"}).code == 0);
  CHECK_FALSE(fs::exists(run_dir("m") / "stale.txt"));
  CHECK(test_util::slurp(run_dir("m") / "ckpt-last.bin") != first);
}
