#include <doctest.h>

#include "groundcap/checkpoint.hpp"
#include "groundcap/config.hpp"
#include "test_util.hpp"

using namespace groundcap;

TEST_CASE("SHA-256 of the standard test vectors") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  test_util::TempDir tmp;
  test_util::write(tmp.path() / "f", "abc");
  CHECK(file_sha256(tmp.path() / "f") == sha256_hex("abc"));
}

TEST_CASE("checkpoint round trip preserves header and arrays bit for bit") {
  test_util::TempDir tmp;
  Rng rng(61);
  CheckpointData data;
  data.header = {{"tag", "matcher"}, {"epoch", 3}};
  Matrix a(3, 2), b(1, 5);
  fill_normal(a, 1.0, rng);
  fill_normal(b, 1e-300, rng);
  data.arrays = {{"a", a}, {"b", b}, {"empty", Matrix(0, 4)}};
  const auto path = tmp.path() / "ckpt.bin";
  write_checkpoint(path, data);
  const CheckpointData back = read_checkpoint(path);
  CHECK(back.header["tag"] == "matcher");
  CHECK(back.header["epoch"] == 3);
  CHECK(back.array("a") == a);
  CHECK(back.array("b") == b);
  CHECK(back.array("empty").cols() == 4);
  CHECK(back.has("a"));
  CHECK_FALSE(back.has("c"));
  CHECK_THROWS_AS(back.array("c"), CheckpointError);
}

TEST_CASE("corrupt checkpoints are rejected") {
  test_util::TempDir tmp;
  CheckpointData data;
  data.header = {{"tag", "x"}};
  data.arrays = {{"a", Matrix::Ones(4, 4)}};
  const auto path = tmp.path() / "ckpt.bin";
  write_checkpoint(path, data);
  const std::string bytes = test_util::slurp(path);

  std::string bad = bytes;
  bad[0] = 'X';
  test_util::write(path, bad);
  CHECK_THROWS_AS(read_checkpoint(path), CheckpointError);

  test_util::write(path, bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(read_checkpoint(path), CheckpointError);

  CHECK_THROWS_AS(read_checkpoint(tmp.path() / "missing.bin"), CheckpointError);
}

TEST_CASE("experiment config survives a JSON round trip") {
  ExperimentConfig c = desk_config();
  c.name = "rt";
  c.dataset = "data/x";
  c.seed = 9;
  c.stage1.loss.supervision = Supervision::kGroundTruth;
  c.stage1.loss.gt_form = GtLossForm::kKl;
  c.stage2.reward.matcher = MatcherReward::kScan;
  c.stage2.reward.matcher_run = "m";
  const ExperimentConfig back = experiment_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(config_hash(back) == config_hash(c));
  c.seed = 10;
  CHECK(config_hash(back) != config_hash(c));
}

TEST_CASE("missing keys keep desk defaults and unknown keys are rejected") {
  const ExperimentConfig c = experiment_config_from_json({{"name", "n"}, {"matcher", {{"epochs", 2}}}});
  CHECK(c.matcher.epochs == 2);
  CHECK(c.matcher.model.embed_dim == desk_config().matcher.model.embed_dim);
  CHECK_THROWS_AS(experiment_config_from_json({{"nmae", "n"}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"matcher", {{"epoch", 2}}}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json({{"stage1", {{"supervision", "bogus"}}}}),
                  ConfigError);
}

TEST_CASE("dotted overrides parse JSON values and fall back to strings") {
  nlohmann::json j = to_json(desk_config());
  apply_overrides(j, {"stage1.lambda1=0.25", "matcher.noun_masked=false", "name=abc",
                      "stage1.supervision=scan"});
  const ExperimentConfig c = experiment_config_from_json(j);
  CHECK(c.stage1.loss.lambda1 == 0.25);
  CHECK_FALSE(c.matcher.model.noun_masked);
  CHECK(c.name == "abc");
  CHECK(c.stage1.loss.supervision == Supervision::kScan);
  CHECK_THROWS_AS(apply_overrides(j, {"stage1.lamda1=1"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(j, {"stage1.lambda1"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(j, {"=1"}), ConfigError);
}

TEST_CASE("config files resolve relative datasets and apply overrides") {
  test_util::TempDir tmp;
  std::filesystem::create_directories(tmp.path() / "data");
  test_util::write(tmp.path() / "exp.json", R"({"name": "f", "dataset": "data"})");
  const ExperimentConfig c = load_experiment_config(tmp.path() / "exp.json", {"seed=4"});
  CHECK(c.seed == 4);
  CHECK(std::filesystem::equivalent(c.dataset, tmp.path() / "data"));
  test_util::write(tmp.path() / "bad.json", "{");
  CHECK_THROWS_AS(load_experiment_config(tmp.path() / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_experiment_config(tmp.path() / "none.json"), ConfigError);
}

TEST_CASE("stage-1 learning rate decays by 0.8 every three epochs") {
  Stage1Training s;
  s.lr = 5e-4;
  const double want[] = {5e-4, 5e-4, 5e-4, 4e-4, 4e-4, 4e-4, 3.2e-4};
  for (int e = 0; e < 7; ++e) CHECK(stage1_lr(s, e) == doctest::Approx(want[e]).epsilon(1e-12));
}

TEST_CASE("config validation rejects bad values") {
  ExperimentConfig c = desk_config();
  CHECK_NOTHROW(c.validate());
  c.beam = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = desk_config();
  c.stage2.lr = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
