#include "groundcap/config.hpp"

#include <cmath>
#include <fstream>

#include "groundcap/checkpoint.hpp"
#include "groundcap/datagen.hpp"

namespace groundcap {

using nlohmann::json;

ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.matcher.model.feature_dim = 0;
  c.matcher.model.embed_dim = 96;
  c.matcher.model.word_dim = 64;
  c.captioner.feature_dim = 0;
  c.captioner.region_dim = 64;
  c.captioner.word_dim = 64;
  c.captioner.hidden = 64;
  c.captioner.attention_dim = 64;
  return c;
}

ExperimentConfig paper_config() {
  ExperimentConfig c;
  c.matcher.model.feature_dim = 0;
  c.matcher.model.embed_dim = 1024;
  c.matcher.model.word_dim = 300;
  c.matcher.epochs = 30;
  c.captioner.feature_dim = 0;
  c.captioner.region_dim = 1024;
  c.captioner.word_dim = 512;
  c.captioner.hidden = 512;
  c.captioner.attention_dim = 512;
  c.stage1.epochs = 30;
  c.stage2.epochs = 80;
  return c;
}

void ExperimentConfig::validate() const {
  if (!(matcher.lr > 0 && stage1.lr > 0 && stage2.lr > 0)) {
    throw ConfigError("learning rates must be > 0");
  }
  if (matcher.epochs < 0 || stage1.epochs < 0 || stage2.epochs < 0) {
    throw ConfigError("epochs must be >= 0");
  }
  if (matcher.batch_size < 2) throw ConfigError("matcher batch_size must be >= 2");
  if (stage1.batch_size < 1 || stage2.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (matcher.patience < 1) throw ConfigError("patience must be >= 1");
  if (stage1.decay_every < 1) throw ConfigError("decay_every must be >= 1");
  if (!(stage1.lr_decay > 0)) throw ConfigError("lr_decay must be > 0");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  if (beam < 1) throw ConfigError("beam must be >= 1");
  if (!(optimizer.clip_norm > 0)) throw ConfigError("clip_norm must be > 0");
  stage1.loss.validate();
  stage2.reward.validate();
}

json to_json(const ExperimentConfig& c) {
  json m = to_json(c.matcher.model);
  m["lr"] = c.matcher.lr;
  m["epochs"] = c.matcher.epochs;
  m["batch_size"] = c.matcher.batch_size;
  m["patience"] = c.matcher.patience;
  json s1 = to_json(c.stage1.loss);
  s1["lr"] = c.stage1.lr;
  s1["lr_decay"] = c.stage1.lr_decay;
  s1["decay_every"] = c.stage1.decay_every;
  s1["epochs"] = c.stage1.epochs;
  s1["batch_size"] = c.stage1.batch_size;
  s1["teacher_run"] = c.stage1.teacher_run;
  json s2 = to_json(c.stage2.reward);
  s2["lr"] = c.stage2.lr;
  s2["epochs"] = c.stage2.epochs;
  s2["batch_size"] = c.stage2.batch_size;
  s2["init_run"] = c.stage2.init_run;
  return {{"name", c.name},
          {"dataset", c.dataset},
          {"seed", c.seed},
          {"matcher", m},
          {"captioner", to_json(c.captioner)},
          {"stage1", s1},
          {"stage2", s2},
          {"optimizer",
           {{"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"clip_norm", c.optimizer.clip_norm}}},
          {"max_len", c.max_len},
          {"beam", c.beam}};
}

namespace {

void reject_unknown(const json& defaults, const json& given, const std::string& prefix) {
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!defaults.contains(key)) throw ConfigError("unknown config key: " + path);
    if (defaults.at(key).is_object()) {
      if (!value.is_object()) throw ConfigError("config key " + path + " must be an object");
      reject_unknown(defaults.at(key), value, path);
    }
  }
}

}  // namespace

ExperimentConfig experiment_config_from_json(const json& given) {
  if (!given.is_object()) throw ConfigError("experiment config must be a JSON object");
  json j = to_json(desk_config());
  reject_unknown(j, given, "");
  j.merge_patch(given);
  try {
    ExperimentConfig c;
    c.name = j.at("name").get<std::string>();
    c.dataset = j.at("dataset").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const json& m = j.at("matcher");
    c.matcher.model = matcher_config_from_json(m);
    c.matcher.lr = m.at("lr").get<double>();
    c.matcher.epochs = m.at("epochs").get<int>();
    c.matcher.batch_size = m.at("batch_size").get<int>();
    c.matcher.patience = m.at("patience").get<int>();
    c.captioner = captioner_config_from_json(j.at("captioner"));
    const json& s1 = j.at("stage1");
    c.stage1.loss = stage1_config_from_json(s1);
    c.stage1.lr = s1.at("lr").get<double>();
    c.stage1.lr_decay = s1.at("lr_decay").get<double>();
    c.stage1.decay_every = s1.at("decay_every").get<int>();
    c.stage1.epochs = s1.at("epochs").get<int>();
    c.stage1.batch_size = s1.at("batch_size").get<int>();
    c.stage1.teacher_run = s1.at("teacher_run").get<std::string>();
    const json& s2 = j.at("stage2");
    c.stage2.reward = reward_config_from_json(s2);
    c.stage2.lr = s2.at("lr").get<double>();
    c.stage2.epochs = s2.at("epochs").get<int>();
    c.stage2.batch_size = s2.at("batch_size").get<int>();
    c.stage2.init_run = s2.at("init_run").get<std::string>();
    const json& o = j.at("optimizer");
    c.optimizer.beta1 = o.at("beta1").get<double>();
    c.optimizer.beta2 = o.at("beta2").get<double>();
    c.optimizer.eps = o.at("eps").get<double>();
    c.optimizer.clip_norm = o.at("clip_norm").get<double>();
    c.max_len = j.at("max_len").get<int>();
    c.beam = j.at("beam").get<int>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
}

void apply_overrides(json& j, const std::vector<std::string>& overrides) {
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override '" + item + "' is not of the form key=value");
    }
    const std::string key = item.substr(0, eq);
    const std::string raw = item.substr(eq + 1);
    std::string pointer = "/" + key;
    for (auto& ch : pointer) {
      if (ch == '.') ch = '/';
    }
    const json::json_pointer ptr(pointer);
    if (!j.contains(ptr)) throw ConfigError("unknown config key: " + key);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    j[ptr] = value;
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json given = json::parse(in, nullptr, false);
  if (given.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  json full = to_json(desk_config());
  reject_unknown(full, given, "");
  full.merge_patch(given);
  apply_overrides(full, overrides);
  ExperimentConfig cfg = experiment_config_from_json(full);
  // Relative dataset paths resolve against the config file's directory.
  if (!cfg.dataset.empty() && std::filesystem::path(cfg.dataset).is_relative() &&
      !std::filesystem::exists(cfg.dataset)) {
    const auto candidate = path.parent_path() / cfg.dataset;
    if (std::filesystem::exists(candidate)) cfg.dataset = candidate.string();
  }
  return cfg;
}

std::string config_hash(const ExperimentConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

double stage1_lr(const Stage1Training& cfg, int epoch) {
  return cfg.lr * std::pow(cfg.lr_decay, epoch / cfg.decay_every);
}

}  // namespace groundcap
