#include "groundcap/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "groundcap/checkpoint.hpp"
#include "groundcap/datagen.hpp"
#include "groundcap/trainer.hpp"

namespace groundcap {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path run_root() {
  const char* env = std::getenv(kRunRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path run_dir(const std::string& name) {
  if (name.empty()) throw UsageError("run name is empty");
  return run_root() / name;
}

fs::path resolve_checkpoint(const fs::path& dir) {
  for (const char* name : {"ckpt-best.bin", "ckpt-last.bin", "ckpt-0.bin"}) {
    if (fs::exists(dir / name)) return dir / name;
  }
  return {};
}

std::string checkpoint_tag(const fs::path& ckpt) {
  return read_checkpoint(ckpt).header.value("tag", "");
}

RunLock::RunLock(const fs::path& dir) : path_(dir / "run.lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) throw std::runtime_error("run directory " + dir.string() + " is locked by " + path_.string());
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

namespace {

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::string csv_number(const json& v) {
  if (v.is_null()) return "";
  if (v.is_number_float()) {
    std::ostringstream out;
    out << std::setprecision(17) << v.get<double>();
    return out.str();
  }
  return v.dump();
}

void write_metrics_csv(const fs::path& path, const json& history) {
  std::ostringstream out;
  if (!history.empty()) {
    std::vector<std::string> keys = {"epoch"};
    for (const auto& [k, v] : history.front().items()) {
      if (k != "epoch") keys.push_back(k);
    }
    for (size_t i = 0; i < keys.size(); ++i) out << (i ? "," : "") << keys[i];
    out << "\n";
    for (const auto& row : history) {
      for (size_t i = 0; i < keys.size(); ++i) {
        out << (i ? "," : "") << (row.contains(keys[i]) ? csv_number(row.at(keys[i])) : "");
      }
      out << "\n";
    }
  } else {
    out << "epoch\n";
  }
  write_file_atomic(path, out.str());
}

struct Manifest {
  json j;
  Manifest(const std::string& name, const std::string& subcommand, const ExperimentConfig& cfg) {
    j = {{"run", name},
         {"subcommand", subcommand},
         {"config_hash", config_hash(cfg)},
         {"inputs", json::object()},
         {"outputs", json::object()},
         {"started", timestamp()}};
  }
  void input(const std::string& key, const fs::path& p) {
    j["inputs"][key] = {{"path", p.string()},
                        {"sha256", fs::is_regular_file(p) ? file_sha256(p) : ""}};
  }
  void finish(const fs::path& dir) {
    json outputs = json::object();
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      if (!entry.is_regular_file() || name == "manifest.json" || name == "run.lock") continue;
      outputs[name] = file_sha256(entry.path());
    }
    j["outputs"] = outputs;
    j["finished"] = timestamp();
    write_json(dir / "manifest.json", j);
  }
};

Dataset load_run_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.empty()) throw UsageError("config does not name a dataset");
  return load_dataset(cfg.dataset);
}

// Removes stale training artifacts when a run directory is reused with a
// different configuration.
bool prepare_run_dir(const fs::path& dir, const ExperimentConfig& cfg) {
  const fs::path cfg_file = dir / "config.json";
  const std::string text = to_json(cfg).dump(2) + "\n";
  bool resume = false;
  if (fs::exists(cfg_file) && fs::exists(dir / "ckpt-last.bin")) {
    resume = read_file(cfg_file) == text;
  }
  if (!resume) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      if (name != "run.lock") fs::remove_all(entry.path());
    }
  }
  write_file_atomic(cfg_file, text);
  return resume;
}

MatcherState load_matcher_run(const std::string& name, const std::string& needed_by) {
  if (name.empty()) {
    throw DependencyError(needed_by + " needs a trained matcher run; stage 'matcher' is missing "
                          "(set the run name in the config)");
  }
  const fs::path ckpt = resolve_checkpoint(run_dir(name));
  if (ckpt.empty()) {
    throw DependencyError(needed_by + " needs stage 'matcher': no checkpoint in " +
                          run_dir(name).string());
  }
  if (checkpoint_tag(ckpt) != "matcher") {
    throw DependencyError(needed_by + " needs stage 'matcher', but " + ckpt.string() +
                          " holds a different model");
  }
  MatcherState s = load_matcher_checkpoint(ckpt);
  s.params = s.best;
  return s;
}

}  // namespace

void generate_data(const fs::path& config, const fs::path& out) {
  std::ifstream in(config);
  if (!in) throw UsageError("cannot open data config " + config.string());
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw UsageError("data config " + config.string() + " is not valid JSON");
  const SyntheticConfig cfg = synthetic_config_from_json(j);
  save_dataset(generate_dataset(cfg), out);
}

fs::path train_matcher_run(const ExperimentConfig& cfg) {
  const fs::path dir = run_dir(cfg.name);
  RunLock lock(dir);
  Manifest manifest(cfg.name, "train matcher", cfg);
  const Dataset ds = load_run_dataset(cfg);
  manifest.input("dataset", fs::path(cfg.dataset) / "features.bin");
  MatcherState state;
  MatcherState* resume = nullptr;
  if (prepare_run_dir(dir, cfg)) {
    state = load_matcher_checkpoint(dir / "ckpt-last.bin");
    resume = &state;
  } else {
    state = init_matcher_state(ds, cfg);
    save_matcher_checkpoint(dir / "ckpt-0.bin", state, cfg);
    save_matcher_checkpoint(dir / "ckpt-best.bin", state, cfg, true);
    write_metrics_csv(dir / "metrics.csv", state.history);
  }
  const auto hook = [&](const MatcherState& s) {
    save_matcher_checkpoint(dir / "ckpt-last.bin", s, cfg);
    save_matcher_checkpoint(dir / "ckpt-best.bin", s, cfg, true);
    write_metrics_csv(dir / "metrics.csv", s.history);
  };
  train_matcher(ds, cfg, resume ? resume : &state, hook);
  manifest.finish(dir);
  return dir;
}

fs::path train_captioner_xe_run(const ExperimentConfig& cfg) {
  const Stage1Config& loss = cfg.stage1.loss;
  const bool distill =
      (loss.supervision == Supervision::kPosScan || loss.supervision == Supervision::kScan) &&
      loss.lambda1 != 0.0;
  MatcherState teacher_state;
  fs::path teacher_ckpt;
  std::string teacher_hash;
  if (distill) {
    teacher_state = load_matcher_run(cfg.stage1.teacher_run, "captioner-xe with distillation");
    teacher_ckpt = resolve_checkpoint(run_dir(cfg.stage1.teacher_run));
    teacher_hash = file_sha256(teacher_ckpt);
    if (teacher_state.model.noun_masked != (loss.supervision == Supervision::kPosScan)) {
      throw UsageError("teacher run " + cfg.stage1.teacher_run + " is not a " +
                       supervision_name(loss.supervision) + " matcher");
    }
  }
  const fs::path dir = run_dir(cfg.name);
  RunLock lock(dir);
  Manifest manifest(cfg.name, "train captioner-xe", cfg);
  const Dataset ds = load_run_dataset(cfg);
  manifest.input("dataset", fs::path(cfg.dataset) / "features.bin");
  TeacherStore store;
  if (distill) {
    if (teacher_state.model.feature_dim != resolve_captioner_config(cfg, ds).feature_dim) {
      throw UsageError("teacher matcher was trained on a different dataset");
    }
    manifest.input("teacher", teacher_ckpt);
    store = precompute_teacher_attention(ds, teacher_state.params, teacher_state.model);
  }
  CaptionerState state;
  CaptionerState* resume = nullptr;
  if (prepare_run_dir(dir, cfg)) {
    state = load_captioner_checkpoint(dir / "ckpt-last.bin");
    resume = &state;
  } else {
    state = init_captioner_state(ds, cfg);
    save_captioner_checkpoint(dir / "ckpt-0.bin", state, cfg);
    write_metrics_csv(dir / "metrics.csv", state.history);
  }
  const auto hook = [&](const CaptionerState& s) {
    save_captioner_checkpoint(dir / "ckpt-last.bin", s, cfg);
    write_metrics_csv(dir / "metrics.csv", s.history);
  };
  train_stage1(ds, cfg, distill ? &store : nullptr, resume ? resume : &state, hook);
  if (distill && file_sha256(teacher_ckpt) != teacher_hash) {
    throw std::runtime_error("teacher checkpoint changed during captioner training");
  }
  manifest.finish(dir);
  return dir;
}

fs::path train_captioner_scst_run(const ExperimentConfig& cfg) {
  const std::string& init_run = cfg.stage2.init_run;
  if (init_run.empty()) {
    throw DependencyError("captioner-scst needs stage 'captioner-xe'; set stage2.init_run");
  }
  const fs::path init_ckpt = resolve_checkpoint(run_dir(init_run));
  if (init_ckpt.empty() || checkpoint_tag(init_ckpt) != "captioner") {
    throw DependencyError("captioner-scst needs stage 'captioner-xe': no captioner checkpoint in " +
                          run_dir(init_run).string());
  }
  const CaptionerState init = load_captioner_checkpoint(init_ckpt);
  MatcherState matcher;
  const bool use_matcher = cfg.stage2.reward.matcher != MatcherReward::kNone;
  if (use_matcher) {
    matcher = load_matcher_run(cfg.stage2.reward.matcher_run, "captioner-scst matcher reward");
    if (matcher.model.noun_masked != (cfg.stage2.reward.matcher == MatcherReward::kPosScan)) {
      throw UsageError("matcher run " + cfg.stage2.reward.matcher_run + " is not a " +
                       matcher_reward_name(cfg.stage2.reward.matcher) + " matcher");
    }
  }

  const fs::path dir = run_dir(cfg.name);
  RunLock lock(dir);
  Manifest manifest(cfg.name, "train captioner-scst", cfg);
  const Dataset ds = load_run_dataset(cfg);
  manifest.input("dataset", fs::path(cfg.dataset) / "features.bin");
  manifest.input("init", init_ckpt);
  if (use_matcher) manifest.input("matcher", resolve_checkpoint(run_dir(cfg.stage2.reward.matcher_run)));

  CaptionerState state;
  CaptionerState* resume = nullptr;
  std::string reward_log;
  if (prepare_run_dir(dir, cfg)) {
    state = load_captioner_checkpoint(dir / "ckpt-last.bin");
    resume = &state;
    // Keep only the rows of completed epochs.
    std::istringstream in(read_file(dir / "rewards.csv"));
    std::string line;
    while (std::getline(in, line)) {
      const int epoch = std::atoi(line.c_str());
      if (reward_log.empty() || (epoch >= 1 && epoch <= state.epoch)) reward_log += line + "\n";
    }
  } else {
    state.model = init.model;
    state.params = init.params;
    state.adam = Adam<CaptionerParams>::zeros(init.params);
    state.rng = Rng(cfg.seed);
    save_captioner_checkpoint(dir / "ckpt-0.bin", state, cfg);
    write_metrics_csv(dir / "metrics.csv", state.history);
    reward_log = "epoch,batch,cider,matcher,baseline_gap\n";
    write_file_atomic(dir / "rewards.csv", reward_log);
  }
  const auto reward_hook = [&](const RewardLogRow& r) {
    std::ostringstream out;
    out << std::setprecision(17) << r.epoch << ',' << r.batch << ',' << r.cider << ','
        << r.matcher << ',' << r.gap << '\n';
    reward_log += out.str();
  };
  const auto hook = [&](const CaptionerState& s) {
    save_captioner_checkpoint(dir / "ckpt-last.bin", s, cfg);
    write_metrics_csv(dir / "metrics.csv", s.history);
    write_file_atomic(dir / "rewards.csv", reward_log);
  };
  train_stage2_scst(ds, cfg, init.params, use_matcher ? &matcher.params : nullptr, matcher.model,
                    resume ? resume : &state, hook, reward_hook);
  manifest.finish(dir);
  return dir;
}

MetricsReport evaluate_run(const fs::path& dir, const EvaluateOptions& opts) {
  if (opts.beam > 1 && opts.grounding) {
    throw UsageError("grounding metrics (attention accuracy, F1) require greedy decoding; "
                     "beam search is disabled for them, rerun with --beam 1 or --no-grounding");
  }
  const fs::path ckpt = resolve_checkpoint(dir);
  if (ckpt.empty()) throw DependencyError("no checkpoint in " + dir.string());
  if (checkpoint_tag(ckpt) != "captioner") {
    throw UsageError("evaluate expects a captioner run, " + dir.string() + " holds a matcher");
  }
  ExperimentConfig cfg;
  const CaptionerState state = load_captioner_checkpoint(ckpt, &cfg);
  const Dataset ds = load_run_dataset(cfg);
  if (ds.scenes_in(opts.split).empty()) throw UsageError("split '" + opts.split + "' is empty");
  CaptionerEvaluation eval =
      evaluate_captioner(ds, state.params, state.model, opts.split, cfg.max_len, opts.beam);
  if (!opts.grounding) {
    eval.report.attention_accuracy = 0;
    eval.report.f1_all = 0;
    eval.report.f1_loc = 0;
  }
  json j = eval.report.to_json();
  j["split"] = opts.split;
  j["beam"] = opts.beam;
  j["checkpoint"] = ckpt.filename().string();
  j["cross_entropy"] = eval.cross_entropy;
  write_json(dir / ("report-" + opts.split + ".json"), j);
  write_file_atomic(dir / ("report-" + opts.split + ".csv"),
                    MetricsReport::csv_header() + "\n" + eval.report.csv_row() + "\n");
  json generated = json::array();
  for (const auto& g : eval.generated) {
    std::vector<std::string> words;
    for (int t : g.tokens) words.push_back(ds.vocab.word(t));
    generated.push_back({{"scene_id", g.scene_id}, {"tokens", g.tokens}, {"text", words}});
  }
  write_json(dir / ("captions-" + opts.split + ".json"), generated);
  return eval.report;
}

namespace {

json dump_rows(const AttentionMatrix& a, const SceneRecord& scene) {
  json rows = json::array();
  for (int r = 0; r < a.rows(); ++r) {
    const int arg = a.argmax(r);
    std::vector<double> w;
    for (int i = 0; i < a.regions(); ++i) w.push_back(a.weights(r, i));
    rows.push_back({{"weights", w},
                    {"argmax", arg},
                    {"box", scene.boxes[static_cast<size_t>(arg)].to_array()}});
  }
  return rows;
}

json dump_entry(const Dataset& ds, const std::string& caption_id, const std::string& scene_id,
                const std::vector<int>& tokens, const AttentionMatrix& a) {
  std::vector<std::string> words;
  for (int t : tokens) words.push_back(ds.vocab.word(t));
  json e = {{"scene_id", scene_id}, {"tokens", tokens}, {"words", words},
            {"rows", dump_rows(a, ds.scene(scene_id))}};
  if (!caption_id.empty()) e["caption_id"] = caption_id;
  return e;
}

}  // namespace

fs::path export_attention(const fs::path& dir, const std::string& split, const std::string& model) {
  if (model != "matcher" && model != "captioner") {
    throw UsageError("unknown model '" + model + "' (expected matcher or captioner)");
  }
  const fs::path ckpt = resolve_checkpoint(dir);
  if (ckpt.empty()) throw DependencyError("no checkpoint in " + dir.string());
  if (checkpoint_tag(ckpt) != model) {
    throw UsageError(dir.string() + " does not hold a " + model + " checkpoint");
  }
  ExperimentConfig cfg;
  json out = {{"model", model}, {"split", split}, {"checkpoint", ckpt.filename().string()}};
  json captions = json::array();
  if (model == "matcher") {
    MatcherState s = load_matcher_checkpoint(ckpt, &cfg);
    const Dataset ds = load_run_dataset(cfg);
    for (const auto& d : matcher_attention_dumps(ds, s.best, s.model, split)) {
      captions.push_back(dump_entry(ds, d.caption_id, d.scene_id, d.tokens, d.attention));
    }
  } else {
    const CaptionerState s = load_captioner_checkpoint(ckpt, &cfg);
    const Dataset ds = load_run_dataset(cfg);
    const CaptionerEvaluation eval = evaluate_captioner(ds, s.params, s.model, split, cfg.max_len);
    for (const auto& d : eval.teacher_forced) {
      captions.push_back(dump_entry(ds, d.caption_id, d.scene_id, d.tokens, d.attention));
    }
    json decoded = json::array();
    for (const auto& g : eval.generated) {
      AttentionMatrix a{g.beta, AttentionRole::kCaptioner};
      decoded.push_back(dump_entry(ds, "", g.scene_id, g.tokens, a));
    }
    out["decoded"] = decoded;
  }
  out["captions"] = captions;
  const fs::path path = dir / ("attention-" + model + "-" + split + ".json");
  write_json(path, out);
  return path;
}

std::string sweep_run_name(const std::string& base, double lambda1) {
  std::ostringstream out;
  out << base << "-lambda" << lambda1;
  return out.str();
}

fs::path sweep_lambda1(const ExperimentConfig& base, const std::vector<double>& lambdas,
                       const std::string& split) {
  if (lambdas.empty()) throw UsageError("lambda list is empty");
  std::ostringstream csv;
  csv << "lambda1,B4,C,S,F1_all,F1_loc,status\n";
  csv << std::setprecision(17);
  for (double l : lambdas) {
    ExperimentConfig cfg = base;
    cfg.stage1.loss.lambda1 = l;
    cfg.name = sweep_run_name(base.name, l);
    try {
      const fs::path dir = train_captioner_xe_run(cfg);
      const MetricsReport r = evaluate_run(dir, {split, 1, true});
      csv << l << ',' << r.bleu4 << ',' << r.cider << ",," << r.f1_all << ',' << r.f1_loc
          << ",ok\n";
    } catch (const std::exception& e) {
      std::string msg = e.what();
      for (auto& ch : msg) {
        if (ch == ',' || ch == '\n') ch = ' ';
      }
      csv << l << ",,,,,," << "failed: " << msg << "\n";
    }
  }
  const fs::path path = run_root() / (base.name + "-sweep-lambda1.csv");
  write_file_atomic(path, csv.str());
  return path;
}

}  // namespace groundcap
