#include "groundcap/trainer.hpp"

#include <algorithm>
#include <sstream>

#include "groundcap/checkpoint.hpp"
#include "groundcap/cider.hpp"
#include "groundcap/objectives.hpp"

namespace groundcap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string rng_to_string(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

Rng rng_from_string(const std::string& s) {
  Rng rng;
  std::istringstream in(s);
  in >> rng;
  if (!in) throw CheckpointError("malformed rng state in checkpoint");
  return rng;
}

int dataset_feature_dim(const Dataset& ds) {
  for (const auto& s : ds.scenes) {
    if (s.features.cols() > 0) return static_cast<int>(s.features.cols());
  }
  return ds.gen_config.feature_dim;
}

void check_finite(double loss, const std::string& what, int epoch, int batch) {
  if (!std::isfinite(loss)) {
    throw TrainingDiverged(what + " loss became non-finite at epoch " + std::to_string(epoch + 1) +
                           ", batch " + std::to_string(batch));
  }
}

}  // namespace

MatcherConfig resolve_matcher_config(const ExperimentConfig& cfg, const Dataset& ds) {
  MatcherConfig m = cfg.matcher.model;
  if (m.feature_dim == 0) m.feature_dim = dataset_feature_dim(ds);
  if (m.vocab_size == 0) m.vocab_size = ds.vocab.size();
  if (m.feature_dim != dataset_feature_dim(ds) || m.vocab_size != ds.vocab.size()) {
    throw ConfigError("matcher dimensions do not match the dataset");
  }
  m.validate();
  return m;
}

CaptionerConfig resolve_captioner_config(const ExperimentConfig& cfg, const Dataset& ds) {
  CaptionerConfig c = cfg.captioner;
  if (c.feature_dim == 0) c.feature_dim = dataset_feature_dim(ds);
  if (c.vocab_size == 0) c.vocab_size = ds.vocab.size();
  if (c.feature_dim != dataset_feature_dim(ds) || c.vocab_size != ds.vocab.size()) {
    throw ConfigError("captioner dimensions do not match the dataset");
  }
  c.bos_id = Vocabulary::kBos;
  c.eos_id = Vocabulary::kEos;
  c.validate();
  return c;
}

void save_matcher_checkpoint(const fs::path& path, const MatcherState& state,
                             const ExperimentConfig& cfg, bool best_only) {
  CheckpointData data;
  data.header = {{"tag", "matcher"},
                 {"model", to_json(state.model)},
                 {"experiment", to_json(cfg)},
                 {"seed", cfg.seed},
                 {"epoch", state.epoch},
                 {"adam_step", state.adam.step},
                 {"rng", rng_to_string(state.rng)},
                 {"history", state.history},
                 {"best_val", std::isfinite(state.best_val) ? json(state.best_val) : json(nullptr)},
                 {"best_epoch", state.best_epoch},
                 {"since_best", state.since_best},
                 {"stopped", state.stopped},
                 {"holds_best", best_only}};
  append_params(best_only ? state.best : state.params, "", data);
  append_params(state.best, "best.", data);
  append_params(state.adam.m, "adam.m.", data);
  append_params(state.adam.v, "adam.v.", data);
  write_checkpoint(path, data);
}

MatcherState load_matcher_checkpoint(const fs::path& path, ExperimentConfig* cfg) {
  const CheckpointData data = read_checkpoint(path);
  if (data.header.value("tag", "") != "matcher") {
    throw CheckpointError(path.string() + " is not a matcher checkpoint");
  }
  MatcherState s;
  s.model = matcher_config_from_json(data.header.at("model"));
  s.params = MatcherParams::zeros(s.model);
  s.best = s.params;
  s.adam = Adam<MatcherParams>::zeros(s.params);
  load_params(data, "", s.params);
  load_params(data, "best.", s.best);
  load_params(data, "adam.m.", s.adam.m);
  load_params(data, "adam.v.", s.adam.v);
  s.adam.step = data.header.at("adam_step").get<long>();
  s.epoch = data.header.at("epoch").get<int>();
  s.rng = rng_from_string(data.header.at("rng").get<std::string>());
  s.history = data.header.at("history");
  const json& bv = data.header.at("best_val");
  s.best_val = bv.is_null() ? INFINITY : bv.get<double>();
  s.best_epoch = data.header.at("best_epoch").get<int>();
  s.since_best = data.header.at("since_best").get<int>();
  s.stopped = data.header.at("stopped").get<bool>();
  if (cfg) *cfg = experiment_config_from_json(data.header.at("experiment"));
  return s;
}

void save_captioner_checkpoint(const fs::path& path, const CaptionerState& state,
                               const ExperimentConfig& cfg) {
  CheckpointData data;
  data.header = {{"tag", "captioner"},
                 {"model", to_json(state.model)},
                 {"experiment", to_json(cfg)},
                 {"seed", cfg.seed},
                 {"epoch", state.epoch},
                 {"adam_step", state.adam.step},
                 {"rng", rng_to_string(state.rng)},
                 {"history", state.history}};
  append_params(state.params, "", data);
  append_params(state.adam.m, "adam.m.", data);
  append_params(state.adam.v, "adam.v.", data);
  write_checkpoint(path, data);
}

CaptionerState load_captioner_checkpoint(const fs::path& path, ExperimentConfig* cfg) {
  const CheckpointData data = read_checkpoint(path);
  if (data.header.value("tag", "") != "captioner") {
    throw CheckpointError(path.string() + " is not a captioner checkpoint");
  }
  CaptionerState s;
  s.model = captioner_config_from_json(data.header.at("model"));
  s.params = CaptionerParams::zeros(s.model);
  s.adam = Adam<CaptionerParams>::zeros(s.params);
  load_params(data, "", s.params);
  load_params(data, "adam.m.", s.adam.m);
  load_params(data, "adam.v.", s.adam.v);
  s.adam.step = data.header.at("adam_step").get<long>();
  s.epoch = data.header.at("epoch").get<int>();
  s.rng = rng_from_string(data.header.at("rng").get<std::string>());
  s.history = data.header.at("history");
  if (cfg) *cfg = experiment_config_from_json(data.header.at("experiment"));
  return s;
}

MatcherState init_matcher_state(const Dataset& ds, const ExperimentConfig& cfg) {
  MatcherState s;
  s.model = resolve_matcher_config(cfg, ds);
  s.rng = Rng(cfg.seed);
  s.params = MatcherParams::init(s.model, s.rng);
  s.best = s.params;
  s.adam = Adam<MatcherParams>::zeros(s.params);
  return s;
}

CaptionerState init_captioner_state(const Dataset& ds, const ExperimentConfig& cfg) {
  CaptionerState s;
  s.model = resolve_captioner_config(cfg, ds);
  s.rng = Rng(cfg.seed);
  s.params = CaptionerParams::init(s.model, s.rng);
  s.adam = Adam<CaptionerParams>::zeros(s.params);
  return s;
}

namespace {

const CaptionRecord& nth_caption(const Dataset& ds, int scene, int c) {
  const auto& caps = ds.captions_of(scene);
  if (caps.empty()) throw std::invalid_argument("scene " + ds.scenes[scene].scene_id + " has no captions");
  return ds.captions[static_cast<size_t>(caps[static_cast<size_t>(c) % caps.size()])];
}

MatcherBatch make_matcher_batch(const Dataset& ds, const std::vector<int>& scenes, int c) {
  MatcherBatch b;
  for (int s : scenes) {
    const CaptionRecord& cap = nth_caption(ds, s, c);
    b.features.push_back(&ds.scenes[static_cast<size_t>(s)].features);
    b.tokens.emplace_back(cap.tokens);
    b.noun_masks.push_back(&cap.noun_mask);
  }
  return b;
}

}  // namespace

MatcherValidation validate_matcher(const Dataset& ds, const MatcherParams& params,
                                   const MatcherConfig& model, const std::string& split,
                                   int batch_size) {
  MatcherValidation out;
  const std::vector<int> scenes = ds.scenes_in(split);
  if (scenes.size() < 2) return out;
  double total = 0;
  int batches = 0;
  for (size_t start = 0; start < scenes.size(); start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(scenes.size(), start + static_cast<size_t>(batch_size));
    if (end - start < 2) break;
    const std::vector<int> chunk(scenes.begin() + static_cast<long>(start),
                                 scenes.begin() + static_cast<long>(end));
    total += matcher_batch_loss(make_matcher_batch(ds, chunk, 0), params, model, false).loss;
    ++batches;
  }
  out.loss = total / std::max(batches, 1);
  out.recall = retrieval_recall(score_matrix(make_matcher_batch(ds, scenes, 0), params, model), 1);
  return out;
}

MatcherState train_matcher(const Dataset& ds, const ExperimentConfig& cfg, MatcherState* resume,
                           const MatcherEpochHook& hook) {
  cfg.validate();
  MatcherState state = resume ? *resume : init_matcher_state(ds, cfg);
  const std::vector<int> train = ds.scenes_in("train");
  if (train.size() < 2) throw std::invalid_argument("matcher training needs >= 2 train scenes");
  const int passes = std::max(1, ds.gen_config.captions_per_scene);
  const auto bs = static_cast<size_t>(cfg.matcher.batch_size);
  for (int e = state.epoch; e < cfg.matcher.epochs && !state.stopped; ++e) {
    double total = 0;
    int batches = 0;
    for (int c = 0; c < passes; ++c) {
      std::vector<int> order = train;
      std::shuffle(order.begin(), order.end(), state.rng);
      for (size_t start = 0; start < order.size(); start += bs) {
        const size_t end = std::min(order.size(), start + bs);
        if (end - start < 2) break;
        const std::vector<int> chunk(order.begin() + static_cast<long>(start),
                                     order.begin() + static_cast<long>(end));
        MatcherLoss loss =
            matcher_batch_loss(make_matcher_batch(ds, chunk, c), state.params, state.model, true);
        check_finite(loss.loss, "matcher", e, batches);
        clip_global_norm(loss.grad, cfg.optimizer.clip_norm);
        state.adam.update(state.params, loss.grad, cfg.matcher.lr, cfg.optimizer);
        total += loss.loss;
        ++batches;
      }
    }
    const MatcherValidation val =
        validate_matcher(ds, state.params, state.model, "val", cfg.matcher.batch_size);
    state.history.push_back({{"epoch", e + 1},
                             {"lr", cfg.matcher.lr},
                             {"train_loss", total / std::max(batches, 1)},
                             {"val_loss", val.loss},
                             {"r1_i2t", val.recall.image_to_text},
                             {"r1_t2i", val.recall.text_to_image}});
    if (val.loss < state.best_val) {
      state.best_val = val.loss;
      state.best = state.params;
      state.best_epoch = e + 1;
      state.since_best = 0;
    } else if (++state.since_best >= cfg.matcher.patience) {
      state.stopped = true;
    }
    state.epoch = e + 1;
    if (hook) hook(state);
  }
  return state;
}

TeacherStore precompute_teacher_attention(const Dataset& ds, const MatcherParams& params,
                                          const MatcherConfig& model, const std::string& split) {
  TeacherStore store;
  for (int c : ds.captions_in(split)) {
    const CaptionRecord& cap = ds.captions[static_cast<size_t>(c)];
    store[cap.caption_id] = matcher_attention(ds.scene(cap.scene_id), cap, params, model).weights;
  }
  return store;
}

std::vector<AttentionDump> matcher_attention_dumps(const Dataset& ds, const MatcherParams& params,
                                                   const MatcherConfig& model,
                                                   const std::string& split) {
  std::vector<AttentionDump> out;
  for (int c : ds.captions_in(split)) {
    const CaptionRecord& cap = ds.captions[static_cast<size_t>(c)];
    out.push_back({cap.caption_id, cap.scene_id, cap.tokens,
                   matcher_attention(ds.scene(cap.scene_id), cap, params, model)});
  }
  return out;
}

CaptionerEvaluation evaluate_captioner(const Dataset& ds, const CaptionerParams& params,
                                       const CaptionerConfig& model, const std::string& split,
                                       int max_len, int beam) {
  constexpr size_t kChunk = 64;
  CaptionerEvaluation out;
  const std::vector<int> scenes = ds.scenes_in(split);
  for (size_t start = 0; start < scenes.size(); start += kChunk) {
    const size_t end = std::min(scenes.size(), start + kChunk);
    std::vector<const Matrix*> feats;
    for (size_t i = start; i < end; ++i) feats.push_back(&ds.scenes[static_cast<size_t>(scenes[i])].features);
    std::vector<Decoded> dec;
    if (beam == 1) {
      dec = greedy_decode_batch(feats, params, model, max_len);
    } else {
      for (const Matrix* f : feats) dec.push_back(beam_search(*f, params, model, beam, max_len));
    }
    for (size_t i = 0; i < dec.size(); ++i) {
      const auto& scene = ds.scenes[static_cast<size_t>(scenes[start + i])];
      out.generated.push_back({scene.scene_id, dec[i].content(model.bos_id, model.eos_id),
                               dec[i].content_beta(model.eos_id)});
      out.decoded.push_back(std::move(dec[i]));
    }
  }

  const std::vector<int> caps = ds.captions_in(split);
  double nll = 0;
  long tokens = 0;
  for (size_t start = 0; start < caps.size(); start += kChunk) {
    const size_t end = std::min(caps.size(), start + kChunk);
    std::vector<const Matrix*> feats;
    std::vector<std::vector<int>> targets;
    for (size_t i = start; i < end; ++i) {
      const CaptionRecord& cap = ds.captions[static_cast<size_t>(caps[i])];
      feats.push_back(&ds.scene(cap.scene_id).features);
      std::vector<int> t = cap.tokens;
      t.push_back(model.eos_id);
      targets.push_back(std::move(t));
    }
    const TeacherForcedBatch fwd = teacher_forced_batch(feats, targets, params, model);
    for (size_t i = 0; i < targets.size(); ++i) {
      const CaptionRecord& cap = ds.captions[static_cast<size_t>(caps[start + i])];
      nll -= fwd.target_log_probs[i].sum();
      tokens += static_cast<long>(targets[i].size());
      AttentionMatrix beta;
      beta.role = AttentionRole::kCaptioner;
      beta.weights = fwd.beta[i].topRows(cap.length());
      out.teacher_forced.push_back({cap.caption_id, cap.scene_id, cap.tokens, std::move(beta)});
    }
  }
  out.cross_entropy = tokens ? nll / static_cast<double>(tokens) : 0.0;
  out.report = full_report({out.generated, out.teacher_forced, beam == 1}, ds);
  return out;
}

namespace {

json captioner_history_row(int epoch, double lr, double train, const CaptionerEvaluation& val) {
  return {{"epoch", epoch},
          {"lr", lr},
          {"train_loss", train},
          {"val_xe", val.cross_entropy},
          {"val_attention_accuracy", val.report.attention_accuracy},
          {"val_B4", val.report.bleu4},
          {"val_C", val.report.cider},
          {"val_F1_all", val.report.f1_all},
          {"val_F1_loc", val.report.f1_loc}};
}

}  // namespace

CaptionerState train_stage1(const Dataset& ds, const ExperimentConfig& cfg,
                            const TeacherStore* teacher, CaptionerState* resume,
                            const CaptionerEpochHook& hook) {
  cfg.validate();
  const Stage1Config& loss_cfg = cfg.stage1.loss;
  const bool distill = (loss_cfg.supervision == Supervision::kPosScan ||
                        loss_cfg.supervision == Supervision::kScan) &&
                       loss_cfg.lambda1 != 0.0;
  if (distill && !teacher) throw std::invalid_argument("distillation needs teacher attention");
  CaptionerState state = resume ? *resume : init_captioner_state(ds, cfg);
  const std::vector<int> train = ds.captions_in("train");
  if (train.empty()) throw std::invalid_argument("no training captions");

  TeacherStore gamma;
  if (loss_cfg.supervision == Supervision::kGroundTruth) {
    for (int c : train) {
      const CaptionRecord& cap = ds.captions[static_cast<size_t>(c)];
      gamma[cap.caption_id] = build_gamma(ds.scene(cap.scene_id), cap);
    }
  }
  const TeacherStore* source = loss_cfg.supervision == Supervision::kGroundTruth ? &gamma
                               : distill                                         ? teacher
                                                                                 : nullptr;
  const auto bs = static_cast<size_t>(cfg.stage1.batch_size);
  for (int e = state.epoch; e < cfg.stage1.epochs; ++e) {
    const double lr = stage1_lr(cfg.stage1, e);
    std::vector<int> order = train;
    std::shuffle(order.begin(), order.end(), state.rng);
    double total = 0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += bs) {
      const size_t end = std::min(order.size(), start + bs);
      std::vector<Stage1Item> items;
      for (size_t i = start; i < end; ++i) {
        const CaptionRecord& cap = ds.captions[static_cast<size_t>(order[i])];
        const Matrix* t = nullptr;
        if (source) {
          auto it = source->find(cap.caption_id);
          if (it == source->end()) {
            throw std::out_of_range("no teacher attention for caption " + cap.caption_id);
          }
          t = &it->second;
        }
        items.push_back({&ds.scene(cap.scene_id).features, cap.tokens, &cap.noun_mask, t});
      }
      Stage1Loss loss = stage1_batch_loss(items, state.params, state.model, loss_cfg, true);
      check_finite(loss.loss, "stage-1", e, batches);
      clip_global_norm(loss.grad, cfg.optimizer.clip_norm);
      state.adam.update(state.params, loss.grad, lr, cfg.optimizer);
      total += loss.loss;
      ++batches;
    }
    const CaptionerEvaluation val =
        evaluate_captioner(ds, state.params, state.model, "val", cfg.max_len);
    state.history.push_back(captioner_history_row(e + 1, lr, total / std::max(batches, 1), val));
    state.epoch = e + 1;
    if (hook) hook(state);
  }
  return state;
}

CaptionerState train_stage2_scst(const Dataset& ds, const ExperimentConfig& cfg,
                                 const CaptionerParams& init, const MatcherParams* matcher,
                                 const MatcherConfig& matcher_model, CaptionerState* resume,
                                 const CaptionerEpochHook& hook, const RewardHook& reward_hook) {
  cfg.validate();
  CaptionerState state;
  if (resume) {
    state = *resume;
  } else {
    state.model = resolve_captioner_config(cfg, ds);
    state.params = init;
    state.adam = Adam<CaptionerParams>::zeros(init);
    state.rng = Rng(cfg.seed);
  }
  const std::vector<int> train = ds.scenes_in("train");
  if (train.empty()) throw std::invalid_argument("no training scenes");

  std::vector<std::vector<TokenSeq>> refs(ds.scenes.size());
  std::vector<std::vector<TokenSeq>> corpus;
  for (int s : train) {
    for (int c : ds.captions_of(s)) refs[static_cast<size_t>(s)].push_back(ds.captions[static_cast<size_t>(c)].tokens);
    corpus.push_back(refs[static_cast<size_t>(s)]);
  }
  const CiderD cider(corpus);
  std::vector<CiderD::Prepared> prepared(ds.scenes.size());
  for (int s : train) prepared[static_cast<size_t>(s)] = cider.prepare(refs[static_cast<size_t>(s)]);
  const RewardModel rewards(cfg.stage2.reward, &cider, matcher, matcher_model, ds.noun_ids());

  const auto bs = static_cast<size_t>(cfg.stage2.batch_size);
  for (int e = state.epoch; e < cfg.stage2.epochs; ++e) {
    std::vector<int> order = train;
    std::shuffle(order.begin(), order.end(), state.rng);
    const long warnings_before = rewards.noun_free_warnings();
    double total = 0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += bs) {
      const size_t end = std::min(order.size(), start + bs);
      std::vector<const Matrix*> feats;
      std::vector<const CiderD::Prepared*> batch_refs;
      for (size_t i = start; i < end; ++i) {
        feats.push_back(&ds.scenes[static_cast<size_t>(order[i])].features);
        batch_refs.push_back(&prepared[static_cast<size_t>(order[i])]);
      }
      const RewardFn fn = [&](const std::vector<std::vector<int>>& caps) {
        return rewards.score(feats, batch_refs, caps);
      };
      ScstStep step = scst_batch(feats, state.params, state.model, cfg.max_len, state.rng, fn);
      check_finite(step.loss, "SCST", e, batches);
      clip_global_norm(step.grad, cfg.optimizer.clip_norm);
      state.adam.update(state.params, step.grad, cfg.stage2.lr, cfg.optimizer);
      total += step.mean_sample_reward;
      ++batches;
      if (reward_hook) {
        reward_hook({e + 1, batches, step.mean_cider, step.mean_matcher,
                     step.mean_sample_reward - step.mean_baseline_reward});
      }
    }
    const CaptionerEvaluation val =
        evaluate_captioner(ds, state.params, state.model, "val", cfg.max_len);
    json row = captioner_history_row(e + 1, cfg.stage2.lr, total / std::max(batches, 1), val);
    row["train_reward"] = row["train_loss"];
    row.erase("train_loss");
    row["noun_free_warnings"] = rewards.noun_free_warnings() - warnings_before;
    state.history.push_back(row);
    state.epoch = e + 1;
    if (hook) hook(state);
  }
  return state;
}

}  // namespace groundcap
