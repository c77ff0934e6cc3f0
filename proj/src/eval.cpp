#include "groundcap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace groundcap {

bool AttentionMatrix::is_stochastic(double tol) const {
  for (Eigen::Index r = 0; r < weights.rows(); ++r) {
    if ((weights.row(r).array() < 0).any()) return false;
    if (std::abs(weights.row(r).sum() - 1.0) > tol) return false;
  }
  return true;
}

const char* role_name(AttentionRole role) {
  return role == AttentionRole::kMatcher ? "matcher" : "captioner";
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  if (inter <= 0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

namespace {

bool hits_any(const BoundingBox& box, const std::vector<BoundingBox>& targets) {
  return std::any_of(targets.begin(), targets.end(),
                     [&](const BoundingBox& t) { return iou(box, t) > 0.5; });
}

}  // namespace

AttentionEvalResult attention_accuracy(const std::vector<AttentionDump>& dumps,
                                       const Dataset& dataset) {
  AttentionEvalResult result;
  for (const auto& dump : dumps) {
    const auto& caption =
        dataset.captions[static_cast<size_t>(dataset.caption_index(dump.caption_id))];
    const auto& scene = dataset.scene(caption.scene_id);
    if (dump.attention.regions() != scene.num_regions()) {
      throw std::invalid_argument("attention dump for " + dump.caption_id +
                                  " has the wrong number of regions");
    }
    for (const auto& [token, boxes] : caption.grounding) {
      if (token >= dump.attention.rows()) {
        throw std::invalid_argument("annotated token " + std::to_string(token) + " of " +
                                    dump.caption_id + " is missing from the attention dump");
      }
      const int region = dump.attention.argmax(token);
      ++result.total;
      if (hits_any(scene.boxes[static_cast<size_t>(region)], boxes)) ++result.correct;
    }
  }
  result.accuracy = result.total ? static_cast<double>(result.correct) / result.total : 0.0;
  return result;
}

F1Report f1_grounding(const std::vector<GeneratedCaption>& generated,
                      const Dataset& dataset, const std::set<int>& object_tokens) {
  // Ground-truth boxes per (scene, object word), pooled over the references.
  std::map<std::pair<int, int>, std::vector<BoundingBox>> gt;
  std::set<int> scenes;
  for (const auto& g : generated) scenes.insert(dataset.scene_index(g.scene_id));
  for (int s : scenes) {
    for (int c : dataset.captions_of(s)) {
      const auto& cap = dataset.captions[static_cast<size_t>(c)];
      for (const auto& [token, boxes] : cap.grounding) {
        const int word = cap.tokens[static_cast<size_t>(token)];
        if (!object_tokens.count(word)) continue;
        auto& list = gt[{s, word}];
        for (const auto& b : boxes) {
          if (std::find(list.begin(), list.end(), b) == list.end()) list.push_back(b);
        }
      }
    }
  }

  std::map<int, ClassGroundingCounts> per_class;
  for (const auto& [key, boxes] : gt) {
    auto& counts = per_class[key.second];
    counts.token = key.second;
    counts.ground_truth += static_cast<int>(boxes.size());
  }
  for (const auto& g : generated) {
    if (g.beta.rows() < static_cast<Eigen::Index>(g.tokens.size())) {
      throw std::invalid_argument("missing attention rows for generated caption of " + g.scene_id);
    }
    const int s = dataset.scene_index(g.scene_id);
    const auto& scene = dataset.scenes[static_cast<size_t>(s)];
    std::map<int, std::pair<int, int>> mentions;  // word -> (predicted, localized)
    for (size_t t = 0; t < g.tokens.size(); ++t) {
      const int word = g.tokens[t];
      if (!object_tokens.count(word)) continue;
      auto& m = mentions[word];
      ++m.first;
      auto it = gt.find({s, word});
      if (it == gt.end()) continue;
      const int region = argmax(g.beta.row(static_cast<Eigen::Index>(t)).transpose());
      if (hits_any(scene.boxes[static_cast<size_t>(region)], it->second)) ++m.second;
    }
    for (const auto& [word, m] : mentions) {
      auto& counts = per_class[word];
      counts.token = word;
      counts.predicted += m.first;
      auto it = gt.find({s, word});
      if (it == gt.end()) continue;
      const int gt_count = static_cast<int>(it->second.size());
      const int word_correct = std::min(m.first, gt_count);
      counts.word_correct += word_correct;
      counts.correct_all += std::min(m.second, gt_count);
      counts.localized += std::min(m.second, word_correct);
    }
  }

  F1Report report;
  double p_sum = 0, r_sum = 0, loc_sum = 0;
  int classes = 0, loc_classes = 0;
  for (const auto& [word, counts] : per_class) {
    report.per_class.push_back(counts);
    if (counts.ground_truth == 0) continue;
    ++classes;
    if (counts.predicted > 0) p_sum += static_cast<double>(counts.correct_all) / counts.predicted;
    r_sum += static_cast<double>(counts.correct_all) / counts.ground_truth;
    if (counts.word_correct > 0) {
      ++loc_classes;
      loc_sum += static_cast<double>(counts.localized) / counts.word_correct;
    }
  }
  if (classes > 0) {
    report.precision_all = p_sum / classes;
    report.recall_all = r_sum / classes;
    const double denom = report.precision_all + report.recall_all;
    report.f1_all = denom > 0 ? 2 * report.precision_all * report.recall_all / denom : 0.0;
  }
  report.f1_loc = loc_classes > 0 ? loc_sum / loc_classes : 0.0;
  return report;
}

std::array<double, 4> bleu(const std::vector<TokenSeq>& candidates,
                           const std::vector<std::vector<TokenSeq>>& references) {
  if (candidates.size() != references.size() || candidates.empty()) {
    throw std::invalid_argument("bleu needs one nonempty reference set per candidate");
  }
  std::array<double, 4> matched{}, total{};
  double cand_len = 0, ref_len = 0;
  auto counts = [](const TokenSeq& s, size_t n) {
    std::map<TokenSeq, int> out;
    for (size_t i = 0; i + n <= s.size(); ++i) ++out[TokenSeq(s.begin() + i, s.begin() + i + n)];
    return out;
  };
  for (size_t c = 0; c < candidates.size(); ++c) {
    const auto& cand = candidates[c];
    const auto& refs = references[c];
    if (refs.empty()) throw std::invalid_argument("bleu needs a reference for every candidate");
    cand_len += static_cast<double>(cand.size());
    size_t best = refs[0].size();
    for (const auto& r : refs) {
      const auto diff = [&](size_t len) {
        return len > cand.size() ? len - cand.size() : cand.size() - len;
      };
      if (diff(r.size()) < diff(best) || (diff(r.size()) == diff(best) && r.size() < best)) {
        best = r.size();
      }
    }
    ref_len += static_cast<double>(best);
    for (size_t n = 1; n <= 4; ++n) {
      std::map<TokenSeq, int> max_ref;
      for (const auto& r : refs) {
        for (const auto& [g, k] : counts(r, n)) max_ref[g] = std::max(max_ref[g], k);
      }
      for (const auto& [g, k] : counts(cand, n)) {
        auto it = max_ref.find(g);
        matched[n - 1] += std::min(k, it == max_ref.end() ? 0 : it->second);
      }
      total[n - 1] += cand.size() >= n ? static_cast<double>(cand.size() - n + 1) : 0.0;
    }
  }
  std::array<double, 4> scores{};
  if (cand_len == 0) return scores;
  const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
  double log_sum = 0;
  for (size_t n = 0; n < 4; ++n) {
    if (matched[n] == 0 || total[n] == 0) {
      for (size_t m = n; m < 4; ++m) scores[m] = 0.0;
      break;
    }
    log_sum += std::log(matched[n] / total[n]);
    scores[n] = bp * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return scores;
}

nlohmann::json MetricsReport::to_json() const {
  auto nullable = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"B1", bleu1},       {"B4", bleu4},         {"M", nullable(meteor)},
          {"C", cider},        {"S", nullable(spice)}, {"F1_all", f1_all},
          {"F1_loc", f1_loc},  {"attention_accuracy", attention_accuracy},
          {"scenes", scenes}};
}

std::string MetricsReport::csv_header() { return "B1,B4,M,C,S,F1_all,F1_loc,attention_accuracy"; }

std::string MetricsReport::csv_row() const {
  std::ostringstream out;
  out.precision(17);
  auto opt = [&](const std::optional<double>& v) {
    if (v) out << *v;
  };
  out << bleu1 << ',' << bleu4 << ',';
  opt(meteor);
  out << ',' << cider << ',';
  opt(spice);
  out << ',' << f1_all << ',' << f1_loc << ',' << attention_accuracy;
  return out.str();
}

MetricsReport full_report(const ReportInputs& inputs, const Dataset& dataset) {
  MetricsReport report;
  std::vector<TokenSeq> candidates;
  std::vector<std::vector<TokenSeq>> references;
  for (const auto& g : inputs.generated) {
    candidates.push_back(g.tokens);
    std::vector<TokenSeq> refs;
    for (int c : dataset.captions_of(dataset.scene_index(g.scene_id))) {
      refs.push_back(dataset.captions[static_cast<size_t>(c)].tokens);
    }
    references.push_back(std::move(refs));
  }
  report.scenes = static_cast<int>(candidates.size());
  if (!candidates.empty()) {
    const auto b = bleu(candidates, references);
    report.bleu1 = b[0];
    report.bleu4 = b[3];
    const CiderD cider(references);
    double sum = 0;
    for (size_t i = 0; i < candidates.size(); ++i) sum += cider.score(candidates[i], references[i]);
    report.cider = sum / static_cast<double>(candidates.size());
  }
  if (inputs.grounding_metrics) {
    report.attention_accuracy = attention_accuracy(inputs.teacher_forced, dataset).accuracy;
    const auto f1 = f1_grounding(inputs.generated, dataset, dataset.noun_ids());
    report.f1_all = f1.f1_all;
    report.f1_loc = f1.f1_loc;
  }
  return report;
}

}  // namespace groundcap
