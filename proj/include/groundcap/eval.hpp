#ifndef GROUNDCAP_EVAL_HPP_
#define GROUNDCAP_EVAL_HPP_

#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundcap/attention.hpp"
#include "groundcap/cider.hpp"
#include "groundcap/datagen.hpp"

namespace groundcap {

double iou(const BoundingBox& a, const BoundingBox& b);

// Attention over one caption; rows align with the caption's content tokens.
struct AttentionDump {
  std::string caption_id;
  std::string scene_id;
  std::vector<int> tokens;
  AttentionMatrix attention;
};

struct AttentionEvalResult {
  double accuracy = 0;
  int correct = 0;
  int total = 0;
};

// Scores every grounded token of the dumped captions: correct when the box of
// the row's argmax region has IoU > 0.5 with any ground-truth box.
AttentionEvalResult attention_accuracy(const std::vector<AttentionDump>& dumps,
                                       const Dataset& dataset);

// A decoded caption (content tokens) with one attention row per token.
struct GeneratedCaption {
  std::string scene_id;
  std::vector<int> tokens;
  Matrix beta;
};

struct ClassGroundingCounts {
  int token = 0;
  int predicted = 0;
  int ground_truth = 0;
  int correct_all = 0;   // right word and localized
  int word_correct = 0;  // right word
  int localized = 0;     // right word and localized, among word_correct
};

struct F1Report {
  double f1_all = 0;
  double f1_loc = 0;
  double precision_all = 0;
  double recall_all = 0;
  std::vector<ClassGroundingCounts> per_class;
};

// Macro-averaged grounding F1 over object classes present in the ground
// truth of the evaluated scenes; `object_tokens` lists the object words.
F1Report f1_grounding(const std::vector<GeneratedCaption>& generated,
                      const Dataset& dataset, const std::set<int>& object_tokens);

// Corpus BLEU-1..4 with clipped counts and the closest-reference brevity
// penalty.
std::array<double, 4> bleu(const std::vector<TokenSeq>& candidates,
                           const std::vector<std::vector<TokenSeq>>& references);

// One row of the caption/grounding table. METEOR and SPICE are not computed.
struct MetricsReport {
  double bleu1 = 0;
  double bleu4 = 0;
  std::optional<double> meteor;
  double cider = 0;
  std::optional<double> spice;
  double attention_accuracy = 0;
  double f1_all = 0;
  double f1_loc = 0;
  int scenes = 0;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

struct ReportInputs {
  std::vector<GeneratedCaption> generated;         // one per evaluated scene
  std::vector<AttentionDump> teacher_forced;       // ground-truth captions
  bool grounding_metrics = true;
};

MetricsReport full_report(const ReportInputs& inputs, const Dataset& dataset);

}  // namespace groundcap

#endif  // GROUNDCAP_EVAL_HPP_
