#ifndef GROUNDCAP_MATCHER_HPP_
#define GROUNDCAP_MATCHER_HPP_

#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include <json.hpp>

#include "groundcap/attention.hpp"
#include "groundcap/datagen.hpp"
#include "groundcap/linalg.hpp"

namespace groundcap {

// Text-to-image stacked cross attention matcher. With noun_masked set the
// matching score averages local scores over noun positions only (POS-SCAN);
// encoders and attention are shared between both variants.
struct MatcherConfig {
  int feature_dim = 2048;
  int embed_dim = 1024;  // joint space and GRU hidden size
  int word_dim = 300;
  int vocab_size = 0;
  double temperature = 9.0;
  double margin = 0.2;
  bool noun_masked = false;
  // Normalize clipped similarities across regions for each word instead of
  // across words for each region.
  bool normalize_over_regions = false;

  void validate() const;
};

nlohmann::json to_json(const MatcherConfig& cfg);
MatcherConfig matcher_config_from_json(const nlohmann::json& j);

struct MatcherParams {
  Matrix region_weight;   // d1 x d
  Matrix region_bias;     // d1 x 1
  Matrix word_embedding;  // vocab x word_dim
  Matrix fwd_W, fwd_U, fwd_b;  // forward GRU: 3h x word_dim, 3h x h, 3h x 1
  Matrix bwd_W, bwd_U, bwd_b;  // backward GRU

  static MatcherParams zeros(const MatcherConfig& cfg);
  static MatcherParams init(const MatcherConfig& cfg, Rng& rng);

  std::vector<std::pair<const char*, Matrix*>> tensors();
  std::vector<std::pair<const char*, const Matrix*>> tensors() const;
};

class NoNounError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// v_i = W_v f_i + b_v for every row of `features`.
Matrix encode_regions(const Matrix& features, const MatcherParams& params);

// e_t = (forward h_t + backward h_t) / 2, zero initial states.
Matrix encode_words(std::span<const int> tokens, const MatcherParams& params);

// s(i, t) = cos(v_i, e_t), denominators guarded by kNormEpsilon.
Matrix similarity_matrix(const Matrix& regions, const Matrix& words);

// [s]_+ divided by the L2 norm of its region row (or word column).
Matrix normalize_similarities(const Matrix& similarities, bool over_regions = false);

struct AttendedRegions {
  AttentionMatrix alpha;  // n x k
  Matrix attended;        // n x d1, row t is a_t
};

AttendedRegions attend_regions(const Matrix& normalized, const Matrix& regions,
                               double temperature);

double global_score(const Matrix& words, const Matrix& attended);
// Throws NoNounError when the mask has no true entry.
double pos_score(const Matrix& words, const Matrix& attended,
                 const std::vector<bool>& noun_mask);

struct TripletLoss {
  double loss = 0;
  Matrix grad;  // d loss / d scores
  std::vector<int> hardest_caption;  // per image
  std::vector<int> hardest_image;    // per caption
};

// scores(p, c) = S(image p, caption c); matching pairs lie on the diagonal.
// Hardest negatives are mined within the batch, ties to the lowest index.
TripletLoss triplet_loss_hard(const Matrix& scores, double margin);

// Full forward pass for one image/caption pair, kept for backpropagation.
struct PairTrace {
  Matrix dots, denom, sim, clipped, norms, normalized;
  Matrix alpha;     // n x k
  Matrix attended;  // n x d1
  Vector local;     // R(e_t, a_t)
  std::vector<double> weights;  // d score / d local_t
  double score = 0;
};

PairTrace score_pair(const Matrix& regions, const Matrix& words,
                     const std::vector<bool>* noun_mask, const MatcherConfig& cfg);
// Accumulates gradients of (g * score) into d_regions / d_words.
void score_pair_backward(const PairTrace& trace, const Matrix& regions,
                         const Matrix& words, double g, const MatcherConfig& cfg,
                         Matrix& d_regions, Matrix& d_words);

// S or S_pos (per cfg.noun_masked) for one image and one tokenized caption.
double matching_score(const Matrix& features, std::span<const int> tokens,
                      const std::vector<bool>& noun_mask, const MatcherParams& params,
                      const MatcherConfig& cfg);

AttentionMatrix matcher_attention(const SceneRecord& scene, const CaptionRecord& caption,
                                  const MatcherParams& params, const MatcherConfig& cfg);

// Batched bidirectional word encoder with caches for backpropagation.
struct WordEncoderTrace {
  std::vector<std::vector<int>> tokens;
  std::vector<GruCache> fwd, bwd;  // indexed by time step
  int max_len = 0;
};

std::vector<Matrix> encode_words_batch(const std::vector<std::span<const int>>& captions,
                                       const MatcherParams& params,
                                       WordEncoderTrace* trace);
void encode_words_backward(const WordEncoderTrace& trace,
                           const std::vector<Matrix>& d_words,
                           const MatcherParams& params, MatcherParams& grad);

struct MatcherBatch {
  std::vector<const Matrix*> features;
  std::vector<std::span<const int>> tokens;
  std::vector<const std::vector<bool>*> noun_masks;
};

struct MatcherLoss {
  double loss = 0;
  Matrix scores;
  MatcherParams grad;
};

MatcherLoss matcher_batch_loss(const MatcherBatch& batch, const MatcherParams& params,
                               const MatcherConfig& cfg, bool with_grad);

// images x captions matrix of matching scores.
Matrix score_matrix(const MatcherBatch& batch, const MatcherParams& params,
                    const MatcherConfig& cfg);

struct RecallAtK {
  double image_to_text = 0;
  double text_to_image = 0;
};
// Diagonal pairs are the matches.
RecallAtK retrieval_recall(const Matrix& scores, int k);

}  // namespace groundcap

#endif  // GROUNDCAP_MATCHER_HPP_
