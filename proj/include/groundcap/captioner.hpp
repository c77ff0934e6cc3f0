#ifndef GROUNDCAP_CAPTIONER_HPP_
#define GROUNDCAP_CAPTIONER_HPP_

#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "groundcap/attention.hpp"
#include "groundcap/linalg.hpp"

namespace groundcap {

// Up-Down decoder: an attention LSTM feeding additive region attention and a
// language LSTM that emits the next word.
struct CaptionerConfig {
  int feature_dim = 2048;   // d
  int region_dim = 1024;    // d2
  int word_dim = 512;
  int hidden = 512;
  int attention_dim = 512;  // d_a
  int vocab_size = 0;
  int bos_id = 1;
  int eos_id = 2;

  void validate() const;
};

nlohmann::json to_json(const CaptionerConfig& cfg);
CaptionerConfig captioner_config_from_json(const nlohmann::json& j);

struct CaptionerParams {
  Matrix region_weight;   // d2 x d
  Matrix region_bias;     // d2 x 1
  Matrix word_embedding;  // vocab x word_dim
  Matrix att_W, att_U, att_b;    // attention LSTM, input [h2; v_mean; w]
  Matrix lang_W, lang_U, lang_b; // language LSTM, input [v_hat; h1]
  Matrix attn_w;   // d_a x 1
  Matrix attn_Wv;  // d_a x d2
  Matrix attn_Wh;  // d_a x hidden
  Matrix out_W;    // vocab x hidden
  Matrix out_b;    // vocab x 1

  static CaptionerParams zeros(const CaptionerConfig& cfg);
  static CaptionerParams init(const CaptionerConfig& cfg, Rng& rng);

  std::vector<std::pair<const char*, Matrix*>> tensors();
  std::vector<std::pair<const char*, const Matrix*>> tensors() const;
};

// Decoder state for a batch of images; column b belongs to image b.
struct DecoderState {
  Matrix h1, c1, h2, c2;           // hidden x B
  std::vector<Matrix> projected;   // v'_i per image, k x d2
  std::vector<Matrix> keys;        // W_va v'_i per image, k x d_a
  Matrix mean;                     // d2 x B

  int batch() const { return static_cast<int>(projected.size()); }
};

DecoderState init_state(const Matrix& features, const CaptionerParams& params);
DecoderState init_state_batch(const std::vector<const Matrix*>& features,
                              const CaptionerParams& params);

struct StepOutput {
  Vector logits;
  Vector beta;      // length k
  Vector attended;  // v_hat
  Vector scores;    // z
};

// Advances a single-image state by one word.
StepOutput step(DecoderState& state, int prev_token, const CaptionerParams& params);

// Forward cache of one batched step.
struct StepCache {
  std::vector<int> inputs;
  LstmCache att, lang;
  std::vector<Matrix> act;   // tanh(W_va v' + W_ha h1) per image, k x d_a
  std::vector<Vector> beta;  // per image
  Matrix log_probs;          // vocab x B
};

// Batched step; log-softmax of the logits lands in cache.log_probs.
void step_batch(DecoderState& state, const std::vector<int>& prev_tokens,
                const CaptionerParams& params, StepCache& cache);

// Teacher forcing over target sequences. Step t consumes BOS (t = 0) or
// targets[t - 1] and predicts targets[t].
struct TeacherForcedBatch {
  std::vector<Matrix> features;  // kept for backpropagation
  std::vector<std::vector<int>> targets;
  std::vector<StepCache> steps;
  DecoderState initial;
  std::vector<Vector> target_log_probs;  // per image, one per target
  std::vector<Matrix> beta;              // per image, targets x k
};

TeacherForcedBatch teacher_forced_batch(const std::vector<const Matrix*>& features,
                                        const std::vector<std::vector<int>>& targets,
                                        const CaptionerParams& params,
                                        const CaptionerConfig& cfg);

// d_logits[t] is vocab x B; d_beta[b] is targets x k (may be empty).
CaptionerParams teacher_forced_backward(const TeacherForcedBatch& fwd,
                                        const CaptionerParams& params,
                                        const std::vector<Matrix>& d_logits,
                                        const std::vector<Matrix>& d_beta);

struct TeacherForcedResult {
  Vector log_probs;      // n + 1 entries, the last one for EOS
  AttentionMatrix beta;  // (n + 1) x k
};

// `tokens` are content tokens; BOS/EOS wrapping happens here.
TeacherForcedResult teacher_forced_forward(const Matrix& features, std::span<const int> tokens,
                                           const CaptionerParams& params,
                                           const CaptionerConfig& cfg);

// A decoded sequence starts with BOS and ends with EOS when one was emitted.
// Attention rows and log-probabilities cover the emitted tokens.
struct Decoded {
  std::vector<int> tokens;
  Vector log_probs;
  AttentionMatrix beta;

  std::vector<int> content(int bos_id, int eos_id) const;
  bool finished(int eos_id) const { return !tokens.empty() && tokens.back() == eos_id; }
  // Attention rows of the content tokens.
  Matrix content_beta(int eos_id) const;
};

// max_len bounds the returned length including BOS.
Decoded greedy_decode(const Matrix& features, const CaptionerParams& params,
                      const CaptionerConfig& cfg, int max_len);
Decoded sample_decode(const Matrix& features, const CaptionerParams& params,
                      const CaptionerConfig& cfg, int max_len, Rng& rng);
std::vector<Decoded> greedy_decode_batch(const std::vector<const Matrix*>& features,
                                         const CaptionerParams& params,
                                         const CaptionerConfig& cfg, int max_len);
// Images draw in column order at every step.
std::vector<Decoded> sample_decode_batch(const std::vector<const Matrix*>& features,
                                         const CaptionerParams& params,
                                         const CaptionerConfig& cfg, int max_len, Rng& rng);

// Sum-of-log-prob beam search without length normalization. EOS expansions
// become finished hypotheses that keep their slot in the beam.
Decoded beam_search(const Matrix& features, const CaptionerParams& params,
                    const CaptionerConfig& cfg, int beam_size, int max_len);

}  // namespace groundcap

#endif  // GROUNDCAP_CAPTIONER_HPP_
