#ifndef GROUNDCAP_DATAGEN_HPP_
#define GROUNDCAP_DATAGEN_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "groundcap/linalg.hpp"

namespace groundcap {

// Axis-aligned box; construction through make() rejects degenerate boxes.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 1, y2 = 1;

  static BoundingBox make(double x1, double y1, double x2, double y2);
  double area() const { return (x2 - x1) * (y2 - y1); }
  std::array<double, 4> to_array() const { return {x1, y1, x2, y2}; }
  bool operator==(const BoundingBox&) const = default;
};

inline constexpr int kBackgroundClass = -1;

struct SceneRecord {
  std::string scene_id;
  std::string split;
  Matrix features;  // k x d, row i is region i
  std::vector<BoundingBox> boxes;
  std::vector<int> classes;  // kBackgroundClass for non-object regions

  int num_regions() const { return static_cast<int>(features.rows()); }
  bool operator==(const SceneRecord& o) const;
};

// Token index (into `tokens`) -> ground-truth boxes for that word.
using Grounding = std::map<int, std::vector<BoundingBox>>;

struct CaptionRecord {
  std::string caption_id;
  std::string scene_id;
  std::string text;
  std::vector<int> tokens;  // content tokens, no BOS/EOS
  std::vector<bool> noun_mask;
  Grounding grounding;

  int length() const { return static_cast<int>(tokens.size()); }
  bool has_noun() const;
  bool operator==(const CaptionRecord&) const = default;
};

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumReserved = 4;

  Vocabulary();
  // Words are appended in the given order after the reserved entries.
  explicit Vocabulary(const std::vector<std::string>& words);

  int id(const std::string& word) const;  // kUnk when absent
  const std::string& word(int id) const;
  bool contains(const std::string& word) const;
  int size() const { return static_cast<int>(itos_.size()); }
  static bool is_reserved(int id) { return id >= 0 && id < kNumReserved; }

  const std::vector<std::string>& words() const { return itos_; }
  bool operator==(const Vocabulary& o) const { return itos_ == o.itos_; }

 private:
  std::vector<std::string> itos_;
  std::unordered_map<std::string, int> stoi_;
};

// Lowercases and splits on anything that is not a letter, digit or apostrophe.
std::vector<std::string> split_words(const std::string& text);

// Ids ordered by (frequency desc, word asc); words below min_count are left
// out and therefore map to the unknown id.
Vocabulary build_vocabulary(const std::vector<std::string>& texts, int min_count);

// [BOS, id(w1), ..., id(w_min(n, max_len)), EOS].
std::vector<int> tokenize_and_truncate(const std::string& text,
                                       const Vocabulary& vocab,
                                       int max_len = 16);

// Pluggable part-of-speech source for the noun indicator.
class NounTagger {
 public:
  virtual ~NounTagger() = default;
  virtual std::vector<bool> tag(std::span<const std::string> words) const = 0;
};

class LexiconTagger : public NounTagger {
 public:
  explicit LexiconTagger(std::set<std::string> nouns) : nouns_(std::move(nouns)) {}
  std::vector<bool> tag(std::span<const std::string> words) const override;
  const std::set<std::string>& nouns() const { return nouns_; }

 private:
  std::set<std::string> nouns_;
};

std::vector<bool> tag_nouns(std::span<const std::string> words,
                            const std::set<std::string>& lexicon);
// Reserved ids are never nouns.
std::vector<bool> tag_nouns(std::span<const int> tokens, const Vocabulary& vocab,
                            const std::set<std::string>& lexicon);

struct SyntheticConfig {
  int num_classes = 30;
  int num_clutter = 8;  // background prototypes never named in captions
  int regions = 8;      // k
  int feature_dim = 64; // d
  double noise_sigma = 0.1;
  int captions_per_scene = 5;
  int min_objects = 2;
  int max_objects = 4;
  int train_scenes = 500;
  int val_scenes = 100;
  int test_scenes = 100;
  int min_count = 5;
  int max_len = 16;
  std::string template_set = "default";  // "default" | "sparse" | "verbose"
  // Whole-image background region whose feature averages the other regions.
  int context_regions = 1;
  std::uint64_t seed = 7;

  void validate() const;
  bool operator==(const SyntheticConfig&) const = default;
};

nlohmann::json to_json(const SyntheticConfig& cfg);
// Missing keys keep their defaults; unknown keys are rejected.
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  SyntheticConfig gen_config;
  bool synthetic = true;
  Vocabulary vocab;
  int min_count = 5;
  int max_len = 16;
  std::vector<std::string> nouns;  // noun lexicon
  std::vector<std::string> class_names;
  Matrix prototypes;  // (num_classes + num_clutter) x d, empty if not synthetic
  std::vector<SceneRecord> scenes;
  std::vector<CaptionRecord> captions;

  // Lookup helpers, rebuilt by reindex().
  void reindex();
  const SceneRecord& scene(const std::string& scene_id) const;
  int scene_index(const std::string& scene_id) const;
  int caption_index(const std::string& caption_id) const;
  std::vector<int> scenes_in(const std::string& split) const;
  std::vector<int> captions_in(const std::string& split) const;
  const std::vector<int>& captions_of(int scene_index) const;
  std::set<std::string> noun_set() const { return {nouns.begin(), nouns.end()}; }
  std::set<int> noun_ids() const;

  bool operator==(const Dataset& o) const;

 private:
  std::unordered_map<std::string, int> scene_lookup_;
  std::unordered_map<std::string, int> caption_lookup_;
  std::vector<std::vector<int>> scene_captions_;
};

Dataset generate_dataset(const SyntheticConfig& cfg);

enum class DatasetErrorKind {
  kMissingFile,
  kMalformedShape,
  kFeatureLengthMismatch,
  kDanglingSceneRef,
  kInconsistentRegions,
  kInvalidCaption,
};

class DatasetError : public std::runtime_error {
 public:
  DatasetError(DatasetErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  DatasetErrorKind kind() const { return kind_; }

 private:
  DatasetErrorKind kind_;
};

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace groundcap

#endif  // GROUNDCAP_DATAGEN_HPP_
