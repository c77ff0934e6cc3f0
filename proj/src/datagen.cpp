#include "groundcap/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "groundcap/eval.hpp"

namespace groundcap {

using nlohmann::json;

BoundingBox BoundingBox::make(double x1, double y1, double x2, double y2) {
  if (!(x1 < x2) || !(y1 < y2)) {
    std::ostringstream msg;
    msg << "degenerate bounding box [" << x1 << ", " << y1 << ", " << x2
        << ", " << y2 << "]";
    throw std::invalid_argument(msg.str());
  }
  return BoundingBox{x1, y1, x2, y2};
}

bool SceneRecord::operator==(const SceneRecord& o) const {
  return scene_id == o.scene_id && split == o.split &&
         same_matrix(features, o.features) && boxes == o.boxes &&
         classes == o.classes;
}

bool CaptionRecord::has_noun() const {
  return std::find(noun_mask.begin(), noun_mask.end(), true) != noun_mask.end();
}

// ---------------------------------------------------------------- vocabulary

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& words)
    : itos_{"<pad>", "<bos>", "<eos>", "<unk>"} {
  for (int i = 0; i < kNumReserved; ++i) stoi_[itos_[i]] = i;
  for (const auto& w : words) {
    if (stoi_.count(w)) throw std::invalid_argument("duplicate vocabulary word: " + w);
    stoi_[w] = static_cast<int>(itos_.size());
    itos_.push_back(w);
  }
}

int Vocabulary::id(const std::string& word) const {
  auto it = stoi_.find(word);
  if (it == stoi_.end() || is_reserved(it->second)) return kUnk;
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
  return itos_[static_cast<size_t>(id)];
}

bool Vocabulary::contains(const std::string& word) const {
  auto it = stoi_.find(word);
  return it != stoi_.end() && !is_reserved(it->second);
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isalnum(uc) || ch == '\'') {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary build_vocabulary(const std::vector<std::string>& texts, int min_count) {
  if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
  std::map<std::string, int> counts;
  bool any = false;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) {
      ++counts[w];
      any = true;
    }
  }
  if (!any) throw std::invalid_argument("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, int>> kept;
  for (const auto& [w, c] : counts) {
    if (c >= min_count) kept.emplace_back(w, c);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(kept.size());
  for (auto& [w, c] : kept) words.push_back(w);
  return Vocabulary(words);
}

std::vector<int> tokenize_and_truncate(const std::string& text,
                                       const Vocabulary& vocab, int max_len) {
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  std::vector<int> ids{Vocabulary::kBos};
  for (const auto& w : split_words(text)) {
    if (static_cast<int>(ids.size()) - 1 >= max_len) break;
    ids.push_back(vocab.id(w));
  }
  ids.push_back(Vocabulary::kEos);
  return ids;
}

std::vector<bool> LexiconTagger::tag(std::span<const std::string> words) const {
  std::vector<bool> mask(words.size(), false);
  for (size_t i = 0; i < words.size(); ++i) mask[i] = nouns_.count(words[i]) > 0;
  return mask;
}

std::vector<bool> tag_nouns(std::span<const std::string> words,
                            const std::set<std::string>& lexicon) {
  return LexiconTagger(lexicon).tag(words);
}

std::vector<bool> tag_nouns(std::span<const int> tokens, const Vocabulary& vocab,
                            const std::set<std::string>& lexicon) {
  std::vector<bool> mask(tokens.size(), false);
  for (size_t i = 0; i < tokens.size(); ++i) {
    const int id = tokens[i];
    if (Vocabulary::is_reserved(id)) continue;
    mask[i] = lexicon.count(vocab.word(id)) > 0;
  }
  return mask;
}

// ------------------------------------------------------------------- config

void SyntheticConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (num_clutter < 1) throw ConfigError("num_clutter must be >= 1");
  if (captions_per_scene < 1) throw ConfigError("captions_per_scene must be >= 1");
  if (!(noise_sigma >= 0)) throw ConfigError("noise_sigma must be >= 0");
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (min_objects < 1 || max_objects < min_objects)
    throw ConfigError("need 1 <= min_objects <= max_objects");
  if (max_objects > num_classes)
    throw ConfigError("max_objects exceeds the number of classes");
  if (regions < max_objects)
    throw ConfigError("regions per scene (k) is smaller than the maximum objects per scene");
  if (context_regions < 0 || context_regions > 1)
    throw ConfigError("context_regions must be 0 or 1");
  if (regions < max_objects + context_regions)
    throw ConfigError("regions per scene (k) cannot hold the objects and the context region");
  if (train_scenes < 0 || val_scenes < 0 || test_scenes < 0)
    throw ConfigError("scene counts must be non-negative");
  if (min_count < 1) throw ConfigError("min_count must be >= 1");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  if (template_set != "default" && template_set != "sparse" && template_set != "verbose")
    throw ConfigError("unknown template_set: " + template_set);
}

json to_json(const SyntheticConfig& c) {
  return json{{"num_classes", c.num_classes},
              {"num_clutter", c.num_clutter},
              {"regions", c.regions},
              {"feature_dim", c.feature_dim},
              {"noise_sigma", c.noise_sigma},
              {"captions_per_scene", c.captions_per_scene},
              {"min_objects", c.min_objects},
              {"max_objects", c.max_objects},
              {"train_scenes", c.train_scenes},
              {"val_scenes", c.val_scenes},
              {"test_scenes", c.test_scenes},
              {"min_count", c.min_count},
              {"max_len", c.max_len},
              {"template_set", c.template_set},
              {"context_regions", c.context_regions},
              {"seed", c.seed}};
}

SyntheticConfig synthetic_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("synthetic config must be a JSON object");
  SyntheticConfig c;
  const json defaults = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown synthetic config key: " + key);
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("num_classes", c.num_classes);
  get("num_clutter", c.num_clutter);
  get("regions", c.regions);
  get("feature_dim", c.feature_dim);
  get("noise_sigma", c.noise_sigma);
  get("captions_per_scene", c.captions_per_scene);
  get("min_objects", c.min_objects);
  get("max_objects", c.max_objects);
  get("train_scenes", c.train_scenes);
  get("val_scenes", c.val_scenes);
  get("test_scenes", c.test_scenes);
  get("min_count", c.min_count);
  get("max_len", c.max_len);
  get("template_set", c.template_set);
  get("context_regions", c.context_regions);
  get("seed", c.seed);
  return c;
}

// ------------------------------------------------------------------ dataset

void Dataset::reindex() {
  scene_lookup_.clear();
  scene_captions_.assign(scenes.size(), {});
  for (size_t i = 0; i < scenes.size(); ++i) {
    scene_lookup_[scenes[i].scene_id] = static_cast<int>(i);
  }
  caption_lookup_.clear();
  for (size_t c = 0; c < captions.size(); ++c) {
    caption_lookup_[captions[c].caption_id] = static_cast<int>(c);
    auto it = scene_lookup_.find(captions[c].scene_id);
    if (it != scene_lookup_.end()) {
      scene_captions_[static_cast<size_t>(it->second)].push_back(static_cast<int>(c));
    }
  }
}

int Dataset::scene_index(const std::string& scene_id) const {
  auto it = scene_lookup_.find(scene_id);
  if (it == scene_lookup_.end()) throw std::out_of_range("unknown scene id: " + scene_id);
  return it->second;
}

int Dataset::caption_index(const std::string& caption_id) const {
  auto it = caption_lookup_.find(caption_id);
  if (it == caption_lookup_.end()) throw std::out_of_range("unknown caption id: " + caption_id);
  return it->second;
}

const SceneRecord& Dataset::scene(const std::string& scene_id) const {
  return scenes[static_cast<size_t>(scene_index(scene_id))];
}

std::vector<int> Dataset::scenes_in(const std::string& split) const {
  std::vector<int> out;
  for (size_t i = 0; i < scenes.size(); ++i) {
    if (scenes[i].split == split) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<int> Dataset::captions_in(const std::string& split) const {
  std::vector<int> out;
  for (int s : scenes_in(split)) {
    const auto& caps = captions_of(s);
    out.insert(out.end(), caps.begin(), caps.end());
  }
  return out;
}

const std::vector<int>& Dataset::captions_of(int scene_index) const {
  return scene_captions_.at(static_cast<size_t>(scene_index));
}

std::set<int> Dataset::noun_ids() const {
  std::set<int> ids;
  for (const auto& n : nouns) {
    const int id = vocab.id(n);
    if (id != Vocabulary::kUnk) ids.insert(id);
  }
  return ids;
}

bool Dataset::operator==(const Dataset& o) const {
  return gen_config == o.gen_config && synthetic == o.synthetic &&
         vocab == o.vocab && min_count == o.min_count && max_len == o.max_len &&
         nouns == o.nouns && class_names == o.class_names &&
         same_matrix(prototypes, o.prototypes) && scenes == o.scenes &&
         captions == o.captions;
}

// --------------------------------------------------------------- generation

namespace {

const std::vector<std::string> kObjectNames = {
    "dog",   "cat",   "man",   "woman",    "boy",   "girl",  "horse", "car",
    "bike",  "ball",  "tree",  "bench",    "table", "chair", "cup",   "hat",
    "kite",  "boat",  "bird",  "sheep",    "cow",   "bus",   "train", "truck",
    "umbrella", "bag", "phone", "book",    "clock", "lamp"};

using Words = std::vector<std::string>;

const std::vector<Words> kOpeners = {
    {}, {"there", "is"}, {"in", "this", "picture", "there", "is"},
    {"we", "can", "see"}, {"this", "is"}, {"here", "we", "see"}};
const std::vector<std::string> kVerbs = {"sitting", "standing", "playing",
                                         "resting", "waiting",  "looking"};
const std::vector<Words> kConnectors = {
    {"and"},    {"with"}, {"near"}, {"next", "to"}, {"beside"},
    {"on"},     {"in", "front", "of"}, {"behind"}};
const std::vector<std::string> kAdjectives = {"small", "large", "old",   "young", "little",
                                              "big",   "brown", "white", "black", "red"};
const std::vector<Words> kClosers = {
    {}, {"in", "the", "scene"}, {"together"}, {"outside"}, {"on", "a", "sunny", "day"}};

std::string class_name(int c) {
  if (c < static_cast<int>(kObjectNames.size())) return kObjectNames[static_cast<size_t>(c)];
  return "object" + std::to_string(c);
}

template <class T>
const T& pick(const std::vector<T>& options, Rng& rng) {
  std::uniform_int_distribution<size_t> dist(0, options.size() - 1);
  return options[dist(rng)];
}

struct CaptionDraft {
  Words words;
  std::vector<int> object_slot;  // per word: index into the scene's objects or -1
};

// Mentions objects in the given order; trims optional phrases when too long.
CaptionDraft draft_caption(const std::vector<std::string>& names,
                           const std::string& template_set, int max_len, Rng& rng) {
  CaptionDraft draft;
  auto push = [&](const std::string& w, int obj) {
    draft.words.push_back(w);
    draft.object_slot.push_back(obj);
  };
  if (template_set == "sparse") {
    for (size_t i = 0; i < names.size(); ++i) {
      if (i > 0) push("and", -1);
      push(names[i], static_cast<int>(i));
    }
    return draft;
  }
  const bool verbose = template_set == "verbose";
  Words opener = verbose ? kOpeners[std::uniform_int_distribution<size_t>(1, kOpeners.size() - 1)(rng)]
                         : pick(kOpeners, rng);
  std::vector<Words> adjectives(names.size());
  if (verbose) {
    for (auto& a : adjectives) {
      const int count = std::uniform_int_distribution<int>(1, 2)(rng);
      for (int j = 0; j < count; ++j) a.push_back(pick(kAdjectives, rng));
    }
  }
  const int verb_form = std::uniform_int_distribution<int>(0, 2)(rng);
  const std::string verb = pick(kVerbs, rng);
  std::vector<Words> connectors;
  std::vector<std::string> dets;
  for (size_t i = 0; i < names.size(); ++i) {
    dets.push_back(std::bernoulli_distribution(0.5)(rng) ? "a" : "the");
    if (i > 0) connectors.push_back(pick(kConnectors, rng));
  }
  Words closer = verbose ? kClosers[std::uniform_int_distribution<size_t>(1, kClosers.size() - 1)(rng)]
                         : pick(kClosers, rng);

  int form = verbose ? 1 : verb_form;
  auto length = [&]() {
    size_t n = opener.size() + 2 * names.size() + closer.size();
    n += form == 0 ? 0 : (form == 1 ? 2 : 1);
    for (const auto& c : connectors) n += c.size();
    for (const auto& a : adjectives) n += a.size();
    return static_cast<int>(n);
  };
  for (auto& a : adjectives) {
    if (length() > max_len && a.size() > 1) a.resize(1);
  }
  if (length() > max_len) closer.clear();
  if (length() > max_len) opener.clear();
  if (length() > max_len) form = 0;
  for (auto& c : connectors) {
    if (length() > max_len) c = {"and"};
  }
  for (auto& a : adjectives) {
    if (length() > max_len) a.clear();
  }

  for (const auto& w : opener) push(w, -1);
  push(dets[0], -1);
  for (const auto& w : adjectives[0]) push(w, -1);
  push(names[0], 0);
  if (form == 1) push("is", -1);
  if (form >= 1) push(verb, -1);
  for (size_t i = 1; i < names.size(); ++i) {
    for (const auto& w : connectors[i - 1]) push(w, -1);
    push(dets[i], -1);
    for (const auto& w : adjectives[i]) push(w, -1);
    push(names[i], static_cast<int>(i));
  }
  for (const auto& w : closer) push(w, -1);
  return draft;
}

BoundingBox sample_box(Rng& rng) {
  std::uniform_int_distribution<int> size(12, 40);
  const int w = size(rng);
  const int h = size(rng);
  const int x = std::uniform_int_distribution<int>(0, 100 - w)(rng);
  const int y = std::uniform_int_distribution<int>(0, 100 - h)(rng);
  return BoundingBox::make(x, y, x + w, y + h);
}

double to_float_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

Dataset generate_dataset(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Dataset ds;
  ds.gen_config = cfg;
  ds.synthetic = true;
  ds.min_count = cfg.min_count;
  ds.max_len = cfg.max_len;
  for (int c = 0; c < cfg.num_classes; ++c) ds.class_names.push_back(class_name(c));
  ds.nouns = ds.class_names;

  const int num_protos = cfg.num_classes + cfg.num_clutter;
  ds.prototypes.resize(num_protos, cfg.feature_dim);
  fill_normal(ds.prototypes, 1.0, rng);
  ds.prototypes = ds.prototypes.unaryExpr(&to_float_precision);

  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<CaptionDraft> drafts;
  const std::pair<const char*, int> splits[] = {
      {"train", cfg.train_scenes}, {"val", cfg.val_scenes}, {"test", cfg.test_scenes}};
  for (const auto& [split, count] : splits) {
    for (int s = 0; s < count; ++s) {
      SceneRecord scene;
      char id[32];
      std::snprintf(id, sizeof(id), "%s-%04d", split, s);
      scene.scene_id = id;
      scene.split = split;

      const int num_objects =
          std::uniform_int_distribution<int>(cfg.min_objects, cfg.max_objects)(rng);
      std::vector<int> classes(static_cast<size_t>(cfg.num_classes));
      std::iota(classes.begin(), classes.end(), 0);
      std::shuffle(classes.begin(), classes.end(), rng);
      classes.resize(static_cast<size_t>(num_objects));
      std::sort(classes.begin(), classes.end());

      std::vector<int> slots(static_cast<size_t>(cfg.regions));
      std::iota(slots.begin(), slots.end(), 0);
      std::shuffle(slots.begin(), slots.end(), rng);

      scene.classes.assign(static_cast<size_t>(cfg.regions), kBackgroundClass);
      std::vector<int> object_region(static_cast<size_t>(num_objects));
      for (int o = 0; o < num_objects; ++o) {
        scene.classes[static_cast<size_t>(slots[static_cast<size_t>(o)])] =
            classes[static_cast<size_t>(o)];
        object_region[static_cast<size_t>(o)] = slots[static_cast<size_t>(o)];
      }

      const int context =
          cfg.context_regions > 0 ? slots[static_cast<size_t>(num_objects)] : -1;

      // Every box keeps IoU < 0.5 with every other box of the scene.
      for (int r = 0; r < cfg.regions; ++r) {
        if (r == context) {
          scene.boxes.push_back(BoundingBox::make(0, 0, 100, 100));
          continue;
        }
        for (int attempt = 0;; ++attempt) {
          if (attempt > 10000) throw ConfigError("could not place non-overlapping boxes");
          BoundingBox box = sample_box(rng);
          bool ok = std::all_of(scene.boxes.begin(), scene.boxes.end(),
                                [&](const BoundingBox& b) { return iou(b, box) < 0.5; });
          if (ok) {
            scene.boxes.push_back(box);
            break;
          }
        }
      }

      scene.features.resize(cfg.regions, cfg.feature_dim);
      std::uniform_int_distribution<int> clutter(0, cfg.num_clutter - 1);
      std::vector<Vector> bases(static_cast<size_t>(cfg.regions));
      Vector mix = Vector::Zero(cfg.feature_dim);
      for (int r = 0; r < cfg.regions; ++r) {
        if (r == context) continue;
        const int cls = scene.classes[static_cast<size_t>(r)];
        const int proto = cls == kBackgroundClass ? cfg.num_classes + clutter(rng) : cls;
        bases[static_cast<size_t>(r)] = ds.prototypes.row(proto).transpose();
        mix += bases[static_cast<size_t>(r)];
      }
      if (context >= 0) bases[static_cast<size_t>(context)] = mix / (cfg.regions - 1.0);
      for (int r = 0; r < cfg.regions; ++r) {
        const Vector& base = bases[static_cast<size_t>(r)];
        for (int j = 0; j < cfg.feature_dim; ++j) {
          scene.features(r, j) = to_float_precision(base[j] + cfg.noise_sigma * noise(rng));
        }
      }

      std::vector<std::string> names;
      for (int c : classes) names.push_back(class_name(c));
      for (int c = 0; c < cfg.captions_per_scene; ++c) {
        CaptionDraft draft = draft_caption(names, cfg.template_set, cfg.max_len, rng);
        CaptionRecord cap;
        cap.caption_id = scene.scene_id + "#" + std::to_string(c);
        cap.scene_id = scene.scene_id;
        for (size_t w = 0; w < draft.words.size(); ++w) {
          if (w) cap.text += ' ';
          cap.text += draft.words[w];
        }
        // Object slots map to region boxes once the vocabulary is known.
        for (size_t w = 0; w < draft.object_slot.size(); ++w) {
          const int obj = draft.object_slot[w];
          if (obj >= 0) {
            const int region = object_region[static_cast<size_t>(obj)];
            cap.grounding[static_cast<int>(w)] = {scene.boxes[static_cast<size_t>(region)]};
          }
        }
        ds.captions.push_back(std::move(cap));
        drafts.push_back(std::move(draft));
      }
      ds.scenes.push_back(std::move(scene));
    }
  }

  std::vector<std::string> train_texts;
  for (const auto& cap : ds.captions) {
    if (cap.scene_id.rfind("train-", 0) == 0) train_texts.push_back(cap.text);
  }
  ds.vocab = train_texts.empty() ? Vocabulary(ds.class_names)
                                 : build_vocabulary(train_texts, cfg.min_count);

  for (size_t c = 0; c < ds.captions.size(); ++c) {
    auto& cap = ds.captions[c];
    const auto& draft = drafts[c];
    const size_t n = std::min(draft.words.size(), static_cast<size_t>(cfg.max_len));
    for (size_t w = 0; w < n; ++w) {
      cap.tokens.push_back(ds.vocab.id(draft.words[w]));
      cap.noun_mask.push_back(draft.object_slot[w] >= 0);
    }
    for (auto it = cap.grounding.begin(); it != cap.grounding.end();) {
      it = it->first >= static_cast<int>(n) ? cap.grounding.erase(it) : std::next(it);
    }
  }
  ds.reindex();
  return ds;
}

// ------------------------------------------------------------------ storage

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

json box_json(const BoundingBox& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

BoundingBox box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) {
    throw DatasetError(DatasetErrorKind::kMalformedShape, "box must be [x1,y1,x2,y2]");
  }
  try {
    return BoundingBox::make(j[0].get<double>(), j[1].get<double>(),
                             j[2].get<double>(), j[3].get<double>());
  } catch (const std::invalid_argument& e) {
    throw DatasetError(DatasetErrorKind::kMalformedShape, e.what());
  }
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(DatasetErrorKind::kMissingFile, "missing " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DatasetError(DatasetErrorKind::kMalformedShape,
                       path.filename().string() + ": " + e.what());
  }
}

std::uint32_t float_bits(float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, sizeof(u));
  return u;
}

float bits_float(std::uint32_t u) {
  float f;
  std::memcpy(&f, &u, sizeof(f));
  return f;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  json features_meta = json::array();
  json boxes = json::array();
  std::string blob;
  long row_offset = 0;
  for (const auto& s : ds.scenes) {
    features_meta.push_back({{"scene_id", s.scene_id},
                             {"split", s.split},
                             {"row_offset", row_offset},
                             {"k", s.features.rows()},
                             {"d", s.features.cols()}});
    row_offset += s.features.rows();
    for (Eigen::Index r = 0; r < s.features.rows(); ++r) {
      for (Eigen::Index c = 0; c < s.features.cols(); ++c) {
        const std::uint32_t u = float_bits(static_cast<float>(s.features(r, c)));
        for (int byte = 0; byte < 4; ++byte) {
          blob.push_back(static_cast<char>((u >> (8 * byte)) & 0xFFu));
        }
      }
    }
    json bj = json::array();
    for (const auto& b : s.boxes) bj.push_back(box_json(b));
    boxes.push_back({{"scene_id", s.scene_id}, {"boxes", bj}, {"classes", s.classes}});
  }
  write_text(dir / "features.bin", blob);
  write_text(dir / "features.json", features_meta.dump(1) + "\n");
  write_text(dir / "boxes.json", boxes.dump() + "\n");

  std::string lines;
  for (const auto& c : ds.captions) {
    json g = json::object();
    for (const auto& [idx, bs] : c.grounding) {
      json arr = json::array();
      for (const auto& b : bs) arr.push_back(box_json(b));
      g[std::to_string(idx)] = arr;
    }
    std::vector<int> mask(c.noun_mask.begin(), c.noun_mask.end());
    json rec = {{"caption_id", c.caption_id}, {"scene_id", c.scene_id},
                {"text", c.text},             {"tokens", c.tokens},
                {"noun_mask", mask},          {"grounding", g}};
    lines += rec.dump() + "\n";
  }
  write_text(dir / "captions.jsonl", lines);

  json vocab = {{"tokens", ds.vocab.words()},
                {"pad", Vocabulary::kPad},
                {"bos", Vocabulary::kBos},
                {"eos", Vocabulary::kEos},
                {"unk", Vocabulary::kUnk},
                {"min_count", ds.min_count},
                {"max_len", ds.max_len},
                {"nouns", ds.nouns}};
  write_text(dir / "vocab.json", vocab.dump(1) + "\n");

  json protos = json::array();
  for (Eigen::Index r = 0; r < ds.prototypes.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < ds.prototypes.cols(); ++c) row.push_back(ds.prototypes(r, c));
    protos.push_back(row);
  }
  json gen = {{"synthetic", ds.synthetic},
              {"config", to_json(ds.gen_config)},
              {"class_names", ds.class_names},
              {"prototypes", protos}};
  write_text(dir / "gen_config.json", gen.dump() + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  const json features_meta = read_json(dir / "features.json");
  const json boxes = read_json(dir / "boxes.json");
  const json vocab = read_json(dir / "vocab.json");
  const json gen = read_json(dir / "gen_config.json");

  try {
    ds.vocab = Vocabulary(std::vector<std::string>(
        vocab.at("tokens").begin() + Vocabulary::kNumReserved, vocab.at("tokens").end()));
    if (ds.vocab.words() != vocab.at("tokens").get<std::vector<std::string>>()) {
      throw DatasetError(DatasetErrorKind::kMalformedShape, "vocab.json reserved tokens differ");
    }
    ds.min_count = vocab.at("min_count").get<int>();
    ds.max_len = vocab.at("max_len").get<int>();
    ds.nouns = vocab.at("nouns").get<std::vector<std::string>>();
    ds.synthetic = gen.at("synthetic").get<bool>();
    ds.gen_config = synthetic_config_from_json(gen.at("config"));
    ds.class_names = gen.at("class_names").get<std::vector<std::string>>();
    const auto& protos = gen.at("prototypes");
    if (!protos.empty()) {
      ds.prototypes.resize(static_cast<Eigen::Index>(protos.size()),
                           static_cast<Eigen::Index>(protos[0].size()));
      for (size_t r = 0; r < protos.size(); ++r) {
        if (protos[r].size() != protos[0].size()) {
          throw DatasetError(DatasetErrorKind::kMalformedShape, "ragged prototype matrix");
        }
        for (size_t c = 0; c < protos[r].size(); ++c) {
          ds.prototypes(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
              protos[r][c].get<double>();
        }
      }
    }
  } catch (const json::exception& e) {
    throw DatasetError(DatasetErrorKind::kMalformedShape, std::string("vocab/gen_config: ") + e.what());
  }

  // features.json must describe a contiguous row layout.
  std::ifstream bin(dir / "features.bin", std::ios::binary);
  if (!bin) throw DatasetError(DatasetErrorKind::kMissingFile, "missing features.bin");
  const std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (!features_meta.is_array()) {
    throw DatasetError(DatasetErrorKind::kMalformedShape, "features.json must be an array");
  }
  long expected_rows = 0;
  long dim = -1;
  for (const auto& m : features_meta) {
    long k = 0, d = 0, off = 0;
    try {
      k = m.at("k").get<long>();
      d = m.at("d").get<long>();
      off = m.at("row_offset").get<long>();
    } catch (const json::exception& e) {
      throw DatasetError(DatasetErrorKind::kMalformedShape, std::string("features.json: ") + e.what());
    }
    if (k < 1 || d < 1 || off != expected_rows || (dim != -1 && d != dim)) {
      throw DatasetError(DatasetErrorKind::kMalformedShape,
                         "features.json: bad shape entry for " + m.value("scene_id", std::string("?")));
    }
    dim = d;
    expected_rows += k;
  }
  const size_t expected_bytes = static_cast<size_t>(expected_rows) *
                                static_cast<size_t>(std::max(dim, 0L)) * 4u;
  if (blob.size() != expected_bytes) {
    throw DatasetError(DatasetErrorKind::kFeatureLengthMismatch,
                       "features.bin has " + std::to_string(blob.size()) + " bytes, expected " +
                           std::to_string(expected_bytes));
  }
  size_t pos = 0;
  for (const auto& m : features_meta) {
    SceneRecord s;
    s.scene_id = m.at("scene_id").get<std::string>();
    s.split = m.value("split", std::string("train"));
    const long k = m.at("k").get<long>();
    s.features.resize(k, dim);
    for (long r = 0; r < k; ++r) {
      for (long c = 0; c < dim; ++c) {
        std::uint32_t u = 0;
        for (int byte = 0; byte < 4; ++byte) {
          u |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[pos++])) << (8 * byte);
        }
        s.features(r, c) = bits_float(u);
      }
    }
    ds.scenes.push_back(std::move(s));
  }
  ds.reindex();

  if (!boxes.is_array() || boxes.size() != ds.scenes.size()) {
    throw DatasetError(DatasetErrorKind::kInconsistentRegions,
                       "boxes.json must have one entry per scene");
  }
  std::set<std::string> seen_boxes;
  for (const auto& b : boxes) {
    const std::string sid = b.at("scene_id").get<std::string>();
    int idx = 0;
    try {
      idx = ds.scene_index(sid);
    } catch (const std::out_of_range&) {
      throw DatasetError(DatasetErrorKind::kDanglingSceneRef, "boxes.json references unknown scene " + sid);
    }
    if (!seen_boxes.insert(sid).second) {
      throw DatasetError(DatasetErrorKind::kInconsistentRegions, "duplicate boxes for " + sid);
    }
    auto& scene = ds.scenes[static_cast<size_t>(idx)];
    for (const auto& bj : b.at("boxes")) scene.boxes.push_back(box_from_json(bj));
    scene.classes = b.at("classes").get<std::vector<int>>();
    if (static_cast<int>(scene.boxes.size()) != scene.num_regions() ||
        static_cast<int>(scene.classes.size()) != scene.num_regions()) {
      throw DatasetError(DatasetErrorKind::kInconsistentRegions,
                         "region count mismatch between features and boxes for " + sid);
    }
  }

  std::ifstream caps(dir / "captions.jsonl", std::ios::binary);
  if (!caps) throw DatasetError(DatasetErrorKind::kMissingFile, "missing captions.jsonl");
  std::string line;
  int line_no = 0;
  std::set<std::string> caption_ids;
  while (std::getline(caps, line)) {
    ++line_no;
    if (line.empty()) continue;
    CaptionRecord c;
    try {
      const json j = json::parse(line);
      c.caption_id = j.at("caption_id").get<std::string>();
      c.scene_id = j.at("scene_id").get<std::string>();
      c.text = j.at("text").get<std::string>();
      c.tokens = j.at("tokens").get<std::vector<int>>();
      for (int v : j.at("noun_mask").get<std::vector<int>>()) c.noun_mask.push_back(v != 0);
      for (const auto& [key, arr] : j.at("grounding").items()) {
        std::vector<BoundingBox> bs;
        for (const auto& bj : arr) bs.push_back(box_from_json(bj));
        c.grounding[std::stoi(key)] = std::move(bs);
      }
    } catch (const json::exception& e) {
      throw DatasetError(DatasetErrorKind::kInvalidCaption,
                         "captions.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      (void)ds.scene_index(c.scene_id);
    } catch (const std::out_of_range&) {
      throw DatasetError(DatasetErrorKind::kDanglingSceneRef,
                         "caption " + c.caption_id + " references unknown scene " + c.scene_id);
    }
    if (!caption_ids.insert(c.caption_id).second) {
      throw DatasetError(DatasetErrorKind::kInvalidCaption,
                         "duplicate caption id " + c.caption_id);
    }
    if (c.tokens.empty() || c.noun_mask.size() != c.tokens.size()) {
      throw DatasetError(DatasetErrorKind::kInvalidCaption,
                         "caption " + c.caption_id + " has empty tokens or mismatched noun mask");
    }
    for (int t : c.tokens) {
      if (t < 0 || t >= ds.vocab.size()) {
        throw DatasetError(DatasetErrorKind::kInvalidCaption,
                           "caption " + c.caption_id + " has an out-of-vocabulary id");
      }
    }
    for (const auto& [idx, bs] : c.grounding) {
      if (idx < 0 || idx >= c.length() || !c.noun_mask[static_cast<size_t>(idx)] || bs.empty()) {
        throw DatasetError(DatasetErrorKind::kInvalidCaption,
                           "caption " + c.caption_id + " grounds a non-noun token");
      }
    }
    ds.captions.push_back(std::move(c));
  }
  ds.reindex();
  return ds;
}

}  // namespace groundcap
