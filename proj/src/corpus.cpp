#include "capmine/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "capmine/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace capmine {

namespace {

std::string padded_id(const char* prefix, int n) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%06d", prefix, n);
  return buf;
}

std::vector<double> unit_normalized(std::vector<double> v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm < 1e-12) {
    v[0] = 1.0;
    return v;
  }
  for (double& x : v) x /= norm;
  return v;
}

std::vector<std::vector<double>> draw_directions(Rng& rng, int count, int dim,
                                                 double norm) {
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::vector<double> v(static_cast<size_t>(dim));
    for (double& x : v) x = rng.normal();
    v = unit_normalized(std::move(v));
    for (double& x : v) x *= norm;
    out.push_back(std::move(v));
  }
  return out;
}

json region_to_json(const DetectedRegion& r) {
  json j;
  j["image_id"] = r.image_id;
  j["region_id"] = r.region_id;
  j["category"] = r.category;
  if (r.attribute) {
    j["attribute"] = *r.attribute;
  } else {
    j["attribute"] = nullptr;
  }
  j["bbox"] = {r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2};
  j["image_w"] = r.bbox.image_w;
  j["image_h"] = r.bbox.image_h;
  j["feature"] = r.feature;
  return j;
}

json parse_line(const std::string& path, int line_no, const std::string& line) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
  }
}

[[noreturn]] void invalid_at(const std::string& path, int line_no,
                             const std::string& what) {
  throw ValidationError(path + ":" + std::to_string(line_no) + ": " + what);
}

// Applies fn to each non-empty line of path.
template <typename Fn>
void for_each_line(const std::string& path, Fn fn) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    fn(line_no, line);
  }
}

}  // namespace

void SynthConfig::validate() const {
  if (n_images <= 0 || n_sentences <= 0 || n_categories <= 0 ||
      n_relations <= 0 || n_attributes < 0) {
    throw ConfigError("corpus counts must be positive");
  }
  if (feature_noise_sigma < 0) throw ConfigError("feature_noise_sigma < 0");
  if (feature_dim < 8) throw ConfigError("feature_dim must be >= 8");
  if (objects_min < 1 || objects_max < objects_min) {
    throw ConfigError("bad objects_per_image range");
  }
  if (relations_min < 0 || relations_max < relations_min) {
    throw ConfigError("bad relations_per_image range");
  }
  if (attribute_prob < 0 || attribute_prob > 1) {
    throw ConfigError("attribute_prob outside [0,1]");
  }
}

std::pair<std::vector<ImageRecord>, std::vector<SentenceRecord>>
generate_corpus(const SynthConfig& config, const ConceptLexicon& lexicon) {
  config.validate();

  Rng proto_rng(derive_seed(config.seed, "prototypes"));
  const auto prototypes =
      draw_directions(proto_rng, config.n_categories, config.feature_dim, 1.0);
  // Fixed per-attribute offsets; norm 0.3 keeps the category signal dominant.
  const auto attr_offsets =
      draw_directions(proto_rng, config.n_attributes, config.feature_dim, 0.3);

  constexpr double kImageSize = 100.0;

  std::vector<ImageRecord> images;
  images.reserve(static_cast<size_t>(config.n_images));
  for (int i = 0; i < config.n_images; ++i) {
    Rng rng(derive_seed(config.seed, "image_" + std::to_string(i)));
    ImageRecord image;
    image.image_id = padded_id("img", i);

    int n_obj = rng.uniform_int(config.objects_min, config.objects_max);
    for (int r = 0; r < n_obj; ++r) {
      DetectedRegion region;
      region.image_id = image.image_id;
      region.region_id = image.image_id + "_r" + std::to_string(r);
      // Seeding region 0 with category i % n_categories guarantees every
      // category occurs somewhere once n_images >= n_categories, in both
      // the described and the undescribed half.
      region.category = r == 0 ? i % config.n_categories
                               : rng.uniform_int(0, config.n_categories - 1);
      if (config.n_attributes > 0 && rng.uniform() < config.attribute_prob) {
        region.attribute = rng.uniform_int(0, config.n_attributes - 1);
      }
      double cx = rng.uniform(0.15, 0.85) * kImageSize;
      double cy = rng.uniform(0.15, 0.85) * kImageSize;
      double hw = rng.uniform(0.05, 0.30) * kImageSize;
      double hh = rng.uniform(0.05, 0.30) * kImageSize;
      region.bbox = {std::max(0.0, cx - hw), std::max(0.0, cy - hh),
                     std::min(kImageSize, cx + hw), std::min(kImageSize, cy + hh),
                     kImageSize, kImageSize};

      std::vector<double> feat = prototypes[static_cast<size_t>(region.category)];
      if (region.attribute) {
        const auto& off = attr_offsets[static_cast<size_t>(*region.attribute)];
        for (size_t d = 0; d < feat.size(); ++d) feat[d] += off[d];
      }
      for (double& x : feat) x += config.feature_noise_sigma * rng.normal();
      region.feature = unit_normalized(std::move(feat));
      image.regions.push_back(std::move(region));
    }

    if (image.regions.size() >= 2) {
      int n_rel = rng.uniform_int(config.relations_min, config.relations_max);
      std::set<std::array<int, 3>> seen;  // category-level dedup
      for (int t = 0; t < n_rel; ++t) {
        size_t sub = rng.uniform_index(image.regions.size());
        size_t obj = rng.uniform_index(image.regions.size() - 1);
        if (obj >= sub) ++obj;
        RelationId rel = rng.uniform_int(0, config.n_relations - 1);
        std::array<int, 3> key{image.regions[sub].category, rel,
                               image.regions[obj].category};
        if (!seen.insert(key).second) continue;
        image.relations.push_back({image.regions[sub].region_id,
                                   image.regions[obj].region_id, rel});
      }
    }
    images.push_back(std::move(image));
  }

  // Only the first half of the images is ever described by a sentence; the
  // rest stay available as the mining pool after unpairing.
  int description_pool = (config.n_images + 1) / 2;
  std::vector<SentenceRecord> sentences;
  sentences.reserve(static_cast<size_t>(config.n_sentences));
  Rng pick_rng(derive_seed(config.seed, "sentence_gt"));
  for (int j = 0; j < config.n_sentences; ++j) {
    size_t idx = pick_rng.uniform_index(static_cast<size_t>(description_pool));
    sentences.push_back(generate_caption(
        images[idx], lexicon,
        derive_seed(config.seed, "caption_" + std::to_string(j)),
        padded_id("sen", j)));
  }
  return {std::move(images), std::move(sentences)};
}

CorpusSplit unpair_split(std::vector<ImageRecord> images,
                         std::vector<SentenceRecord> sentences,
                         double test_fraction, uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 0.5)) {
    throw ConfigError("test_fraction must lie in (0, 0.5)");
  }
  for (const auto& s : sentences) {
    if (!s.gt_image_id) {
      throw ValidationError("sentence '" + s.sentence_id +
                            "' has no gt_image_id; cannot split");
    }
  }

  size_t n_test = static_cast<size_t>(
      std::ceil(test_fraction * static_cast<double>(sentences.size())));
  std::vector<size_t> order(sentences.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "unpair"));
  rng.shuffle(order);

  std::vector<bool> is_test(sentences.size(), false);
  for (size_t i = 0; i < n_test && i < order.size(); ++i) is_test[order[i]] = true;

  CorpusSplit split;
  std::set<std::string> test_images;
  std::set<std::string> train_gt_images;
  for (size_t i = 0; i < sentences.size(); ++i) {
    const auto& s = sentences[i];
    if (is_test[i]) {
      test_images.insert(*s.gt_image_id);
      split.test_pairs.emplace_back(*s.gt_image_id, s.sentence_id);
    } else {
      train_gt_images.insert(*s.gt_image_id);
      split.train_sentence_ids.push_back(s.sentence_id);
    }
  }
  for (const auto& img : images) {
    if (test_images.count(img.image_id) || train_gt_images.count(img.image_id)) {
      continue;
    }
    split.train_image_ids.push_back(img.image_id);
  }
  if (split.train_image_ids.empty()) {
    throw SplitError("unpairing excluded every image from the train pool");
  }
  split.images = std::move(images);
  split.sentences = std::move(sentences);
  split.validate();
  return split;
}

const ImageRecord& CorpusSplit::image(const std::string& image_id) const {
  for (const auto& img : images) {
    if (img.image_id == image_id) return img;
  }
  throw ValidationError("unknown image id '" + image_id + "'");
}

const SentenceRecord& CorpusSplit::sentence(
    const std::string& sentence_id) const {
  for (const auto& s : sentences) {
    if (s.sentence_id == sentence_id) return s;
  }
  throw ValidationError("unknown sentence id '" + sentence_id + "'");
}

std::vector<const ImageRecord*> CorpusSplit::train_images() const {
  std::vector<const ImageRecord*> out;
  out.reserve(train_image_ids.size());
  for (const auto& id : train_image_ids) out.push_back(&image(id));
  return out;
}

std::vector<const SentenceRecord*> CorpusSplit::train_sentences() const {
  std::vector<const SentenceRecord*> out;
  out.reserve(train_sentence_ids.size());
  for (const auto& id : train_sentence_ids) out.push_back(&sentence(id));
  return out;
}

std::vector<std::pair<const ImageRecord*, const SentenceRecord*>>
CorpusSplit::resolved_test_pairs() const {
  std::vector<std::pair<const ImageRecord*, const SentenceRecord*>> out;
  out.reserve(test_pairs.size());
  for (const auto& [img_id, sen_id] : test_pairs) {
    out.emplace_back(&image(img_id), &sentence(sen_id));
  }
  return out;
}

void CorpusSplit::validate() const {
  std::set<std::string> image_ids;
  size_t feature_dim = 0;
  for (const auto& img : images) {
    if (!image_ids.insert(img.image_id).second) {
      throw ValidationError("duplicate image id '" + img.image_id + "'");
    }
    std::set<std::string> region_ids;
    for (const auto& r : img.regions) {
      if (!region_ids.insert(r.region_id).second) {
        throw ValidationError("duplicate region id '" + r.region_id +
                              "' in image '" + img.image_id + "'");
      }
      if (!r.bbox.valid()) {
        throw ValidationError("invalid bbox in region '" + r.region_id + "'");
      }
      if (feature_dim == 0) feature_dim = r.feature.size();
      if (r.feature.size() != feature_dim) {
        throw ValidationError("feature dim mismatch in region '" + r.region_id +
                              "'");
      }
      for (double x : r.feature) {
        if (!std::isfinite(x)) {
          throw ValidationError("non-finite feature in region '" + r.region_id +
                                "'");
        }
      }
    }
    for (const auto& rel : img.relations) {
      if (rel.subject_region_id == rel.object_region_id) {
        throw ValidationError("self-relation in image '" + img.image_id + "'");
      }
      if (!img.find_region(rel.subject_region_id) ||
          !img.find_region(rel.object_region_id)) {
        throw ValidationError("relation references foreign region in image '" +
                              img.image_id + "'");
      }
    }
  }

  std::set<std::string> sentence_ids;
  for (const auto& s : sentences) {
    if (!sentence_ids.insert(s.sentence_id).second) {
      throw ValidationError("duplicate sentence id '" + s.sentence_id + "'");
    }
    if (s.tokens.empty()) {
      throw ValidationError("sentence '" + s.sentence_id + "' has no tokens");
    }
    if (s.gt_image_id && !image_ids.count(*s.gt_image_id)) {
      throw ValidationError("sentence '" + s.sentence_id +
                            "' references unknown image '" + *s.gt_image_id +
                            "'");
    }
  }

  std::set<std::string> train_imgs(train_image_ids.begin(),
                                   train_image_ids.end());
  for (const auto& id : train_imgs) {
    if (!image_ids.count(id)) {
      throw ValidationError("train image id '" + id + "' does not resolve");
    }
  }
  for (const auto& id : train_sentence_ids) {
    if (!sentence_ids.count(id)) {
      throw ValidationError("train sentence id '" + id + "' does not resolve");
    }
  }
  std::set<std::string> test_imgs;
  std::set<std::string> test_sens;
  for (const auto& [img_id, sen_id] : test_pairs) {
    if (!image_ids.count(img_id)) {
      throw ValidationError("test pair references unknown image '" + img_id +
                            "'");
    }
    if (!sentence_ids.count(sen_id)) {
      throw ValidationError("test pair references unknown sentence '" + sen_id +
                            "'");
    }
    test_imgs.insert(img_id);
    test_sens.insert(sen_id);
  }
  for (const auto& id : test_imgs) {
    if (train_imgs.count(id)) {
      throw ValidationError("test image '" + id + "' is in the train pool");
    }
  }
  for (const auto& sen_id : train_sentence_ids) {
    if (test_sens.count(sen_id)) {
      throw ValidationError("sentence '" + sen_id + "' is both train and test");
    }
    const auto& s = sentence(sen_id);
    if (s.gt_image_id && train_imgs.count(*s.gt_image_id)) {
      throw ValidationError("train sentence '" + sen_id +
                            "' keeps its gt image in the train pool");
    }
  }
}

void write_corpus(const CorpusSplit& split, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "'");

  {
    std::ofstream regions(dir + "/regions.jsonl");
    std::ofstream relations(dir + "/relations.jsonl");
    if (!regions || !relations) throw IoError("cannot write corpus files");
    for (const auto& img : split.images) {
      for (const auto& r : img.regions) regions << region_to_json(r).dump() << '\n';
      for (const auto& rel : img.relations) {
        json j;
        j["image_id"] = img.image_id;
        j["subject_region_id"] = rel.subject_region_id;
        j["relation"] = rel.relation;
        j["object_region_id"] = rel.object_region_id;
        relations << j.dump() << '\n';
      }
    }
  }
  {
    std::ofstream out(dir + "/sentences.jsonl");
    if (!out) throw IoError("cannot write sentences.jsonl");
    for (const auto& s : split.sentences) {
      json j;
      j["sentence_id"] = s.sentence_id;
      j["lang"] = s.lang;
      j["tokens"] = s.tokens;
      if (s.gt_image_id) {
        j["gt_image_id"] = *s.gt_image_id;
      } else {
        j["gt_image_id"] = nullptr;
      }
      out << j.dump() << '\n';
    }
  }
  {
    json j;
    j["train_image_ids"] = split.train_image_ids;
    j["train_sentence_ids"] = split.train_sentence_ids;
    auto& pairs = j["test_pairs"] = json::array();
    for (const auto& [img, sen] : split.test_pairs) pairs.push_back({img, sen});
    std::ofstream out(dir + "/split.json");
    if (!out) throw IoError("cannot write split.json");
    out << j.dump(2) << '\n';
  }
}

CorpusSplit read_corpus(const std::string& dir) {
  CorpusSplit split;
  std::map<std::string, size_t> image_index;
  size_t feature_dim = 0;

  const std::string regions_path = dir + "/regions.jsonl";
  for_each_line(regions_path, [&](int line_no, const std::string& line) {
    json j = parse_line(regions_path, line_no, line);
    DetectedRegion r;
    try {
      r.image_id = j.at("image_id").get<std::string>();
      r.region_id = j.at("region_id").get<std::string>();
      r.category = j.at("category").get<int>();
      if (!j.at("attribute").is_null()) r.attribute = j.at("attribute").get<int>();
      const auto& bb = j.at("bbox");
      if (!bb.is_array() || bb.size() != 4) {
        invalid_at(regions_path, line_no, "bbox must be [x1,y1,x2,y2]");
      }
      r.bbox = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(),
                bb[3].get<double>(), j.at("image_w").get<double>(),
                j.at("image_h").get<double>()};
      r.feature = j.at("feature").get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw ParseError(regions_path + ":" + std::to_string(line_no) + ": " +
                       e.what());
    }
    if (!r.bbox.valid()) invalid_at(regions_path, line_no, "invalid bbox");
    if (feature_dim == 0) feature_dim = r.feature.size();
    if (r.feature.size() != feature_dim) {
      invalid_at(regions_path, line_no, "feature dim mismatch");
    }
    auto [it, inserted] = image_index.emplace(r.image_id, split.images.size());
    if (inserted) {
      ImageRecord img;
      img.image_id = r.image_id;
      split.images.push_back(std::move(img));
    }
    split.images[it->second].regions.push_back(std::move(r));
  });

  const std::string relations_path = dir + "/relations.jsonl";
  if (fs::exists(relations_path)) {
    for_each_line(relations_path, [&](int line_no, const std::string& line) {
      json j = parse_line(relations_path, line_no, line);
      std::string image_id;
      RelationTriple rel;
      try {
        image_id = j.at("image_id").get<std::string>();
        rel.subject_region_id = j.at("subject_region_id").get<std::string>();
        rel.relation = j.at("relation").get<int>();
        rel.object_region_id = j.at("object_region_id").get<std::string>();
      } catch (const json::exception& e) {
        throw ParseError(relations_path + ":" + std::to_string(line_no) + ": " +
                         e.what());
      }
      auto it = image_index.find(image_id);
      if (it == image_index.end()) {
        invalid_at(relations_path, line_no, "unknown image '" + image_id + "'");
      }
      auto& img = split.images[it->second];
      if (!img.find_region(rel.subject_region_id) ||
          !img.find_region(rel.object_region_id)) {
        invalid_at(relations_path, line_no, "relation references unknown region");
      }
      img.relations.push_back(std::move(rel));
    });
  }

  const std::string sentences_path = dir + "/sentences.jsonl";
  for_each_line(sentences_path, [&](int line_no, const std::string& line) {
    json j = parse_line(sentences_path, line_no, line);
    SentenceRecord s;
    try {
      s.sentence_id = j.at("sentence_id").get<std::string>();
      s.lang = j.at("lang").get<std::string>();
      s.tokens = j.at("tokens").get<std::vector<std::string>>();
      if (!j.at("gt_image_id").is_null()) {
        s.gt_image_id = j.at("gt_image_id").get<std::string>();
      }
    } catch (const json::exception& e) {
      throw ParseError(sentences_path + ":" + std::to_string(line_no) + ": " +
                       e.what());
    }
    if (s.tokens.empty()) invalid_at(sentences_path, line_no, "empty sentence");
    split.sentences.push_back(std::move(s));
  });

  const std::string split_path = dir + "/split.json";
  std::ifstream in(split_path);
  if (!in) throw IoError("cannot open '" + split_path + "'");
  json j;
  try {
    in >> j;
    split.train_image_ids = j.at("train_image_ids").get<std::vector<std::string>>();
    split.train_sentence_ids =
        j.at("train_sentence_ids").get<std::vector<std::string>>();
    for (const auto& p : j.at("test_pairs")) {
      split.test_pairs.emplace_back(p.at(0).get<std::string>(),
                                    p.at(1).get<std::string>());
    }
  } catch (const json::exception& e) {
    throw ParseError(split_path + ": " + e.what());
  }

  split.validate();
  return split;
}

}  // namespace capmine
