#include "capmine/miner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"

using nlohmann::json;

namespace capmine {

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::kConcept: return "concept";
    case Provenance::kRelationPair: return "relation-pair";
    case Provenance::kAttribute: return "attribute";
  }
  throw ValidationError("unknown provenance");
}

Provenance provenance_from_name(const std::string& name) {
  if (name == "concept") return Provenance::kConcept;
  if (name == "relation-pair") return Provenance::kRelationPair;
  if (name == "attribute") return Provenance::kAttribute;
  throw ParseError("unknown provenance '" + name + "'");
}

void MinerConfig::validate() const {
  if (coverage_drop < 0.0 || coverage_drop > 1.0) {
    throw ConfigError("coverage_drop outside [0,1]");
  }
  if (pseudo_min_overlap < 0) throw ConfigError("pseudo_min_overlap < 0");
}

double pair_coverage(const std::vector<CategoryId>& region_categories,
                     const std::vector<CategoryId>& concepts) {
  if (concepts.empty()) return 0.0;
  int covered = 0;
  for (CategoryId c : concepts) {
    if (std::find(region_categories.begin(), region_categories.end(), c) !=
        region_categories.end()) {
      ++covered;
    }
  }
  return static_cast<double>(covered) / static_cast<double>(concepts.size());
}

namespace {

std::vector<CategoryId> region_categories(const TrainingPair& pair) {
  std::vector<CategoryId> cats;
  cats.reserve(pair.regions.size());
  for (const auto& m : pair.regions) cats.push_back(m.region.category);
  return cats;
}

MinedRegion make_mined(const DetectedRegion& region, Provenance prov) {
  return {region, geometry_vector(region), prov};
}

}  // namespace

double compute_coverage(const std::vector<TrainingPair>& pairs) {
  if (pairs.empty()) throw UndefinedMetricError("coverage of an empty pair list");
  double sum = 0.0;
  int counted = 0;
  for (const auto& p : pairs) {
    if (p.concepts.empty()) continue;
    sum += pair_coverage(region_categories(p), p.concepts);
    ++counted;
  }
  if (counted == 0) {
    throw UndefinedMetricError("every pair has zero concepts");
  }
  return sum / counted;
}

TrainingPair mine_pair(const ParsedSentence& sentence, const RegionIndex& index,
                       Rng& rng) {
  TrainingPair pair;
  pair.sentence_id = sentence.sentence_id;
  pair.token_ids = sentence.token_ids;
  pair.concepts = sentence.concepts;
  for (CategoryId concept_id : sentence.concepts) {
    if (const DetectedRegion* r = index.try_sample_region(concept_id, rng)) {
      pair.regions.push_back(make_mined(*r, Provenance::kConcept));
    }
  }
  pair.coverage = pair_coverage(region_categories(pair), pair.concepts);
  return pair;
}

TrainingPair mine_pair_extended(const ParsedSentence& sentence,
                                const RegionIndex& index, Rng& rng,
                                const MinerConfig& config) {
  TrainingPair pair;
  pair.sentence_id = sentence.sentence_id;
  pair.token_ids = sentence.token_ids;
  pair.concepts = sentence.concepts;

  for (CategoryId concept_id : sentence.concepts) {
    const DetectedRegion* r = nullptr;
    Provenance prov = Provenance::kConcept;
    if (config.use_attributes) {
      for (const auto& [attr, cat] : sentence.attr_pairs) {
        if (cat != concept_id) continue;
        if (const DetectedRegion* a = index.try_sample_attr_region(cat, attr, rng)) {
          r = a;
          prov = Provenance::kAttribute;
        }
        break;  // one attribute lookup per concept; fallback is plain sampling
      }
    }
    if (!r) r = index.try_sample_region(concept_id, rng);
    if (r) pair.regions.push_back(make_mined(*r, prov));
  }

  if (config.use_relations) {
    for (const auto& t : sentence.triplets) {
      auto sampled = index.try_sample_relation_pair(t[0], t[2], rng);
      if (!sampled) continue;  // concepts already covered by the loop above
      pair.regions.push_back(make_mined(*sampled->first, Provenance::kRelationPair));
      pair.regions.push_back(make_mined(*sampled->second, Provenance::kRelationPair));
    }
  }

  pair.coverage = pair_coverage(region_categories(pair), pair.concepts);
  return pair;
}

const ImageRecord* mine_pseudo_pair(
    const ParsedSentence& sentence,
    const std::vector<const ImageRecord*>& train_images, int min_overlap) {
  if (min_overlap < 0) throw ConfigError("min_overlap < 0");
  const ImageRecord* best = nullptr;
  int best_overlap = -1;
  for (const ImageRecord* img : train_images) {
    auto cats = img->category_set();
    int overlap = 0;
    for (CategoryId c : sentence.concepts) {
      if (std::find(cats.begin(), cats.end(), c) != cats.end()) ++overlap;
    }
    if (overlap < min_overlap) continue;
    bool better;
    if (!best) {
      better = true;
    } else if (overlap != best_overlap) {
      better = overlap > best_overlap;
    } else if (img->regions.size() != best->regions.size()) {
      better = img->regions.size() < best->regions.size();
    } else {
      better = img->image_id < best->image_id;
    }
    if (better) {
      best = img;
      best_overlap = overlap;
    }
  }
  return best;
}

TrainingPair image_as_pair(const ImageRecord& image,
                           const ParsedSentence& sentence) {
  TrainingPair pair;
  pair.sentence_id = sentence.sentence_id;
  pair.token_ids = sentence.token_ids;
  pair.concepts = sentence.concepts;
  for (const auto& r : image.regions) {
    pair.regions.push_back(make_mined(r, Provenance::kConcept));
  }
  pair.coverage = pair_coverage(region_categories(pair), pair.concepts);
  return pair;
}

TrainingPair degrade_coverage(TrainingPair pair, double drop,
                              const RegionIndex& index, Rng& rng,
                              CoverageDropMode mode) {
  if (drop < 0.0 || drop > 1.0) throw ConfigError("drop outside [0,1]");

  std::vector<size_t> concept_regions;
  for (size_t i = 0; i < pair.regions.size(); ++i) {
    if (pair.regions[i].provenance == Provenance::kConcept) {
      concept_regions.push_back(i);
    }
  }
  size_t n_replace = static_cast<size_t>(
      std::floor(drop * static_cast<double>(concept_regions.size())));
  if (n_replace == 0) return pair;

  rng.shuffle(concept_regions);
  concept_regions.resize(n_replace);
  std::sort(concept_regions.begin(), concept_regions.end());

  if (mode == CoverageDropMode::kRemove) {
    for (auto it = concept_regions.rbegin(); it != concept_regions.rend(); ++it) {
      pair.regions.erase(pair.regions.begin() + static_cast<long>(*it));
    }
  } else {
    // Substitution targets categories outside the sentence so each replaced
    // concept really loses its coverage; region count stays fixed.
    std::set<CategoryId> concept_set(pair.concepts.begin(), pair.concepts.end());
    std::vector<CategoryId> candidates;
    for (CategoryId c : index.categories()) {
      if (!concept_set.count(c)) candidates.push_back(c);
    }
    for (size_t idx : concept_regions) {
      if (candidates.empty()) break;
      CategoryId cat = candidates[rng.uniform_index(candidates.size())];
      const DetectedRegion* donor = index.try_sample_region(cat, rng);
      if (donor) pair.regions[idx] = make_mined(*donor, Provenance::kConcept);
    }
  }

  pair.coverage = pair_coverage(region_categories(pair), pair.concepts);
  return pair;
}

ReplaceResult replace_objects(const ImageRecord& image, const RegionIndex& index,
                              Rng& rng, bool replace_geometry) {
  ReplaceResult result;
  for (const auto& original : image.regions) {
    const DetectedRegion* donor = index.try_sample_replacement(original, rng);
    if (!donor) {
      result.regions.push_back(make_mined(original, Provenance::kConcept));
      ++result.singleton_keeps;
      continue;
    }
    MinedRegion mined{*donor,
                      replace_geometry ? geometry_vector(*donor)
                                       : geometry_vector(original),
                      Provenance::kConcept};
    result.regions.push_back(std::move(mined));
  }
  return result;
}

void write_pairs(const std::vector<TrainingPair>& pairs,
                 const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& p : pairs) {
    json j;
    j["sentence_id"] = p.sentence_id;
    j["token_ids"] = p.token_ids;
    j["coverage"] = p.coverage;
    auto& regions = j["regions"] = json::array();
    for (const auto& m : p.regions) {
      json r;
      r["region_id"] = m.region.region_id;
      r["image_id"] = m.region.image_id;
      r["category"] = m.region.category;
      r["geometry"] = m.geometry;
      r["feature"] = m.region.feature;
      r["provenance"] = provenance_name(m.provenance);
      regions.push_back(std::move(r));
    }
    out << j.dump() << '\n';
  }
}

std::vector<TrainingPair> read_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<TrainingPair> pairs;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    TrainingPair p;
    try {
      p.sentence_id = j.at("sentence_id").get<std::string>();
      p.token_ids = j.at("token_ids").get<std::vector<TokenId>>();
      p.coverage = j.at("coverage").get<double>();
      for (const auto& r : j.at("regions")) {
        MinedRegion m;
        m.region.region_id = r.at("region_id").get<std::string>();
        m.region.image_id = r.at("image_id").get<std::string>();
        m.region.category = r.at("category").get<int>();
        auto geom = r.at("geometry").get<std::vector<double>>();
        if (geom.size() != 5) {
          throw ParseError(path + ":" + std::to_string(line_no) +
                           ": geometry must have 5 components");
        }
        std::copy(geom.begin(), geom.end(), m.geometry.begin());
        m.region.feature = r.at("feature").get<std::vector<double>>();
        m.provenance = provenance_from_name(r.at("provenance").get<std::string>());
        p.regions.push_back(std::move(m));
      }
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

void write_mining_report(const MiningReport& report, const std::string& path) {
  json j;
  j["mode"] = report.mode;
  j["n_sentences"] = report.n_sentences;
  j["n_pairs"] = report.n_pairs;
  j["coverage_mean"] = report.coverage_mean;
  j["skipped_concepts"] = report.skipped_concepts;
  j["zero_concept_pairs"] = report.zero_concept_pairs;
  j["pseudo_rejected"] = report.pseudo_rejected;
  j["singleton_keeps"] = report.singleton_keeps;
  j["relation_pairs_added"] = report.relation_pairs_added;
  j["attribute_regions"] = report.attribute_regions;
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
}

MiningReport read_mining_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  MiningReport r;
  r.mode = j.at("mode").get<std::string>();
  r.n_sentences = j.at("n_sentences").get<int>();
  r.n_pairs = j.at("n_pairs").get<int>();
  r.coverage_mean = j.at("coverage_mean").get<double>();
  r.skipped_concepts = j.at("skipped_concepts").get<int>();
  r.zero_concept_pairs = j.at("zero_concept_pairs").get<int>();
  r.pseudo_rejected = j.at("pseudo_rejected").get<int>();
  r.singleton_keeps = j.at("singleton_keeps").get<int>();
  r.relation_pairs_added = j.at("relation_pairs_added").get<int>();
  r.attribute_regions = j.at("attribute_regions").get<int>();
  return r;
}

}  // namespace capmine
