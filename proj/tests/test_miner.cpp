#include <filesystem>
#include <set>

#include "capmine/corpus.hpp"
#include "capmine/miner.hpp"
#include "doctest.h"

using namespace capmine;

namespace {

constexpr CategoryId kDog = 0, kBall = 2, kCat = 1, kTree = 3;
constexpr RelationId kChases = 0, kBites = 5;
constexpr AttributeId kRed = 0;

ImageRecord image_with(const std::string& id,
                       std::vector<std::pair<CategoryId, std::optional<AttributeId>>> spec) {
  ImageRecord img;
  img.image_id = id;
  for (size_t i = 0; i < spec.size(); ++i) {
    DetectedRegion r;
    r.region_id = id + "_r" + std::to_string(i);
    r.image_id = id;
    r.category = spec[i].first;
    r.attribute = spec[i].second;
    r.bbox = {5.0 + i, 6.0, 25.0 + i, 46.0, 100.0, 100.0};
    r.feature = {0.5, 0.5, 0.5, 0.5};
    img.regions.push_back(std::move(r));
  }
  return img;
}

ParsedSentence parsed_with(std::vector<CategoryId> concepts,
                           std::vector<std::array<int, 3>> triplets = {},
                           std::vector<std::pair<AttributeId, CategoryId>> attrs = {}) {
  ParsedSentence p;
  p.sentence_id = "sen_x";
  p.token_ids = {1, 5, 6, 7, 2};
  p.concepts = std::move(concepts);
  p.triplets = std::move(triplets);
  p.attr_pairs = std::move(attrs);
  return p;
}

std::vector<CategoryId> categories_of(const TrainingPair& pair) {
  std::vector<CategoryId> cats;
  for (const auto& m : pair.regions) cats.push_back(m.region.category);
  return cats;
}

}  // namespace

TEST_CASE("mine_pair samples one region per indexable concept") {
  std::vector<ImageRecord> images{
      image_with("img_1", {{kDog, std::nullopt}, {kBall, std::nullopt}}),
      image_with("img_2", {{kDog, std::nullopt}}),
  };
  RegionIndex index = RegionIndex::build(images);
  Rng rng(4);
  auto pair = mine_pair(parsed_with({kDog, kBall}), index, rng);
  REQUIRE(pair.regions.size() == 2);
  auto cats = categories_of(pair);
  CHECK(std::set<CategoryId>(cats.begin(), cats.end()) ==
        std::set<CategoryId>{kDog, kBall});
  CHECK(pair.coverage == 1.0);
  for (const auto& m : pair.regions) {
    CHECK(m.provenance == Provenance::kConcept);
    CHECK(m.geometry == geometry_vector(m.region));
  }
}

TEST_CASE("mine_pair with no concepts yields an empty pair") {
  RegionIndex index = RegionIndex::build(std::vector<ImageRecord>{});
  Rng rng(4);
  auto pair = mine_pair(parsed_with({}), index, rng);
  CHECK(pair.regions.empty());
  CHECK(pair.coverage == 0.0);
}

TEST_CASE("mine_pair skips unindexable concepts and lowers coverage") {
  std::vector<ImageRecord> images{image_with("img_1", {{kDog, std::nullopt}})};
  RegionIndex index = RegionIndex::build(images);
  Rng rng(4);
  auto pair = mine_pair(parsed_with({kDog, 99}), index, rng);
  REQUIRE(pair.regions.size() == 1);
  CHECK(pair.regions[0].region.category == kDog);
  CHECK(pair.coverage == 0.5);
}

TEST_CASE("mine_pair_extended appends a same-image region pair per triplet") {
  auto img = image_with("img_1", {{kDog, std::nullopt}, {kBall, std::nullopt}});
  img.relations.push_back({"img_1_r0", "img_1_r1", kChases});
  std::vector<ImageRecord> images{img, image_with("img_2", {{kDog, std::nullopt}})};
  RegionIndex index = RegionIndex::build(images);

  MinerConfig config;
  config.use_relations = true;
  Rng rng(4);
  auto pair = mine_pair_extended(
      parsed_with({kDog, kBall}, {{kDog, kChases, kBall}}), index, rng, config);
  REQUIRE(pair.regions.size() == 4);  // k=2 concepts + one (sub, obj) pair
  CHECK(pair.regions[2].provenance == Provenance::kRelationPair);
  CHECK(pair.regions[3].provenance == Provenance::kRelationPair);
  CHECK(pair.regions[2].region.image_id == pair.regions[3].region.image_id);
  CHECK(pair.coverage == 1.0);

  // vague matching: triplet with a different relation id still resolves
  Rng rng2(4);
  auto vague = mine_pair_extended(
      parsed_with({kDog, kBall}, {{kDog, kBites, kBall}}), index, rng2, config);
  CHECK(vague.regions.size() == 4);
}

TEST_CASE("mine_pair_extended falls back to concepts when no pair indexed") {
  std::vector<ImageRecord> images{
      image_with("img_1", {{kDog, std::nullopt}, {kBall, std::nullopt}})};
  RegionIndex index = RegionIndex::build(images);  // no relations indexed
  MinerConfig config;
  config.use_relations = true;
  Rng rng(4);
  auto pair = mine_pair_extended(
      parsed_with({kDog, kBall}, {{kDog, kChases, kBall}}), index, rng, config);
  CHECK(pair.regions.size() == 2);
}

TEST_CASE("mine_pair_extended prefers attribute-matched concept regions") {
  std::vector<ImageRecord> images{
      image_with("img_1", {{kDog, kRed}, {kDog, std::nullopt}}),
  };
  RegionIndex index = RegionIndex::build(images);
  MinerConfig config;
  config.use_attributes = true;
  Rng rng(4);
  auto pair = mine_pair_extended(parsed_with({kDog}, {}, {{kRed, kDog}}), index,
                                 rng, config);
  REQUIRE(pair.regions.size() == 1);
  CHECK(pair.regions[0].region.attribute == kRed);
  CHECK(pair.regions[0].provenance == Provenance::kAttribute);

  // attribute never generated: falls back to a plain dog region
  Rng rng2(4);
  auto fallback = mine_pair_extended(parsed_with({kDog}, {}, {{3, kDog}}), index,
                                     rng2, config);
  REQUIRE(fallback.regions.size() == 1);
  CHECK(fallback.regions[0].provenance == Provenance::kConcept);
}

TEST_CASE("mine_pseudo_pair picks the max-overlap image with tie rules") {
  auto i1 = image_with("img_1", {{kDog, std::nullopt}});
  auto i2 = image_with("img_2", {{kDog, std::nullopt},
                                 {kBall, std::nullopt},
                                 {kCat, std::nullopt}});
  std::vector<const ImageRecord*> images{&i1, &i2};

  auto sentence = parsed_with({kDog, kBall});
  CHECK(mine_pseudo_pair(sentence, images, 2) == &i2);
  CHECK(mine_pseudo_pair(sentence, images, 3) == nullptr);

  // overlap tie at 2: fewer regions wins
  auto i3 = image_with("img_3", {{kDog, std::nullopt}, {kBall, std::nullopt}});
  std::vector<const ImageRecord*> tied{&i2, &i3};
  CHECK(mine_pseudo_pair(sentence, tied, 2) == &i3);

  // min_overlap 0: every image qualifies, still best-overlap
  CHECK(mine_pseudo_pair(parsed_with({kTree}), images, 0) != nullptr);
}

TEST_CASE("image_as_pair feeds every region of the image") {
  auto img = image_with("img_2", {{kDog, std::nullopt},
                                  {kBall, std::nullopt},
                                  {kCat, std::nullopt}});
  auto pair = image_as_pair(img, parsed_with({kDog, kTree}));
  CHECK(pair.regions.size() == 3);
  CHECK(pair.coverage == 0.5);  // dog covered, tree missing
}

TEST_CASE("degrade_coverage replaces the exact floor count") {
  std::vector<ImageRecord> images;
  for (int c = 0; c < 12; ++c) {
    images.push_back(image_with("img_" + std::to_string(10 + c),
                                {{c, std::nullopt}, {c, std::nullopt}}));
  }
  RegionIndex index = RegionIndex::build(images);
  Rng mine_rng(4);
  auto pair = mine_pair(parsed_with({0, 1, 2, 3}), index, mine_rng);
  REQUIRE(pair.coverage == 1.0);

  Rng rng(9);
  auto dropped = degrade_coverage(pair, 0.5, index, rng);
  CHECK(dropped.regions.size() == 4);
  CHECK(dropped.coverage == 0.5);

  int kept_concepts = 0;
  for (const auto& m : dropped.regions) {
    if (std::find(pair.concepts.begin(), pair.concepts.end(),
                  m.region.category) != pair.concepts.end()) {
      ++kept_concepts;
    }
  }
  CHECK(kept_concepts == 2);  // exactly 2 of 4 replaced

  Rng rng2(9);
  auto identity = degrade_coverage(pair, 0.0, index, rng2);
  CHECK(identity.regions.size() == pair.regions.size());
  CHECK(identity.coverage == 1.0);

  Rng rng3(9);
  Rng mine_rng2(4);
  auto all = degrade_coverage(mine_pair(parsed_with({0, 1, 2}), index, mine_rng2),
                              1.0, index, rng3);
  CHECK(all.coverage == 0.0);
}

TEST_CASE("degrade_coverage remove mode deletes regions instead") {
  std::vector<ImageRecord> images;
  for (int c = 0; c < 6; ++c) {
    images.push_back(
        image_with("img_" + std::to_string(10 + c), {{c, std::nullopt}}));
  }
  RegionIndex index = RegionIndex::build(images);
  Rng mine_rng(4);
  auto pair = mine_pair(parsed_with({0, 1, 2, 3}), index, mine_rng);
  Rng rng(9);
  auto dropped =
      degrade_coverage(pair, 0.5, index, rng, CoverageDropMode::kRemove);
  CHECK(dropped.regions.size() == 2);
  CHECK(dropped.coverage == 0.5);
}

TEST_CASE("replace_objects swaps donors of the same category") {
  std::vector<ImageRecord> images;
  images.push_back(image_with("img_0", {{kDog, std::nullopt}}));
  for (int i = 1; i <= 4; ++i) {
    images.push_back(
        image_with("img_" + std::to_string(i), {{kDog, std::nullopt}}));
  }
  RegionIndex index = RegionIndex::build(images);
  Rng rng(6);
  auto result = replace_objects(images[0], index, rng, false);
  REQUIRE(result.regions.size() == 1);
  CHECK(result.regions[0].region.category == kDog);
  CHECK(result.regions[0].region.region_id != "img_0_r0");
  CHECK(result.singleton_keeps == 0);
  // keep-geometry: location comes from the replaced region
  CHECK(result.regions[0].geometry ==
        geometry_vector(images[0].regions[0]));

  Rng rng2(6);
  auto donor_geom = replace_objects(images[0], index, rng2, true);
  CHECK(donor_geom.regions[0].geometry ==
        geometry_vector(donor_geom.regions[0].region));
}

TEST_CASE("replace_objects keeps singletons and counts them") {
  std::vector<ImageRecord> images{image_with("img_0", {{kTree, std::nullopt}})};
  RegionIndex index = RegionIndex::build(images);
  Rng rng(6);
  auto result = replace_objects(images[0], index, rng, false);
  REQUIRE(result.regions.size() == 1);
  CHECK(result.regions[0].region.region_id == "img_0_r0");
  CHECK(result.singleton_keeps == 1);
}

TEST_CASE("replace_objects preserves the category multiset") {
  auto lexicon = builtin_lexicon(40, 6, 5);
  SynthConfig config;
  config.n_images = 60;
  config.n_sentences = 5;
  config.seed = 31;
  auto [images, sentences] = generate_corpus(config, lexicon);
  RegionIndex index = RegionIndex::build(images);
  Rng rng(12);
  for (size_t i = 0; i < 10; ++i) {
    auto result = replace_objects(images[i], index, rng, true);
    std::multiset<CategoryId> before, after;
    for (const auto& r : images[i].regions) before.insert(r.category);
    for (const auto& m : result.regions) after.insert(m.region.category);
    CHECK(before == after);
  }
}

TEST_CASE("compute_coverage averages per-pair concept coverage") {
  CHECK(pair_coverage({kDog, kTree}, {kDog, kBall, kTree}) ==
        doctest::Approx(2.0 / 3.0));

  TrainingPair full;
  full.concepts = {kDog};
  full.regions.push_back(
      {image_with("img_1", {{kDog, std::nullopt}}).regions[0],
       {0.1, 0.1, 0.2, 0.2, 0.01},
       Provenance::kConcept});
  full.coverage = 1.0;
  TrainingPair half;
  half.concepts = {kDog, kBall};
  half.regions = full.regions;
  half.coverage = 0.5;
  CHECK(compute_coverage({full, half}) == doctest::Approx(0.75));

  CHECK_THROWS_AS(compute_coverage({}), UndefinedMetricError);
  TrainingPair empty;
  CHECK_THROWS_AS(compute_coverage({empty}), UndefinedMetricError);
}

TEST_CASE("full-index mining yields coverage exactly 1.0") {
  auto lexicon = builtin_lexicon(40, 6, 5);
  SynthConfig config;
  config.n_images = 120;
  config.n_sentences = 150;
  config.seed = 13;
  auto [images, sentences] = generate_corpus(config, lexicon);
  RegionIndex index = RegionIndex::build(images);

  auto [vocab, kept] = build_vocab(sentences, 1, 100);
  std::vector<TrainingPair> pairs;
  for (const auto& s : kept) {
    Rng rng(derive_seed(13, s.sentence_id));
    auto parsed = parse_sentence(s, vocab, lexicon);
    pairs.push_back(mine_pair(parsed, index, rng));
    // category multiset match: one region per concept
    CHECK(pairs.back().regions.size() == parsed.concepts.size());
  }
  CHECK(compute_coverage(pairs) == 1.0);
}

TEST_CASE("pseudo-pair coverage is monotone in min_overlap") {
  auto lexicon = builtin_lexicon(40, 6, 5);
  SynthConfig config;
  config.n_images = 150;
  config.n_sentences = 120;
  config.seed = 17;
  auto [images, sentences] = generate_corpus(config, lexicon);

  std::vector<const ImageRecord*> pool;
  for (size_t i = images.size() / 2; i < images.size(); ++i) {
    pool.push_back(&images[i]);
  }
  auto [vocab, kept] = build_vocab(sentences, 1, 100);

  double last = -1.0;
  for (int overlap : {0, 1, 2}) {
    std::vector<TrainingPair> accepted;
    for (const auto& s : kept) {
      auto parsed = parse_sentence(s, vocab, lexicon);
      if (const ImageRecord* img = mine_pseudo_pair(parsed, pool, overlap)) {
        accepted.push_back(image_as_pair(*img, parsed));
      }
    }
    REQUIRE(!accepted.empty());
    double mean = compute_coverage(accepted);
    CHECK(mean >= last);
    CHECK(mean < 1.0);
    last = mean;
  }
}

TEST_CASE("mining is deterministic given the rng seed") {
  auto lexicon = builtin_lexicon(40, 6, 5);
  SynthConfig config;
  config.n_images = 50;
  config.n_sentences = 30;
  config.seed = 23;
  auto [images, sentences] = generate_corpus(config, lexicon);
  RegionIndex index = RegionIndex::build(images);
  auto [vocab, kept] = build_vocab(sentences, 1, 100);

  auto parsed = parse_sentence(kept[0], vocab, lexicon);
  Rng a(55), b(55);
  auto pa = mine_pair(parsed, index, a);
  auto pb = mine_pair(parsed, index, b);
  REQUIRE(pa.regions.size() == pb.regions.size());
  for (size_t i = 0; i < pa.regions.size(); ++i) {
    CHECK(pa.regions[i].region.region_id == pb.regions[i].region.region_id);
  }
}

TEST_CASE("pairs.jsonl round-trips") {
  auto lexicon = builtin_lexicon(40, 6, 5);
  SynthConfig config;
  config.n_images = 40;
  config.n_sentences = 20;
  config.seed = 29;
  auto [images, sentences] = generate_corpus(config, lexicon);
  RegionIndex index = RegionIndex::build(images);
  auto [vocab, kept] = build_vocab(sentences, 1, 100);

  std::vector<TrainingPair> pairs;
  for (const auto& s : kept) {
    Rng rng(derive_seed(29, s.sentence_id));
    pairs.push_back(mine_pair(parse_sentence(s, vocab, lexicon), index, rng));
  }
  std::string path = "/tmp/capmine_pairs_test.jsonl";
  write_pairs(pairs, path);
  auto loaded = read_pairs(path);
  REQUIRE(loaded.size() == pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    CHECK(loaded[i].sentence_id == pairs[i].sentence_id);
    CHECK(loaded[i].token_ids == pairs[i].token_ids);
    CHECK(loaded[i].coverage == pairs[i].coverage);
    REQUIRE(loaded[i].regions.size() == pairs[i].regions.size());
    for (size_t r = 0; r < pairs[i].regions.size(); ++r) {
      CHECK(loaded[i].regions[r].region.region_id ==
            pairs[i].regions[r].region.region_id);
      CHECK(loaded[i].regions[r].geometry == pairs[i].regions[r].geometry);
      CHECK(loaded[i].regions[r].region.feature ==
            pairs[i].regions[r].region.feature);
      CHECK(loaded[i].regions[r].provenance == pairs[i].regions[r].provenance);
    }
  }
}
