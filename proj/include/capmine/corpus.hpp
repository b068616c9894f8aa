#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "capmine/records.hpp"
#include "capmine/textproc.hpp"

namespace capmine {

struct SynthConfig {
  int n_images = 0;
  int n_sentences = 0;
  int n_categories = 40;
  int n_relations = 6;
  int n_attributes = 5;
  int feature_dim = 64;
  double feature_noise_sigma = 0.1;
  int objects_min = 2;
  int objects_max = 6;
  int relations_min = 0;
  int relations_max = 3;
  double attribute_prob = 0.5;  // chance a region carries an attribute
  uint64_t seed = 0;

  void validate() const;
};

// Train/test partition plus the full record tables. Train sentences keep
// their gt_image_id for evaluation and the supervised modes, so the tables
// retain every image, including those excluded from the train pool by
// unpairing.
struct CorpusSplit {
  std::vector<ImageRecord> images;
  std::vector<SentenceRecord> sentences;
  std::vector<std::string> train_image_ids;
  std::vector<std::string> train_sentence_ids;
  std::vector<std::pair<std::string, std::string>> test_pairs;  // (image, sentence)

  const ImageRecord& image(const std::string& image_id) const;
  const SentenceRecord& sentence(const std::string& sentence_id) const;

  std::vector<const ImageRecord*> train_images() const;
  std::vector<const SentenceRecord*> train_sentences() const;
  std::vector<std::pair<const ImageRecord*, const SentenceRecord*>>
  resolved_test_pairs() const;

  void validate() const;
};

// Seeded synthetic corpus. Region features are unit-normalized
// category prototypes plus an attribute offset plus Gaussian noise.
// Sentences are template captions of the scene graphs of the first
// ceil(n_images/2) images; the remaining images stay undescribed so the
// unpairing step always leaves a usable train pool.
std::pair<std::vector<ImageRecord>, std::vector<SentenceRecord>>
generate_corpus(const SynthConfig& config, const ConceptLexicon& lexicon);

// Moves ceil(test_fraction * n_sentences) sentences with their gt images
// into the test set, then removes every remaining gt image and every test
// image from the train image pool.
CorpusSplit unpair_split(std::vector<ImageRecord> images,
                         std::vector<SentenceRecord> sentences,
                         double test_fraction, uint64_t seed);

// regions.jsonl + relations.jsonl + sentences.jsonl + split.json.
void write_corpus(const CorpusSplit& split, const std::string& dir);
CorpusSplit read_corpus(const std::string& dir);

}  // namespace capmine
