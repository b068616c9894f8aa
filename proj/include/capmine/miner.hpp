#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "capmine/records.hpp"
#include "capmine/region_index.hpp"
#include "capmine/textproc.hpp"

namespace capmine {

enum class Provenance { kConcept, kRelationPair, kAttribute };

const char* provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& name);

struct MinedRegion {
  DetectedRegion region;
  std::array<double, 5> geometry;
  Provenance provenance = Provenance::kConcept;
};

// One training unit: a sentence and the regions harvested for it.
struct TrainingPair {
  std::string sentence_id;
  std::vector<MinedRegion> regions;
  std::vector<TokenId> token_ids;  // BOS ... EOS framed
  std::vector<CategoryId> concepts;  // not serialized; kept for reporting
  double coverage = 0.0;
};

enum class CoverageDropMode { kSubstitute, kRemove };

struct MinerConfig {
  bool use_relations = false;
  bool use_attributes = false;
  double coverage_drop = 0.0;
  CoverageDropMode drop_mode = CoverageDropMode::kSubstitute;
  int pseudo_min_overlap = 0;
  uint64_t seed = 0;

  void validate() const;
};

// Fraction of the sentence concepts that appear among the region categories.
double pair_coverage(const std::vector<CategoryId>& region_categories,
                     const std::vector<CategoryId>& concepts);

// Mean coverage over pairs; sentences with zero concepts are excluded.
double compute_coverage(const std::vector<TrainingPair>& pairs);

// One region per indexable sentence concept, sampled uniformly from the
// index. Unindexable concepts are skipped and lower the coverage.
TrainingPair mine_pair(const ParsedSentence& sentence, const RegionIndex& index,
                       Rng& rng);

// mine_pair plus attribute-conditioned concept regions and same-image
// (subject, object) region pairs for each sentence triplet. Relation ids are
// ignored at pair lookup; failed lookups fall back as documented.
TrainingPair mine_pair_extended(const ParsedSentence& sentence,
                                const RegionIndex& index, Rng& rng,
                                const MinerConfig& config);

// Best existing image by concept overlap, requiring at least min_overlap
// shared objects. Ties prefer fewer regions, then the smaller image id.
// Returns nullptr when no image qualifies.
const ImageRecord* mine_pseudo_pair(
    const ParsedSentence& sentence,
    const std::vector<const ImageRecord*>& train_images, int min_overlap);

// Feeds every region of the image as the pair for the sentence.
TrainingPair image_as_pair(const ImageRecord& image,
                           const ParsedSentence& sentence);

// Replaces floor(drop * n_concept_regions) concept regions with regions of
// categories outside the sentence, or removes them in kRemove mode.
TrainingPair degrade_coverage(TrainingPair pair, double drop,
                              const RegionIndex& index, Rng& rng,
                              CoverageDropMode mode = CoverageDropMode::kSubstitute);

struct ReplaceResult {
  std::vector<MinedRegion> regions;
  int singleton_keeps = 0;  // regions kept because no donor existed
};

// Swaps every region of the image for a same-category donor from another
// image. Geometry comes from the original region unless replace_geometry.
ReplaceResult replace_objects(const ImageRecord& image, const RegionIndex& index,
                              Rng& rng, bool replace_geometry);

struct MiningReport {
  std::string mode;
  int n_sentences = 0;
  int n_pairs = 0;
  double coverage_mean = 0.0;
  int skipped_concepts = 0;   // unindexable concept mentions
  int zero_concept_pairs = 0;
  int pseudo_rejected = 0;    // sentences with no qualifying image
  int singleton_keeps = 0;    // replace mode only
  int relation_pairs_added = 0;
  int attribute_regions = 0;
};

void write_mining_report(const MiningReport& report, const std::string& path);
MiningReport read_mining_report(const std::string& path);

// pairs.jsonl: one training pair per line.
void write_pairs(const std::vector<TrainingPair>& pairs, const std::string& path);
std::vector<TrainingPair> read_pairs(const std::string& path);

}  // namespace capmine
