#pragma once

#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "capmine/records.hpp"
#include "capmine/rng.hpp"

namespace capmine {

// Inverted dictionary from concept ids to train-set regions. Immutable after
// build; sampling takes an explicit rng so callers own their streams.
class RegionIndex {
 public:
  struct PairEntry {
    size_t subject;  // indices into regions()
    size_t object;
    RelationId relation;  // kept for reporting; ignored at lookup
  };

  static RegionIndex build(const std::vector<const ImageRecord*>& train_images);
  static RegionIndex build(const std::vector<ImageRecord>& train_images);

  const std::vector<DetectedRegion>& regions() const { return store_; }

  bool has_category(CategoryId category) const {
    return by_category_.count(category) > 0;
  }
  std::vector<CategoryId> categories() const;
  size_t category_count(CategoryId category) const;

  // Uniform draw over the regions of a category.
  const DetectedRegion& sample_region(CategoryId category, Rng& rng) const;
  const DetectedRegion* try_sample_region(CategoryId category, Rng& rng) const;

  // Uniform draw over regions of a category carrying a given attribute;
  // nullptr when the (category, attribute) key was never indexed, so the
  // caller can fall back to sample_region.
  const DetectedRegion* try_sample_attr_region(CategoryId category,
                                               AttributeId attribute,
                                               Rng& rng) const;

  // Uniform draw over same-image (subject, object) region pairs whose
  // categories match; the relation id is deliberately not part of the key.
  // nullopt when no pair with these endpoint categories exists.
  std::optional<std::pair<const DetectedRegion*, const DetectedRegion*>>
  try_sample_relation_pair(CategoryId subject, CategoryId object,
                           Rng& rng) const;

  // Same-category donors from images other than image_id; falls back to
  // other regions of the same image, excluding region_id itself.
  const DetectedRegion* try_sample_replacement(const DetectedRegion& original,
                                               Rng& rng) const;

  // Debugging dump: category -> ["image_id/region_id", ...]. Not a load format.
  void write_debug_json(const std::string& path) const;

 private:
  std::vector<DetectedRegion> store_;
  std::map<CategoryId, std::vector<size_t>> by_category_;
  std::map<std::pair<CategoryId, AttributeId>, std::vector<size_t>> by_cat_attr_;
  std::map<std::pair<CategoryId, CategoryId>, std::vector<PairEntry>> by_pair_;
};

}  // namespace capmine
