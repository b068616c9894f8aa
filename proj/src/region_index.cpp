#include "capmine/region_index.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"

namespace capmine {

RegionIndex RegionIndex::build(
    const std::vector<const ImageRecord*>& train_images) {
  std::vector<const ImageRecord*> ordered = train_images;
  std::sort(ordered.begin(), ordered.end(),
            [](const ImageRecord* a, const ImageRecord* b) {
              return a->image_id < b->image_id;
            });

  RegionIndex index;
  for (const ImageRecord* img : ordered) {
    std::vector<const DetectedRegion*> regions;
    regions.reserve(img->regions.size());
    for (const auto& r : img->regions) regions.push_back(&r);
    std::sort(regions.begin(), regions.end(),
              [](const DetectedRegion* a, const DetectedRegion* b) {
                return a->region_id < b->region_id;
              });

    std::map<std::string, size_t> local;  // region_id -> store index
    for (const DetectedRegion* r : regions) {
      size_t idx = index.store_.size();
      local[r->region_id] = idx;
      index.store_.push_back(*r);
      index.by_category_[r->category].push_back(idx);
      if (r->attribute) {
        index.by_cat_attr_[{r->category, *r->attribute}].push_back(idx);
      }
    }
    for (const auto& rel : img->relations) {
      auto sub = local.find(rel.subject_region_id);
      auto obj = local.find(rel.object_region_id);
      if (sub == local.end() || obj == local.end()) {
        throw ValidationError("relation references unknown region in image '" +
                              img->image_id + "'");
      }
      CategoryId sub_cat = index.store_[sub->second].category;
      CategoryId obj_cat = index.store_[obj->second].category;
      index.by_pair_[{sub_cat, obj_cat}].push_back(
          {sub->second, obj->second, rel.relation});
    }
  }
  return index;
}

RegionIndex RegionIndex::build(const std::vector<ImageRecord>& train_images) {
  std::vector<const ImageRecord*> ptrs;
  ptrs.reserve(train_images.size());
  for (const auto& img : train_images) ptrs.push_back(&img);
  return build(ptrs);
}

std::vector<CategoryId> RegionIndex::categories() const {
  std::vector<CategoryId> out;
  out.reserve(by_category_.size());
  for (const auto& [cat, refs] : by_category_) out.push_back(cat);
  return out;
}

size_t RegionIndex::category_count(CategoryId category) const {
  auto it = by_category_.find(category);
  return it == by_category_.end() ? 0 : it->second.size();
}

const DetectedRegion* RegionIndex::try_sample_region(CategoryId category,
                                                     Rng& rng) const {
  auto it = by_category_.find(category);
  if (it == by_category_.end()) return nullptr;
  return &store_[it->second[rng.uniform_index(it->second.size())]];
}

const DetectedRegion& RegionIndex::sample_region(CategoryId category,
                                                 Rng& rng) const {
  const DetectedRegion* r = try_sample_region(category, rng);
  if (!r) {
    throw NotIndexedError("category " + std::to_string(category) +
                          " is not indexed");
  }
  return *r;
}

const DetectedRegion* RegionIndex::try_sample_attr_region(CategoryId category,
                                                          AttributeId attribute,
                                                          Rng& rng) const {
  auto it = by_cat_attr_.find({category, attribute});
  if (it == by_cat_attr_.end()) return nullptr;
  return &store_[it->second[rng.uniform_index(it->second.size())]];
}

std::optional<std::pair<const DetectedRegion*, const DetectedRegion*>>
RegionIndex::try_sample_relation_pair(CategoryId subject, CategoryId object,
                                      Rng& rng) const {
  auto it = by_pair_.find({subject, object});
  if (it == by_pair_.end()) return std::nullopt;
  const PairEntry& entry = it->second[rng.uniform_index(it->second.size())];
  return std::make_pair(&store_[entry.subject], &store_[entry.object]);
}

const DetectedRegion* RegionIndex::try_sample_replacement(
    const DetectedRegion& original, Rng& rng) const {
  auto it = by_category_.find(original.category);
  if (it == by_category_.end()) return nullptr;
  std::vector<size_t> other_image;
  std::vector<size_t> same_image;
  for (size_t idx : it->second) {
    const DetectedRegion& r = store_[idx];
    if (r.image_id != original.image_id) {
      other_image.push_back(idx);
    } else if (r.region_id != original.region_id) {
      same_image.push_back(idx);
    }
  }
  const auto& pool = other_image.empty() ? same_image : other_image;
  if (pool.empty()) return nullptr;
  return &store_[pool[rng.uniform_index(pool.size())]];
}

void RegionIndex::write_debug_json(const std::string& path) const {
  nlohmann::json j;
  for (const auto& [cat, refs] : by_category_) {
    auto& arr = j[std::to_string(cat)] = nlohmann::json::array();
    for (size_t idx : refs) {
      arr.push_back(store_[idx].image_id + "/" + store_[idx].region_id);
    }
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
}

}  // namespace capmine
