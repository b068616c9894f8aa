#include "capmine/records.hpp"

#include <algorithm>
#include <cmath>

namespace capmine {

std::array<double, 5> geometry_vector(const BBox& box) {
  if (!box.valid()) {
    throw GeometryError("invalid bbox (" + std::to_string(box.x1) + "," +
                        std::to_string(box.y1) + "," + std::to_string(box.x2) +
                        "," + std::to_string(box.y2) + ") in " +
                        std::to_string(box.image_w) + "x" +
                        std::to_string(box.image_h));
  }
  return {box.x1 / box.image_w, box.y1 / box.image_h, box.x2 / box.image_w,
          box.y2 / box.image_h, box.area() / (box.image_w * box.image_h)};
}

const DetectedRegion* ImageRecord::find_region(
    const std::string& region_id) const {
  for (const auto& r : regions) {
    if (r.region_id == region_id) return &r;
  }
  return nullptr;
}

std::vector<CategoryId> ImageRecord::category_set() const {
  std::vector<CategoryId> cats;
  for (const auto& r : regions) {
    if (std::find(cats.begin(), cats.end(), r.category) == cats.end()) {
      cats.push_back(r.category);
    }
  }
  return cats;
}

}  // namespace capmine
