#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "capmine/errors.hpp"

namespace capmine {

using CategoryId = int;
using RelationId = int;
using AttributeId = int;
using TokenId = int;

struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double image_w = 0, image_h = 0;

  double area() const { return (x2 - x1) * (y2 - y1); }

  bool operator==(const BBox&) const = default;

  bool valid() const {
    return image_w > 0 && image_h > 0 && x1 >= 0 && y1 >= 0 && x1 < x2 &&
           x2 <= image_w && y1 < y2 && y2 <= image_h;
  }
};

// Normalized (x1/W, y1/H, x2/W, y2/H, area/(W*H)). All components in (0, 1]
// except the corner coordinates, which may be 0.
std::array<double, 5> geometry_vector(const BBox& box);

struct DetectedRegion {
  std::string region_id;
  std::string image_id;
  CategoryId category = -1;
  std::optional<AttributeId> attribute;
  BBox bbox;
  std::vector<double> feature;  // unit-normalized, corpus-wide dimension

  bool operator==(const DetectedRegion&) const = default;
};

inline std::array<double, 5> geometry_vector(const DetectedRegion& region) {
  return geometry_vector(region.bbox);
}

struct RelationTriple {
  std::string subject_region_id;
  std::string object_region_id;
  RelationId relation = -1;

  bool operator==(const RelationTriple&) const = default;
};

struct ImageRecord {
  std::string image_id;
  std::vector<DetectedRegion> regions;
  std::vector<RelationTriple> relations;

  const DetectedRegion* find_region(const std::string& region_id) const;
  std::vector<CategoryId> category_set() const;  // distinct, first-mention order

  bool operator==(const ImageRecord&) const = default;
};

struct SentenceRecord {
  std::string sentence_id;
  std::string lang;
  std::vector<std::string> tokens;
  std::optional<std::string> gt_image_id;  // evaluation-only ground truth

  bool operator==(const SentenceRecord&) const = default;
};

}  // namespace capmine
