// Copyright 2026 The probemb Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "probemb/error.hpp"
#include "probemb/evaluation.hpp"
#include "probemb/gaussian.hpp"
#include "probemb/model.hpp"
#include "probemb/rng.hpp"

namespace probemb {

/// Axis-aligned box in pixels; (x, y) is the top-left corner.
struct BoundingBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double right() const { return x + w; }
  double bottom() const { return y + h; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline bool is_valid(const BoundingBox& b) {
  return std::isfinite(b.x) && std::isfinite(b.y) && std::isfinite(b.w) && std::isfinite(b.h) && b.w > 0.0 &&
         b.h > 0.0;
}

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  const double w = std::min(a.right(), b.right()) - std::max(a.x, b.x);
  const double h = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
  return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  if (a == b) return 1.0;
  const double inter = intersection_area(a, b);
  if (inter == 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

/// Tight axis-aligned box around both inputs.
inline BoundingBox union_box(const BoundingBox& a, const BoundingBox& b) {
  const double x0 = std::min(a.x, b.x);
  const double y0 = std::min(a.y, b.y);
  return {x0, y0, std::max(a.right(), b.right()) - x0, std::max(a.bottom(), b.bottom()) - y0};
}

struct Region {
  BoundingBox box;
  std::string caption;
  Vector image_feature;
  Vector caption_feature;
  std::vector<std::size_t> objects;  // synthetic object ids; empty for ingested data
};

/// Features supplied for a constructed union crop of regions (a, b).
struct UnionFeatures {
  std::size_t a = 0;
  std::size_t b = 0;
  Vector image_feature;
  Vector caption_feature;
};

struct RegionAnnotatedImage {
  std::string id;
  double width = 0.0;
  double height = 0.0;
  std::vector<Region> regions;
  std::vector<UnionFeatures> unions;  // optional, for data without a composer

  double area() const { return width * height; }
};

inline void validate(const RegionAnnotatedImage& img) {
  require(img.width > 0.0 && img.height > 0.0, ErrorKind::kInvalidInput, "image " + img.id + ": bad size");
  require(!img.regions.empty(), ErrorKind::kInvalidInput, "image " + img.id + ": no regions");
  for (const auto& r : img.regions) {
    require(is_valid(r.box) && r.box.x >= 0.0 && r.box.y >= 0.0 && r.box.right() <= img.width &&
                r.box.bottom() <= img.height,
            ErrorKind::kInvalidInput, "image " + img.id + ": box outside image bounds");
    require(!r.caption.empty(), ErrorKind::kInvalidInput, "image " + img.id + ": empty region caption");
  }
}

struct CropTriplet {
  std::string image_id;
  double area_threshold = 0.0;  // fraction of the image area
  std::size_t region_a = 0;
  std::size_t region_b = 0;
  BoundingBox crop_a;
  BoundingBox crop_b;
  BoundingBox crop_c;
  std::string caption_a;
  std::string caption_b;
  std::string caption_c;
  // Features of the A and C crops/captions; empty until attached.
  Vector crop_a_feature;
  Vector crop_c_feature;
  Vector caption_a_feature;
  Vector caption_c_feature;
};

inline constexpr std::size_t kQualifyingCrops = 10;

/// Selects crops A, B and their union C among the ten largest regions below
/// `threshold` x image area. Returns nullopt (skip the image) when fewer than
/// ten regions qualify.
inline std::optional<CropTriplet> build_triplet(const RegionAnnotatedImage& img, double threshold) {
  require(threshold > 0.0 && threshold <= 1.0, ErrorKind::kConfig, "area threshold must be in (0, 1]");
  const double limit = threshold * img.area();
  std::vector<std::size_t> qualifying;
  for (std::size_t i = 0; i < img.regions.size(); ++i) {
    if (img.regions[i].box.area() < limit) qualifying.push_back(i);
  }
  if (qualifying.size() < kQualifyingCrops) return std::nullopt;
  std::stable_sort(qualifying.begin(), qualifying.end(), [&](std::size_t a, std::size_t b) {
    return img.regions[a].box.area() > img.regions[b].box.area();
  });
  qualifying.resize(kQualifyingCrops);

  const std::size_t a = qualifying.front();
  const BoundingBox& box_a = img.regions[a].box;
  // Remaining nine are already ordered by (area desc, index asc), so the
  // first strict minimum of IoU applies both tie-breaks.
  std::size_t b = qualifying[1];
  double best = iou(box_a, img.regions[b].box);
  for (std::size_t i = 2; i < qualifying.size(); ++i) {
    const double v = iou(box_a, img.regions[qualifying[i]].box);
    if (v < best) {
      best = v;
      b = qualifying[i];
    }
  }

  CropTriplet t;
  t.image_id = img.id;
  t.area_threshold = threshold;
  t.region_a = a;
  t.region_b = b;
  t.crop_a = box_a;
  t.crop_b = img.regions[b].box;
  t.crop_c = union_box(t.crop_a, t.crop_b);
  t.caption_a = img.regions[a].caption;
  t.caption_b = img.regions[b].caption;
  t.caption_c = t.caption_a + " and " + t.caption_b;
  return t;
}

/// Produces features for the union crop of regions (a, b) of an image.
using UnionFeatureFn = std::function<UnionFeatures(const RegionAnnotatedImage&, std::size_t, std::size_t)>;

/// Looks the union features up in RegionAnnotatedImage::unions.
inline UnionFeatures lookup_union_features(const RegionAnnotatedImage& img, std::size_t a, std::size_t b) {
  for (const auto& u : img.unions) {
    if ((u.a == a && u.b == b) || (u.a == b && u.b == a)) return u;
  }
  fail(ErrorKind::kInvalidInput, "image " + img.id + ": no union features for regions " + std::to_string(a) + "," +
                                     std::to_string(b));
}

inline void attach_features(CropTriplet& t, const RegionAnnotatedImage& img, const UnionFeatureFn& union_features) {
  const UnionFeatures u = union_features(img, t.region_a, t.region_b);
  t.crop_a_feature = img.regions[t.region_a].image_feature;
  t.caption_a_feature = img.regions[t.region_a].caption_feature;
  t.crop_c_feature = u.image_feature;
  t.caption_c_feature = u.caption_feature;
}

inline bool has_features(const CropTriplet& t) {
  return !t.crop_a_feature.empty() && !t.crop_c_feature.empty() && !t.caption_a_feature.empty() &&
         !t.caption_c_feature.empty();
}

/// Builds triplets for every image that qualifies at `threshold`.
inline std::vector<CropTriplet> build_triplets(std::span<const RegionAnnotatedImage> images, double threshold,
                                               const UnionFeatureFn& union_features = {}) {
  std::vector<CropTriplet> out;
  for (const auto& img : images) {
    auto t = build_triplet(img, threshold);
    if (!t) continue;
    if (union_features) attach_features(*t, img, union_features);
    out.push_back(std::move(*t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Uncertainty versus area threshold.

inline constexpr double kDefaultThresholds[] = {0.1, 0.2, 0.3, 0.4, 0.5};

struct SweepRow {
  double threshold = 0.0;
  double crop_a_unc = 0.0;
  double crop_c_unc = 0.0;
  double caption_a_unc = 0.0;
  double caption_c_unc = 0.0;
  std::size_t samples = 0;  // images actually used
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<std::string> warnings;
};

/// For each threshold, visits the images in a seeded random order and keeps
/// the first `sample_n` that yield a triplet (skipped images are replaced by
/// the next one), then averages the uncertainties of the four embeddings.
inline SweepResult threshold_sweep(const ProbModel& model, std::span<const RegionAnnotatedImage> images,
                                   std::span<const double> thresholds, std::size_t sample_n, std::uint64_t seed,
                                   const UnionFeatureFn& union_features) {
  require(sample_n > 0, ErrorKind::kConfig, "sample size must be positive");
  SweepResult result;
  for (double threshold : thresholds) {
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(std::span(order));

    SweepRow row{threshold};
    for (std::size_t idx : order) {
      if (row.samples == sample_n) break;
      auto t = build_triplet(images[idx], threshold);
      if (!t) continue;
      attach_features(*t, images[idx], union_features);
      row.crop_a_unc += uncertainty(embed(model, Modality::kImage, t->crop_a_feature));
      row.crop_c_unc += uncertainty(embed(model, Modality::kImage, t->crop_c_feature));
      row.caption_a_unc += uncertainty(embed(model, Modality::kCaption, t->caption_a_feature));
      row.caption_c_unc += uncertainty(embed(model, Modality::kCaption, t->caption_c_feature));
      ++row.samples;
    }
    if (row.samples < sample_n) {
      result.warnings.push_back("threshold " + format_double(threshold) + ": only " + std::to_string(row.samples) +
                                " of " + std::to_string(sample_n) + " images had ten qualifying regions");
    }
    if (row.samples > 0) {
      const double n = static_cast<double>(row.samples);
      row.crop_a_unc /= n;
      row.crop_c_unc /= n;
      row.caption_a_unc /= n;
      row.caption_c_unc /= n;
    }
    result.rows.push_back(row);
  }
  return result;
}

inline std::string sweep_csv(const SweepResult& r) {
  std::string out = "threshold,crop_a_unc,crop_c_unc,caption_a_unc,caption_c_unc\n";
  for (const auto& row : r.rows) {
    out += format_double(row.threshold) + "," + format_double(row.crop_a_unc) + "," + format_double(row.crop_c_unc) +
           "," + format_double(row.caption_a_unc) + "," + format_double(row.caption_c_unc) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary selection between A and C.

struct SelectionAccuracy {
  Direction direction = Direction::kImageToText;
  double query_a = 0.0;  // percentage correct with the A item as query
  double query_c = 0.0;  // percentage correct with the C item as query
  std::size_t count = 0;
};

/// Image-to-text: the query is crop A or C and the candidates are captions A
/// and C. Text-to-image: the query is caption A or C, the candidates crops A
/// and C. The correct answer is the candidate with the query's letter.
inline SelectionAccuracy selection_experiment(const ProbModel& model, std::span<const CropTriplet> triplets,
                                              Direction direction) {
  SelectionAccuracy acc{direction};
  std::size_t hits_a = 0;
  std::size_t hits_c = 0;
  for (const auto& t : triplets) {
    require(has_features(t), ErrorKind::kInvalidInput, "triplet " + t.image_id + " has no features");
    const auto crop_a = embed(model, Modality::kImage, t.crop_a_feature);
    const auto crop_c = embed(model, Modality::kImage, t.crop_c_feature);
    const auto cap_a = embed(model, Modality::kCaption, t.caption_a_feature);
    const auto cap_c = embed(model, Modality::kCaption, t.caption_c_feature);
    const SimilarityMetric m = model.config.metric;
    if (direction == Direction::kImageToText) {
      hits_a += binary_selection(m, Modality::kImage, crop_a, cap_a, cap_c) == 0;
      hits_c += binary_selection(m, Modality::kImage, crop_c, cap_a, cap_c) == 1;
    } else {
      hits_a += binary_selection(m, Modality::kCaption, cap_a, crop_a, crop_c) == 0;
      hits_c += binary_selection(m, Modality::kCaption, cap_c, crop_a, crop_c) == 1;
    }
  }
  acc.count = triplets.size();
  if (acc.count > 0) {
    acc.query_a = 100.0 * static_cast<double>(hits_a) / static_cast<double>(acc.count);
    acc.query_c = 100.0 * static_cast<double>(hits_c) / static_cast<double>(acc.count);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// JSON-lines I/O for region images and triplet manifests.

namespace detail {

inline nlohmann::json box_json(const BoundingBox& b) { return nlohmann::json::array({b.x, b.y, b.w, b.h}); }

inline BoundingBox parse_box(const nlohmann::json& j, const std::string& where) {
  require(j.is_array() && j.size() == 4, ErrorKind::kFormat, where + ": box must be [x, y, w, h]");
  for (const auto& v : j) require(v.is_number(), ErrorKind::kFormat, where + ": box values must be numbers");
  BoundingBox b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  require(is_valid(b), ErrorKind::kFormat, where + ": box needs positive width and height");
  return b;
}

inline Vector parse_vector(const nlohmann::json& j, const std::string& where) {
  require(j.is_array(), ErrorKind::kFormat, where + ": expected a numeric array");
  Vector v;
  v.reserve(j.size());
  for (const auto& x : j) {
    require(x.is_number(), ErrorKind::kFormat, where + ": expected a numeric array");
    v.push_back(x.get<double>());
  }
  require(all_finite(v), ErrorKind::kFormat, where + ": non-finite feature");
  return v;
}

template <typename Fn>
void for_each_json_line(std::string_view text, const char* what, Fn&& fn) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = std::string(what) + " line " + std::to_string(line_no);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kFormat, where + ": " + e.what());
    }
    require(obj.is_object(), ErrorKind::kFormat, where + ": expected an object");
    try {
      fn(obj, where);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kFormat, where + ": " + e.what());
    }
  }
}

}  // namespace detail

inline std::string serialize_regions(std::span<const RegionAnnotatedImage> images) {
  std::string out;
  for (const auto& img : images) {
    nlohmann::json regions = nlohmann::json::array();
    for (const auto& r : img.regions) {
      nlohmann::json jr{{"box", detail::box_json(r.box)},
                        {"caption", r.caption},
                        {"image_feature", r.image_feature},
                        {"caption_feature", r.caption_feature}};
      if (!r.objects.empty()) jr["objects"] = r.objects;
      regions.push_back(std::move(jr));
    }
    nlohmann::json j{{"image_id", img.id}, {"width", img.width}, {"height", img.height}, {"regions", regions}};
    if (!img.unions.empty()) {
      nlohmann::json unions = nlohmann::json::array();
      for (const auto& u : img.unions) {
        unions.push_back({{"a", u.a}, {"b", u.b}, {"image_feature", u.image_feature},
                          {"caption_feature", u.caption_feature}});
      }
      j["unions"] = std::move(unions);
    }
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<RegionAnnotatedImage> parse_regions(std::string_view text) {
  std::vector<RegionAnnotatedImage> out;
  detail::for_each_json_line(text, "regions", [&](const nlohmann::json& j, const std::string& where) {
    RegionAnnotatedImage img;
    img.id = j.at("image_id").get<std::string>();
    img.width = j.at("width").get<double>();
    img.height = j.at("height").get<double>();
    for (const auto& jr : j.at("regions")) {
      Region r;
      r.box = detail::parse_box(jr.at("box"), where);
      r.caption = jr.at("caption").get<std::string>();
      r.image_feature = detail::parse_vector(jr.at("image_feature"), where);
      r.caption_feature = detail::parse_vector(jr.at("caption_feature"), where);
      if (jr.contains("objects")) r.objects = jr["objects"].get<std::vector<std::size_t>>();
      img.regions.push_back(std::move(r));
    }
    if (j.contains("unions")) {
      for (const auto& ju : j["unions"]) {
        img.unions.push_back({ju.at("a").get<std::size_t>(), ju.at("b").get<std::size_t>(),
                              detail::parse_vector(ju.at("image_feature"), where),
                              detail::parse_vector(ju.at("caption_feature"), where)});
      }
    }
    try {
      validate(img);
    } catch (const Error& e) {
      fail(ErrorKind::kFormat, where + ": " + e.what());
    }
    out.push_back(std::move(img));
  });
  return out;
}

inline std::string serialize_manifest(std::span<const CropTriplet> triplets) {
  std::string out;
  for (const auto& t : triplets) {
    nlohmann::json j{{"image_id", t.image_id},
                     {"threshold", t.area_threshold},
                     {"region_a", t.region_a},
                     {"region_b", t.region_b},
                     {"crop_a", detail::box_json(t.crop_a)},
                     {"crop_b", detail::box_json(t.crop_b)},
                     {"crop_c", detail::box_json(t.crop_c)},
                     {"caption_a", t.caption_a},
                     {"caption_b", t.caption_b},
                     {"caption_c", t.caption_c}};
    if (has_features(t)) {
      j["features"] = {{"crop_a", t.crop_a_feature},
                       {"crop_c", t.crop_c_feature},
                       {"caption_a", t.caption_a_feature},
                       {"caption_c", t.caption_c_feature}};
    }
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<CropTriplet> parse_manifest(std::string_view text) {
  std::vector<CropTriplet> out;
  detail::for_each_json_line(text, "manifest", [&](const nlohmann::json& j, const std::string& where) {
    CropTriplet t;
    t.image_id = j.at("image_id").get<std::string>();
    t.area_threshold = j.at("threshold").get<double>();
    t.region_a = j.value("region_a", std::size_t{0});
    t.region_b = j.value("region_b", std::size_t{0});
    t.crop_a = detail::parse_box(j.at("crop_a"), where);
    t.crop_b = detail::parse_box(j.at("crop_b"), where);
    t.crop_c = detail::parse_box(j.at("crop_c"), where);
    t.caption_a = j.at("caption_a").get<std::string>();
    t.caption_b = j.at("caption_b").get<std::string>();
    t.caption_c = j.at("caption_c").get<std::string>();
    if (j.contains("features")) {
      const auto& f = j["features"];
      t.crop_a_feature = detail::parse_vector(f.at("crop_a"), where);
      t.crop_c_feature = detail::parse_vector(f.at("crop_c"), where);
      t.caption_a_feature = detail::parse_vector(f.at("caption_a"), where);
      t.caption_c_feature = detail::parse_vector(f.at("caption_c"), where);
    }
    out.push_back(std::move(t));
  });
  return out;
}

inline std::string selection_table(const SelectionAccuracy& i2t, const SelectionAccuracy& t2i) {
  return "image-to-text crop A " + format_percent(i2t.query_a) + "  crop C " + format_percent(i2t.query_c) + "\n" +
         "text-to-image caption A " + format_percent(t2i.query_a) + "  caption C " + format_percent(t2i.query_c) +
         "\n";
}

}  // namespace probemb
