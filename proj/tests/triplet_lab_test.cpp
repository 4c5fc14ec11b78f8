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


#include "probemb/triplet_lab.hpp"

#include <algorithm>
#include <tuple>

#include <gtest/gtest.h>

#include "probemb/synthetic.hpp"
#include "test_support.hpp"

namespace probemb {
namespace {

Region region(double x, double y, double w, double h, std::string caption = "thing") {
  return {{x, y, w, h}, std::move(caption), {}, {}, {}};
}

RegionAnnotatedImage random_image(Rng& rng, std::size_t regions, const std::string& id = "img") {
  RegionAnnotatedImage img{id, 100.0, 80.0, {}, {}};
  for (std::size_t i = 0; i < regions; ++i) {
    // Integer geometry so that area and IoU ties actually happen.
    const double w = static_cast<double>(rng.between(1, 6)) * 5.0;
    const double h = static_cast<double>(rng.between(1, 4)) * 5.0;
    const double x = static_cast<double>(rng.between(0, static_cast<std::int64_t>(100.0 - w)));
    const double y = static_cast<double>(rng.between(0, static_cast<std::int64_t>(80.0 - h)));
    img.regions.push_back(region(x, y, w, h, "r" + std::to_string(i)));
  }
  return img;
}

// Independent statement of the selection rule: a region's rank is the number
// of qualifying regions that precede it in (area desc, index asc); the ten
// lowest ranks qualify; B minimises (IoU, -area, index) over the other nine.
std::optional<std::pair<std::size_t, std::size_t>> select_by_enumeration(const RegionAnnotatedImage& img,
                                                                         double threshold) {
  const double limit = threshold * img.width * img.height;
  std::vector<std::size_t> top;
  for (std::size_t i = 0; i < img.regions.size(); ++i) {
    if (!(img.regions[i].box.area() < limit)) continue;
    std::size_t rank = 0;
    for (std::size_t j = 0; j < img.regions.size(); ++j) {
      if (j == i || !(img.regions[j].box.area() < limit)) continue;
      const double aj = img.regions[j].box.area(), ai = img.regions[i].box.area();
      if (aj > ai || (aj == ai && j < i)) ++rank;
    }
    if (rank < 10) top.push_back(i);
  }
  if (top.size() < 10) return std::nullopt;
  std::size_t a = top[0];
  for (std::size_t i : top) {
    const double ai = img.regions[i].box.area(), aa = img.regions[a].box.area();
    if (ai > aa || (ai == aa && i < a)) a = i;
  }
  std::optional<std::tuple<double, double, std::size_t>> best;
  std::size_t b = 0;
  for (std::size_t i : top) {
    if (i == a) continue;
    const BoundingBox& p = img.regions[a].box;
    const BoundingBox& q = img.regions[i].box;
    const double ix = std::max(0.0, std::min(p.x + p.w, q.x + q.w) - std::max(p.x, q.x));
    const double iy = std::max(0.0, std::min(p.y + p.h, q.y + q.h) - std::max(p.y, q.y));
    const double inter = ix * iy;
    const double v = inter / (p.w * p.h + q.w * q.h - inter);
    const auto key = std::make_tuple(v, -q.w * q.h, i);
    if (!best || key < *best) {
      best = key;
      b = i;
    }
  }
  return std::pair{a, b};
}

TEST(Iou, Examples) {
  const BoundingBox a{0, 0, 1, 1}, b{0.5, 0, 1, 1}, c{3, 3, 1, 1};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, c), 0.0);
  EXPECT_NEAR(iou(a, b), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(iou(a, {1, 0, 1, 1}), 0.0);  // touching edges
}

TEST(Iou, SymmetricAndBounded) {
  Rng rng(1);
  for (int i = 0; i < 5000; ++i) {
    const BoundingBox a{rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0.1, 5), rng.uniform(0.1, 5)};
    const BoundingBox b{rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0.1, 5), rng.uniform(0.1, 5)};
    EXPECT_EQ(iou(a, b), iou(b, a));
    EXPECT_GE(iou(a, b), 0.0);
    EXPECT_LE(iou(a, b), 1.0);
    EXPECT_EQ(iou(a, a), 1.0);
  }
}

TEST(UnionBox, Example) {
  EXPECT_EQ(union_box({0, 0, 10, 10}, {20, 20, 5, 5}), (BoundingBox{0, 0, 25, 25}));
  EXPECT_EQ(union_box({20, 20, 5, 5}, {0, 0, 10, 10}), (BoundingBox{0, 0, 25, 25}));
}

TEST(BuildTriplet, EqualDisjointRegionsPickLowestIndex) {
  RegionAnnotatedImage img{"grid", 100, 100, {}, {}};
  for (int i = 0; i < 10; ++i) img.regions.push_back(region(10.0 * i, 0, 5, 5, "obj" + std::to_string(i)));
  const auto t = build_triplet(img, 0.1);
  ASSERT_TRUE(t);
  EXPECT_EQ(t->region_a, 0u);
  EXPECT_EQ(t->region_b, 1u);
  EXPECT_EQ(t->crop_c, (BoundingBox{0, 0, 15, 5}));
  EXPECT_EQ(t->caption_c, "obj0 and obj1");
}

TEST(BuildTriplet, MinimumIouWins) {
  RegionAnnotatedImage img{"overlap", 100, 100, {}, {}};
  img.regions.push_back(region(0, 0, 20, 20, "big"));
  for (int i = 0; i < 8; ++i) img.regions.push_back(region(1 + i, 1, 10, 10));  // overlap A
  img.regions.push_back(region(50, 50, 5, 5, "far"));  // smallest, but disjoint
  const auto t = build_triplet(img, 0.5);
  ASSERT_TRUE(t);
  EXPECT_EQ(t->region_a, 0u);
  EXPECT_EQ(t->region_b, 9u);
  EXPECT_EQ(t->caption_c, "big and far");
  EXPECT_EQ(t->crop_c, (BoundingBox{0, 0, 55, 55}));
}

TEST(BuildTriplet, SkipsWhenTooFewQualify) {
  RegionAnnotatedImage img{"few", 100, 100, {}, {}};
  for (int i = 0; i < 9; ++i) img.regions.push_back(region(10.0 * i, 0, 5, 5));
  img.regions.push_back(region(0, 10, 60, 60));  // 36% of the image
  EXPECT_FALSE(build_triplet(img, 0.3));
  EXPECT_TRUE(build_triplet(img, 0.4));
  EXPECT_THROW(build_triplet(img, 0.0), Error);
  EXPECT_THROW(build_triplet(img, 1.5), Error);
}

TEST(BuildTriplet, ThresholdIsStrict) {
  RegionAnnotatedImage img{"edge", 10, 10, {}, {}};
  for (int i = 0; i < 10; ++i) img.regions.push_back(region(i, 0, 1, 1));
  img.regions.push_back(region(0, 0, 5, 2));  // exactly 10% of the image
  const auto t = build_triplet(img, 0.1);
  ASSERT_TRUE(t);
  EXPECT_NE(t->region_a, 10u);
  EXPECT_NE(t->region_b, 10u);
}

TEST(BuildTriplet, MatchesEnumeration) {
  Rng rng(2);
  int built = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const auto img = random_image(rng, 8 + rng.index(12));
    for (double threshold : kDefaultThresholds) {
      const auto t = build_triplet(img, threshold);
      const auto expected = select_by_enumeration(img, threshold);
      ASSERT_EQ(t.has_value(), expected.has_value());
      if (!t) continue;
      ++built;
      EXPECT_EQ(t->region_a, expected->first);
      EXPECT_EQ(t->region_b, expected->second);
      const double limit = threshold * img.area();
      EXPECT_LT(t->crop_a.area(), limit);
      EXPECT_LT(t->crop_b.area(), limit);
      EXPECT_GE(t->crop_a.area(), t->crop_b.area());
      EXPECT_GE(t->crop_c.area(), std::max(t->crop_a.area(), t->crop_b.area()));
      EXPECT_EQ(t->crop_c, union_box(t->crop_a, t->crop_b));
      EXPECT_EQ(t->caption_c, t->caption_a + " and " + t->caption_b);
    }
  }
  EXPECT_GT(built, 1000);
}

SyntheticData region_data(std::size_t images, double noise = 0.0) {
  SyntheticSpec spec;
  spec.feature_dim = 32;
  spec.vocabulary = 20;
  spec.train_images = 2;
  spec.val_images = 1;
  spec.test_images = 1;
  spec.region_images = images;
  spec.noise = noise;
  return generate_synthetic(spec);
}

ModelConfig lab_config() { return {32, 32, 4, CovarianceShape::kEllipsoidal, SimilarityMetric::kNegWasserstein2}; }

TEST(ThresholdSweep, ConstantVarianceGivesEqualCurves) {
  const auto data = region_data(60, 0.02);
  ProbModel model = init_model(lab_config(), 1);
  for (AffineHead* h : {&model.image_logvar, &model.caption_logvar}) {
    std::fill(h->weight.data().begin(), h->weight.data().end(), 0.0);
    std::fill(h->bias.begin(), h->bias.end(), 0.3);
  }
  const auto r = threshold_sweep(model, data.regions, kDefaultThresholds, 20, 0, data.composer);
  ASSERT_EQ(r.rows.size(), 5u);
  for (const auto& row : r.rows) {
    EXPECT_GT(row.samples, 0u);
    EXPECT_NEAR(row.crop_a_unc, 1.2, 1e-12);
    EXPECT_EQ(row.crop_a_unc, row.crop_c_unc);
    EXPECT_EQ(row.crop_a_unc, row.caption_a_unc);
    EXPECT_EQ(row.crop_a_unc, row.caption_c_unc);
  }
}

TEST(ThresholdSweep, ClutterResponsiveModelRanksUnionHigher) {
  // Features are unit vectors of non-negative prototypes, so their L1 norm
  // grows with the number of mixed objects. A log-variance head that sums the
  // feature therefore responds to clutter.
  const auto data = region_data(200);
  ProbModel model = init_model(lab_config(), 2);
  for (AffineHead* h : {&model.image_logvar, &model.caption_logvar}) {
    std::fill(h->weight.data().begin(), h->weight.data().end(), 0.05);
    std::fill(h->bias.begin(), h->bias.end(), 0.0);
  }
  const auto r = threshold_sweep(model, data.regions, kDefaultThresholds, 100, 3, data.composer);
  for (const auto& row : r.rows) {
    EXPECT_GE(row.crop_c_unc, row.crop_a_unc) << row.threshold;
    EXPECT_GE(row.caption_c_unc, row.caption_a_unc) << row.threshold;
  }
}

TEST(ThresholdSweep, DeterministicCsv) {
  const auto data = region_data(80, 0.02);
  const ProbModel model = init_model(lab_config(), 3);
  const auto a = sweep_csv(threshold_sweep(model, data.regions, kDefaultThresholds, 30, 7, data.composer));
  const auto b = sweep_csv(threshold_sweep(model, data.regions, kDefaultThresholds, 30, 7, data.composer));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.substr(0, a.find('\n')), "threshold,crop_a_unc,crop_c_unc,caption_a_unc,caption_c_unc");
  EXPECT_NE(a, sweep_csv(threshold_sweep(model, data.regions, kDefaultThresholds, 30, 8, data.composer)));
}

TEST(ThresholdSweep, WarnsOnShortSample) {
  const auto data = region_data(5, 0.02);
  const auto r = threshold_sweep(init_model(lab_config(), 4), data.regions, kDefaultThresholds, 50, 0, data.composer);
  EXPECT_EQ(r.warnings.size(), 5u);
  for (const auto& row : r.rows) EXPECT_LE(row.samples, 5u);
  EXPECT_THROW(threshold_sweep(init_model(lab_config(), 4), data.regions, kDefaultThresholds, 0, 0, data.composer),
               Error);
}

// Triplets whose caption features coincide with the crop features of the
// same letter (or of the other letter when `swapped`).
std::vector<CropTriplet> mirrored_triplets(const SyntheticData& data, bool swapped) {
  auto triplets = build_triplets(data.regions, 0.3, data.composer);
  for (auto& t : triplets) {
    t.caption_a_feature = swapped ? t.crop_c_feature : t.crop_a_feature;
    t.caption_c_feature = swapped ? t.crop_a_feature : t.crop_c_feature;
  }
  return triplets;
}

ProbModel shared_heads_model(SimilarityMetric metric) {
  ProbModel model = init_model({32, 32, 4, CovarianceShape::kEllipsoidal, metric}, 5);
  model.caption_mean = model.image_mean;
  model.caption_logvar = model.image_logvar;
  return model;
}

TEST(SelectionExperiment, OracleAndAdversary) {
  const auto data = region_data(50, 0.02);
  for (auto metric : kAllMetrics) {
    const ProbModel model = shared_heads_model(metric);
    const auto good = mirrored_triplets(data, false);
    const auto bad = mirrored_triplets(data, true);
    ASSERT_GT(good.size(), 10u);
    for (auto dir : {Direction::kImageToText, Direction::kTextToImage}) {
      const auto ok = selection_experiment(model, good, dir);
      EXPECT_EQ(ok.query_a, 100.0);
      EXPECT_EQ(ok.query_c, 100.0);
      EXPECT_EQ(ok.count, good.size());
      const auto wrong = selection_experiment(model, bad, dir);
      EXPECT_EQ(wrong.query_a, 0.0);
      EXPECT_EQ(wrong.query_c, 0.0);
    }
  }
}

TEST(SelectionExperiment, MatchesElementwiseArgmax) {
  const auto data = region_data(80, 0.05);
  const auto triplets = build_triplets(data.regions, 0.2, data.composer);
  for (auto metric : kAllMetrics) {
    const ProbModel model = init_model({32, 32, 4, CovarianceShape::kEllipsoidal, metric}, 6);
    std::size_t a_i2t = 0, c_i2t = 0, a_t2i = 0, c_t2i = 0;
    for (const auto& t : triplets) {
      const auto ia = embed(model, Modality::kImage, t.crop_a_feature);
      const auto ic = embed(model, Modality::kImage, t.crop_c_feature);
      const auto ta = embed(model, Modality::kCaption, t.caption_a_feature);
      const auto tc = embed(model, Modality::kCaption, t.caption_c_feature);
      a_i2t += similarity(metric, ia, ta) >= similarity(metric, ia, tc);
      c_i2t += similarity(metric, ic, tc) > similarity(metric, ic, ta);
      a_t2i += similarity(metric, ia, ta) >= similarity(metric, ic, ta);
      c_t2i += similarity(metric, ic, tc) > similarity(metric, ia, tc);
    }
    const double n = static_cast<double>(triplets.size());
    const auto i2t = selection_experiment(model, triplets, Direction::kImageToText);
    const auto t2i = selection_experiment(model, triplets, Direction::kTextToImage);
    EXPECT_EQ(i2t.query_a, 100.0 * static_cast<double>(a_i2t) / n);
    EXPECT_EQ(i2t.query_c, 100.0 * static_cast<double>(c_i2t) / n);
    EXPECT_EQ(t2i.query_a, 100.0 * static_cast<double>(a_t2i) / n);
    EXPECT_EQ(t2i.query_c, 100.0 * static_cast<double>(c_t2i) / n);
  }
}

TEST(SelectionExperiment, RequiresFeatures) {
  RegionAnnotatedImage img{"grid", 100, 100, {}, {}};
  for (int i = 0; i < 10; ++i) img.regions.push_back(region(10.0 * i, 0, 5, 5));
  const auto triplets = build_triplets(std::span(&img, 1), 0.1);
  ASSERT_EQ(triplets.size(), 1u);
  EXPECT_THROW(selection_experiment(init_model(lab_config(), 0), triplets, Direction::kImageToText), Error);
}

TEST(UnionFeatures, LookupAndComposer) {
  const auto data = region_data(3, 0.02);
  const auto& img = data.regions[0];
  const UnionFeatures u = data.composer(img, 0, 1);
  EXPECT_EQ(u.image_feature, data.composer(img, 0, 1).image_feature);
  RegionAnnotatedImage with_unions = img;
  with_unions.unions.push_back(u);
  EXPECT_EQ(lookup_union_features(with_unions, 1, 0).caption_feature, u.caption_feature);
  EXPECT_THROW(lookup_union_features(with_unions, 0, 2), Error);
}

TEST(RegionsJsonl, RoundTrip) {
  auto data = region_data(4, 0.02);
  data.regions[1].unions.push_back(data.composer(data.regions[1], 2, 3));
  const std::string text = serialize_regions(data.regions);
  const auto back = parse_regions(text);
  ASSERT_EQ(back.size(), 4u);
  EXPECT_EQ(serialize_regions(back), text);
  EXPECT_EQ(back[1].unions.size(), 1u);
  EXPECT_EQ(back[2].regions[0].image_feature, data.regions[2].regions[0].image_feature);
}

TEST(RegionsJsonl, RejectsBadLines) {
  for (const char* text :
       {"{\"image_id\": \"a\"}\n", "not json\n", "[1]\n",
        R"({"image_id":"a","width":10,"height":10,"regions":[{"box":[5,5,10,10],"caption":"x","image_feature":[1],"caption_feature":[1]}]})",
        R"({"image_id":"a","width":10,"height":10,"regions":[{"box":[0,0,1,1],"caption":"","image_feature":[1],"caption_feature":[1]}]})",
        R"({"image_id":"a","width":10,"height":10,"regions":[]})"}) {
    try {
      parse_regions(text);
      ADD_FAILURE() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kFormat) << text;
    }
  }
  EXPECT_TRUE(parse_regions("\n  \n").empty());
}

TEST(ManifestJsonl, RoundTrip) {
  const auto data = region_data(30, 0.02);
  const auto with = build_triplets(data.regions, 0.3, data.composer);
  const auto without = build_triplets(data.regions, 0.3);
  ASSERT_FALSE(with.empty());
  for (const auto* set : {&with, &without}) {
    const std::string text = serialize_manifest(*set);
    const auto back = parse_manifest(text);
    ASSERT_EQ(back.size(), set->size());
    EXPECT_EQ(serialize_manifest(back), text);
    EXPECT_EQ(back[0].crop_c, (*set)[0].crop_c);
    EXPECT_EQ(has_features(back[0]), set == &with);
  }
  EXPECT_THROW(parse_manifest("{\"image_id\": 3}\n"), Error);
}

TEST(SelectionTable, Format) {
  const SelectionAccuracy i2t{Direction::kImageToText, 100.0, 12.5, 8};
  const SelectionAccuracy t2i{Direction::kTextToImage, 50.0, 0.0, 8};
  EXPECT_EQ(selection_table(i2t, t2i), "image-to-text crop A 100.0  crop C 12.5\ntext-to-image caption A 50.0  caption C 0.0\n");
}

}  // namespace
}  // namespace probemb
