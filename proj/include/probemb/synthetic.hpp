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
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "probemb/dataset.hpp"
#include "probemb/rng.hpp"
#include "probemb/triplet_lab.hpp"

namespace probemb {

/// Synthetic scenes built from latent object prototypes. An image mixes the
/// prototypes of its objects; each caption mentions a subset of them, so an
/// image with many objects admits many different captions and a caption
/// that mentions few objects fits many images.
struct SyntheticSpec {
  std::size_t vocabulary = 32;  // V, number of object prototypes
  std::size_t objects_min = 1;
  std::size_t objects_max = 4;
  std::size_t captions_per_image = 5;
  std::size_t coverage_min = 1;
  std::size_t coverage_max = 2;  // clipped to the image's object count
  double noise = 0.02;           // per-component Gaussian noise
  std::size_t feature_dim = 128;
  std::size_t train_images = 500;
  std::size_t val_images = 100;
  std::size_t test_images = 100;
  // Region-annotated scenes for the crop-triplet experiments.
  std::size_t region_images = 0;
  std::size_t region_objects_min = 10;
  std::size_t region_objects_max = 14;
  std::uint64_t seed = 0;

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

inline void validate(const SyntheticSpec& s) {
  require(s.vocabulary >= 1 && s.feature_dim >= 1 && s.captions_per_image >= 1, ErrorKind::kConfig,
          "vocabulary, feature_dim and captions_per_image must be >= 1");
  require(s.objects_min >= 1 && s.objects_min <= s.objects_max, ErrorKind::kConfig,
          "need 1 <= objects_min <= objects_max");
  require(s.vocabulary >= s.objects_max, ErrorKind::kConfig, "vocabulary must be >= objects_max");
  require(s.coverage_min >= 1 && s.coverage_min <= s.coverage_max, ErrorKind::kConfig,
          "need 1 <= coverage_min <= coverage_max");
  require(s.coverage_min <= s.objects_min, ErrorKind::kConfig, "coverage_min must not exceed objects_min");
  require(s.noise >= 0.0 && std::isfinite(s.noise), ErrorKind::kConfig, "noise must be >= 0");
  if (s.region_images > 0) {
    require(s.region_objects_min >= 2 && s.region_objects_min <= s.region_objects_max &&
                s.region_objects_max <= s.vocabulary,
            ErrorKind::kConfig, "need 2 <= region_objects_min <= region_objects_max <= vocabulary");
  }
}

inline SyntheticSpec parse_synthetic_spec(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::kConfig, std::string("synthetic spec: ") + e.what());
  }
  require(j.is_object(), ErrorKind::kConfig, "synthetic spec must be a JSON object");
  SyntheticSpec s;
  const std::pair<const char*, std::size_t*> counts[] = {
      {"vocabulary", &s.vocabulary},       {"objects_min", &s.objects_min},
      {"objects_max", &s.objects_max},     {"captions_per_image", &s.captions_per_image},
      {"coverage_min", &s.coverage_min},   {"coverage_max", &s.coverage_max},
      {"feature_dim", &s.feature_dim},     {"train_images", &s.train_images},
      {"val_images", &s.val_images},       {"test_images", &s.test_images},
      {"region_images", &s.region_images}, {"region_objects_min", &s.region_objects_min},
      {"region_objects_max", &s.region_objects_max}};
  for (const auto& [key, value] : j.items()) {
    bool known = key == "noise" || key == "seed";
    for (const auto& [name, ptr] : counts) {
      if (key != name) continue;
      known = true;
      require(value.is_number_unsigned(), ErrorKind::kConfig, "synthetic spec: '" + key + "' must be an integer");
      *ptr = value.get<std::size_t>();
    }
    require(known, ErrorKind::kConfig, "synthetic spec: unknown key '" + key + "'");
  }
  if (j.contains("noise")) {
    require(j["noise"].is_number(), ErrorKind::kConfig, "synthetic spec: 'noise' must be a number");
    s.noise = j["noise"].get<double>();
  }
  if (j.contains("seed")) {
    require(j["seed"].is_number_unsigned(), ErrorKind::kConfig, "synthetic spec: 'seed' must be an integer");
    s.seed = j["seed"].get<std::uint64_t>();
  }
  validate(s);
  return s;
}

inline std::string serialize_synthetic_spec(const SyntheticSpec& s) {
  nlohmann::json j{{"vocabulary", s.vocabulary},
                   {"objects_min", s.objects_min},
                   {"objects_max", s.objects_max},
                   {"captions_per_image", s.captions_per_image},
                   {"coverage_min", s.coverage_min},
                   {"coverage_max", s.coverage_max},
                   {"noise", s.noise},
                   {"feature_dim", s.feature_dim},
                   {"train_images", s.train_images},
                   {"val_images", s.val_images},
                   {"test_images", s.test_images},
                   {"region_images", s.region_images},
                   {"region_objects_min", s.region_objects_min},
                   {"region_objects_max", s.region_objects_max},
                   {"seed", s.seed}};
  return j.dump(2) + "\n";
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243F6A8885A308D3ULL;
  for (auto p : parts) h = splitmix64(h ^ p);
  return h;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001B3ULL;
  return h;
}

/// Generated values are float-representable so the 32-bit feature files
/// hold them exactly.
inline double to_storage_precision(double x) { return static_cast<double>(static_cast<float>(x)); }

inline void normalize(Vector& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0) {
    for (double& x : v) x /= n;
  }
}

/// k distinct values from [0, n), in ascending order.
inline std::vector<std::size_t> sample_distinct(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.index(n - i)]);
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace detail

/// Prototype mixing rule shared by whole images, captions and crops:
/// normalize(sum of the object prototypes) plus per-component noise.
class SyntheticComposer {
 public:
  SyntheticComposer(Matrix prototypes, double noise, std::uint64_t seed)
      : prototypes_(std::move(prototypes)), noise_(noise), seed_(seed) {}

  const Matrix& prototypes() const noexcept { return prototypes_; }
  double noise() const noexcept { return noise_; }
  std::uint64_t seed() const noexcept { return seed_; }

  Vector compose(std::span<const std::size_t> objects, Rng& rng) const {
    Vector v(prototypes_.cols(), 0.0);
    for (std::size_t o : objects) {
      const auto p = prototypes_.row(o);
      for (std::size_t d = 0; d < v.size(); ++d) v[d] += p[d];
    }
    detail::normalize(v);
    if (noise_ > 0.0) {
      for (double& x : v) x += noise_ * rng.normal();
    }
    for (double& x : v) x = detail::to_storage_precision(x);
    return v;
  }

  /// Union-crop features: the composition of both regions' object sets, with
  /// noise seeded by (seed, image id, a, b) so the result is reproducible.
  UnionFeatures operator()(const RegionAnnotatedImage& img, std::size_t a, std::size_t b) const {
    std::vector<std::size_t> objects = img.regions[a].objects;
    objects.insert(objects.end(), img.regions[b].objects.begin(), img.regions[b].objects.end());
    std::sort(objects.begin(), objects.end());
    objects.erase(std::unique(objects.begin(), objects.end()), objects.end());
    require(!objects.empty(), ErrorKind::kInvalidInput, "image " + img.id + ": regions carry no object ids");
    Rng rng(detail::mix_seed({seed_, detail::fnv1a(img.id), a, b}));
    UnionFeatures u{a, b, {}, {}};
    u.image_feature = compose(objects, rng);
    u.caption_feature = compose(objects, rng);
    return u;
  }

 private:
  Matrix prototypes_;
  double noise_;
  std::uint64_t seed_;
};

struct SyntheticSplit {
  FeatureDataset dataset;
  std::vector<std::vector<std::size_t>> image_objects;  // ascending object ids
  std::vector<std::vector<std::size_t>> caption_objects;
  std::vector<double> image_ambiguity;    // object count
  std::vector<double> caption_ambiguity;  // objects in image - coverage
};

struct SyntheticData {
  SyntheticSplit train;
  SyntheticSplit val;
  SyntheticSplit test;
  std::vector<RegionAnnotatedImage> regions;
  SyntheticComposer composer;
};

namespace detail {

inline SyntheticSplit generate_split(const SyntheticSpec& spec, const SyntheticComposer& composer,
                                     std::size_t n_images, Split split, Rng& rng) {
  SyntheticSplit out;
  const std::size_t k = spec.captions_per_image;
  out.dataset.split = split;
  out.dataset.image_features = Matrix(n_images, spec.feature_dim);
  out.dataset.caption_features = Matrix(n_images * k, spec.feature_dim);
  for (std::size_t j = 0; j < n_images; ++j) {
    const auto n_obj = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(spec.objects_min),
                                                            static_cast<std::int64_t>(spec.objects_max)));
    auto objects = sample_distinct(rng, spec.vocabulary, n_obj);
    const Vector img = composer.compose(objects, rng);
    std::copy(img.begin(), img.end(), out.dataset.image_features.row(j).begin());

    LabelVector labels(spec.vocabulary, 0);
    for (std::size_t o : objects) labels[o] = 1;
    out.dataset.annotations.label_vectors.emplace(j, std::move(labels));
    out.image_ambiguity.push_back(static_cast<double>(n_obj));

    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t hi = std::min(spec.coverage_max, n_obj);
      const auto coverage = static_cast<std::size_t>(
          rng.between(static_cast<std::int64_t>(spec.coverage_min), static_cast<std::int64_t>(hi)));
      std::vector<std::size_t> mentioned;
      for (std::size_t idx : sample_distinct(rng, n_obj, coverage)) mentioned.push_back(objects[idx]);
      const Vector cap = composer.compose(mentioned, rng);
      const std::size_t caption_id = j * k + c;
      std::copy(cap.begin(), cap.end(), out.dataset.caption_features.row(caption_id).begin());
      out.dataset.annotations.base_matches.emplace(caption_id, j);
      out.caption_objects.push_back(std::move(mentioned));
      out.caption_ambiguity.push_back(static_cast<double>(n_obj - coverage));
    }
    out.image_objects.push_back(std::move(objects));
  }
  return out;
}

/// One region per object. The image is cut into vertical strips of random
/// relative width; each object's box lies inside its own strip, so boxes
/// never overlap.
inline RegionAnnotatedImage generate_region_image(const SyntheticSpec& spec, const SyntheticComposer& composer,
                                                  std::size_t index, Rng& rng) {
  constexpr double kSize = 1000.0;
  RegionAnnotatedImage img;
  img.id = "scene" + std::to_string(index);
  img.width = kSize;
  img.height = kSize;
  const auto n_obj = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(spec.region_objects_min),
                                                          static_cast<std::int64_t>(spec.region_objects_max)));
  const auto objects = sample_distinct(rng, spec.vocabulary, n_obj);
  std::vector<double> weights(n_obj);
  double total = 0.0;
  for (double& w : weights) {
    w = std::exp(rng.uniform(0.0, 2.5));
    total += w;
  }
  double x = 0.0;
  for (std::size_t i = 0; i < n_obj; ++i) {
    const double strip = kSize * weights[i] / total;
    const double margin = 0.05 * strip;
    const double h = std::floor(kSize * rng.uniform(0.3, 1.0));
    const double y = std::floor((kSize - h) * rng.uniform01());
    Region r;
    r.box = {x + margin, y, strip - 2.0 * margin, h};
    r.caption = "object " + std::to_string(objects[i]);
    r.objects = {objects[i]};
    r.image_feature = composer.compose(r.objects, rng);
    r.caption_feature = composer.compose(r.objects, rng);
    img.regions.push_back(std::move(r));
    x += strip;
  }
  return img;
}

}  // namespace detail

/// Deterministic in `spec.seed`. Prototypes are drawn first, with absolute
/// Gaussian entries (non-negative like rectified backbone activations), then
/// the train, val, test and region sets in that order.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  Matrix prototypes(spec.vocabulary, spec.feature_dim);
  for (std::size_t v = 0; v < spec.vocabulary; ++v) {
    Vector p(spec.feature_dim);
    for (double& x : p) x = std::abs(rng.normal());
    detail::normalize(p);
    for (double& x : p) x = detail::to_storage_precision(x);
    std::copy(p.begin(), p.end(), prototypes.row(v).begin());
  }
  SyntheticComposer composer(std::move(prototypes), spec.noise, detail::mix_seed({spec.seed, 0x756e696f6eULL}));
  SyntheticData out{detail::generate_split(spec, composer, spec.train_images, Split::kTrain, rng),
                    detail::generate_split(spec, composer, spec.val_images, Split::kVal, rng),
                    detail::generate_split(spec, composer, spec.test_images, Split::kTest, rng),
                    {},
                    composer};
  for (std::size_t i = 0; i < spec.region_images; ++i) {
    out.regions.push_back(detail::generate_region_image(spec, composer, i, rng));
  }
  return out;
}

inline std::string ambiguity_csv(const SyntheticSplit& s) {
  std::string out = "id,modality,ambiguity\n";
  for (std::size_t j = 0; j < s.image_ambiguity.size(); ++j) {
    out += std::to_string(j) + ",image," + format_double(s.image_ambiguity[j]) + "\n";
  }
  for (std::size_t k = 0; k < s.caption_ambiguity.size(); ++k) {
    out += std::to_string(k) + ",caption," + format_double(s.caption_ambiguity[k]) + "\n";
  }
  return out;
}

/// composer.json + prototypes.pemb let the CLI rebuild union-crop features.
inline void save_composer(const std::filesystem::path& dir, const SyntheticComposer& c) {
  save_features(dir / "prototypes.pemb", c.prototypes());
  nlohmann::json j{{"noise", c.noise()}, {"seed", c.seed()}, {"prototypes", "prototypes.pemb"}};
  write_file_atomic(dir / "composer.json", j.dump(2) + "\n");
}

inline SyntheticComposer load_composer(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(dir / "composer.json"));
    return SyntheticComposer(load_features(dir / j.at("prototypes").get<std::string>()), j.at("noise").get<double>(),
                             j.at("seed").get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("composer.json: ") + e.what());
  }
}

}  // namespace probemb
