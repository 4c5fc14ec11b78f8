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

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "probemb/binary_io.hpp"
#include "probemb/error.hpp"
#include "probemb/linalg.hpp"

namespace probemb {

using LabelVector = std::vector<std::uint8_t>;

/// Ground-truth pairing plus the optional plausible-match annotations.
struct MatchAnnotations {
  std::map<std::size_t, std::size_t> base_matches;         // caption -> image
  std::map<std::size_t, LabelVector> label_vectors;        // image -> object presence
  std::set<std::pair<std::size_t, std::size_t>> extended;  // (image, caption)

  bool empty() const { return base_matches.empty() && label_vectors.empty() && extended.empty(); }
  friend bool operator==(const MatchAnnotations&, const MatchAnnotations&) = default;
};

inline void validate(const MatchAnnotations& a) {
  std::size_t label_len = 0;
  bool first = true;
  for (const auto& [image, labels] : a.label_vectors) {
    if (first) label_len = labels.size();
    first = false;
    require(labels.size() == label_len, ErrorKind::kAnnotation,
            "label vector of image " + std::to_string(image) + " has a different length");
    for (auto bit : labels) {
      require(bit <= 1, ErrorKind::kAnnotation, "label vectors must be binary");
    }
  }
  for (const auto& [image, caption] : a.extended) {
    const auto it = a.base_matches.find(caption);
    require(it == a.base_matches.end() || it->second != image, ErrorKind::kAnnotation,
            "extended positive (" + std::to_string(image) + ", " + std::to_string(caption) +
                ") duplicates a base match");
  }
}

enum class Split { kTrain, kVal, kTest };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

/// Precomputed features for both modalities with their annotations. Rows are
/// instances; caption k is paired with image annotations.base_matches[k].
struct FeatureDataset {
  Matrix image_features;
  Matrix caption_features;
  MatchAnnotations annotations;
  Split split = Split::kTrain;

  std::size_t num_images() const noexcept { return image_features.rows(); }
  std::size_t num_captions() const noexcept { return caption_features.rows(); }

  /// Dense caption -> image table; requires validate() to have passed.
  std::vector<std::size_t> caption_to_image() const {
    std::vector<std::size_t> out(num_captions());
    for (const auto& [caption, image] : annotations.base_matches) out[caption] = image;
    return out;
  }

  std::vector<std::vector<std::size_t>> captions_of_image() const {
    std::vector<std::vector<std::size_t>> out(num_images());
    for (const auto& [caption, image] : annotations.base_matches) out[image].push_back(caption);
    return out;
  }
};

inline void validate(const FeatureDataset& ds) {
  validate(ds.annotations);
  require(all_finite(ds.image_features.data()), ErrorKind::kInvalidInput, "non-finite image feature");
  require(all_finite(ds.caption_features.data()), ErrorKind::kInvalidInput, "non-finite caption feature");
  require(ds.annotations.base_matches.size() == ds.num_captions(), ErrorKind::kAnnotation,
          "every caption needs exactly one base match (" + std::to_string(ds.annotations.base_matches.size()) +
              " matches for " + std::to_string(ds.num_captions()) + " captions)");
  for (const auto& [caption, image] : ds.annotations.base_matches) {
    require(caption < ds.num_captions(), ErrorKind::kAnnotation, "caption index out of range");
    require(image < ds.num_images(), ErrorKind::kAnnotation, "image index out of range");
  }
  for (const auto& [image, caption] : ds.annotations.extended) {
    require(image < ds.num_images() && caption < ds.num_captions(), ErrorKind::kAnnotation,
            "extended positive out of range");
  }
  for (const auto& [image, labels] : ds.annotations.label_vectors) {
    require(image < ds.num_images(), ErrorKind::kAnnotation, "label vector image out of range");
  }
}

// Feature matrix file:
//   "PEMB" | u32 version = 1 | u64 rows | u64 cols | rows*cols f32, row-major
// Little-endian throughout.
inline constexpr std::uint32_t kMatrixVersion = 1;
inline constexpr std::size_t kMatrixHeaderBytes = 24;

inline std::string encode_features(const Matrix& m) {
  ByteWriter w;
  w.bytes("PEMB");
  w.uint<std::uint32_t>(kMatrixVersion);
  w.uint<std::uint64_t>(m.rows());
  w.uint<std::uint64_t>(m.cols());
  for (double v : m.data()) w.f32(static_cast<float>(v));
  return w.buffer();
}

inline Matrix decode_features(std::string_view bytes) {
  ByteReader r(bytes);
  r.expect_bytes("PEMB", "magic");
  const auto version_at = r.offset();
  if (r.uint<std::uint32_t>("version") != kMatrixVersion) {
    throw FormatError("unsupported matrix version", version_at);
  }
  const auto rows = r.uint<std::uint64_t>("rows");
  const auto cols_at = r.offset();
  const auto cols = r.uint<std::uint64_t>("cols");
  if (rows != 0 && cols > r.remaining() / 4 / rows) {
    throw FormatError("payload shorter than rows*cols", cols_at);
  }
  const std::uint64_t count = rows * cols;
  r.need(count * 4, "payload");
  std::vector<double> data(count);
  for (double& v : data) {
    const auto at = r.offset();
    v = r.f32("value");
    if (!std::isfinite(v)) throw FormatError("non-finite value", at);
  }
  r.expect_end();
  return Matrix(rows, cols, std::move(data));
}

inline void save_features(const std::filesystem::path& path, const Matrix& m) {
  write_file_atomic(path, encode_features(m));
}

inline Matrix load_features(const std::filesystem::path& path) { return decode_features(read_file(path)); }

namespace detail {

inline std::size_t json_index(const nlohmann::json& obj, const char* key, std::size_t line) {
  const auto it = obj.find(key);
  if (it == obj.end() || !it->is_number_unsigned()) {
    fail(ErrorKind::kAnnotation,
         "line " + std::to_string(line) + ": field '" + key + "' must be a non-negative integer");
  }
  return it->get<std::size_t>();
}

}  // namespace detail

/// JSON-lines annotations. Each non-blank line is one of
///   {"caption": k, "image": j}          base match
///   {"ext_image": j, "ext_caption": k}  extended positive
///   {"image": j, "labels": [0, 1, ...]} label vector
inline MatchAnnotations parse_annotations(std::string_view text) {
  MatchAnnotations out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::kAnnotation, "line " + std::to_string(line_no) + ": " + e.what());
    }
    require(obj.is_object(), ErrorKind::kAnnotation, "line " + std::to_string(line_no) + ": expected an object");
    auto keys_are = [&](std::initializer_list<const char*> keys) {
      if (obj.size() != keys.size()) return false;
      for (const char* k : keys) {
        if (!obj.contains(k)) return false;
      }
      return true;
    };
    if (keys_are({"caption", "image"})) {
      const auto caption = detail::json_index(obj, "caption", line_no);
      const auto image = detail::json_index(obj, "image", line_no);
      if (!out.base_matches.emplace(caption, image).second) {
        fail(ErrorKind::kAnnotation,
             "line " + std::to_string(line_no) + ": duplicate base match for caption " + std::to_string(caption));
      }
    } else if (keys_are({"ext_image", "ext_caption"})) {
      out.extended.emplace(detail::json_index(obj, "ext_image", line_no),
                           detail::json_index(obj, "ext_caption", line_no));
    } else if (keys_are({"image", "labels"})) {
      const auto image = detail::json_index(obj, "image", line_no);
      const auto& labels = obj["labels"];
      require(labels.is_array(), ErrorKind::kAnnotation, "line " + std::to_string(line_no) + ": labels must be an array");
      LabelVector bits;
      for (const auto& b : labels) {
        if (!b.is_number_unsigned() || b.get<unsigned>() > 1) {
          fail(ErrorKind::kAnnotation, "line " + std::to_string(line_no) + ": labels must be 0 or 1");
        }
        bits.push_back(static_cast<std::uint8_t>(b.get<unsigned>()));
      }
      if (!out.label_vectors.emplace(image, std::move(bits)).second) {
        fail(ErrorKind::kAnnotation,
             "line " + std::to_string(line_no) + ": duplicate label vector for image " + std::to_string(image));
      }
    } else {
      fail(ErrorKind::kAnnotation, "line " + std::to_string(line_no) + ": unrecognised record " + line);
    }
  }
  validate(out);
  return out;
}

inline std::string serialize_annotations(const MatchAnnotations& a) {
  std::string out;
  for (const auto& [caption, image] : a.base_matches) {
    out += nlohmann::json{{"caption", caption}, {"image", image}}.dump() + "\n";
  }
  for (const auto& [image, caption] : a.extended) {
    out += nlohmann::json{{"ext_image", image}, {"ext_caption", caption}}.dump() + "\n";
  }
  for (const auto& [image, labels] : a.label_vectors) {
    std::vector<unsigned> bits(labels.begin(), labels.end());
    out += nlohmann::json{{"image", image}, {"labels", bits}}.dump() + "\n";
  }
  return out;
}

inline MatchAnnotations load_annotations(const std::filesystem::path& path) {
  return parse_annotations(read_file(path));
}

inline void save_annotations(const std::filesystem::path& path, const MatchAnnotations& a) {
  write_file_atomic(path, serialize_annotations(a));
}

/// A dataset directory holds image_features.pemb, caption_features.pemb and
/// annotations.jsonl.
inline void save_dataset(const std::filesystem::path& dir, const FeatureDataset& ds) {
  std::filesystem::create_directories(dir);
  save_features(dir / "image_features.pemb", ds.image_features);
  save_features(dir / "caption_features.pemb", ds.caption_features);
  save_annotations(dir / "annotations.jsonl", ds.annotations);
}

inline FeatureDataset load_dataset(const std::filesystem::path& dir, Split split = Split::kTest) {
  FeatureDataset ds{load_features(dir / "image_features.pemb"), load_features(dir / "caption_features.pemb"),
                    load_annotations(dir / "annotations.jsonl"), split};
  validate(ds);
  return ds;
}

}  // namespace probemb
