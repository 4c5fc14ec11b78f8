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
#include <charconv>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "probemb/dataset.hpp"
#include "probemb/gaussian.hpp"
#include "probemb/metrics.hpp"
#include "probemb/model.hpp"

namespace probemb {

/// Positive gallery indices of each query.
using PositiveSets = std::vector<std::vector<std::size_t>>;

// ---------------------------------------------------------------------------
// Ranking primitives. Ties in score are broken by ascending gallery index.

inline std::vector<std::size_t> ranking(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// Position of `item` in ranking(scores), computed without sorting.
inline std::size_t rank_of(std::span<const double> scores, std::size_t item) {
  const double s = scores[item];
  std::size_t rank = 0;
  for (std::size_t g = 0; g < scores.size(); ++g) {
    if (scores[g] > s || (scores[g] == s && g < item)) ++rank;
  }
  return rank;
}

/// Percentage of queries with at least one positive in the top k.
inline double recall_at_k(const Matrix& sims, const PositiveSets& positives, std::size_t k) {
  require_same_size(positives.size(), sims.rows(), "positive sets per query");
  require(k >= 1, ErrorKind::kConfig, "k must be >= 1");
  require(k <= sims.cols(), ErrorKind::kConfig,
          "k = " + std::to_string(k) + " exceeds gallery size " + std::to_string(sims.cols()));
  if (sims.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < sims.rows(); ++q) {
    require(!positives[q].empty(), ErrorKind::kUndefinedQuery, "query " + std::to_string(q) + " has no positives");
    const auto row = sims.row(q);
    for (std::size_t p : positives[q]) {
      if (rank_of(row, p) < k) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(sims.rows());
}

/// |top-r of `ranked` ∩ positives| / r with r = |positives|.
inline double r_precision(std::span<const std::size_t> ranked, std::span<const std::size_t> positives) {
  require(!positives.empty(), ErrorKind::kUndefinedQuery, "r-precision needs at least one positive");
  const std::size_t r = positives.size();
  require(r <= ranked.size(), ErrorKind::kConfig, "more positives than ranked items");
  std::vector<std::size_t> sorted(positives.begin(), positives.end());
  std::sort(sorted.begin(), sorted.end());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (std::binary_search(sorted.begin(), sorted.end(), ranked[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(r);
}

struct RPrecisionResult {
  double mean = 0.0;          // over defined queries
  std::size_t excluded = 0;   // queries without positives
};

/// Mean r-precision over the rows of `sims`; queries without positives are
/// left out of the mean and counted in `excluded`.
inline RPrecisionResult mean_r_precision(const Matrix& sims, const PositiveSets& positives) {
  require_same_size(positives.size(), sims.rows(), "positive sets per query");
  RPrecisionResult out;
  double total = 0.0;
  std::size_t defined = 0;
  for (std::size_t q = 0; q < sims.rows(); ++q) {
    if (positives[q].empty()) {
      ++out.excluded;
      continue;
    }
    total += r_precision(ranking(sims.row(q)), positives[q]);
    ++defined;
  }
  out.mean = defined == 0 ? 0.0 : total / static_cast<double>(defined);
  return out;
}

inline std::size_t hamming(const LabelVector& a, const LabelVector& b) {
  require_same_size(a.size(), b.size(), "label vector");
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

inline constexpr std::size_t kDefaultZetas[] = {0, 1, 2};

/// Plausible-match R-Precision: for each zeta the positives of a query are
/// the gallery items whose label vector is within Hamming distance zeta; the
/// mean r-precision is averaged over the zeta values.
inline double pmrp(const Matrix& sims, std::span<const LabelVector> query_labels,
                   std::span<const LabelVector> gallery_labels,
                   std::span<const std::size_t> zetas = kDefaultZetas) {
  require(query_labels.size() == sims.rows() && gallery_labels.size() == sims.cols(), ErrorKind::kAnnotation,
          "label vectors missing for some queries or gallery items");
  require(!zetas.empty(), ErrorKind::kConfig, "pmrp needs at least one zeta");
  std::vector<std::vector<std::size_t>> rankings(sims.rows());
  for (std::size_t q = 0; q < sims.rows(); ++q) rankings[q] = ranking(sims.row(q));
  double total = 0.0;
  for (std::size_t zeta : zetas) {
    PositiveSets positives(sims.rows());
    for (std::size_t q = 0; q < sims.rows(); ++q) {
      for (std::size_t g = 0; g < sims.cols(); ++g) {
        if (hamming(query_labels[q], gallery_labels[g]) <= zeta) positives[q].push_back(g);
      }
    }
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t q = 0; q < sims.rows(); ++q) {
      if (positives[q].empty()) continue;
      sum += r_precision(rankings[q], positives[q]);
      ++defined;
    }
    total += defined == 0 ? 0.0 : sum / static_cast<double>(defined);
  }
  return total / static_cast<double>(zetas.size());
}

/// R-Precision with positives = base matches ∪ extended positives.
inline double rpc2(const Matrix& sims, const PositiveSets& base, const PositiveSets& extended) {
  require_same_size(base.size(), sims.rows(), "base positive sets");
  require_same_size(extended.size(), sims.rows(), "extended positive sets");
  PositiveSets merged(sims.rows());
  for (std::size_t q = 0; q < sims.rows(); ++q) {
    merged[q] = base[q];
    merged[q].insert(merged[q].end(), extended[q].begin(), extended[q].end());
    std::sort(merged[q].begin(), merged[q].end());
    merged[q].erase(std::unique(merged[q].begin(), merged[q].end()), merged[q].end());
    require(!merged[q].empty(), ErrorKind::kUndefinedQuery, "query " + std::to_string(q) + " has no positives");
  }
  return mean_r_precision(sims, merged).mean;
}

// ---------------------------------------------------------------------------
// Reports.

enum class Direction { kImageToText, kTextToImage };

inline std::string_view to_string(Direction d) {
  return d == Direction::kImageToText ? "image-to-text" : "text-to-image";
}

enum class Protocol { kFull, kFiveFold1K };

inline std::string_view to_string(Protocol p) { return p == Protocol::kFull ? "full" : "1k5fold"; }

struct RetrievalReport {
  Direction direction = Direction::kImageToText;
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
  double rsum = 0.0;  // sum of all six recalls of the evaluation this row belongs to
  std::optional<double> pmrp;
  std::optional<double> rpc2;
  Protocol protocol = Protocol::kFull;
  std::size_t folds = 1;
};

struct EvaluationOptions {
  bool pmrp = false;
  bool rpc2 = false;
};

struct Evaluation {
  RetrievalReport image_to_text;
  RetrievalReport text_to_image;

  double rsum() const { return image_to_text.rsum; }
};

/// Positive sets for both directions, derived from the annotations of an
/// images x captions similarity matrix.
struct DirectionalPositives {
  PositiveSets i2t_base;
  PositiveSets i2t_extended;
  PositiveSets t2i_base;
  PositiveSets t2i_extended;
};

inline DirectionalPositives directional_positives(const MatchAnnotations& a, std::size_t num_images,
                                                  std::size_t num_captions) {
  DirectionalPositives p{PositiveSets(num_images), PositiveSets(num_images), PositiveSets(num_captions),
                         PositiveSets(num_captions)};
  for (const auto& [caption, image] : a.base_matches) {
    p.i2t_base[image].push_back(caption);
    p.t2i_base[caption].push_back(image);
  }
  for (const auto& [image, caption] : a.extended) {
    p.i2t_extended[image].push_back(caption);
    p.t2i_extended[caption].push_back(image);
  }
  return p;
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  }
  return t;
}

/// Full-gallery evaluation of an images x captions similarity matrix.
inline Evaluation evaluate_full(const Matrix& sims, const MatchAnnotations& annotations,
                                const EvaluationOptions& options = {}) {
  const std::size_t n_img = sims.rows();
  const std::size_t n_cap = sims.cols();
  const auto pos = directional_positives(annotations, n_img, n_cap);
  const Matrix t2i = transpose(sims);

  Evaluation ev;
  ev.image_to_text.direction = Direction::kImageToText;
  ev.text_to_image.direction = Direction::kTextToImage;
  auto fill = [](RetrievalReport& rep, const Matrix& m, const PositiveSets& positives) {
    rep.r1 = recall_at_k(m, positives, std::min<std::size_t>(1, m.cols()));
    rep.r5 = recall_at_k(m, positives, std::min<std::size_t>(5, m.cols()));
    rep.r10 = recall_at_k(m, positives, std::min<std::size_t>(10, m.cols()));
  };
  fill(ev.image_to_text, sims, pos.i2t_base);
  fill(ev.text_to_image, t2i, pos.t2i_base);
  const double rsum = ev.image_to_text.r1 + ev.image_to_text.r5 + ev.image_to_text.r10 + ev.text_to_image.r1 +
                      ev.text_to_image.r5 + ev.text_to_image.r10;
  ev.image_to_text.rsum = rsum;
  ev.text_to_image.rsum = rsum;

  if (options.pmrp) {
    std::vector<LabelVector> image_labels(n_img);
    for (std::size_t j = 0; j < n_img; ++j) {
      const auto it = annotations.label_vectors.find(j);
      require(it != annotations.label_vectors.end(), ErrorKind::kAnnotation,
              "image " + std::to_string(j) + " has no label vector");
      image_labels[j] = it->second;
    }
    std::vector<LabelVector> caption_labels(n_cap);
    for (const auto& [caption, image] : annotations.base_matches) caption_labels[caption] = image_labels[image];
    ev.image_to_text.pmrp = pmrp(sims, image_labels, caption_labels);
    ev.text_to_image.pmrp = pmrp(t2i, caption_labels, image_labels);
  }
  if (options.rpc2) {
    ev.image_to_text.rpc2 = rpc2(sims, pos.i2t_base, pos.i2t_extended);
    ev.text_to_image.rpc2 = rpc2(t2i, pos.t2i_base, pos.t2i_extended);
  }
  return ev;
}

/// Splits the images into five consecutive folds of `fold_size` (captions
/// follow their image), evaluates each fold and averages every metric.
inline Evaluation five_fold_1k(const Matrix& sims, const MatchAnnotations& annotations, std::size_t fold_size = 1000,
                               const EvaluationOptions& options = {}) {
  constexpr std::size_t kFolds = 5;
  require(fold_size > 0 && sims.rows() == kFolds * fold_size, ErrorKind::kConfig,
          "five-fold protocol needs exactly 5 x " + std::to_string(fold_size) + " images, got " +
              std::to_string(sims.rows()));
  for (const auto& [caption, image] : annotations.base_matches) {
    require(caption < sims.cols() && image < sims.rows(), ErrorKind::kAnnotation, "base match out of range");
  }

  Evaluation mean;
  mean.image_to_text.direction = Direction::kImageToText;
  mean.text_to_image.direction = Direction::kTextToImage;
  if (options.pmrp) mean.image_to_text.pmrp = mean.text_to_image.pmrp = 0.0;
  if (options.rpc2) mean.image_to_text.rpc2 = mean.text_to_image.rpc2 = 0.0;

  for (std::size_t f = 0; f < kFolds; ++f) {
    const std::size_t lo = f * fold_size;
    const std::size_t hi = lo + fold_size;
    std::vector<std::size_t> captions;  // global caption ids in this fold, ascending
    for (const auto& [caption, image] : annotations.base_matches) {
      if (image >= lo && image < hi) captions.push_back(caption);
    }
    std::vector<std::size_t> local_caption(sims.cols(), SIZE_MAX);
    for (std::size_t i = 0; i < captions.size(); ++i) local_caption[captions[i]] = i;

    Matrix sub(fold_size, captions.size());
    for (std::size_t j = 0; j < fold_size; ++j) {
      for (std::size_t i = 0; i < captions.size(); ++i) sub(j, i) = sims(lo + j, captions[i]);
    }
    MatchAnnotations local;
    for (std::size_t i = 0; i < captions.size(); ++i) {
      local.base_matches.emplace(i, annotations.base_matches.at(captions[i]) - lo);
    }
    for (const auto& [image, caption] : annotations.extended) {
      if (image >= lo && image < hi && local_caption[caption] != SIZE_MAX) {
        local.extended.emplace(image - lo, local_caption[caption]);
      }
    }
    for (const auto& [image, labels] : annotations.label_vectors) {
      if (image >= lo && image < hi) local.label_vectors.emplace(image - lo, labels);
    }

    const Evaluation fold = evaluate_full(sub, local, options);
    for (auto [acc, rep] : {std::pair{&mean.image_to_text, &fold.image_to_text},
                            std::pair{&mean.text_to_image, &fold.text_to_image}}) {
      acc->r1 += rep->r1 / kFolds;
      acc->r5 += rep->r5 / kFolds;
      acc->r10 += rep->r10 / kFolds;
      acc->rsum += rep->rsum / kFolds;
      if (options.pmrp) *acc->pmrp += *rep->pmrp / kFolds;
      if (options.rpc2) *acc->rpc2 += *rep->rpc2 / kFolds;
    }
  }
  for (RetrievalReport* rep : {&mean.image_to_text, &mean.text_to_image}) {
    rep->protocol = Protocol::kFiveFold1K;
    rep->folds = kFolds;
  }
  return mean;
}

// ---------------------------------------------------------------------------
// Embedding-level helpers.

struct DatasetEmbeddings {
  std::vector<GaussianEmbedding> images;
  std::vector<GaussianEmbedding> captions;
};

inline std::vector<GaussianEmbedding> embed_rows(const ProbModel& model, Modality modality, const Matrix& features) {
  std::vector<GaussianEmbedding> out(features.rows());
  parallel_for(features.rows(), [&](std::size_t r) { out[r] = embed(model, modality, features.row(r)); });
  return out;
}

inline DatasetEmbeddings embed_dataset(const ProbModel& model, const FeatureDataset& ds) {
  return {embed_rows(model, Modality::kImage, ds.image_features),
          embed_rows(model, Modality::kCaption, ds.caption_features)};
}

inline Matrix score_dataset(const ProbModel& model, const FeatureDataset& ds) {
  const auto emb = embed_dataset(model, ds);
  return similarity_matrix(model.config.metric, emb.images, emb.captions);
}

/// Picks between two candidates of the other modality by similarity to the
/// query. Returns 0 or 1; ties go to candidate 0.
inline std::size_t binary_selection(SimilarityMetric metric, Modality query_modality, const GaussianEmbedding& query,
                                    const GaussianEmbedding& candidate0, const GaussianEmbedding& candidate1) {
  auto score = [&](const GaussianEmbedding& cand) {
    return query_modality == Modality::kImage ? similarity(metric, query, cand) : similarity(metric, cand, query);
  };
  return score(candidate1) > score(candidate0) ? 1 : 0;
}

struct UncertaintyRow {
  std::size_t id = 0;
  Modality modality = Modality::kImage;
  double uncertainty = 0.0;
};

struct UncertaintyReport {
  std::vector<UncertaintyRow> rows;  // descending uncertainty
  double min = 0.0;
  double median = 0.0;
  double max = 0.0;
};

/// Uncertainty of every image and caption, sorted descending (ties: images
/// first, then ascending id).
inline UncertaintyReport uncertainty_report(const ProbModel& model, const FeatureDataset& ds) {
  const auto emb = embed_dataset(model, ds);
  UncertaintyReport rep;
  for (std::size_t j = 0; j < emb.images.size(); ++j) rep.rows.push_back({j, Modality::kImage, uncertainty(emb.images[j])});
  for (std::size_t k = 0; k < emb.captions.size(); ++k) {
    rep.rows.push_back({k, Modality::kCaption, uncertainty(emb.captions[k])});
  }
  std::sort(rep.rows.begin(), rep.rows.end(), [](const UncertaintyRow& a, const UncertaintyRow& b) {
    if (a.uncertainty != b.uncertainty) return a.uncertainty > b.uncertainty;
    if (a.modality != b.modality) return a.modality < b.modality;
    return a.id < b.id;
  });
  if (rep.rows.empty()) return rep;
  rep.max = rep.rows.front().uncertainty;
  rep.min = rep.rows.back().uncertainty;
  const std::size_t n = rep.rows.size();
  // rows are descending, so the middle elements are the same either way
  rep.median = n % 2 == 1 ? rep.rows[n / 2].uncertainty
                          : 0.5 * (rep.rows[n / 2 - 1].uncertainty + rep.rows[n / 2].uncertainty);
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization.

/// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

inline nlohmann::json to_json(const RetrievalReport& r) {
  nlohmann::json j{{"direction", to_string(r.direction)},
                   {"protocol", to_string(r.protocol)},
                   {"folds", r.folds},
                   {"r1", r.r1},
                   {"r5", r.r5},
                   {"r10", r.r10},
                   {"rsum", r.rsum}};
  j["pmrp"] = r.pmrp ? nlohmann::json(*r.pmrp) : nlohmann::json(nullptr);
  j["rpc2"] = r.rpc2 ? nlohmann::json(*r.rpc2) : nlohmann::json(nullptr);
  return j;
}

inline std::string report_json(const Evaluation& ev, SimilarityMetric metric) {
  nlohmann::json j{{"metric", to_string(metric)},
                   {"protocol", to_string(ev.image_to_text.protocol)},
                   {"rsum", ev.rsum()},
                   {"directions", {to_json(ev.image_to_text), to_json(ev.text_to_image)}}};
  return j.dump(2) + "\n";
}

inline constexpr std::string_view kReportCsvHeader = "protocol,direction,r1,r5,r10,rsum,pmrp,rpc2";

inline std::string report_csv_rows(const Evaluation& ev) {
  std::string out;
  for (const RetrievalReport* r : {&ev.image_to_text, &ev.text_to_image}) {
    out += std::string(to_string(r->protocol)) + "," + std::string(to_string(r->direction)) + "," +
           format_double(r->r1) + "," + format_double(r->r5) + "," + format_double(r->r10) + "," +
           format_double(r->rsum) + "," + (r->pmrp ? format_double(*r->pmrp) : "") + "," +
           (r->rpc2 ? format_double(*r->rpc2) : "") + "\n";
  }
  return out;
}

inline std::string report_csv(const Evaluation& ev) {
  return std::string(kReportCsvHeader) + "\n" + report_csv_rows(ev);
}

/// Human-readable table; percentages with one decimal.
inline std::string report_table(const Evaluation& ev) {
  std::string out = "direction       R@1    R@5    R@10   PMRP   RPC2\n";
  for (const RetrievalReport* r : {&ev.image_to_text, &ev.text_to_image}) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-14s %6s %6s %6s %6s %6s\n", std::string(to_string(r->direction)).c_str(),
                  format_percent(r->r1).c_str(), format_percent(r->r5).c_str(), format_percent(r->r10).c_str(),
                  r->pmrp ? format_percent(100.0 * *r->pmrp).c_str() : "-",
                  r->rpc2 ? format_percent(100.0 * *r->rpc2).c_str() : "-");
    out += line;
  }
  out += "rsum " + format_percent(ev.rsum()) + "\n";
  return out;
}

inline std::string uncertainty_csv(const UncertaintyReport& rep) {
  std::string out = "id,modality,uncertainty\n";
  for (const auto& row : rep.rows) {
    out += std::to_string(row.id) + "," + std::string(to_string(row.modality)) + "," + format_double(row.uncertainty) +
           "\n";
  }
  return out;
}

}  // namespace probemb
