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

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "probemb/dataset.hpp"
#include "probemb/evaluation.hpp"
#include "probemb/metrics.hpp"
#include "probemb/model.hpp"
#include "probemb/rng.hpp"

namespace probemb {

struct TrainConfig {
  double margin = 0.2;
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double learning_rate = 2e-4;
  std::size_t decay_epoch = 15;
  double decay_factor = 10.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
  require(c.margin > 0.0, ErrorKind::kConfig, "margin must be > 0");
  require(c.batch_size >= 2, ErrorKind::kConfig, "batch_size must be >= 2");
  require(c.decay_epoch <= c.epochs, ErrorKind::kConfig, "decay_epoch must be <= epochs");
  require(c.learning_rate > 0.0 && c.decay_factor > 0.0, ErrorKind::kConfig,
          "learning_rate and decay_factor must be > 0");
  require(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0 && c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0 && c.adam_eps > 0.0,
          ErrorKind::kConfig, "invalid Adam hyper-parameters");
}

/// Learning rate for a 0-based epoch: divided once by decay_factor from
/// decay_epoch on.
inline double learning_rate_at(const TrainConfig& c, std::size_t epoch) {
  return epoch < c.decay_epoch ? c.learning_rate : c.learning_rate / c.decay_factor;
}

// ---------------------------------------------------------------------------
// Triplet loss over a B x B similarity matrix whose diagonal holds positives.

struct HardNegative {
  std::size_t index = 0;  // hardest negative (lowest index on ties)
  double hinge = 0.0;     // [margin + s_neg - s_pos]_+
  bool active() const { return hinge > 0.0; }
};

struct TripletLoss {
  double loss = 0.0;
  std::vector<HardNegative> caption_negatives;  // per row i: hardest c' != i
  std::vector<HardNegative> image_negatives;    // per column c: hardest i' != c
};

inline TripletLoss triplet_loss(const Matrix& sims, double margin) {
  require(sims.rows() == sims.cols(), ErrorKind::kShape, "similarity matrix must be square");
  require(sims.rows() >= 2, ErrorKind::kConfig, "triplet loss needs a batch of at least 2");
  require(all_finite(sims.data()), ErrorKind::kInvalidInput, "non-finite similarity");
  const std::size_t b = sims.rows();
  TripletLoss out;
  out.caption_negatives.resize(b);
  out.image_negatives.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    const double pos = sims(i, i);
    std::size_t best_c = i == 0 ? 1 : 0;
    std::size_t best_i = best_c;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      if (sims(i, j) > sims(i, best_c)) best_c = j;
      if (sims(j, i) > sims(best_i, i)) best_i = j;
    }
    // hinge(neg) = [margin + neg - pos]_+, evaluated as (neg - pos) + margin so
    // that adding a constant to every similarity leaves it bit-identical
    // whenever the difference is exact.
    out.caption_negatives[i] = {best_c, std::max(0.0, (sims(i, best_c) - pos) + margin)};
    out.image_negatives[i] = {best_i, std::max(0.0, (sims(best_i, i) - pos) + margin)};
  }
  for (std::size_t i = 0; i < b; ++i) out.loss += out.caption_negatives[i].hinge + out.image_negatives[i].hinge;
  return out;
}

/// dLoss/dSims for the active hinges.
inline Matrix triplet_loss_gradient(const TripletLoss& tl) {
  const std::size_t b = tl.caption_negatives.size();
  Matrix g(b, b);
  for (std::size_t i = 0; i < b; ++i) {
    if (tl.caption_negatives[i].active()) {
      g(i, tl.caption_negatives[i].index) += 1.0;
      g(i, i) -= 1.0;
    }
    if (tl.image_negatives[i].active()) {
      g(tl.image_negatives[i].index, i) += 1.0;
      g(i, i) -= 1.0;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batch loss and its parameter gradient.

struct Batch {
  Matrix image_features;    // B x image_dim, row b pairs with caption row b
  Matrix caption_features;  // B x caption_dim
};

inline Batch gather_batch(const FeatureDataset& ds, std::span<const std::size_t> caption_ids,
                          const std::vector<std::size_t>& caption_to_image) {
  Batch batch{Matrix(caption_ids.size(), ds.image_features.cols()),
              Matrix(caption_ids.size(), ds.caption_features.cols())};
  for (std::size_t r = 0; r < caption_ids.size(); ++r) {
    const auto img = ds.image_features.row(caption_to_image[caption_ids[r]]);
    const auto cap = ds.caption_features.row(caption_ids[r]);
    std::copy(img.begin(), img.end(), batch.image_features.row(r).begin());
    std::copy(cap.begin(), cap.end(), batch.caption_features.row(r).begin());
  }
  return batch;
}

inline Matrix batch_similarities(const ProbModel& model, const Batch& batch) {
  require_same_size(batch.image_features.rows(), batch.caption_features.rows(), "batch rows");
  const auto images = embed_rows(model, Modality::kImage, batch.image_features);
  const auto captions = embed_rows(model, Modality::kCaption, batch.caption_features);
  return similarity_matrix(model.config.metric, images, captions);
}

inline double batch_loss(const ProbModel& model, const Batch& batch, double margin) {
  return triplet_loss(batch_similarities(model, batch), margin).loss;
}

struct BatchGradient {
  double loss = 0.0;
  Vector grad;  // flatten_parameters() layout
};

/// Exact gradient of the batch triplet loss w.r.t. every model parameter.
/// Accumulation order is fixed (row-major over the similarity gradient), so
/// the result does not depend on the number of workers.
inline BatchGradient batch_gradient(const ProbModel& model, const Batch& batch, double margin) {
  require_same_size(batch.image_features.rows(), batch.caption_features.rows(), "batch rows");
  const auto images = embed_rows(model, Modality::kImage, batch.image_features);
  const auto captions = embed_rows(model, Modality::kCaption, batch.caption_features);
  const Matrix sims = similarity_matrix(model.config.metric, images, captions);
  const TripletLoss tl = triplet_loss(sims, margin);
  const Matrix d_sims = triplet_loss_gradient(tl);

  const std::size_t b = sims.rows();
  const std::size_t dim = model.joint_dim();
  std::vector<Vector> d_img_mean(b, Vector(dim, 0.0)), d_img_lv(b, Vector(dim, 0.0));
  std::vector<Vector> d_cap_mean(b, Vector(dim, 0.0)), d_cap_lv(b, Vector(dim, 0.0));
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t c = 0; c < b; ++c) {
      const double w = d_sims(i, c);
      if (w == 0.0) continue;
      const SimilarityGradient g = similarity_gradient(model.config.metric, images[i], captions[c]);
      for (std::size_t d = 0; d < dim; ++d) {
        d_img_mean[i][d] += w * g.d_mean_a[d];
        d_img_lv[i][d] += w * g.d_logvar_a[d];
        d_cap_mean[c][d] += w * g.d_mean_b[d];
        d_cap_lv[c][d] += w * g.d_logvar_b[d];
      }
    }
  }

  BatchGradient out{tl.loss, Vector(flat_size(model), 0.0)};
  for (std::size_t r = 0; r < b; ++r) {
    embed_backward(model, Modality::kImage, batch.image_features.row(r), d_img_mean[r], d_img_lv[r], out.grad);
    embed_backward(model, Modality::kCaption, batch.caption_features.row(r), d_cap_mean[r], d_cap_lv[r], out.grad);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamState {
  Vector m;
  Vector v;
  std::uint64_t t = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update, in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                      double beta1, double beta2, double eps) {
  require_same_size(params.size(), grads.size(), "adam gradient");
  require_same_size(params.size(), state.m.size(), "adam first moment");
  require_same_size(params.size(), state.v.size(), "adam second moment");
  ++state.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainHistory {
  std::vector<double> epoch_loss;    // mean per-pair loss over the epoch
  std::vector<double> val_rsum;      // validation rsum after each epoch
  std::optional<std::size_t> selected_epoch;  // none when no epoch ran
};

struct TrainOptions {
  /// Point-embedding ablation: log-variance parameters stay fixed.
  bool freeze_variance = false;
  /// Called after each epoch with (epoch, mean loss, val rsum).
  std::function<void(std::size_t, double, double)> on_epoch;
};

struct TrainResult {
  ProbModel best;
  TrainHistory history;
};

inline double validation_rsum(const ProbModel& model, const FeatureDataset& val) {
  return evaluate_full(score_dataset(model, val), val.annotations).rsum();
}

/// Zeroes both log-variance heads and the shared scalar, so every variance is 1.
inline void set_unit_variance(ProbModel& model) {
  for (AffineHead* h : {&model.image_logvar, &model.caption_logvar}) {
    std::fill(h->weight.data().begin(), h->weight.data().end(), 0.0);
    std::fill(h->bias.begin(), h->bias.end(), 0.0);
  }
  model.shared_logvar = 0.0;
}

/// Zeroes the log-variance block of both modalities and the shared scalar.
inline void mask_variance_gradient(const ProbModel& model, Vector& grad) {
  for (Modality m : {Modality::kImage, Modality::kCaption}) {
    const auto layout = layout_for(model, m);
    const std::size_t n = model.logvar_head(m).parameter_count();
    std::fill(grad.begin() + static_cast<std::ptrdiff_t>(layout.logvar_offset),
              grad.begin() + static_cast<std::ptrdiff_t>(layout.logvar_offset + n), 0.0);
  }
  grad.back() = 0.0;
}

/// Mini-batch Adam on the triplet loss. After every epoch the model is
/// scored on `val`; the epoch with the highest rsum wins (earliest on ties).
inline TrainResult train(ProbModel model, const FeatureDataset& train_set, const FeatureDataset& val_set,
                         const TrainConfig& config, const TrainOptions& options = {}) {
  validate(config);
  validate(train_set);
  validate(val_set);
  require(train_set.num_captions() >= 2, ErrorKind::kConfig, "training set needs at least two pairs");
  require(val_set.num_captions() > 0, ErrorKind::kConfig, "validation set is empty");
  require(train_set.image_features.cols() == model.config.image_dim &&
              train_set.caption_features.cols() == model.config.caption_dim,
          ErrorKind::kShape, "training features do not match the model input dimensions");

  TrainResult result{model, {}};
  if (config.epochs == 0) return result;

  Rng rng(config.seed);
  const auto caption_to_image = train_set.caption_to_image();
  std::vector<std::size_t> order(train_set.num_captions());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Vector params = flatten_parameters(model);
  AdamState adam(params.size());
  double best_rsum = -std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    const double lr = learning_rate_at(config, epoch);
    double loss_sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      if (end - start < 2) break;  // drop a trailing singleton batch
      const Batch batch = gather_batch(train_set, std::span(order).subspan(start, end - start), caption_to_image);
      BatchGradient bg = batch_gradient(model, batch, config.margin);
      if (options.freeze_variance) mask_variance_gradient(model, bg.grad);
      adam_step(params, bg.grad, adam, lr, config.adam_beta1, config.adam_beta2, config.adam_eps);
      assign_parameters(model, params);
      loss_sum += bg.loss;
      pairs += end - start;
    }
    const double mean_loss = pairs == 0 ? 0.0 : loss_sum / static_cast<double>(pairs);
    const double rsum = validation_rsum(model, val_set);
    result.history.epoch_loss.push_back(mean_loss);
    result.history.val_rsum.push_back(rsum);
    if (rsum > best_rsum) {
      best_rsum = rsum;
      result.best = model;
      result.history.selected_epoch = epoch;
    }
    if (options.on_epoch) options.on_epoch(epoch, mean_loss, rsum);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Config file: a flat JSON object with exactly the TrainConfig fields plus
// "metric" and "shape".

struct TrainingSetup {
  TrainConfig train;
  SimilarityMetric metric = SimilarityMetric::kNegWasserstein2;
  CovarianceShape shape = CovarianceShape::kEllipsoidal;
};

inline TrainingSetup parse_train_config(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::kConfig, std::string("train config: ") + e.what());
  }
  require(j.is_object(), ErrorKind::kConfig, "train config must be a JSON object");
  static const std::set<std::string> kKeys = {"margin",     "epochs",      "batch_size", "learning_rate",
                                              "decay_epoch", "decay_factor", "adam_beta1", "adam_beta2",
                                              "adam_eps",   "seed",        "metric",     "shape"};
  for (const auto& [key, value] : j.items()) {
    require(kKeys.contains(key), ErrorKind::kConfig, "train config: unknown key '" + key + "'");
  }
  TrainingSetup s;
  auto real = [&](const char* key, double& out) {
    if (!j.contains(key)) return;
    require(j[key].is_number(), ErrorKind::kConfig, std::string("train config: '") + key + "' must be a number");
    out = j[key].get<double>();
  };
  auto count = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    require(j[key].is_number_unsigned(), ErrorKind::kConfig,
            std::string("train config: '") + key + "' must be a non-negative integer");
    out = j[key].get<std::remove_reference_t<decltype(out)>>();
  };
  real("margin", s.train.margin);
  count("epochs", s.train.epochs);
  count("batch_size", s.train.batch_size);
  real("learning_rate", s.train.learning_rate);
  count("decay_epoch", s.train.decay_epoch);
  real("decay_factor", s.train.decay_factor);
  real("adam_beta1", s.train.adam_beta1);
  real("adam_beta2", s.train.adam_beta2);
  real("adam_eps", s.train.adam_eps);
  count("seed", s.train.seed);
  if (j.contains("metric")) {
    const auto m = j["metric"].is_string() ? parse_metric(j["metric"].get<std::string>()) : std::nullopt;
    require(m.has_value(), ErrorKind::kConfig, "train config: unknown metric");
    s.metric = *m;
  }
  if (j.contains("shape")) {
    const auto sh = j["shape"].is_string() ? parse_shape(j["shape"].get<std::string>()) : std::nullopt;
    require(sh.has_value(), ErrorKind::kConfig, "train config: unknown shape");
    s.shape = *sh;
  }
  validate(s.train);
  return s;
}

inline std::string serialize_train_config(const TrainingSetup& s) {
  nlohmann::json j{{"margin", s.train.margin},
                   {"epochs", s.train.epochs},
                   {"batch_size", s.train.batch_size},
                   {"learning_rate", s.train.learning_rate},
                   {"decay_epoch", s.train.decay_epoch},
                   {"decay_factor", s.train.decay_factor},
                   {"adam_beta1", s.train.adam_beta1},
                   {"adam_beta2", s.train.adam_beta2},
                   {"adam_eps", s.train.adam_eps},
                   {"seed", s.train.seed},
                   {"metric", to_string(s.metric)},
                   {"shape", to_string(s.shape)}};
  return j.dump(2) + "\n";
}

inline std::string history_json(const TrainHistory& h) {
  nlohmann::json j{{"epoch_loss", h.epoch_loss}, {"val_rsum", h.val_rsum}};
  j["selected_epoch"] = h.selected_epoch ? nlohmann::json(*h.selected_epoch) : nlohmann::json(nullptr);
  return j.dump(2) + "\n";
}

}  // namespace probemb
