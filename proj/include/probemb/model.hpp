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

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "probemb/binary_io.hpp"
#include "probemb/gaussian.hpp"
#include "probemb/linalg.hpp"
#include "probemb/metrics.hpp"
#include "probemb/rng.hpp"

namespace probemb {

enum class Modality : std::uint32_t { kImage = 0, kCaption = 1 };

inline std::string_view to_string(Modality m) { return m == Modality::kImage ? "image" : "caption"; }

/// y = W x + b with W stored row-major (out x in).
struct AffineHead {
  Matrix weight;
  Vector bias;

  AffineHead() = default;
  AffineHead(std::size_t out_dim, std::size_t in_dim) : weight(out_dim, in_dim), bias(out_dim, 0.0) {}

  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t out_dim() const noexcept { return weight.rows(); }
  std::size_t parameter_count() const noexcept { return weight.data().size() + bias.size(); }

  Vector apply(std::span<const double> x) const {
    Vector y(bias);
    for (std::size_t r = 0; r < out_dim(); ++r) {
      const auto w = weight.row(r);
      double acc = 0.0;
      for (std::size_t c = 0; c < w.size(); ++c) acc += w[c] * x[c];
      y[r] += acc;
    }
    return y;
  }

  friend bool operator==(const AffineHead&, const AffineHead&) = default;
};

struct ModelConfig {
  std::size_t image_dim = 0;    // input feature length for images
  std::size_t caption_dim = 0;  // input feature length for captions
  std::size_t joint_dim = 0;    // D
  CovarianceShape shape = CovarianceShape::kEllipsoidal;
  SimilarityMetric metric = SimilarityMetric::kNegWasserstein2;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Two modality heads, each split into a mean head and a log-variance head
/// with separate parameters.
struct ProbModel {
  ModelConfig config;
  AffineHead image_mean;
  AffineHead image_logvar;
  AffineHead caption_mean;
  AffineHead caption_logvar;
  double shared_logvar = 0.0;  // trained only under kSphericalOneValue

  std::size_t joint_dim() const noexcept { return config.joint_dim; }
  std::size_t input_dim(Modality m) const noexcept {
    return m == Modality::kImage ? config.image_dim : config.caption_dim;
  }
  const AffineHead& mean_head(Modality m) const { return m == Modality::kImage ? image_mean : caption_mean; }
  const AffineHead& logvar_head(Modality m) const {
    return m == Modality::kImage ? image_logvar : caption_logvar;
  }

  friend bool operator==(const ProbModel&, const ProbModel&) = default;
};

inline void validate(const ModelConfig& c) {
  require(c.image_dim > 0 && c.caption_dim > 0 && c.joint_dim > 0, ErrorKind::kConfig,
          "model dimensions must be positive");
}

/// Weights ~ U[-1/sqrt(in), 1/sqrt(in)], zero biases, shared log-variance 0.
inline ProbModel init_model(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  Rng rng(seed);
  ProbModel model{config,
                  AffineHead(config.joint_dim, config.image_dim),
                  AffineHead(config.joint_dim, config.image_dim),
                  AffineHead(config.joint_dim, config.caption_dim),
                  AffineHead(config.joint_dim, config.caption_dim),
                  0.0};
  for (AffineHead* head : {&model.image_mean, &model.image_logvar, &model.caption_mean, &model.caption_logvar}) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(head->in_dim()));
    for (double& w : head->weight.data()) w = rng.uniform(-bound, bound);
  }
  return model;
}

/// Scalar parameter count; the shared log-variance counts only when the
/// shape uses it.
inline std::size_t parameter_count(const ProbModel& model) {
  std::size_t n = model.image_mean.parameter_count() + model.image_logvar.parameter_count() +
                  model.caption_mean.parameter_count() + model.caption_logvar.parameter_count();
  if (model.config.shape == CovarianceShape::kSphericalOneValue) ++n;
  return n;
}

/// Flat parameter vector in checkpoint order: image mean (W row-major, b),
/// image log-var, caption mean, caption log-var, then the shared log-variance.
/// The trailing scalar is always present so layouts never depend on the shape.
inline std::size_t flat_size(const ProbModel& model) {
  return model.image_mean.parameter_count() + model.image_logvar.parameter_count() +
         model.caption_mean.parameter_count() + model.caption_logvar.parameter_count() + 1;
}

inline Vector flatten_parameters(const ProbModel& model) {
  Vector out;
  out.reserve(flat_size(model));
  for (const AffineHead* head : {&model.image_mean, &model.image_logvar, &model.caption_mean, &model.caption_logvar}) {
    out.insert(out.end(), head->weight.data().begin(), head->weight.data().end());
    out.insert(out.end(), head->bias.begin(), head->bias.end());
  }
  out.push_back(model.shared_logvar);
  return out;
}

inline void assign_parameters(ProbModel& model, std::span<const double> flat) {
  require_same_size(flat.size(), flat_size(model), "parameter vector");
  std::size_t pos = 0;
  for (AffineHead* head : {&model.image_mean, &model.image_logvar, &model.caption_mean, &model.caption_logvar}) {
    for (double& w : head->weight.data()) w = flat[pos++];
    for (double& b : head->bias) b = flat[pos++];
  }
  model.shared_logvar = flat[pos];
}

/// Offsets of each block inside the flat parameter vector.
struct ParameterLayout {
  std::size_t mean_offset;
  std::size_t logvar_offset;
  std::size_t shared_offset;
};

inline ParameterLayout layout_for(const ProbModel& model, Modality m) {
  const std::size_t image_block = model.image_mean.parameter_count();
  const std::size_t caption_block = model.caption_mean.parameter_count();
  const std::size_t shared = 2 * image_block + 2 * caption_block;
  if (m == Modality::kImage) return {0, image_block, shared};
  return {2 * image_block, 2 * image_block + caption_block, shared};
}

/// Head outputs before shaping and clamping.
struct RawEmbedding {
  Vector mean;
  Vector log_var;
};

inline RawEmbedding embed_raw(const ProbModel& model, Modality modality, std::span<const double> feature) {
  require_same_size(feature.size(), model.input_dim(modality), std::string(to_string(modality)) + " feature");
  require(all_finite(feature), ErrorKind::kInvalidInput, "feature has non-finite components");
  return {model.mean_head(modality).apply(feature), model.logvar_head(modality).apply(feature)};
}

/// Affine heads, then variance clamping and the configured covariance shape.
inline GaussianEmbedding finish_embedding(const ProbModel& model, RawEmbedding raw) {
  GaussianEmbedding e = clamp_variance(GaussianEmbedding(std::move(raw.mean), std::move(raw.log_var)));
  return clamp_variance(apply_shape(e, model.config.shape, model.shared_logvar));
}

inline GaussianEmbedding embed(const ProbModel& model, Modality modality, std::span<const double> feature) {
  return finish_embedding(model, embed_raw(model, modality, feature));
}

/// Accumulates dLoss/dparams into `grad` (flat layout) given the upstream
/// gradient w.r.t. the finished embedding's mean and log-variance.
/// Clamped coordinates pass no gradient.
inline void embed_backward(const ProbModel& model, Modality modality, std::span<const double> feature,
                           std::span<const double> d_mean, std::span<const double> d_logvar,
                           std::span<double> grad) {
  const RawEmbedding raw = embed_raw(model, modality, feature);
  const std::size_t dim = model.joint_dim();
  const std::size_t in = feature.size();
  const ParameterLayout layout = layout_for(model, modality);

  // Mean head.
  for (std::size_t r = 0; r < dim; ++r) {
    if (d_mean[r] == 0.0) continue;
    double* w = grad.data() + layout.mean_offset + r * in;
    for (std::size_t c = 0; c < in; ++c) w[c] += d_mean[r] * feature[c];
    grad[layout.mean_offset + dim * in + r] += d_mean[r];
  }

  auto inside = [](double lv) { return lv >= kMinLogVariance && lv <= kMaxLogVariance; };

  // Gradient w.r.t. the raw (pre-clamp) log-variance head outputs.
  Vector d_raw(dim, 0.0);
  switch (model.config.shape) {
    case CovarianceShape::kEllipsoidal:
      for (std::size_t d = 0; d < dim; ++d) {
        if (inside(raw.log_var[d])) d_raw[d] = d_logvar[d];
      }
      break;
    case CovarianceShape::kSphericalAvgPool: {
      // out = ln(mean_k exp(clamp(lv_k))), identical in every dimension.
      double upstream = 0.0;
      for (std::size_t d = 0; d < dim; ++d) upstream += d_logvar[d];
      Vector clamped(dim);
      for (std::size_t d = 0; d < dim; ++d) clamped[d] = clamp_log_variance(raw.log_var[d]);
      const double pooled = log_mean_variance(clamped);
      for (std::size_t d = 0; d < dim; ++d) {
        if (!inside(raw.log_var[d])) continue;
        d_raw[d] = upstream * std::exp(clamped[d] - pooled) / static_cast<double>(dim);
      }
      break;
    }
    case CovarianceShape::kSphericalOneValue: {
      if (inside(model.shared_logvar)) {
        double upstream = 0.0;
        for (std::size_t d = 0; d < dim; ++d) upstream += d_logvar[d];
        grad[layout.shared_offset] += upstream;
      }
      return;
    }
  }

  for (std::size_t r = 0; r < dim; ++r) {
    if (d_raw[r] == 0.0) continue;
    double* w = grad.data() + layout.logvar_offset + r * in;
    for (std::size_t c = 0; c < in; ++c) w[c] += d_raw[r] * feature[c];
    grad[layout.logvar_offset + dim * in + r] += d_raw[r];
  }
}

// Checkpoint file:
//   "PEMB" | u32 version | u64 image_dim | u64 caption_dim | u64 joint_dim |
//   u32 shape | u32 metric | f64 parameters in flatten_parameters() order
// All integers and floats little-endian. Version 1 of the PEMB container is
// the feature-matrix format, so checkpoints use version 2.
inline constexpr std::string_view kMagic = "PEMB";
inline constexpr std::uint32_t kCheckpointVersion = 2;

inline std::string encode_checkpoint(const ProbModel& model) {
  ByteWriter w;
  w.bytes(kMagic);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.uint<std::uint64_t>(model.config.image_dim);
  w.uint<std::uint64_t>(model.config.caption_dim);
  w.uint<std::uint64_t>(model.config.joint_dim);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(model.config.shape));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(model.config.metric));
  for (double p : flatten_parameters(model)) w.f64(p);
  return w.buffer();
}

inline ProbModel decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  r.expect_bytes(kMagic, "magic");
  const auto version_at = r.offset();
  if (r.uint<std::uint32_t>("version") != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version", version_at);
  }
  ModelConfig config;
  const auto dims_at = r.offset();
  config.image_dim = r.uint<std::uint64_t>("image_dim");
  config.caption_dim = r.uint<std::uint64_t>("caption_dim");
  config.joint_dim = r.uint<std::uint64_t>("joint_dim");
  constexpr std::uint64_t kMaxDim = 1u << 20;
  if (config.image_dim == 0 || config.caption_dim == 0 || config.joint_dim == 0 || config.image_dim > kMaxDim ||
      config.caption_dim > kMaxDim || config.joint_dim > kMaxDim) {
    throw FormatError("invalid dimensions", dims_at);
  }
  const auto shape_at = r.offset();
  const auto shape = r.uint<std::uint32_t>("shape");
  if (shape > static_cast<std::uint32_t>(CovarianceShape::kSphericalOneValue)) {
    throw FormatError("unknown shape tag", shape_at);
  }
  const auto metric_at = r.offset();
  const auto metric = r.uint<std::uint32_t>("metric");
  if (metric > static_cast<std::uint32_t>(SimilarityMetric::kNegWasserstein2)) {
    throw FormatError("unknown metric tag", metric_at);
  }
  config.shape = static_cast<CovarianceShape>(shape);
  config.metric = static_cast<SimilarityMetric>(metric);

  ProbModel model = init_model(config, 0);
  const std::size_t n = flat_size(model);
  r.need(static_cast<std::uint64_t>(n) * 8, "parameters");
  Vector flat(n);
  for (double& p : flat) {
    const auto at = r.offset();
    p = r.f64("parameter");
    if (!std::isfinite(p)) throw FormatError("non-finite parameter", at);
  }
  r.expect_end();
  assign_parameters(model, flat);
  return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const ProbModel& model) {
  write_file_atomic(path, encode_checkpoint(model));
}

inline ProbModel load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace probemb
