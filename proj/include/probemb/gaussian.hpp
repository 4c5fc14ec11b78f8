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
#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "probemb/error.hpp"
#include "probemb/linalg.hpp"

namespace probemb {

/// Variance bounds applied to every embedding dimension.
inline constexpr double kMinVariance = 0.1;
inline constexpr double kMaxVariance = 10.0;
inline const double kMinLogVariance = std::log(kMinVariance);
inline const double kMaxLogVariance = std::log(kMaxVariance);

/// A diagonal Gaussian in the joint space. The covariance is kept as
/// per-dimension log-variances; every formula consumes exp(log_var).
class GaussianEmbedding {
 public:
  GaussianEmbedding() = default;
  GaussianEmbedding(Vector mean, Vector log_var) : mean_(std::move(mean)), log_var_(std::move(log_var)) {
    require(!mean_.empty(), ErrorKind::kShape, "embedding dimension must be >= 1");
    require_same_size(mean_.size(), log_var_.size(), "mean/log_var");
    variance_.resize(dim());
    stddev_.resize(dim());
    for (std::size_t d = 0; d < dim(); ++d) {
      variance_[d] = std::exp(log_var_[d]);
      stddev_[d] = std::exp(0.5 * log_var_[d]);
    }
  }

  /// Unit-variance embedding centred at `mean`.
  static GaussianEmbedding standard(Vector mean) {
    Vector lv(mean.size(), 0.0);
    return {std::move(mean), std::move(lv)};
  }

  std::size_t dim() const noexcept { return mean_.size(); }
  const Vector& mean() const noexcept { return mean_; }
  const Vector& log_var() const noexcept { return log_var_; }
  double variance(std::size_t d) const { return variance_[d]; }

  // exp(log_var) and exp(log_var / 2), cached at construction.
  const Vector& variances() const noexcept { return variance_; }
  const Vector& stddevs() const noexcept { return stddev_; }

  bool is_finite() const { return all_finite(mean_) && all_finite(log_var_); }

  friend bool operator==(const GaussianEmbedding&, const GaussianEmbedding&) = default;

 private:
  Vector mean_;
  Vector log_var_;
  Vector variance_;
  Vector stddev_;
};

enum class CovarianceShape : std::uint32_t {
  kEllipsoidal = 0,
  kSphericalAvgPool = 1,
  kSphericalOneValue = 2,
};

inline constexpr CovarianceShape kAllShapes[] = {CovarianceShape::kEllipsoidal,
                                                 CovarianceShape::kSphericalAvgPool,
                                                 CovarianceShape::kSphericalOneValue};

inline std::string_view to_string(CovarianceShape s) {
  switch (s) {
    case CovarianceShape::kEllipsoidal: return "ellipsoidal";
    case CovarianceShape::kSphericalAvgPool: return "spherical-avgpool";
    case CovarianceShape::kSphericalOneValue: return "spherical-one-value";
  }
  return "?";
}

inline std::optional<CovarianceShape> parse_shape(std::string_view name) {
  for (auto s : kAllShapes) {
    if (to_string(s) == name) return s;
  }
  return std::nullopt;
}

inline double clamp_log_variance(double lv) {
  return std::clamp(lv, kMinLogVariance, kMaxLogVariance);
}

inline GaussianEmbedding clamp_variance(const GaussianEmbedding& e) {
  require(e.is_finite(), ErrorKind::kInvalidInput, "embedding has non-finite components");
  Vector lv = e.log_var();
  for (double& x : lv) x = clamp_log_variance(x);
  return {e.mean(), std::move(lv)};
}

/// ln of the arithmetic mean of exp(log_var). Shifted by the max for stability.
inline double log_mean_variance(std::span<const double> log_var) {
  const double top = *std::max_element(log_var.begin(), log_var.end());
  double acc = 0.0;
  for (double lv : log_var) acc += std::exp(lv - top);
  return top + std::log(acc / static_cast<double>(log_var.size()));
}

/// Reduces the covariance to the requested shape. `one_value` is the shared
/// log-variance and is only consulted for kSphericalOneValue.
inline GaussianEmbedding apply_shape(const GaussianEmbedding& e, CovarianceShape shape,
                                     std::optional<double> one_value = std::nullopt) {
  require(e.is_finite(), ErrorKind::kInvalidInput, "embedding has non-finite components");
  switch (shape) {
    case CovarianceShape::kEllipsoidal:
      return e;
    case CovarianceShape::kSphericalAvgPool: {
      Vector lv(e.dim(), log_mean_variance(e.log_var()));
      return {e.mean(), std::move(lv)};
    }
    case CovarianceShape::kSphericalOneValue: {
      require(one_value.has_value() && std::isfinite(*one_value), ErrorKind::kInvalidInput,
              "spherical-one-value needs a finite shared log-variance");
      Vector lv(e.dim(), clamp_log_variance(*one_value));
      return {e.mean(), std::move(lv)};
    }
  }
  fail(ErrorKind::kConfig, "unknown covariance shape");
}

/// log det of the diagonal covariance: the per-instance uncertainty.
inline double uncertainty(const GaussianEmbedding& e) {
  return std::accumulate(e.log_var().begin(), e.log_var().end(), 0.0);
}

}  // namespace probemb
