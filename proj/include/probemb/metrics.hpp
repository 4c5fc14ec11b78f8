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
#include <optional>
#include <span>
#include <string_view>

#include "probemb/gaussian.hpp"
#include "probemb/linalg.hpp"
#include "probemb/parallel.hpp"

namespace probemb {

/// Similarity between an image distribution and a caption distribution.
/// Every variant is <= 0 and equals 0 only for identical distributions.
enum class SimilarityMetric : std::uint32_t {
  kNegKLImageToCaption = 0,  // -KL(image || caption)
  kNegKLCaptionToImage = 1,  // -KL(caption || image)
  kNegMinKL = 2,             // -min of both directions
  kNegWasserstein2 = 3,      // -W2, diagonal closed form
};

inline constexpr SimilarityMetric kAllMetrics[] = {
    SimilarityMetric::kNegKLImageToCaption, SimilarityMetric::kNegKLCaptionToImage,
    SimilarityMetric::kNegMinKL, SimilarityMetric::kNegWasserstein2};

inline std::string_view to_string(SimilarityMetric m) {
  switch (m) {
    case SimilarityMetric::kNegKLImageToCaption: return "neg-kl-i2c";
    case SimilarityMetric::kNegKLCaptionToImage: return "neg-kl-c2i";
    case SimilarityMetric::kNegMinKL: return "neg-min-kl";
    case SimilarityMetric::kNegWasserstein2: return "neg-wasserstein2";
  }
  return "?";
}

inline std::optional<SimilarityMetric> parse_metric(std::string_view name) {
  for (auto m : kAllMetrics) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

/// Partial derivatives of a similarity w.r.t. (mean, log_var) of both arguments.
struct SimilarityGradient {
  Vector d_mean_a;
  Vector d_logvar_a;
  Vector d_mean_b;
  Vector d_logvar_b;

  explicit SimilarityGradient(std::size_t dim = 0)
      : d_mean_a(dim, 0.0), d_logvar_a(dim, 0.0), d_mean_b(dim, 0.0), d_logvar_b(dim, 0.0) {}
};

namespace detail {

inline void check_pair(const GaussianEmbedding& a, const GaussianEmbedding& b) {
  require_same_size(a.dim(), b.dim(), "embedding dimension");
}

}  // namespace detail

/// KL(p || q) for diagonal Gaussians:
///   1/2 sum_d [ vp/vq - ln(vp/vq) + (mp - mq)^2 / vq - 1 ].
inline double kl_diag(const GaussianEmbedding& p, const GaussianEmbedding& q) {
  detail::check_pair(p, q);
  const double* mp = p.mean().data();
  const double* mq = q.mean().data();
  const double* lp = p.log_var().data();
  const double* lq = q.log_var().data();
  const double* vp = p.variances().data();
  const double* vq = q.variances().data();
  double acc = 0.0;
  for (std::size_t d = 0; d < p.dim(); ++d) {
    const double diff = mp[d] - mq[d];
    acc += vp[d] / vq[d] - (lp[d] - lq[d]) + diff * diff / vq[d] - 1.0;
  }
  // Rounding can leave a tiny negative residue when p and q nearly coincide.
  return std::max(0.0, 0.5 * acc);
}

/// Gradient of KL(p || q); the p-part goes to (d_mean_a, d_logvar_a).
inline SimilarityGradient kl_diag_gradient(const GaussianEmbedding& p, const GaussianEmbedding& q) {
  detail::check_pair(p, q);
  SimilarityGradient g(p.dim());
  for (std::size_t d = 0; d < p.dim(); ++d) {
    const double inv_vq = 1.0 / q.variances()[d];
    const double ratio = p.variances()[d] / q.variances()[d];
    const double diff = p.mean()[d] - q.mean()[d];
    g.d_mean_a[d] = diff * inv_vq;
    g.d_mean_b[d] = -diff * inv_vq;
    g.d_logvar_a[d] = 0.5 * (ratio - 1.0);
    g.d_logvar_b[d] = 0.5 * (1.0 - ratio - diff * diff * inv_vq);
  }
  return g;
}

/// Squared 2-Wasserstein distance for diagonal covariances, with standard
/// deviations s = exp(log_var / 2): |mi - mc|^2 + |si - sc|^2. Written so that
/// swapping the arguments yields the identical floating-point result.
inline double wasserstein2_squared(const GaussianEmbedding& a, const GaussianEmbedding& b) {
  detail::check_pair(a, b);
  const double* ma = a.mean().data();
  const double* mb = b.mean().data();
  const double* sa = a.stddevs().data();
  const double* sb = b.stddevs().data();
  double mean_term = 0.0;
  double std_term = 0.0;
  for (std::size_t d = 0; d < a.dim(); ++d) {
    const double dm = ma[d] - mb[d];
    const double ds = sa[d] - sb[d];
    mean_term += dm * dm;
    std_term += ds * ds;
  }
  return mean_term + std_term;
}

/// sim(image, caption) for the chosen metric.
inline double similarity(SimilarityMetric m, const GaussianEmbedding& image,
                         const GaussianEmbedding& caption) {
  switch (m) {
    case SimilarityMetric::kNegKLImageToCaption:
      return -kl_diag(image, caption);
    case SimilarityMetric::kNegKLCaptionToImage:
      return -kl_diag(caption, image);
    case SimilarityMetric::kNegMinKL:
      return -std::min(kl_diag(image, caption), kl_diag(caption, image));
    case SimilarityMetric::kNegWasserstein2:
      return -std::sqrt(wasserstein2_squared(image, caption));
  }
  fail(ErrorKind::kConfig, "unknown similarity metric");
}

namespace detail {

inline SimilarityGradient swapped(SimilarityGradient g) {
  std::swap(g.d_mean_a, g.d_mean_b);
  std::swap(g.d_logvar_a, g.d_logvar_b);
  return g;
}

inline SimilarityGradient negated(SimilarityGradient g) {
  for (Vector* v : {&g.d_mean_a, &g.d_logvar_a, &g.d_mean_b, &g.d_logvar_b}) {
    for (double& x : *v) x = -x;
  }
  return g;
}

}  // namespace detail

/// Analytic partials of similarity(m, image, caption). The `a` fields refer to
/// the image argument, the `b` fields to the caption argument.
///
/// For kNegMinKL the smaller KL direction is differentiated; on an exact tie
/// the image->caption direction is used. For kNegWasserstein2 at distance
/// zero the gradient is defined as zero.
inline SimilarityGradient similarity_gradient(SimilarityMetric m, const GaussianEmbedding& image,
                                              const GaussianEmbedding& caption) {
  detail::check_pair(image, caption);
  switch (m) {
    case SimilarityMetric::kNegKLImageToCaption:
      return detail::negated(kl_diag_gradient(image, caption));
    case SimilarityMetric::kNegKLCaptionToImage:
      return detail::negated(detail::swapped(kl_diag_gradient(caption, image)));
    case SimilarityMetric::kNegMinKL: {
      if (kl_diag(image, caption) <= kl_diag(caption, image)) {
        return detail::negated(kl_diag_gradient(image, caption));
      }
      return detail::negated(detail::swapped(kl_diag_gradient(caption, image)));
    }
    case SimilarityMetric::kNegWasserstein2: {
      SimilarityGradient g(image.dim());
      const double dist = std::sqrt(wasserstein2_squared(image, caption));
      if (dist == 0.0) return g;
      for (std::size_t d = 0; d < image.dim(); ++d) {
        const double si = image.stddevs()[d];
        const double sc = caption.stddevs()[d];
        const double dm = image.mean()[d] - caption.mean()[d];
        const double ds = si - sc;
        g.d_mean_a[d] = -dm / dist;
        g.d_mean_b[d] = dm / dist;
        g.d_logvar_a[d] = -0.5 * ds * si / dist;
        g.d_logvar_b[d] = 0.5 * ds * sc / dist;
      }
      return g;
    }
  }
  fail(ErrorKind::kConfig, "unknown similarity metric");
}

/// Scores every (image, caption) pair. Entry (j, k) is exactly
/// similarity(m, images[j], captions[k]); rows may be computed in parallel.
inline Matrix similarity_matrix(SimilarityMetric m, std::span<const GaussianEmbedding> images,
                                std::span<const GaussianEmbedding> captions) {
  if (images.empty() || captions.empty()) return Matrix(images.size(), captions.size());
  const std::size_t dim = images.front().dim();
  for (const auto& e : images) require_same_size(e.dim(), dim, "image embedding dimension");
  for (const auto& e : captions) require_same_size(e.dim(), dim, "caption embedding dimension");
  Matrix out(images.size(), captions.size());
  parallel_for(images.size(), [&](std::size_t j) {
    for (std::size_t k = 0; k < captions.size(); ++k) out(j, k) = similarity(m, images[j], captions[k]);
  });
  return out;
}

}  // namespace probemb
