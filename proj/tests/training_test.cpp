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


#include "probemb/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include <gtest/gtest.h>

#include "gradient_check.hpp"
#include "probemb/synthetic.hpp"
#include "test_support.hpp"

namespace probemb {
namespace {

using testing::random_matrix;

// Reference loss written straight from the definition: for every positive,
// the largest similarity over the other captions of its row and the other
// images of its column, each hinged against the positive.
double brute_force_loss(const Matrix& s, double margin) {
  const std::size_t b = s.rows();
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double row = -INFINITY, col = -INFINITY;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      row = std::max(row, s(i, j));
      col = std::max(col, s(j, i));
    }
    loss += std::max(0.0, margin + row - s(i, i));
    loss += std::max(0.0, margin + col - s(i, i));
  }
  return loss;
}

Matrix dyadic_matrix(Rng& rng, std::size_t b) {
  Matrix m(b, b);
  for (double& x : m.data()) x = static_cast<double>(rng.between(-64, 64)) / 64.0;
  return m;
}

TEST(TrainConfig, Defaults) {
  const TrainConfig c;
  EXPECT_EQ(c.margin, 0.2);
  EXPECT_EQ(c.epochs, 30u);
  EXPECT_EQ(c.batch_size, 128u);
  EXPECT_EQ(c.learning_rate, 2e-4);
  EXPECT_EQ(c.decay_epoch, 15u);
  EXPECT_EQ(c.decay_factor, 10.0);
  EXPECT_NO_THROW(validate(c));
}

TEST(TrainConfig, RejectsInvalid) {
  auto rejects = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    try {
      validate(c);
    } catch (const Error& e) {
      return e.kind() == ErrorKind::kConfig;
    }
    return false;
  };
  EXPECT_TRUE(rejects([](TrainConfig& c) { c.margin = 0.0; }));
  EXPECT_TRUE(rejects([](TrainConfig& c) { c.batch_size = 1; }));
  EXPECT_TRUE(rejects([](TrainConfig& c) { c.decay_epoch = 31; }));
  EXPECT_TRUE(rejects([](TrainConfig& c) { c.learning_rate = -1.0; }));
  EXPECT_TRUE(rejects([](TrainConfig& c) { c.adam_beta2 = 1.0; }));
}

TEST(LearningRate, StepSchedule) {
  const TrainConfig c;
  EXPECT_EQ(learning_rate_at(c, 0), 2e-4);
  EXPECT_EQ(learning_rate_at(c, 14), 2e-4);
  EXPECT_NEAR(learning_rate_at(c, 15), 2e-5, 1e-20);
  EXPECT_NEAR(learning_rate_at(c, 29), 2e-5, 1e-20);
}

TEST(TripletLoss, Examples) {
  Matrix s(2, 2);
  s(0, 1) = -1.0;
  s(1, 0) = -1.0;
  EXPECT_EQ(triplet_loss(s, 0.2).loss, 0.0);
  EXPECT_NEAR(triplet_loss(Matrix(2, 2), 0.2).loss, 0.8, 1e-15);
}

TEST(TripletLoss, Errors) {
  EXPECT_THROW(triplet_loss(Matrix(2, 3), 0.2), Error);
  EXPECT_THROW(triplet_loss(Matrix(1, 1), 0.2), Error);
  Matrix s(2, 2);
  s(0, 1) = NAN;
  EXPECT_THROW(triplet_loss(s, 0.2), Error);
}

TEST(TripletLoss, MatchesBruteForceExactlyOnDyadicGrid) {
  Rng rng(1);
  for (std::size_t b = 2; b <= 8; ++b) {
    for (int trial = 0; trial < 500; ++trial) {
      const Matrix s = dyadic_matrix(rng, b);
      EXPECT_EQ(triplet_loss(s, 0.25).loss, brute_force_loss(s, 0.25));
    }
  }
}

TEST(TripletLoss, MatchesBruteForceOnRandomDoubles) {
  Rng rng(2);
  for (std::size_t b = 2; b <= 8; ++b) {
    for (int trial = 0; trial < 500; ++trial) {
      const Matrix s = random_matrix(rng, b, b, -3.0, 3.0);
      const double margin = rng.uniform(0.01, 1.0);
      EXPECT_NEAR(triplet_loss(s, margin).loss, brute_force_loss(s, margin), 1e-12);
    }
  }
}

TEST(TripletLoss, ShiftInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t b = 2 + trial % 7;
    Matrix s = dyadic_matrix(rng, b);
    const double before = triplet_loss(s, 0.25).loss;
    const double shift = static_cast<double>(rng.between(-256, 256)) / 16.0;
    for (double& x : s.data()) x += shift;
    EXPECT_EQ(triplet_loss(s, 0.25).loss, before);

    Matrix r = random_matrix(rng, b, b, -3.0, 3.0);
    const double r_before = triplet_loss(r, 0.2).loss;
    const double r_shift = rng.uniform(-5.0, 5.0);
    for (double& x : r.data()) x += r_shift;
    EXPECT_NEAR(triplet_loss(r, 0.2).loss, r_before, 1e-12);
  }
}

TEST(TripletLoss, ZeroExactlyWhenEveryPositiveClearsTheMargin) {
  Rng rng(4);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t b = 2 + trial % 5;
    Matrix s = dyadic_matrix(rng, b);
    for (std::size_t i = 0; i < b; ++i) s(i, i) += static_cast<double>(rng.between(0, 3)) * 0.5;
    bool separated = true;
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < b; ++j) {
        if (j != i && (s(i, i) < s(i, j) + 0.25 || s(i, i) < s(j, i) + 0.25)) separated = false;
      }
    }
    EXPECT_EQ(triplet_loss(s, 0.25).loss == 0.0, separated);
  }
}

TEST(TripletLoss, TiesPickLowestIndex) {
  Matrix s(4, 4);
  for (double& x : s.data()) x = -1.0;
  for (std::size_t i = 0; i < 4; ++i) s(i, i) = 0.0;
  s(0, 2) = 0.5;
  s(0, 3) = 0.5;
  s(1, 0) = 0.5;
  s(3, 0) = 0.5;
  const TripletLoss tl = triplet_loss(s, 0.2);
  EXPECT_EQ(tl.caption_negatives[0].index, 2u);
  EXPECT_EQ(tl.image_negatives[0].index, 1u);
  EXPECT_EQ(tl.caption_negatives[1].index, 0u);
  EXPECT_NEAR(tl.caption_negatives[0].hinge, 0.7, 1e-15);
  EXPECT_FALSE(tl.caption_negatives[2].active());
}

TEST(TripletLossGradient, MatchesFiniteDifferencesOnSimilarities) {
  Rng rng(5);
  int checked = 0;
  while (checked < 200) {
    const std::size_t b = 2 + checked % 6;
    Matrix s = random_matrix(rng, b, b, -2.0, 2.0);
    const TripletLoss tl = triplet_loss(s, 0.3);
    bool near_kink = false;
    for (std::size_t i = 0; i < b; ++i) {
      if (std::abs(tl.caption_negatives[i].hinge) < 1e-3 && s(i, tl.caption_negatives[i].index) + 0.3 - s(i, i) > -1e-3)
        near_kink = true;
      if (std::abs(tl.image_negatives[i].hinge) < 1e-3 && s(tl.image_negatives[i].index, i) + 0.3 - s(i, i) > -1e-3)
        near_kink = true;
    }
    if (near_kink) continue;
    const Matrix g = triplet_loss_gradient(tl);
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t c = 0; c < b; ++c) {
        const double orig = s(r, c);
        s(r, c) = orig + 1e-7;
        const double up = triplet_loss(s, 0.3).loss;
        s(r, c) = orig - 1e-7;
        const double down = triplet_loss(s, 0.3).loss;
        s(r, c) = orig;
        const double fd = (up - down) / 2e-7;
        EXPECT_NEAR(g(r, c), fd, 1e-6);
      }
    }
    ++checked;
  }
}

struct GradientCase {
  SimilarityMetric metric;
  CovarianceShape shape;
};

class BatchGradientCheck : public ::testing::TestWithParam<GradientCase> {};

TEST_P(BatchGradientCheck, MatchesCentralDifferences) {
  const auto [metric, shape] = GetParam();
  Rng rng(50 + 10 * static_cast<std::uint64_t>(metric) + static_cast<std::uint64_t>(shape));
  int checked = 0;
  while (checked < 25) {
    const auto p = testing::random_batch_problem(rng, metric, shape);
    if (!testing::is_smooth(p, 1e-3)) continue;
    const BatchGradient bg = batch_gradient(p.model, p.batch, p.margin);
    EXPECT_EQ(bg.loss, batch_loss(p.model, p.batch, p.margin));
    EXPECT_LE(testing::vector_relative_error(bg.grad, testing::numeric_batch_gradient(p)), 1e-4);
    ++checked;
  }
}

std::vector<GradientCase> all_gradient_cases() {
  std::vector<GradientCase> out;
  for (auto m : kAllMetrics) {
    for (auto s : kAllShapes) out.push_back({m, s});
  }
  return out;
}

INSTANTIATE_TEST_SUITE_P(AllMetricsAndShapes, BatchGradientCheck, ::testing::ValuesIn(all_gradient_cases()),
                         [](const auto& info) {
                           std::string name = std::string(to_string(info.param.metric)) + "_" +
                                              std::string(to_string(info.param.shape));
                           std::erase(name, '-');
                           return name;
                         });

TEST(BatchGradient, ZeroLossGivesZeroGradient) {
  // Identity mean heads over well separated one-hot features: every negative
  // sits 10 * sqrt(2) below its positive.
  ProbModel model = init_model({4, 4, 4, CovarianceShape::kEllipsoidal, SimilarityMetric::kNegWasserstein2}, 0);
  for (AffineHead* h : {&model.image_mean, &model.caption_mean}) {
    std::fill(h->weight.data().begin(), h->weight.data().end(), 0.0);
    for (std::size_t d = 0; d < 4; ++d) h->weight(d, d) = 1.0;
  }
  Batch batch{Matrix(4, 4), Matrix(4, 4)};
  for (std::size_t i = 0; i < 4; ++i) {
    batch.image_features(i, i) = 10.0;
    batch.caption_features(i, i) = 10.0;
  }
  const BatchGradient bg = batch_gradient(model, batch, 0.2);
  EXPECT_EQ(bg.loss, 0.0);
  for (double g : bg.grad) EXPECT_EQ(g, 0.0);
}

TEST(BatchGradient, PermutingPairsKeepsLossAndGradient) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = testing::random_batch_problem(rng, kAllMetrics[trial % 4], CovarianceShape::kEllipsoidal, 6);
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span(perm));
    Batch shuffled{Matrix(6, 6), Matrix(6, 6)};
    for (std::size_t r = 0; r < 6; ++r) {
      for (std::size_t c = 0; c < 6; ++c) {
        shuffled.image_features(r, c) = p.batch.image_features(perm[r], c);
        shuffled.caption_features(r, c) = p.batch.caption_features(perm[r], c);
      }
    }
    const BatchGradient a = batch_gradient(p.model, p.batch, p.margin);
    const BatchGradient b = batch_gradient(p.model, shuffled, p.margin);
    EXPECT_NEAR(a.loss, b.loss, 1e-12);
    for (std::size_t k = 0; k < a.grad.size(); ++k) EXPECT_NEAR(a.grad[k], b.grad[k], 1e-12);
  }
}

TEST(EmbedBackward, TouchesOnlyItsModality) {
  Rng rng(7);
  const ProbModel model = init_model({5, 3, 4, CovarianceShape::kEllipsoidal, SimilarityMetric::kNegWasserstein2}, 1);
  Vector grad(flat_size(model), 0.0);
  const Vector feature{0.1, -0.2, 0.3};
  embed_backward(model, Modality::kCaption, feature, Vector(4, 1.0), Vector(4, 1.0), grad);
  const auto image = layout_for(model, Modality::kImage);
  const std::size_t image_params = model.image_mean.parameter_count() + model.image_logvar.parameter_count();
  for (std::size_t k = image.mean_offset; k < image.mean_offset + image_params; ++k) EXPECT_EQ(grad[k], 0.0);
  EXPECT_EQ(grad.back(), 0.0);
  EXPECT_NE(std::count(grad.begin(), grad.end(), 0.0), static_cast<std::ptrdiff_t>(grad.size()));
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Vector params{1.0, -2.0, 3.0};
  const Vector before = params;
  AdamState state(3);
  adam_step(params, Vector(3, 0.0), state, 2e-4, 0.9, 0.999, 1e-8);
  EXPECT_EQ(params, before);
  EXPECT_EQ(state.t, 1u);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  Rng rng(8);
  Vector params(50), grads(50);
  for (double& g : grads) g = rng.uniform(-1.0, 1.0);
  for (double& p : params) p = rng.uniform(-1.0, 1.0);
  const Vector before = params;
  AdamState state(50);
  adam_step(params, grads, state, 2e-4, 0.9, 0.999, 1e-8);
  for (std::size_t k = 0; k < 50; ++k) {
    EXPECT_NEAR(before[k] - params[k], 2e-4 * (grads[k] > 0 ? 1.0 : -1.0), 1e-9);
  }
}

TEST(Adam, TwoStepsMatchScalarRecurrence) {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Vector params{0.5};
  AdamState state(1);
  double p = 0.5, m = 0.0, v = 0.0;
  const double gs[] = {0.3, -0.7};
  for (int t = 1; t <= 2; ++t) {
    const double g = gs[t - 1];
    adam_step(params, Vector{g}, state, lr, b1, b2, eps);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    p -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(params[0], p, 1e-15);
  }
}

TEST(Adam, RejectsSizeMismatch) {
  Vector params(3);
  AdamState state(3);
  EXPECT_THROW(adam_step(params, Vector(2), state, 0.1, 0.9, 0.999, 1e-8), Error);
}

SyntheticData small_data(std::uint64_t seed = 0) {
  SyntheticSpec spec;
  spec.feature_dim = 16;
  spec.vocabulary = 8;
  spec.train_images = 60;
  spec.val_images = 20;
  spec.test_images = 20;
  spec.seed = seed;
  return generate_synthetic(spec);
}

ModelConfig small_model_config(SimilarityMetric metric = SimilarityMetric::kNegWasserstein2) {
  return {16, 16, 8, CovarianceShape::kEllipsoidal, metric};
}

double mean_pair_loss(const ProbModel& model, const FeatureDataset& ds, double margin) {
  const auto c2i = ds.caption_to_image();
  std::vector<std::size_t> ids(ds.num_captions());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  double total = 0.0;
  for (std::size_t start = 0; start < ids.size(); start += 32) {
    const std::size_t n = std::min<std::size_t>(32, ids.size() - start);
    if (n < 2) break;
    total += batch_loss(model, gather_batch(ds, std::span(ids).subspan(start, n), c2i), margin);
  }
  return total / static_cast<double>(ids.size());
}

TEST(Train, ZeroEpochsReturnsInitialModel) {
  const auto data = small_data();
  const ProbModel init = init_model(small_model_config(), 3);
  TrainConfig config;
  config.epochs = 0;
  config.decay_epoch = 0;
  const TrainResult r = train(init, data.train.dataset, data.val.dataset, config);
  EXPECT_EQ(r.best, init);
  EXPECT_TRUE(r.history.epoch_loss.empty());
  EXPECT_FALSE(r.history.selected_epoch.has_value());
}

TEST(Train, LossDecreases) {
  const auto data = small_data();
  const ProbModel init = init_model(small_model_config(), 3);
  TrainConfig config;
  config.epochs = 20;
  config.decay_epoch = 20;
  config.batch_size = 32;
  config.learning_rate = 1e-2;
  const TrainResult r = train(init, data.train.dataset, data.val.dataset, config);
  ASSERT_EQ(r.history.epoch_loss.size(), 20u);
  ASSERT_EQ(r.history.val_rsum.size(), 20u);
  EXPECT_LT(r.history.epoch_loss.back(), r.history.epoch_loss.front());
  EXPECT_LT(mean_pair_loss(r.best, data.train.dataset, 0.2), mean_pair_loss(init, data.train.dataset, 0.2));
}

TEST(Train, SelectsEarliestBestValidationEpoch) {
  const auto data = small_data(1);
  TrainConfig config;
  config.epochs = 6;
  config.decay_epoch = 3;
  config.batch_size = 16;
  config.learning_rate = 5e-3;
  std::vector<double> seen;
  TrainOptions options;
  options.on_epoch = [&](std::size_t, double, double rsum) { seen.push_back(rsum); };
  const TrainResult r =
      train(init_model(small_model_config(), 2), data.train.dataset, data.val.dataset, config, options);
  EXPECT_EQ(seen, r.history.val_rsum);
  const auto best = std::max_element(seen.begin(), seen.end());
  EXPECT_EQ(*r.history.selected_epoch, static_cast<std::size_t>(best - seen.begin()));
  EXPECT_NEAR(validation_rsum(r.best, data.val.dataset), *best, 1e-9);
}

TEST(Train, DeterministicAcrossRunsAndWorkerCounts) {
  const auto data = small_data(2);
  TrainConfig config;
  config.epochs = 3;
  config.decay_epoch = 2;
  config.batch_size = 16;
  config.seed = 9;
  auto run = [&](const char* threads) {
    setenv("PROBEMB_THREADS", threads, 1);
    const TrainResult r = train(init_model(small_model_config(SimilarityMetric::kNegMinKL), 4), data.train.dataset,
                                data.val.dataset, config);
    unsetenv("PROBEMB_THREADS");
    return encode_checkpoint(r.best) + history_json(r.history);
  };
  const std::string one = run("1");
  EXPECT_EQ(one, run("1"));
  EXPECT_EQ(one, run("4"));
}

TEST(Train, FrozenVarianceStaysUnit) {
  const auto data = small_data(3);
  ProbModel model = init_model(small_model_config(), 5);
  set_unit_variance(model);
  TrainConfig config;
  config.epochs = 2;
  config.decay_epoch = 2;
  config.batch_size = 16;
  config.learning_rate = 1e-2;
  TrainOptions options;
  options.freeze_variance = true;
  const TrainResult r = train(model, data.train.dataset, data.val.dataset, config, options);
  EXPECT_EQ(r.best.image_logvar, model.image_logvar);
  EXPECT_EQ(r.best.caption_logvar, model.caption_logvar);
  EXPECT_NE(r.best.image_mean, model.image_mean);
  const auto e = embed(r.best, Modality::kImage, data.test.dataset.image_features.row(0));
  for (double v : e.variances()) EXPECT_EQ(v, 1.0);
}

TEST(Train, RejectsMismatchedFeatures) {
  const auto data = small_data();
  EXPECT_THROW(train(init_model({8, 8, 4, CovarianceShape::kEllipsoidal, SimilarityMetric::kNegWasserstein2}, 0),
                     data.train.dataset, data.val.dataset, TrainConfig{}),
               Error);
}

TEST(TrainConfigFile, RoundTrip) {
  TrainingSetup s;
  s.train.margin = 0.3;
  s.train.epochs = 7;
  s.train.decay_epoch = 4;
  s.metric = SimilarityMetric::kNegMinKL;
  s.shape = CovarianceShape::kSphericalOneValue;
  const TrainingSetup back = parse_train_config(serialize_train_config(s));
  EXPECT_EQ(back.train.margin, 0.3);
  EXPECT_EQ(back.train.epochs, 7u);
  EXPECT_EQ(back.metric, s.metric);
  EXPECT_EQ(back.shape, s.shape);
}

TEST(TrainConfigFile, RejectsBadInput) {
  for (const char* text : {R"({"margine": 0.2})", R"({"metric": "cosine"})", R"({"epochs": -1})",
                           R"({"margin": "big"})", "[1, 2]", "{", R"({"margin": 0})"}) {
    try {
      parse_train_config(text);
      ADD_FAILURE() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kConfig) << text;
    }
  }
  EXPECT_NO_THROW(parse_train_config("{}"));
}

}  // namespace
}  // namespace probemb
