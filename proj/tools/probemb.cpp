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

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 data or
// format error.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "probemb/dataset.hpp"
#include "probemb/evaluation.hpp"
#include "probemb/model.hpp"
#include "probemb/synthetic.hpp"
#include "probemb/training.hpp"
#include "probemb/triplet_lab.hpp"

namespace fs = std::filesystem;
using namespace probemb;

namespace {

constexpr int kUsageError = 1;
constexpr int kDataError = 2;

UnionFeatureFn union_source(const std::string& composer_dir) {
  if (composer_dir.empty()) return lookup_union_features;
  return load_composer(composer_dir);
}

std::vector<RegionAnnotatedImage> load_regions(const fs::path& path) { return parse_regions(read_file(path)); }

ProbModel train_one(const TrainingSetup& setup, std::size_t joint_dim, const FeatureDataset& train_set,
                    const FeatureDataset& val_set, bool freeze_variance, TrainHistory* history, bool verbose) {
  ModelConfig mc{train_set.image_features.cols(), train_set.caption_features.cols(), joint_dim, setup.shape,
                 setup.metric};
  ProbModel model = init_model(mc, setup.train.seed);
  if (freeze_variance) set_unit_variance(model);
  TrainOptions opts;
  opts.freeze_variance = freeze_variance;
  if (verbose) {
    opts.on_epoch = [](std::size_t epoch, double loss, double rsum) {
      std::cerr << "epoch " << epoch << " loss " << format_double(loss) << " val_rsum " << format_percent(rsum)
                << "\n";
    };
  }
  TrainResult result = train(model, train_set, val_set, setup.train, opts);
  if (history) *history = result.history;
  return result.best;
}

TrainingSetup load_setup(const std::string& config_path, std::optional<std::uint64_t> seed) {
  TrainingSetup setup = config_path.empty() ? TrainingSetup{} : parse_train_config(read_file(config_path));
  if (seed) setup.train.seed = *seed;
  return setup;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic cross-modal embeddings over precomputed features"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Seed for every random choice (overrides config files)");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  std::string gen_spec, gen_out;
  gen->add_option("--spec", gen_spec, "Synthetic spec JSON (defaults when omitted)");
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  std::string train_config, train_dir, val_dir, train_out, train_history;
  std::size_t joint_dim = 64;
  bool freeze_variance = false;
  bool verbose = false;
  train_cmd->add_option("--config", train_config, "Training config JSON");
  train_cmd->add_option("--train", train_dir, "Training dataset directory")->required();
  train_cmd->add_option("--val", val_dir, "Validation dataset directory")->required();
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--history", train_history, "Training history JSON path");
  train_cmd->add_option("--dim", joint_dim, "Joint embedding dimension")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--freeze-variance", freeze_variance, "Point-embedding ablation (unit variances)");
  train_cmd->add_flag("--verbose", verbose, "Print per-epoch progress");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate retrieval");
  std::string eval_model, eval_data, eval_json, eval_csv, protocol = "full";
  std::size_t fold_size = 1000;
  bool want_pmrp = false, want_rpc2 = false;
  eval_cmd->add_option("--model", eval_model, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset directory")->required();
  eval_cmd->add_option("--protocol", protocol, "full or 1k5fold")->check(CLI::IsMember({"full", "1k5fold"}));
  eval_cmd->add_option("--fold-size", fold_size, "Images per fold for 1k5fold")->check(CLI::PositiveNumber);
  eval_cmd->add_flag("--pmrp", want_pmrp, "Report PMRP (needs label vectors)");
  eval_cmd->add_flag("--rpc2", want_rpc2, "Report RPC2 (uses extended positives)");
  eval_cmd->add_option("--json", eval_json, "Write the report as JSON");
  eval_cmd->add_option("--csv", eval_csv, "Write the report as CSV");

  // uncertainty
  auto* unc_cmd = app.add_subcommand("uncertainty", "Per-item uncertainty table");
  std::string unc_model, unc_data, unc_out;
  unc_cmd->add_option("--model", unc_model, "Checkpoint")->required();
  unc_cmd->add_option("--data", unc_data, "Dataset directory")->required();
  unc_cmd->add_option("--out", unc_out, "CSV path")->required();

  // triplets
  auto* trip_cmd = app.add_subcommand("triplets", "Build crop triplets from region annotations");
  std::string trip_regions, trip_out, trip_composer;
  double trip_threshold = 0.3;
  trip_cmd->add_option("--regions", trip_regions, "Region JSON-lines file")->required();
  trip_cmd->add_option("--threshold", trip_threshold, "Area threshold as a fraction of the image")
      ->check(CLI::Range(1e-9, 1.0));
  trip_cmd->add_option("--composer", trip_composer, "Directory with composer.json for union-crop features");
  trip_cmd->add_option("--out", trip_out, "Manifest path")->required();

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Uncertainty versus area threshold");
  std::string sweep_model, sweep_regions, sweep_composer, sweep_out;
  std::size_t sweep_samples = 2000;
  std::vector<double> thresholds(std::begin(kDefaultThresholds), std::end(kDefaultThresholds));
  sweep_cmd->add_option("--model", sweep_model, "Checkpoint")->required();
  sweep_cmd->add_option("--regions", sweep_regions, "Region JSON-lines file")->required();
  sweep_cmd->add_option("--composer", sweep_composer, "Directory with composer.json for union-crop features");
  sweep_cmd->add_option("--samples", sweep_samples, "Images sampled per threshold")->check(CLI::PositiveNumber);
  sweep_cmd->add_option("--thresholds", thresholds, "Area thresholds")->delimiter(',');
  sweep_cmd->add_option("--out", sweep_out, "Curve CSV path")->required();

  // select
  auto* sel_cmd = app.add_subcommand("select", "Binary selection accuracy on a triplet manifest");
  std::string sel_model, sel_manifest, sel_out;
  sel_cmd->add_option("--model", sel_model, "Checkpoint")->required();
  sel_cmd->add_option("--manifest", sel_manifest, "Triplet manifest with features")->required();
  sel_cmd->add_option("--out", sel_out, "CSV path");

  // ablate
  auto* abl_cmd = app.add_subcommand("ablate", "Metric x covariance-shape grid");
  std::string abl_config, abl_train, abl_val, abl_test, abl_out;
  abl_cmd->add_option("--config", abl_config, "Training config JSON (metric/shape are overridden)");
  abl_cmd->add_option("--train", abl_train, "Training dataset directory")->required();
  abl_cmd->add_option("--val", abl_val, "Validation dataset directory")->required();
  abl_cmd->add_option("--test", abl_test, "Test dataset directory")->required();
  abl_cmd->add_option("--dim", joint_dim, "Joint embedding dimension")->check(CLI::PositiveNumber);
  abl_cmd->add_option("--out", abl_out, "CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kUsageError;
  }

  try {
    if (gen->parsed()) {
      SyntheticSpec spec = gen_spec.empty() ? SyntheticSpec{} : parse_synthetic_spec(read_file(gen_spec));
      if (seed) spec.seed = *seed;
      const SyntheticData data = generate_synthetic(spec);
      const fs::path out = gen_out;
      fs::create_directories(out);
      for (const auto& [name, split] : {std::pair{"train", &data.train}, std::pair{"val", &data.val},
                                        std::pair{"test", &data.test}}) {
        save_dataset(out / name, split->dataset);
        write_file_atomic(out / name / "ambiguity.csv", ambiguity_csv(*split));
      }
      if (!data.regions.empty()) write_file_atomic(out / "regions.jsonl", serialize_regions(data.regions));
      save_composer(out, data.composer);
      write_file_atomic(out / "spec.json", serialize_synthetic_spec(spec));
      std::cout << "wrote " << out.string() << "\n";
    } else if (train_cmd->parsed()) {
      const TrainingSetup setup = load_setup(train_config, seed);
      const FeatureDataset train_set = load_dataset(train_dir, Split::kTrain);
      const FeatureDataset val_set = load_dataset(val_dir, Split::kVal);
      TrainHistory history;
      const ProbModel best = train_one(setup, joint_dim, train_set, val_set, freeze_variance, &history, verbose);
      save_checkpoint(train_out, best);
      if (!train_history.empty()) write_file_atomic(train_history, history_json(history));
      std::cout << "selected epoch "
                << (history.selected_epoch ? std::to_string(*history.selected_epoch) : std::string("none"))
                << "\n";
    } else if (eval_cmd->parsed()) {
      const ProbModel model = load_checkpoint(eval_model);
      const FeatureDataset ds = load_dataset(eval_data);
      const Matrix sims = score_dataset(model, ds);
      const EvaluationOptions opts{want_pmrp, want_rpc2};
      const Evaluation ev =
          protocol == "full" ? evaluate_full(sims, ds.annotations, opts) : five_fold_1k(sims, ds.annotations, fold_size, opts);
      if (!eval_json.empty()) write_file_atomic(eval_json, report_json(ev, model.config.metric));
      if (!eval_csv.empty()) write_file_atomic(eval_csv, report_csv(ev));
      std::cout << report_table(ev);
    } else if (unc_cmd->parsed()) {
      const ProbModel model = load_checkpoint(unc_model);
      const FeatureDataset ds = load_dataset(unc_data);
      const UncertaintyReport rep = uncertainty_report(model, ds);
      write_file_atomic(unc_out, uncertainty_csv(rep));
      std::cout << "min " << format_double(rep.min) << " median " << format_double(rep.median) << " max "
                << format_double(rep.max) << "\n";
    } else if (trip_cmd->parsed()) {
      const auto images = load_regions(trip_regions);
      const auto triplets = build_triplets(images, trip_threshold, union_source(trip_composer));
      write_file_atomic(trip_out, serialize_manifest(triplets));
      std::cout << triplets.size() << " triplets from " << images.size() << " images\n";
    } else if (sweep_cmd->parsed()) {
      const ProbModel model = load_checkpoint(sweep_model);
      const auto images = load_regions(sweep_regions);
      const SweepResult result = threshold_sweep(model, images, thresholds, sweep_samples, seed.value_or(0),
                                                 union_source(sweep_composer));
      for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
      write_file_atomic(sweep_out, sweep_csv(result));
      std::cout << sweep_csv(result);
    } else if (sel_cmd->parsed()) {
      const ProbModel model = load_checkpoint(sel_model);
      const auto triplets = parse_manifest(read_file(sel_manifest));
      const auto i2t = selection_experiment(model, triplets, Direction::kImageToText);
      const auto t2i = selection_experiment(model, triplets, Direction::kTextToImage);
      if (!sel_out.empty()) {
        write_file_atomic(sel_out, "direction,query_a,query_c,count\nimage-to-text," + format_double(i2t.query_a) +
                                       "," + format_double(i2t.query_c) + "," + std::to_string(i2t.count) +
                                       "\ntext-to-image," + format_double(t2i.query_a) + "," +
                                       format_double(t2i.query_c) + "," + std::to_string(t2i.count) + "\n");
      }
      std::cout << selection_table(i2t, t2i);
    } else if (abl_cmd->parsed()) {
      const TrainingSetup base = load_setup(abl_config, seed);
      const FeatureDataset train_set = load_dataset(abl_train, Split::kTrain);
      const FeatureDataset val_set = load_dataset(abl_val, Split::kVal);
      const FeatureDataset test_set = load_dataset(abl_test, Split::kTest);
      std::string csv = "metric,shape,selected_epoch,val_rsum,i2t_r1,i2t_r5,i2t_r10,t2i_r1,t2i_r5,t2i_r10,rsum\n";
      for (SimilarityMetric metric : kAllMetrics) {
        for (CovarianceShape shape : kAllShapes) {
          TrainingSetup setup = base;
          setup.metric = metric;
          setup.shape = shape;
          TrainHistory history;
          const ProbModel best = train_one(setup, joint_dim, train_set, val_set, false, &history, false);
          const Evaluation ev = evaluate_full(score_dataset(best, test_set), test_set.annotations);
          const std::string selected = history.selected_epoch ? std::to_string(*history.selected_epoch) : "";
          const double val_rsum = history.selected_epoch ? history.val_rsum[*history.selected_epoch] : 0.0;
          csv += std::string(to_string(metric)) + "," + std::string(to_string(shape)) + "," + selected + "," +
                 format_double(val_rsum) + "," + format_double(ev.image_to_text.r1) + "," +
                 format_double(ev.image_to_text.r5) + "," + format_double(ev.image_to_text.r10) + "," +
                 format_double(ev.text_to_image.r1) + "," + format_double(ev.text_to_image.r5) + "," +
                 format_double(ev.text_to_image.r10) + "," + format_double(ev.rsum()) + "\n";
          std::cout << to_string(metric) << " " << to_string(shape) << " rsum " << format_percent(ev.rsum()) << "\n";
        }
      }
      write_file_atomic(abl_out, csv);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return 0;
}
