#pragma once

// Loss, optimiser, learning-rate schedule, the training loop, evaluation and
// multi-run aggregation.

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtsc/data.hpp"
#include "mtsc/models.hpp"

namespace mtsc::train {

// Mean over the batch of -log softmax(logits)[label]. logits is [B, C].
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options = {});

  // One bias-corrected update from the current gradients; parameters without
  // a gradient buffer are left alone.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamOptions opt_;
  std::size_t t_ = 0;
};

// Multiplies the rate by `factor` after `patience` consecutive epochs without
// a strict improvement of the monitored value, then restarts the count.
class PlateauScheduler {
 public:
  PlateauScheduler(double factor, std::size_t patience);
  double step(double monitored, double lr);
  std::size_t reductions() const { return reductions_; }

 private:
  double factor_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
  std::size_t reductions_ = 0;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t epochs = 400;
  std::size_t batch_size = 64;
  double plateau_factor = 0.1;
  std::size_t plateau_patience = 20;
  // Share of the training set held out (stratified) to drive the scheduler
  // when no validation set is given. 0 monitors the training loss instead.
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
  // Stop once eval-mode training accuracy reaches this value.
  std::optional<double> stop_at_train_accuracy;

  void validate() const;
  nlohmann::json to_json() const;
  // Keys absent from `j` keep the values already in `base`.
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig()); }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double learning_rate = 0;
  double train_loss = 0;  // mean mini-batch loss in training mode
  double train_accuracy = 0;  // eval mode, after the epoch
  std::optional<double> val_loss, val_accuracy;
};

struct RunResult {
  std::string variant;
  std::string dataset;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<EpochRecord> history;
  double train_accuracy = 0;  // final epoch
  std::optional<double> val_accuracy;
  std::optional<double> test_accuracy;
  std::optional<double> wall_time_seconds;

  nlohmann::json to_json() const;
  static RunResult from_json(const nlohmann::json& j);
};

struct Evaluation {
  double accuracy = 0;
  double loss = 0;
  std::vector<std::size_t> predictions;
};

// Index of the largest entry; the lowest index wins ties.
std::size_t argmax(std::span<const double> row);

// Eval-mode pass over the whole dataset in batches of `batch_size`.
Evaluation evaluate(const Model& model, const data::Dataset& ds, std::size_t batch_size = 64);

// Trains in place. `val` may be null, see TrainConfig::validation_fraction.
// Throws DimensionError when the data does not fit the model and
// DivergenceError on a non-finite loss.
RunResult fit(Model& model, const data::Dataset& train, const data::Dataset* val, const TrainConfig& cfg);

// accuracy[dataset][method]; a missing cell is a UsageError. Higher accuracy
// ranks first and ties share the mean of their ranks.
std::vector<double> rank_average(const std::vector<std::vector<std::optional<double>>>& accuracy);

struct Aggregate {
  std::vector<std::string> datasets, variants;
  // mean_accuracy[dataset][variant] over the runs found; nullopt if none.
  std::vector<std::vector<std::optional<double>>> mean_accuracy;
  std::vector<std::vector<std::size_t>> runs;
  std::optional<std::vector<double>> rank_average;  // only for a complete table

  nlohmann::json to_json() const;
};

// Groups test accuracies by (dataset, variant).
Aggregate aggregate(const std::vector<RunResult>& results);

}  // namespace mtsc::train
