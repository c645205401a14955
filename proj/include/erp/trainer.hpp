#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "erp/comve_data.hpp"
#include "erp/optim.hpp"
#include "erp/rng.hpp"
#include "erp/transformer.hpp"

namespace erp {

struct TrainConfig {
  double learning_rate = 5e-5;
  std::size_t batch_size = 4;
  std::size_t epochs = 10;
  double warmup_fraction = 0.1;
  double clip_norm = 1.0;
  // Auxiliary examples per epoch = mixture_ratio x |main task|.
  double mixture_ratio = 0.4;
  std::vector<double> dropout_rates = {0.1, 0.2, 0.3};
  std::uint64_t seed = 13;
  std::string main_task = "B";
  std::vector<std::string> auxiliary_tasks;

  void validate() const;
  nlohmann::json to_json() const;
};

// A task's training examples. row(i, rng) assembles example i; tasks that
// resample per epoch (explanation injection) draw from rng.
struct TaskData {
  std::string name;
  std::size_t arity = 2;
  std::size_t size = 0;
  std::function<AssembledSequence(std::size_t, Rng&)> row;
  // Deterministic rows used for the per-epoch accuracy figure.
  std::vector<AssembledSequence> eval_rows;
};

struct ScheduledBatch {
  std::string task;
  std::vector<std::size_t> examples;
};

struct EpochSchedule {
  std::vector<ScheduledBatch> batches;
  std::size_t count(const std::string& task) const;
};

struct DatasetSize {
  std::string task;
  std::size_t size = 0;
};

// Every main-task example once, in batches, plus from each auxiliary set a
// uniform subsample of ceil(ratio * |main| * |aux_i| / sum|aux|) examples
// (capped at |aux_i|). Batches are task-homogeneous and shuffled together.
EpochSchedule build_epoch_schedule(const DatasetSize& main, const std::vector<DatasetSize>& auxiliary,
                                   const TrainConfig& cfg, Rng& rng);

struct OptimizerState {
  AdamaxState adamax;
  ScheduleConfig schedule;
  std::uint64_t global_step = 0;
};

struct TaskEpochMetrics {
  double mean_loss = 0.0;
  std::size_t batches = 0;
  double accuracy = 0.0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::map<std::string, TaskEpochMetrics> tasks;
  double lr_last = 0.0;
  std::vector<double> losses;  // per batch, in schedule order
};

// Forward, cross-entropy, backward, clip, Adamax at lr_at(global step) for
// every scheduled batch. Throws TrainingError on a non-finite loss.
EpochMetrics train_epoch(EncoderClassifier& model, const std::map<std::string, TaskData>& tasks,
                         const EpochSchedule& schedule, const TrainConfig& cfg, OptimizerState& opt,
                         Rng& rng);

struct FitResult {
  std::vector<EpochMetrics> epochs;
};

// Full run: per-epoch schedules, optimizer schedule sized to the whole run,
// accuracy on each task's eval_rows after every epoch. on_epoch (optional)
// fires after each epoch, e.g. to write a checkpoint.
FitResult fit(EncoderClassifier& model, const std::map<std::string, TaskData>& tasks,
              const TrainConfig& cfg,
              const std::function<void(const EpochMetrics&)>& on_epoch = nullptr);

// Argmax with ties broken toward the lowest index.
std::int64_t argmax(std::span<const double> values);

// Softmax class probabilities for each row, eval mode.
std::vector<std::vector<double>> class_probabilities(const EncoderClassifier& model,
                                                     const EncodedBatch& batch);

std::vector<std::int64_t> predict(const EncoderClassifier& model, std::span<const AssembledSequence> rows,
                                  const std::string& task, std::size_t batch_size = 32);

// Fraction of rows whose argmax equals the label. Empty input is an error.
double evaluate_accuracy(const EncoderClassifier& model, std::span<const AssembledSequence> rows,
                         const std::string& task);

// Mean cross-entropy in eval mode.
double evaluate_loss(const EncoderClassifier& model, std::span<const AssembledSequence> rows,
                     const std::string& task);

// Per-model probability rows [model][example][class] averaged, then argmax.
std::vector<std::int64_t> combine_probabilities(const std::vector<std::vector<std::vector<double>>>& per_model);

std::vector<std::int64_t> ensemble_predict(std::span<const EncoderClassifier* const> models,
                                           const EncodedBatch& batch);

}  // namespace erp
