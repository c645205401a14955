#include "erp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "erp/errors.hpp"

namespace erp {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(mixture_ratio >= 0.0)) throw ConfigError("mixture_ratio must be non-negative");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in (0,1)");
  for (double r : dropout_rates) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("dropout rates must lie in [0,1)");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"batch_size", batch_size},
          {"epochs", epochs},               {"warmup_fraction", warmup_fraction},
          {"clip_norm", clip_norm},         {"mixture_ratio", mixture_ratio},
          {"dropout_rates", dropout_rates}, {"seed", seed},
          {"main_task", main_task},         {"auxiliary_tasks", auxiliary_tasks}};
}

std::size_t EpochSchedule::count(const std::string& task) const {
  return static_cast<std::size_t>(
      std::count_if(batches.begin(), batches.end(), [&](const ScheduledBatch& b) { return b.task == task; }));
}

namespace {

void push_batches(EpochSchedule& s, const std::string& task, const std::vector<std::size_t>& idx,
                  std::size_t batch_size) {
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t end = std::min(idx.size(), start + batch_size);
    s.batches.push_back({task, std::vector<std::size_t>(idx.begin() + start, idx.begin() + end)});
  }
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace

EpochSchedule build_epoch_schedule(const DatasetSize& main, const std::vector<DatasetSize>& auxiliary,
                                   const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (main.size == 0) throw ContractError("main task '" + main.task + "' has no examples");
  EpochSchedule s;
  auto main_idx = iota(main.size);
  rng.shuffle(main_idx);
  push_batches(s, main.task, main_idx, cfg.batch_size);

  std::size_t aux_total = 0;
  for (const auto& a : auxiliary) aux_total += a.size;
  for (const auto& a : auxiliary) {
    if (a.size == 0 || cfg.mixture_ratio == 0.0) continue;
    const double share = cfg.mixture_ratio * static_cast<double>(main.size) * static_cast<double>(a.size) /
                         static_cast<double>(aux_total);
    const auto want = std::min(a.size, static_cast<std::size_t>(std::ceil(share - 1e-9)));
    auto idx = iota(a.size);
    // Partial shuffle: the first `want` entries are a uniform subsample.
    for (std::size_t i = 0; i < want; ++i) std::swap(idx[i], idx[i + rng.below(a.size - i)]);
    idx.resize(want);
    push_batches(s, a.task, idx, cfg.batch_size);
  }
  rng.shuffle(s.batches);
  return s;
}

// ---- training ------------------------------------------------------------------

EpochMetrics train_epoch(EncoderClassifier& model, const std::map<std::string, TaskData>& tasks,
                         const EpochSchedule& schedule, const TrainConfig& cfg, OptimizerState& opt,
                         Rng& rng) {
  EpochMetrics m;
  auto& params = model.params().tensors();
  for (std::size_t bi = 0; bi < schedule.batches.size(); ++bi) {
    const auto& sb = schedule.batches[bi];
    auto it = tasks.find(sb.task);
    if (it == tasks.end()) throw ConfigError("schedule names unknown task '" + sb.task + "'");
    const TaskData& task = it->second;

    std::vector<AssembledSequence> rows;
    rows.reserve(sb.examples.size());
    for (std::size_t ex : sb.examples) rows.push_back(task.row(ex, rng));
    const EncodedBatch batch = collate(rows, task.name);
    std::vector<std::int64_t> labels;
    for (const auto& r : rows) labels.push_back(r.label);

    const Tensor loss = cross_entropy(model.logits(batch, true, &rng), labels);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      std::ostringstream os;
      os << "non-finite loss " << value << " at batch " << bi << " (task " << sb.task << ", global step "
         << opt.global_step << ")";
      throw TrainingError(os.str());
    }
    backward(loss);
    clip_grad_norm(params, cfg.clip_norm);
    const double lr = lr_at(opt.global_step, opt.schedule);
    adamax_step(params, opt.adamax, lr);
    zero_grads(params);
    opt.global_step += 1;

    auto& tm = m.tasks[sb.task];
    tm.mean_loss += value;
    tm.batches += 1;
    m.lr_last = lr;
    m.losses.push_back(value);
  }
  for (auto& [name, tm] : m.tasks) tm.mean_loss /= static_cast<double>(tm.batches);
  return m;
}

FitResult fit(EncoderClassifier& model, const std::map<std::string, TaskData>& tasks,
              const TrainConfig& cfg, const std::function<void(const EpochMetrics&)>& on_epoch) {
  cfg.validate();
  auto main_it = tasks.find(cfg.main_task);
  if (main_it == tasks.end()) throw ConfigError("main task '" + cfg.main_task + "' has no data");
  std::vector<DatasetSize> aux;
  for (const auto& name : cfg.auxiliary_tasks) {
    auto it = tasks.find(name);
    if (it == tasks.end()) throw ConfigError("auxiliary task '" + name + "' has no data");
    aux.push_back({name, it->second.size});
  }
  for (const auto& [name, t] : tasks) {
    if (model.arity(name) != t.arity) {
      throw ConfigError("task '" + name + "' has arity " + std::to_string(t.arity) + " but the model head has " +
                        std::to_string(model.arity(name)));
    }
  }

  Rng rng(cfg.seed);
  Rng schedule_rng = rng.split();
  Rng train_rng = rng.split();

  // Batch counts per epoch depend only on dataset sizes, so one probe fixes
  // the total step count for the learning-rate schedule.
  Rng probe(0);
  const std::size_t per_epoch = build_epoch_schedule({cfg.main_task, main_it->second.size}, aux, cfg, probe).batches.size();

  OptimizerState opt;
  opt.schedule = {cfg.learning_rate, cfg.warmup_fraction, per_epoch * cfg.epochs};
  opt.schedule.warmup_steps();

  FitResult result;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto schedule = build_epoch_schedule({cfg.main_task, main_it->second.size}, aux, cfg, schedule_rng);
    EpochMetrics m = train_epoch(model, tasks, schedule, cfg, opt, train_rng);
    m.epoch = e + 1;
    for (auto& [name, tm] : m.tasks) {
      const auto& rows = tasks.at(name).eval_rows;
      tm.accuracy = rows.empty() ? 0.0 : evaluate_accuracy(model, rows, name);
    }
    if (on_epoch) on_epoch(m);
    result.epochs.push_back(std::move(m));
  }
  return result;
}

// ---- evaluation --------------------------------------------------------------------

std::int64_t argmax(std::span<const double> values) {
  if (values.empty()) throw ContractError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<std::int64_t>(best);
}

std::vector<std::vector<double>> class_probabilities(const EncoderClassifier& model, const EncodedBatch& batch) {
  NoGradGuard guard;
  const Tensor probs = softmax(model.logits(batch, false), 1);
  const std::size_t k = probs.dim(1);
  std::vector<std::vector<double>> out(probs.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].assign(probs.data().begin() + i * k, probs.data().begin() + (i + 1) * k);
  }
  return out;
}

std::vector<std::int64_t> predict(const EncoderClassifier& model, std::span<const AssembledSequence> rows,
                                  const std::string& task, std::size_t batch_size) {
  std::vector<std::int64_t> out;
  for (std::size_t start = 0; start < rows.size(); start += batch_size) {
    const auto chunk = rows.subspan(start, std::min(batch_size, rows.size() - start));
    for (const auto& p : class_probabilities(model, collate(chunk, task))) out.push_back(argmax(p));
  }
  return out;
}

double evaluate_accuracy(const EncoderClassifier& model, std::span<const AssembledSequence> rows,
                         const std::string& task) {
  if (rows.empty()) throw ContractError("evaluate_accuracy: no examples");
  const auto pred = predict(model, rows, task);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) correct += pred[i] == rows[i].label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(rows.size());
}

double evaluate_loss(const EncoderClassifier& model, std::span<const AssembledSequence> rows,
                     const std::string& task) {
  if (rows.empty()) throw ContractError("evaluate_loss: no examples");
  NoGradGuard guard;
  double total = 0.0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < rows.size(); start += kChunk) {
    const auto chunk = rows.subspan(start, std::min(kChunk, rows.size() - start));
    std::vector<std::int64_t> labels;
    for (const auto& r : chunk) labels.push_back(r.label);
    total += cross_entropy(model.logits(collate(chunk, task), false), labels).item() *
             static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(rows.size());
}

std::vector<std::int64_t> combine_probabilities(const std::vector<std::vector<std::vector<double>>>& per_model) {
  if (per_model.empty()) throw ContractError("ensemble of zero models");
  const std::size_t n = per_model[0].size();
  std::vector<std::int64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> avg(per_model[0][i].size(), 0.0);
    for (const auto& m : per_model) {
      if (m.size() != n || m[i].size() != avg.size()) throw ConfigError("ensemble members disagree on output shape");
      for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += m[i][k];
    }
    for (double& v : avg) v /= static_cast<double>(per_model.size());
    out[i] = argmax(avg);
  }
  return out;
}

std::vector<std::int64_t> ensemble_predict(std::span<const EncoderClassifier* const> models,
                                           const EncodedBatch& batch) {
  if (models.empty()) throw ContractError("ensemble of zero models");
  const std::size_t k = models[0]->arity(batch.task_tag);
  std::vector<std::vector<std::vector<double>>> per_model;
  for (const auto* m : models) {
    if (m->arity(batch.task_tag) != k) {
      throw ConfigError("ensemble members disagree on the arity of task '" + batch.task_tag + "'");
    }
    per_model.push_back(class_probabilities(*m, batch));
  }
  return combine_probabilities(per_model);
}

}  // namespace erp
