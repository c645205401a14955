#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "erp/errors.hpp"
#include "erp/trainer.hpp"

using namespace erp;

namespace {

ModelConfig tiny(std::size_t vocab) {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = vocab;
  c.max_len = 8;
  return c;
}

// Balanced two-class rows: class is whether token 10 appears.
std::vector<AssembledSequence> synthetic_rows(std::size_t n, Rng& rng) {
  std::vector<AssembledSequence> rows;
  for (std::size_t i = 0; i < n; ++i) {
    AssembledSequence s;
    s.label = static_cast<std::int64_t>(i % 2);
    s.tokens = {id_of(Special::kCls), s.label ? 10 : 11, 12 + static_cast<TokenId>(rng.below(4)), id_of(Special::kSep)};
    s.segments = {0, 0, 0, 0};
    rows.push_back(s);
  }
  return rows;
}

std::map<std::string, TaskData> single_task(const std::vector<AssembledSequence>& rows) {
  std::map<std::string, TaskData> m;
  m["A"] = TaskData{"A", 2, rows.size(), [rows](std::size_t i, Rng&) { return rows[i]; }, rows};
  return m;
}

}  // namespace

TEST_CASE("schedule without auxiliary tasks") {
  TrainConfig cfg;
  Rng rng(1);
  const auto s = build_epoch_schedule({"A", 10}, {}, cfg, rng);
  CHECK(s.batches.size() == 3);
  std::multiset<std::size_t> seen;
  for (const auto& b : s.batches) seen.insert(b.examples.begin(), b.examples.end());
  CHECK(seen.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(seen.count(i) == 1);
}

TEST_CASE("schedule with one auxiliary set: 25 + 10") {
  TrainConfig cfg;
  Rng rng(2);
  const auto s = build_epoch_schedule({"B", 100}, {{"A", 500}}, cfg, rng);
  CHECK(s.count("B") == 25);
  CHECK(s.count("A") == 10);
  std::set<std::size_t> aux;
  for (const auto& b : s.batches) {
    if (b.task == "A") aux.insert(b.examples.begin(), b.examples.end());
  }
  CHECK(aux.size() == 40);
}

TEST_CASE("mixture ratio 0 adds nothing; auxiliary share apportioned by size") {
  TrainConfig cfg;
  cfg.mixture_ratio = 0.0;
  Rng rng(3);
  CHECK(build_epoch_schedule({"B", 40}, {{"A", 30}}, cfg, rng).count("A") == 0);

  cfg.mixture_ratio = 0.4;
  const auto s = build_epoch_schedule({"B", 100}, {{"A", 300}, {"X", 100}}, cfg, rng);
  std::size_t a = 0, x = 0;
  for (const auto& b : s.batches) (b.task == "A" ? a : x) += b.task == "B" ? 0 : b.examples.size();
  CHECK(a == 30);
  CHECK(x == 10);
}

TEST_CASE("auxiliary batches stay within one batch of ratio times main batches") {
  Rng rng(4);
  for (double r : {0.1, 0.4, 0.7, 1.3}) {
    for (std::size_t main : {17, 64, 101}) {
      TrainConfig cfg;
      cfg.mixture_ratio = r;
      const auto s = build_epoch_schedule({"B", main}, {{"A", 1000}}, cfg, rng);
      const double target = r * static_cast<double>(s.count("B"));
      CHECK(std::abs(static_cast<double>(s.count("A")) - target) <= 1.0 + 1e-9);
    }
  }
}

TEST_CASE("schedules are reproducible under a seed") {
  TrainConfig cfg;
  Rng a(9), b(9);
  const auto s1 = build_epoch_schedule({"B", 50}, {{"A", 70}}, cfg, a);
  const auto s2 = build_epoch_schedule({"B", 50}, {{"A", 70}}, cfg, b);
  REQUIRE(s1.batches.size() == s2.batches.size());
  for (std::size_t i = 0; i < s1.batches.size(); ++i) {
    CHECK(s1.batches[i].task == s2.batches[i].task);
    CHECK(s1.batches[i].examples == s2.batches[i].examples);
  }
}

TEST_CASE("train_epoch with lr 0 leaves parameters unchanged") {
  Rng rng(5);
  const auto rows = synthetic_rows(4, rng);
  const auto tasks = single_task(rows);
  EncoderClassifier m(tiny(16), {{"A", 2}}, 1);
  std::vector<std::vector<double>> before;
  for (const auto& t : m.params().tensors()) before.emplace_back(t.data().begin(), t.data().end());
  TrainConfig cfg;
  cfg.main_task = "A";
  OptimizerState opt;
  opt.schedule = {0.0, 0.1, 20};
  Rng r(1);
  const auto s = build_epoch_schedule({"A", 4}, {}, cfg, r);
  const auto metrics = train_epoch(m, tasks, s, cfg, opt, r);
  CHECK(metrics.losses.size() == 1);
  for (std::size_t k = 0; k < before.size(); ++k) {
    const auto d = m.params().tensors()[k].data();
    CHECK(std::equal(d.begin(), d.end(), before[k].begin()));
  }
}

TEST_CASE("fit is deterministic under a seed") {
  Rng rng(6);
  const auto rows = synthetic_rows(12, rng);
  const auto tasks = single_task(rows);
  TrainConfig cfg;
  cfg.main_task = "A";
  cfg.epochs = 4;
  cfg.learning_rate = 1e-3;
  auto run = [&] {
    EncoderClassifier m(tiny(16), {{"A", 2}}, 2);
    std::vector<double> trace;
    for (const auto& e : fit(m, tasks, cfg).epochs) trace.insert(trace.end(), e.losses.begin(), e.losses.end());
    return trace;
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  Rng rng(7);
  const auto tasks = single_task(synthetic_rows(4, rng));
  EncoderClassifier m(tiny(16), {{"A", 2}}, 3);
  auto bias = m.params().get("head.A.bias");
  bias.mutable_data()[0] = std::nan("");
  TrainConfig cfg;
  cfg.main_task = "A";
  OptimizerState opt;
  opt.schedule = {1e-3, 0.1, 20};
  Rng r(1);
  const auto s = build_epoch_schedule({"A", 4}, {}, cfg, r);
  try {
    train_epoch(m, tasks, s, cfg, opt, r);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("batch 0") != std::string::npos);
    CHECK(msg.find("task A") != std::string::npos);
  }
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  const std::vector<double> v = {0.2, 0.4, 0.4};
  CHECK(argmax(v) == 1);
  const std::vector<double> u = {0.5, 0.5};
  CHECK(argmax(u) == 0);
}

TEST_CASE("evaluate_accuracy") {
  Rng rng(8);
  EncoderClassifier m(tiny(16), {{"A", 2}}, 4);
  CHECK_THROWS_AS(evaluate_accuracy(m, {}, "A"), ContractError);

  auto rows = synthetic_rows(20, rng);
  const auto pred = predict(m, rows, "A");
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].label = pred[i];
  CHECK(evaluate_accuracy(m, rows, "A") == 1.0);

  const auto balanced = synthetic_rows(1000, rng);
  const double acc = evaluate_accuracy(m, balanced, "A");
  CHECK(acc >= 0.44);
  CHECK(acc <= 0.56);
}

TEST_CASE("probability averaging") {
  CHECK(combine_probabilities({{{0.6, 0.4}}, {{0.1, 0.9}}}) == std::vector<std::int64_t>{1});
  CHECK(combine_probabilities({{{0.5, 0.5}}, {{0.5, 0.5}}}) == std::vector<std::int64_t>{0});
  CHECK(combine_probabilities({{{0.7, 0.3}, {0.2, 0.8}}}) == std::vector<std::int64_t>{0, 1});
}

TEST_CASE("ensembles of identical models and permutation invariance") {
  Rng rng(9);
  const auto rows = synthetic_rows(30, rng);
  const auto batch = collate(rows, "A");
  EncoderClassifier a(tiny(16), {{"A", 2}}, 10), b(tiny(16), {{"A", 2}}, 11), c(tiny(16), {{"A", 2}}, 12);
  const auto single = predict(a, rows, "A");
  const std::vector<const EncoderClassifier*> same = {&a, &a, &a};
  CHECK(ensemble_predict(same, batch) == single);
  const std::vector<const EncoderClassifier*> one = {&a};
  CHECK(ensemble_predict(one, batch) == single);
  const std::vector<const EncoderClassifier*> abc = {&a, &b, &c}, cab = {&c, &a, &b};
  CHECK(ensemble_predict(abc, batch) == ensemble_predict(cab, batch));
  EncoderClassifier wide(tiny(16), {{"A", 3}}, 13);
  const std::vector<const EncoderClassifier*> mixed = {&a, &wide};
  CHECK_THROWS_AS(ensemble_predict(mixed, batch), ConfigError);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.mixture_ratio = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.dropout_rates = {0.1, 1.0};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
