#include <doctest.h>

#include <cmath>
#include <cstring>

#include "erp/errors.hpp"
#include "erp/optim.hpp"
#include "erp/rng.hpp"

using namespace erp;

namespace {

Tensor with_grad(std::vector<double> values, std::vector<double> grad) {
  const std::size_t n = values.size();
  auto t = Tensor::from({n}, std::move(values), true);
  auto g = t.mutable_grad();
  std::copy(grad.begin(), grad.end(), g.begin());
  return t;
}

}  // namespace

TEST_CASE("clip_grad_norm examples") {
  std::vector<Tensor> p = {with_grad({0, 0}, {0.3, 0.4})};
  CHECK(clip_grad_norm(p, 1.0) == 1.0);
  CHECK(p[0].grad()[0] == 0.3);
  CHECK(p[0].grad()[1] == 0.4);

  std::vector<Tensor> q = {with_grad({0}, {2.0})};
  CHECK(clip_grad_norm(q, 1.0) == doctest::Approx(0.5));
  CHECK(q[0].grad()[0] == doctest::Approx(1.0));

  std::vector<Tensor> z = {with_grad({0, 0}, {0.0, 0.0})};
  CHECK(clip_grad_norm(z, 1.0) == 1.0);
  CHECK(z[0].grad()[0] == 0.0);
}

TEST_CASE("clip_grad_norm uses the global norm and is idempotent") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> p;
    for (int k = 0; k < 3; ++k) {
      std::vector<double> g(4);
      for (auto& x : g) x = (rng.uniform() - 0.5) * 4.0;
      p.push_back(with_grad(std::vector<double>(4, 0.0), g));
    }
    clip_grad_norm(p, 1.0);
    CHECK(global_grad_norm(p) <= 1.0 + 1e-12);
    std::vector<std::vector<double>> once;
    for (auto& t : p) once.emplace_back(t.grad().begin(), t.grad().end());
    clip_grad_norm(p, 1.0);
    for (std::size_t k = 0; k < p.size(); ++k) {
      for (std::size_t i = 0; i < 4; ++i) CHECK(p[k].grad()[i] == doctest::Approx(once[k][i]).epsilon(1e-15));
    }
  }
}

TEST_CASE("adamax examples") {
  const double lr = 5e-5;
  {
    std::vector<Tensor> p = {with_grad({0.0}, {1.0})};
    AdamaxState s;
    adamax_step(p, s, lr);
    CHECK(p[0].data()[0] == doctest::Approx(-lr).epsilon(1e-6));
    CHECK(s.step_count == 1);
  }
  {
    std::vector<Tensor> p = {with_grad({0.7}, {0.0})};
    AdamaxState s;
    adamax_step(p, s, lr);
    CHECK(p[0].data()[0] == 0.7);
  }
  {
    std::vector<Tensor> p = {with_grad({0.7, -1.0}, {0.3, 2.0})};
    AdamaxState s;
    adamax_step(p, s, 0.0);
    CHECK(p[0].data()[0] == 0.7);
    CHECK(p[0].data()[1] == -1.0);
    CHECK(s.step_count == 1);
    CHECK(s.inf_norm[0][1] == 2.0);
  }
}

TEST_CASE("adamax matches a hand-rolled reference over several steps") {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.01;
  std::vector<double> theta = {0.5, -0.25}, m = {0, 0}, u = {0, 0};
  std::vector<Tensor> p = {Tensor::from({2}, theta, true)};
  AdamaxState s;
  const std::vector<std::vector<double>> grads = {{0.1, -0.4}, {-0.2, 0.05}, {0.3, 0.0}};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    auto g = p[0].mutable_grad();
    std::copy(grads[t - 1].begin(), grads[t - 1].end(), g.begin());
    adamax_step(p, s, lr);
    for (std::size_t i = 0; i < 2; ++i) {
      m[i] = b1 * m[i] + (1 - b1) * grads[t - 1][i];
      u[i] = std::max(b2 * u[i], std::abs(grads[t - 1][i]));
      theta[i] -= lr / (1 - std::pow(b1, static_cast<double>(t))) * m[i] / (u[i] + eps);
      CHECK(p[0].data()[i] == doctest::Approx(theta[i]).epsilon(1e-14));
      CHECK(s.inf_norm[0][i] >= 0.0);
    }
  }
}

TEST_CASE("adamax is bit-for-bit deterministic") {
  auto run = [] {
    std::vector<Tensor> p = {with_grad({0.1, 0.2, 0.3}, {0.01, -0.5, 0.25})};
    AdamaxState s;
    for (int i = 0; i < 5; ++i) adamax_step(p, s, 1e-3);
    return std::vector<double>(p[0].data().begin(), p[0].data().end());
  };
  const auto a = run(), b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("lr_at endpoints and errors") {
  ScheduleConfig cfg{5e-5, 0.1, 1000};
  CHECK(lr_at(0, cfg) == 0.0);
  CHECK(lr_at(100, cfg) == 5e-5);
  CHECK(lr_at(1000, cfg) == 0.0);
  CHECK(lr_at(550, cfg) == doctest::Approx(2.5e-5));
  CHECK_THROWS_AS(lr_at(1001, cfg), ContractError);
  CHECK_THROWS_AS(ScheduleConfig({5e-5, 0.1, 5}).warmup_steps(), ContractError);
}

TEST_CASE("lr_at is continuous") {
  for (std::uint64_t total : {10ULL, 37ULL, 250ULL, 1001ULL}) {
    ScheduleConfig cfg{5e-5, 0.1, total};
    const double w = static_cast<double>(cfg.warmup_steps());
    const double bound = cfg.base_lr / std::min(w, static_cast<double>(total) - w) + 1e-15;
    for (std::uint64_t s = 0; s < total; ++s) CHECK(std::abs(lr_at(s, cfg) - lr_at(s + 1, cfg)) <= bound);
  }
}
