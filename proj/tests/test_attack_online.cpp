#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "psim/attack_online.hpp"

using namespace psim;
using namespace psim::attack_online;
namespace md = psim::models;
using autodiff::FlatGrad;
using autodiff::grad;
using data::Batch;

namespace {

/// Closed-form mean-CE gradient for logreg, test-side implementation.
oracles::ParamVecs logreg_grad(const md::ModelState& m, const Batch& b) {
  const int d = m.arch.input_dim, k = m.arch.classes, n = b.rows;
  oracles::ParamVecs g = {std::vector<double>(size_t(d) * k, 0.0),
                          std::vector<double>(size_t(k), 0.0)};
  for (int i = 0; i < n; ++i) {
    const double* x = b.inputs.data() + size_t(i) * d;
    std::vector<double> z(static_cast<size_t>(k));
    for (int j = 0; j < k; ++j) {
      double s = m.params[1][size_t(j)];
      for (int r = 0; r < d; ++r) s += x[r] * m.params[0][size_t(r) * k + j];
      z[size_t(j)] = s;
    }
    double mx = z[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, z[size_t(j)]);
    double se = 0.0;
    for (int j = 0; j < k; ++j) se += std::exp(z[size_t(j)] - mx);
    for (int j = 0; j < k; ++j) {
      double p = std::exp(z[size_t(j)] - mx) / se;
      if (j == b.labels[size_t(i)]) p -= 1.0;
      p /= n;
      g[1][size_t(j)] += p;
      for (int r = 0; r < d; ++r) g[0][size_t(r) * k + j] += x[r] * p;
    }
  }
  return g;
}

double vecs_dot(const oracles::ParamVecs& a, const oracles::ParamVecs& b) {
  double s = 0.0;
  for (size_t k = 0; k < a.size(); ++k)
    for (size_t i = 0; i < a[k].size(); ++i) s += a[k][i] * b[k][i];
  return s;
}

double alignment_value(const md::ModelState& m, const Batch& val, const Batch& p) {
  return vecs_dot(logreg_grad(m, val), logreg_grad(m, p));
}

}  // namespace

TEST_CASE("vanilla poison with zero budget returns the input unchanged") {
  Rng rng(1);
  const auto arch = md::Architecture::logreg(6, 4);
  md::ModelState m = oracles::random_model(arch, rng);
  Batch trig = oracles::random_batch(5, 6, 4, rng);
  Batch val = oracles::random_batch(5, 6, 4, rng);
  PgdConfig pgd{0.0, 0.0, 4};
  const Batch out = craft_vanilla_poison(m, trig, val, pgd);
  CHECK(out.inputs == trig.inputs);
}

TEST_CASE("vanilla poison respects the l-inf ball and the pixel clamp") {
  Rng rng(2);
  const auto arch = md::Architecture::logreg(8, 3);
  md::ModelState m = oracles::random_model(arch, rng);
  Batch trig = oracles::random_batch(6, 8, 3, rng);
  Batch val = oracles::random_batch(6, 8, 3, rng);
  const double eps = 16.0 / 255.0;
  const Batch out = craft_vanilla_poison(m, trig, val, PgdConfig::with_default_step(eps, 10));
  for (size_t i = 0; i < out.inputs.size(); ++i) {
    CHECK(std::fabs(out.inputs[i] - trig.inputs[i]) <= eps + 1e-12);
    CHECK(out.inputs[i] >= 0.0);
    CHECK(out.inputs[i] <= 1.0);
  }
}

TEST_CASE("vanilla poison strictly lowers the gradient alignment on logreg") {
  Rng rng(3);
  const auto arch = md::Architecture::logreg(10, 4);
  md::ModelState m = oracles::random_model(arch, rng, 0.8);
  Batch trig = oracles::random_batch(8, 10, 4, rng);
  Batch val = oracles::random_batch(8, 10, 4, rng);
  const Batch out =
      craft_vanilla_poison(m, trig, val, PgdConfig::with_default_step(0.1, 20));
  const double before = alignment_value(m, val, trig);
  const double after = alignment_value(m, val, out);
  CHECK(after < before);
}

TEST_CASE("accumulative step: zero budget reduces to the clean batch") {
  Rng rng(4);
  const auto arch = md::Architecture::logreg(5, 3);
  md::ModelState m = oracles::random_model(arch, rng);
  Batch clean = oracles::random_batch(4, 5, 3, rng);
  TriggerState trig;
  trig.original = oracles::random_batch(4, 5, 3, rng);
  trig.current = trig.original;
  Batch val = oracles::random_batch(4, 5, 3, rng);
  AccumulativeConfig acc;
  acc.lambda_tradeoff = 0.0;
  std::vector<int> mask = {0, 1, 2, 3};
  const auto res = accumulative_step(m, clean, trig, val, acc, PgdConfig{0.0, 0.0, 4},
                                     mask);
  CHECK(res.crafted.inputs == clean.inputs);
}

TEST_CASE("one PGD iterate moves each masked pixel by exactly +-alpha or 0") {
  Rng rng(5);
  const auto arch = md::Architecture::logreg(6, 3);
  md::ModelState m = oracles::random_model(arch, rng);
  Batch clean = oracles::random_batch(5, 6, 3, rng);
  // keep pixels away from the clamp so only the sign step acts
  for (double& v : clean.inputs) v = 0.4 + 0.2 * v;
  TriggerState trig;
  trig.original = oracles::random_batch(5, 6, 3, rng);
  trig.current = trig.original;
  Batch val = oracles::random_batch(5, 6, 3, rng);
  AccumulativeConfig acc;
  const double alpha = 0.01;
  PgdConfig pgd{0.05, alpha, 1};
  std::vector<int> mask = {0, 2, 4};
  const auto res = accumulative_step(m, clean, trig, val, acc, pgd, mask);
  for (int i = 0; i < clean.rows; ++i) {
    const bool masked = i == 0 || i == 2 || i == 4;
    for (int j = 0; j < clean.cols; ++j) {
      const double d = res.crafted.inputs[size_t(i) * 6 + j] -
                       clean.inputs[size_t(i) * 6 + j];
      if (!masked) {
        CHECK(d == 0.0);
      } else {
        CHECK((std::fabs(d) == doctest::Approx(alpha).epsilon(1e-12) || d == 0.0));
      }
    }
  }
}

TEST_CASE("crafted H_t beats the clean batch and tracks the corner search") {
  Rng rng(6);
  const auto arch = md::Architecture::logreg(4, 3);
  md::ModelState m = oracles::random_model(arch, rng, 0.8);
  Batch clean = oracles::random_batch(2, 4, 3, rng);  // 8 pixels total
  for (double& v : clean.inputs) v = 0.3 + 0.4 * v;   // corners stay in [0,1]
  Batch val = oracles::random_batch(6, 4, 3, rng);
  TriggerState trig;
  trig.original = oracles::random_batch(3, 4, 3, rng);
  trig.current = trig.original;

  AccumulativeConfig acc;
  acc.lambda_tradeoff = 0.02;
  const double eps = 0.1;
  PgdConfig pgd = PgdConfig::with_default_step(eps, 8);
  std::vector<int> mask = {0, 1};

  // Test-side bracket: closed-form clean gradient + lambda * FD of the
  // alignment scalar s(theta) = grad L(val) . grad L(P).
  const oracles::ParamVecs g_clean = logreg_grad(m, clean);
  auto s_of = [&](const oracles::ParamVecs& p) {
    md::ModelState mm = m;
    mm.params = p;
    return alignment_value(mm, val, trig.current);
  };
  const oracles::ParamVecs G = oracles::central_diff(s_of, m.params, 1e-5);
  oracles::ParamVecs bracket = g_clean;
  for (size_t k = 0; k < bracket.size(); ++k)
    for (size_t i = 0; i < bracket[k].size(); ++i)
      bracket[k][i] += acc.lambda_tradeoff * G[k][i];

  auto h_of = [&](const Batch& b) { return vecs_dot(logreg_grad(m, b), bracket); };

  const auto res = accumulative_step(m, clean, trig, val, acc, pgd, mask);
  const double h_clean = h_of(clean);
  const double h_crafted = h_of(res.crafted);
  CHECK(res.h_first == doctest::Approx(h_clean).epsilon(1e-3));
  CHECK(h_crafted >= h_clean - 1e-12);  // ascent property

  // Exhaustive +-eps corner search over the 8 pixels.
  double h_best = h_clean;
  for (int bits = 0; bits < 256; ++bits) {
    Batch corner = clean;
    for (int p = 0; p < 8; ++p) {
      const double delta = (bits >> p) & 1 ? eps : -eps;
      corner.inputs[static_cast<size_t>(p)] =
          std::clamp(corner.inputs[static_cast<size_t>(p)] + delta, 0.0, 1.0);
    }
    h_best = std::max(h_best, h_of(corner));
  }
  CHECK(h_best >= h_clean);
  // PGD should recover a solid share of the achievable corner improvement.
  CHECK(h_crafted - h_clean >= 0.5 * (h_best - h_clean) - 1e-9);
}

TEST_CASE("degenerate accumulative run is bitwise identical to clean training") {
  data::SynthConfig synth;
  synth.train_count = 1200;
  synth.test_count = 300;
  synth.side = 7;
  synth.classes = 5;
  synth.seed = 31;
  const auto [train, test] = data::make_synthetic(synth);
  data::StreamSchedule sched = data::make_schedule(train, 20, 1, 10, 5, 100);

  const auto arch = md::Architecture::mlp(49, 12, 5);
  md::ModelState m0 = md::init_model(arch, 77);
  md::OptimConfig optim{0.1, 0.9, 1e-4, {}};
  clip::ClipConfig noclip;
  md::TriggerConfig trig_cfg{1.0};
  data::Batch monitor = data::gather(test, [&] {
    std::vector<int64_t> idx(200);
    for (int i = 0; i < 200; ++i) idx[static_cast<size_t>(i)] = i;
    return idx;
  }());

  AccumulativeConfig acc;
  acc.steps = 10;
  acc.lambda_tradeoff = 0.0;
  acc.ratio = 1.0;

  PgdConfig no_budget{0.0, 0.0, 1};
  const auto attacked =
      run_accumulative_attack(m0, train, sched, OnlineMode::accumulative, acc,
                              no_budget, optim, noclip, trig_cfg,
                              /*poisoned_trigger=*/false, monitor, test, 123);
  const auto clean =
      run_accumulative_attack(m0, train, sched, OnlineMode::clean, acc, no_budget,
                              optim, noclip, trig_cfg,
                              /*poisoned_trigger=*/false, monitor, test, 456);

  CHECK(attacked.model.params == clean.model.params);
  CHECK(attacked.accuracy_after_trigger == clean.accuracy_after_trigger);
  for (size_t i = 0; i < attacked.steps.size(); ++i)
    CHECK(attacked.steps[i].monitor_accuracy == clean.steps[i].monitor_accuracy);
}

TEST_CASE("per-batch constraints hold on every crafted step") {
  data::SynthConfig synth;
  synth.train_count = 1500;
  synth.test_count = 300;
  synth.side = 7;
  synth.classes = 5;
  synth.seed = 32;
  const auto [train, test] = data::make_synthetic(synth);
  data::StreamSchedule sched = data::make_schedule(train, 16, 1, 6, 6, 100);

  const auto arch = md::Architecture::logreg(49, 5);
  md::ModelState m0 = md::init_model(arch, 7);
  // a few clean steps so the model is not at init
  md::OptimConfig optim{0.1, 0.9, 1e-4, {}};
  for (int t = 0; t < 15; ++t) {
    const data::Batch b = data::gather(train, sched.burn_in[static_cast<size_t>(t)]);
    md::LossGraph lg = md::loss(m0, b, 1.0);
    m0 = md::sgd_step(std::move(m0), optim, grad(lg.loss, lg.params, false));
  }

  AccumulativeConfig acc;
  acc.steps = 6;
  acc.ratio = 0.5;
  acc.accuracy_floor = 0.0;  // never trips here
  PgdConfig pgd = PgdConfig::with_default_step(16.0 / 255.0, 4);

  data::Batch monitor = data::gather(test, [&] {
    std::vector<int64_t> idx(150);
    for (int i = 0; i < 150; ++i) idx[static_cast<size_t>(i)] = i;
    return idx;
  }());

  const auto res = run_accumulative_attack(
      m0, train, sched, OnlineMode::accumulative, acc, pgd, optim, clip::ClipConfig{},
      md::TriggerConfig{1.0}, /*poisoned_trigger=*/true, monitor, test, 99);

  REQUIRE(res.steps.size() == 6);
  int crafted_steps = 0;
  for (const auto& st : res.steps) {
    if (!st.crafted) continue;
    ++crafted_steps;
    CHECK(st.pert_linf <= pgd.epsilon + 1e-12);
    CHECK(st.monitor_accuracy >= *acc.accuracy_floor);
  }
  CHECK(crafted_steps == 6);
  CHECK(res.trigger_pert_linf <= pgd.epsilon + 1e-12);
  // ratio bookkeeping: 8 of 16 rows perturbed per step, plus the trigger rows
  CHECK(res.fed_perturbed_samples == 6 * 8 + 8);
  CHECK(res.single_step_drop ==
        res.accuracy_before_trigger - res.accuracy_after_trigger);
}

TEST_CASE("a floor above current accuracy suspends crafting") {
  data::SynthConfig synth;
  synth.train_count = 900;
  synth.test_count = 200;
  synth.side = 7;
  synth.classes = 5;
  synth.seed = 33;
  const auto [train, test] = data::make_synthetic(synth);
  data::StreamSchedule sched = data::make_schedule(train, 16, 1, 4, 8, 100);

  const auto arch = md::Architecture::logreg(49, 5);
  md::ModelState m0 = md::init_model(arch, 8);
  AccumulativeConfig acc;
  acc.steps = 4;
  acc.accuracy_floor = 1.01;  // unattainable: crafting never allowed
  PgdConfig pgd = PgdConfig::with_default_step(0.05, 2);

  data::Batch monitor = data::gather(test, {0, 1, 2, 3, 4, 5, 6, 7});
  const auto res = run_accumulative_attack(
      m0, train, sched, OnlineMode::accumulative, acc, pgd, md::OptimConfig{},
      clip::ClipConfig{}, md::TriggerConfig{1.0}, false, monitor, test, 5);
  CHECK(res.interventions == 4);
  for (const auto& st : res.steps) CHECK(!st.crafted);

  // halting variant stops the stream at the first tripped boundary
  acc.early_stop_halts = true;
  const auto halted = run_accumulative_attack(
      m0, train, sched, OnlineMode::accumulative, acc, pgd, md::OptimConfig{},
      clip::ClipConfig{}, md::TriggerConfig{1.0}, false, monitor, test, 5);
  CHECK(halted.steps.size() == 1);
}

TEST_CASE("run rejects a schedule shorter than T") {
  data::SynthConfig synth;
  synth.train_count = 600;
  synth.test_count = 100;
  synth.side = 7;
  synth.classes = 5;
  synth.seed = 34;
  const auto [train, test] = data::make_synthetic(synth);
  data::StreamSchedule sched = data::make_schedule(train, 16, 1, 3, 9, 100);
  const auto arch = md::Architecture::logreg(49, 5);
  md::ModelState m0 = md::init_model(arch, 9);
  AccumulativeConfig acc;
  acc.steps = 10;
  data::Batch monitor = data::gather(test, {0, 1, 2, 3});
  CHECK_THROWS_AS(run_accumulative_attack(m0, train, sched, OnlineMode::accumulative,
                                          acc, PgdConfig{}, md::OptimConfig{},
                                          clip::ClipConfig{}, md::TriggerConfig{1.0},
                                          false, monitor, test, 1),
                  std::invalid_argument);
}
