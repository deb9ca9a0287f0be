#include "psim/attack_online.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace psim::attack_online {

namespace ad = psim::autodiff;
namespace md = psim::models;

using ad::FlatGrad;
using ad::grad;
using ad::Tensor;
using data::Batch;

namespace {

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void validate_pgd(const PgdConfig& pgd) {
  if (pgd.epsilon < 0.0) throw std::invalid_argument("pgd: epsilon must be >= 0");
  if (pgd.iterations < 1) throw std::invalid_argument("pgd: iterations must be >= 1");
  if (pgd.epsilon > 0.0 && pgd.step_size <= 0.0)
    throw std::invalid_argument("pgd: step_size must be > 0");
}

/// x[row] += dir * alpha * sign(g[row]) for masked rows, then project back
/// into the eps-ball around the original pixels and into [0,1].
void signed_step_and_project(Batch& b, const Batch& orig, const Tensor& gx,
                             double alpha, double eps, double dir,
                             const std::vector<int>& mask) {
  const int d = b.cols;
  const auto& g = gx.values();
  for (const int r : mask) {
    double* row = b.inputs.data() + size_t(r) * d;
    const double* o = orig.inputs.data() + size_t(r) * d;
    const double* gr = g.data() + size_t(r) * d;
    for (int j = 0; j < d; ++j) {
      double v = row[j] + dir * alpha * sgn(gr[j]);
      v = std::clamp(v, o[j] - eps, o[j] + eps);
      row[j] = std::clamp(v, 0.0, 1.0);
    }
  }
}

std::vector<int> all_rows(const Batch& b) {
  std::vector<int> rows(static_cast<size_t>(b.rows));
  for (int i = 0; i < b.rows; ++i) rows[static_cast<size_t>(i)] = i;
  return rows;
}

/// Constant 1/||g||_2 factors for the normalization trick (detached, so they
/// rescale without adding gradient paths).
double inv_norm_or_one(double n) { return n > 0.0 ? 1.0 / n : 1.0; }

FlatGrad graph_scaled(const FlatGrad& g, double c) {
  FlatGrad out;
  out.segments.reserve(g.segments.size());
  for (const Tensor& s : g.segments) out.segments.push_back(ad::cmul(s, c));
  return out;
}

struct PertStats {
  double linf = 0.0;
  double l2_mean = 0.0;
};

PertStats perturbation_stats(const Batch& crafted, const Batch& orig) {
  PertStats st;
  double l2_total = 0.0;
  for (int i = 0; i < crafted.rows; ++i) {
    double row2 = 0.0;
    for (int j = 0; j < crafted.cols; ++j) {
      const double d = crafted.inputs[size_t(i) * crafted.cols + j] -
                       orig.inputs[size_t(i) * crafted.cols + j];
      st.linf = std::max(st.linf, std::fabs(d));
      row2 += d * d;
    }
    l2_total += std::sqrt(row2);
  }
  st.l2_mean = crafted.rows > 0 ? l2_total / crafted.rows : 0.0;
  return st;
}

}  // namespace

data::Batch craft_vanilla_poison(const md::ModelState& model, const Batch& trigger,
                                 const Batch& val, const PgdConfig& pgd,
                                 double loss_scale, const std::vector<int>* mask) {
  validate_pgd(pgd);
  Batch crafted = trigger;
  if (pgd.epsilon == 0.0) return crafted;  // zero budget: unchanged by contract
  const std::vector<int> rows = mask ? *mask : all_rows(trigger);
  if (rows.empty()) return crafted;

  const std::vector<Tensor> leaves = md::make_param_leaves(model);
  const md::LossGraph lv = md::loss_shared(leaves, model.arch, val, 1.0);
  const FlatGrad g_val = grad(lv.loss, leaves, /*create_graph=*/false);

  for (int c = 0; c < pgd.iterations; ++c) {
    const md::LossGraph lp = md::loss_shared(leaves, model.arch, crafted, loss_scale,
                                             /*input_requires_grad=*/true);
    const FlatGrad g_p = grad(lp.loss, leaves, /*create_graph=*/true);
    const Tensor s = ad::dot_graph(g_p, g_val);
    const std::vector<Tensor> gx = ad::input_grad(s, {lp.input});
    // min_P grad(L_val) . grad(L_P): descend the alignment scalar.
    signed_step_and_project(crafted, trigger, gx[0], pgd.step_size, pgd.epsilon,
                            -1.0, rows);
  }
  return crafted;
}

AccumStepResult accumulative_step(const md::ModelState& model, const Batch& clean_batch,
                                  TriggerState& trigger, const Batch& val,
                                  const AccumulativeConfig& acc, const PgdConfig& pgd,
                                  const std::vector<int>& batch_mask) {
  validate_pgd(pgd);
  AccumStepResult res;
  res.crafted = clean_batch;
  if (pgd.epsilon == 0.0 || batch_mask.empty()) return res;

  const std::vector<Tensor> leaves = md::make_param_leaves(model);
  const auto& arch = model.arch;
  const double lambda = acc.lambda_tradeoff;

  // Clean-batch gradient: the stopped "keeping accuracy" term of the bracket.
  FlatGrad g_clean;
  {
    const md::LossGraph lc = md::loss_shared(leaves, arch, clean_batch, 1.0);
    g_clean = grad(lc.loss, leaves, false).clone();
  }
  double clean_scale = 1.0;
  if (acc.tricks.normalize_grads) {
    clean_scale = inv_norm_or_one(g_clean.norm_l2());
    g_clean.scale_inplace(clean_scale);
  }

  // Validation gradient graph; constant across the PGD iterations.
  const md::LossGraph lv = md::loss_shared(leaves, arch, val, 1.0);
  FlatGrad g_val = grad(lv.loss, leaves, /*create_graph=*/true);
  if (acc.tricks.normalize_grads)
    g_val = graph_scaled(g_val, inv_norm_or_one(g_val.norm_l2()));

  // Norm constant for the trigger gradient, from the poisoned trigger by
  // default or the clean one when the flag asks for it.
  auto trigger_norm_scale = [&](const FlatGrad& g_p_current) {
    if (!acc.tricks.normalize_grads) return 1.0;
    if (!acc.tricks.normalize_from_clean_trigger)
      return inv_norm_or_one(g_p_current.norm_l2());
    const md::LossGraph lt =
        md::loss_shared(leaves, arch, trigger.original, trigger.loss_scale);
    return inv_norm_or_one(grad(lt.loss, leaves, false).norm_l2());
  };

  const bool optimize_p = trigger.optimizing;

  if (!optimize_p) {
    // Fixed trigger: the sensitization term G_t is constant across the PGD
    // loop, so compute it once.
    FlatGrad g_p;
    {
      const md::LossGraph lp =
          md::loss_shared(leaves, arch, trigger.current, trigger.loss_scale);
      g_p = grad(lp.loss, leaves, /*create_graph=*/true);
    }
    const double p_scale = trigger_norm_scale(g_p);
    const Tensor s = ad::dot_graph(g_val, graph_scaled(g_p, p_scale));
    FlatGrad G = grad(s, leaves, false).clone();
    res.g_norm = G.norm_l2();
    FlatGrad bracket = g_clean.plus(G.scaled(lambda));

    for (int c = 0; c < pgd.iterations; ++c) {
      const md::LossGraph la = md::loss_shared(leaves, arch, res.crafted, 1.0,
                                               /*input_requires_grad=*/true);
      const FlatGrad g_a = grad(la.loss, leaves, /*create_graph=*/true);
      const Tensor h = ad::dot_graph(g_a, bracket);
      if (c == 0) res.h_first = h.item();
      const std::vector<Tensor> gx = ad::input_grad(h, {la.input});
      signed_step_and_project(res.crafted, clean_batch, gx[0], pgd.step_size,
                              pgd.epsilon, +1.0, batch_mask);
    }
    {
      const md::LossGraph la = md::loss_shared(leaves, arch, res.crafted, 1.0);
      res.h_final = grad(la.loss, leaves, false).dot(bracket);
    }
    return res;
  }

  // Jointly optimized trigger: G_t depends on the current P(S_T), so the
  // graph is rebuilt every iteration and the trigger pixels receive their
  // share of dH/dx through it.
  for (int c = 0; c < pgd.iterations; ++c) {
    const md::LossGraph lp = md::loss_shared(leaves, arch, trigger.current,
                                             trigger.loss_scale,
                                             /*input_requires_grad=*/true);
    FlatGrad g_p = grad(lp.loss, leaves, /*create_graph=*/true);
    const double p_scale = trigger_norm_scale(g_p);
    const Tensor s = ad::dot_graph(g_val, graph_scaled(g_p, p_scale));
    const FlatGrad G = grad(s, leaves, /*create_graph=*/true);

    FlatGrad bracket;
    bracket.segments.reserve(G.segments.size());
    for (size_t k = 0; k < G.segments.size(); ++k)
      bracket.segments.push_back(
          ad::add(g_clean.segments[k], ad::cmul(G.segments[k], lambda)));

    const md::LossGraph la = md::loss_shared(leaves, arch, res.crafted, 1.0,
                                             /*input_requires_grad=*/true);
    const FlatGrad g_a = grad(la.loss, leaves, /*create_graph=*/true);
    const Tensor h = ad::dot_graph(g_a, bracket);
    if (c == 0) res.h_first = h.item();
    res.g_norm = G.norm_l2();

    const std::vector<Tensor> gx = ad::input_grad(h, {la.input, lp.input});
    signed_step_and_project(res.crafted, clean_batch, gx[0], pgd.step_size,
                            pgd.epsilon, +1.0, batch_mask);
    signed_step_and_project(trigger.current, trigger.original, gx[1], pgd.step_size,
                            pgd.epsilon, +1.0, trigger.mask);
  }
  {
    const md::LossGraph lp = md::loss_shared(leaves, arch, trigger.current,
                                             trigger.loss_scale);
    FlatGrad g_p = grad(lp.loss, leaves, /*create_graph=*/true);
    const double p_scale = trigger_norm_scale(g_p);
    const Tensor s = ad::dot_graph(g_val, graph_scaled(g_p, p_scale));
    FlatGrad G = grad(s, leaves, false).clone();
    FlatGrad bracket = g_clean.plus(G.scaled(lambda));
    const md::LossGraph la = md::loss_shared(leaves, arch, res.crafted, 1.0);
    res.h_final = grad(la.loss, leaves, false).dot(bracket);
  }
  return res;
}

OnlineRunResult run_accumulative_attack(
    const md::ModelState& burn_in_model, const data::Dataset& train,
    const data::StreamSchedule& schedule, OnlineMode mode,
    const AccumulativeConfig& acc, const PgdConfig& pgd,
    const md::OptimConfig& optim, const clip::ClipConfig& clip_cfg,
    const md::TriggerConfig& trigger_cfg, bool poisoned_trigger,
    const data::Batch& monitor_set, const data::Dataset& eval,
    uint64_t attack_seed) {
  if (static_cast<int>(schedule.accumulative.size()) < acc.steps)
    throw std::invalid_argument(
        "run_accumulative_attack: schedule provides " +
        std::to_string(schedule.accumulative.size()) + " accumulative batches, " +
        std::to_string(acc.steps) + " requested");

  OnlineRunResult out;
  out.model = burn_in_model;

  const double floor =
      acc.accuracy_floor.value_or(md::accuracy(out.model, monitor_set) - 0.03);
  out.resolved_accuracy_floor = floor;

  // Trigger setup. The vanilla baseline crafts at trigger time (against the
  // model it will hit); the accumulative attack fixes its poisoned trigger at
  // the burn-in parameters so the phase can sensitize against it.
  TriggerState trig;
  trig.original = schedule.trigger;
  trig.current = schedule.trigger;
  trig.loss_scale = trigger_cfg.loss_scale;
  trig.optimizing = mode == OnlineMode::accumulative && acc.tricks.optimize_trigger;
  {
    Rng trig_rng(Rng::derive(attack_seed, "trigger-mask"));
    trig.mask = data::ratio_mask(schedule.trigger, acc.ratio, trig_rng);
  }
  if (mode == OnlineMode::accumulative && poisoned_trigger)
    trig.current = craft_vanilla_poison(out.model, trig.original, schedule.validation,
                                        pgd, trigger_cfg.loss_scale, &trig.mask);

  const bool crafting_mode = mode == OnlineMode::accumulative;
  md::OptimConfig phase_optim = optim;
  if (optim.momentum_override) phase_optim.momentum = *optim.momentum_override;

  bool halted = false;
  for (int t = 0; t < acc.steps && !halted; ++t) {
    const Batch clean_batch = data::gather(train, schedule.accumulative[t]);
    StepTrace trace;
    trace.step = t;
    trace.monitor_accuracy = md::accuracy(out.model, monitor_set);
    const bool floor_ok = trace.monitor_accuracy >= floor;
    if (!floor_ok) {
      trace.intervention = true;
      ++out.interventions;
      if (acc.early_stop_halts) halted = true;
    }

    Batch feed = clean_batch;
    if (crafting_mode && floor_ok && !halted) {
      Rng mask_rng(Rng::derive(attack_seed, "mask-" + std::to_string(t)));
      const std::vector<int> mask = data::ratio_mask(clean_batch, acc.ratio, mask_rng);
      Batch val = schedule.validation;
      if (acc.tricks.resample_val) {
        Rng val_rng(Rng::derive(attack_seed, "val-" + std::to_string(t)));
        val = data::bootstrap_validation(schedule, val_rng);
      }
      AccumStepResult step = accumulative_step(out.model, clean_batch, trig, val,
                                               acc, pgd, mask);
      if (!std::isfinite(step.h_final) || !std::isfinite(step.h_first))
        throw std::runtime_error("accumulative_step: non-finite objective at step " +
                                 std::to_string(t));
      feed = std::move(step.crafted);
      trace.crafted = !mask.empty() && pgd.epsilon > 0.0;
      trace.h_first = step.h_first;
      trace.h_final = step.h_final;
      trace.g_norm = step.g_norm;
      const PertStats ps = perturbation_stats(feed, clean_batch);
      trace.pert_linf = ps.linf;
      trace.pert_l2_mean = ps.l2_mean;
      out.fed_perturbed_samples += static_cast<int64_t>(mask.size());
      out.fed_clean_samples += clean_batch.rows - static_cast<int64_t>(mask.size());
    } else {
      out.fed_clean_samples += clean_batch.rows;
    }

    if (halted) {
      out.steps.push_back(trace);
      break;
    }

    const md::LossGraph lg = md::loss(out.model, feed, 1.0);
    FlatGrad g = grad(lg.loss, lg.params, false);
    g = clip::clip_gradient({g}, clip_cfg);
    trace.update_norm_l2 = g.norm_l2();
    trace.update_norm_linf = g.norm_linf();
    out.model = md::sgd_step(std::move(out.model), phase_optim, g);
    out.steps.push_back(trace);
  }

  // Single trigger update.
  out.accuracy_before_trigger = md::accuracy(out.model, eval);
  if (mode == OnlineMode::vanilla && poisoned_trigger)
    trig.current = craft_vanilla_poison(out.model, trig.original, schedule.validation,
                                        pgd, trigger_cfg.loss_scale, &trig.mask);
  const Batch& trigger_batch =
      (mode == OnlineMode::clean || !poisoned_trigger) && !trig.optimizing
          ? trig.original
          : trig.current;
  out.trigger_pert_linf = perturbation_stats(trigger_batch, trig.original).linf;
  out.fed_perturbed_samples += out.trigger_pert_linf > 0.0
                                   ? static_cast<int64_t>(trig.mask.size())
                                   : 0;
  out.fed_clean_samples += out.trigger_pert_linf > 0.0
                               ? trigger_batch.rows - static_cast<int64_t>(trig.mask.size())
                               : trigger_batch.rows;

  md::OptimConfig trig_optim = optim;
  if (optim.momentum_override && acc.tricks.momentum_on_trigger)
    trig_optim.momentum = *optim.momentum_override;

  const md::LossGraph lg = md::loss(out.model, trigger_batch, trigger_cfg.loss_scale);
  FlatGrad g = grad(lg.loss, lg.params, false);
  g = clip::clip_gradient({g}, clip_cfg);
  out.trigger_update_norm_l2 = g.norm_l2();
  out.trigger_update_norm_linf = g.norm_linf();
  out.model = md::sgd_step(std::move(out.model), trig_optim, g);

  out.accuracy_after_trigger = md::accuracy(out.model, eval);
  out.single_step_drop = out.accuracy_before_trigger - out.accuracy_after_trigger;
  return out;
}

}  // namespace psim::attack_online
