#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "psim/clipping.hpp"
#include "psim/data_stream.hpp"
#include "psim/models.hpp"

namespace psim::attack_online {

using autodiff::FlatGrad;

/// Signed-gradient ascent under an l-inf ball of radius epsilon around the
/// clean pixels, intersected with [0,1]. Default step size is 2*eps/C.
struct PgdConfig {
  double epsilon = 16.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int iterations = 16;

  static PgdConfig with_default_step(double eps, int iters) {
    return {eps, iters > 0 ? 2.0 * eps / iters : 0.0, iters};
  }
};

struct Tricks {
  bool resample_val = false;      // bootstrap a fresh S_val each step
  bool normalize_grads = false;   // unit-l2 the first-order gradients in H_t
  bool normalize_from_clean_trigger = false;  // norm constant from clean S_T
  bool optimize_trigger = false;  // keep updating the poisoned trigger per step
  bool momentum_on_trigger = false;  // apply the momentum override to the trigger step too
};

struct AccumulativeConfig {
  double lambda_tradeoff = 0.02;
  /// Crafting is suspended while monitored accuracy sits below this floor
  /// (the gamma constraint). Resolved by the run loop when unset.
  std::optional<double> accuracy_floor;
  int steps = 200;
  double ratio = 1.0;  // fraction of rows per batch that may be perturbed
  Tricks tricks;
  bool early_stop_halts = false;  // true: stop the stream instead of pausing malice
};

/// Current poisoned trigger P(S_T). `current` starts at the (possibly
/// pre-crafted) trigger and is updated in place when the trigger is being
/// optimized jointly with the accumulative batches.
struct TriggerState {
  data::Batch original;
  data::Batch current;
  std::vector<int> mask;  // rows allowed to change
  double loss_scale = 1.0;
  bool optimizing = false;
};

/// One crafted batch plus alignment diagnostics.
struct AccumStepResult {
  data::Batch crafted;
  double h_first = 0.0;  // objective value at the clean batch
  double h_final = 0.0;  // objective value after the last PGD iterate
  double g_norm = 0.0;   // l2 norm of the sensitization term G_t
};

struct StepTrace {
  int step = 0;
  double monitor_accuracy = 0.0;
  bool crafted = false;
  bool intervention = false;  // monitor tripped at this step boundary
  double h_first = 0.0, h_final = 0.0, g_norm = 0.0;
  double update_norm_l2 = 0.0, update_norm_linf = 0.0;
  double pert_linf = 0.0, pert_l2_mean = 0.0;
};

struct OnlineRunResult {
  models::ModelState model;
  std::vector<StepTrace> steps;
  double accuracy_before_trigger = 0.0;
  double accuracy_after_trigger = 0.0;
  double single_step_drop = 0.0;
  double trigger_update_norm_l2 = 0.0;
  double trigger_update_norm_linf = 0.0;
  double trigger_pert_linf = 0.0;
  double resolved_accuracy_floor = 0.0;
  int interventions = 0;
  int64_t fed_clean_samples = 0;
  int64_t fed_perturbed_samples = 0;
};

enum class OnlineMode { clean, vanilla, accumulative };

/// One-shot poisoning of the trigger batch: PGD descent on
/// grad(L(S_val)) . grad(L(P(S_T))) at fixed parameters. epsilon = 0 returns
/// the input unchanged.
data::Batch craft_vanilla_poison(const models::ModelState& model,
                                 const data::Batch& trigger, const data::Batch& val,
                                 const PgdConfig& pgd, double loss_scale = 1.0,
                                 const std::vector<int>* mask = nullptr);

/// One accumulative-phase crafting step (the inner loop of the online
/// algorithm): ascends H_t = grad(L(A_t)) . [grad(L(S_t))_const + lambda*G_t]
/// over the batch pixels (and the trigger pixels when optimizing), where
/// G_t = grad_theta(grad(L(S_val)) . grad(L(P(S_T)))). The clean-batch term
/// in the bracket never carries gradients back into the crafting variables.
AccumStepResult accumulative_step(const models::ModelState& model,
                                  const data::Batch& clean_batch,
                                  TriggerState& trigger, const data::Batch& val,
                                  const AccumulativeConfig& acc, const PgdConfig& pgd,
                                  const std::vector<int>& batch_mask);

/// Full run from a burn-in model: T stream steps (crafted when the mode says
/// so and the accuracy monitor allows), then the single trigger update.
/// monitor_set drives the per-step gamma constraint; eval is the held-out
/// set scored once before and once after the trigger.
OnlineRunResult run_accumulative_attack(
    const models::ModelState& burn_in_model, const data::Dataset& train,
    const data::StreamSchedule& schedule, OnlineMode mode,
    const AccumulativeConfig& acc, const PgdConfig& pgd,
    const models::OptimConfig& optim, const clip::ClipConfig& clip_cfg,
    const models::TriggerConfig& trigger_cfg, bool poisoned_trigger,
    const data::Batch& monitor_set, const data::Dataset& eval,
    uint64_t attack_seed);

}  // namespace psim::attack_online
