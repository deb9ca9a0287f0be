#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "psim/autodiff.hpp"
#include "psim/data_stream.hpp"

namespace psim::models {

using autodiff::FlatGrad;
using autodiff::Tensor;

struct Architecture {
  enum class Kind { logreg, mlp };
  Kind kind = Kind::mlp;
  int input_dim = 784;
  int hidden = 256;  // mlp only
  int classes = 10;

  static Architecture logreg(int input_dim, int classes);
  static Architecture mlp(int input_dim, int hidden, int classes);
  size_t param_count() const;
  std::string str() const;
  bool operator==(const Architecture&) const = default;
};

/// Parameter vector plus optimizer state. Parameters are stored by value in
/// declaration order (logreg: W, b; mlp: W1, b1, W2, b2) and wrapped as graph
/// leaves per step.
struct ModelState {
  Architecture arch;
  std::vector<std::vector<double>> params;
  std::vector<std::vector<double>> momentum;
  uint64_t rng_seed = 0;

  size_t param_count() const;
};

struct OptimConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// Momentum used for accumulative-phase model updates when set (the
  /// weight-momentum trick); run loops decide which steps it covers.
  std::optional<double> momentum_override;
};

struct TriggerConfig {
  double loss_scale = 1.0;  // multiplier on the trigger-batch loss
};

/// Deterministic uniform fan-in initialization. Throws on zero-sized layers.
ModelState init_model(const Architecture& arch, uint64_t seed);

/// A loss scalar together with the leaves it was built from.
struct LossGraph {
  Tensor loss;
  std::vector<Tensor> params;  // model declaration order
  Tensor input;                // {N, d} leaf
};

/// scale x mean cross-entropy over the batch, differentiable at least twice
/// w.r.t. both parameters and (when requested) inputs.
/// Throws on empty batches and out-of-range labels.
LossGraph loss(const ModelState& model, const data::Batch& batch, double scale,
               bool input_requires_grad = false);

/// Fresh parameter leaves for the current values; several losses built over
/// one leaf set share differentiation targets (needed for cross-loss
/// second-order terms).
std::vector<Tensor> make_param_leaves(const ModelState& model);

/// Same loss, built over caller-provided parameter leaves.
LossGraph loss_shared(const std::vector<Tensor>& params, const Architecture& arch,
                      const data::Batch& batch, double scale,
                      bool input_requires_grad = false);

/// v <- mu*v + (g + wd*theta); theta <- theta - lr*v. With mu=0, wd=0 this is
/// exactly theta - lr*g. Throws std::runtime_error on non-finite gradients.
ModelState sgd_step(ModelState model, const OptimConfig& optim, const FlatGrad& grads);

/// Post-ReLU penultimate activations, one row per input (logreg: the inputs
/// themselves). Graph-free forward.
std::vector<double> features(const ModelState& model, const std::vector<double>& inputs,
                             int rows);
int feature_dim(const Architecture& arch);

/// Graph-free logits, row-major rows x classes.
std::vector<double> logits(const ModelState& model, const std::vector<double>& inputs,
                           int rows);

/// Fraction of argmax-correct predictions; ties break to the lowest class.
double accuracy(const ModelState& model, const std::vector<double>& inputs,
                const std::vector<int>& labels);
double accuracy(const ModelState& model, const data::Batch& batch);
double accuracy(const ModelState& model, const data::Dataset& ds);

/// Per-sample gradients of scale x CE, one FlatGrad per row. Closed-form
/// layer backprop; used to simulate per-client updates without one autodiff
/// graph per sample. Matches the autodiff path to roundoff.
std::vector<FlatGrad> per_sample_grads(const ModelState& model, const data::Batch& batch,
                                       double scale);

/// l2 norms of the per-sample gradients without materializing them: the
/// per-layer blocks are outer products, so their Frobenius norms factorize.
std::vector<double> per_sample_grad_norms(const ModelState& model,
                                          const data::Batch& batch, double scale);

/// Batch-mean gradient through the graph-free path is intentionally not
/// provided; use loss() + grad() so every model update flows through one code
/// path.

void save_checkpoint(const ModelState& model, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace psim::models
