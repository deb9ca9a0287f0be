#pragma once

#include <limits>
#include <vector>

#include "psim/autodiff.hpp"

namespace psim::clip {

using autodiff::FlatGrad;

enum class Norm { l2, linf };
enum class Mode { none, after_aggregation, before_aggregation };

/// Norm-clipping capacity model: the bound eta caps either each client update
/// (before aggregation) or the server-side aggregate (after aggregation).
/// mode == none disables the server defense; eta = inf disables the
/// attacker-side projection.
struct ClipConfig {
  Norm norm = Norm::l2;
  double bound = std::numeric_limits<double>::infinity();
  Mode mode = Mode::none;
};

/// ||out||_p <= eta: l2 rescales by min(1, eta/||g||), linf clamps
/// elementwise to [-eta, eta]. Identity inside the ball.
FlatGrad proj_eta(const FlatGrad& g, Norm norm, double eta);
void proj_eta_inplace(FlatGrad& g, Norm norm, double eta);

/// Server-side aggregate per the mode formula:
///   none:               sum_n G_n
///   after_aggregation:  Clip_eta(sum_n G_n)
///   before_aggregation: sum_n Clip_eta(G_n)
FlatGrad clip_gradient(const std::vector<FlatGrad>& updates, const ClipConfig& cfg);

}  // namespace psim::clip
