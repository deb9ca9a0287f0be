#include "psim/clipping.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace psim::clip {

void proj_eta_inplace(FlatGrad& g, Norm norm, double eta) {
  if (eta <= 0.0) throw std::invalid_argument("proj_eta: bound must be > 0");
  if (std::isinf(eta)) return;
  if (norm == Norm::l2) {
    const double n2 = g.norm_l2();
    if (n2 > eta) g.scale_inplace(eta / n2);
  } else {
    for (auto& seg : g.segments)
      for (double& v : seg.mutable_values()) v = std::clamp(v, -eta, eta);
  }
}

FlatGrad proj_eta(const FlatGrad& g, Norm norm, double eta) {
  FlatGrad out = g.clone();
  proj_eta_inplace(out, norm, eta);
  return out;
}

FlatGrad clip_gradient(const std::vector<FlatGrad>& updates, const ClipConfig& cfg) {
  if (updates.empty()) throw std::invalid_argument("clip_gradient: no updates");
  if (cfg.mode != Mode::none && !(cfg.bound > 0.0))
    throw std::invalid_argument("clip_gradient: bound must be > 0");

  if (cfg.mode == Mode::before_aggregation) {
    FlatGrad agg = proj_eta(updates[0], cfg.norm, cfg.bound);
    for (size_t n = 1; n < updates.size(); ++n)
      agg.add_scaled_inplace(proj_eta(updates[n], cfg.norm, cfg.bound), 1.0);
    return agg;
  }

  FlatGrad agg = updates[0].clone();
  for (size_t n = 1; n < updates.size(); ++n) agg.add_scaled_inplace(updates[n], 1.0);
  if (cfg.mode == Mode::after_aggregation) proj_eta_inplace(agg, cfg.norm, cfg.bound);
  return agg;
}

}  // namespace psim::clip
