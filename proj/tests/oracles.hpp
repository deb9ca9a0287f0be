#pragma once

// Test-only oracles: straight-line (graph-free) forward passes and central
// finite differences. These deliberately share no code with the library's
// graph path.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "psim/data_stream.hpp"
#include "psim/models.hpp"
#include "psim/rng.hpp"

namespace oracles {

using ParamVecs = std::vector<std::vector<double>>;

/// Plain-double forward of scale * mean cross-entropy for logreg/mlp.
inline double ce_loss(const psim::models::Architecture& arch, const ParamVecs& params,
                      const psim::data::Batch& batch, double scale) {
  using Kind = psim::models::Architecture::Kind;
  const int n = batch.rows;
  const int d = arch.input_dim;
  const int k = arch.classes;
  double total = 0.0;
  std::vector<double> z(static_cast<size_t>(k));
  std::vector<double> h(arch.kind == Kind::mlp ? static_cast<size_t>(arch.hidden) : 0);
  for (int i = 0; i < n; ++i) {
    const double* x = batch.inputs.data() + static_cast<size_t>(i) * d;
    if (arch.kind == Kind::logreg) {
      for (int j = 0; j < k; ++j) {
        double s = params[1][static_cast<size_t>(j)];
        for (int r = 0; r < d; ++r) s += x[r] * params[0][static_cast<size_t>(r) * k + j];
        z[static_cast<size_t>(j)] = s;
      }
    } else {
      const int hd = arch.hidden;
      for (int c = 0; c < hd; ++c) {
        double s = params[1][static_cast<size_t>(c)];
        for (int r = 0; r < d; ++r) s += x[r] * params[0][static_cast<size_t>(r) * hd + c];
        h[static_cast<size_t>(c)] = s > 0.0 ? s : 0.0;
      }
      for (int j = 0; j < k; ++j) {
        double s = params[3][static_cast<size_t>(j)];
        for (int c = 0; c < hd; ++c) s += h[static_cast<size_t>(c)] * params[2][static_cast<size_t>(c) * k + j];
        z[static_cast<size_t>(j)] = s;
      }
    }
    double mx = z[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, z[static_cast<size_t>(j)]);
    double se = 0.0;
    for (int j = 0; j < k; ++j) se += std::exp(z[static_cast<size_t>(j)] - mx);
    const double logp = z[static_cast<size_t>(batch.labels[static_cast<size_t>(i)])] - mx - std::log(se);
    total -= logp;
  }
  return scale * total / n;
}

/// Central finite differences of a scalar field over stacked parameter arrays.
inline ParamVecs central_diff(const std::function<double(const ParamVecs&)>& f,
                              const ParamVecs& x0, double h) {
  ParamVecs out;
  ParamVecs x = x0;
  for (size_t k = 0; k < x0.size(); ++k) {
    std::vector<double> g(x0[k].size());
    for (size_t i = 0; i < x0[k].size(); ++i) {
      const double orig = x[k][i];
      x[k][i] = orig + h;
      const double fp = f(x);
      x[k][i] = orig - h;
      const double fm = f(x);
      x[k][i] = orig;
      g[i] = (fp - fm) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Norm-wise relative error between two stacked vectors.
inline double rel_err(const ParamVecs& a, const ParamVecs& b) {
  double diff2 = 0.0, ref2 = 0.0;
  if (a.size() != b.size()) throw std::invalid_argument("rel_err: size mismatch");
  for (size_t k = 0; k < a.size(); ++k) {
    if (a[k].size() != b[k].size()) throw std::invalid_argument("rel_err: dim mismatch");
    for (size_t i = 0; i < a[k].size(); ++i) {
      const double d = a[k][i] - b[k][i];
      diff2 += d * d;
      ref2 += b[k][i] * b[k][i];
    }
  }
  return std::sqrt(diff2) / std::max(std::sqrt(ref2), 1e-12);
}

inline ParamVecs segments_values(const psim::autodiff::FlatGrad& g) {
  ParamVecs out;
  for (const auto& s : g.segments) out.push_back(s.values());
  return out;
}

/// Random batch with pixels in [0,1] and labels in [0, classes).
inline psim::data::Batch random_batch(int rows, int cols, int classes, psim::Rng& rng) {
  psim::data::Batch b;
  b.rows = rows;
  b.cols = cols;
  b.inputs.resize(static_cast<size_t>(rows) * cols);
  for (double& v : b.inputs) v = rng.uniform();
  b.labels.resize(static_cast<size_t>(rows));
  for (int& y : b.labels) y = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(classes)));
  b.indices.resize(static_cast<size_t>(rows), 0);
  return b;
}

/// Model with parameters resampled from a wider range than init_model uses,
/// so second derivatives are not vanishingly small.
inline psim::models::ModelState random_model(const psim::models::Architecture& arch,
                                             psim::Rng& rng, double spread = 0.6) {
  psim::models::ModelState m = psim::models::init_model(arch, rng.next_u64());
  for (auto& seg : m.params)
    for (double& v : seg) v = rng.uniform(-spread, spread);
  return m;
}

}  // namespace oracles
