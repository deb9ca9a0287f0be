#include "psim/models.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace psim::models {

namespace ad = psim::autodiff;

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapMat = Eigen::Map<const RowMat>;
using MapMat = Eigen::Map<RowMat>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

std::vector<std::vector<int>> param_shapes(const Architecture& a) {
  if (a.kind == Architecture::Kind::logreg)
    return {{a.input_dim, a.classes}, {a.classes}};
  return {{a.input_dim, a.hidden}, {a.hidden}, {a.hidden, a.classes}, {a.classes}};
}

void check_batch(const Architecture& arch, const data::Batch& batch) {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  if (batch.cols != arch.input_dim)
    throw std::invalid_argument("loss: batch dim " + std::to_string(batch.cols) +
                                " does not match model input dim " +
                                std::to_string(arch.input_dim));
  for (const int y : batch.labels)
    if (y < 0 || y >= arch.classes)
      throw std::invalid_argument("loss: label " + std::to_string(y) +
                                  " out of range [0," +
                                  std::to_string(arch.classes) + ")");
}

/// z - logsumexp(z) per row, with the row max detached so exp stays bounded.
Tensor log_softmax(const Tensor& z) {
  const int n = z.shape()[0], k = z.shape()[1];
  std::vector<double> mx(static_cast<size_t>(n));
  const auto& zv = z.values();
  for (int i = 0; i < n; ++i) {
    double m = zv[size_t(i) * k];
    for (int j = 1; j < k; ++j) m = std::max(m, zv[size_t(i) * k + j]);
    mx[size_t(i)] = m;
  }
  const Tensor row_max = Tensor::leaf({n}, std::move(mx), false);
  const Tensor shifted = ad::sub(z, ad::tile_cols(row_max, k));
  const Tensor lse = ad::add(ad::log(ad::row_sum(ad::exp(shifted))), row_max);
  return ad::sub(z, ad::tile_cols(lse, k));
}

}  // namespace

Architecture Architecture::logreg(int input_dim, int classes) {
  return {Kind::logreg, input_dim, 0, classes};
}

Architecture Architecture::mlp(int input_dim, int hidden, int classes) {
  return {Kind::mlp, input_dim, hidden, classes};
}

size_t Architecture::param_count() const {
  size_t n = 0;
  for (const auto& s : param_shapes(*this)) {
    size_t m = 1;
    for (const int d : s) m *= static_cast<size_t>(d);
    n += m;
  }
  return n;
}

std::string Architecture::str() const {
  if (kind == Kind::logreg)
    return "logreg(" + std::to_string(input_dim) + "," + std::to_string(classes) + ")";
  return "mlp(" + std::to_string(input_dim) + "," + std::to_string(hidden) + "," +
         std::to_string(classes) + ")";
}

size_t ModelState::param_count() const { return arch.param_count(); }

ModelState init_model(const Architecture& arch, uint64_t seed) {
  if (arch.input_dim <= 0 || arch.classes <= 0 ||
      (arch.kind == Architecture::Kind::mlp && arch.hidden <= 0))
    throw std::invalid_argument("init_model: zero-sized layer in " + arch.str());
  ModelState m;
  m.arch = arch;
  m.rng_seed = seed;
  Rng rng(Rng::derive(seed, "model-init"));
  const auto shapes = param_shapes(arch);
  for (size_t k = 0; k < shapes.size(); ++k) {
    // fan-in of the layer this array belongs to (bias shares its weight's).
    const int fan_in = shapes[k].size() == 2 ? shapes[k][0]
                                             : shapes[k - 1][0];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    size_t n = 1;
    for (const int d : shapes[k]) n *= static_cast<size_t>(d);
    std::vector<double> vals(n);
    for (double& v : vals) v = rng.uniform(-bound, bound);
    m.params.push_back(std::move(vals));
    m.momentum.emplace_back(n, 0.0);
  }
  return m;
}

std::vector<Tensor> make_param_leaves(const ModelState& model) {
  std::vector<Tensor> leaves;
  const auto shapes = param_shapes(model.arch);
  for (size_t k = 0; k < shapes.size(); ++k)
    leaves.push_back(Tensor::leaf(shapes[k], model.params[k], true));
  return leaves;
}

LossGraph loss_shared(const std::vector<Tensor>& params, const Architecture& arch,
                      const data::Batch& batch, double scale,
                      bool input_requires_grad) {
  check_batch(arch, batch);
  if (scale <= 0.0) throw std::invalid_argument("loss: scale must be > 0");
  if (params.size() != param_shapes(arch).size())
    throw std::invalid_argument("loss_shared: parameter leaf count mismatch");
  const int n = batch.rows;
  const int classes = arch.classes;

  LossGraph g;
  g.params = params;
  g.input = Tensor::leaf({n, batch.cols}, batch.inputs, input_requires_grad);

  Tensor z;
  if (arch.kind == Architecture::Kind::logreg) {
    z = ad::add(ad::matmul(g.input, g.params[0]), ad::tile_rows(g.params[1], n));
  } else {
    const Tensor h = ad::relu(
        ad::add(ad::matmul(g.input, g.params[0]), ad::tile_rows(g.params[1], n)));
    z = ad::add(ad::matmul(h, g.params[2]), ad::tile_rows(g.params[3], n));
  }

  std::vector<double> onehot(size_t(n) * classes, 0.0);
  for (int i = 0; i < n; ++i)
    onehot[size_t(i) * classes + batch.labels[static_cast<size_t>(i)]] = 1.0;
  const Tensor picked =
      ad::mul(Tensor::leaf({n, classes}, std::move(onehot), false), log_softmax(z));
  g.loss = ad::cmul(ad::sum(picked), -scale / n);
  return g;
}

LossGraph loss(const ModelState& model, const data::Batch& batch, double scale,
               bool input_requires_grad) {
  return loss_shared(make_param_leaves(model), model.arch, batch, scale,
                     input_requires_grad);
}

ModelState sgd_step(ModelState model, const OptimConfig& optim, const FlatGrad& grads) {
  if (grads.segments.size() != model.params.size())
    throw std::invalid_argument("sgd_step: gradient segment count mismatch");
  for (const Tensor& s : grads.segments)
    for (const double v : s.values())
      if (!std::isfinite(v))
        throw std::runtime_error("sgd_step: non-finite gradient; aborting");

  for (size_t k = 0; k < model.params.size(); ++k) {
    auto& theta = model.params[k];
    auto& vbuf = model.momentum[k];
    const auto& g = grads.segments[k].values();
    if (g.size() != theta.size())
      throw std::invalid_argument("sgd_step: gradient dim mismatch in segment " +
                                  std::to_string(k));
    for (size_t i = 0; i < theta.size(); ++i) {
      vbuf[i] = optim.momentum * vbuf[i] + (g[i] + optim.weight_decay * theta[i]);
      theta[i] -= optim.learning_rate * vbuf[i];
    }
  }
  return model;
}

int feature_dim(const Architecture& arch) {
  return arch.kind == Architecture::Kind::mlp ? arch.hidden : arch.input_dim;
}

std::vector<double> features(const ModelState& model, const std::vector<double>& inputs,
                             int rows) {
  if (model.arch.kind == Architecture::Kind::logreg)
    return inputs;  // documented: features are the raw inputs
  const int d = model.arch.input_dim, h = model.arch.hidden;
  std::vector<double> out(size_t(rows) * h);
  CMapMat x(inputs.data(), rows, d);
  CMapMat w1(model.params[0].data(), d, h);
  CMapVec b1(model.params[1].data(), h);
  MapMat o(out.data(), rows, h);
  o.noalias() = x * w1;
  o.rowwise() += b1.transpose();
  o = o.cwiseMax(0.0);
  return out;
}

std::vector<double> logits(const ModelState& model, const std::vector<double>& inputs,
                           int rows) {
  const int classes = model.arch.classes;
  std::vector<double> out(size_t(rows) * classes);
  MapMat o(out.data(), rows, classes);
  if (model.arch.kind == Architecture::Kind::logreg) {
    CMapMat x(inputs.data(), rows, model.arch.input_dim);
    CMapMat w(model.params[0].data(), model.arch.input_dim, classes);
    CMapVec b(model.params[1].data(), classes);
    o.noalias() = x * w;
    o.rowwise() += b.transpose();
  } else {
    const std::vector<double> h = features(model, inputs, rows);
    CMapMat hm(h.data(), rows, model.arch.hidden);
    CMapMat w2(model.params[2].data(), model.arch.hidden, classes);
    CMapVec b2(model.params[3].data(), classes);
    o.noalias() = hm * w2;
    o.rowwise() += b2.transpose();
  }
  return out;
}

double accuracy(const ModelState& model, const std::vector<double>& inputs,
                const std::vector<int>& labels) {
  if (labels.empty()) throw std::invalid_argument("accuracy: empty dataset");
  const int rows = static_cast<int>(labels.size());
  const int classes = model.arch.classes;
  const std::vector<double> z = logits(model, inputs, rows);
  int correct = 0;
  for (int i = 0; i < rows; ++i) {
    int best = 0;
    for (int j = 1; j < classes; ++j)
      if (z[size_t(i) * classes + j] > z[size_t(i) * classes + best]) best = j;
    if (best == labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / rows;
}

double accuracy(const ModelState& model, const data::Batch& batch) {
  return accuracy(model, batch.inputs, batch.labels);
}

double accuracy(const ModelState& model, const data::Dataset& ds) {
  if (ds.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
  const int chunk = 2000;
  int correct = 0;
  std::vector<double> inputs;
  for (int start = 0; start < ds.size(); start += chunk) {
    const int rows = std::min(chunk, ds.size() - start);
    inputs.resize(size_t(rows) * ds.dim);
    for (int i = 0; i < rows; ++i) {
      const uint8_t* row = ds.pixels.data() + size_t(start + i) * ds.dim;
      for (int j = 0; j < ds.dim; ++j) inputs[size_t(i) * ds.dim + j] = row[j] / 255.0;
    }
    const std::vector<double> z = logits(model, inputs, rows);
    const int classes = model.arch.classes;
    for (int i = 0; i < rows; ++i) {
      int best = 0;
      for (int j = 1; j < classes; ++j)
        if (z[size_t(i) * classes + j] > z[size_t(i) * classes + best]) best = j;
      if (best == ds.labels[static_cast<size_t>(start + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / ds.size();
}

std::vector<FlatGrad> per_sample_grads(const ModelState& model, const data::Batch& batch,
                                       double scale) {
  check_batch(model.arch, batch);
  const int n = batch.rows;
  const int d = model.arch.input_dim;
  const int classes = model.arch.classes;
  const bool is_mlp = model.arch.kind == Architecture::Kind::mlp;
  const int h = is_mlp ? model.arch.hidden : 0;

  const std::vector<double> hid =
      is_mlp ? features(model, batch.inputs, n) : std::vector<double>{};
  const std::vector<double> z = logits(model, batch.inputs, n);

  std::vector<FlatGrad> out;
  out.reserve(n);
  std::vector<double> delta2(classes);
  for (int i = 0; i < n; ++i) {
    const double* zi = z.data() + size_t(i) * classes;
    double m = zi[0];
    for (int j = 1; j < classes; ++j) m = std::max(m, zi[j]);
    double se = 0.0;
    for (int j = 0; j < classes; ++j) se += std::exp(zi[j] - m);
    for (int j = 0; j < classes; ++j) delta2[j] = scale * std::exp(zi[j] - m) / se;
    delta2[batch.labels[static_cast<size_t>(i)]] -= scale;

    FlatGrad g;
    const double* xi = batch.inputs.data() + size_t(i) * d;
    if (!is_mlp) {
      std::vector<double> gw(size_t(d) * classes);
      for (int r = 0; r < d; ++r)
        for (int j = 0; j < classes; ++j) gw[size_t(r) * classes + j] = xi[r] * delta2[j];
      g.segments.push_back(Tensor::leaf({d, classes}, std::move(gw), false));
      g.segments.push_back(Tensor::leaf({classes}, delta2, false));
    } else {
      const double* hi = hid.data() + size_t(i) * h;
      std::vector<double> delta1(h);
      CMapMat w2(model.params[2].data(), h, classes);
      for (int r = 0; r < h; ++r) {
        double s = 0.0;
        for (int j = 0; j < classes; ++j) s += w2(r, j) * delta2[j];
        delta1[size_t(r)] = hi[r] > 0.0 ? s : 0.0;
      }
      std::vector<double> gw1(size_t(d) * h);
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < h; ++c) gw1[size_t(r) * h + c] = xi[r] * delta1[size_t(c)];
      std::vector<double> gw2(size_t(h) * classes);
      for (int r = 0; r < h; ++r)
        for (int j = 0; j < classes; ++j) gw2[size_t(r) * classes + j] = hi[r] * delta2[j];
      g.segments.push_back(Tensor::leaf({d, h}, std::move(gw1), false));
      g.segments.push_back(Tensor::leaf({h}, std::move(delta1), false));
      g.segments.push_back(Tensor::leaf({h, classes}, std::move(gw2), false));
      g.segments.push_back(Tensor::leaf({classes}, delta2, false));
    }
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<double> per_sample_grad_norms(const ModelState& model,
                                          const data::Batch& batch, double scale) {
  check_batch(model.arch, batch);
  const int n = batch.rows;
  const int d = model.arch.input_dim;
  const int classes = model.arch.classes;
  const bool is_mlp = model.arch.kind == Architecture::Kind::mlp;
  const int h = is_mlp ? model.arch.hidden : 0;

  const std::vector<double> hid =
      is_mlp ? features(model, batch.inputs, n) : std::vector<double>{};
  const std::vector<double> z = logits(model, batch.inputs, n);

  std::vector<double> out(static_cast<size_t>(n));
  std::vector<double> delta2(static_cast<size_t>(classes));
  for (int i = 0; i < n; ++i) {
    const double* zi = z.data() + size_t(i) * classes;
    double m = zi[0];
    for (int j = 1; j < classes; ++j) m = std::max(m, zi[j]);
    double se = 0.0;
    for (int j = 0; j < classes; ++j) se += std::exp(zi[j] - m);
    double d2_sq = 0.0;
    for (int j = 0; j < classes; ++j) {
      double v = scale * std::exp(zi[j] - m) / se;
      if (j == batch.labels[static_cast<size_t>(i)]) v -= scale;
      delta2[static_cast<size_t>(j)] = v;
      d2_sq += v * v;
    }
    const double* xi = batch.inputs.data() + size_t(i) * d;
    double x_sq = 0.0;
    for (int r = 0; r < d; ++r) x_sq += xi[r] * xi[r];

    if (!is_mlp) {
      out[static_cast<size_t>(i)] = std::sqrt(d2_sq * x_sq + d2_sq);
      continue;
    }
    const double* hi = hid.data() + size_t(i) * h;
    CMapMat w2(model.params[2].data(), h, classes);
    double d1_sq = 0.0, h_sq = 0.0;
    for (int r = 0; r < h; ++r) {
      h_sq += hi[r] * hi[r];
      if (hi[r] <= 0.0) continue;
      double s = 0.0;
      for (int j = 0; j < classes; ++j) s += w2(r, j) * delta2[static_cast<size_t>(j)];
      d1_sq += s * s;
    }
    out[static_cast<size_t>(i)] =
        std::sqrt(d1_sq * x_sq + d1_sq + d2_sq * h_sq + d2_sq);
  }
  return out;
}

namespace {

constexpr char kCheckpointMagic[8] = {'P', 'S', 'C', 'K', '0', '0', '0', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file " + path);
  return v;
}

}  // namespace

void save_checkpoint(const ModelState& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod(out, static_cast<int32_t>(model.arch.kind));
  write_pod(out, static_cast<int32_t>(model.arch.input_dim));
  write_pod(out, static_cast<int32_t>(model.arch.hidden));
  write_pod(out, static_cast<int32_t>(model.arch.classes));
  write_pod(out, static_cast<uint64_t>(model.rng_seed));
  write_pod(out, static_cast<uint64_t>(model.param_count()));
  // Parameter arrays then momentum buffers, declaration order, little-endian
  // doubles (the native x86 layout).
  for (const auto& p : model.params)
    out.write(reinterpret_cast<const char*>(p.data()),
              static_cast<std::streamsize>(p.size() * sizeof(double)));
  write_pod(out, static_cast<uint8_t>(1));
  for (const auto& v : model.momentum)
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  Architecture arch;
  arch.kind = static_cast<Architecture::Kind>(read_pod<int32_t>(in, path));
  arch.input_dim = read_pod<int32_t>(in, path);
  arch.hidden = read_pod<int32_t>(in, path);
  arch.classes = read_pod<int32_t>(in, path);
  const uint64_t seed = read_pod<uint64_t>(in, path);
  const uint64_t count = read_pod<uint64_t>(in, path);
  if (count != arch.param_count())
    throw std::runtime_error("checkpoint: parameter count " + std::to_string(count) +
                             " does not match " + arch.str());
  ModelState m;
  m.arch = arch;
  m.rng_seed = seed;
  for (const auto& s : param_shapes(arch)) {
    size_t n = 1;
    for (const int d : s) n *= static_cast<size_t>(d);
    std::vector<double> vals(n);
    in.read(reinterpret_cast<char*>(vals.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated parameters in " + path);
    m.params.push_back(std::move(vals));
  }
  const uint8_t has_momentum = read_pod<uint8_t>(in, path);
  for (const auto& s : param_shapes(arch)) {
    size_t n = 1;
    for (const int d : s) n *= static_cast<size_t>(d);
    std::vector<double> vals(n, 0.0);
    if (has_momentum) {
      in.read(reinterpret_cast<char*>(vals.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
      if (!in) throw std::runtime_error("checkpoint: truncated momentum in " + path);
    }
    m.momentum.push_back(std::move(vals));
  }
  return m;
}

}  // namespace psim::models
