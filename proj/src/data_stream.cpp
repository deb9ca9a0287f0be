#include "psim/data_stream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace psim::data {

namespace {

uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("idx: truncated header in " + path);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) |
         uint32_t(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error("idx: cannot open " + images_path);
  const uint32_t img_magic = read_be32(img, images_path);
  if (img_magic != kImagesMagic)
    throw std::runtime_error("idx: bad image magic in " + images_path + " (got 0x" +
                             std::to_string(img_magic) + ")");
  const uint32_t count = read_be32(img, images_path);
  const uint32_t rows = read_be32(img, images_path);
  const uint32_t cols = read_be32(img, images_path);

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error("idx: cannot open " + labels_path);
  const uint32_t lab_magic = read_be32(lab, labels_path);
  if (lab_magic != kLabelsMagic)
    throw std::runtime_error("idx: bad label magic in " + labels_path + " (got 0x" +
                             std::to_string(lab_magic) + ")");
  const uint32_t lab_count = read_be32(lab, labels_path);
  if (lab_count != count)
    throw std::runtime_error("idx: image count " + std::to_string(count) +
                             " != label count " + std::to_string(lab_count) + " (" +
                             images_path + ", " + labels_path + ")");

  Dataset ds;
  ds.dim = static_cast<int>(rows * cols);
  const size_t total = size_t(count) * ds.dim;
  ds.pixels.resize(total);
  img.read(reinterpret_cast<char*>(ds.pixels.data()),
           static_cast<std::streamsize>(total));
  if (!img) throw std::runtime_error("idx: truncated pixel data in " + images_path);

  std::vector<unsigned char> lraw(count);
  lab.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(count));
  if (!lab) throw std::runtime_error("idx: truncated label data in " + labels_path);
  ds.labels.assign(lraw.begin(), lraw.end());
  return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path) {
  const int side = static_cast<int>(std::lround(std::sqrt(double(ds.dim))));
  if (side * side != ds.dim)
    throw std::runtime_error("idx: dim " + std::to_string(ds.dim) +
                             " is not a square image");
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error("idx: cannot write " + images_path);
  write_be32(img, kImagesMagic);
  write_be32(img, static_cast<uint32_t>(ds.size()));
  write_be32(img, static_cast<uint32_t>(side));
  write_be32(img, static_cast<uint32_t>(side));
  img.write(reinterpret_cast<const char*>(ds.pixels.data()),
            static_cast<std::streamsize>(ds.pixels.size()));

  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error("idx: cannot write " + labels_path);
  write_be32(lab, kLabelsMagic);
  write_be32(lab, static_cast<uint32_t>(ds.size()));
  std::vector<unsigned char> lraw(ds.labels.begin(), ds.labels.end());
  lab.write(reinterpret_cast<const char*>(lraw.data()),
            static_cast<std::streamsize>(lraw.size()));
  if (!lab) throw std::runtime_error("idx: write failed for " + labels_path);
}

std::pair<Dataset, Dataset> make_synthetic(const SynthConfig& cfg) {
  const int dim = cfg.side * cfg.side;
  Rng proto_rng(Rng::derive(cfg.seed, "synth-prototypes"));

  // Per-class prototype: a sum of smooth bumps on the grid, peak-normalized.
  std::vector<std::vector<double>> protos(cfg.classes, std::vector<double>(dim, 0.0));
  for (int c = 0; c < cfg.classes; ++c) {
    auto& p = protos[c];
    const int bumps = 10;
    for (int b = 0; b < bumps; ++b) {
      const double cx = proto_rng.uniform(4.0, cfg.side - 4.0);
      const double cy = proto_rng.uniform(4.0, cfg.side - 4.0);
      const double amp = proto_rng.uniform(0.5, 1.0);
      const double sig = proto_rng.uniform(1.5, 3.5);
      for (int y = 0; y < cfg.side; ++y)
        for (int x = 0; x < cfg.side; ++x) {
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          p[y * cfg.side + x] += amp * std::exp(-d2 / (2.0 * sig * sig));
        }
    }
    const double mx = *std::max_element(p.begin(), p.end());
    for (double& v : p) v /= mx;
  }

  auto sample_split = [&](int count, const char* stream) {
    Rng rng(Rng::derive(cfg.seed, stream));
    Dataset ds;
    ds.dim = dim;
    ds.pixels.resize(size_t(count) * dim);
    ds.labels.resize(count);
    for (int i = 0; i < count; ++i) {
      const int c = static_cast<int>(rng.uniform_int(cfg.classes));
      ds.labels[i] = c;
      const double a = rng.uniform(0.6, 1.0);
      double m = 0.0;
      int c2 = c;
      if (rng.uniform() < cfg.mix_prob) {
        m = rng.uniform(0.0, cfg.mix_max);
        c2 = static_cast<int>(rng.uniform_int(cfg.classes - 1));
        if (c2 >= c) ++c2;
      }
      uint8_t* row = ds.pixels.data() + size_t(i) * dim;
      for (int j = 0; j < dim; ++j) {
        const double v = a * protos[c][j] + m * protos[c2][j] +
                         cfg.noise_sigma * rng.normal();
        row[j] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
    return ds;
  };

  return {sample_split(cfg.train_count, "synth-train"),
          sample_split(cfg.test_count, "synth-test")};
}

Batch gather(const Dataset& ds, const std::vector<int64_t>& idx) {
  Batch b;
  b.rows = static_cast<int>(idx.size());
  b.cols = ds.dim;
  b.inputs.resize(idx.size() * size_t(ds.dim));
  b.labels.resize(idx.size());
  b.indices = idx;
  for (size_t i = 0; i < idx.size(); ++i) {
    const int64_t src = idx[i];
    const uint8_t* row = ds.pixels.data() + size_t(src) * ds.dim;
    double* out = b.inputs.data() + i * size_t(ds.dim);
    for (int j = 0; j < ds.dim; ++j) out[j] = row[j] / 255.0;
    b.labels[i] = ds.labels[static_cast<size_t>(src)];
  }
  return b;
}

StreamSchedule make_schedule(const Dataset& ds, int batch_size, int burn_in_epochs,
                             int accumulative_steps, uint64_t seed,
                             int val_pool_size) {
  if (batch_size <= 0) throw std::invalid_argument("make_schedule: batch_size must be > 0");
  if (ds.size() < val_pool_size + (accumulative_steps + 1) * batch_size)
    throw std::runtime_error(
        "make_schedule: insufficient data: need " +
        std::to_string(val_pool_size + (accumulative_steps + 1) * batch_size) +
        " samples, have " + std::to_string(ds.size()));

  std::vector<int64_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(Rng::derive(seed, "schedule-split"));
  split_rng.shuffle(order);

  StreamSchedule s;
  s.seed = seed;
  s.batch_size = batch_size;

  std::vector<int64_t> pool_idx(order.begin(), order.begin() + val_pool_size);
  s.validation_pool = gather(ds, pool_idx);
  s.validation = gather(
      ds, {pool_idx.begin(),
           pool_idx.begin() + std::min<int64_t>(batch_size, val_pool_size)});

  std::vector<int64_t> train_idx(order.begin() + val_pool_size, order.end());
  const int batches_per_epoch = static_cast<int>(train_idx.size()) / batch_size;
  if (accumulative_steps + 1 > batches_per_epoch)
    throw std::runtime_error("make_schedule: accumulative phase of " +
                             std::to_string(accumulative_steps) +
                             " steps plus trigger does not fit one epoch of " +
                             std::to_string(batches_per_epoch) + " batches");

  s.burn_in.reserve(size_t(burn_in_epochs) * batches_per_epoch);
  for (int e = 0; e < burn_in_epochs; ++e) {
    Rng epoch_rng(Rng::derive(seed, "epoch-" + std::to_string(e)));
    epoch_rng.shuffle(train_idx);
    for (int b = 0; b < batches_per_epoch; ++b)
      s.burn_in.emplace_back(train_idx.begin() + size_t(b) * batch_size,
                             train_idx.begin() + size_t(b + 1) * batch_size);
  }

  // The stream keeps flowing: accumulative batches and the trigger come from
  // the next fresh epoch, so they are pairwise disjoint by source index.
  Rng tail_rng(Rng::derive(seed, "epoch-" + std::to_string(burn_in_epochs)));
  tail_rng.shuffle(train_idx);
  for (int b = 0; b < accumulative_steps; ++b)
    s.accumulative.emplace_back(train_idx.begin() + size_t(b) * batch_size,
                                train_idx.begin() + size_t(b + 1) * batch_size);
  s.trigger = gather(ds, {train_idx.begin() + size_t(accumulative_steps) * batch_size,
                          train_idx.begin() + size_t(accumulative_steps + 1) * batch_size});
  return s;
}

Batch bootstrap_validation(const StreamSchedule& schedule, Rng& rng) {
  const Batch& pool = schedule.validation_pool;
  if (pool.empty()) throw std::runtime_error("bootstrap_validation: empty pool");
  Batch out;
  out.rows = schedule.batch_size;
  out.cols = pool.cols;
  out.inputs.resize(size_t(out.rows) * out.cols);
  out.labels.resize(out.rows);
  out.indices.resize(out.rows);
  for (int i = 0; i < out.rows; ++i) {
    const int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(pool.rows)));
    std::copy_n(pool.inputs.data() + size_t(j) * pool.cols, pool.cols,
                out.inputs.data() + size_t(i) * out.cols);
    out.labels[i] = pool.labels[j];
    out.indices[i] = pool.indices[j];
  }
  return out;
}

std::vector<int> ratio_mask(const Batch& batch, double ratio, Rng& rng) {
  if (ratio < 0.0 || ratio > 1.0)
    throw std::invalid_argument("ratio_mask: ratio must be in [0,1]");
  const int n = batch.rows;
  const int k = static_cast<int>(ratio * n);
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first k entries are a uniform subset.
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n - i)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace psim::data
