#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "psim/rng.hpp"

namespace psim::data {

/// In-memory labeled dataset. Pixels are kept as the raw IDX bytes; batches
/// materialize them as byte/255.0, which is exactly the loader contract.
struct Dataset {
  int dim = 0;
  std::vector<uint8_t> pixels;  // size x dim
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
};

/// A labeled mini-batch plus the source positions its rows came from.
struct Batch {
  int rows = 0;
  int cols = 0;
  std::vector<double> inputs;  // row-major rows x cols, values in [0,1]
  std::vector<int> labels;
  std::vector<int64_t> indices;

  bool empty() const { return rows == 0; }
};

/// The ordered stream: burn-in epochs, accumulative-phase batches S_0..S_{T-1},
/// the trigger batch S_T drawn right after them, and a held-out validation
/// pool disjoint from all of it. Burn-in and accumulative phases are stored as
/// per-step index lists and materialized on demand. Immutable after creation.
struct StreamSchedule {
  std::vector<std::vector<int64_t>> burn_in;
  std::vector<std::vector<int64_t>> accumulative;
  Batch trigger;
  Batch validation;       // working S_val, first batch_size rows of the pool
  Batch validation_pool;  // held out from the training stream
  uint64_t seed = 0;
  int batch_size = 0;
};

/// Reads an IDX image/label file pair (big-endian magics 0x803 / 0x801);
/// pixel bytes are divided by 255 at batch materialization. Throws
/// std::runtime_error naming the file on bad magic, truncation, or
/// image/label count mismatch.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Writes the dataset as an IDX pair, bit-exact.
void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path);

/// Deterministic 10-class 28x28 stand-in dataset: smooth per-class blob
/// prototypes with amplitude jitter, cross-class mixing and pixel noise,
/// clamped to [0,1] and quantized to bytes. Difficulty is set so a small MLP
/// lands in the high 90s after a 10-epoch burn-in.
struct SynthConfig {
  int train_count = 60000;
  int test_count = 10000;
  int side = 28;
  int classes = 10;
  uint64_t seed = 7;
  double noise_sigma = 0.12;
  double mix_max = 0.50;  // max fraction of a second class prototype
  double mix_prob = 0.45;
};

std::pair<Dataset, Dataset> make_synthetic(const SynthConfig& cfg);

/// Builds the stream: hold out val_pool_size samples, run burn_in_epochs
/// seeded-shuffle epochs over the rest, then take the accumulative batches
/// and the trigger batch from the next fresh epoch so they are mutually
/// disjoint by source index. Throws if the dataset cannot cover the phases.
StreamSchedule make_schedule(const Dataset& ds, int batch_size, int burn_in_epochs,
                             int accumulative_steps, uint64_t seed,
                             int val_pool_size = 1000);

/// Sample-with-replacement draw of batch_size rows from the validation pool.
/// With pool == batch this is the classic bootstrap; with a larger pool it
/// acts as re-sampling a fresh S_val.
Batch bootstrap_validation(const StreamSchedule& schedule, Rng& rng);

/// floor(ratio * N) row indices chosen uniformly without replacement; only
/// these rows receive perturbations.
std::vector<int> ratio_mask(const Batch& batch, double ratio, Rng& rng);

/// Copies the addressed rows of a dataset into a batch (pixels as byte/255).
Batch gather(const Dataset& ds, const std::vector<int64_t>& idx);

}  // namespace psim::data
