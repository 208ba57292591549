#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "sed/datamodel.hpp"
#include "sed/rng.hpp"
#include "sed/tensor.hpp"

namespace sed {

// Mini-batch composition over the three training pools.
struct BatchSpec {
  std::size_t batch_size = 64;
  std::size_t n_weak = 12;
  std::size_t n_synthetic = 4;
  std::size_t n_unlabeled = 48;

  void validate() const;
};

struct AugmentSpec {
  std::size_t time_steps = 90;
  std::size_t freq_steps = 8;
  // original : augmented corpus ratio; a drawn clip is replaced by its
  // augmented version with probability augmented/(original+augmented).
  std::size_t mix_original = 8;
  std::size_t mix_augmented = 1;

  double augment_probability() const {
    return static_cast<double>(mix_augmented) /
           static_cast<double>(mix_original + mix_augmented);
  }
};

// Circular shift along time: output frame t = input frame (t - steps) mod T.
Tensor time_shift(const Tensor& feature, std::size_t steps);

// Same, with the strong-label grid shifted by steps * T'/T (rounded) so the
// labels keep tracking the content.
std::pair<Tensor, StrongLabelGrid> time_shift(const Tensor& feature,
                                              const StrongLabelGrid& grid,
                                              std::size_t steps);

// Circular shift along frequency: output bin f = input bin (f - steps) mod F.
Tensor freq_shift(const Tensor& feature, std::size_t steps);

struct BatchItem {
  std::size_t entry_index = 0;
  bool augmented = false;
};

struct BatchPlan {
  std::vector<BatchItem> items;  // n_weak, then n_synthetic, then n_unlabeled
};

// Deterministic stream of batch plans. Each pool is shuffled and consumed
// without replacement, reshuffling independently when exhausted.
class BatchSampler {
 public:
  BatchSampler(const DatasetManifest& manifest, BatchSpec spec,
               AugmentSpec aug, std::uint64_t seed);

  BatchPlan next();

  const BatchSpec& spec() const { return spec_; }

 private:
  struct Pool {
    std::vector<std::size_t> entries;
    std::vector<std::size_t> order;
    std::size_t pos = 0;
    Rng rng{0};

    std::size_t draw();
  };

  void draw_from(Pool& pool, std::size_t n, BatchPlan& plan);

  BatchSpec spec_;
  AugmentSpec aug_;
  Pool weak_, synthetic_, unlabeled_;
  Rng aug_rng_{0};
};

// A batch ready for the models: stacked features plus per-clip targets.
struct AssembledBatch {
  Tensor features;  // B x T x F
  std::vector<std::string> clip_ids;
  std::vector<SourceKind> sources;
  // weak targets: the clip's weak label, or the weak view of its strong
  // labels for synthetic clips; empty for unlabeled.
  std::vector<std::optional<WeakLabelVec>> weak_targets;
  // frame grids at detector resolution, synthetic clips only
  std::vector<std::optional<StrongLabelGrid>> grids;

  std::size_t size() const { return clip_ids.size(); }
};

AssembledBatch assemble_batch(const DatasetManifest& manifest,
                              const BatchPlan& plan, const AugmentSpec& aug,
                              std::size_t grid_frames, double grid_frame_rate);

}  // namespace sed
