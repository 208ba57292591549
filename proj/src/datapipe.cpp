#include "sed/datapipe.hpp"

#include <cmath>

#include "sed/error.hpp"

namespace sed {

void BatchSpec::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be > 0");
  if (n_weak + n_synthetic + n_unlabeled != batch_size)
    throw ConfigError("batch composition " + std::to_string(n_weak) + "+" +
                      std::to_string(n_synthetic) + "+" +
                      std::to_string(n_unlabeled) + " != batch_size " +
                      std::to_string(batch_size));
}

Tensor time_shift(const Tensor& feature, std::size_t steps) {
  const std::size_t T = feature.dim(0), F = feature.dim(1);
  if (steps >= T) throw Error("time_shift: steps out of range");
  if (steps == 0) return feature;
  Tensor out({T, F});
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t src = (t + T - steps) % T;
    for (std::size_t f = 0; f < F; ++f) out(t, f) = feature(src, f);
  }
  return out;
}

std::pair<Tensor, StrongLabelGrid> time_shift(const Tensor& feature,
                                              const StrongLabelGrid& grid,
                                              std::size_t steps) {
  const std::size_t T = feature.dim(0);
  if (steps >= T) throw Error("time_shift: steps out of range");
  const double scale =
      static_cast<double>(grid.frames) / static_cast<double>(T);
  const auto gsteps = static_cast<std::size_t>(
      std::llround(static_cast<double>(steps) * scale)) % std::max<std::size_t>(grid.frames, 1);

  StrongLabelGrid shifted = grid;
  for (std::size_t t = 0; t < grid.frames; ++t) {
    const std::size_t src = (t + grid.frames - gsteps) % grid.frames;
    for (std::size_t c = 0; c < grid.classes; ++c)
      shifted.at(t, c) = grid.at(src, c);
  }
  return {time_shift(feature, steps), std::move(shifted)};
}

Tensor freq_shift(const Tensor& feature, std::size_t steps) {
  const std::size_t T = feature.dim(0), F = feature.dim(1);
  if (steps >= F) throw Error("freq_shift: steps out of range");
  if (steps == 0) return feature;
  Tensor out({T, F});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f)
      out(t, f) = feature(t, (f + F - steps) % F);
  return out;
}

std::size_t BatchSampler::Pool::draw() {
  if (pos >= order.size()) {
    rng.shuffle(order);
    pos = 0;
  }
  return order[pos++];
}

BatchSampler::BatchSampler(const DatasetManifest& manifest, BatchSpec spec,
                           AugmentSpec aug, std::uint64_t seed)
    : spec_(spec), aug_(aug), aug_rng_(0) {
  spec_.validate();
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    switch (manifest.entries[i].source) {
      case SourceKind::weak: weak_.entries.push_back(i); break;
      case SourceKind::synthetic: synthetic_.entries.push_back(i); break;
      case SourceKind::unlabeled: unlabeled_.entries.push_back(i); break;
      case SourceKind::separated: break;  // not a training pool
    }
  }
  Rng master(seed);
  auto init_pool = [&](Pool& p, const char* name, std::size_t need,
                       std::uint64_t salt) {
    p.rng = master.fork(salt);
    if (need > 0 && p.entries.empty())
      throw ConfigError(std::string("batch spec needs ") + name +
                        " clips but the pool is empty");
    p.order = p.entries;
    p.rng.shuffle(p.order);
    p.pos = 0;
  };
  init_pool(weak_, "weak", spec_.n_weak, 1);
  init_pool(synthetic_, "synthetic", spec_.n_synthetic, 2);
  init_pool(unlabeled_, "unlabeled", spec_.n_unlabeled, 3);
  aug_rng_ = master.fork(4);
}

void BatchSampler::draw_from(Pool& pool, std::size_t n, BatchPlan& plan) {
  for (std::size_t i = 0; i < n; ++i) {
    BatchItem item;
    item.entry_index = pool.draw();
    item.augmented = aug_rng_.bernoulli(aug_.augment_probability());
    plan.items.push_back(item);
  }
}

BatchPlan BatchSampler::next() {
  BatchPlan plan;
  plan.items.reserve(spec_.batch_size);
  draw_from(weak_, spec_.n_weak, plan);
  draw_from(synthetic_, spec_.n_synthetic, plan);
  draw_from(unlabeled_, spec_.n_unlabeled, plan);
  return plan;
}

AssembledBatch assemble_batch(const DatasetManifest& manifest,
                              const BatchPlan& plan, const AugmentSpec& aug,
                              std::size_t grid_frames, double grid_frame_rate) {
  const std::size_t B = plan.items.size();
  const std::size_t T = manifest.geometry.frames;
  const std::size_t F = manifest.geometry.bins;
  AssembledBatch batch;
  batch.features = Tensor({B, T, F});
  batch.clip_ids.resize(B);
  batch.sources.resize(B);
  batch.weak_targets.resize(B);
  batch.grids.resize(B);

  const std::size_t C = manifest.vocabulary.size();
  for (std::size_t b = 0; b < B; ++b) {
    const auto& item = plan.items[b];
    ClipRecord clip = load_clip(manifest, item.entry_index);
    batch.clip_ids[b] = clip.clip_id;
    batch.sources[b] = clip.source;

    std::optional<StrongLabelGrid> grid;
    if (clip.source == SourceKind::synthetic) {
      grid = events_to_frame_grid(*clip.events, grid_frames, grid_frame_rate, C);
      batch.weak_targets[b] = weak_from_strong(*clip.events, C);
    } else if (clip.source == SourceKind::weak) {
      batch.weak_targets[b] = clip.weak_label;
    }

    Tensor feat = std::move(clip.feature);
    if (item.augmented) {
      if (grid) {
        auto shifted = time_shift(feat, *grid, aug.time_steps);
        feat = std::move(shifted.first);
        grid = std::move(shifted.second);
      } else {
        feat = time_shift(feat, aug.time_steps);
      }
      feat = freq_shift(feat, aug.freq_steps);
    }
    batch.grids[b] = std::move(grid);

    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = 0; f < F; ++f)
        batch.features(b, t, f) = feat(t, f);
  }
  return batch;
}

}  // namespace sed
