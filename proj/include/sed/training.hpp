#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sed/datamodel.hpp"
#include "sed/datapipe.hpp"
#include "sed/nets.hpp"

namespace sed {

struct TrainConfig {
  std::size_t epochs = 120;
  std::size_t warmup_epochs = 15;  // s: PT ignores unlabeled clips before this
  double lr0 = 0.0018;
  double lr_decay = 0.20;          // fraction removed every 10 epochs
  double main_weight = 1.0;        // a
  double aux_weight = 1.0;         // b (1.0 for GAP, 0.5 for GMP by default)
  double sedb_weight = 1.0;
  double alpha_base = 0.997;       // alpha = 1 - base^(epoch - s)
  std::uint64_t seed = 1;

  void validate() const;
};

// Multi-label binary cross entropy, summed over classes. Probabilities are
// clamped to [1e-7, 1 - 1e-7].
double bce(std::span<const std::uint8_t> y, std::span<const double> p);

// Hard labels at threshold 0.5 (inclusive).
WeakLabelVec pseudo_label(std::span<const double> clip_probs);

// Weight of the PT unlabeled loss; 0 before the warm-up epoch s, then
// 1 - base^(epoch - s).
double alpha_unlabeled(std::size_t epoch, const TrainConfig& cfg);

// Step-decayed learning rate: lr0 * (1 - decay)^floor(epoch / 10).
double lr_at(std::size_t epoch, const TrainConfig& cfg);

// PS unlabeled loss: cross entropy against the PT pseudo label.
double loss_ps_unlabeled(const WeakLabelVec& pt_pseudo,
                         std::span<const double> ps_clip_probs);

struct PsLoss {
  double main = 0.0;
  double aux = 0.0;
  double sedb = 0.0;
  double total = 0.0;
};

// Weighted PS loss: a * main + b * aux on every clip with a target, plus the
// frame-level SEDB term on clips with a strong grid. Batch loss is the mean
// over clips of per-clip sums.
PsLoss loss_ps_total(const PredictionBundle& bundle,
                     const std::vector<std::optional<WeakLabelVec>>& targets,
                     const std::vector<std::optional<StrongLabelGrid>>& grids,
                     const TrainConfig& cfg, BranchGrads* grads = nullptr);

struct PtLoss {
  double labeled = 0.0;
  double unlabeled = 0.0;  // already alpha-weighted
  double total = 0.0;
};

// PT loss: cross entropy on labeled clips always; alpha-weighted cross
// entropy against PS pseudo labels on unlabeled clips from epoch s on.
PtLoss loss_pt(const Tensor& pt_clip_probs,
               const std::vector<std::optional<WeakLabelVec>>& labeled,
               const std::vector<std::optional<WeakLabelVec>>& pseudo,
               std::size_t epoch, const TrainConfig& cfg,
               Tensor* d_clip_logit = nullptr);

class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<ParamRef> params, double beta1 = 0.9,
                         double beta2 = 0.999, double eps = 1e-8);

  void step(double lr);

 private:
  std::vector<ParamRef> params_;
  std::vector<Tensor> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// One forward/backward for the PS model; gradients are left on the model.
// state_out (optional) receives the forward caches for running-stat updates.
PsLoss ps_forward_backward(Model& ps, const AssembledBatch& batch,
                           const std::vector<std::optional<WeakLabelVec>>& targets,
                           const TrainConfig& cfg,
                           ForwardState* state_out = nullptr);

// Same for the PT model. `include_unlabeled` exists so tests can compare
// gradients with the unlabeled term switched off.
PtLoss pt_forward_backward(Model& pt, const AssembledBatch& batch,
                           const std::vector<std::optional<WeakLabelVec>>& labeled,
                           const std::vector<std::optional<WeakLabelVec>>& pseudo,
                           std::size_t epoch, const TrainConfig& cfg,
                           bool include_unlabeled = true,
                           ForwardState* state_out = nullptr);

// Clip-level macro F1 of thresholded tag predictions against the manifest's
// weak labels (strong labels are reduced to weak ones first).
double tagging_macro_f1(const Model& model, const DatasetManifest& manifest);

struct TrainOutput {
  std::filesystem::path ps_checkpoint;
  std::filesystem::path pt_checkpoint;
  std::filesystem::path metrics_log;
};

// The guided-learning loop: PT and PS step on identical batches; PT pseudo-
// labels supervise PS on unlabeled clips from the start, PS pseudo-labels
// feed back into PT after the warm-up.
TrainOutput train(const DatasetManifest& train_manifest,
                  const DatasetManifest* validation_manifest,
                  const ModelConfig& ps_cfg, const ModelConfig& pt_cfg,
                  const TrainConfig& cfg, const BatchSpec& batch_spec,
                  const AugmentSpec& aug,
                  const std::filesystem::path& out_dir);

}  // namespace sed
