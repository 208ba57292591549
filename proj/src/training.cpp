#include "sed/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "sed/error.hpp"

namespace sed {

namespace {

constexpr double kProbEps = 1e-7;

double clamp_prob(double p) {
  return std::min(1.0 - kProbEps, std::max(kProbEps, p));
}

double bce_cell(double y, double p) {
  p = clamp_prob(p);
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

std::uint64_t fnv1a(std::uint64_t h, const std::string& s) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  h ^= '\n';
  h *= 1099511628211ULL;
  return h;
}

}  // namespace

void TrainConfig::validate() const {
  if (lr0 <= 0.0) throw ConfigError("lr0 must be positive");
  if (lr_decay < 0.0 || lr_decay >= 1.0)
    throw ConfigError("lr_decay must be in [0, 1)");
  if (main_weight < 0.0 || aux_weight < 0.0 || sedb_weight < 0.0)
    throw ConfigError("loss weights must be nonnegative");
  if (warmup_epochs > epochs)
    throw ConfigError("warmup_epochs must not exceed epochs");
  if (alpha_base <= 0.0 || alpha_base >= 1.0)
    throw ConfigError("alpha_base must be in (0, 1)");
}

double bce(std::span<const std::uint8_t> y, std::span<const double> p) {
  if (y.size() != p.size())
    throw Error("bce: label/probability length mismatch");
  double loss = 0.0;
  for (std::size_t c = 0; c < y.size(); ++c)
    loss += bce_cell(static_cast<double>(y[c]), p[c]);
  return loss;
}

WeakLabelVec pseudo_label(std::span<const double> clip_probs) {
  WeakLabelVec v;
  v.values.resize(clip_probs.size());
  for (std::size_t c = 0; c < clip_probs.size(); ++c)
    v.values[c] = clip_probs[c] >= 0.5 ? 1 : 0;
  return v;
}

double alpha_unlabeled(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch < cfg.warmup_epochs) return 0.0;
  return 1.0 - std::pow(cfg.alpha_base,
                        static_cast<double>(epoch - cfg.warmup_epochs));
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr0 * std::pow(1.0 - cfg.lr_decay,
                            static_cast<double>(epoch / 10));
}

double loss_ps_unlabeled(const WeakLabelVec& pt_pseudo,
                         std::span<const double> ps_clip_probs) {
  return bce(pt_pseudo.values, ps_clip_probs);
}

PsLoss loss_ps_total(const PredictionBundle& bundle,
                     const std::vector<std::optional<WeakLabelVec>>& targets,
                     const std::vector<std::optional<StrongLabelGrid>>& grids,
                     const TrainConfig& cfg, BranchGrads* grads) {
  const std::size_t B = bundle.main_clip.dim(0);
  const std::size_t C = bundle.main_clip.dim(1);
  if (targets.size() != B) throw Error("loss_ps_total: target count mismatch");
  const bool has_aux = bundle.aux_clip.has_value();
  const bool has_sedb = bundle.sedb_frame.has_value();
  const std::size_t To = bundle.main_frame.dim(1);

  if (grads) {
    grads->d_main_clip_logit = Tensor({B, C});
    grads->d_aux_frame_logit = has_aux ? Tensor({B, To, C}) : Tensor();
    grads->d_sedb_frame_logit = has_sedb ? Tensor({B, To, C}) : Tensor();
  }

  const double invB = 1.0 / static_cast<double>(B);
  PsLoss loss;
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b]) {
      const auto& y = targets[b]->values;
      if (y.size() != C) throw Error("loss_ps_total: target length mismatch");
      for (std::size_t c = 0; c < C; ++c) {
        const double yc = static_cast<double>(y[c]);
        const double pm = bundle.main_clip(b, c);
        loss.main += cfg.main_weight * bce_cell(yc, pm) * invB;
        if (grads)
          grads->d_main_clip_logit(b, c) = cfg.main_weight * (pm - yc) * invB;

        if (has_aux) {
          const double pa = (*bundle.aux_clip)(b, c);
          loss.aux += cfg.aux_weight * bce_cell(yc, pa) * invB;
          if (grads && cfg.aux_weight > 0.0) {
            const auto& fp = *bundle.aux_frame;
            if (*bundle.aux_kind == BranchKind::instance_max) {
              // max(sigmoid) == sigmoid(max logit): gradient flows to the
              // first frame attaining the maximum
              std::size_t tmax = 0;
              double mx = fp(b, 0, c);
              for (std::size_t t = 1; t < To; ++t)
                if (fp(b, t, c) > mx) {
                  mx = fp(b, t, c);
                  tmax = t;
                }
              grads->d_aux_frame_logit(b, tmax, c) +=
                  cfg.aux_weight * (pa - yc) * invB;
            } else {
              // mean of sigmoids: dL/dl_t = dL/dp_mean * p_t(1-p_t)/T'
              if (pa > kProbEps && pa < 1.0 - kProbEps) {
                const double dLdp =
                    cfg.aux_weight * (pa - yc) / (pa * (1.0 - pa)) * invB;
                for (std::size_t t = 0; t < To; ++t) {
                  const double pt_ = fp(b, t, c);
                  grads->d_aux_frame_logit(b, t, c) +=
                      dLdp * pt_ * (1.0 - pt_) / static_cast<double>(To);
                }
              }
            }
          }
        }
      }
    }

    if (has_sedb && grids.size() == targets.size() && grids[b]) {
      const auto& g = *grids[b];
      if (g.frames != To || g.classes != C)
        throw Error("loss_ps_total: strong grid geometry mismatch");
      for (std::size_t t = 0; t < To; ++t)
        for (std::size_t c = 0; c < C; ++c) {
          const double yc = static_cast<double>(g.at(t, c));
          const double p = (*bundle.sedb_frame)(b, t, c);
          loss.sedb += cfg.sedb_weight * bce_cell(yc, p) * invB;
          if (grads)
            grads->d_sedb_frame_logit(b, t, c) =
                cfg.sedb_weight * (p - yc) * invB;
        }
    }
  }
  loss.total = loss.main + loss.aux + loss.sedb;
  return loss;
}

PtLoss loss_pt(const Tensor& pt_clip_probs,
               const std::vector<std::optional<WeakLabelVec>>& labeled,
               const std::vector<std::optional<WeakLabelVec>>& pseudo,
               std::size_t epoch, const TrainConfig& cfg,
               Tensor* d_clip_logit) {
  const std::size_t B = pt_clip_probs.dim(0), C = pt_clip_probs.dim(1);
  if (labeled.size() != B || pseudo.size() != B)
    throw Error("loss_pt: target count mismatch");
  if (d_clip_logit) *d_clip_logit = Tensor({B, C});

  const double invB = 1.0 / static_cast<double>(B);
  const double alpha = alpha_unlabeled(epoch, cfg);
  const bool use_unlabeled = epoch >= cfg.warmup_epochs;

  PtLoss loss;
  for (std::size_t b = 0; b < B; ++b) {
    if (labeled[b]) {
      const auto& y = labeled[b]->values;
      for (std::size_t c = 0; c < C; ++c) {
        const double yc = static_cast<double>(y[c]);
        const double p = pt_clip_probs(b, c);
        loss.labeled += bce_cell(yc, p) * invB;
        if (d_clip_logit) (*d_clip_logit)(b, c) = (p - yc) * invB;
      }
    } else if (use_unlabeled && pseudo[b]) {
      const auto& y = pseudo[b]->values;
      for (std::size_t c = 0; c < C; ++c) {
        const double yc = static_cast<double>(y[c]);
        const double p = pt_clip_probs(b, c);
        loss.unlabeled += alpha * bce_cell(yc, p) * invB;
        if (d_clip_logit) (*d_clip_logit)(b, c) = alpha * (p - yc) * invB;
      }
    }
  }
  loss.total = loss.labeled + loss.unlabeled;
  return loss;
}

AdamOptimizer::AdamOptimizer(std::vector<ParamRef> params, double beta1,
                             double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.value->shape());
    v_.emplace_back(p.value->shape());
  }
}

void AdamOptimizer::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& w = *params_[i].value;
    const Tensor& g = *params_[i].grad;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m(j) = beta1_ * m(j) + (1.0 - beta1_) * g(j);
      v(j) = beta2_ * v(j) + (1.0 - beta2_) * g(j) * g(j);
      const double mhat = m(j) / bc1;
      const double vhat = v(j) / bc2;
      w(j) -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

PsLoss ps_forward_backward(Model& ps, const AssembledBatch& batch,
                           const std::vector<std::optional<WeakLabelVec>>& targets,
                           const TrainConfig& cfg, ForwardState* state_out) {
  ForwardState state = ps.forward_train(batch.features);
  BranchGrads grads;
  PsLoss loss = loss_ps_total(state.bundle, targets, batch.grids, cfg, &grads);
  ps.backward(state, grads);
  if (state_out) *state_out = std::move(state);
  return loss;
}

PtLoss pt_forward_backward(Model& pt, const AssembledBatch& batch,
                           const std::vector<std::optional<WeakLabelVec>>& labeled,
                           const std::vector<std::optional<WeakLabelVec>>& pseudo,
                           std::size_t epoch, const TrainConfig& cfg,
                           bool include_unlabeled, ForwardState* state_out) {
  ForwardState state = pt.forward_train(batch.features);
  std::vector<std::optional<WeakLabelVec>> pseudo_used =
      include_unlabeled ? pseudo
                        : std::vector<std::optional<WeakLabelVec>>(
                              pseudo.size(), std::nullopt);
  Tensor d_clip;
  PtLoss loss = loss_pt(state.bundle.main_clip, labeled, pseudo_used, epoch,
                        cfg, &d_clip);
  BranchGrads grads;
  grads.d_main_clip_logit = std::move(d_clip);
  pt.backward(state, grads);
  if (state_out) *state_out = std::move(state);
  return loss;
}

namespace {

struct TagCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

double macro_f1(const std::vector<TagCounts>& counts) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : counts) {
    if (c.tp + c.fp + c.fn == 0) continue;
    const double denom = 2.0 * c.tp + c.fp + c.fn;
    sum += denom > 0.0 ? 2.0 * c.tp / denom : 0.0;
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

}  // namespace

double tagging_macro_f1(const Model& model, const DatasetManifest& manifest) {
  const std::size_t C = manifest.vocabulary.size();
  std::vector<TagCounts> counts(C);
  const std::size_t chunk = 8;

  std::vector<std::size_t> labeled_entries;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    if (e.weak_label || e.events) labeled_entries.push_back(i);
  }

  for (std::size_t start = 0; start < labeled_entries.size(); start += chunk) {
    const std::size_t n = std::min(chunk, labeled_entries.size() - start);
    Tensor feats({n, manifest.geometry.frames, manifest.geometry.bins});
    std::vector<WeakLabelVec> refs(n);
    for (std::size_t i = 0; i < n; ++i) {
      ClipRecord clip = load_clip(manifest, labeled_entries[start + i]);
      refs[i] = clip.weak_label ? *clip.weak_label
                                : weak_from_strong(*clip.events, C);
      std::copy(clip.feature.values().begin(), clip.feature.values().end(),
                feats.values().begin() + i * clip.feature.size());
    }
    PredictionBundle bundle = model.forward(feats);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const bool pred = bundle.main_clip(i, c) >= 0.5;
        const bool ref = refs[i].values[c] != 0;
        if (pred && ref) ++counts[c].tp;
        else if (pred) ++counts[c].fp;
        else if (ref) ++counts[c].fn;
      }
  }
  return macro_f1(counts);
}

TrainOutput train(const DatasetManifest& train_manifest,
                  const DatasetManifest* validation_manifest,
                  const ModelConfig& ps_cfg, const ModelConfig& pt_cfg,
                  const TrainConfig& cfg, const BatchSpec& batch_spec,
                  const AugmentSpec& aug,
                  const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  cfg.validate();
  batch_spec.validate();
  if (ps_cfg.input_bins != train_manifest.geometry.bins ||
      pt_cfg.input_bins != train_manifest.geometry.bins)
    throw ConfigError("model input_bins does not match the manifest geometry");

  const std::size_t T = train_manifest.geometry.frames;
  const std::size_t grid_frames = ps_cfg.encoder.output_frames(T);
  const double grid_rate =
      1.0 / (train_manifest.geometry.hop_seconds *
             static_cast<double>(ps_cfg.encoder.time_pool_product()));

  Rng master(cfg.seed);
  Model ps(ps_cfg, master.next_u64());
  Model pt(pt_cfg, master.next_u64());
  const std::uint64_t sampler_seed = master.next_u64();

  BatchSampler sampler(train_manifest, batch_spec, aug, sampler_seed);
  AdamOptimizer adam_ps(ps.params());
  AdamOptimizer adam_pt(pt.params());

  // epoch length: the unlabeled pool (the largest in practice) defines it
  std::size_t n_weak = 0, n_syn = 0, n_unl = 0;
  for (const auto& e : train_manifest.entries) {
    if (e.source == SourceKind::weak) ++n_weak;
    else if (e.source == SourceKind::synthetic) ++n_syn;
    else if (e.source == SourceKind::unlabeled) ++n_unl;
  }
  auto ceil_div = [](std::size_t a, std::size_t b) { return (a + b - 1) / b; };
  std::size_t steps_per_epoch = 0;
  if (batch_spec.n_unlabeled > 0 && n_unl > 0)
    steps_per_epoch = ceil_div(n_unl, batch_spec.n_unlabeled);
  else {
    if (batch_spec.n_weak > 0 && n_weak > 0)
      steps_per_epoch = std::max(steps_per_epoch,
                                 ceil_div(n_weak, batch_spec.n_weak));
    if (batch_spec.n_synthetic > 0 && n_syn > 0)
      steps_per_epoch = std::max(steps_per_epoch,
                                 ceil_div(n_syn, batch_spec.n_synthetic));
  }
  if (steps_per_epoch == 0)
    throw ConfigError("no trainable clips for the given batch spec");

  fs::create_directories(out_dir);
  const fs::path log_path = out_dir / "metrics.tsv";
  std::ofstream log(log_path);
  if (!log) throw Error("cannot write " + log_path.string());
  log << "epoch\tlr\talpha\tpt_labeled\tpt_unlabeled\tpt_total\tps_main\t"
         "ps_aux\tps_sedb\tps_total\tval_f1_pt\tval_f1_ps\tbatch_digest_pt\t"
         "batch_digest_ps\n";

  char buf[512];
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    const double alpha = alpha_unlabeled(epoch, cfg);
    PsLoss ps_sum;
    PtLoss pt_sum;
    std::uint64_t digest_ps = 1469598103934665603ULL;
    std::uint64_t digest_pt = 1469598103934665603ULL;

    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      BatchPlan plan = sampler.next();
      AssembledBatch batch =
          assemble_batch(train_manifest, plan, aug, grid_frames, grid_rate);
      const std::size_t B = batch.size();

      // pseudo labels from the current parameters, inference-mode batch norm
      std::vector<std::size_t> unl_rows;
      for (std::size_t b = 0; b < B; ++b)
        if (batch.sources[b] == SourceKind::unlabeled) unl_rows.push_back(b);

      std::vector<std::optional<WeakLabelVec>> ps_targets = batch.weak_targets;
      std::vector<std::optional<WeakLabelVec>> pt_pseudo(B);
      if (!unl_rows.empty()) {
        Tensor sub({unl_rows.size(), batch.features.dim(1),
                    batch.features.dim(2)});
        const std::size_t clip_sz =
            batch.features.dim(1) * batch.features.dim(2);
        for (std::size_t i = 0; i < unl_rows.size(); ++i)
          std::copy(batch.features.values().begin() + unl_rows[i] * clip_sz,
                    batch.features.values().begin() + (unl_rows[i] + 1) * clip_sz,
                    sub.values().begin() + i * clip_sz);

        PredictionBundle pt_out = pt.forward(sub);
        for (std::size_t i = 0; i < unl_rows.size(); ++i) {
          std::span<const double> row(pt_out.main_clip.data() +
                                          i * pt_out.main_clip.dim(1),
                                      pt_out.main_clip.dim(1));
          ps_targets[unl_rows[i]] = pseudo_label(row);
        }
        if (epoch >= cfg.warmup_epochs) {
          PredictionBundle ps_out = ps.forward(sub);
          for (std::size_t i = 0; i < unl_rows.size(); ++i) {
            std::span<const double> row(ps_out.main_clip.data() +
                                            i * ps_out.main_clip.dim(1),
                                        ps_out.main_clip.dim(1));
            pt_pseudo[unl_rows[i]] = pseudo_label(row);
          }
        }
      }

      // PS step
      for (const auto& id : batch.clip_ids) digest_ps = fnv1a(digest_ps, id);
      ForwardState ps_state;
      PsLoss ps_loss =
          ps_forward_backward(ps, batch, ps_targets, cfg, &ps_state);
      adam_ps.step(lr);
      ps.update_running_stats(ps_state);

      // PT step on the same clips
      for (const auto& id : batch.clip_ids) digest_pt = fnv1a(digest_pt, id);
      ForwardState pt_state;
      PtLoss pt_loss = pt_forward_backward(pt, batch, batch.weak_targets,
                                           pt_pseudo, epoch, cfg, true,
                                           &pt_state);
      adam_pt.step(lr);
      pt.update_running_stats(pt_state);

      if (!std::isfinite(ps_loss.total) || !std::isfinite(pt_loss.total))
        throw Error("training diverged (non-finite loss) at epoch " +
                    std::to_string(epoch));

      ps_sum.main += ps_loss.main;
      ps_sum.aux += ps_loss.aux;
      ps_sum.sedb += ps_loss.sedb;
      ps_sum.total += ps_loss.total;
      pt_sum.labeled += pt_loss.labeled;
      pt_sum.unlabeled += pt_loss.unlabeled;
      pt_sum.total += pt_loss.total;
    }

    const double inv = 1.0 / static_cast<double>(steps_per_epoch);
    double val_pt = std::nan(""), val_ps = std::nan("");
    if (validation_manifest) {
      val_pt = tagging_macro_f1(pt, *validation_manifest);
      val_ps = tagging_macro_f1(ps, *validation_manifest);
    }
    std::snprintf(buf, sizeof(buf),
                  "%zu\t%.12g\t%.12g\t%.12g\t%.12g\t%.12g\t%.12g\t%.12g\t"
                  "%.12g\t%.12g\t%.12g\t%.12g\t%016llx\t%016llx\n",
                  epoch, lr, alpha, pt_sum.labeled * inv,
                  pt_sum.unlabeled * inv, pt_sum.total * inv,
                  ps_sum.main * inv, ps_sum.aux * inv, ps_sum.sedb * inv,
                  ps_sum.total * inv, val_pt, val_ps,
                  static_cast<unsigned long long>(digest_pt),
                  static_cast<unsigned long long>(digest_ps));
    log << buf;
    log.flush();
  }

  TrainOutput out;
  out.ps_checkpoint = out_dir / "ps";
  out.pt_checkpoint = out_dir / "pt";
  out.metrics_log = log_path;
  ps.save(out.ps_checkpoint);
  pt.save(out.pt_checkpoint);
  return out;
}

}  // namespace sed
