#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sed/rng.hpp"
#include "sed/tensor.hpp"

namespace sed {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ConvBlockConfig {
  std::size_t channels = 16;
  std::size_t kernel = 3;     // odd, shape-preserving padding
  std::size_t time_pool = 1;
  std::size_t freq_pool = 1;

  bool operator==(const ConvBlockConfig&) const = default;
};

// exact: pool factors must divide the running grid; truncate: trailing
// rows/cols that do not fill a window are dropped (floor division).
enum class PoolingPolicy { exact, truncate };

struct EncoderConfig {
  std::vector<ConvBlockConfig> blocks;
  PoolingPolicy pooling = PoolingPolicy::exact;

  void validate() const;  // 3 blocks (PS) or 9 blocks (PT)
  std::size_t output_frames(std::size_t input_frames) const;
  std::size_t output_bins(std::size_t input_bins) const;
  std::size_t embedding_dim(std::size_t input_bins) const;
  std::size_t time_pool_product() const;

  // 3 blocks, 4x time reduction, small receptive field (detector).
  static EncoderConfig ps_default();
  // 9 blocks, 16x time reduction, large receptive field (tagger).
  static EncoderConfig pt_default();

  bool operator==(const EncoderConfig&) const = default;
};

enum class BranchKind { embedding_attention, instance_max, instance_average, sedb };
enum class BranchRole { main, auxiliary, sedb };

std::string to_string(BranchKind k);
BranchKind branch_kind_from_string(std::string_view s);

struct BranchConfig {
  BranchKind kind = BranchKind::embedding_attention;
  BranchRole role = BranchRole::main;

  bool operator==(const BranchConfig&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  std::vector<BranchConfig> branches;
  std::size_t classes = 0;
  std::size_t input_bins = 64;  // F; fixes the embedding dimension

  void validate() const;
  bool has_auxiliary() const;
  BranchKind auxiliary_kind() const;  // valid only if has_auxiliary()
  bool has_sedb() const;
  std::size_t embedding_dim() const { return encoder.embedding_dim(input_bins); }

  static ModelConfig ps_default(std::size_t classes,
                                std::optional<BranchKind> auxiliary,
                                bool with_sedb);
  static ModelConfig pt_default(std::size_t classes);

  bool operator==(const ModelConfig&) const = default;
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Pooling branches (standalone ops)
// ---------------------------------------------------------------------------

// Embedding-level attention pooling head. Per class c the attention over
// frames is softmax_t(attn_w[c] . h_t); the clip embedding is the attention-
// weighted sum of frame embeddings; clip and frame probabilities share the
// classifier (cls_w, cls_b).
struct AtpHead {
  Tensor attn_w;  // C x D
  Tensor cls_w;   // C x D
  Tensor cls_b;   // C
  Tensor g_attn_w, g_cls_w, g_cls_b;

  AtpHead() = default;
  AtpHead(std::size_t classes, std::size_t dim, Rng& rng);
};

struct AtpOutput {
  Tensor clip_probs;   // B x C
  Tensor frame_probs;  // B x T' x C
  Tensor attention;    // B x T' x C, columns sum to 1 over frames
};

AtpOutput atp_pool(const Tensor& embeddings /*B x T' x D*/, const AtpHead& head);

// Instance-level pooling of per-frame probabilities into clip probabilities.
// Accept B x T' x C (returns B x C) or T' x C (returns C).
Tensor gmp_pool(const Tensor& frame_probs);
Tensor gap_pool(const Tensor& frame_probs);

// Per-frame sigmoid classifier (auxiliary and SEDB heads).
struct FrameHead {
  Tensor w;  // C x D
  Tensor b;  // C
  Tensor gw, gb;

  FrameHead() = default;
  FrameHead(std::size_t classes, std::size_t dim, Rng& rng);
};

// ---------------------------------------------------------------------------
// CNN block
// ---------------------------------------------------------------------------

// conv (no bias) -> batch norm -> ReLU -> max pool.
struct ConvBlock {
  ConvBlockConfig cfg;
  std::size_t in_channels = 1;
  Tensor w;                         // Co x Ci x k x k
  Tensor gamma, beta;               // Co
  Tensor running_mean, running_var; // Co (inference statistics)
  Tensor gw, ggamma, gbeta;

  ConvBlock() = default;
  ConvBlock(ConvBlockConfig cfg, std::size_t in_channels, Rng& rng);

  // Inference-mode forward (running statistics).
  Tensor forward_eval(const Tensor& x /*B x Ci x T x F*/,
                      PoolingPolicy policy) const;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct PredictionBundle {
  Tensor main_clip;    // B x C
  Tensor main_frame;   // B x T' x C
  Tensor attention;    // B x T' x C
  std::optional<Tensor> aux_clip;
  std::optional<Tensor> aux_frame;
  std::optional<BranchKind> aux_kind;  // instance_max or instance_average
  std::optional<Tensor> sedb_frame;
};

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

struct BufferRef {
  std::string name;
  Tensor* value;
};

struct BlockCache {
  Tensor input;                       // B x Ci x T x F
  Tensor xhat;                        // normalized conv output
  std::vector<double> mean, invstd;   // batch statistics per channel
  std::vector<double> var;
  Tensor relu_out;                    // post-ReLU, pre-pool
  std::vector<std::uint32_t> pool_argmax;
  std::size_t t_out = 0, f_out = 0;
  Tensor out;
};

struct ForwardState {
  PredictionBundle bundle;
  std::vector<BlockCache> blocks;
  Tensor embeddings;        // B x T' x D
  Tensor attn_logits;       // B x T' x C
  Tensor z;                 // B x C x D (attention-pooled embeddings)
  Tensor clip_logits;       // B x C
  Tensor frame_logits_aux;  // B x T' x C (empty when absent)
  Tensor frame_logits_sedb;
};

// Loss gradients w.r.t. branch output logits; empty tensors mean "no
// gradient for this branch".
struct BranchGrads {
  Tensor d_main_clip_logit;   // B x C
  Tensor d_aux_frame_logit;   // B x T' x C
  Tensor d_sedb_frame_logit;  // B x T' x C
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::size_t classes() const { return cfg_.classes; }
  std::size_t output_frames(std::size_t input_frames) const {
    return cfg_.encoder.output_frames(input_frames);
  }

  // Frame embeddings (inference-mode batch norm). Pure.
  Tensor encode(const Tensor& features /*B x T x F*/) const;

  // Inference-mode forward. Pure.
  PredictionBundle forward(const Tensor& features) const;

  // Training-mode forward (batch statistics); caches everything backward
  // needs. Does not touch running statistics.
  ForwardState forward_train(const Tensor& features) const;

  // Overwrites all parameter gradients.
  void backward(const ForwardState& state, const BranchGrads& grads);

  // Fold the cached batch statistics into the running averages.
  void update_running_stats(const ForwardState& state);

  std::vector<ParamRef> params();
  std::vector<BufferRef> buffers();

  void save(const std::filesystem::path& dir) const;
  static Model load(const std::filesystem::path& dir);

 private:
  ForwardState run_forward(const Tensor& features, bool training) const;

  ModelConfig cfg_;
  std::vector<ConvBlock> blocks_;
  AtpHead main_;
  FrameHead aux_;
  FrameHead sedb_;
};

}  // namespace sed
