#include "sed/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "sed/error.hpp"
#include "sed/kernels.hpp"

namespace sed {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void sigmoid_all(const Tensor& logits, Tensor& probs) {
  probs = Tensor(logits.shape().empty() ? std::vector<std::size_t>{}
                                        : logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) probs(i) = sigmoid(logits(i));
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst(i) += src(i);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

void EncoderConfig::validate() const {
  if (blocks.size() != 3 && blocks.size() != 9)
    throw ConfigError("encoder must have 3 (PS) or 9 (PT) blocks, got " +
                      std::to_string(blocks.size()));
  for (const auto& b : blocks) {
    if (b.channels == 0) throw ConfigError("block channels must be > 0");
    if (b.kernel % 2 == 0 || b.kernel == 0)
      throw ConfigError("block kernel must be odd");
    if (b.time_pool == 0 || b.freq_pool == 0)
      throw ConfigError("pool factors must be >= 1");
  }
}

std::size_t EncoderConfig::output_frames(std::size_t input_frames) const {
  std::size_t t = input_frames;
  for (const auto& b : blocks) {
    if (pooling == PoolingPolicy::exact && t % b.time_pool != 0)
      throw Error("input frames " + std::to_string(t) +
                  " not divisible by time pool " + std::to_string(b.time_pool));
    t /= b.time_pool;
    if (t == 0) throw Error("time axis pooled away");
  }
  return t;
}

std::size_t EncoderConfig::output_bins(std::size_t input_bins) const {
  std::size_t f = input_bins;
  for (const auto& b : blocks) {
    if (pooling == PoolingPolicy::exact && f % b.freq_pool != 0)
      throw Error("input bins " + std::to_string(f) +
                  " not divisible by freq pool " + std::to_string(b.freq_pool));
    f /= b.freq_pool;
    if (f == 0) throw Error("frequency axis pooled away");
  }
  return f;
}

std::size_t EncoderConfig::embedding_dim(std::size_t input_bins) const {
  return blocks.back().channels * output_bins(input_bins);
}

std::size_t EncoderConfig::time_pool_product() const {
  std::size_t p = 1;
  for (const auto& b : blocks) p *= b.time_pool;
  return p;
}

EncoderConfig EncoderConfig::ps_default() {
  EncoderConfig cfg;
  cfg.blocks = {{16, 3, 2, 2}, {32, 3, 2, 2}, {64, 3, 1, 2}};
  cfg.pooling = PoolingPolicy::exact;
  return cfg;
}

EncoderConfig EncoderConfig::pt_default() {
  EncoderConfig cfg;
  cfg.blocks = {{16, 3, 1, 2},  {32, 3, 2, 2},  {32, 3, 1, 1},
                {64, 3, 2, 2},  {64, 3, 1, 1},  {96, 3, 2, 2},
                {96, 3, 1, 1},  {128, 3, 2, 2}, {128, 3, 1, 1}};
  cfg.pooling = PoolingPolicy::truncate;
  return cfg;
}

std::string to_string(BranchKind k) {
  switch (k) {
    case BranchKind::embedding_attention: return "embedding_attention";
    case BranchKind::instance_max: return "instance_max";
    case BranchKind::instance_average: return "instance_average";
    case BranchKind::sedb: return "sedb";
  }
  return "?";
}

BranchKind branch_kind_from_string(std::string_view s) {
  if (s == "embedding_attention") return BranchKind::embedding_attention;
  if (s == "instance_max") return BranchKind::instance_max;
  if (s == "instance_average") return BranchKind::instance_average;
  if (s == "sedb") return BranchKind::sedb;
  throw ConfigError("unknown branch kind '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  encoder.validate();
  if (classes == 0) throw ConfigError("model needs at least one class");
  if (input_bins == 0) throw ConfigError("input_bins must be > 0");
  encoder.output_bins(input_bins);  // throws if the pooling chain is invalid
  std::size_t mains = 0, auxes = 0, sedbs = 0;
  for (const auto& b : branches) {
    switch (b.role) {
      case BranchRole::main:
        ++mains;
        if (b.kind != BranchKind::embedding_attention)
          throw ConfigError("main branch must be embedding-level attention");
        break;
      case BranchRole::auxiliary:
        ++auxes;
        if (b.kind != BranchKind::instance_max &&
            b.kind != BranchKind::instance_average)
          throw ConfigError("auxiliary branch must be instance-level GMP/GAP");
        break;
      case BranchRole::sedb:
        ++sedbs;
        if (b.kind != BranchKind::sedb)
          throw ConfigError("sedb role requires sedb kind");
        break;
    }
  }
  if (mains != 1) throw ConfigError("model needs exactly one main branch");
  if (auxes > 1) throw ConfigError("at most one auxiliary branch");
  if (sedbs > 1) throw ConfigError("at most one SEDB branch");
}

bool ModelConfig::has_auxiliary() const {
  for (const auto& b : branches)
    if (b.role == BranchRole::auxiliary) return true;
  return false;
}

BranchKind ModelConfig::auxiliary_kind() const {
  for (const auto& b : branches)
    if (b.role == BranchRole::auxiliary) return b.kind;
  throw Error("no auxiliary branch configured");
}

bool ModelConfig::has_sedb() const {
  for (const auto& b : branches)
    if (b.role == BranchRole::sedb) return true;
  return false;
}

ModelConfig ModelConfig::ps_default(std::size_t classes,
                                    std::optional<BranchKind> auxiliary,
                                    bool with_sedb) {
  ModelConfig cfg;
  cfg.encoder = EncoderConfig::ps_default();
  cfg.classes = classes;
  cfg.branches.push_back({BranchKind::embedding_attention, BranchRole::main});
  if (auxiliary)
    cfg.branches.push_back({*auxiliary, BranchRole::auxiliary});
  if (with_sedb) cfg.branches.push_back({BranchKind::sedb, BranchRole::sedb});
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::pt_default(std::size_t classes) {
  ModelConfig cfg;
  cfg.encoder = EncoderConfig::pt_default();
  cfg.classes = classes;
  cfg.branches.push_back({BranchKind::embedding_attention, BranchRole::main});
  cfg.validate();
  return cfg;
}

std::string model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["classes"] = cfg.classes;
  j["input_bins"] = cfg.input_bins;
  j["encoder"]["pooling"] =
      cfg.encoder.pooling == PoolingPolicy::exact ? "exact" : "truncate";
  auto& blocks = j["encoder"]["blocks"] = nlohmann::json::array();
  for (const auto& b : cfg.encoder.blocks)
    blocks.push_back({{"channels", b.channels},
                      {"kernel", b.kernel},
                      {"time_pool", b.time_pool},
                      {"freq_pool", b.freq_pool}});
  auto& branches = j["branches"] = nlohmann::json::array();
  for (const auto& b : cfg.branches) {
    std::string role = b.role == BranchRole::main        ? "main"
                       : b.role == BranchRole::auxiliary ? "auxiliary"
                                                         : "sedb";
    branches.push_back({{"kind", to_string(b.kind)}, {"role", role}});
  }
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad model config JSON: ") + e.what());
  }
  ModelConfig cfg;
  try {
    cfg.classes = j.at("classes").get<std::size_t>();
    cfg.input_bins = j.at("input_bins").get<std::size_t>();
    const std::string pooling = j.at("encoder").at("pooling").get<std::string>();
    if (pooling == "exact")
      cfg.encoder.pooling = PoolingPolicy::exact;
    else if (pooling == "truncate")
      cfg.encoder.pooling = PoolingPolicy::truncate;
    else
      throw ConfigError("unknown pooling policy '" + pooling + "'");
    for (const auto& b : j.at("encoder").at("blocks")) {
      ConvBlockConfig bc;
      bc.channels = b.at("channels").get<std::size_t>();
      bc.kernel = b.at("kernel").get<std::size_t>();
      bc.time_pool = b.at("time_pool").get<std::size_t>();
      bc.freq_pool = b.at("freq_pool").get<std::size_t>();
      cfg.encoder.blocks.push_back(bc);
    }
    for (const auto& b : j.at("branches")) {
      BranchConfig br;
      br.kind = branch_kind_from_string(b.at("kind").get<std::string>());
      const std::string role = b.at("role").get<std::string>();
      br.role = role == "main"        ? BranchRole::main
                : role == "auxiliary" ? BranchRole::auxiliary
                                      : BranchRole::sedb;
      cfg.branches.push_back(br);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config JSON: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

AtpHead::AtpHead(std::size_t classes, std::size_t dim, Rng& rng)
    : attn_w({classes, dim}),
      cls_w({classes, dim}),
      cls_b({classes}),
      g_attn_w({classes, dim}),
      g_cls_w({classes, dim}),
      g_cls_b({classes}) {
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  for (std::size_t i = 0; i < attn_w.size(); ++i) attn_w(i) = rng.normal(0, s);
  for (std::size_t i = 0; i < cls_w.size(); ++i) cls_w(i) = rng.normal(0, s);
}

FrameHead::FrameHead(std::size_t classes, std::size_t dim, Rng& rng)
    : w({classes, dim}), b({classes}), gw({classes, dim}), gb({classes}) {
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  for (std::size_t i = 0; i < w.size(); ++i) w(i) = rng.normal(0, s);
}

AtpOutput atp_pool(const Tensor& embeddings, const AtpHead& head) {
  const std::size_t B = embeddings.dim(0), T = embeddings.dim(1),
                    D = embeddings.dim(2);
  const std::size_t C = head.attn_w.dim(0);
  if (T == 0) throw Error("attention pooling over empty frame axis");

  Tensor logits({B, T, C});
  kernels::frame_linear_forward(embeddings.data(), B, T, D, head.attn_w.data(),
                                nullptr, C, logits.data(),
                                kernels::default_exec());

  AtpOutput out;
  out.attention = Tensor({B, T, C});
  Tensor z({B, C, D});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      double mx = logits(b, 0, c);
      for (std::size_t t = 1; t < T; ++t) mx = std::max(mx, logits(b, t, c));
      double sum = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const double e = std::exp(logits(b, t, c) - mx);
        out.attention(b, t, c) = e;
        sum += e;
      }
      for (std::size_t t = 0; t < T; ++t) {
        out.attention(b, t, c) /= sum;
        const double a = out.attention(b, t, c);
        const double* h = embeddings.data() + (b * T + t) * D;
        double* zp = z.data() + (b * C + c) * D;
        for (std::size_t d = 0; d < D; ++d) zp[d] += a * h[d];
      }
    }
  }

  out.clip_probs = Tensor({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* zp = z.data() + (b * C + c) * D;
      const double* wp = head.cls_w.data() + c * D;
      double acc = head.cls_b(c);
      for (std::size_t d = 0; d < D; ++d) acc += wp[d] * zp[d];
      out.clip_probs(b, c) = sigmoid(acc);
    }

  Tensor frame_logits({B, T, C});
  kernels::frame_linear_forward(embeddings.data(), B, T, D, head.cls_w.data(),
                                head.cls_b.data(), C, frame_logits.data(),
                                kernels::default_exec());
  sigmoid_all(frame_logits, out.frame_probs);
  return out;
}

namespace {

Tensor instance_pool(const Tensor& frame_probs, bool take_max) {
  const bool batched = frame_probs.rank() == 3;
  const std::size_t B = batched ? frame_probs.dim(0) : 1;
  const std::size_t T = batched ? frame_probs.dim(1) : frame_probs.dim(0);
  const std::size_t C = batched ? frame_probs.dim(2) : frame_probs.dim(1);
  if (T == 0) throw Error("instance pooling over empty frame axis");
  Tensor out(batched ? std::vector<std::size_t>{B, C}
                     : std::vector<std::size_t>{C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = frame_probs.data() + (b * T) * C + c;
      double acc = take_max ? p[0] : 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const double v = p[t * C];
        acc = take_max ? std::max(acc, v) : acc + v;
      }
      out(b * C + c) = take_max ? acc : acc / static_cast<double>(T);
    }
  return out;
}

}  // namespace

Tensor gmp_pool(const Tensor& frame_probs) { return instance_pool(frame_probs, true); }
Tensor gap_pool(const Tensor& frame_probs) { return instance_pool(frame_probs, false); }

// ---------------------------------------------------------------------------
// ConvBlock
// ---------------------------------------------------------------------------

ConvBlock::ConvBlock(ConvBlockConfig c, std::size_t in_ch, Rng& rng)
    : cfg(c),
      in_channels(in_ch),
      w({c.channels, in_ch, c.kernel, c.kernel}),
      gamma({c.channels}),
      beta({c.channels}),
      running_mean({c.channels}),
      running_var({c.channels}),
      gw({c.channels, in_ch, c.kernel, c.kernel}),
      ggamma({c.channels}),
      gbeta({c.channels}) {
  const double s =
      std::sqrt(2.0 / static_cast<double>(in_ch * c.kernel * c.kernel));
  for (std::size_t i = 0; i < w.size(); ++i) w(i) = rng.normal(0, s);
  gamma.fill(1.0);
  running_var.fill(1.0);
}

namespace {

void check_pool(PoolingPolicy policy, std::size_t dim, std::size_t pool,
                const char* axis) {
  if (pool > dim)
    throw Error(std::string("pool factor exceeds ") + axis + " extent");
  if (policy == PoolingPolicy::exact && dim % pool != 0)
    throw Error(std::string(axis) + " extent " + std::to_string(dim) +
                " not divisible by pool " + std::to_string(pool));
}

// conv -> BN -> ReLU -> pool. Training mode caches into `cache`.
Tensor block_forward(const ConvBlock& blk, const Tensor& x, bool training,
                     PoolingPolicy policy, BlockCache* cache) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), T = x.dim(2), F = x.dim(3);
  if (Ci != blk.in_channels) throw Error("conv block channel mismatch");
  const std::size_t Co = blk.cfg.channels;

  Tensor conv({B, Co, T, F});
  kernels::conv2d_forward(x.data(), B, Ci, T, F, blk.w.data(), Co,
                          blk.cfg.kernel, conv.data(),
                          kernels::default_exec());

  const std::size_t N = B * T * F;
  Tensor act({B, Co, T, F});
  std::vector<double> mean(Co), var(Co), invstd(Co);
  if (training) {
    for (std::size_t c = 0; c < Co; ++c) {
      double m = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = conv.data() + (b * Co + c) * T * F;
        for (std::size_t i = 0; i < T * F; ++i) m += p[i];
      }
      m /= static_cast<double>(N);
      double v = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = conv.data() + (b * Co + c) * T * F;
        for (std::size_t i = 0; i < T * F; ++i) {
          const double d = p[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(N);
      mean[c] = m;
      var[c] = v;
      invstd[c] = 1.0 / std::sqrt(v + kBnEps);
    }
  } else {
    for (std::size_t c = 0; c < Co; ++c) {
      mean[c] = blk.running_mean(c);
      var[c] = blk.running_var(c);
      invstd[c] = 1.0 / std::sqrt(var[c] + kBnEps);
    }
  }

  Tensor xhat;
  if (training && cache) xhat = Tensor({B, Co, T, F});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < Co; ++c) {
      const double* p = conv.data() + (b * Co + c) * T * F;
      double* a = act.data() + (b * Co + c) * T * F;
      double* xh = (training && cache)
                       ? xhat.data() + (b * Co + c) * T * F
                       : nullptr;
      const double g = blk.gamma(c), be = blk.beta(c);
      const double m = mean[c], is = invstd[c];
      for (std::size_t i = 0; i < T * F; ++i) {
        const double n = (p[i] - m) * is;
        if (xh) xh[i] = n;
        const double y = g * n + be;
        a[i] = y > 0.0 ? y : 0.0;  // ReLU
      }
    }

  std::size_t pt = blk.cfg.time_pool, pf = blk.cfg.freq_pool;
  Tensor out;
  std::vector<std::uint32_t> argmax;
  std::size_t To = T, Fo = F;
  if (pt == 1 && pf == 1) {
    out = act;
  } else {
    check_pool(policy, T, pt, "time");
    check_pool(policy, F, pf, "frequency");
    To = T / pt;
    Fo = F / pf;
    out = Tensor({B, Co, To, Fo});
    argmax.resize(B * Co * To * Fo);
    kernels::maxpool_forward(act.data(), B, Co, T, F, pt, pf, out.data(),
                             argmax.data(), kernels::default_exec());
  }

  if (cache) {
    cache->input = x;
    cache->xhat = std::move(xhat);
    cache->mean = std::move(mean);
    cache->var = std::move(var);
    cache->invstd = std::move(invstd);
    cache->relu_out = std::move(act);
    cache->pool_argmax = std::move(argmax);
    cache->t_out = To;
    cache->f_out = Fo;
    cache->out = out;
  }
  return out;
}

// Returns gradient w.r.t. the block input (skipped for the first block).
Tensor block_backward(ConvBlock& blk, const BlockCache& cache,
                      const Tensor& d_out, bool need_input_grad) {
  const std::size_t B = cache.input.dim(0), Ci = cache.input.dim(1),
                    T = cache.input.dim(2), F = cache.input.dim(3);
  const std::size_t Co = blk.cfg.channels;

  // pool
  Tensor d_act;
  if (blk.cfg.time_pool == 1 && blk.cfg.freq_pool == 1) {
    d_act = d_out;
  } else {
    d_act = Tensor({B, Co, T, F});
    kernels::maxpool_backward(d_out.data(), cache.pool_argmax.data(), B, Co, T,
                              F, blk.cfg.time_pool, blk.cfg.freq_pool,
                              d_act.data(), kernels::default_exec());
  }

  // ReLU
  Tensor d_bn({B, Co, T, F});
  for (std::size_t i = 0; i < d_bn.size(); ++i)
    d_bn(i) = cache.relu_out(i) > 0.0 ? d_act(i) : 0.0;

  // batch norm (training statistics)
  const double n = static_cast<double>(B * T * F);
  Tensor d_conv({B, Co, T, F});
  for (std::size_t c = 0; c < Co; ++c) {
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double* dy = d_bn.data() + (b * Co + c) * T * F;
      const double* xh = cache.xhat.data() + (b * Co + c) * T * F;
      for (std::size_t i = 0; i < T * F; ++i) {
        s1 += dy[i];
        s2 += dy[i] * xh[i];
      }
    }
    blk.gbeta(c) = s1;
    blk.ggamma(c) = s2;
    const double g = blk.gamma(c), is = cache.invstd[c];
    for (std::size_t b = 0; b < B; ++b) {
      const double* dy = d_bn.data() + (b * Co + c) * T * F;
      const double* xh = cache.xhat.data() + (b * Co + c) * T * F;
      double* dc = d_conv.data() + (b * Co + c) * T * F;
      for (std::size_t i = 0; i < T * F; ++i)
        dc[i] = is * g * (dy[i] - s1 / n - xh[i] * s2 / n);
    }
  }

  // conv
  kernels::conv2d_backward_weight(cache.input.data(), d_conv.data(), B, Ci, T,
                                  F, Co, blk.cfg.kernel, blk.gw.data(),
                                  kernels::default_exec());
  if (!need_input_grad) return Tensor();
  Tensor d_in({B, Ci, T, F});
  kernels::conv2d_backward_input(d_conv.data(), B, Ci, T, F, blk.w.data(), Co,
                                 blk.cfg.kernel, d_in.data(),
                                 kernels::default_exec());
  return d_in;
}

}  // namespace

Tensor ConvBlock::forward_eval(const Tensor& x, PoolingPolicy policy) const {
  return block_forward(*this, x, /*training=*/false, policy, nullptr);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  std::size_t in_ch = 1;
  for (const auto& bc : cfg_.encoder.blocks) {
    blocks_.emplace_back(bc, in_ch, rng);
    in_ch = bc.channels;
  }
  const std::size_t D = cfg_.embedding_dim();
  main_ = AtpHead(cfg_.classes, D, rng);
  if (cfg_.has_auxiliary()) aux_ = FrameHead(cfg_.classes, D, rng);
  if (cfg_.has_sedb()) sedb_ = FrameHead(cfg_.classes, D, rng);
}

Tensor Model::encode(const Tensor& features) const {
  ForwardState st = run_forward(features, false);
  return st.embeddings;
}

ForwardState Model::run_forward(const Tensor& features, bool training) const {
  if (features.rank() != 3) throw Error("model input must be B x T x F");
  const std::size_t B = features.dim(0), T = features.dim(1),
                    F = features.dim(2);

  if (F != cfg_.input_bins)
    throw Error("input has " + std::to_string(F) + " bins, model expects " +
                std::to_string(cfg_.input_bins));

  ForwardState st;
  if (training) st.blocks.resize(blocks_.size());

  // reinterpret as B x 1 x T x F (same layout)
  Tensor x({B, 1, T, F});
  std::memcpy(x.data(), features.data(), sizeof(double) * features.size());

  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = block_forward(blocks_[i], x, training, cfg_.encoder.pooling,
                      training ? &st.blocks[i] : nullptr);
  }

  const std::size_t Cch = x.dim(1), To = x.dim(2), Fo = x.dim(3);
  const std::size_t D = Cch * Fo;
  st.embeddings = Tensor({B, To, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < Cch; ++c)
      for (std::size_t t = 0; t < To; ++t)
        for (std::size_t f = 0; f < Fo; ++f)
          st.embeddings(b, t, c * Fo + f) = x(b, c, t, f);

  if (main_.attn_w.empty())
    throw Error("model heads not initialized (internal)");
  if (main_.attn_w.dim(1) != D)
    throw Error("embedding dim " + std::to_string(D) +
                " does not match head dim " + std::to_string(main_.attn_w.dim(1)));

  const std::size_t C = cfg_.classes;

  // main branch: embedding-level attention pooling
  st.attn_logits = Tensor({B, To, C});
  kernels::frame_linear_forward(st.embeddings.data(), B, To, D,
                                main_.attn_w.data(), nullptr, C,
                                st.attn_logits.data(), kernels::default_exec());
  st.bundle.attention = Tensor({B, To, C});
  st.z = Tensor({B, C, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double mx = st.attn_logits(b, 0, c);
      for (std::size_t t = 1; t < To; ++t)
        mx = std::max(mx, st.attn_logits(b, t, c));
      double sum = 0.0;
      for (std::size_t t = 0; t < To; ++t) {
        const double e = std::exp(st.attn_logits(b, t, c) - mx);
        st.bundle.attention(b, t, c) = e;
        sum += e;
      }
      double* zp = st.z.data() + (b * C + c) * D;
      for (std::size_t t = 0; t < To; ++t) {
        st.bundle.attention(b, t, c) /= sum;
        const double a = st.bundle.attention(b, t, c);
        const double* h = st.embeddings.data() + (b * To + t) * D;
        for (std::size_t d = 0; d < D; ++d) zp[d] += a * h[d];
      }
    }

  st.clip_logits = Tensor({B, C});
  st.bundle.main_clip = Tensor({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* zp = st.z.data() + (b * C + c) * D;
      const double* wp = main_.cls_w.data() + c * D;
      double acc = main_.cls_b(c);
      for (std::size_t d = 0; d < D; ++d) acc += wp[d] * zp[d];
      st.clip_logits(b, c) = acc;
      st.bundle.main_clip(b, c) = sigmoid(acc);
    }

  Tensor frame_logits({B, To, C});
  kernels::frame_linear_forward(st.embeddings.data(), B, To, D,
                                main_.cls_w.data(), main_.cls_b.data(), C,
                                frame_logits.data(), kernels::default_exec());
  sigmoid_all(frame_logits, st.bundle.main_frame);

  if (cfg_.has_auxiliary()) {
    st.frame_logits_aux = Tensor({B, To, C});
    kernels::frame_linear_forward(st.embeddings.data(), B, To, D,
                                  aux_.w.data(), aux_.b.data(), C,
                                  st.frame_logits_aux.data(),
                                  kernels::default_exec());
    Tensor probs;
    sigmoid_all(st.frame_logits_aux, probs);
    st.bundle.aux_kind = cfg_.auxiliary_kind();
    st.bundle.aux_clip = *st.bundle.aux_kind == BranchKind::instance_max
                             ? gmp_pool(probs)
                             : gap_pool(probs);
    st.bundle.aux_frame = std::move(probs);
  }

  if (cfg_.has_sedb()) {
    st.frame_logits_sedb = Tensor({B, To, C});
    kernels::frame_linear_forward(st.embeddings.data(), B, To, D,
                                  sedb_.w.data(), sedb_.b.data(), C,
                                  st.frame_logits_sedb.data(),
                                  kernels::default_exec());
    Tensor probs;
    sigmoid_all(st.frame_logits_sedb, probs);
    st.bundle.sedb_frame = std::move(probs);
  }

  return st;
}

PredictionBundle Model::forward(const Tensor& features) const {
  return run_forward(features, false).bundle;
}

ForwardState Model::forward_train(const Tensor& features) const {
  return run_forward(features, true);
}

void Model::backward(const ForwardState& state, const BranchGrads& grads) {
  const std::size_t B = state.embeddings.dim(0), To = state.embeddings.dim(1),
                    D = state.embeddings.dim(2);
  const std::size_t C = cfg_.classes;

  Tensor dH({B, To, D});
  Tensor dh_tmp({B, To, D});

  if (cfg_.has_sedb()) {
    Tensor d = grads.d_sedb_frame_logit.empty() ? Tensor({B, To, C})
                                                : grads.d_sedb_frame_logit;
    kernels::frame_linear_backward(state.embeddings.data(), d.data(), B, To, D,
                                   C, sedb_.w.data(), dh_tmp.data(),
                                   sedb_.gw.data(), sedb_.gb.data(),
                                   kernels::default_exec());
    add_into(dH, dh_tmp);
  }

  if (cfg_.has_auxiliary()) {
    Tensor d = grads.d_aux_frame_logit.empty() ? Tensor({B, To, C})
                                               : grads.d_aux_frame_logit;
    kernels::frame_linear_backward(state.embeddings.data(), d.data(), B, To, D,
                                   C, aux_.w.data(), dh_tmp.data(),
                                   aux_.gw.data(), aux_.gb.data(),
                                   kernels::default_exec());
    add_into(dH, dh_tmp);
  }

  // main branch
  Tensor ds = grads.d_main_clip_logit.empty() ? Tensor({B, C})
                                              : grads.d_main_clip_logit;
  main_.g_cls_b.fill(0.0);
  main_.g_cls_w.fill(0.0);
  Tensor dz({B, C, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double g = ds(b, c);
      main_.g_cls_b(c) += g;
      const double* zp = state.z.data() + (b * C + c) * D;
      double* gw = main_.g_cls_w.data() + c * D;
      const double* wp = main_.cls_w.data() + c * D;
      double* dzp = dz.data() + (b * C + c) * D;
      for (std::size_t d = 0; d < D; ++d) {
        gw[d] += g * zp[d];
        dzp[d] = g * wp[d];
      }
    }

  // through z = sum_t a_t h_t and the softmax attention
  Tensor dlogits({B, To, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* dzp = dz.data() + (b * C + c) * D;
      // da_t and dH from z
      double inner = 0.0;  // sum_u a_u da_u
      std::vector<double> da(To);
      for (std::size_t t = 0; t < To; ++t) {
        const double* h = state.embeddings.data() + (b * To + t) * D;
        double acc = 0.0;
        for (std::size_t d = 0; d < D; ++d) acc += dzp[d] * h[d];
        da[t] = acc;
        const double a = state.bundle.attention(b, t, c);
        inner += a * acc;
        double* dhp = dH.data() + (b * To + t) * D;
        for (std::size_t d = 0; d < D; ++d) dhp[d] += a * dzp[d];
      }
      for (std::size_t t = 0; t < To; ++t) {
        const double a = state.bundle.attention(b, t, c);
        dlogits(b, t, c) = a * (da[t] - inner);
      }
    }

  kernels::frame_linear_backward(state.embeddings.data(), dlogits.data(), B,
                                 To, D, C, main_.attn_w.data(), dh_tmp.data(),
                                 main_.g_attn_w.data(), nullptr,
                                 kernels::default_exec());
  add_into(dH, dh_tmp);

  // un-flatten into the last block's output grid
  const std::size_t Cch = cfg_.encoder.blocks.back().channels;
  const std::size_t Fo = D / Cch;
  Tensor d_out({B, Cch, To, Fo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < Cch; ++c)
      for (std::size_t t = 0; t < To; ++t)
        for (std::size_t f = 0; f < Fo; ++f)
          d_out(b, c, t, f) = dH(b, t, c * Fo + f);

  for (std::size_t i = blocks_.size(); i-- > 0;) {
    d_out = block_backward(blocks_[i], state.blocks[i], d_out, i > 0);
  }
}

void Model::update_running_stats(const ForwardState& state) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& blk = blocks_[i];
    const auto& cache = state.blocks[i];
    for (std::size_t c = 0; c < blk.cfg.channels; ++c) {
      blk.running_mean(c) = (1.0 - kBnMomentum) * blk.running_mean(c) +
                            kBnMomentum * cache.mean[c];
      blk.running_var(c) =
          (1.0 - kBnMomentum) * blk.running_var(c) + kBnMomentum * cache.var[c];
    }
  }
}

std::vector<ParamRef> Model::params() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "encoder.block" + std::to_string(i);
    out.push_back({p + ".conv.w", &blocks_[i].w, &blocks_[i].gw});
    out.push_back({p + ".bn.gamma", &blocks_[i].gamma, &blocks_[i].ggamma});
    out.push_back({p + ".bn.beta", &blocks_[i].beta, &blocks_[i].gbeta});
  }
  out.push_back({"main.attn_w", &main_.attn_w, &main_.g_attn_w});
  out.push_back({"main.cls_w", &main_.cls_w, &main_.g_cls_w});
  out.push_back({"main.cls_b", &main_.cls_b, &main_.g_cls_b});
  if (cfg_.has_auxiliary()) {
    out.push_back({"aux.w", &aux_.w, &aux_.gw});
    out.push_back({"aux.b", &aux_.b, &aux_.gb});
  }
  if (cfg_.has_sedb()) {
    out.push_back({"sedb.w", &sedb_.w, &sedb_.gw});
    out.push_back({"sedb.b", &sedb_.b, &sedb_.gb});
  }
  return out;
}

std::vector<BufferRef> Model::buffers() {
  std::vector<BufferRef> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "encoder.block" + std::to_string(i);
    out.push_back({p + ".bn.running_mean", &blocks_[i].running_mean});
    out.push_back({p + ".bn.running_var", &blocks_[i].running_var});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: config.json + tensors.json + one float32 file per tensor
// ---------------------------------------------------------------------------

namespace {

void write_tensor_file(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  std::vector<float> raw(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) raw[i] = static_cast<float>(t(i));
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(float)));
}

void read_tensor_file(Tensor& t, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<float> raw(t.size());
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != raw.size() * sizeof(float))
    throw Error("tensor file " + path.string() + " truncated");
  for (std::size_t i = 0; i < t.size(); ++i) t(i) = static_cast<double>(raw[i]);
}

}  // namespace

void Model::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  {
    std::ofstream cf(tmp / "config.json");
    cf << model_config_to_json(cfg_) << "\n";
  }

  // const_cast is contained: params()/buffers() only expose member tensors.
  auto& self = const_cast<Model&>(*this);
  nlohmann::json index;
  auto add = [&](const std::string& name, const Tensor& t) {
    index[name] = {{"file", name + ".bin"}, {"shape", t.shape()}};
    write_tensor_file(t, tmp / (name + ".bin"));
  };
  for (const auto& p : self.params()) add(p.name, *p.value);
  for (const auto& b : self.buffers()) add(b.name, *b.value);
  {
    std::ofstream jf(tmp / "tensors.json");
    jf << index.dump(2) << "\n";
  }

  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Model Model::load(const std::filesystem::path& dir) {
  std::ifstream cf(dir / "config.json");
  if (!cf) throw Error("cannot open checkpoint config " + dir.string());
  std::string text((std::istreambuf_iterator<char>(cf)),
                   std::istreambuf_iterator<char>());
  Model m(model_config_from_json(text), 0);

  std::ifstream jf(dir / "tensors.json");
  if (!jf) throw Error("cannot open tensor index in " + dir.string());
  nlohmann::json index;
  jf >> index;

  auto load_one = [&](const std::string& name, Tensor& t) {
    if (!index.contains(name))
      throw Error("checkpoint missing tensor '" + name + "'");
    const auto shape = index[name]["shape"].get<std::vector<std::size_t>>();
    if (shape != t.shape())
      throw Error("checkpoint tensor '" + name + "' has wrong shape");
    read_tensor_file(t, dir / index[name]["file"].get<std::string>());
  };
  for (auto& p : m.params()) load_one(p.name, *p.value);
  for (auto& b : m.buffers()) load_one(b.name, *b.value);
  return m;
}

}  // namespace sed
