#include "mhssm/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace mhssm {

Frontend parse_frontend(const std::string& name) {
  if (name == "tr") return Frontend::tr;
  if (name == "ms") return Frontend::ms;
  if (name == "linear") return Frontend::linear;
  throw ConfigError("unknown frontend '" + name + "' (expected tr, ms or linear)");
}

BlockKind parse_block_kind(const std::string& name) {
  if (name == "mh_ssm") return BlockKind::mh_ssm;
  if (name == "transformer") return BlockKind::transformer;
  if (name == "stateformer") return BlockKind::stateformer;
  throw ConfigError("unknown block kind '" + name + "' (expected mh_ssm, transformer or stateformer)");
}

std::string to_string(Frontend f) {
  switch (f) {
    case Frontend::tr: return "tr";
    case Frontend::ms: return "ms";
    case Frontend::linear: return "linear";
  }
  return "?";
}

std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::mh_ssm: return "mh_ssm";
    case BlockKind::transformer: return "transformer";
    case BlockKind::stateformer: return "stateformer";
  }
  return "?";
}

MhSsmBlockConfig EncoderConfig::default_frontend_ssm() {
  MhSsmBlockConfig c;
  c.heads = 4;
  c.stack = 2;
  c.state_dim = 16;
  c.gating = Gating::ihg;
  return c;
}

MhSsmBlockConfig EncoderConfig::layer_ssm() const {
  MhSsmBlockConfig c = mh_ssm;
  c.model_dim = model_dim;
  c.dropout = dropout;
  return c;
}

MhSsmBlockConfig EncoderConfig::frontend_ssm_at(std::size_t dim) const {
  MhSsmBlockConfig c = frontend_ssm;
  c.model_dim = dim;
  c.dropout = dropout;
  return c;
}

void EncoderConfig::validate() const {
  if (input_dim < 1) throw ConfigError("encoder: input_dim must be >= 1");
  if (model_dim < 1) throw ConfigError("encoder: model_dim must be >= 1");
  if (frontend != Frontend::linear && model_dim % 4 != 0) {
    throw ConfigError("encoder: model_dim " + std::to_string(model_dim) +
                      " must be divisible by 4 for the " + to_string(frontend) + " frontend");
  }
  if (ffn_dim < 1) throw ConfigError("encoder: ffn_dim must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder: dropout must be in [0, 1)");
  if (block_kind != BlockKind::mh_ssm) {
    if (attn_heads < 1 || model_dim % attn_heads != 0) {
      throw ConfigError("encoder: model_dim " + std::to_string(model_dim) +
                        " is not divisible by attn_heads " + std::to_string(attn_heads));
    }
  }
  if (block_kind != BlockKind::transformer) layer_ssm().validate();
  if (frontend == Frontend::ms) {
    frontend_ssm_at(model_dim / 4).validate();
    frontend_ssm_at(model_dim / 2).validate();
  }
}

SeqVar time_reduction(const SeqVar& x) {
  const Shape& s = x.data.shape();
  if (s.size() != 3) throw DimensionError("time_reduction: expected [batch, time, dim], got " + to_string(s));
  const std::size_t len = s[1], d = s[2];
  const std::size_t half = (len + 1) / 2;
  Var v = len % 2 ? pad_time(x.data, len + 1) : x.data;
  SeqVar out{reshape(v, {s[0], half, 2 * d}), {}};
  out.lengths.reserve(x.lengths.size());
  for (std::size_t l : x.lengths) out.lengths.push_back((l + 1) / 2);
  return out;
}

Tensor sinusoidal_positions(std::size_t len, std::size_t dim) {
  Tensor pe({len, dim});
  auto v = pe.mutable_data();
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
      const double a = static_cast<double>(t) * freq;
      v[t * dim + i] = i % 2 == 0 ? std::sin(a) : std::cos(a);
    }
  }
  return pe;
}

namespace {

Tensor key_mask(const Lengths& lengths, std::size_t len) {
  Tensor m({lengths.size(), 1, 1, len});
  auto v = m.mutable_data();
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    if (lengths[b] == 0) {
      throw std::invalid_argument("attention: sequence " + std::to_string(b) +
                                  " has no valid positions");
    }
    for (std::size_t t = 0; t < std::min(lengths[b], len); ++t) v[b * len + t] = 1.0;
  }
  return m;
}

Var residual(Context& ctx, Var x, Var branch, double rate, const Lengths& lengths) {
  if (ctx.training()) branch = dropout(branch, rate, ctx.rng());
  return mask_time(add(x, branch), lengths);
}

}  // namespace

AttentionBlock::AttentionBlock(ParameterSet& params, const std::string& prefix, std::size_t dim,
                               std::size_t heads, double dropout, Rng& rng)
    : norm_(params, prefix + ".norm", dim),
      q_(params, prefix + ".q", dim, dim, rng),
      k_(params, prefix + ".k", dim, dim, rng, false),
      v_(params, prefix + ".v", dim, dim, rng),
      o_(params, prefix + ".o", dim, dim, rng),
      dim_(dim),
      heads_(heads),
      dropout_(dropout) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

namespace {

// [B, L, D] -> [B, H, L, D/H]
Var split_heads(Var x, std::size_t heads) {
  const Shape& s = x.shape();
  return permute_0213(reshape(x, {s[0], s[1], heads, s[2] / heads}));
}

}  // namespace

Var AttentionBlock::weights(Context& ctx, Var z, const Lengths& lengths) const {
  if (z.shape().size() != 3 || z.shape()[0] != lengths.size()) {
    throw DimensionError("attention: expected [batch, time, dim] with one length per row, got " +
                         to_string(z.shape()));
  }
  Var q = split_heads(q_(ctx, z), heads_);
  Var k = split_heads(k_(ctx, z), heads_);
  const double s = 1.0 / std::sqrt(static_cast<double>(dim_ / heads_));
  Var scores = scale(matmul(q, transpose_last2(k)), s);
  return softmax(scores, key_mask(lengths, z.shape()[1]));
}

Var AttentionBlock::attend(Context& ctx, Var z, const Lengths& lengths) const {
  Var w = weights(ctx, z, lengths);
  Var ctxv = permute_0213(matmul(w, split_heads(v_(ctx, z), heads_)));
  const Shape& s = z.shape();
  return reshape(ctxv, {s[0], s[1], dim_});
}

Var AttentionBlock::operator()(Context& ctx, Var x, const Lengths& lengths) const {
  return residual(ctx, x, o_(ctx, attend(ctx, norm_(ctx, x), lengths)), dropout_, lengths);
}

FeedForwardBlock::FeedForwardBlock(ParameterSet& params, const std::string& prefix,
                                   std::size_t dim, std::size_t hidden, double dropout, Rng& rng)
    : norm_(params, prefix + ".norm", dim),
      up_(params, prefix + ".up", dim, hidden, rng),
      down_(params, prefix + ".down", hidden, dim, rng),
      dropout_(dropout) {}

Var FeedForwardBlock::operator()(Context& ctx, Var x, const Lengths& lengths) const {
  return residual(ctx, x, down_(ctx, gelu(up_(ctx, norm_(ctx, x)))), dropout_, lengths);
}

EncoderLayer::EncoderLayer(ParameterSet& params, const std::string& prefix, BlockKind kind,
                           std::size_t dim, std::size_t attn_heads, std::size_t ffn_dim,
                           const MhSsmBlockConfig& ssm, double dropout, bool skip_ssm_branch,
                           Rng& rng)
    : skip_ssm_branch_(skip_ssm_branch),
      ssm_(kind != BlockKind::transformer
               ? std::optional<BidirMhSsmBlock>(std::in_place, params, prefix + ".ssm", ssm, rng)
               : std::nullopt),
      attn_(kind != BlockKind::mh_ssm
                ? std::optional<AttentionBlock>(std::in_place, params, prefix + ".attn", dim,
                                                attn_heads, dropout, rng)
                : std::nullopt),
      ffn_(params, prefix + ".ffn", dim, ffn_dim, dropout, rng) {}

Var EncoderLayer::operator()(Context& ctx, Var x, const Lengths& lengths) const {
  if (ssm_ && !skip_ssm_branch_) x = (*ssm_)(ctx, x, lengths);
  if (attn_) x = (*attn_)(ctx, x, lengths);
  return ffn_(ctx, x, lengths);
}

namespace {

std::size_t front_proj_dim(const EncoderConfig& cfg) {
  return cfg.frontend == Frontend::linear ? cfg.model_dim : cfg.model_dim / 4;
}

const EncoderConfig& validated(const EncoderConfig& cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

Encoder::Encoder(const EncoderConfig& cfg, ParameterSet& params)
    : cfg_(validated(cfg)) {
  Rng rng(cfg.seed);
  front_proj_ = Linear(params, "frontend.proj", cfg.input_dim, front_proj_dim(cfg), rng);
  if (cfg.frontend == Frontend::ms) {
    for (std::size_t i = 0; i < 2; ++i) {
      front_blocks_low_.emplace_back(params, "frontend.low" + std::to_string(i), BlockKind::mh_ssm,
                                     cfg.model_dim / 4, 1, cfg.ffn_dim,
                                     cfg.frontend_ssm_at(cfg.model_dim / 4), cfg.dropout, false, rng);
    }
    for (std::size_t i = 0; i < 2; ++i) {
      front_blocks_high_.emplace_back(params, "frontend.high" + std::to_string(i), BlockKind::mh_ssm,
                                      cfg.model_dim / 2, 1, cfg.ffn_dim,
                                      cfg.frontend_ssm_at(cfg.model_dim / 2), cfg.dropout, false, rng);
    }
  }
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    layers_.emplace_back(params, "layer" + std::to_string(i), cfg.block_kind, cfg.model_dim,
                         cfg.attn_heads, cfg.ffn_dim, cfg.layer_ssm(), cfg.dropout,
                         cfg.skip_ssm_branch, rng);
  }
  final_norm_ = LayerNorm(params, "final_norm", cfg.model_dim);
}

SeqVar Encoder::frontend(Context& ctx, Var x, const Lengths& lengths) const {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] != lengths.size()) {
    throw DimensionError("encoder: expected input [batch, time, " + std::to_string(cfg_.input_dim) +
                         "] with one length per row, got " + to_string(s));
  }
  if (s[2] != cfg_.input_dim) {
    throw ConfigError("encoder: input dim " + std::to_string(s[2]) + " does not match input_dim " +
                      std::to_string(cfg_.input_dim));
  }
  for (std::size_t l : lengths) {
    if (l > s[1]) throw DimensionError("encoder: length " + std::to_string(l) + " exceeds padded time " + std::to_string(s[1]));
  }
  SeqVar h{mask_time(front_proj_(ctx, x), lengths), lengths};
  if (cfg_.frontend == Frontend::linear) return h;
  const bool blocks = cfg_.frontend == Frontend::ms && !cfg_.skip_frontend_blocks;
  if (blocks) for (const auto& b : front_blocks_low_) h.data = b(ctx, h.data, h.lengths);
  h = time_reduction(h);
  if (blocks) for (const auto& b : front_blocks_high_) h.data = b(ctx, h.data, h.lengths);
  return time_reduction(h);
}

SeqVar Encoder::operator()(Context& ctx, Var x, const Lengths& lengths) const {
  SeqVar h = frontend(ctx, x, lengths);
  if (cfg_.block_kind == BlockKind::transformer) {
    const Shape& s = h.data.shape();
    Var pe = ctx.constant(sinusoidal_positions(s[1], s[2]));
    h.data = mask_time(add(h.data, pe), h.lengths);
  }
  for (const auto& layer : layers_) h.data = layer(ctx, h.data, h.lengths);
  h.data = mask_time(final_norm_(ctx, h.data), h.lengths);
  return h;
}

SeqBatch run_encoder(const Encoder& enc, const ParameterSet& params, const SeqBatch& x) {
  Context ctx(params, Mode::eval);
  SeqVar out = enc(ctx, ctx.constant(x.data), x.lengths);
  return {out.data.value(), out.lengths};
}

std::size_t linear_params(std::size_t in, std::size_t out) { return in * out + out; }

std::size_t ssm_params(std::size_t channels, std::size_t state_dim) {
  // log_neg_re, imag: P*N each; b, c: 2*P*N each; d, log_dt: P each.
  return 6 * channels * state_dim + 2 * channels;
}

std::size_t mh_ssm_stage_params(const MhSsmBlockConfig& cfg) {
  std::size_t n = linear_params(cfg.model_dim, cfg.model_dim);
  n += cfg.heads * ssm_params(cfg.head_dim(), cfg.state_dim);
  if (cfg.gating == Gating::glu) n += linear_params(cfg.model_dim, 2 * cfg.model_dim);
  return n + linear_params(cfg.gated_width(), cfg.model_dim);
}

std::size_t bidir_block_params(const MhSsmBlockConfig& cfg) {
  const std::size_t directions = cfg.tie_directions ? 1 : 2;
  return 2 * cfg.model_dim + directions * cfg.stack * mh_ssm_stage_params(cfg) +
         linear_params(2 * cfg.model_dim, cfg.model_dim);
}

namespace {

std::size_t layer_params(BlockKind kind, std::size_t d, std::size_t ffn, const MhSsmBlockConfig& ssm) {
  std::size_t n = 2 * d + linear_params(d, ffn) + linear_params(ffn, d);
  if (kind != BlockKind::transformer) n += bidir_block_params(ssm);
  // Attention: the key projection has no bias.
  if (kind != BlockKind::mh_ssm) n += 2 * d + 4 * linear_params(d, d) - d;
  return n;
}

}  // namespace

ParamReport param_count(const EncoderConfig& cfg) {
  cfg.validate();
  ParamReport r;
  std::size_t front = linear_params(cfg.input_dim, front_proj_dim(cfg));
  if (cfg.frontend == Frontend::ms) {
    front += 2 * layer_params(BlockKind::mh_ssm, cfg.model_dim / 4, cfg.ffn_dim,
                              cfg.frontend_ssm_at(cfg.model_dim / 4));
    front += 2 * layer_params(BlockKind::mh_ssm, cfg.model_dim / 2, cfg.ffn_dim,
                              cfg.frontend_ssm_at(cfg.model_dim / 2));
  }
  r.rows.emplace_back("frontend", front);
  const std::size_t layer = layer_params(cfg.block_kind, cfg.model_dim, cfg.ffn_dim, cfg.layer_ssm());
  for (std::size_t i = 0; i < cfg.num_layers; ++i) r.rows.emplace_back("layer" + std::to_string(i), layer);
  r.rows.emplace_back("final_norm", 2 * cfg.model_dim);
  for (const auto& row : r.rows) r.total += row.second;
  return r;
}

ParamReport param_count(const ParameterSet& params) {
  ParamReport r;
  for (const auto& name : params.names()) {
    const std::string group = name.substr(0, name.find('.'));
    const std::size_t n = params.get(name).size();
    if (r.rows.empty() || r.rows.back().first != group) {
      bool found = false;
      for (auto& row : r.rows) {
        if (row.first == group) {
          row.second += n;
          found = true;
        }
      }
      if (!found) r.rows.emplace_back(group, n);
    } else {
      r.rows.back().second += n;
    }
    r.total += n;
  }
  return r;
}

}  // namespace mhssm
