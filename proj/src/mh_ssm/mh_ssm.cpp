#include "mhssm/mh_ssm.hpp"

namespace mhssm {

Gating parse_gating(const std::string& name) {
  if (name == "ihg") return Gating::ihg;
  if (name == "glu") return Gating::glu;
  if (name == "gelu") return Gating::gelu;
  throw ConfigError("unknown gating '" + name + "' (expected ihg, glu or gelu)");
}

std::string to_string(Gating g) {
  switch (g) {
    case Gating::ihg: return "ihg";
    case Gating::glu: return "glu";
    case Gating::gelu: return "gelu";
  }
  return "?";
}

void MhSsmBlockConfig::validate() const {
  if (heads == 0 || model_dim == 0) throw ConfigError("mh_ssm: model_dim and heads must be >= 1");
  if (heads > model_dim) {
    throw ConfigError("mh_ssm: heads (" + std::to_string(heads) + ") exceed model_dim (" +
                      std::to_string(model_dim) + ")");
  }
  if (model_dim % heads != 0) {
    throw ConfigError("mh_ssm: model_dim " + std::to_string(model_dim) +
                      " is not divisible by heads " + std::to_string(heads));
  }
  if (gating == Gating::ihg && heads % 2 != 0) {
    throw ConfigError("mh_ssm: inter-head gating needs an even number of heads, got " +
                      std::to_string(heads));
  }
  if (stack < 1) throw ConfigError("mh_ssm: stack must be >= 1");
  if (state_dim < 1) throw ConfigError("mh_ssm: state_dim must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("mh_ssm: dropout must be in [0, 1)");
}

std::vector<Var> head_split(Context& ctx, const Linear& proj, Var x, std::size_t heads) {
  const std::size_t d = proj.out_dim();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("head_split: dimension " + std::to_string(d) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  }
  Var h = proj(ctx, x);
  const std::size_t w = d / heads;
  std::vector<Var> out;
  out.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) out.push_back(slice_last(h, i * w, w));
  return out;
}

std::vector<Var> inter_head_gate(const std::vector<Var>& heads) {
  if (heads.size() % 2 != 0) {
    throw ConfigError("inter_head_gate: needs an even number of heads, got " +
                      std::to_string(heads.size()));
  }
  const std::size_t half = heads.size() / 2;
  std::vector<Var> out;
  out.reserve(half);
  for (std::size_t h = 0; h < half; ++h) out.push_back(mul(heads[h], sigmoid(heads[h + half])));
  return out;
}

MhSsmStage::MhSsmStage(ParameterSet& params, const std::string& prefix,
                       const MhSsmBlockConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  cfg.validate();
  const std::size_t d = cfg.model_dim;
  in_proj_ = Linear(params, prefix + ".in_proj", d, d, rng);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    head_prefixes_.push_back(prefix + ".head" + std::to_string(h));
    declare_ssm(params, head_prefixes_.back(), cfg.state_dim, cfg.head_dim(), rng(), cfg.init);
  }
  if (cfg.gating == Gating::glu) glu_proj_ = Linear(params, prefix + ".glu_proj", d, 2 * d, rng);
  out_proj_ = Linear(params, prefix + ".out_proj", cfg.gated_width(), d, rng);
}

Var MhSsmStage::gated(Context& ctx, Var x) const {
  std::vector<Var> heads = head_split(ctx, in_proj_, x, cfg_.heads);
  if (!cfg_.identity_ssm) {
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const DiscreteSsm d = discretize(bind_ssm(ctx, head_prefixes_[h]));
      heads[h] = ssm_conv(d, heads[h]);
    }
  }
  switch (cfg_.gating) {
    case Gating::ihg:
      return concat_last(inter_head_gate(heads));
    case Gating::gelu:
      return gelu(concat_last(heads));
    case Gating::glu: {
      Var g = glu_proj_(ctx, concat_last(heads));
      const std::size_t d = cfg_.model_dim;
      return mul(slice_last(g, 0, d), sigmoid(slice_last(g, d, d)));
    }
  }
  throw std::logic_error("unreachable gating");
}

Var MhSsmStage::operator()(Context& ctx, Var x) const { return out_proj_(ctx, gated(ctx, x)); }

MhSsmDirectional::MhSsmDirectional(ParameterSet& params, const std::string& prefix,
                                   const MhSsmBlockConfig& cfg, Rng& rng) {
  cfg.validate();
  for (std::size_t s = 0; s < cfg.stack; ++s) {
    stages_.emplace_back(params, prefix + ".stage" + std::to_string(s), cfg, rng);
  }
}

Var MhSsmDirectional::operator()(Context& ctx, Var x) const {
  for (const auto& stage : stages_) x = stage(ctx, x);
  return x;
}

BidirMhSsmBlock::BidirMhSsmBlock(ParameterSet& params, const std::string& prefix,
                                 const MhSsmBlockConfig& cfg, Rng& rng)
    : cfg_(cfg),
      norm_(params, prefix + ".norm", cfg.model_dim),
      forward_(params, prefix + ".fwd", cfg, rng),
      backward_(params, prefix + (cfg.tie_directions ? ".fwd" : ".bwd"), cfg, rng),
      out_(params, prefix + ".out", 2 * cfg.model_dim, cfg.model_dim, rng) {}

Var BidirMhSsmBlock::concat(Context& ctx, Var z, const Lengths& lengths) const {
  Var f = forward_(ctx, z);
  Var b = reverse_time(backward_(ctx, reverse_time(z, lengths)), lengths);
  return concat_last({f, b});
}

Var BidirMhSsmBlock::branch(Context& ctx, Var x, const Lengths& lengths) const {
  return out_(ctx, gelu(concat(ctx, norm_(ctx, x), lengths)));
}

Var BidirMhSsmBlock::operator()(Context& ctx, Var x, const Lengths& lengths) const {
  Var y = branch(ctx, x, lengths);
  if (ctx.training()) y = dropout(y, cfg_.dropout, ctx.rng());
  return mask_time(add(x, y), lengths);
}

}  // namespace mhssm
