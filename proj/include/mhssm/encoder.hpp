#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mhssm/mh_ssm.hpp"

namespace mhssm {

// tr and ms subsample time by 4; linear is a plain per-frame projection used
// by token-level tasks.
enum class Frontend { tr, ms, linear };
enum class BlockKind { mh_ssm, transformer, stateformer };

Frontend parse_frontend(const std::string& name);
BlockKind parse_block_kind(const std::string& name);
std::string to_string(Frontend f);
std::string to_string(BlockKind k);

struct EncoderConfig {
  Frontend frontend = Frontend::tr;
  std::size_t input_dim = 80;
  std::size_t model_dim = 512;
  std::size_t num_layers = 16;
  BlockKind block_kind = BlockKind::mh_ssm;
  std::size_t attn_heads = 8;
  std::size_t ffn_dim = 2048;
  MhSsmBlockConfig mh_ssm;         // model_dim and dropout follow the encoder
  MhSsmBlockConfig frontend_ssm = default_frontend_ssm();
  double dropout = 0.1;
  std::uint64_t seed = 0;

  // Test hooks.
  bool skip_frontend_blocks = false;  // ms frontend without its MH-SSM blocks
  bool skip_ssm_branch = false;       // stateformer layers without the MH-SSM residual

  static MhSsmBlockConfig default_frontend_ssm();
  void validate() const;
  std::size_t subsampling() const { return frontend == Frontend::linear ? 1 : 4; }
  MhSsmBlockConfig layer_ssm() const;
  MhSsmBlockConfig frontend_ssm_at(std::size_t dim) const;
};

/// Sequence values on a tape together with their valid lengths.
struct SeqVar {
  Var data;
  Lengths lengths;
};

// Splices frame pairs (2t, 2t+1) along channels; an odd valid length is
// padded with one zero frame. [B, L, d] -> [B, ceil(L/2), 2d].
SeqVar time_reduction(const SeqVar& x);

// Constant [len, dim] sinusoidal table.
Tensor sinusoidal_positions(std::size_t len, std::size_t dim);

/// Pre-norm residual multi-head scaled dot-product self-attention with a
/// key padding mask.
class AttentionBlock {
 public:
  AttentionBlock(ParameterSet& params, const std::string& prefix, std::size_t dim,
                 std::size_t heads, double dropout, Rng& rng);

  Var operator()(Context& ctx, Var x, const Lengths& lengths) const;
  // Attention weights [B, H, L, L] for already-normalised input.
  Var weights(Context& ctx, Var z, const Lengths& lengths) const;
  // Un-projected attention output merged over heads, [B, L, D].
  Var attend(Context& ctx, Var z, const Lengths& lengths) const;

 private:
  LayerNorm norm_;
  Linear q_, k_, v_, o_;
  std::size_t dim_, heads_;
  double dropout_;
};

class FeedForwardBlock {
 public:
  FeedForwardBlock(ParameterSet& params, const std::string& prefix, std::size_t dim,
                   std::size_t hidden, double dropout, Rng& rng);
  Var operator()(Context& ctx, Var x, const Lengths& lengths) const;

 private:
  LayerNorm norm_;
  Linear up_, down_;
  double dropout_;
};

/// transformer: [attention, FFN]; stateformer: [bidir MH-SSM, attention, FFN];
/// mh_ssm: [bidir MH-SSM, FFN]. All residual, pre-norm.
class EncoderLayer {
 public:
  EncoderLayer(ParameterSet& params, const std::string& prefix, BlockKind kind,
               std::size_t dim, std::size_t attn_heads, std::size_t ffn_dim,
               const MhSsmBlockConfig& ssm, double dropout, bool skip_ssm_branch, Rng& rng);
  Var operator()(Context& ctx, Var x, const Lengths& lengths) const;

 private:
  bool skip_ssm_branch_;
  std::optional<BidirMhSsmBlock> ssm_;
  std::optional<AttentionBlock> attn_;
  FeedForwardBlock ffn_;
};

class Encoder {
 public:
  // Declares all parameters in `params`, initialised from cfg.seed.
  Encoder(const EncoderConfig& cfg, ParameterSet& params);

  SeqVar operator()(Context& ctx, Var x, const Lengths& lengths) const;
  SeqVar frontend(Context& ctx, Var x, const Lengths& lengths) const;

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  Linear front_proj_;
  std::vector<EncoderLayer> front_blocks_low_, front_blocks_high_;
  std::vector<EncoderLayer> layers_;
  LayerNorm final_norm_;
};

// Eval-mode forward pass on plain values.
SeqBatch run_encoder(const Encoder& enc, const ParameterSet& params, const SeqBatch& x);

struct ParamReport {
  std::vector<std::pair<std::string, std::size_t>> rows;
  std::size_t total = 0;
};

// Closed-form parameter counts per top-level module of an encoder.
ParamReport param_count(const EncoderConfig& cfg);
// Counts of an instantiated set grouped by the first name component.
ParamReport param_count(const ParameterSet& params);

// Closed-form building blocks shared by the reports.
std::size_t linear_params(std::size_t in, std::size_t out);
std::size_t ssm_params(std::size_t channels, std::size_t state_dim);
std::size_t mh_ssm_stage_params(const MhSsmBlockConfig& cfg);
std::size_t bidir_block_params(const MhSsmBlockConfig& cfg);

}  // namespace mhssm
