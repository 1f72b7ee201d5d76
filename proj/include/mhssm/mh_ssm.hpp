#pragma once

#include <string>
#include <vector>

#include "mhssm/ssm.hpp"

namespace mhssm {

using Lengths = std::vector<std::size_t>;

/// Batch of sequences [batch, time, dim] with per-row valid lengths.
/// Positions t >= lengths[b] hold zeros.
struct SeqBatch {
  Tensor data;
  Lengths lengths;
};

enum class Gating { ihg, glu, gelu };

Gating parse_gating(const std::string& name);
std::string to_string(Gating g);

struct MhSsmBlockConfig {
  std::size_t model_dim = 512;
  std::size_t heads = 4;
  std::size_t stack = 2;
  std::size_t state_dim = 64;
  Gating gating = Gating::ihg;
  double dropout = 0.1;
  InitScheme init = InitScheme::s4d_lin;

  // Test hooks.
  bool identity_ssm = false;    // every head SSM passes its input through
  bool tie_directions = false;  // backward branch reuses forward parameters

  void validate() const;
  std::size_t head_dim() const { return model_dim / heads; }
  // Width entering a stage's output projection.
  std::size_t gated_width() const { return gating == Gating::ihg ? model_dim / 2 : model_dim; }
};

// Projects x to model_dim with `proj` and partitions the result into `heads`
// contiguous slices.
std::vector<Var> head_split(Context& ctx, const Linear& proj, Var x, std::size_t heads);

// a_h = y_h * sigmoid(y_{h + H/2}) for h < H/2.
std::vector<Var> inter_head_gate(const std::vector<Var>& heads);

/// One stage: head projection, an independent SSM per head, gating,
/// concatenation and an output projection back to model_dim.
class MhSsmStage {
 public:
  MhSsmStage(ParameterSet& params, const std::string& prefix, const MhSsmBlockConfig& cfg,
             Rng& rng);

  Var operator()(Context& ctx, Var x) const;
  // Gated and concatenated heads, before the output projection.
  Var gated(Context& ctx, Var x) const;

 private:
  MhSsmBlockConfig cfg_;
  Linear in_proj_;
  std::vector<std::string> head_prefixes_;
  Linear glu_proj_;
  Linear out_proj_;
};

/// `stack` stages applied in sequence; causal.
class MhSsmDirectional {
 public:
  MhSsmDirectional(ParameterSet& params, const std::string& prefix, const MhSsmBlockConfig& cfg,
                   Rng& rng);
  Var operator()(Context& ctx, Var x) const;

 private:
  std::vector<MhSsmStage> stages_;
};

/// Pre-norm residual bidirectional block:
///   out = x + dropout(Linear(GELU(Cat[F(z), Rev(B(Rev(z)))]))),  z = LayerNorm(x)
/// with independently parameterised forward and backward MH-SSMs.
class BidirMhSsmBlock {
 public:
  BidirMhSsmBlock(ParameterSet& params, const std::string& prefix, const MhSsmBlockConfig& cfg,
                  Rng& rng);

  Var operator()(Context& ctx, Var x, const Lengths& lengths) const;
  // Residual branch only (no skip connection, no dropout).
  Var branch(Context& ctx, Var x, const Lengths& lengths) const;
  // The concatenation [forward, backward] on already-normalised input.
  Var concat(Context& ctx, Var z, const Lengths& lengths) const;

 private:
  MhSsmBlockConfig cfg_;
  LayerNorm norm_;
  MhSsmDirectional forward_;
  MhSsmDirectional backward_;
  Linear out_;
};

}  // namespace mhssm
