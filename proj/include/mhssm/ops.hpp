#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "mhssm/tape.hpp"

namespace mhssm {

// Differentiable tensor operations recorded on the operands' tape.
//
// Binary ops accept equal shapes, or a right operand whose shape is a
// trailing suffix of the left one (scalar `{}` and per-channel `[d]` are the
// cases the models use).

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);

Var sigmoid(Var x);
// Exact form x * Phi(x) with Phi the standard normal CDF.
Var gelu(Var x);
Var relu(Var x);

// a[..., m, k] @ b[..., k, n]. Batch dims must be equal, or one operand 2-D.
Var matmul(Var a, Var b);

// Normalises over the last axis with population variance, eps inside the
// square root, then applies gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps);

// Softmax over the last axis. `mask` broadcasts against x (numpy rules);
// zero entries are excluded and come out exactly 0. A fully masked row
// throws.
Var softmax(Var x, const std::optional<Tensor>& mask = std::nullopt);

Var sum(Var x);
Var mean(Var x);

Var reshape(Var x, Shape shape);
Var slice_last(Var x, std::size_t begin, std::size_t width);
Var concat_last(const std::vector<Var>& parts);
Var transpose_last2(Var x);
// [a, b, c, d] -> [a, c, b, d]
Var permute_0213(Var x);

// Sequence ops on [batch, time, dim] with per-row valid lengths.
// Reverses each row within its valid length; padding stays at the tail.
Var reverse_time(Var x, std::span<const std::size_t> lengths);
// Zero-pads the time axis up to new_length.
Var pad_time(Var x, std::size_t new_length);
// Zeroes positions t >= lengths[b].
Var mask_time(Var x, std::span<const std::size_t> lengths);

// Inverted dropout; identity when rate == 0.
Var dropout(Var x, double rate, std::mt19937_64& rng);

// Mean cross-entropy over positions whose target != ignore_index.
// logits [..., V]; targets has one entry per row of logits.
Var cross_entropy(Var logits, std::span<const int> targets, int ignore_index);

// Plain (non-recorded) helpers.
Tensor softmax_value(const Tensor& x, const std::optional<Tensor>& mask);
std::vector<int> argmax_last(const Tensor& x);

}  // namespace mhssm
