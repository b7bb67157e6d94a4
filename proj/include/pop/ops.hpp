#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pop/tape.hpp"
#include "pop/tensor.hpp"

namespace pop {

// Differentiable tensor operations. Each records itself on the tape of its
// tracked inputs (if any) and is a plain computation otherwise. Broadcasting
// is limited to a one-element right operand and a row vector matching the last
// dimension; any other shape mismatch is a DimensionError.

// [m x k] . [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor silu(const Tensor& a);
Tensor tanh(const Tensor& a);

// Rows [begin, begin + count) of a tensor viewed as rows() x cols().
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);

// Root-mean-square normalization over the last dimension:
// x / sqrt(mean(x^2) + eps) * weight. eps must be nonnegative.
Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps);

// Softmax over the last dimension with max subtraction.
Tensor softmax_rows(const Tensor& x);

// Rotary embedding on [T x heads x head_dim]: pair (2i, 2i+1) of position p
// is rotated by p * theta_base^(-2i/head_dim), or by its negation when
// `inverse` is set.
Tensor rope_apply(const Tensor& x, std::span<const std::size_t> positions, double theta_base,
                  bool inverse = false);

// Sum over rows with mask[t] of -log softmax(logits[t])[targets[t]].
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const bool> mask);

// table[ids[t]] for each t: [T x d].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

// Causal grouped-query attention. q: [t x H x dh]; k, v: [s x Hkv x dh] with
// H a multiple of Hkv. Query i attends to keys j with k_pos[j] <= q_pos[i].
// Positions must be strictly increasing within each list. Scores are scaled
// by 1/sqrt(dh). Returns [t x H x dh].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const std::size_t> q_pos, std::span<const std::size_t> k_pos);

// Scales rows r < split by `prefill_gate` and the remaining rows by
// `decode_gate` (both one-element tensors). Passing the same tracked tensor
// twice yields one leaf whose gradient sums both regions.
Tensor gate_rows(const Tensor& x, const Tensor& prefill_gate, const Tensor& decode_gate,
                 std::size_t split);

}  // namespace pop
