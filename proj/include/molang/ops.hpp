#pragma once

#include <memory>

#include "molang/rng.hpp"
#include "molang/tape.hpp"

namespace molang {

// Per-item row ranges of a packed (ragged) token matrix. offsets.size() == B+1;
// rows [offsets[b], offsets[b+1]) belong to item b.
struct PackedOffsets {
  std::vector<int64_t> offsets;
  int64_t items() const { return static_cast<int64_t>(offsets.size()) - 1; }
  int64_t total() const { return offsets.back(); }
  int64_t len(int64_t b) const { return offsets[b + 1] - offsets[b]; }
};

namespace ops {

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, float c);

// x: [N, d] (leading dims flattened by caller), b broadcast over rows
Var add_bias(Tape& t, Var x, Var b);

Var matmul(Tape& t, Var a, Var b);     // [m,k] x [k,n]
Var matmul_nt(Tape& t, Var a, Var b);  // [m,k] x [n,k]^T -> [m,n]

// y = x W + b over the last dimension; x may have any rank >= 1
Var linear(Tape& t, Var x, Var w, Var b = Var{});

Var relu(Tape& t, Var x);
Var gelu(Tape& t, Var x);  // tanh approximation

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, float eps = 1e-5f);

Var dropout(Tape& t, Var x, float p, Rng& rng, bool training);

// y[i, :] = table[ids[i], :]; backward scatter-adds into the table
Var gather_rows(Tape& t, Var table, const std::vector<int64_t>& ids);

// y[i, :] = x[idx[i], :]
Var select_rows(Tape& t, Var x, const std::vector<int64_t>& idx);

// Prepends a learned CLS row to each item's frame rows.
// frames: [Nf, d] packed by frame_offsets; output: [Nf + B, d] packed by
// token offsets (token_offsets[b] = frame_offsets[b] + b).
Var pack_with_cls(Tape& t, Var frames, Var cls_vec, const PackedOffsets& frame_offsets);

// Inverse of splitting a packed token matrix into CLS rows and frame rows:
// rebuilds [Nf + B, d] from cls_rows [B, d] and frames [Nf, d].
Var merge_cls_frames(Tape& t, Var cls_rows, Var frames, const PackedOffsets& frame_offsets);

// Multi-head self-attention over a packed ragged batch. Attention is computed
// strictly within each item's row range, so items never see padding.
Var mhsa_packed(Tape& t, Var x, const PackedOffsets& po, Var w_qkv, Var b_qkv, Var w_out,
                Var b_out, int heads);

// y[n] = relu(A h[n] W) per row, h[n] reshaped to [J, g]; adjacency is a
// constant [J, J] tensor, W is [g, g] shared across joints. No bias inside.
Var graph_conv(Tape& t, Var x, const Tensor& adjacency, Var w, int joints, int feat);

Var l2_normalize_rows(Tape& t, Var x, float eps = 1e-12f);

// y = x * exp(s); s is a scalar var (used for the temperature logit)
Var scale_by_exp(Tape& t, Var x, Var s);

Var transpose2(Tape& t, Var x);

// mean_i( logsumexp(S[i,:]) - S[i,i] ), accumulated in f64
Var cross_entropy_diag(Tape& t, Var s);

// Weighted per-item mean absolute error.
// pred: [N, K]; target: constant with the same shape; row_weight[n] selects
// rows; item_of_row maps rows to items. Per item: mean |pred-target| over its
// selected rows' K components; result is the mean over items that have at
// least one selected row. Throws std::invalid_argument when nothing selected.
Var l1_weighted(Tape& t, Var pred, const Tensor& target, const std::vector<float>& row_weight,
                const std::vector<int64_t>& item_of_row, int64_t items);

}  // namespace ops
}  // namespace molang
