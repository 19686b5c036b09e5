#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "forgetbench/rng.hpp"
#include "forgetbench/tensor.hpp"

// Differentiable primitives. Every op takes the tape it records on first; with
// an inference tape nothing is recorded. Matrices are row-major [rows x cols],
// vectors are rank 1.
namespace forgetbench::ops {

// [m x k] . [k x n] -> [m x n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// [m x k] . [n x k]^T -> [m x n]
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);

// x . W^T + bias. x is [n x in] or a vector [in]; W is [out x in]; bias is
// [out] or undefined. Output keeps the rank of x.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
// Sum of equally shaped tensors.
Tensor add_n(Tape& tape, std::span<const Tensor> terms);

// Multiplies every row of x ([n x m], or a vector [m]) elementwise by gate [m].
Tensor mul_rows(Tape& tape, const Tensor& x, const Tensor& gate);

Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor tanh(Tape& tape, const Tensor& x);
Tensor relu(Tape& tape, const Tensor& x);

// Inverted dropout: in training each element is zeroed with probability p and
// survivors are scaled by 1/(1-p). Identity when !training or p == 0.
Tensor dropout(Tape& tape, const Tensor& x, double p, bool training, Rng* rng);

// Rows of table [V x d] picked by ids -> [n x d]. Backward scatter-adds.
Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const int> ids);

// Per-row normalisation of x [n x d] with affine gamma, beta [d].
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Row-wise softmax of a matrix, or softmax of a vector.
Tensor softmax(Tape& tape, const Tensor& x);

// Mean of the rows of h [L x d] where mask is 1 -> [d].
Tensor masked_mean_pool(Tape& tape, const Tensor& h, std::span<const int> mask);

// -log softmax(logits)[label] for a vector of C logits (or a [1 x C] matrix).
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::size_t label);

// KL(softmax(z_old/T) || softmax(z_new/T)). z_old is treated as a constant.
Tensor kl_div_temperature(Tape& tape, const Tensor& z_old, const Tensor& z_new, double temperature);

// Elements of a vector at the given positions -> [idx.size()].
Tensor index_select(Tape& tape, const Tensor& x, std::span<const std::size_t> idx);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

// One GRU step with update gate z, reset gate r and candidate c:
//   z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br)
//   c = tanh(Wc x + Uc (r * h) + bc),  h' = (1 - z) * h + z * c
// x is [d] or [1 x d]; weight_x is [3u x d], weight_h is [3u x u], bias is [3u]; the three blocks of
// rows are (z, r, c) in that order.
Tensor gru_cell(Tape& tape, const Tensor& x, const Tensor& h_prev, const Tensor& weight_x, const Tensor& weight_h,
                const Tensor& bias);

// Multi-head scaled dot-product attention on projected q, k, v [L x d]. Keys at
// positions with mask 0 get zero weight. Heads are contiguous column blocks of
// width d / heads; the result is the concatenation of the heads.
Tensor attention_core(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, std::span<const int> mask,
                      std::size_t heads);

struct AttentionWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // each W is [d x d], each b is [d]
};

// Projections, attention_core, output projection.
Tensor self_attention(Tape& tape, const Tensor& h, std::span<const int> mask, const AttentionWeights& w,
                      std::size_t heads);

// Index of the largest element; first one wins ties. Not differentiable.
std::size_t argmax(std::span<const double> values);

}  // namespace forgetbench::ops
