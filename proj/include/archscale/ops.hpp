#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "archscale/tensor.hpp"

// Differentiable ops over 2-D tensors ([rows x cols]). Every op charges its
// multiply count (see op_costs.hpp) to the active tape and registers a
// gradient rule when the tape records gradients.
namespace archscale::ops {

// [m x k] . [k x n]; m*k*n multiplies.
Tensor matmul(const Tensor& a, const Tensor& b);
// a . b^T for a [m x k], b [n x k]; m*k*n multiplies.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
// Adds a [1 x c] row bias to every row or a [r x 1] column bias to every column.
Tensor add_broadcast(const Tensor& x, const Tensor& bias);
Tensor mul(const Tensor& a, const Tensor& b);
// Scales row i of x by col[i]; col is [r x 1].
Tensor mul_col(const Tensor& x, const Tensor& col);
Tensor scale(const Tensor& x, double factor);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor log(const Tensor& x);

// Max-subtracted softmax; axis 1 normalises rows, axis 0 columns.
Tensor softmax(const Tensor& x, int axis = 1);

// Scale-only RMS norm over each row; scale is [1 x cols].
Tensor rms_norm(const Tensor& x, const Tensor& scale);
inline constexpr double kRmsNormEpsilon = 1e-6;

// Row gather from a [vocab x width] table. Ids must be in range.
Tensor embed(std::span<const int> ids, const Tensor& table);

enum class Padding { kSame, kCausal };

// Depthwise 1-D convolution over time. x is [n x d], kernels is [w x groups];
// channel c uses column c / (d / groups). kSame centres odd kernels, kCausal
// left-pads by w-1. n*d*w multiplies.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernels, Padding padding);
// Same as depthwise_conv1d but with a separate kernel per position: kernels is
// [n x (groups*width)] laid out group-major.
Tensor dynamic_conv1d(const Tensor& x, const Tensor& kernels, std::size_t width,
                      Padding padding);

// Averages adjacent row pairs; an odd trailing row is kept as is.
Tensor mean_pool_stride2(const Tensor& x);

// Mean token cross-entropy (natural log) of logits [m x V] against m targets.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

Tensor sum(const Tensor& x);
// Column means, [1 x c].
Tensor mean_rows(const Tensor& x);

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
// Zero-pads columns on the right up to `total`.
Tensor pad_cols(const Tensor& x, std::size_t total);
// out[t] = x[t - offset], zero outside the sequence.
Tensor shift_rows(const Tensor& x, std::ptrdiff_t offset);
Tensor reshape(const Tensor& x, Shape shape);

// out[i] = x[rows[i]], or a zero row when rows[i] < 0.
Tensor gather_rows(const Tensor& x, std::span<const std::ptrdiff_t> rows);
// out (n_rows x c) with out[dest[i]] += src[i]; negative dest entries are dropped.
Tensor scatter_rows(const Tensor& src, std::span<const std::ptrdiff_t> dest,
                    std::size_t n_rows);
// out[i][0] = x[i][cols[i]].
Tensor pick_cols(const Tensor& x, std::span<const std::size_t> cols);

// Sets entries above the diagonal to -inf (attention logits, square input).
Tensor mask_future(const Tensor& x);

// T5 relative position bucket of (key position - query position).
std::size_t relative_position_bucket(std::ptrdiff_t relative_position, bool bidirectional,
                                     std::size_t num_buckets, std::size_t max_distance);
// [nq x nk] bias for one head, read from a [buckets x heads] table.
Tensor relative_bias(const Tensor& table, std::size_t head, std::size_t nq, std::size_t nk,
                     bool bidirectional, std::size_t max_distance = 128);

// Kernelised attention on already feature-mapped q [nq x dk], k [nk x dk] and
// v [nk x dv]: out = q (k^T v) / (q (k^T 1) + eps). The causal form uses prefix
// sums over positions and needs nq == nk.
Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal,
                        double eps);

// Raw kernels shared with the cost-free helpers in tests.
namespace kernels {
// c[m x n] = a[m x k] . b[k x n]; each output sums over k in ascending order, so
// a row's result does not depend on how many rows are multiplied together.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n);
}  // namespace kernels

}  // namespace archscale::ops
