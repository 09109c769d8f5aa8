#pragma once

#include <cstddef>
#include <vector>

#include "fedmer/tensor.hpp"

namespace fedmer {

// Closed op set: exactly what the recognition network and its losses need.
// Every op validates input shapes, checks its output for NaN/Inf, and, when
// gradient recording is enabled, registers a backward closure on the graph.

// elementwise, same shape
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// activations
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double negative_slope = 0.2);
Tensor elu(const Tensor& x, double alpha = 1.0);
Tensor sigmoid(const Tensor& x);

// linear algebra (2-D)
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// x:(N,I) w:(I,O) b:(O) -> (N,O), bias broadcast over rows
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// x:(N,C,H,W) w:(F,C,kh,kw) b:(F), stride 1, symmetric zero padding
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t pad);
// (N,C,H,W) -> (N,C,Ho,Wo); ties break toward the first element scanned
Tensor max_pool2d(const Tensor& x, std::size_t k, std::size_t stride, std::size_t pad);
// (N,C,H,W) -> (N,C), mean over the spatial dims
Tensor mean_pool_spatial(const Tensor& x);

// shape ops
Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);
// x:(R,F), selects rows by index (indices may repeat; ROI groups overlap)
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices);

// reductions
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_squares(const Tensor& x);

// u:(N) v:(M) -> (N,M) with out[i][j] = u[i] + v[j]
Tensor outer_sum(const Tensor& u, const Tensor& v);
// x:(N,C,H,W) scaled per (n,c) by s:(N,C)
Tensor scale_channels(const Tensor& x, const Tensor& s);

// rows of a 2-D tensor; numerically stable
Tensor softmax_rows(const Tensor& x);
// mask:(N,M) of {0,1}; masked-out entries are exactly 0 in the output and a
// row whose mask is all zero comes out all zero (isolated graph node)
Tensor masked_softmax_rows(const Tensor& logits, const Tensor& mask);

// normalization over the last dim; gamma/beta have that dim's size
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// x:(N,C,H,W); running stats are updated in place when training && update_stats
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    bool update_stats, double momentum = 0.1, double eps = 1e-5);

// losses
// logits:(C), target class index; -log softmax(logits)[target]
Tensor cross_entropy_logits(const Tensor& logits, std::size_t target);
// logits:(M), labels:(M) in {0,1}; mean over M of the stable BCE-with-logits
Tensor bce_logits_mean(const Tensor& logits, const Tensor& labels);

}  // namespace fedmer
