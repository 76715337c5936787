#pragma once

#include <vector>

#include "capsprune/tape.hpp"
#include "capsprune/tensor.hpp"

namespace capsprune {

// Differentiable tensor operations. Every op validates shapes, runs the
// forward kernel in float, checks the output for non-finite values, and
// records a backward rule on the tape when `tape` is non-null and some input
// requires a gradient. Passing tape == nullptr gives a pure inference path.

// Valid convolution: input [N,C,H,W], kernel [F,C,kh,kw] -> [N,F,OH,OW].
TensorPtr conv2d(Tape* tape, const TensorPtr& input, const TensorPtr& kernel, int stride);

// x [N,F,...] + bias [F] broadcast over trailing dims.
TensorPtr bias_channel(Tape* tape, const TensorPtr& x, const TensorPtr& bias);

TensorPtr relu(Tape* tape, const TensorPtr& x);

// Softmax along `axis`; entries along that axis sum to 1.
TensorPtr softmax(Tape* tape, const TensorPtr& x, int axis);

// weights [I,J,dout,din] applied per capsule: vectors [I,din] -> [I,J,dout],
// or batched vectors [N,I,din] -> [N,I,J,dout].
TensorPtr matvec_bank(Tape* tape, const TensorPtr& weights, const TensorPtr& vectors);

// [N, types*d, g, g] -> [N, g*g*types, d] capsule enumeration.
TensorPtr capsule_reshape(Tape* tape, const TensorPtr& x, int types, int d);

// out[n,j,:] = x[n, indices[j], :]; x [N,R,d].
TensorPtr gather_rows(Tape* tape, const TensorPtr& x, const std::vector<int>& indices);

// Fused pc-conv + capsule_reshape + gather over the survivor list. Numerically
// identical to the dense chain; cost scales with |survivors| instead of the
// full capsule grid.
TensorPtr pc_conv_gather(Tape* tape, const TensorPtr& features, const TensorPtr& kernel,
                         const TensorPtr& bias, int stride, const std::vector<int>& survivors,
                         int types, int d);

// x [N,in] * W [out,in] + b [out] -> [N,out].
TensorPtr linear(Tape* tape, const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias);

TensorPtr sigmoid(Tape* tape, const TensorPtr& x);

// Keep each sample's capsule of the given class, zero the rest, flatten to
// [N, K*d].
TensorPtr mask_flatten(Tape* tape, const TensorPtr& v, const std::vector<int>& classes);

// Same data, new shape (element count must match).
TensorPtr reshape(Tape* tape, const TensorPtr& x, std::vector<int> new_shape);

TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b);

TensorPtr scale(Tape* tape, const TensorPtr& x, float factor);

}  // namespace capsprune
