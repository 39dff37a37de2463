#pragma once

// Differentiable operations. All backward rules are built from these same
// operations, so every gradient is itself differentiable.

#include <memory>
#include <string>
#include <vector>

#include "mil/autodiff.hpp"

namespace mil::ad {

using Index = std::shared_ptr<const std::vector<std::size_t>>;

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var square(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);
Var pow(const Var& a, double p);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);

// Clamp into [lo, hi]. The gradient passes where the input lies inside the
// interval and is zero where it was clamped.
Var clip(const Var& a, double lo, double hi);

// Matrix products on rank-2 tensors: a*b, a*b^T, a^T*b.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var matmul_tn(const Var& a, const Var& b);

// Reductions and broadcasts.
Var sum(const Var& a);                                 // -> rank 0
Var expand(const Var& scalar, const Shape& shape);     // rank 0 -> shape
Var sum_rows(const Var& a);                            // [N,D] -> [D]
Var broadcast_rows(const Var& v, std::size_t rows);    // [D] -> [N,D]
Var sum_cols(const Var& a);                            // [N,D] -> [N,1]
Var broadcast_cols(const Var& v, std::size_t cols);    // [N,1] -> [N,D]
Var mean_cols(const Var& a);                           // [N,D] -> [N,1]

Var reshape(const Var& a, const Shape& shape);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var pad_cols(const Var& a, std::size_t total, std::size_t begin);
Var concat_cols(const Var& a, const Var& b);

// out[i] = a.flat[index[i]] with the given output shape.
Var gather(const Var& a, Index index, const Shape& out_shape);
// out.flat[index[i]] += a.flat[i]; adjoint of gather.
Var scatter_add(const Var& a, Index index, const Shape& out_shape);

// Identity carrying a label; its backward can be sign-flipped by the
// fault-injection hook.
Var tag(const Var& a, const std::string& label);

// Row-batch affine map helpers.
Var add_row_vector(const Var& a, const Var& v);  // a[N,D] + v[D]
Var mul_row_vector(const Var& a, const Var& v);  // a[N,D] * v[D]

}  // namespace mil::ad
