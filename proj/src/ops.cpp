#include "mil/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace mil::ad {

namespace detail {
bool is_flipped(const std::string& label);
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const Tensor& t) { return ConstMap(t.data().data(), t.dim(0), t.dim(1)); }
MutMap as_mat(Tensor& t) { return MutMap(t.data().data(), t.dim(0), t.dim(1)); }

void require(bool ok, const std::string& op, const std::string& detail) {
  if (!ok) throw ShapeError(op + ": " + detail);
}

void require_same(const Var& a, const Var& b, const std::string& op) {
  require(a.shape() == b.shape(), op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const Var& a, std::size_t r, const std::string& op) {
  require(a.shape().size() == r, op, "expected rank " + std::to_string(r) + ", got " + shape_str(a.shape()));
}

template <typename F>
Var unary_map(const std::string& op, const Var& a, F f, BackwardFn bwd) {
  return make_op(
      op, {a}, a.shape(),
      [f](const std::vector<const Tensor*>& in) {
        Tensor out(in[0]->shape());
        const auto& x = in[0]->values();
        auto& y = out.values();
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
        return out;
      },
      std::move(bwd));
}

template <typename F>
Var binary_map(const std::string& op, const Var& a, const Var& b, F f, BackwardFn bwd) {
  require_same(a, b, op);
  return make_op(
      op, {a, b}, a.shape(),
      [f, op](const std::vector<const Tensor*>& in) {
        require(in[0]->shape() == in[1]->shape(), op, "shape mismatch");
        Tensor out(in[0]->shape());
        const auto& x = in[0]->values();
        const auto& z = in[1]->values();
        auto& y = out.values();
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i], z[i]);
        return out;
      },
      std::move(bwd));
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary_map("add", a, b, [](double x, double y) { return x + y; },
                    [](const Var&, const Var& g) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  return binary_map("sub", a, b, [](double x, double y) { return x - y; },
                    [](const Var&, const Var& g) { return std::vector<Var>{g, neg(g)}; });
}

Var mul(const Var& a, const Var& b) {
  return binary_map("mul", a, b, [](double x, double y) { return x * y; }, [](const Var& self, const Var& g) {
    const auto& p = self.node()->parents;
    return std::vector<Var>{mul(g, p[1]), mul(g, p[0])};
  });
}

Var div(const Var& a, const Var& b) {
  return binary_map("div", a, b, [](double x, double y) { return x / y; }, [](const Var& self, const Var& g) {
    const auto& p = self.node()->parents;
    Var ga = div(g, p[1]);
    Var gb = neg(div(mul(g, self), p[1]));
    return std::vector<Var>{ga, gb};
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  return unary_map("scale", a, [c](double x) { return c * x; },
                   [c](const Var&, const Var& g) { return std::vector<Var>{scale(g, c)}; });
}

Var add_scalar(const Var& a, double c) {
  return unary_map("add_scalar", a, [c](double x) { return x + c; },
                   [](const Var&, const Var& g) { return std::vector<Var>{g}; });
}

Var square(const Var& a) { return mul(a, a); }

Var exp(const Var& a) {
  return unary_map("exp", a, [](double x) { return std::exp(x); },
                   [](const Var& self, const Var& g) { return std::vector<Var>{mul(g, self)}; });
}

Var log(const Var& a) {
  return unary_map("log", a, [](double x) { return std::log(x); }, [](const Var& self, const Var& g) {
    return std::vector<Var>{div(g, self.node()->parents[0])};
  });
}

Var pow(const Var& a, double p) {
  return unary_map("pow", a, [p](double x) { return std::pow(x, p); }, [p](const Var& self, const Var& g) {
    const Var& x = self.node()->parents[0];
    return std::vector<Var>{mul(g, scale(pow(x, p - 1.0), p))};
  });
}

Var tanh(const Var& a) {
  return unary_map("tanh", a, [](double x) { return std::tanh(x); }, [](const Var& self, const Var& g) {
    // 1 - y^2
    Var d = add_scalar(neg(square(self)), 1.0);
    return std::vector<Var>{mul(g, d)};
  });
}

Var sigmoid(const Var& a) {
  return unary_map(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](const Var& self, const Var& g) {
        Var d = mul(self, add_scalar(neg(self), 1.0));
        return std::vector<Var>{mul(g, d)};
      });
}

Var relu(const Var& a) {
  return unary_map("relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](const Var& self, const Var& g) {
    Tensor mask(self.shape());
    const auto& x = self.node()->parents[0].value().values();
    for (std::size_t i = 0; i < x.size(); ++i) mask[i] = x[i] > 0.0 ? 1.0 : 0.0;
    return std::vector<Var>{mul(g, constant(std::move(mask)))};
  });
}

Var clip(const Var& a, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clip interval has lo > hi");
  return unary_map("clip", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                   [lo, hi](const Var& self, const Var& g) {
                     Tensor mask(self.shape());
                     const auto& x = self.node()->parents[0].value().values();
                     for (std::size_t i = 0; i < x.size(); ++i) mask[i] = (x[i] >= lo && x[i] <= hi) ? 1.0 : 0.0;
                     return std::vector<Var>{mul(g, constant(std::move(mask)))};
                   });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require(a.shape()[1] == b.shape()[0], "matmul",
          "inner extents differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  return make_op(
      "matmul", {a, b}, {a.shape()[0], b.shape()[1]},
      [](const std::vector<const Tensor*>& in) {
        require(in[0]->rank() == 2 && in[1]->rank() == 2 && in[0]->dim(1) == in[1]->dim(0), "matmul",
                "inner extents differ");
        Tensor out({in[0]->dim(0), in[1]->dim(1)});
        as_mat(out).noalias() = as_mat(*in[0]) * as_mat(*in[1]);
        return out;
      },
      [](const Var& self, const Var& g) {
        const auto& p = self.node()->parents;
        return std::vector<Var>{matmul_nt(g, p[1]), matmul_tn(p[0], g)};
      });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  require(a.shape()[1] == b.shape()[1], "matmul_nt",
          "inner extents differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()) + "^T");
  return make_op(
      "matmul_nt", {a, b}, {a.shape()[0], b.shape()[0]},
      [](const std::vector<const Tensor*>& in) {
        require(in[0]->rank() == 2 && in[1]->rank() == 2 && in[0]->dim(1) == in[1]->dim(1), "matmul_nt",
                "inner extents differ");
        Tensor out({in[0]->dim(0), in[1]->dim(0)});
        as_mat(out).noalias() = as_mat(*in[0]) * as_mat(*in[1]).transpose();
        return out;
      },
      [](const Var& self, const Var& g) {
        const auto& p = self.node()->parents;
        return std::vector<Var>{matmul(g, p[1]), matmul_tn(g, p[0])};
      });
}

Var matmul_tn(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul_tn");
  require_rank(b, 2, "matmul_tn");
  require(a.shape()[0] == b.shape()[0], "matmul_tn",
          "inner extents differ: " + shape_str(a.shape()) + "^T * " + shape_str(b.shape()));
  return make_op(
      "matmul_tn", {a, b}, {a.shape()[1], b.shape()[1]},
      [](const std::vector<const Tensor*>& in) {
        require(in[0]->rank() == 2 && in[1]->rank() == 2 && in[0]->dim(0) == in[1]->dim(0), "matmul_tn",
                "inner extents differ");
        Tensor out({in[0]->dim(1), in[1]->dim(1)});
        as_mat(out).noalias() = as_mat(*in[0]).transpose() * as_mat(*in[1]);
        return out;
      },
      [](const Var& self, const Var& g) {
        const auto& p = self.node()->parents;
        return std::vector<Var>{matmul_nt(p[1], g), matmul(p[0], g)};
      });
}

Var sum(const Var& a) {
  Shape in_shape = a.shape();
  return make_op(
      "sum", {a}, Shape{},
      [](const std::vector<const Tensor*>& in) {
        double s = 0.0;
        for (double v : in[0]->values()) s += v;
        return Tensor::scalar(s);
      },
      [in_shape](const Var&, const Var& g) { return std::vector<Var>{expand(g, in_shape)}; });
}

Var expand(const Var& scalar, const Shape& shape) {
  require(numel(scalar.shape()) == 1, "expand", "expected one element, got " + shape_str(scalar.shape()));
  return make_op(
      "expand", {scalar}, shape,
      [shape](const std::vector<const Tensor*>& in) { return Tensor(shape, (*in[0])[0]); },
      [sshape = scalar.shape()](const Var&, const Var& g) {
        Var s = sum(g);
        return std::vector<Var>{sshape.empty() ? s : reshape(s, sshape)};
      });
}

Var sum_rows(const Var& a) {
  require_rank(a, 2, "sum_rows");
  const std::size_t rows = a.shape()[0];
  return make_op(
      "sum_rows", {a}, {a.shape()[1]},
      [](const std::vector<const Tensor*>& in) {
        Tensor out({in[0]->dim(1)});
        Eigen::Map<Eigen::RowVectorXd>(out.data().data(), in[0]->dim(1)) = as_mat(*in[0]).colwise().sum();
        return out;
      },
      [rows](const Var&, const Var& g) { return std::vector<Var>{broadcast_rows(g, rows)}; });
}

Var broadcast_rows(const Var& v, std::size_t rows) {
  require_rank(v, 1, "broadcast_rows");
  return make_op(
      "broadcast_rows", {v}, {rows, v.shape()[0]},
      [rows](const std::vector<const Tensor*>& in) {
        const std::size_t d = in[0]->dim(0);
        Tensor out({rows, d});
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(in[0]->values().begin(), d, out.values().begin() + r * d);
        return out;
      },
      [](const Var&, const Var& g) { return std::vector<Var>{sum_rows(g)}; });
}

Var sum_cols(const Var& a) {
  require_rank(a, 2, "sum_cols");
  const std::size_t cols = a.shape()[1];
  return make_op(
      "sum_cols", {a}, {a.shape()[0], 1},
      [](const std::vector<const Tensor*>& in) {
        Tensor out({in[0]->dim(0), 1});
        Eigen::Map<Eigen::VectorXd>(out.data().data(), in[0]->dim(0)) = as_mat(*in[0]).rowwise().sum();
        return out;
      },
      [cols](const Var&, const Var& g) { return std::vector<Var>{broadcast_cols(g, cols)}; });
}

Var broadcast_cols(const Var& v, std::size_t cols) {
  require(v.shape().size() == 2 && v.shape()[1] == 1, "broadcast_cols", "expected [N,1], got " + shape_str(v.shape()));
  return make_op(
      "broadcast_cols", {v}, {v.shape()[0], cols},
      [cols](const std::vector<const Tensor*>& in) {
        const std::size_t n = in[0]->dim(0);
        Tensor out({n, cols});
        for (std::size_t r = 0; r < n; ++r) std::fill_n(out.values().begin() + r * cols, cols, (*in[0])[r]);
        return out;
      },
      [](const Var&, const Var& g) { return std::vector<Var>{sum_cols(g)}; });
}

Var mean_cols(const Var& a) {
  require_rank(a, 2, "mean_cols");
  return scale(sum_cols(a), 1.0 / static_cast<double>(a.shape()[1]));
}

Var reshape(const Var& a, const Shape& shape) {
  require(numel(shape) == numel(a.shape()), "reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  if (shape == a.shape()) return a;
  return make_op(
      "reshape", {a}, shape, [shape](const std::vector<const Tensor*>& in) { return in[0]->reshaped(shape); },
      [in_shape = a.shape()](const Var&, const Var& g) { return std::vector<Var>{reshape(g, in_shape)}; });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  require(begin <= end && end <= a.shape()[1], "slice_cols", "range out of bounds for " + shape_str(a.shape()));
  const std::size_t total = a.shape()[1];
  return make_op(
      "slice_cols", {a}, {a.shape()[0], end - begin},
      [begin, end](const std::vector<const Tensor*>& in) {
        const std::size_t n = in[0]->dim(0), d = in[0]->dim(1), w = end - begin;
        Tensor out({n, w});
        for (std::size_t r = 0; r < n; ++r)
          std::copy_n(in[0]->values().begin() + r * d + begin, w, out.values().begin() + r * w);
        return out;
      },
      [total, begin](const Var&, const Var& g) { return std::vector<Var>{pad_cols(g, total, begin)}; });
}

Var pad_cols(const Var& a, std::size_t total, std::size_t begin) {
  require_rank(a, 2, "pad_cols");
  const std::size_t w = a.shape()[1];
  require(begin + w <= total, "pad_cols", "padding target too narrow");
  return make_op(
      "pad_cols", {a}, {a.shape()[0], total},
      [total, begin](const std::vector<const Tensor*>& in) {
        const std::size_t n = in[0]->dim(0), w = in[0]->dim(1);
        Tensor out({n, total});
        for (std::size_t r = 0; r < n; ++r)
          std::copy_n(in[0]->values().begin() + r * w, w, out.values().begin() + r * total + begin);
        return out;
      },
      [begin, w](const Var&, const Var& g) { return std::vector<Var>{slice_cols(g, begin, begin + w)}; });
}

Var concat_cols(const Var& a, const Var& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  require(a.shape()[0] == b.shape()[0], "concat_cols", "row counts differ");
  const std::size_t total = a.shape()[1] + b.shape()[1];
  return add(pad_cols(a, total, 0), pad_cols(b, total, a.shape()[1]));
}

Var gather(const Var& a, Index index, const Shape& out_shape) {
  require(index->size() == numel(out_shape), "gather", "index length does not match output shape");
  const std::size_t in_n = numel(a.shape());
  for (auto i : *index) require(i < in_n, "gather", "index out of range");
  return make_op(
      "gather", {a}, out_shape,
      [index, out_shape](const std::vector<const Tensor*>& in) {
        Tensor out(out_shape);
        const auto& x = in[0]->values();
        for (std::size_t i = 0; i < index->size(); ++i) out[i] = x[(*index)[i]];
        return out;
      },
      [index, in_shape = a.shape()](const Var&, const Var& g) {
        return std::vector<Var>{scatter_add(g, index, in_shape)};
      });
}

Var scatter_add(const Var& a, Index index, const Shape& out_shape) {
  require(index->size() == numel(a.shape()), "scatter_add", "index length does not match input");
  const std::size_t out_n = numel(out_shape);
  for (auto i : *index) require(i < out_n, "scatter_add", "index out of range");
  return make_op(
      "scatter_add", {a}, out_shape,
      [index, out_shape](const std::vector<const Tensor*>& in) {
        Tensor out(out_shape);
        const auto& x = in[0]->values();
        for (std::size_t i = 0; i < index->size(); ++i) out[(*index)[i]] += x[i];
        return out;
      },
      [index, in_shape = a.shape()](const Var&, const Var& g) { return std::vector<Var>{gather(g, index, in_shape)}; });
}

Var tag(const Var& a, const std::string& label) {
  return make_op(
      "tag:" + label, {a}, a.shape(), [](const std::vector<const Tensor*>& in) { return *in[0]; },
      [label](const Var&, const Var& g) {
        if (detail::is_flipped(label)) return std::vector<Var>{neg(g)};
        return std::vector<Var>{g};
      });
}

Var add_row_vector(const Var& a, const Var& v) {
  require_rank(a, 2, "add_row_vector");
  return add(a, broadcast_rows(v, a.shape()[0]));
}

Var mul_row_vector(const Var& a, const Var& v) {
  require_rank(a, 2, "mul_row_vector");
  return mul(a, broadcast_rows(v, a.shape()[0]));
}

}  // namespace mil::ad
