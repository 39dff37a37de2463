#pragma once

// Reverse-mode automatic differentiation over a dynamic graph.
//
// Every operation computes its value eagerly when all inputs are bound and
// records a backward rule written in terms of other graph operations. The
// gradients returned by `gradient` are therefore graph nodes themselves and
// can be differentiated again, which is what a meta-gradient through an
// inner gradient-descent step needs.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mil/tensor.hpp"

namespace mil::ad {

struct Node;

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool valid() const { return static_cast<bool>(node_); }
  const Tensor& value() const;
  const Shape& shape() const;
  bool has_value() const;
  bool requires_grad() const;
  const std::string& op() const;
  std::uint64_t id() const;
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using ForwardFn = std::function<Tensor(const std::vector<const Tensor*>&)>;
using BackwardFn = std::function<std::vector<Var>(const Var& self, const Var& grad)>;

struct Node : std::enable_shared_from_this<Node> {
  std::string op;
  std::uint64_t id = 0;
  std::vector<Var> parents;
  Shape shape;
  std::optional<Tensor> value;
  std::string name;  // leaves only
  bool requires_grad = false;
  bool is_leaf = false;
  ForwardFn forward;
  BackwardFn backward;
};

// Raised for unbound leaves and shape mismatches; the message names the node.
class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- leaves ----
Var constant(Tensor value);
Var constant(double value);
Var param(std::string name, Tensor value);
// Leaf with a declared shape whose value is supplied later through `evaluate`.
Var placeholder(std::string name, Shape shape, bool requires_grad = false);
// Copy of the value with no history.
Var detach(const Var& v);

// Generic op construction; used by the op library and by tests.
Var make_op(std::string op, std::vector<Var> parents, Shape out_shape, ForwardFn forward, BackwardFn backward);

// ---- evaluation and differentiation ----
using Bindings = std::map<std::string, Tensor>;

// Recomputes `output` from its leaves. Named leaves take their value from
// `bindings` when present, otherwise their stored value.
Tensor evaluate(const Var& output, const Bindings& bindings = {});

struct GradOptions {
  // When false the returned gradients are detached (first-order truncation).
  bool create_graph = true;
};

// Gradients of a scalar `loss` with respect to each entry of `wrt`.
// Entries the loss does not depend on receive a zero constant.
std::vector<Var> gradient(const Var& loss, const std::vector<Var>& wrt, GradOptions opts = {});

// ---- fault injection (gradient-check harness only) ----
// Flips the sign of the backward pass through every `tag` node carrying `label`.
void set_flipped_backward(const std::string& label, bool flipped);
void clear_flipped_backward();

}  // namespace mil::ad
