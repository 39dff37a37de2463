#include "mil/autodiff.hpp"

#include <atomic>
#include <mutex>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "mil/ops.hpp"

namespace mil::ad {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

std::mutex g_fault_mu;
std::set<std::string> g_flipped;

std::string describe(const Node& n) {
  std::string s = "node #" + std::to_string(n.id) + " (" + n.op;
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s + ")";
}

std::shared_ptr<Node> new_node(std::string op) {
  auto n = std::make_shared<Node>();
  n->op = std::move(op);
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

// Parents-before-children order of every node reachable from `root`.
std::vector<Node*> topo_order(Node* root, bool grad_only) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].node();
      if ((!grad_only || p->requires_grad) && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

const Tensor& Var::value() const {
  if (!node_->value) throw GraphError("value requested from unbound " + describe(*node_));
  return *node_->value;
}
const Shape& Var::shape() const { return node_->shape; }
bool Var::has_value() const { return node_->value.has_value(); }
bool Var::requires_grad() const { return node_->requires_grad; }
const std::string& Var::op() const { return node_->op; }
std::uint64_t Var::id() const { return node_->id; }

Var constant(Tensor value) {
  auto n = new_node("const");
  n->shape = value.shape();
  n->value = std::move(value);
  n->is_leaf = true;
  return Var(std::move(n));
}

Var constant(double value) { return constant(Tensor::scalar(value)); }

Var param(std::string name, Tensor value) {
  auto n = new_node("param");
  n->shape = value.shape();
  n->value = std::move(value);
  n->name = std::move(name);
  n->is_leaf = true;
  n->requires_grad = true;
  return Var(std::move(n));
}

Var placeholder(std::string name, Shape shape, bool requires_grad) {
  auto n = new_node("placeholder");
  n->shape = std::move(shape);
  n->name = std::move(name);
  n->is_leaf = true;
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

Var detach(const Var& v) { return constant(v.value()); }

Var make_op(std::string op, std::vector<Var> parents, Shape out_shape, ForwardFn forward, BackwardFn backward) {
  auto n = new_node(std::move(op));
  n->shape = std::move(out_shape);
  bool all_bound = true;
  for (const auto& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    all_bound = all_bound && p.has_value();
  }
  if (all_bound) {
    std::vector<const Tensor*> in;
    in.reserve(parents.size());
    for (const auto& p : parents) in.push_back(&p.value());
    Tensor v = forward(in);
    if (v.shape() != n->shape) {
      throw GraphError("forward of " + describe(*n) + " produced shape " + shape_str(v.shape()) + ", expected " +
                       shape_str(n->shape));
    }
    n->value = std::move(v);
  }
  n->parents = std::move(parents);
  n->forward = std::move(forward);
  if (n->requires_grad) n->backward = std::move(backward);
  return Var(std::move(n));
}

Tensor evaluate(const Var& output, const Bindings& bindings) {
  std::unordered_map<Node*, Tensor> values;
  for (Node* n : topo_order(output.node(), false)) {
    if (n->is_leaf) {
      auto it = n->name.empty() ? bindings.end() : bindings.find(n->name);
      if (it != bindings.end()) {
        if (it->second.shape() != n->shape) {
          throw GraphError("binding for " + describe(*n) + " has shape " + shape_str(it->second.shape()) +
                           ", expected " + shape_str(n->shape));
        }
        values.emplace(n, it->second);
      } else if (n->value) {
        values.emplace(n, *n->value);
      } else {
        throw GraphError("unbound leaf " + describe(*n));
      }
      continue;
    }
    std::vector<const Tensor*> in;
    in.reserve(n->parents.size());
    for (const auto& p : n->parents) in.push_back(&values.at(p.node()));
    Tensor v;
    try {
      v = n->forward(in);
    } catch (const ShapeError& e) {
      throw GraphError("shape mismatch at " + describe(*n) + ": " + e.what());
    }
    values.emplace(n, std::move(v));
  }
  return values.at(output.node());
}

std::vector<Var> gradient(const Var& loss, const std::vector<Var>& wrt, GradOptions opts) {
  if (numel(loss.shape()) != 1) {
    throw GraphError("gradient requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  std::vector<Var> result(wrt.size());
  std::unordered_set<Node*> targets;
  for (const auto& w : wrt) targets.insert(w.node());

  std::unordered_map<Node*, Var> grads;
  if (loss.requires_grad()) {
    auto order = topo_order(loss.node(), true);
    // A node is relevant when some target is reachable through its parents.
    std::unordered_set<Node*> relevant;
    for (Node* n : order) {
      bool r = targets.count(n) > 0;
      for (const auto& p : n->parents) r = r || relevant.count(p.node()) > 0;
      if (r) relevant.insert(n);
    }
    grads.emplace(loss.node(), constant(Tensor(loss.shape(), 1.0)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->is_leaf || !relevant.count(n)) continue;
      auto g = grads.find(n);
      if (g == grads.end()) continue;
      Var self(n->shared_from_this());
      auto parent_grads = n->backward(self, g->second);
      for (std::size_t i = 0; i < n->parents.size(); ++i) {
        Node* p = n->parents[i].node();
        if (!relevant.count(p) || !parent_grads[i].valid()) continue;
        auto& slot = grads[p];
        slot = slot.valid() ? add(slot, parent_grads[i]) : parent_grads[i];
      }
      if (!targets.count(n)) grads.erase(n);
    }
  }
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    auto g = grads.find(wrt[i].node());
    if (g == grads.end()) {
      result[i] = constant(Tensor(wrt[i].shape(), 0.0));
    } else {
      result[i] = opts.create_graph ? g->second : detach(g->second);
    }
  }
  return result;
}

void set_flipped_backward(const std::string& label, bool flipped) {
  std::lock_guard lock(g_fault_mu);
  if (flipped) {
    g_flipped.insert(label);
  } else {
    g_flipped.erase(label);
  }
}

void clear_flipped_backward() {
  std::lock_guard lock(g_fault_mu);
  g_flipped.clear();
}

namespace detail {
bool is_flipped(const std::string& label) {
  std::lock_guard lock(g_fault_mu);
  return g_flipped.count(label) > 0;
}
}  // namespace detail

}  // namespace mil::ad
