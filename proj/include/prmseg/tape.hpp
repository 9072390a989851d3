#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "prmseg/tensor.hpp"

namespace prmseg {

// A learnable tensor. Gradients accumulate until zeroed by the optimizer.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor<T>(value.shape.empty() ? std::vector<int64_t>{} : value.shape);
    if (value.shape.empty()) grad = Tensor<T>::scalar(T(0));
    validate_name(name);
  }

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }

  static void validate_name(const std::string& n) {
    if (n.empty()) throw ContractError("parameter name must be nonempty");
    for (char c : n) {
      const bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
                      (c >= '0' && c <= '9') || c == '_' || c == '.' || c == '/';
      if (!ok) throw ContractError("parameter name has invalid character: " + n);
    }
  }
};

// Reverse-mode tape over a closed op set. Ops append nodes in execution
// order; backward walks the nodes in exact reverse order, so construction
// order is the topological order. One forward/backward per network at a
// time; reset() drops all recorded state.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;          // allocated on first accumulation
    bool grad_alloc = false;
    bool needs_grad = false;
    BackwardFn backward;     // empty for leaves
    const char* op = "leaf";
  };

  bool check_finite = true;

  int leaf(Tensor<T> value, bool needs_grad = false) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  // Leases a parameter onto the tape; backward() adds the accumulated
  // node gradient into param.grad. Binding the same parameter more than
  // once (weight sharing) sums the contributions of every use.
  int param(Parameter<T>& p) {
    const int id = leaf(p.value, true);
    bindings_.emplace_back(&p, id);
    return id;
  }

  int make_node(Tensor<T> value, const std::vector<int>& inputs, BackwardFn bwd, const char* op) {
    if (check_finite && !value.all_finite())
      throw NumericsError(std::string("op '") + op + "' produced non-finite values");
    Node n;
    n.value = std::move(value);
    n.op = op;
    for (int in : inputs) {
      if (in < 0 || in >= int(nodes_.size())) throw ContractError("tape: bad input node id");
      if (nodes_[size_t(in)].needs_grad) n.needs_grad = true;
    }
    if (n.needs_grad) n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    ++op_counts_[op];
    return int(nodes_.size()) - 1;
  }

  const Tensor<T>& val(int id) const { return nodes_[size_t(id)].value; }

  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[size_t(id)];
    if (!n.grad_alloc) {
      n.grad = n.value.shape.empty() ? Tensor<T>::scalar(T(0)) : Tensor<T>(n.value.shape);
      n.grad_alloc = true;
    }
    return n.grad;
  }

  bool has_grad(int id) const { return nodes_[size_t(id)].grad_alloc; }

  void backward(int loss) {
    if (loss < 0 || loss >= int(nodes_.size())) throw ContractError("backward: bad node id");
    if (nodes_.empty()) throw ContractError("backward: empty tape");
    if (!nodes_[size_t(loss)].value.is_scalar())
      throw ContractError("backward: loss must be a scalar, got shape " +
                          nodes_[size_t(loss)].value.shape_str());
    grad_buf(loss).data[0] += T(1);
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[size_t(id)];
      if (n.grad_alloc && n.backward) n.backward(*this, id);
    }
    for (auto& [p, id] : bindings_) {
      if (!nodes_[size_t(id)].grad_alloc) continue;
      const Tensor<T>& g = nodes_[size_t(id)].grad;
      for (size_t i = 0; i < g.data.size(); ++i) p->grad.data[i] += g.data[i];
    }
  }

  void reset() {
    nodes_.clear();
    bindings_.clear();
    op_counts_.clear();
  }

  size_t size() const { return nodes_.size(); }
  int count_ops(const std::string& op) const {
    auto it = op_counts_.find(op);
    return it == op_counts_.end() ? 0 : it->second;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<std::pair<Parameter<T>*, int>> bindings_;
  std::map<std::string, int> op_counts_;
};

}  // namespace prmseg
