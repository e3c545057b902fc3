#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffclip/errors.hpp"
#include "diffclip/tensor.hpp"

namespace diffclip {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// dLoss/dVar after Tape::backward. Only defined for requires_grad nodes.
  const Tensor& grad() const;

  std::size_t id() const { return id_; }
  Tape& tape() const {
    if (!tape_) throw std::logic_error("use of an unbound Var");
    return *tape_;
  }
  bool bound() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records differentiable operations in execution order (which is a topological
/// order) and replays their backward rules once. Confined to a single thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    ensure_open();
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    n.requires_grad = requires_grad && recording_;
    const std::size_t id = nodes_.size() - 1;
    if (n.requires_grad) leaves_.push_back(id);
    check_finite("leaf", n.value);
    return Var(this, id);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var parameter(Tensor value) { return leaf(std::move(value), true); }

  bool recording() const { return recording_; }
  void set_nan_check(bool on) { nan_check_ = on; }
  bool nan_check() const { return nan_check_; }
  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_ops() const { return ops_.size(); }

  /// Distinct names of the recorded differentiable ops.
  std::set<std::string> op_names() const {
    std::set<std::string> out;
    for (const Op& o : ops_) out.insert(o.name);
    return out;
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  const Tensor& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (!n.requires_grad) throw std::logic_error("grad() on a node that does not require grad");
    if (!backward_done_) throw std::logic_error("grad() before backward()");
    return n.grad;
  }

  /// Accumulation target for backward rules. Allocated (zeroed) on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape(), 0.0);
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Creates the output node of an op. The backward rule is kept only when some
  /// input requires grad and the tape is recording.
  Var emit(const char* op, Tensor out, std::span<const Var> inputs, BackwardFn fn) {
    ensure_open();
    bool needs = false;
    for (const Var& in : inputs) {
      if (&in.tape() != this) throw std::logic_error(std::string(op) + ": inputs live on different tapes");
      needs = needs || nodes_[in.id()].requires_grad;
    }
    check_finite(op, out);
    Node& n = nodes_.emplace_back();
    n.value = std::move(out);
    n.requires_grad = needs && recording_;
    const std::size_t id = nodes_.size() - 1;
    if (n.requires_grad) ops_.push_back(Op{id, op, std::move(fn)});
    return Var(this, id);
  }
  Var emit(const char* op, Tensor out, std::initializer_list<Var> inputs, BackwardFn fn) {
    return emit(op, std::move(out), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  void backward(Var loss) {
    if (!loss.bound() || &loss.tape() != this) throw std::logic_error("backward: loss is not on this tape");
    if (backward_done_) throw std::logic_error("backward: tape already replayed; record a new forward pass");
    Node& out = nodes_[loss.id()];
    if (out.value.size() != 1) {
      throw DimensionError("backward: loss must be scalar, got " + shape_str(out.value.shape()));
    }
    if (!out.requires_grad) throw std::logic_error("backward: loss is detached from every parameter");
    backward_done_ = true;
    grad_buffer(loss.id())[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      Node& n = nodes_[it->output];
      if (!n.has_grad) continue;
      it->fn(*this, n.grad);
      n.grad = Tensor();  // intermediate gradient no longer needed
      n.has_grad = false;
    }
    for (std::size_t id : leaves_) grad_buffer(id);
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
  };
  struct Op {
    std::size_t output;
    const char* name;
    BackwardFn fn;
  };

  void ensure_open() const {
    if (backward_done_) throw std::logic_error("tape already replayed; record a new forward pass");
  }
  void check_finite(const char* op, const Tensor& t) const {
    if (nan_check_ && !t.all_finite()) throw NumericError(std::string("non-finite output from ") + op);
  }

  std::deque<Node> nodes_;
  std::vector<Op> ops_;
  std::vector<std::size_t> leaves_;
  bool recording_ = true;
  bool nan_check_ = false;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape().value(id_); }
inline bool Var::requires_grad() const { return tape().requires_grad(id_); }
inline const Tensor& Var::grad() const { return tape().grad(id_); }

}  // namespace diffclip
