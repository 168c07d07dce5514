#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <type_traits>
#include <utility>

#include "mwformer/common.hpp"

namespace mwf {

template <typename T>
class Tape;
template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // stays empty until backward (or accumulation) touches it
  bool requires_grad = false;
  bool grad_valid = false;
  Tape<T>* tape = nullptr;  // tape that recorded the producing op; null for leaves

  std::size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Grad mode. Inference paths wrap themselves in NoGradGuard so ops skip
// recording entirely; the flag is thread-local and shared by all dtypes.
// ---------------------------------------------------------------------------

struct GradMode {
  static bool& enabled() {
    static thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Tensor: a value-semantics handle onto a shared node. Row-major storage.
// Scalars are rank-0 tensors (shape == {}, one element).
//
// Op outputs are treated as immutable once created; parameter leaves are
// mutated in place by the optimizer between tape lifetimes.
// ---------------------------------------------------------------------------

template <typename T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "Tensor supports float and double");

 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  // ---- factories -----------------------------------------------------------

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T v) {
    auto n = std::make_shared<detail::Node<T>>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return full(Shape{}, v); }

  static Tensor from(Shape shape, std::vector<T> data) {
    if (data.size() != shape_numel(shape))
      throw DimensionError("Tensor::from: " + std::to_string(data.size()) +
                           " values do not fill shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  /// Uniform fill in [lo, hi); consumes shape_numel draws from rng in order.
  static Tensor uniform(Rng& rng, Shape shape, T lo, T hi) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return from(std::move(shape), std::move(v));
  }

  // ---- basic queries --------------------------------------------------------

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  std::size_t rank() const { return node()->shape.size(); }
  std::size_t numel() const { return node()->value.size(); }
  std::size_t size(std::size_t axis) const {
    if (axis >= rank())
      throw DimensionError("Tensor::size: axis " + std::to_string(axis) +
                           " out of range for " + shape_str(shape()));
    return node()->shape[axis];
  }

  const std::vector<T>& values() const { return node()->value; }
  T* data() { return node()->value.data(); }
  const T* data() const { return node()->value.data(); }

  T item() const {
    if (numel() != 1)
      throw ContractError("Tensor::item: tensor " + shape_str(shape()) + " is not a scalar");
    return node()->value[0];
  }

  T operator()(std::size_t i) const { return node()->value[i]; }
  T operator()(std::size_t i, std::size_t j) const {
    return node()->value[i * node()->shape[1] + j];
  }
  T operator()(std::size_t i, std::size_t j, std::size_t k) const {
    const Shape& s = node()->shape;
    return node()->value[(i * s[1] + j) * s[2] + k];
  }

  // ---- autodiff surface ------------------------------------------------------

  bool requires_grad() const { return node()->requires_grad; }

  Tensor& set_requires_grad(bool on) {
    node()->requires_grad = on;
    return *this;
  }

  /// Gradient of the last backward() wrt this tensor. Only valid on tensors
  /// that required grad and participated in that tape.
  const std::vector<T>& grad() const {
    if (!node()->grad_valid)
      throw AbsentGradError("grad(): no gradient present; tensor is detached or backward has not run");
    return node()->grad;
  }

  void clear_grad() {
    node()->grad.clear();
    node()->grad_valid = false;
  }

  /// Value copy with no grad history.
  Tensor detach() const {
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = node()->shape;
    n->value = node()->value;
    return Tensor(std::move(n));
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(node()->value[i]);
    return Tensor<U>::from(shape(), std::move(v));
  }

  const NodePtr& node() const {
    if (!node_) throw ContractError("operation on an empty Tensor handle");
    return node_;
  }

 private:
  NodePtr node_;
};

// ---------------------------------------------------------------------------
// Tape: records one backward closure per forward op, in creation order
// (which is a topological order of the DAG by construction). backward()
// walks the records once, in reverse; a second walk without reset() is a
// contract violation.
// ---------------------------------------------------------------------------

template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  struct Record {
    const char* op;
    NodePtr out;
    std::vector<NodePtr> inputs;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    static thread_local Tape* t = nullptr;
    return t;
  }

  /// True when ops should record onto this tape.
  static bool recording() { return GradMode::enabled() && active() != nullptr; }

  void record(const char* op, NodePtr out, std::vector<NodePtr> inputs,
              std::function<void()> backward) {
    out->tape = this;
    out->requires_grad = true;
    records_.push_back(Record{op, std::move(out), std::move(inputs), std::move(backward)});
  }

  std::size_t size() const { return records_.size(); }
  bool backward_done() const { return backward_done_; }
  const Record& record_at(std::size_t i) const { return records_[i]; }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (loss.node()->tape != this)
      throw ContractError("backward: loss tensor was not recorded on this tape");
    if (backward_done_)
      throw ContractError("backward: tape already consumed; reset() before reuse");
    backward_done_ = true;

    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);

    for (std::size_t i = records_.size(); i-- > 0;) {
      Record& r = records_[i];
      // An op whose output never received gradient contributes nothing.
      if (r.out->grad.empty()) continue;
      r.backward();
    }

    // Every requires-grad tensor that participated now reports a (possibly
    // zero) gradient; untouched ones get explicit zeros rather than silence.
    for (Record& r : records_) {
      r.out->grad_valid = true;
      if (r.out->grad.empty()) r.out->ensure_grad();
      for (NodePtr& in : r.inputs) {
        if (!in->requires_grad) continue;
        in->grad_valid = true;
        if (in->grad.empty()) in->ensure_grad();
      }
    }
  }

  /// Drops all records (releasing intermediate nodes) and re-arms backward().
  void reset() {
    records_.clear();
    backward_done_ = false;
  }

 private:
  std::vector<Record> records_;
  bool backward_done_ = false;
};

/// RAII scope that makes `tape` the recording target for ops of this dtype.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active()) { Tape<T>::active() = &tape; }
  ~TapeScope() { Tape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

/// Runs backward on the tape that produced `loss`.
template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = loss.node()->tape;
  if (tape == nullptr)
    throw ContractError("backward: loss tensor was not recorded on any tape");
  tape->backward(loss);
}

}  // namespace mwf
