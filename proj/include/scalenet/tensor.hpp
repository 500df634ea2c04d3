#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "scalenet/errors.hpp"

namespace scalenet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <class Real>
class Tape;

// Plain storage behind a Tensor handle. Tensors copy as aliases, so two
// handles can point at the same TensorData; that is exactly how weight
// sharing is represented throughout the library.
template <class Real>
struct TensorData {
  Shape shape;
  std::vector<Real> values;
  std::vector<Real> grad;  // allocated lazily during backward
  bool requires_grad = false;

  // Registration on the most recent tape that saw this tensor.
  std::uint64_t tape_serial = 0;
  std::int64_t tape_id = -1;
};

// Reference-semantics handle over TensorData. Row-major, dense.
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() : data_(std::make_shared<TensorData<Real>>()) {}

  explicit Tensor(Shape shape, Real fill = Real(0))
      : data_(std::make_shared<TensorData<Real>>()) {
    data_->shape = std::move(shape);
    data_->values.assign(shape_numel(data_->shape), fill);
  }

  Tensor(Shape shape, std::vector<Real> values)
      : data_(std::make_shared<TensorData<Real>>()) {
    if (shape_numel(shape) != values.size()) {
      throw shape_error("Tensor: " + shape_str(shape) + " wants " +
                        std::to_string(shape_numel(shape)) + " values, got " +
                        std::to_string(values.size()));
    }
    data_->shape = std::move(shape);
    data_->values = std::move(values);
  }

  static Tensor scalar(Real v) { return Tensor({1}, std::vector<Real>{v}); }

  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= data_->shape.size()) {
      throw index_error("Tensor::dim: axis " + std::to_string(i) + " of " +
                        shape_str(data_->shape));
    }
    return data_->shape[i];
  }
  std::size_t size() const { return data_->values.size(); }

  Real* data() { return data_->values.data(); }
  const Real* data() const { return data_->values.data(); }
  std::vector<Real>& values() { return data_->values; }
  const std::vector<Real>& values() const { return data_->values; }

  Real item() const {
    if (size() != 1) {
      throw contract_error("Tensor::item: tensor " + shape_str(shape()) +
                           " is not a scalar");
    }
    return data_->values[0];
  }

  // Bounds-checked element access; row-major.
  Real& at(std::initializer_list<std::size_t> idx) {
    return data_->values[offset(idx)];
  }
  Real at(std::initializer_list<std::size_t> idx) const {
    return data_->values[offset(idx)];
  }

  bool requires_grad() const { return data_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    data_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !data_->grad.empty(); }
  const std::vector<Real>& grad() const { return data_->grad; }
  void zero_grad() { data_->grad.clear(); }

  // Deep copy, detached from any tape. Gradients are not copied.
  Tensor clone() const {
    Tensor out;
    out.data_->shape = data_->shape;
    out.data_->values = data_->values;
    out.data_->requires_grad = data_->requires_grad;
    return out;
  }

  bool same_storage(const Tensor& other) const { return data_ == other.data_; }
  const std::shared_ptr<TensorData<Real>>& ptr() const { return data_; }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != data_->shape.size()) {
      throw index_error("Tensor::at: " + std::to_string(idx.size()) +
                        " indices for " + shape_str(data_->shape));
    }
    std::size_t off = 0, axis = 0;
    for (std::size_t i : idx) {
      if (i >= data_->shape[axis]) {
        throw index_error("Tensor::at: index " + std::to_string(i) +
                          " out of range on axis " + std::to_string(axis) +
                          " of " + shape_str(data_->shape));
      }
      off = off * data_->shape[axis] + i;
      ++axis;
    }
    return off;
  }

  std::shared_ptr<TensorData<Real>> data_;
};

// Records the operations of one forward pass. Replaying the node list in
// reverse drives reverse-mode differentiation; the list order is the only
// ordering used, so gradient accumulation is deterministic and repeat runs
// over an identical graph produce bit-identical gradients.
template <class Real>
class Tape {
 public:
  struct Node {
    std::vector<std::int64_t> inputs;
    std::int64_t output;
    std::function<void()> pull;  // moves the output grad onto the inputs
  };

  Tape() : serial_(++serial_counter()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& current_slot() {
    thread_local Tape* current = nullptr;
    return current;
  }
  static Tape* current() { return current_slot(); }

  std::uint64_t serial() const { return serial_; }

  // Assigns this tensor an id on this tape (idempotent). Ids increase in
  // first-seen order, so every node's inputs carry smaller ids than its
  // output and the node list is topologically ordered by construction.
  std::int64_t track(const std::shared_ptr<TensorData<Real>>& t) {
    if (t->tape_serial != serial_) {
      t->tape_serial = serial_;
      t->tape_id = next_id_++;
    }
    return t->tape_id;
  }

  void record(std::vector<std::int64_t> inputs, std::int64_t output,
              std::function<void()> pull) {
    nodes_.push_back(Node{std::move(inputs), output, std::move(pull)});
  }

  std::size_t node_count() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  // Reverse sweep from a scalar loss recorded on this tape.
  void backward(const Tensor<Real>& loss) {
    if (loss.size() != 1) {
      throw contract_error("backward: loss must be a scalar, got " +
                           shape_str(loss.shape()));
    }
    if (loss.ptr()->tape_serial != serial_) {
      throw contract_error("backward: loss was not recorded on the live tape");
    }
    loss.ptr()->grad.assign(1, Real(1));
    for (std::size_t i = nodes_.size(); i > 0; --i) {
      nodes_[i - 1].pull();
    }
  }

 private:
  static std::uint64_t& serial_counter() {
    thread_local std::uint64_t c = 0;
    return c;
  }

  std::vector<Node> nodes_;
  std::uint64_t serial_;
  std::int64_t next_id_ = 0;
};

// Installs a fresh tape as the current one for the enclosing scope.
// Operations executed while a TapeScope is alive are recorded; without one
// they run in plain inference mode.
template <class Real>
class TapeScope {
 public:
  TapeScope() : prev_(Tape<Real>::current_slot()) {
    Tape<Real>::current_slot() = &tape_;
  }
  ~TapeScope() { Tape<Real>::current_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<Real>& tape() { return tape_; }

 private:
  Tape<Real> tape_;
  Tape<Real>* prev_;
};

template <class Real>
void backward(const Tensor<Real>& loss) {
  Tape<Real>* tape = Tape<Real>::current();
  if (!tape) {
    throw contract_error("backward: no live tape in this scope");
  }
  tape->backward(loss);
}

namespace detail {

template <class Real>
inline void ensure_grad(TensorData<Real>& t) {
  if (t.grad.empty()) t.grad.assign(t.values.size(), Real(0));
}

// Registers one recorded operation if a tape is live and any input needs a
// gradient. Sets requires_grad on the output accordingly.
template <class Real>
inline void record_op(std::initializer_list<const Tensor<Real>*> inputs,
                      Tensor<Real>& out, std::function<void()> pull) {
  bool need = false;
  for (const Tensor<Real>* t : inputs) need = need || t->requires_grad();
  if (!need) return;
  Tape<Real>* tape = Tape<Real>::current();
  if (!tape) return;
  out.set_requires_grad(true);
  std::vector<std::int64_t> ids;
  ids.reserve(inputs.size());
  for (const Tensor<Real>* t : inputs) ids.push_back(tape->track(t->ptr()));
  tape->record(std::move(ids), tape->track(out.ptr()), std::move(pull));
}

}  // namespace detail

}  // namespace scalenet
