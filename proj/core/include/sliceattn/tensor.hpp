#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sliceattn/errors.hpp"

namespace sliceattn {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

template <typename S>
class TapeT;

// Dense row-major n-dimensional tensor. Data and gradient buffers are shared,
// so copies alias the same storage; completed tensors are treated as
// immutable, parameters are mutated only between tapes (init, optimizer step).
template <typename S>
struct TensorT {
  Shape shape;
  std::shared_ptr<std::vector<S>> data;
  bool requires_grad = false;
  std::shared_ptr<std::vector<S>> grad;

  // Identity on the active tape; meaningful only while tape_id matches.
  mutable std::uint64_t tape_id = 0;
  mutable int node_id = -1;

  TensorT() : shape{0}, data(std::make_shared<std::vector<S>>()) {}

  explicit TensorT(Shape shp, S fill = S(0))
      : shape(std::move(shp)),
        data(std::make_shared<std::vector<S>>(static_cast<std::size_t>(shape_numel(shape)), fill)) {
    check_shape();
  }

  TensorT(Shape shp, std::vector<S> values)
      : shape(std::move(shp)), data(std::make_shared<std::vector<S>>(std::move(values))) {
    check_shape();
    if (static_cast<std::int64_t>(data->size()) != shape_numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data->size()) +
                       " does not match shape " + shape_str(shape));
    }
  }

  static TensorT scalar(S v) { return TensorT(Shape{}, std::vector<S>{v}); }

  static TensorT zeros(Shape shp) { return TensorT(std::move(shp), S(0)); }

  static TensorT ones(Shape shp) { return TensorT(std::move(shp), S(1)); }

  static TensorT full(Shape shp, S v) { return TensorT(std::move(shp), v); }

  int rank() const { return static_cast<int>(shape.size()); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data->size()); }

  S* ptr() { return data->data(); }
  const S* ptr() const { return data->data(); }

  S item() const {
    if (numel() != 1) {
      throw ShapeError("item() requires a single-element tensor, got shape " + shape_str(shape));
    }
    return (*data)[0];
  }

  S& at(std::size_t i) { return (*data)[i]; }
  S at(std::size_t i) const { return (*data)[i]; }

  void fill(S v) { std::fill(data->begin(), data->end(), v); }

  // Allocates the gradient buffer; grad always mirrors the data shape.
  TensorT& set_requires_grad(bool rg = true) {
    requires_grad = rg;
    if (rg && !grad) {
      grad = std::make_shared<std::vector<S>>(data->size(), S(0));
    }
    return *this;
  }

  S grad_at(std::size_t i) const { return grad ? (*grad)[i] : S(0); }

  bool all_finite() const {
    for (S v : *data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

 private:
  void check_shape() const {
    for (int e : shape) {
      if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    }
  }
};

// Reverse-mode gradient tape. Nodes are appended in forward execution order,
// which is a valid topological order; backward walks them once in reverse and
// then the tape is consumed. One tape may be active per thread.
template <typename S>
class TapeT {
 public:
  TapeT() : id_(next_id()++) {
    if (active_slot() != nullptr) {
      throw TapeError("a gradient tape is already active on this thread");
    }
    active_slot() = this;
  }

  ~TapeT() {
    if (active_slot() == this) active_slot() = nullptr;
  }

  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  static TapeT* active() noexcept { return active_slot(); }

  bool consumed() const { return consumed_; }

  std::size_t size() const { return nodes_.size(); }

  // Node id of `t` on this tape. Registers requires_grad tensors seen for the
  // first time as leaves, zeroing their gradient so that one backward pass
  // yields exactly d(loss)/d(leaf). Returns -1 for untracked tensors.
  int ensure_node(const TensorT<S>& t) {
    if (t.tape_id == id_ && t.node_id >= 0) return t.node_id;
    if (!t.requires_grad) return -1;
    if (!t.grad) {
      throw TapeError("requires_grad tensor has no gradient buffer");
    }
    std::fill(t.grad->begin(), t.grad->end(), S(0));
    nodes_.push_back(Node{{}, nullptr});
    t.tape_id = id_;
    t.node_id = static_cast<int>(nodes_.size()) - 1;
    return t.node_id;
  }

  // Records an op result. `out` must already carry a zeroed grad buffer; the
  // closure accumulates into the parents' grad buffers it captured.
  int emit(TensorT<S>& out, std::vector<int> parents, std::function<void()> backward_fn) {
    if (consumed_) {
      throw TapeError("tape already consumed by backward; start a new tape");
    }
    if (!out.grad) throw TapeError("emit: output has no gradient buffer");
    out.requires_grad = true;
    nodes_.push_back(Node{std::move(parents), std::move(backward_fn)});
    out.tape_id = id_;
    out.node_id = static_cast<int>(nodes_.size()) - 1;
    return out.node_id;
  }

  void run_backward(const TensorT<S>& loss) {
    if (consumed_) {
      throw TapeError("backward already called on this tape");
    }
    if (loss.numel() != 1) {
      throw TapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape));
    }
    if (!(loss.tape_id == id_ && loss.node_id >= 0)) {
      if (loss.requires_grad) {
        ensure_node(loss);  // a bare leaf: gradient is trivially one
      } else {
        throw TapeError("loss tensor is not connected to the active tape");
      }
    }
    (*loss.grad)[0] = S(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].backward) nodes_[i].backward();
    }
    consumed_ = true;
    nodes_.clear();  // graph state is released; saved values die with closures
  }

 private:
  struct Node {
    std::vector<int> parents;  // -1 entries mark untracked inputs
    std::function<void()> backward;
  };

  static TapeT*& active_slot() {
    thread_local TapeT* p = nullptr;
    return p;
  }

  static std::uint64_t& next_id() {
    static std::uint64_t n = 1;
    return n;
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::uint64_t id_;
};

// Backpropagates from `loss` through the active tape.
template <typename S>
void backward(const TensorT<S>& loss) {
  auto* tape = TapeT<S>::active();
  if (!tape) throw TapeError("backward called with no active tape");
  tape->run_backward(loss);
}

namespace detail {

// Forward ops on finite inputs must produce finite outputs; scanned in debug
// builds only.
template <typename S>
inline void check_finite(const TensorT<S>& t, const char* op) {
#ifndef NDEBUG
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
#else
  (void)t;
  (void)op;
#endif
}

template <typename S>
inline std::shared_ptr<std::vector<S>> zeros_like_buffer(const TensorT<S>& t) {
  return std::make_shared<std::vector<S>>(t.data->size(), S(0));
}

}  // namespace detail

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;
using Tape = TapeT<float>;
using TapeD = TapeT<double>;

}  // namespace sliceattn
