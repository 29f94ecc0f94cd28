#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "joformer/error.hpp"

namespace joformer {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i > 0) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

/// Dense row-major tensor with an optional gradient buffer.
/// Copies are shallow handles onto shared storage, so autograd closures can
/// capture tensors by value and still write into the original gradients.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false) {
    for (int64_t d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    st_ = std::make_shared<Storage>();
    st_->data.assign(static_cast<size_t>(shape_numel(shape)), S{0});
    st_->shape = std::move(shape);
    st_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    }
    Tensor t(shape, requires_grad);
    t.st_->data = std::move(data);
    return t;
  }

  static Tensor scalar(S v) { return from_data({1}, {v}); }

  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    for (S& x : t.st_->data) x = v;
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  int rank() const { return static_cast<int>(st_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(st_->data.size()); }

  // Negative indices count from the back, python-style.
  int64_t dim(int i) const {
    const int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw ContractError("dim index out of range");
    return st_->shape[static_cast<size_t>(i)];
  }

  S* data() { return st_->data.data(); }
  const S* data() const { return st_->data.data(); }
  const std::vector<S>& values() const { return st_->data; }

  S& at(std::initializer_list<int64_t> idx) { return st_->data[offset(idx)]; }
  const S& at(std::initializer_list<int64_t> idx) const { return st_->data[offset(idx)]; }

  bool requires_grad() const { return st_->requires_grad; }

  void set_requires_grad(bool rg) {
    st_->requires_grad = rg;
    if (!rg) st_->grad.clear();
  }

  /// Gradient buffer, allocated (zeroed) on first access.
  S* grad_data() {
    if (!st_->requires_grad) throw ContractError("gradient requested for a tensor without requires_grad");
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), S{0});
    return st_->grad.data();
  }

  /// Gradient buffer if one has been written, else nullptr.
  const S* grad_if_any() const { return st_->grad.empty() ? nullptr : st_->grad.data(); }

  void zero_grad() {
    if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), S{0});
  }

  Tensor clone() const {
    Tensor t;
    t.st_ = std::make_shared<Storage>(*st_);
    return t;
  }

  /// Shares storage identity; used by tests to assert aliasing.
  bool same_storage(const Tensor& other) const { return st_ == other.st_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty unless requires_grad and touched by backward
    bool requires_grad{false};
  };

  size_t offset(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw ContractError("index rank mismatch");
    size_t off = 0;
    size_t d = 0;
    for (int64_t i : idx) {
      off = off * static_cast<size_t>(st_->shape[d]) + static_cast<size_t>(i);
      ++d;
    }
    return off;
  }

  std::shared_ptr<Storage> st_;
};

/// Integer id array (token ids, targets). Not differentiable.
struct IdTensor {
  Shape shape;
  std::vector<int32_t> data;

  IdTensor() = default;
  IdTensor(Shape s, std::vector<int32_t> ids) : shape(std::move(s)), data(std::move(ids)) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
      throw ShapeError("id count " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    }
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape[i]; }
};

/// Records one backward closure per forward operation. Creation order is a
/// topological order of the forward graph, so a single reverse sweep visits
/// every node exactly once. One tape per forward/backward cycle; tapes are
/// not reused.
template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { nodes_.push_back(std::move(fn)); }
  size_t size() const { return nodes_.size(); }

  void backward(Tensor<S>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward requires a scalar loss" +
                          (loss.defined() ? ", got shape " + shape_str(loss.shape()) : std::string()));
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward requires a loss recorded on a live tape");
    }
    loss.grad_data()[0] += S{1};
    for (size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
  }

 private:
  std::vector<BackwardFn> nodes_;
};

template <typename S>
void zero_grads(const std::vector<Tensor<S>*>& params) {
  for (Tensor<S>* p : params) p->zero_grad();
}

}  // namespace joformer
