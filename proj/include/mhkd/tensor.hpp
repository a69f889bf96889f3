#pragma once

// Dense row-major tensors and the reverse-mode gradient tape.
//
// A Tensor is a shared handle: copies alias the same buffer, as with
// framework tensors, so parameters can be held by a layer and by the
// optimizer at once. Ops never create strided views; every tensor owns a
// contiguous buffer.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace mhkd {

using Shape = std::vector<int>;

enum class Precision { kFloat32, kFloat64 };

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class GradTape;

namespace detail {
template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
};
}  // namespace detail

template <typename T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors are 32- or 64-bit floating point");

 public:
  using value_type = T;
  static constexpr Precision kPrecision =
      std::is_same_v<T, float> ? Precision::kFloat32 : Precision::kFloat64;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int axis) const { return impl_->shape.at(static_cast<std::size_t>(axis)); }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  // Allocates a zero gradient buffer on first use. Gradient state belongs to
  // the shared buffer, not the handle, so this is available on const handles.
  std::span<T> mutable_grad() const;
  void zero_grad() const;

  // Same values, no history, no grad requirement.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class GradTape<T>;
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Execution-order record of differentiable ops. Ops append a node when given
// a tape and at least one input requires grad; backward() replays the nodes
// in reverse, which is a reverse topological order of the graph.
template <typename T>
class GradTape {
 public:
  using BackwardFn = std::function<void()>;

  // Marks `output` as a non-leaf needing grad and appends the node.
  void record(Tensor<T>& output, BackwardFn backward_fn);

  // Seeds d(loss)/d(loss) = 1 and propagates. Intermediate gradients are reset
  // first; leaf gradients accumulate across calls until zeroed.
  void backward(const Tensor<T>& loss);

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> output;
    BackwardFn backward_fn;
  };
  std::vector<Node> nodes_;
};

// True when an op with these inputs should be recorded on `tape`.
template <typename T, typename... Ts>
bool should_record(const GradTape<T>* tape, const Ts&... inputs) {
  return tape != nullptr && ((inputs.defined() && inputs.requires_grad()) || ...);
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class GradTape<float>;
extern template class GradTape<double>;

}  // namespace mhkd
