#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace forge {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major array of doubles with an optional gradient buffer.
//
// Tensor is a handle: copies share storage. Operations never mutate their
// inputs, so a tensor that carries no gradient is an immutable value and can
// be read from several threads at once.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  // Writable view of the values. Only for leaves (parameters, inputs) outside a recorded pass.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const;
  std::span<const double> grad() const;
  // Gradient buffer, allocated (zero-filled) on first use. The buffer belongs to the
  // shared node, so this is available through const handles.
  std::span<double> mutable_grad() const;
  void zero_grad();

  // Independent copy of the values with no gradient linkage.
  Tensor detach() const;
  // Same values under a new shape with equal element count, no gradient linkage.
  Tensor detach_reshaped(Shape shape) const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Records the backward rules of the operations executed while it is active.
//
// Constructing a Tape makes it the active tape of the calling thread; the
// previous one is restored on destruction. Operations whose inputs require a
// gradient append a closure; backward() replays them in reverse order and
// then clears the tape. Without an active tape nothing is recorded.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> backward_rule);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and propagates. The loss must be a scalar produced on this tape.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> entries_;
  Tape* previous_;
};

// Suspends recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

// Free-function form of Tape::backward.
void backward(const Tensor& loss, Tape& tape);

}  // namespace forge
