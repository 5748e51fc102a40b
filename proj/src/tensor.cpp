#include "forge/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "forge/error.hpp"

namespace forge {

namespace {
thread_local Tape* active_tape = nullptr;
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::Node>()) {
  const std::size_t n = shape_size(shape);
  node_->shape = std::move(shape);
  node_->data.assign(n, fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(values));
}

const Shape& Tensor::shape() const {
  if (!node_) throw Error("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) throw Error("use of an undefined tensor");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw Error("use of an undefined tensor");
  return node_->data;
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  const auto& s = shape();
  if (s.size() != 2 || row >= s[0] || col >= s[1]) {
    throw DimensionError("at(" + std::to_string(row) + "," + std::to_string(col) + ") on " +
                         shape_string(s));
  }
  return node_->data[row * s[1] + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw Error("use of an undefined tensor");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) throw Error("use of an undefined tensor");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() const {
  if (!node_) throw Error("use of an undefined tensor");
  if (node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data); }

Tensor Tensor::detach_reshaped(Shape new_shape) const {
  if (shape_size(new_shape) != size()) {
    throw DimensionError("cannot reshape " + shape_string(shape()) + " to " +
                         shape_string(new_shape));
  }
  return Tensor(std::move(new_shape), node_->data);
}

Tape::Tape() : previous_(active_tape) { active_tape = this; }

Tape::~Tape() { active_tape = previous_; }

Tape* Tape::active() { return active_tape; }

void Tape::record(std::function<void()> backward_rule) {
  entries_.push_back(std::move(backward_rule));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw DimensionError("backward needs a scalar loss, got " +
                         (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw Error("loss was not produced on a recording tape");
  Tensor seed = loss;
  seed.mutable_grad()[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

NoGradGuard::NoGradGuard() : saved_(active_tape) { active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { active_tape = saved_; }

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

}  // namespace forge
