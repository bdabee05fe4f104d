#include "multiquant/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace mq {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimension must be positive, got " + std::to_string(d));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

void TensorData::zero_grad() {
  for (auto& x : g) x = 0.0;
}

void TensorData::ensure_grad() {
  if (g.size() != v.size()) g.assign(v.size(), 0.0);
}

double TensorData::scalar_value() const {
  if (!is_scalar()) throw std::runtime_error("tensor " + name + " is not scalar");
  return v[0];
}

Tensor tensor(Shape shape, std::vector<double> values, bool requires_grad, std::string name) {
  auto t = std::make_shared<TensorData>();
  if (numel(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  t->shape = std::move(shape);
  t->v = std::move(values);
  t->requires_grad = requires_grad;
  t->name = std::move(name);
  if (requires_grad) t->ensure_grad();
  return t;
}

Tensor zeros(Shape shape, bool requires_grad, std::string name) {
  const auto n = numel(shape);
  return tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad, std::move(name));
}

Tensor full(Shape shape, double value, bool requires_grad, std::string name) {
  const auto n = numel(shape);
  return tensor(std::move(shape), std::vector<double>(n, value), requires_grad, std::move(name));
}

Tensor scalar_tensor(double value, bool requires_grad, std::string name) {
  return tensor({1}, {value}, requires_grad, std::move(name));
}

Tensor detach(const Tensor& t) {
  auto out = std::make_shared<TensorData>();
  out->shape = t->shape;
  out->v = t->v;
  out->requires_grad = false;
  out->name = t->name.empty() ? "detached" : t->name + ".detached";
  return out;
}

bool same_shape(const Tensor& a, const Tensor& b) { return a->shape == b->shape; }

}  // namespace mq
