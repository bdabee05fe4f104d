#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace mq {

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense 64-bit float tensor participating in a reverse-mode graph.
// Gradients accumulate additively across backward passes until zeroed.
class TensorData {
 public:
  Shape shape;
  std::vector<double> v;
  std::vector<double> g;  // same length as v when requires_grad
  bool requires_grad = false;
  std::string name;
  int node = -1;  // producing node in the current graph, -1 for leaves

  int64_t size() const { return static_cast<int64_t>(v.size()); }
  void zero_grad();
  void ensure_grad();
  bool is_scalar() const { return v.size() == 1; }
  double scalar_value() const;
};

using Tensor = std::shared_ptr<TensorData>;

Tensor tensor(Shape shape, std::vector<double> values, bool requires_grad = false,
              std::string name = "");
Tensor zeros(Shape shape, bool requires_grad = false, std::string name = "");
Tensor full(Shape shape, double value, bool requires_grad = false, std::string name = "");
Tensor scalar_tensor(double value, bool requires_grad = false, std::string name = "");

// Value copy severed from any graph; never requires grad.
Tensor detach(const Tensor& t);

bool same_shape(const Tensor& a, const Tensor& b);

}  // namespace mq
