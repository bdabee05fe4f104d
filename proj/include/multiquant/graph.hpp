#pragma once

#include <functional>
#include <string>
#include <unordered_set>
#include <vector>

#include "multiquant/tensor.hpp"

namespace mq {

enum class OpKind {
  Linear,
  Conv2d,
  Relu,
  BatchNorm2d,
  AvgPool2d,
  Add,
  ReduceSum,
  Reshape,
  SliceChannels,
  SoftmaxXent,
  SoftXent,
  FakeQuant,
};

const char* op_name(OpKind kind);

struct Node {
  OpKind kind;
  std::string label;
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void()> backward;  // accumulates into input grads from output->g
};

// Execution tape. Ops compute eagerly as they are recorded; backward replays
// the tape in reverse. One graph instance is confined to one worker.
class Graph {
 public:
  // Records a node and returns its output (node id stamped on the output).
  Tensor emit(OpKind kind, std::string label, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss)=1 and accumulates gradients into every
  // requires_grad tensor reachable from the tape. Rejects a loss that was
  // not produced by this graph or is not scalar.
  void backward(const Tensor& loss);

  void clear();

  size_t size() const { return nodes_.size(); }

  // Trainable leaves consumed since the last clear(), in first-use order.
  const std::vector<Tensor>& touched_params() const { return touched_params_; }

  // When set, fake-quantize nodes skip the rounding step (the straight-
  // through surrogate path); used by gradient checks.
  bool surrogate_rounding = false;

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> touched_params_;
  std::unordered_set<const TensorData*> touched_set_;
};

}  // namespace mq
