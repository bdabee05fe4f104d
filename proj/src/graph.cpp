#include "multiquant/graph.hpp"

#include <stdexcept>

namespace mq {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Linear: return "linear";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::BatchNorm2d: return "batchnorm2d";
    case OpKind::AvgPool2d: return "avgpool2d";
    case OpKind::Add: return "add";
    case OpKind::ReduceSum: return "reduce-sum";
    case OpKind::Reshape: return "reshape";
    case OpKind::SliceChannels: return "slice-channels";
    case OpKind::SoftmaxXent: return "softmax-cross-entropy";
    case OpKind::SoftXent: return "soft-cross-entropy";
    case OpKind::FakeQuant: return "fake-quantize";
  }
  return "?";
}

Tensor Graph::emit(OpKind kind, std::string label, std::vector<Tensor> inputs, Tensor output,
                   std::function<void()> backward) {
  output->node = static_cast<int>(nodes_.size());
  for (const auto& in : inputs) {
    if (in->requires_grad && in->node < 0 && !touched_set_.count(in.get())) {
      touched_set_.insert(in.get());
      touched_params_.push_back(in);
    }
  }
  nodes_.push_back(Node{kind, std::move(label), std::move(inputs), output, std::move(backward)});
  return output;
}

void Graph::backward(const Tensor& loss) {
  if (nodes_.empty()) throw std::runtime_error("backward called on an empty graph");
  if (loss->node < 0 || loss->node >= static_cast<int>(nodes_.size()) ||
      nodes_[loss->node].output.get() != loss.get())
    throw std::runtime_error("backward: loss was not produced by this graph");
  if (!loss->is_scalar()) throw std::runtime_error("backward: loss must be scalar");

  // intermediate grads are per-backward scratch; only leaves accumulate
  for (auto& n : nodes_) n.output->zero_grad();
  loss->ensure_grad();
  loss->g[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output->g.empty() && it->backward) it->backward();
  }
}

void Graph::clear() {
  for (auto& n : nodes_) n.output->node = -1;
  nodes_.clear();
  touched_params_.clear();
  touched_set_.clear();
}

}  // namespace mq
