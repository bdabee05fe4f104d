#pragma once

#include "multiquant/graph.hpp"
#include "multiquant/tensor.hpp"

namespace mq {

// Running statistics owned by a batch-norm layer. Updated as a side effect
// of training-mode forwards; read-only in eval mode.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(int channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// x: (N,F), w: (O,F), b: (O) or nullptr -> (N,O)
Tensor linear(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b);

// x: (N,C,H,W), w: (F,C,KH,KW), b: (F) or nullptr
Tensor conv2d(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad,
              const std::string& label = "");

Tensor relu(Graph& g, const Tensor& x);

// Training mode normalizes with batch statistics and updates the running
// ones; eval mode is a fixed affine map of the running statistics.
Tensor batchnorm2d(Graph& g, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, bool training);

Tensor avgpool2d(Graph& g, const Tensor& x, int kernel = 2, int stride = 2);

Tensor add(Graph& g, const Tensor& a, const Tensor& b);

Tensor reduce_sum(Graph& g, const Tensor& x);

Tensor reshape(Graph& g, const Tensor& x, Shape shape);

// first `count` channels of an NCHW tensor, contiguous slice
Tensor slice_channels(Graph& g, const Tensor& x, int count);

// Mean over rows of CE(softmax(logits), onehot). logits: (N,C) or (C).
Tensor softmax_cross_entropy(Graph& g, const Tensor& logits, const Tensor& onehot);

// Mean over rows of -sum_c softmax(teacher)_c * log softmax(student)_c.
// The teacher tensor is treated as a constant; pass it detached.
Tensor soft_cross_entropy(Graph& g, const Tensor& student_logits, const Tensor& teacher_logits);

// row-wise softmax of a (N,C) or (C) value array (no graph participation)
std::vector<double> softmax_values(const std::vector<double>& logits, int classes);

}  // namespace mq
