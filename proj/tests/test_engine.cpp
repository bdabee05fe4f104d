#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "multiquant/gradcheck.hpp"
#include "multiquant/graph.hpp"
#include "multiquant/nn_ops.hpp"
#include "multiquant/optim.hpp"
#include "multiquant/rng.hpp"
#include "multiquant/tensor.hpp"

using namespace mq;

TEST_CASE("linear with identity weight passes input through") {
  Graph g;
  auto x = tensor({1, 2}, {1.0, 2.0});
  auto w = tensor({2, 2}, {1.0, 0.0, 0.0, 1.0});
  auto out = linear(g, x, w, nullptr);
  CHECK(out->v[0] == 1.0);
  CHECK(out->v[1] == 2.0);
}

TEST_CASE("relu clamps negatives") {
  Graph g;
  auto out = relu(g, tensor({3}, {-1.0, 0.0, 2.0}));
  CHECK(out->v == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("1x1 conv kernel acts as a scalar multiply") {
  Graph g;
  std::vector<double> img(9);
  for (int i = 0; i < 9; ++i) img[i] = i + 1;
  auto x = tensor({1, 1, 3, 3}, img);
  auto w = tensor({1, 1, 1, 1}, {2.0});
  auto out = conv2d(g, x, w, nullptr, 1, 0);
  REQUIRE(out->shape == Shape{1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) CHECK(out->v[i] == doctest::Approx(2.0 * (i + 1)));
}

TEST_CASE("conv2d rejects channel mismatch naming the node") {
  Graph g;
  auto x = tensor({1, 2, 3, 3}, std::vector<double>(18, 0.0));
  auto w = tensor({1, 1, 1, 1}, {1.0});
  CHECK_THROWS_WITH_AS(conv2d(g, x, w, nullptr, 1, 0, "body.conv0"),
                       doctest::Contains("body.conv0"), std::invalid_argument);
}

TEST_CASE("backward of sum yields ones") {
  Graph g;
  auto x = tensor({3}, {5.0, -2.0, 7.0}, true);
  auto loss = reduce_sum(g, x);
  g.backward(loss);
  CHECK(x->g == std::vector<double>{1.0, 1.0, 1.0});
}

TEST_CASE("relu subgradient is zero on the negative side") {
  Graph g;
  auto x = tensor({2}, {-1.0, 2.0}, true);
  auto loss = reduce_sum(g, relu(g, x));
  g.backward(loss);
  CHECK(x->g == std::vector<double>{0.0, 1.0});
}

TEST_CASE("softmax-cross-entropy gradient equals softmax minus one-hot") {
  Graph g;
  auto z = tensor({2}, {0.0, 0.0}, true);
  auto y = tensor({2}, {1.0, 0.0});
  auto loss = softmax_cross_entropy(g, z, y);
  CHECK(loss->v[0] == doctest::Approx(std::log(2.0)));
  g.backward(loss);
  CHECK(z->g[0] == doctest::Approx(-0.5));
  CHECK(z->g[1] == doctest::Approx(0.5));

  // cross-check against central differences
  auto loss_fn = [&] {
    Graph g2;
    return softmax_cross_entropy(g2, z, y)->v[0];
  };
  auto res = finite_diff_check(loss_fn, z, z->g, 1e-6);
  CHECK(res.conclusive);
  CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("backward before forward is rejected") {
  Graph g;
  auto x = scalar_tensor(1.0, true);
  CHECK_THROWS_AS(g.backward(x), std::runtime_error);
}

TEST_CASE("grad accumulates across backward passes until zeroed") {
  Graph g;
  auto x = tensor({2}, {1.0, 2.0}, true);
  auto loss = reduce_sum(g, x);
  g.backward(loss);
  g.backward(loss);
  CHECK(x->g == std::vector<double>{2.0, 2.0});
  x->zero_grad();
  CHECK(x->g == std::vector<double>{0.0, 0.0});
}

TEST_CASE("sgd momentum steps") {
  SUBCASE("plain gradient step") {
    auto p = scalar_tensor(1.0, true);
    p->g[0] = 1.0;
    SgdMomentum opt(0.1, 0.0, 0.0);
    opt.step({p});
    CHECK(p->v[0] == doctest::Approx(0.9));
  }
  SUBCASE("momentum carries prior velocity") {
    auto p = scalar_tensor(1.0, true);
    SgdMomentum opt(0.1, 0.9, 0.0);
    p->g[0] = 1.0;  // builds v=1
    opt.step({p});
    CHECK(p->v[0] == doctest::Approx(0.9));
    p->g[0] = 1.0;  // v = 0.9*1 + 1 = 1.9
    opt.step({p});
    CHECK(p->v[0] == doctest::Approx(0.9 - 0.19));  // 0.71... from theta=0.9
  }
  SUBCASE("zero gradient with zero velocity is stationary") {
    auto p = scalar_tensor(3.0, true);
    SgdMomentum opt(0.1, 0.9, 0.0);
    opt.step({p});
    CHECK(p->v[0] == 3.0);
  }
}

TEST_CASE("sgd momentum one-step hand trace from the update rule") {
  // theta=1, g=1, mu=0.9, prior v=1: v=1.9, theta = 1 - 0.19 = 0.81
  auto p = scalar_tensor(1.0, true);
  SgdMomentum opt(0.1, 0.9, 0.0);
  // seed the velocity buffer with a first unit-gradient step scaled to land v=1
  p->g[0] = 1.0;
  opt.step({p});  // v=1, theta=0.9
  p->v[0] = 1.0;  // reset theta per the worked example, keep v
  p->g[0] = 1.0;
  opt.step({p});
  CHECK(p->v[0] == doctest::Approx(0.81));
}

TEST_CASE("adam steps") {
  SUBCASE("zero gradient leaves params unchanged") {
    auto p = tensor({3}, {1.0, -2.0, 0.5}, true);
    Adam opt(0.1);
    opt.step({p});
    CHECK(p->v == std::vector<double>{1.0, -2.0, 0.5});
  }
  SUBCASE("first step magnitude is about lr") {
    auto p = scalar_tensor(0.0, true);
    Adam opt(0.1);
    p->g[0] = 1.0;
    opt.step({p});
    CHECK(p->v[0] == doctest::Approx(-0.1).epsilon(1e-6));
  }
  SUBCASE("second identical gradient also moves about lr") {
    auto p = scalar_tensor(0.0, true);
    Adam opt(0.1);
    p->g[0] = 1.0;
    opt.step({p});
    const double after_one = p->v[0];
    p->g[0] = 1.0;
    opt.step({p});
    CHECK(std::fabs(p->v[0] - after_one) == doctest::Approx(0.1).epsilon(1e-4));
  }
  SUBCASE("nonfinite gradient aborts with the parameter named") {
    auto p = scalar_tensor(0.0, true, "theta");
    p->g[0] = std::nan("");
    Adam opt(0.1);
    CHECK_THROWS_WITH_AS(opt.step({p}), doctest::Contains("theta"), std::runtime_error);
  }
}

TEST_CASE("finite differences agree on a smooth linear+CE graph") {
  Rng rng(7);
  auto x = tensor({4, 6}, rng.normal_vector(24));
  auto w = tensor({3, 6}, rng.normal_vector(18, 0.0, 0.5), true, "w");
  auto b = tensor({3}, rng.normal_vector(3, 0.0, 0.1), true, "b");
  std::vector<double> onehot(12, 0.0);
  for (int i = 0; i < 4; ++i) onehot[i * 3 + i % 3] = 1.0;
  auto y = tensor({4, 3}, onehot);

  Graph g;
  auto loss = softmax_cross_entropy(g, linear(g, x, w, b), y);
  g.backward(loss);

  auto loss_fn = [&] {
    Graph g2;
    return softmax_cross_entropy(g2, linear(g2, x, w, b), y)->v[0];
  };
  for (const auto& p : {w, b}) {
    auto res = finite_diff_check(loss_fn, p, p->g, 1e-5);
    CHECK(res.conclusive);
    CHECK(res.max_rel_err <= 1e-4);
  }
}

TEST_CASE("finite differences agree on a conv+bn+pool+CE graph") {
  Rng rng(11);
  auto x = tensor({2, 1, 6, 6}, rng.normal_vector(72));
  auto w = tensor({2, 1, 3, 3}, rng.normal_vector(18, 0.0, 0.5), true, "conv.w");
  auto gamma = tensor({2}, {1.0, 1.2}, true, "bn.gamma");
  auto beta = tensor({2}, {0.0, -0.1}, true, "bn.beta");
  auto fcw = tensor({2, 18}, rng.normal_vector(36, 0.0, 0.3), true, "fc.w");
  auto y = tensor({2, 2}, {1.0, 0.0, 0.0, 1.0});
  BatchNormState bn(2);

  auto build = [&](Graph& g) {
    auto h = conv2d(g, x, w, nullptr, 1, 1);
    h = batchnorm2d(g, h, gamma, beta, bn, true);
    h = relu(g, h);
    h = avgpool2d(g, h);
    h = reshape(g, h, {2, 18});
    return softmax_cross_entropy(g, linear(g, h, fcw, nullptr), y);
  };

  Graph g;
  auto loss = build(g);
  g.backward(loss);

  auto loss_fn = [&] {
    Graph g2;
    return build(g2)->v[0];
  };
  for (const auto& p : {w, gamma, beta, fcw}) {
    auto res = finite_diff_check(loss_fn, p, p->g, 1e-5);
    CHECK(res.conclusive);
    CHECK(res.max_rel_err <= 1e-4);
  }
}

TEST_CASE("constant loss has zero gradient both ways") {
  auto x = tensor({2}, {1.0, 2.0}, true);
  auto y = tensor({2}, {3.0, 4.0});
  Graph g;
  auto loss = reduce_sum(g, y);  // does not depend on x
  CHECK_THROWS(g.backward(x));   // x was never produced here
  g.backward(loss);
  CHECK(x->g == std::vector<double>{0.0, 0.0});
  auto res = finite_diff_check([&] { return loss->v[0]; }, x, x->g, 1e-5);
  CHECK(res.conclusive);
  CHECK(res.max_rel_err == 0.0);
}

TEST_CASE("forward is deterministic bit for bit") {
  Rng rng(3);
  auto x = tensor({2, 1, 8, 8}, rng.normal_vector(128));
  auto w = tensor({4, 1, 3, 3}, rng.normal_vector(36));
  Graph g1, g2;
  auto a = conv2d(g1, x, w, nullptr, 1, 1);
  auto b = conv2d(g2, x, w, nullptr, 1, 1);
  CHECK(a->v == b->v);
}

TEST_CASE("softmax-cross-entropy is nonnegative and log(C) on uniform logits") {
  Graph g;
  const int classes = 10;
  auto z = zeros({classes});
  std::vector<double> onehot(classes, 0.0);
  onehot[4] = 1.0;
  auto loss = softmax_cross_entropy(g, z, tensor({classes}, onehot));
  CHECK(loss->v[0] == doctest::Approx(std::log(static_cast<double>(classes))));

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g2;
    auto zr = tensor({classes}, rng.normal_vector(classes, 0.0, 3.0));
    std::vector<double> oh(classes, 0.0);
    oh[rng.uniform_index(classes)] = 1.0;
    CHECK(softmax_cross_entropy(g2, zr, tensor({classes}, oh))->v[0] >= 0.0);
  }
}

TEST_CASE("batchnorm normalizes per channel in training and is affine in eval") {
  Rng rng(9);
  auto x = tensor({4, 3, 5, 5}, rng.normal_vector(300, 2.0, 3.0));
  auto gamma = tensor({3}, {1.0, 1.0, 1.0}, true);
  auto beta = tensor({3}, {0.0, 0.0, 0.0}, true);
  BatchNormState state(3);

  Graph g;
  auto out = batchnorm2d(g, x, gamma, beta, state, true);
  const int64_t per_channel = 4 * 5 * 5;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) mean += out->v[(n * 3 + c) * 25 + i];
    mean /= per_channel;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        const double d = out->v[(n * 3 + c) * 25 + i] - mean;
        var += d * d;
      }
    var /= per_channel;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }

  // eval mode: y = gamma*(x - rm)/sqrt(rv+eps) + beta elementwise
  Graph ge;
  auto eval_out = batchnorm2d(ge, x, gamma, beta, state, false);
  for (int n = 0; n < 4; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 25; ++i) {
        const double expect = (x->v[(n * 3 + c) * 25 + i] - state.running_mean[c]) /
                              std::sqrt(state.running_var[c] + state.eps);
        CHECK(eval_out->v[(n * 3 + c) * 25 + i] == doctest::Approx(expect));
      }
}
