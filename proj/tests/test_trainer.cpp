#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <unordered_set>

#include "multiquant/gradcheck.hpp"
#include "multiquant/nn_ops.hpp"
#include "multiquant/quantizer.hpp"
#include "multiquant/trainer.hpp"

using namespace mq;

namespace {

ArchSpec tiny_arch(int classes = 4) {
  ArchSpec a;
  a.in_channels = 1;
  a.in_h = 8;
  a.in_w = 8;
  a.stem_channels = 4;
  a.body = {{6, true}, {6, true}};
  a.classes = classes;
  return a;
}

TrainConfig tiny_cfg(std::vector<int> bits = {2, 4}) {
  TrainConfig cfg;
  cfg.bits = std::move(bits);
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.weight_lr = 0.05;
  cfg.eval_subset = 0;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST_CASE("single-candidate bundle has one CE term and no distillation") {
  auto cfg = tiny_cfg({8});
  auto model = build_model(tiny_arch(), cfg);
  auto data = make_synthetic(4, 8, 32, 3);
  std::vector<size_t> order(16);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto batch = make_batch(data.train, order, 0, 16);

  Graph g;
  auto bundle = loss_bundle(*model, g, batch, true);
  CHECK(bundle.visit_order == std::vector<int>{8});
  CHECK(bundle.ce.size() == 1);
  CHECK(bundle.kd.at(8) == 0.0);
  CHECK(bundle.total->v[0] == doctest::Approx(bundle.ce.at(8)));
}

TEST_CASE("uniform identical logits give KD = log(num classes)") {
  Graph g;
  auto student = zeros({1, 2}, true);
  auto teacher = zeros({1, 2});
  auto kd = soft_cross_entropy(g, student, teacher);
  CHECK(kd->v[0] == doctest::Approx(std::log(2.0)));
}

TEST_CASE("teacher logits are detached from the distillation gradient") {
  Graph g;
  auto x = tensor({1, 3}, {0.4, -0.2, 1.0});
  auto w = tensor({2, 3}, {0.3, -0.5, 0.2, 0.7, 0.1, -0.4}, true, "w");
  auto logits = linear(g, x, w, nullptr);
  auto teacher = detach(logits);  // in-place distillation: same parameters
  teacher->v[0] += 0.3;           // off the student so the gradient is nonzero
  auto kd = soft_cross_entropy(g, logits, teacher);
  g.backward(kd);
  auto autodiff = w->g;

  // finite differences with the teacher frozen reproduce autodiff
  auto frozen_fn = [&] {
    Graph g2;
    return soft_cross_entropy(g2, linear(g2, x, w, nullptr), teacher)->v[0];
  };
  auto res = finite_diff_check(frozen_fn, w, autodiff, 1e-6);
  CHECK(res.conclusive);
  CHECK(res.max_rel_err <= 1e-5);

  // perturbing the teacher changes the KD value, yet that path carries no
  // gradient (the graph rejects teacher tensors that want one)
  auto bumped = detach(teacher);
  bumped->v[0] += 0.05;
  Graph g3;
  CHECK(soft_cross_entropy(g3, linear(g3, x, w, nullptr), bumped)->v[0] != kd->v[0]);
  auto wants_grad = detach(teacher);
  wants_grad->requires_grad = true;
  Graph g4;
  CHECK_THROWS_AS(soft_cross_entropy(g4, linear(g4, x, w, nullptr), wants_grad),
                  std::invalid_argument);
}

TEST_CASE("bits are visited largest-first with the teacher ahead of students") {
  auto cfg = tiny_cfg({2, 4, 8});
  auto model = build_model(tiny_arch(), cfg);
  auto data = make_synthetic(4, 8, 32, 5);
  std::vector<size_t> order(8);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto batch = make_batch(data.train, order, 0, 8);

  Graph g;
  auto bundle = loss_bundle(*model, g, batch, true);
  CHECK(bundle.visit_order == std::vector<int>{8, 4, 2});
  CHECK(bundle.kd.at(8) == 0.0);
  CHECK(bundle.kd.at(4) > 0.0);
  CHECK(bundle.kd.at(2) > 0.0);
  REQUIRE(bundle.teacher_logits);
  CHECK_FALSE(bundle.teacher_logits->requires_grad);
}

TEST_CASE("one backward on the summed loss equals per-bit backwards summed") {
  auto cfg = tiny_cfg({2, 4});
  auto model = build_model(tiny_arch(), cfg);
  auto data = make_synthetic(4, 8, 32, 7);
  std::vector<size_t> order(16);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto batch = make_batch(data.train, order, 0, 16);

  // calibrate activation quantizers before comparing
  model->set_training(true);
  {
    Graph warm;
    (void)loss_bundle(*model, warm, batch, true);
    warm.clear();
  }

  auto params = model->weight_params();
  for (const auto& q : model->quant_params()) params.push_back(q);
  for (auto& p : params) p->zero_grad();

  Graph g;
  auto bundle = loss_bundle(*model, g, batch, true);
  g.backward(bundle.total);
  std::vector<std::vector<double>> combined;
  for (auto& p : params) combined.push_back(p->g);
  for (auto& p : params) p->zero_grad();
  g.clear();

  // per-bit losses, separate graphs, grads accumulating on the leaves
  for (int bit : bundle.visit_order) {
    Graph gi;
    model->set_bitwidth(bit);
    auto logits = model->forward(gi, batch.images);
    auto loss = softmax_cross_entropy(gi, logits, batch.onehot);
    if (bit != bundle.visit_order.front())
      loss = add(gi, loss, soft_cross_entropy(gi, logits, bundle.teacher_logits));
    gi.backward(loss);
    gi.clear();
  }
  for (size_t i = 0; i < params.size(); ++i) {
    double max_abs = 0.0;
    for (size_t j = 0; j < params[i]->g.size(); ++j)
      max_abs = std::max(max_abs, std::fabs(params[i]->g[j] - combined[i][j]));
    INFO("param ", params[i]->name);
    CHECK(max_abs <= 1e-10);
  }
}

TEST_CASE("zero learning rates leave every parameter untouched") {
  auto cfg = tiny_cfg({2, 4});
  cfg.weight_lr = 0.0;
  cfg.quant_lr = 0.0;
  auto model = build_model(tiny_arch(), cfg);
  auto data = make_synthetic(4, 8, 32, 9);
  std::vector<size_t> order(16);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto batch = make_batch(data.train, order, 0, 16);

  model->set_training(true);
  {
    Graph warm;
    (void)loss_bundle(*model, warm, batch, true);  // calibration is a one-time move
    warm.clear();
  }

  auto params = model->weight_params();
  for (const auto& q : model->quant_params()) params.push_back(q);
  std::vector<std::vector<double>> before;
  for (auto& p : params) before.push_back(p->v);

  SgdMomentum wopt(cfg.weight_lr, cfg.weight_momentum, cfg.weight_decay);
  Adam qopt(cfg.quant_lr);
  auto metrics = train_step(*model, batch, cfg, wopt, qopt);
  CHECK(metrics.total > 0.0);
  for (size_t i = 0; i < params.size(); ++i) CHECK(params[i]->v == before[i]);
}

TEST_CASE("one step on a separable two-point set lowers the loss") {
  auto cfg = tiny_cfg({2, 4});
  cfg.weight_lr = 0.02;
  auto model = build_model(tiny_arch(2), cfg);
  auto data = make_synthetic(2, 8, 2, 13);
  std::vector<size_t> order{0, 1};
  auto batch = make_batch(data.train, order, 0, 2);

  model->set_training(true);
  SgdMomentum wopt(cfg.weight_lr, cfg.weight_momentum, 0.0);
  Adam qopt(cfg.quant_lr);
  auto first = train_step(*model, batch, cfg, wopt, qopt);
  auto second = train_step(*model, batch, cfg, wopt, qopt);
  CHECK(second.total < first.total);
}

TEST_CASE("non-selected branch/bit state banks stay untouched") {
  auto cfg = tiny_cfg({2, 4});
  auto model_ptr = build_model(tiny_arch(), cfg);
  auto& model = dynamic_cast<MultiQuantModel&>(*model_ptr);
  // amortized on {2,4}: P(2)={1}, P(4)={1,2}; branch 2 never runs at 2 bits
  REQUIRE(model.selection().at(2) == std::vector<int>{1});

  auto data = make_synthetic(4, 8, 32, 15);
  std::vector<size_t> order(16);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto batch = make_batch(data.train, order, 0, 16);

  auto& untouched_block = model.branch(2).blocks[0];
  const auto gamma_before = untouched_block.bn_gamma.at(2)->v;
  const auto beta_before = untouched_block.bn_beta.at(2)->v;
  const auto mean_before = untouched_block.bn_state.at(2).running_mean;
  const auto aq_l_before = untouched_block.act_q.at(2).l();
  const bool aq_init_before = untouched_block.act_q.at(2).initialized;

  SgdMomentum wopt(cfg.weight_lr, cfg.weight_momentum, cfg.weight_decay);
  Adam qopt(cfg.quant_lr);
  (void)train_step(*model_ptr, batch, cfg, wopt, qopt);

  CHECK(untouched_block.bn_gamma.at(2)->v == gamma_before);
  CHECK(untouched_block.bn_beta.at(2)->v == beta_before);
  CHECK(untouched_block.bn_state.at(2).running_mean == mean_before);
  CHECK(untouched_block.act_q.at(2).l() == aq_l_before);
  CHECK(untouched_block.act_q.at(2).initialized == aq_init_before);

  // while the selected (branch 1, bit 2) bank moved
  CHECK(model.branch(1).blocks[0].act_q.at(2).initialized);
}

TEST_CASE("weight and quantizer parameter sets partition the trainables") {
  auto cfg = tiny_cfg({2, 3, 4});
  auto model = build_model(tiny_arch(), cfg);
  auto weights = model->weight_params();
  auto quants = model->quant_params();

  std::unordered_set<const TensorData*> wset, qset;
  for (const auto& p : weights) {
    CHECK(p->requires_grad);
    CHECK(wset.insert(p.get()).second);  // no duplicates
  }
  for (const auto& p : quants) {
    CHECK(p->requires_grad);
    CHECK(qset.insert(p.get()).second);
    CHECK_FALSE(wset.count(p.get()));  // disjoint
  }

  // exhaustive: every trainable leaf a full bundle touches is in some set
  auto data = make_synthetic(4, 8, 16, 17);
  std::vector<size_t> order(8);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto batch = make_batch(data.train, order, 0, 8);
  Graph g;
  (void)loss_bundle(*model, g, batch, true);
  for (const auto& p : g.touched_params()) {
    CHECK((wset.count(p.get()) || qset.count(p.get())));
  }
}

TEST_CASE("training is bitwise reproducible under a fixed seed") {
  auto cfg = tiny_cfg({2, 4});
  cfg.epochs = 2;
  auto data = make_synthetic(4, 8, 64, 19);

  auto run = [&] {
    auto model = build_model(tiny_arch(), cfg);
    return train(*model, data, cfg);
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].loss_ce == b.history[i].loss_ce);
    CHECK(a.history[i].loss_kd == b.history[i].loss_kd);
    CHECK(a.history[i].eval_acc == b.history[i].eval_acc);
  }
  CHECK(a.final_acc == b.final_acc);
}

TEST_CASE("zero epochs returns the model unchanged") {
  auto cfg = tiny_cfg({2, 4});
  cfg.epochs = 0;
  auto model = build_model(tiny_arch(), cfg);
  auto& mq_model = dynamic_cast<MultiQuantModel&>(*model);
  const auto stem_before = mq_model.stem_weight->v;
  auto data = make_synthetic(4, 8, 32, 21);
  auto result = train(*model, data, cfg);
  CHECK(result.steps_run == 0);
  CHECK(mq_model.stem_weight->v == stem_before);
  CHECK_FALSE(result.aborted);
}

TEST_CASE("evaluate") {
  auto cfg = tiny_cfg({2, 4});
  auto model = build_model(tiny_arch(), cfg);
  auto& mq_model = dynamic_cast<MultiQuantModel&>(*model);
  auto data = make_synthetic(4, 8, 64, 23);

  SUBCASE("a constant classifier scores the majority-class rate") {
    std::fill(mq_model.head_weight->v.begin(), mq_model.head_weight->v.end(), 0.0);
    std::fill(mq_model.head_bias->v.begin(), mq_model.head_bias->v.end(), 0.0);
    int count0 = 0;
    for (int l : data.test.labels) count0 += l == 0;
    const double acc = evaluate(*model, data.test, 4);
    CHECK(acc == doctest::Approx(static_cast<double>(count0) / data.test.size()));
  }

  SUBCASE("repeat calls agree bitwise") {
    const double a = evaluate(*model, data.test, 4);
    const double b = evaluate(*model, data.test, 4);
    CHECK(a == b);
  }

  SUBCASE("rejects a non-candidate bit") {
    CHECK_THROWS_AS(evaluate(*model, data.test, 5), std::invalid_argument);
  }

  SUBCASE("the average row is the arithmetic mean of per-bit rows") {
    cfg.epochs = 1;
    auto result = train(*model, data, cfg);
    double mean = 0.0;
    for (auto& [bit, acc] : result.final_acc) mean += acc;
    mean /= static_cast<double>(result.final_acc.size());
    CHECK(result.avg_acc == doctest::Approx(mean));
  }
}

TEST_CASE("any-precision baseline") {
  auto cfg = tiny_cfg({8});
  cfg.method = "any-precision";
  auto model = build_model(tiny_arch(), cfg);
  auto& single = dynamic_cast<SingleModel&>(*model);
  auto data = make_synthetic(4, 8, 32, 25);
  std::vector<size_t> order(16);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto batch = make_batch(data.train, order, 0, 16);

  SUBCASE("single candidate reduces to plain QAT, no KD") {
    SgdMomentum wopt(cfg.weight_lr, cfg.weight_momentum, cfg.weight_decay);
    Adam qopt(cfg.quant_lr);
    auto metrics = baseline_any_precision_step(single, batch, cfg, wopt, qopt);
    CHECK(metrics.kd.at(8) == 0.0);
    CHECK(std::isfinite(metrics.total));
  }

  SUBCASE("the weight-bit register switches across the joint loop") {
    auto cfg2 = tiny_cfg({4, 8});
    cfg2.method = "any-precision";
    auto m2 = build_model(tiny_arch(), cfg2);
    std::vector<int> seen;
    for (int bit : {8, 4}) {  // the bundle's visit order
      m2->set_bitwidth(bit);
      seen.push_back(m2->active_weight_bits());
    }
    CHECK(seen == std::vector<int>{8, 4});

    // MultiQuant under the same drill never leaves 2
    auto cfg3 = tiny_cfg({4, 8});
    auto m3 = build_model(tiny_arch(), cfg3);
    for (int bit : {8, 4}) {
      m3->set_bitwidth(bit);
      CHECK(m3->active_weight_bits() == 2);
    }
  }

  SUBCASE("body stores full precision bytes") {
    auto rep = storage_report(single);
    CHECK(rep.body_payload_bytes == static_cast<size_t>(single.body_weight_count()) * 4);
  }
}

TEST_CASE("adabit baseline") {
  SUBCASE("floor vs nearest codes on the worked example") {
    auto pn = make_quantizer(0.0, 1.0, 2, QuantRole::Activation, RoundMode::Nearest);
    auto pf = make_quantizer(0.0, 1.0, 2, QuantRole::Activation, RoundMode::Floor);
    CHECK(quantize({0.6}, pf)[0] == 1);
    CHECK(quantize({0.6}, pn)[0] == 2);
  }

  SUBCASE("floor rounding drags the dequantized mean down on symmetric weights") {
    Rng rng(27);
    auto sample = rng.normal_vector(20000);
    auto pn = make_quantizer(-3.0, 3.0, 4, QuantRole::Weight, RoundMode::Nearest);
    auto pf = make_quantizer(-3.0, 3.0, 4, QuantRole::Weight, RoundMode::Floor);
    auto qn = fake_quantize_values(sample, pn);
    auto qf = fake_quantize_values(sample, pf);
    double mn = 0.0, mf = 0.0;
    for (size_t i = 0; i < sample.size(); ++i) {
      mn += qn[i];
      mf += qf[i];
    }
    CHECK(mf / sample.size() < mn / sample.size());
  }

  SUBCASE("trains without crashing on a synthetic task") {
    auto cfg = tiny_cfg({8});
    cfg.method = "adabit";
    cfg.epochs = 2;
    auto model = build_model(tiny_arch(), cfg);
    auto data = make_synthetic(4, 8, 64, 29);
    auto result = train(*model, data, cfg);
    CHECK_FALSE(result.aborted);
    CHECK(result.steps_run > 0);
    for (auto& [bit, acc] : result.final_acc) CHECK(acc >= 0.0);
  }
}

TEST_CASE("divergence aborts the run and keeps the last checkpoint") {
  auto cfg = tiny_cfg({2, 4});
  cfg.epochs = 4;
  cfg.weight_lr = 1e300;  // guaranteed overflow
  cfg.lr_schedule = "cosine";
  auto model = build_model(tiny_arch(), cfg);
  auto data = make_synthetic(4, 8, 32, 31);
  const std::string path = "trainer_abort_ck.mqck";
  auto result = train(*model, data, cfg, path);
  CHECK(result.aborted);
  CHECK_FALSE(result.abort_reason.empty());
  // the run saved at least nothing or a prior epoch; if a file exists it must load
  if (std::filesystem::exists(path)) {
    CHECK_NOTHROW(load_checkpoint(path));
    std::remove(path.c_str());
  }
}

TEST_CASE("history csv rows carry the fixed header shape") {
  CHECK(history_csv_header() == "epoch,step,bit,loss_ce,loss_kd,eval_acc");
  HistoryRow step_row;
  step_row.epoch = 1;
  step_row.step = 3;
  step_row.bit = 4;
  step_row.loss_ce = 0.5;
  step_row.loss_kd = 0.25;
  CHECK(history_csv_row(step_row) == "1,3,4,0.5,0.25,");
  HistoryRow eval_row;
  eval_row.epoch = 1;
  eval_row.bit = 4;
  eval_row.is_eval = true;
  eval_row.eval_acc = 0.75;
  CHECK(history_csv_row(eval_row) == "1,-1,4,,,0.75");
}
