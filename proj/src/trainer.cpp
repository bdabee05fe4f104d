#include "multiquant/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "multiquant/nn_ops.hpp"

namespace mq {

std::unique_ptr<QatModel> build_model(const ArchSpec& arch, const TrainConfig& cfg) {
  if (cfg.method == "multiquant") {
    auto plan = build_branch_plan(cfg.bits);
    SelectionMap map = cfg.strategy == "explicit"
                           ? build_selection_map(plan, cfg.explicit_map)
                           : build_selection_map(plan, strategy_from_string(cfg.strategy));
    return std::make_unique<MultiQuantModel>(arch, plan, map, cfg.seed);
  }
  if (cfg.method == "any-precision")
    return std::make_unique<SingleModel>(arch, cfg.bits, RoundMode::Nearest, cfg.seed,
                                         "any-precision");
  if (cfg.method == "adabit")
    return std::make_unique<SingleModel>(arch, cfg.bits, RoundMode::Floor, cfg.seed, "adabit");
  throw std::invalid_argument("unknown method '" + cfg.method + "'");
}

LossBundle loss_bundle(QatModel& model, Graph& g, const Batch& batch, bool distill) {
  auto candidates = model.candidates();
  if (candidates.empty()) throw std::invalid_argument("loss_bundle: empty candidate set");
  std::sort(candidates.begin(), candidates.end(), std::greater<>());

  LossBundle bundle;
  for (int bit : candidates) {
    model.set_bitwidth(bit);
    auto logits = model.forward(g, batch.images);
    auto ce = softmax_cross_entropy(g, logits, batch.onehot);
    bundle.visit_order.push_back(bit);
    bundle.ce[bit] = ce->v[0];
    bundle.kd[bit] = 0.0;

    Tensor per_bit = ce;
    if (bit == candidates.front()) {
      bundle.teacher_logits = detach(logits);
    } else if (distill) {
      auto kd = soft_cross_entropy(g, logits, bundle.teacher_logits);
      bundle.kd[bit] = kd->v[0];
      per_bit = add(g, ce, kd);
    }
    bundle.total = bundle.total ? add(g, bundle.total, per_bit) : per_bit;
  }
  return bundle;
}

StepMetrics train_step(QatModel& model, const Batch& batch, const TrainConfig& cfg,
                       SgdMomentum& weight_opt, Adam& quant_opt) {
  model.set_training(true);
  Graph g;
  const bool distill = cfg.distill && model.method() == "multiquant";
  auto bundle = loss_bundle(model, g, batch, distill);
  if (!std::isfinite(bundle.total->v[0]))
    throw TrainDivergence("nonfinite loss " + std::to_string(bundle.total->v[0]));
  g.backward(bundle.total);

  std::unordered_set<const TensorData*> weight_set;
  for (const auto& p : model.weight_params()) weight_set.insert(p.get());
  std::vector<Tensor> touched_weights, touched_quants;
  for (const auto& p : g.touched_params()) {
    (weight_set.count(p.get()) ? touched_weights : touched_quants).push_back(p);
  }
  weight_opt.step(touched_weights);
  quant_opt.step(touched_quants);
  for (const auto& p : g.touched_params()) p->zero_grad();
  g.clear();

  StepMetrics m;
  m.ce = bundle.ce;
  m.kd = bundle.kd;
  for (const auto& [bit, v] : bundle.ce) m.total += v;
  for (const auto& [bit, v] : bundle.kd) m.total += v;
  return m;
}

StepMetrics baseline_any_precision_step(SingleModel& model, const Batch& batch,
                                        const TrainConfig& cfg, SgdMomentum& weight_opt,
                                        Adam& quant_opt) {
  return train_step(model, batch, cfg, weight_opt, quant_opt);
}

StepMetrics baseline_adabit_step(SingleModel& model, const Batch& batch, const TrainConfig& cfg,
                                 SgdMomentum& weight_opt, Adam& quant_opt) {
  return train_step(model, batch, cfg, weight_opt, quant_opt);
}

namespace {

double scheduled_lr(const TrainConfig& cfg, int epoch) {
  if (cfg.lr_schedule == "cosine")
    return cfg.weight_lr * 0.5 * (1.0 + std::cos(M_PI * epoch / std::max(1, cfg.epochs)));
  // step decay at 50% and 75% of the run
  double lr = cfg.weight_lr;
  if (cfg.epochs > 0) {
    if (epoch >= cfg.epochs / 2) lr *= 0.1;
    if (epoch >= cfg.epochs * 3 / 4) lr *= 0.1;
  }
  return lr;
}

}  // namespace

TrainResult train(QatModel& model, const DatasetHandle& data, const TrainConfig& cfg,
                  const std::string& checkpoint_path) {
  TrainResult result;
  if (data.train.size() == 0) throw std::invalid_argument("train: empty training split");
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch size must be positive");

  Rng shuffle_rng = Rng(cfg.seed).fork(1);
  Rng augment_rng = Rng(cfg.seed).fork(2);
  SgdMomentum weight_opt(cfg.weight_lr, cfg.weight_momentum, cfg.weight_decay);
  Adam quant_opt(cfg.quant_lr);

  const auto evaluate_epoch = [&](int epoch) {
    for (int bit : model.candidates()) {
      HistoryRow row;
      row.epoch = epoch;
      row.bit = bit;
      row.is_eval = true;
      row.eval_acc = evaluate(model, data.test, bit, cfg.eval_subset);
      result.history.push_back(row);
    }
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    weight_opt.set_lr(scheduled_lr(cfg, epoch));
    auto order = shuffle_rng.permutation(data.train.size());
    const size_t steps = order.size() / cfg.batch_size;
    for (size_t step = 0; step < steps; ++step) {
      auto batch = make_batch(data.train, order, step * cfg.batch_size, cfg.batch_size);
      if (cfg.augment_flip || cfg.augment_crop)
        augment_batch(batch, augment_rng, cfg.augment_flip, cfg.augment_crop);
      StepMetrics metrics;
      try {
        metrics = train_step(model, batch, cfg, weight_opt, quant_opt);
      } catch (const std::runtime_error& e) {
        result.aborted = true;
        result.abort_reason = e.what();
        return result;  // the last epoch's checkpoint stays on disk
      }
      ++result.steps_run;
      for (int bit : model.candidates()) {
        HistoryRow row;
        row.epoch = epoch;
        row.step = static_cast<int>(step);
        row.bit = bit;
        row.loss_ce = metrics.ce[bit];
        row.loss_kd = metrics.kd[bit];
        result.history.push_back(row);
      }
    }
    if (data.test.size() > 0) evaluate_epoch(epoch);
    if (!checkpoint_path.empty()) save_model(model, checkpoint_path);
  }

  if (data.test.size() > 0) {
    double sum = 0.0;
    for (int bit : model.candidates()) {
      result.final_acc[bit] = evaluate(model, data.test, bit, 0);
      sum += result.final_acc[bit];
    }
    result.avg_acc = sum / static_cast<double>(model.candidates().size());
  }
  return result;
}

double evaluate(QatModel& model, const DatasetSplit& split, int bit, int64_t limit) {
  if (split.size() == 0) throw std::invalid_argument("evaluate: empty split");
  model.set_training(false);
  model.set_bitwidth(bit);
  const int64_t n = limit > 0 ? std::min<int64_t>(limit, split.size()) : split.size();
  std::vector<size_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = static_cast<size_t>(i);

  constexpr size_t kEvalBatch = 256;
  int64_t correct = 0;
  Graph g;
  for (size_t start = 0; start < static_cast<size_t>(n); start += kEvalBatch) {
    const size_t count = std::min(kEvalBatch, static_cast<size_t>(n) - start);
    auto batch = make_batch(split, order, start, count);
    auto logits = model.forward(g, batch.images);
    const int classes = split.classes;
    for (size_t i = 0; i < count; ++i) {
      const double* row = logits->v.data() + static_cast<int64_t>(i) * classes;
      int arg = 0;
      for (int c = 1; c < classes; ++c)
        if (row[c] > row[arg]) arg = c;
      correct += arg == batch.labels[i];
    }
    g.clear();
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

void save_model(const QatModel& model, const std::string& path) {
  if (const auto* mq_model = dynamic_cast<const MultiQuantModel*>(&model)) {
    save_checkpoint(*mq_model, path);
    return;
  }
  if (const auto* single = dynamic_cast<const SingleModel*>(&model)) {
    save_checkpoint(*single, path);
    return;
  }
  throw std::invalid_argument("save_model: unknown model type");
}

std::string history_csv_header() { return "epoch,step,bit,loss_ce,loss_kd,eval_acc"; }

std::string history_csv_row(const HistoryRow& row) {
  std::ostringstream os;
  os.precision(17);
  os << row.epoch << ',' << row.step << ',' << row.bit << ',';
  if (row.is_eval) {
    os << ",," << row.eval_acc;
  } else {
    os << row.loss_ce << ',' << row.loss_kd << ',';
  }
  return os.str();
}

}  // namespace mq
