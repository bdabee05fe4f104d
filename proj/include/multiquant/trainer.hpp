#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "multiquant/dataset.hpp"
#include "multiquant/optim.hpp"
#include "multiquant/topology.hpp"

namespace mq {

struct TrainConfig {
  std::string method = "multiquant";  // multiquant | any-precision | adabit
  std::vector<int> bits{2, 4, 8};
  std::string strategy = "amortized";  // serial | amortized | explicit
  std::map<int, std::vector<int>> explicit_map;
  bool distill = true;
  int epochs = 10;
  int batch_size = 128;
  double weight_lr = 0.1;
  double weight_momentum = 0.9;
  double weight_decay = 1e-4;
  double quant_lr = 1e-4;  // Adam on the clipping bounds, no decay
  std::string lr_schedule = "step";  // step (x0.1 at 50%/75%) | cosine
  uint64_t seed = 1;
  int64_t eval_subset = 2000;  // per-epoch eval sample cap; 0 = full test set
  bool augment_flip = false;
  bool augment_crop = false;
};

// a step diverged (nonfinite loss); the last saved checkpoint stays valid
struct TrainDivergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::unique_ptr<QatModel> build_model(const ArchSpec& arch, const TrainConfig& cfg);

// Per-bit losses of one batch. Bits are visited largest-first; the largest
// width's logits are cached, detached, and feed every smaller width's
// distillation term (soft cross entropy, temperature 1, unit weight).
struct LossBundle {
  std::vector<int> visit_order;   // descending bit-widths
  std::map<int, double> ce;
  std::map<int, double> kd;       // absent bits carried as 0
  Tensor total;                   // graph scalar: sum of per-bit losses
  Tensor teacher_logits;          // detached values of the largest width
};

LossBundle loss_bundle(QatModel& model, Graph& g, const Batch& batch, bool distill);

struct StepMetrics {
  std::map<int, double> ce;
  std::map<int, double> kd;
  double total = 0.0;
};

// One loss bundle, one backward, then the optimizer split: SGD-momentum on
// weights, Adam on clipping bounds; only parameters the step's graphs
// actually consumed are updated.
StepMetrics train_step(QatModel& model, const Batch& batch, const TrainConfig& cfg,
                       SgdMomentum& weight_opt, Adam& quant_opt);

// Baselines share the joint loop with distillation off; the models differ
// (bit-switching single body; floor-rounded weights for AdaBit).
StepMetrics baseline_any_precision_step(SingleModel& model, const Batch& batch,
                                        const TrainConfig& cfg, SgdMomentum& weight_opt,
                                        Adam& quant_opt);
StepMetrics baseline_adabit_step(SingleModel& model, const Batch& batch, const TrainConfig& cfg,
                                 SgdMomentum& weight_opt, Adam& quant_opt);

struct HistoryRow {
  int epoch = 0;
  int step = -1;  // -1 on evaluation rows
  int bit = 0;
  double loss_ce = 0.0;
  double loss_kd = 0.0;
  double eval_acc = 0.0;
  bool is_eval = false;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  std::map<int, double> final_acc;  // full test set, per candidate
  double avg_acc = 0.0;
  int64_t steps_run = 0;
  bool aborted = false;
  std::string abort_reason;
};

// Alg.-1 style joint training: per epoch a seeded shuffle, per step one
// bundle over all candidates. Writes a checkpoint after each epoch when
// checkpoint_path is set; a divergence abort keeps the last epoch's file.
TrainResult train(QatModel& model, const DatasetHandle& data, const TrainConfig& cfg,
                  const std::string& checkpoint_path = "");

// top-1 accuracy at one bit-width, eval mode, side-effect free
double evaluate(QatModel& model, const DatasetSplit& split, int bit, int64_t limit = 0);

void save_model(const QatModel& model, const std::string& path);

std::string history_csv_header();
std::string history_csv_row(const HistoryRow& row);

}  // namespace mq
