#pragma once

#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "multiquant/graph.hpp"
#include "multiquant/nn_ops.hpp"
#include "multiquant/quantizer.hpp"
#include "multiquant/tensor.hpp"

namespace mq {

// Branch identifiers: full branches are 1..n; the half branch sorts last.
inline constexpr int kHalfBranch = std::numeric_limits<int>::max();
std::string branch_id_str(int id);

struct BranchPlan {
  std::vector<int> bit_candidates;  // sorted ascending
  int n_full_branches = 0;          // floor(max(b)/2)
  bool has_half_branch = false;     // iff any candidate is odd

  double width_factor(int branch_id) const { return branch_id == kHalfBranch ? 0.5 : 1.0; }
};

BranchPlan build_branch_plan(const std::vector<int>& bits);

enum class SelectionStrategy { Serial, Amortized, Explicit };
SelectionStrategy strategy_from_string(const std::string& s);
std::string strategy_to_string(SelectionStrategy s);

struct SelectionMap {
  // per candidate bit: selected branch ids, full branches ascending, half last
  std::map<int, std::vector<int>> selected;
  SelectionStrategy strategy = SelectionStrategy::Amortized;

  const std::vector<int>& at(int bit) const;
};

SelectionMap build_selection_map(const BranchPlan& plan, SelectionStrategy strategy);
// user-supplied map validated against the |P(b)| invariants
SelectionMap build_selection_map(const BranchPlan& plan,
                                 const std::map<int, std::vector<int>>& explicit_map);

// times each branch appears across the candidate bits
std::map<int, int> branch_usage(const BranchPlan& plan, const SelectionMap& map);

// ---------------------------------------------------------------------------

struct ConvBlockSpec {
  int out_channels = 32;
  bool pool = true;  // 2x2 average pool after the activation
};

struct ArchSpec {
  int in_channels = 1;
  int in_h = 28;
  int in_w = 28;
  int stem_channels = 16;  // Conv1 output, full precision
  int stem_stride = 2;     // desk-scale default downsamples at the stem
  std::vector<ConvBlockSpec> body{{32, true}, {32, true}};
  int classes = 10;

  uint64_t hash() const;
  int stem_out_h() const;
  int stem_out_w() const;
  int body_out_h() const;
  int body_out_w() const;
  int head_in_features() const;
  // MACs of one full-width body copy (the Table-1 unit)
  int64_t body_macs() const;
};

ArchSpec default_arch();

// One quantized conv block: latent shadow weights fake-quantized every
// forward, per-bit activation quantizers and batch-norm banks.
struct QuantizedConvBlock {
  Tensor weight;  // (F,C,3,3), latent full precision
  QuantizerParams weight_q;
  std::map<int, QuantizerParams> act_q;
  std::map<int, Tensor> bn_gamma;
  std::map<int, Tensor> bn_beta;
  std::map<int, BatchNormState> bn_state;
  bool pool = true;
  int in_channels = 0;
  int out_channels = 0;
};

struct Branch {
  std::vector<QuantizedConvBlock> blocks;
  bool is_half = false;
  int in_channels = 0;  // stem channels, or the half slice
};

// Common surface the trainer drives for MultiQuant and the baselines.
class QatModel {
 public:
  virtual ~QatModel() = default;
  virtual const std::vector<int>& candidates() const = 0;
  virtual void set_bitwidth(int b) = 0;
  virtual int active_bitwidth() const = 0;
  virtual Tensor forward(Graph& g, const Tensor& images) = 0;
  virtual std::vector<Tensor> weight_params() = 0;
  virtual std::vector<Tensor> quant_params() = 0;
  virtual void set_training(bool training) = 0;
  virtual bool training() const = 0;
  // bit-width of the weight quantizers the active configuration runs with
  virtual int active_weight_bits() const = 0;
  virtual std::string method() const = 0;
};

// Shared full-precision stem and head, n (+half) 2-bit branches, composed
// per the selection map: output_b = FC(sum_{j in P(b)} branch_j(Conv1(I))).
class MultiQuantModel : public QatModel {
 public:
  MultiQuantModel(ArchSpec arch, BranchPlan plan, SelectionMap map, uint64_t seed);

  const std::vector<int>& candidates() const override { return plan_.bit_candidates; }
  void set_bitwidth(int b) override;
  int active_bitwidth() const override { return active_bit_; }
  Tensor forward(Graph& g, const Tensor& images) override;
  std::vector<Tensor> weight_params() override;
  std::vector<Tensor> quant_params() override;
  void set_training(bool training) override { training_ = training; }
  bool training() const override { return training_; }
  int active_weight_bits() const override { return 2; }  // never switches
  std::string method() const override { return "multiquant"; }

  // pieces exposed for the decomposed structural oracle
  Tensor stem_forward(Graph& g, const Tensor& images);
  Tensor branch_forward(Graph& g, const Tensor& stem_out, int branch_id, int bit);
  Tensor head_forward(Graph& g, const Tensor& summed);

  const ArchSpec& arch() const { return arch_; }
  const BranchPlan& plan() const { return plan_; }
  const SelectionMap& selection() const { return map_; }
  const std::vector<int>& active_selection() const;

  Branch& branch(int branch_id);
  const Branch& branch(int branch_id) const;
  std::vector<int> all_branch_ids() const;
  // every weight-quantizer bit-width in the model (fixity audit)
  std::set<int> branch_weight_bits() const;
  int64_t body_weight_count(int branch_id) const;

  // shared full-precision stem: conv -> BN -> relu (BN stays unquantized
  // and does not switch; the stem output feeds every branch alike)
  Tensor stem_weight, stem_bias, stem_bn_gamma, stem_bn_beta;
  BatchNormState stem_bn_state;
  Tensor head_weight, head_bias;

 private:
  ArchSpec arch_;
  BranchPlan plan_;
  SelectionMap map_;
  std::vector<Branch> full_branches_;
  std::optional<Branch> half_branch_;
  int active_bit_ = 0;
  bool training_ = true;
};

// Baseline block: both the weight and activation quantizers are per-bit
// banks; switching the model's bit-width swaps which bank runs.
struct SwitchableConvBlock {
  Tensor weight;
  std::map<int, QuantizerParams> weight_q;
  std::map<int, QuantizerParams> act_q;
  std::map<int, Tensor> bn_gamma;
  std::map<int, Tensor> bn_beta;
  std::map<int, BatchNormState> bn_state;
  bool pool = true;
  int in_channels = 0;
  int out_channels = 0;
};

// Single-body baseline: weight AND activation quantizers switch with the
// active bit, switchable batch norm per bit (Any-Precision / AdaBit).
class SingleModel : public QatModel {
 public:
  SingleModel(ArchSpec arch, std::vector<int> bits, RoundMode weight_rounding, uint64_t seed,
              std::string method);

  const std::vector<int>& candidates() const override { return bits_; }
  void set_bitwidth(int b) override;
  int active_bitwidth() const override { return active_bit_; }
  Tensor forward(Graph& g, const Tensor& images) override;
  std::vector<Tensor> weight_params() override;
  std::vector<Tensor> quant_params() override;
  void set_training(bool training) override { training_ = training; }
  bool training() const override { return training_; }
  int active_weight_bits() const override { return active_bit_; }  // switches per candidate
  std::string method() const override { return method_; }

  const ArchSpec& arch() const { return arch_; }
  std::vector<SwitchableConvBlock>& blocks() { return blocks_; }
  const std::vector<SwitchableConvBlock>& blocks() const { return blocks_; }
  RoundMode weight_rounding() const { return weight_rounding_; }
  int64_t body_weight_count() const;

  Tensor stem_weight, stem_bias, stem_bn_gamma, stem_bn_beta;
  BatchNormState stem_bn_state;
  Tensor head_weight, head_bias;

 private:
  ArchSpec arch_;
  std::vector<int> bits_;
  RoundMode weight_rounding_;
  std::string method_;
  std::vector<SwitchableConvBlock> blocks_;
  int active_bit_ = 0;
  bool training_ = true;
};

// ---------------------------------------------------------------------------

struct CostReport {
  int bit = 0;
  double multiquant_units = 0.0;  // sum over P(b) of 2 * b * macs (half at 0.5)
  double reference_units = 0.0;   // b * b * macs, the single-model line
  bool parity = false;
};

CostReport compute_cost(const BranchPlan& plan, const SelectionMap& map, int bit,
                        int64_t macs_per_body);

struct StorageItem {
  std::string name;
  size_t bytes = 0;
};

struct StorageReport {
  std::vector<StorageItem> items;
  size_t body_payload_bytes = 0;   // packed codes only
  size_t quant_header_bytes = 0;   // (l,u,b) headers of packed tensors
  size_t stem_bytes = 0;           // full precision, 32-bit convention
  size_t head_bytes = 0;
  size_t bn_bytes = 0;
  size_t act_quant_bytes = 0;
  size_t total_bytes = 0;
  size_t fp32_body_reference_bytes = 0;  // same weights at 32 bits
  double compression_ratio = 0.0;        // fp32 body / packed payload
  double packing_overhead = 0.0;         // headers / (payload + headers)
  std::vector<size_t> per_branch_payload;
};

StorageReport storage_report(const MultiQuantModel& model);
StorageReport storage_report(const SingleModel& model);

// --- checkpoints -----------------------------------------------------------
// Binary, little-endian, versioned. Branch weights travel as packed 2-bit
// codes; stem/head, BN banks and quantizer bounds as 64-bit floats.

void save_checkpoint(const MultiQuantModel& model, const std::string& path);
void save_checkpoint(const SingleModel& model, const std::string& path);

struct Checkpoint {
  std::string method;
  std::unique_ptr<MultiQuantModel> multiquant;
  std::unique_ptr<SingleModel> single;
  QatModel& model();
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace mq
