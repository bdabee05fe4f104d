#include "multiquant/topology.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "multiquant/rng.hpp"

namespace mq {

std::string branch_id_str(int id) { return id == kHalfBranch ? "H" : std::to_string(id); }

BranchPlan build_branch_plan(const std::vector<int>& bits) {
  if (bits.empty()) throw std::invalid_argument("branch plan: empty candidate set");
  BranchPlan plan;
  plan.bit_candidates = bits;
  std::sort(plan.bit_candidates.begin(), plan.bit_candidates.end());
  plan.bit_candidates.erase(
      std::unique(plan.bit_candidates.begin(), plan.bit_candidates.end()),
      plan.bit_candidates.end());
  for (int b : plan.bit_candidates) {
    if (b < 2)
      throw std::invalid_argument("branch plan: candidate " + std::to_string(b) +
                                  " has no 2-bit composition");
    if (b % 2 == 1) plan.has_half_branch = true;
  }
  plan.n_full_branches = plan.bit_candidates.back() / 2;
  for (int b : plan.bit_candidates)
    if (b % 2 == 0 && b / 2 > plan.n_full_branches)
      throw std::invalid_argument("branch plan: candidate exceeds branch inventory");
  return plan;
}

SelectionStrategy strategy_from_string(const std::string& s) {
  if (s == "serial") return SelectionStrategy::Serial;
  if (s == "amortized") return SelectionStrategy::Amortized;
  if (s == "explicit") return SelectionStrategy::Explicit;
  throw std::invalid_argument("unknown selection strategy '" + s + "'");
}

std::string strategy_to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::Serial: return "serial";
    case SelectionStrategy::Amortized: return "amortized";
    case SelectionStrategy::Explicit: return "explicit";
  }
  return "?";
}

const std::vector<int>& SelectionMap::at(int bit) const {
  auto it = selected.find(bit);
  if (it == selected.end())
    throw std::invalid_argument("selection map: bit-width " + std::to_string(bit) +
                                " is not a candidate");
  return it->second;
}

namespace {

void sort_selection(std::vector<int>& sel) {
  std::sort(sel.begin(), sel.end());  // kHalfBranch sorts last
}

void validate_selection(const BranchPlan& plan, const std::map<int, std::vector<int>>& sel) {
  if (sel.size() != plan.bit_candidates.size())
    throw std::invalid_argument("selection map: candidate coverage mismatch");
  for (int b : plan.bit_candidates) {
    auto it = sel.find(b);
    if (it == sel.end())
      throw std::invalid_argument("selection map: missing bit " + std::to_string(b));
    const auto& p = it->second;
    const size_t full_needed = b / 2;
    const bool odd = b % 2 == 1;
    size_t fulls = 0;
    bool half = false;
    std::set<int> seen;
    for (int id : p) {
      if (!seen.insert(id).second)
        throw std::invalid_argument("selection map: duplicate branch in P(" + std::to_string(b) +
                                    ")");
      if (id == kHalfBranch) {
        half = true;
      } else {
        if (id < 1 || id > plan.n_full_branches)
          throw std::invalid_argument("selection map: branch " + std::to_string(id) +
                                      " out of range");
        ++fulls;
      }
    }
    if (odd) {
      if (!half || fulls != full_needed)
        throw std::invalid_argument("selection map: P(" + std::to_string(b) + ") must hold " +
                                    std::to_string(full_needed) + " full branches plus the half");
    } else {
      if (half || fulls != full_needed)
        throw std::invalid_argument("selection map: |P(" + std::to_string(b) + ")| must be " +
                                    std::to_string(full_needed) + " full branches");
    }
  }
  // the largest width uses every full branch (and the half when it is odd)
  const int max_bit = plan.bit_candidates.back();
  const auto& top = sel.at(max_bit);
  for (int id = 1; id <= plan.n_full_branches; ++id)
    if (std::find(top.begin(), top.end(), id) == top.end())
      throw std::invalid_argument("selection map: branch " + std::to_string(id) +
                                  " missing from P(max)");
}

// k-subsets of {1..n} in lexicographic order
void for_each_subset(int n, int k, const std::function<void(const std::vector<int>&)>& fn) {
  std::vector<int> idx(k);
  for (int i = 0; i < k; ++i) idx[i] = i + 1;
  while (true) {
    fn(idx);
    int i = k - 1;
    while (i >= 0 && idx[i] == n - (k - 1 - i)) --i;
    if (i < 0) break;
    ++idx[i];
    for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

}  // namespace

SelectionMap build_selection_map(const BranchPlan& plan, SelectionStrategy strategy) {
  SelectionMap map;
  map.strategy = strategy;
  const int n = plan.n_full_branches;
  const int max_bit = plan.bit_candidates.back();

  if (strategy == SelectionStrategy::Explicit)
    throw std::invalid_argument("explicit strategy needs a supplied map");

  if (strategy == SelectionStrategy::Serial) {
    for (int b : plan.bit_candidates) {
      std::vector<int> p;
      for (int i = 1; i <= b / 2; ++i) p.push_back(i);
      if (b % 2 == 1) p.push_back(kHalfBranch);
      map.selected[b] = p;
    }
    validate_selection(plan, map.selected);
    return map;
  }

  // amortized
  if (plan.bit_candidates == std::vector<int>{2, 4, 6, 8}) {
    // the worked dispersion for the 2/4/6/8 setting
    map.selected[2] = {1};
    map.selected[4] = {2, 3};
    map.selected[6] = {2, 3, 4};
    map.selected[8] = {1, 2, 3, 4};
    validate_selection(plan, map.selected);
    return map;
  }

  // other candidate sets: greedy load balancing. The largest width is fixed
  // to the whole inventory; remaining candidates (ascending) each take the
  // subset minimizing the running maximum usage, ties to lowest indices.
  std::map<int, int> usage;
  for (int i = 1; i <= n; ++i) usage[i] = 0;
  if (plan.has_half_branch) usage[kHalfBranch] = 0;

  std::vector<int> top;
  for (int i = 1; i <= n; ++i) top.push_back(i);
  if (max_bit % 2 == 1) top.push_back(kHalfBranch);
  map.selected[max_bit] = top;
  for (int id : top) ++usage[id];

  for (int b : plan.bit_candidates) {
    if (b == max_bit) continue;
    const int k = b / 2;
    const bool odd = b % 2 == 1;
    std::vector<int> best;
    int best_max = std::numeric_limits<int>::max();
    for_each_subset(n, k, [&](const std::vector<int>& subset) {
      int worst = odd ? usage[kHalfBranch] + 1 : 0;
      for (const auto& [id, cnt] : usage) {
        int c = cnt;
        if (std::find(subset.begin(), subset.end(), id) != subset.end()) ++c;
        if (odd && id == kHalfBranch) c = usage[kHalfBranch] + 1;
        worst = std::max(worst, c);
      }
      if (worst < best_max) {
        best_max = worst;
        best = subset;
      }
    });
    if (odd) best.push_back(kHalfBranch);
    map.selected[b] = best;
    for (int id : best) ++usage[id];
  }
  validate_selection(plan, map.selected);
  return map;
}

SelectionMap build_selection_map(const BranchPlan& plan,
                                 const std::map<int, std::vector<int>>& explicit_map) {
  SelectionMap map;
  map.strategy = SelectionStrategy::Explicit;
  map.selected = explicit_map;
  for (auto& [bit, sel] : map.selected) sort_selection(sel);
  validate_selection(plan, map.selected);
  return map;
}

std::map<int, int> branch_usage(const BranchPlan& plan, const SelectionMap& map) {
  std::map<int, int> usage;
  for (int i = 1; i <= plan.n_full_branches; ++i) usage[i] = 0;
  if (plan.has_half_branch) usage[kHalfBranch] = 0;
  for (const auto& [bit, sel] : map.selected)
    for (int id : sel) ++usage[id];
  return usage;
}

// ---------------------------------------------------------------------------

uint64_t ArchSpec::hash() const {
  uint64_t h = 1469598103934665603ULL;  // FNV-1a
  auto mix = [&h](int64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= static_cast<uint64_t>(v >> (8 * i)) & 0xff;
      h *= 1099511628211ULL;
    }
  };
  mix(in_channels);
  mix(in_h);
  mix(in_w);
  mix(stem_channels);
  mix(stem_stride);
  mix(classes);
  mix(static_cast<int64_t>(body.size()));
  for (const auto& blk : body) {
    mix(blk.out_channels);
    mix(blk.pool ? 1 : 0);
  }
  return h;
}

int ArchSpec::stem_out_h() const { return (in_h + 2 - 3) / stem_stride + 1; }
int ArchSpec::stem_out_w() const { return (in_w + 2 - 3) / stem_stride + 1; }

int ArchSpec::body_out_h() const {
  int h = stem_out_h();
  for (const auto& blk : body)
    if (blk.pool) h /= 2;
  return h;
}

int ArchSpec::body_out_w() const {
  int w = stem_out_w();
  for (const auto& blk : body)
    if (blk.pool) w /= 2;
  return w;
}

int ArchSpec::head_in_features() const {
  return body.back().out_channels * body_out_h() * body_out_w();
}

int64_t ArchSpec::body_macs() const {
  int64_t macs = 0;
  int h = stem_out_h(), w = stem_out_w(), c = stem_channels;
  for (const auto& blk : body) {
    macs += static_cast<int64_t>(h) * w * blk.out_channels * c * 9;  // 3x3, pad 1
    c = blk.out_channels;
    if (blk.pool) {
      h /= 2;
      w /= 2;
    }
  }
  return macs;
}

ArchSpec default_arch() { return ArchSpec{}; }

namespace {

Tensor he_normal(Rng& rng, Shape shape, int fan_in, const std::string& name) {
  const double std = std::sqrt(2.0 / fan_in);
  const auto n = numel(shape);
  return tensor(std::move(shape), rng.normal_vector(n, 0.0, std), true, name);
}

QuantizedConvBlock make_block(Rng& rng, int in_c, int out_c, bool pool, int weight_bits,
                              const std::vector<int>& act_bits, RoundMode weight_rounding,
                              const std::string& name) {
  QuantizedConvBlock blk;
  blk.in_channels = in_c;
  blk.out_channels = out_c;
  blk.pool = pool;
  blk.weight = he_normal(rng, {out_c, in_c, 3, 3}, in_c * 9, name + ".w");
  blk.weight_q =
      init_clip_params(blk.weight->v, QuantRole::Weight, weight_bits, weight_rounding, name + ".wq");
  for (int b : act_bits) {
    auto aq = make_quantizer(0.0, 1.0, b, QuantRole::Activation, RoundMode::Nearest,
                             name + ".aq" + std::to_string(b));
    aq.initialized = false;  // calibrated from the first training batch
    blk.act_q.emplace(b, std::move(aq));
    blk.bn_gamma.emplace(b, full({out_c}, 1.0, true, name + ".bn" + std::to_string(b) + ".gamma"));
    blk.bn_beta.emplace(b, zeros({out_c}, true, name + ".bn" + std::to_string(b) + ".beta"));
    blk.bn_state.emplace(b, BatchNormState(out_c));
  }
  return blk;
}

Tensor block_forward(Graph& g, QuantizedConvBlock& blk, const Tensor& input, int bit,
                     bool training) {
  auto& aq = blk.act_q.at(bit);
  if (training && !aq.initialized) calibrate_from_batch(aq, input->v);
  auto h = fake_quantize(g, input, aq);
  auto wq = fake_quantize(g, blk.weight, blk.weight_q);
  h = conv2d(g, h, wq, nullptr, 1, 1, blk.weight_q.name);
  h = batchnorm2d(g, h, blk.bn_gamma.at(bit), blk.bn_beta.at(bit), blk.bn_state.at(bit), training);
  h = relu(g, h);
  if (blk.pool) h = avgpool2d(g, h);
  return h;
}

void collect_block_params(QuantizedConvBlock& blk, std::vector<Tensor>& weights,
                          std::vector<Tensor>& quants) {
  weights.push_back(blk.weight);
  for (auto& [bit, gamma] : blk.bn_gamma) weights.push_back(gamma);
  for (auto& [bit, beta] : blk.bn_beta) weights.push_back(beta);
  quants.push_back(blk.weight_q.lower);
  quants.push_back(blk.weight_q.upper);
  for (auto& [bit, aq] : blk.act_q) {
    quants.push_back(aq.lower);
    quants.push_back(aq.upper);
  }
}

}  // namespace

MultiQuantModel::MultiQuantModel(ArchSpec arch, BranchPlan plan, SelectionMap map, uint64_t seed)
    : arch_(std::move(arch)), plan_(std::move(plan)), map_(std::move(map)) {
  if (arch_.body.empty()) throw std::invalid_argument("build_model: body has no conv layers");
  validate_selection(plan_, map_.selected);
  Rng rng(seed);

  stem_weight = he_normal(rng, {arch_.stem_channels, arch_.in_channels, 3, 3},
                          arch_.in_channels * 9, "stem.w");
  stem_bias = zeros({arch_.stem_channels}, true, "stem.b");
  stem_bn_gamma = full({arch_.stem_channels}, 1.0, true, "stem.bn.gamma");
  stem_bn_beta = zeros({arch_.stem_channels}, true, "stem.bn.beta");
  stem_bn_state = BatchNormState(arch_.stem_channels);
  head_weight = he_normal(rng, {arch_.classes, arch_.head_in_features()},
                          arch_.head_in_features(), "head.w");
  head_bias = zeros({arch_.classes}, true, "head.b");

  const auto& bits = plan_.bit_candidates;
  for (int i = 1; i <= plan_.n_full_branches; ++i) {
    Branch br;
    br.in_channels = arch_.stem_channels;
    int in_c = arch_.stem_channels;
    for (size_t blk_i = 0; blk_i < arch_.body.size(); ++blk_i) {
      const auto& spec = arch_.body[blk_i];
      br.blocks.push_back(make_block(rng, in_c, spec.out_channels, spec.pool, 2, bits,
                                     RoundMode::Nearest,
                                     "branch" + std::to_string(i) + ".block" +
                                         std::to_string(blk_i)));
      in_c = spec.out_channels;
    }
    full_branches_.push_back(std::move(br));
  }

  if (plan_.has_half_branch) {
    Branch br;
    br.is_half = true;
    br.in_channels = (arch_.stem_channels + 1) / 2;  // first ceil(C/2) stem channels
    int in_c = br.in_channels;
    for (size_t blk_i = 0; blk_i < arch_.body.size(); ++blk_i) {
      const auto& spec = arch_.body[blk_i];
      // internal channel counts halve; the final conv keeps its output
      // count to stay summable with the full branches ahead of the head
      const bool last = blk_i + 1 == arch_.body.size();
      const int out_c = last ? spec.out_channels : std::max(1, spec.out_channels / 2);
      br.blocks.push_back(make_block(rng, in_c, out_c, spec.pool, 2, bits, RoundMode::Nearest,
                                     "branchH.block" + std::to_string(blk_i)));
      in_c = out_c;
    }
    half_branch_ = std::move(br);
  }

  active_bit_ = bits.back();
}

void MultiQuantModel::set_bitwidth(int b) {
  if (std::find(plan_.bit_candidates.begin(), plan_.bit_candidates.end(), b) ==
      plan_.bit_candidates.end())
    throw std::invalid_argument("set_bitwidth: " + std::to_string(b) + " is not a candidate");
  active_bit_ = b;
}

const std::vector<int>& MultiQuantModel::active_selection() const { return map_.at(active_bit_); }

Branch& MultiQuantModel::branch(int branch_id) {
  if (branch_id == kHalfBranch) {
    if (!half_branch_) throw std::invalid_argument("model has no half branch");
    return *half_branch_;
  }
  if (branch_id < 1 || branch_id > static_cast<int>(full_branches_.size()))
    throw std::invalid_argument("branch id out of range");
  return full_branches_[branch_id - 1];
}

const Branch& MultiQuantModel::branch(int branch_id) const {
  return const_cast<MultiQuantModel*>(this)->branch(branch_id);
}

std::vector<int> MultiQuantModel::all_branch_ids() const {
  std::vector<int> ids;
  for (int i = 1; i <= plan_.n_full_branches; ++i) ids.push_back(i);
  if (half_branch_) ids.push_back(kHalfBranch);
  return ids;
}

std::set<int> MultiQuantModel::branch_weight_bits() const {
  std::set<int> bits;
  for (int id : all_branch_ids())
    for (const auto& blk : branch(id).blocks) bits.insert(blk.weight_q.bits);
  return bits;
}

int64_t MultiQuantModel::body_weight_count(int branch_id) const {
  int64_t count = 0;
  for (const auto& blk : branch(branch_id).blocks) count += blk.weight->size();
  return count;
}

Tensor MultiQuantModel::stem_forward(Graph& g, const Tensor& images) {
  auto h = conv2d(g, images, stem_weight, stem_bias, arch_.stem_stride, 1, "stem");
  h = batchnorm2d(g, h, stem_bn_gamma, stem_bn_beta, stem_bn_state, training_);
  return relu(g, h);
}

Tensor MultiQuantModel::branch_forward(Graph& g, const Tensor& stem_out, int branch_id, int bit) {
  auto& br = branch(branch_id);
  Tensor h = br.is_half ? slice_channels(g, stem_out, br.in_channels) : stem_out;
  for (auto& blk : br.blocks) h = block_forward(g, blk, h, bit, training_);
  return h;
}

Tensor MultiQuantModel::head_forward(Graph& g, const Tensor& summed) {
  auto flat = reshape(g, summed, {summed->shape[0], arch_.head_in_features()});
  return linear(g, flat, head_weight, head_bias);
}

Tensor MultiQuantModel::forward(Graph& g, const Tensor& images) {
  if (active_bit_ == 0) throw std::runtime_error("forward: no active bit-width set");
  auto stem = stem_forward(g, images);
  Tensor summed;
  // deterministic ordered reduction: fulls ascending, half last
  for (int id : map_.at(active_bit_)) {
    auto out = branch_forward(g, stem, id, active_bit_);
    summed = summed ? add(g, summed, out) : out;
  }
  return head_forward(g, summed);
}

std::vector<Tensor> MultiQuantModel::weight_params() {
  std::vector<Tensor> weights{stem_weight, stem_bias, stem_bn_gamma, stem_bn_beta,
                              head_weight, head_bias};
  std::vector<Tensor> quants;
  for (int id : all_branch_ids())
    for (auto& blk : branch(id).blocks) collect_block_params(blk, weights, quants);
  return weights;
}

std::vector<Tensor> MultiQuantModel::quant_params() {
  std::vector<Tensor> weights;
  std::vector<Tensor> quants;
  for (int id : all_branch_ids())
    for (auto& blk : branch(id).blocks) collect_block_params(blk, weights, quants);
  return quants;
}

// ---------------------------------------------------------------------------

SingleModel::SingleModel(ArchSpec arch, std::vector<int> bits, RoundMode weight_rounding,
                         uint64_t seed, std::string method)
    : arch_(std::move(arch)), bits_(std::move(bits)), weight_rounding_(weight_rounding),
      method_(std::move(method)) {
  if (arch_.body.empty()) throw std::invalid_argument("build_model: body has no conv layers");
  std::sort(bits_.begin(), bits_.end());
  for (int b : bits_)
    if (b < 2) throw std::invalid_argument("single model: bit-width must be >= 2");
  Rng rng(seed);

  stem_weight = he_normal(rng, {arch_.stem_channels, arch_.in_channels, 3, 3},
                          arch_.in_channels * 9, "stem.w");
  stem_bias = zeros({arch_.stem_channels}, true, "stem.b");
  stem_bn_gamma = full({arch_.stem_channels}, 1.0, true, "stem.bn.gamma");
  stem_bn_beta = zeros({arch_.stem_channels}, true, "stem.bn.beta");
  stem_bn_state = BatchNormState(arch_.stem_channels);
  head_weight = he_normal(rng, {arch_.classes, arch_.head_in_features()},
                          arch_.head_in_features(), "head.w");
  head_bias = zeros({arch_.classes}, true, "head.b");

  int in_c = arch_.stem_channels;
  for (size_t blk_i = 0; blk_i < arch_.body.size(); ++blk_i) {
    const auto& spec = arch_.body[blk_i];
    const std::string name = "body.block" + std::to_string(blk_i);
    SwitchableConvBlock blk;
    blk.in_channels = in_c;
    blk.out_channels = spec.out_channels;
    blk.pool = spec.pool;
    blk.weight = he_normal(rng, {spec.out_channels, in_c, 3, 3}, in_c * 9, name + ".w");
    for (int b : bits_) {
      auto wq = init_clip_params(blk.weight->v, QuantRole::Weight, b, weight_rounding_,
                                 name + ".wq" + std::to_string(b));
      blk.weight_q.emplace(b, std::move(wq));
      auto aq = make_quantizer(0.0, 1.0, b, QuantRole::Activation, RoundMode::Nearest,
                               name + ".aq" + std::to_string(b));
      aq.initialized = false;
      blk.act_q.emplace(b, std::move(aq));
      blk.bn_gamma.emplace(b,
                           full({spec.out_channels}, 1.0, true, name + ".bn" + std::to_string(b) + ".gamma"));
      blk.bn_beta.emplace(b, zeros({spec.out_channels}, true, name + ".bn" + std::to_string(b) + ".beta"));
      blk.bn_state.emplace(b, BatchNormState(spec.out_channels));
    }
    blocks_.push_back(std::move(blk));
    in_c = spec.out_channels;
  }
  active_bit_ = bits_.back();
}

void SingleModel::set_bitwidth(int b) {
  if (std::find(bits_.begin(), bits_.end(), b) == bits_.end())
    throw std::invalid_argument("set_bitwidth: " + std::to_string(b) + " is not a candidate");
  active_bit_ = b;
}

Tensor SingleModel::forward(Graph& g, const Tensor& images) {
  auto h = conv2d(g, images, stem_weight, stem_bias, arch_.stem_stride, 1, "stem");
  h = batchnorm2d(g, h, stem_bn_gamma, stem_bn_beta, stem_bn_state, training_);
  h = relu(g, h);
  for (auto& blk : blocks_) {
    auto& aq = blk.act_q.at(active_bit_);
    if (training_ && !aq.initialized) calibrate_from_batch(aq, h->v);
    h = fake_quantize(g, h, aq);
    auto wq = fake_quantize(g, blk.weight, blk.weight_q.at(active_bit_));
    h = conv2d(g, h, wq, nullptr, 1, 1);
    h = batchnorm2d(g, h, blk.bn_gamma.at(active_bit_), blk.bn_beta.at(active_bit_),
                    blk.bn_state.at(active_bit_), training_);
    h = relu(g, h);
    if (blk.pool) h = avgpool2d(g, h);
  }
  auto flat = reshape(g, h, {h->shape[0], arch_.head_in_features()});
  return linear(g, flat, head_weight, head_bias);
}

std::vector<Tensor> SingleModel::weight_params() {
  std::vector<Tensor> weights{stem_weight, stem_bias, stem_bn_gamma, stem_bn_beta,
                              head_weight, head_bias};
  for (auto& blk : blocks_) {
    weights.push_back(blk.weight);
    for (auto& [bit, gamma] : blk.bn_gamma) weights.push_back(gamma);
    for (auto& [bit, beta] : blk.bn_beta) weights.push_back(beta);
  }
  return weights;
}

std::vector<Tensor> SingleModel::quant_params() {
  std::vector<Tensor> quants;
  for (auto& blk : blocks_) {
    for (auto& [bit, wq] : blk.weight_q) {
      quants.push_back(wq.lower);
      quants.push_back(wq.upper);
    }
    for (auto& [bit, aq] : blk.act_q) {
      quants.push_back(aq.lower);
      quants.push_back(aq.upper);
    }
  }
  return quants;
}

int64_t SingleModel::body_weight_count() const {
  int64_t count = 0;
  for (const auto& blk : blocks_) count += blk.weight->size();
  return count;
}

// ---------------------------------------------------------------------------

CostReport compute_cost(const BranchPlan& plan, const SelectionMap& map, int bit,
                        int64_t macs_per_body) {
  CostReport r;
  r.bit = bit;
  for (int id : map.at(bit))
    r.multiquant_units += 2.0 * bit * static_cast<double>(macs_per_body) * plan.width_factor(id);
  r.reference_units = static_cast<double>(bit) * bit * static_cast<double>(macs_per_body);
  r.parity = bit % 2 == 0 && r.multiquant_units == r.reference_units;
  return r;
}

namespace {

constexpr size_t kFp32Bytes = 4;

size_t bn_bank_bytes(int channels) {
  // gamma, beta, running mean, running var
  return 4ull * channels * kFp32Bytes;
}

}  // namespace

StorageReport storage_report(const MultiQuantModel& model) {
  StorageReport rep;
  rep.stem_bytes = (model.stem_weight->size() + model.stem_bias->size()) * kFp32Bytes +
                   bn_bank_bytes(model.arch().stem_channels);
  rep.head_bytes =
      (model.head_weight->size() + model.head_bias->size()) * kFp32Bytes;
  rep.items.push_back({"stem (fp32)", rep.stem_bytes});
  rep.items.push_back({"head (fp32)", rep.head_bytes});

  for (int id : model.all_branch_ids()) {
    const auto& br = model.branch(id);
    size_t payload = 0;
    for (const auto& blk : br.blocks) {
      payload += packed_payload_bytes(blk.weight->size(), blk.weight_q.bits);
      rep.quant_header_bytes += kPackedHeaderBytes;
      for (const auto& [bit, aq] : blk.act_q) rep.act_quant_bytes += 2 * 8;  // l,u as f64
      for (const auto& [bit, gamma] : blk.bn_gamma) rep.bn_bytes += bn_bank_bytes(blk.out_channels);
      rep.fp32_body_reference_bytes += blk.weight->size() * kFp32Bytes;
    }
    rep.per_branch_payload.push_back(payload);
    rep.body_payload_bytes += payload;
    rep.items.push_back({"branch " + branch_id_str(id) + " packed 2-bit body", payload});
  }
  rep.items.push_back({"weight quantizer headers", rep.quant_header_bytes});
  rep.items.push_back({"activation quantizer params", rep.act_quant_bytes});
  rep.items.push_back({"batch-norm banks", rep.bn_bytes});
  rep.total_bytes = rep.stem_bytes + rep.head_bytes + rep.body_payload_bytes +
                    rep.quant_header_bytes + rep.act_quant_bytes + rep.bn_bytes;
  rep.compression_ratio =
      static_cast<double>(rep.fp32_body_reference_bytes) / rep.body_payload_bytes;
  rep.packing_overhead = static_cast<double>(rep.quant_header_bytes) /
                         (rep.body_payload_bytes + rep.quant_header_bytes);
  return rep;
}

StorageReport storage_report(const SingleModel& model) {
  StorageReport rep;
  rep.stem_bytes = (model.stem_weight->size() + model.stem_bias->size()) * kFp32Bytes +
                   bn_bank_bytes(model.arch().stem_channels);
  rep.head_bytes = (model.head_weight->size() + model.head_bias->size()) * kFp32Bytes;
  rep.items.push_back({"stem (fp32)", rep.stem_bytes});
  rep.items.push_back({"head (fp32)", rep.head_bytes});

  const bool fp_body = model.method() == "any-precision";
  const int max_bit = model.candidates().back();
  size_t payload = 0;
  for (const auto& blk : model.blocks()) {
    // Any-Precision keeps the full-precision body; AdaBit's floor rounding
    // lets it store the max-bit codes instead
    payload += fp_body ? blk.weight->size() * kFp32Bytes
                       : packed_payload_bytes(blk.weight->size(), max_bit);
    if (!fp_body) rep.quant_header_bytes += kPackedHeaderBytes;
    for (const auto& [bit, aq] : blk.act_q) rep.act_quant_bytes += 2 * 8;
    for (const auto& [bit, wq] : blk.weight_q) rep.act_quant_bytes += 2 * 8;
    for (const auto& [bit, gamma] : blk.bn_gamma) rep.bn_bytes += bn_bank_bytes(blk.out_channels);
    rep.fp32_body_reference_bytes += blk.weight->size() * kFp32Bytes;
  }
  rep.body_payload_bytes = payload;
  rep.per_branch_payload.push_back(payload);
  rep.items.push_back({fp_body ? "body (fp32)" : "body packed at max bit", payload});
  rep.items.push_back({"weight quantizer headers", rep.quant_header_bytes});
  rep.items.push_back({"quantizer params", rep.act_quant_bytes});
  rep.items.push_back({"batch-norm banks", rep.bn_bytes});
  rep.total_bytes = rep.stem_bytes + rep.head_bytes + rep.body_payload_bytes +
                    rep.quant_header_bytes + rep.act_quant_bytes + rep.bn_bytes;
  rep.compression_ratio =
      static_cast<double>(rep.fp32_body_reference_bytes) / rep.body_payload_bytes;
  rep.packing_overhead = static_cast<double>(rep.quant_header_bytes) /
                         (rep.body_payload_bytes + rep.quant_header_bytes);
  return rep;
}

// --- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'Q', 'C', 'K'};
constexpr uint32_t kVersion = 1;

struct Writer {
  std::ofstream out;
  explicit Writer(const std::string& path) : out(path, std::ios::binary) {
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  }
  void bytes(const void* p, size_t n) { out.write(static_cast<const char*>(p), n); }
  void u8(uint8_t v) { bytes(&v, 1); }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u64(uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void f64v(const std::vector<double>& v) {
    u64(v.size());
    bytes(v.data(), v.size() * 8);
  }
};

struct Reader {
  std::ifstream in;
  explicit Reader(const std::string& path) : in(path, std::ios::binary) {
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  }
  void bytes(void* p, size_t n) {
    in.read(static_cast<char*>(p), n);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
  }
  uint8_t u8() {
    uint8_t v;
    bytes(&v, 1);
    return v;
  }
  uint32_t u32() {
    uint32_t v;
    bytes(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    bytes(&v, 8);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  std::vector<double> f64v() {
    auto n = u64();
    std::vector<double> v(n);
    bytes(v.data(), n * 8);
    return v;
  }
};

void write_arch(Writer& w, const ArchSpec& a) {
  w.u32(a.in_channels);
  w.u32(a.in_h);
  w.u32(a.in_w);
  w.u32(a.stem_channels);
  w.u32(a.stem_stride);
  w.u32(a.classes);
  w.u32(static_cast<uint32_t>(a.body.size()));
  for (const auto& blk : a.body) {
    w.u32(blk.out_channels);
    w.u8(blk.pool ? 1 : 0);
  }
  w.u64(a.hash());
}

ArchSpec read_arch(Reader& r) {
  ArchSpec a;
  a.in_channels = r.u32();
  a.in_h = r.u32();
  a.in_w = r.u32();
  a.stem_channels = r.u32();
  a.stem_stride = r.u32();
  a.classes = r.u32();
  const auto nblocks = r.u32();
  a.body.clear();
  for (uint32_t i = 0; i < nblocks; ++i) {
    ConvBlockSpec blk;
    blk.out_channels = r.u32();
    blk.pool = r.u8() != 0;
    a.body.push_back(blk);
  }
  if (r.u64() != a.hash()) throw std::runtime_error("checkpoint: architecture hash mismatch");
  return a;
}

void write_packed_weights(Writer& w, const Tensor& latent, QuantizerParams& q) {
  auto codes = quantize(normalize(latent->v, q), q);
  auto bytes = pack_qcodes(codes, q);
  w.u64(bytes.size());
  w.bytes(bytes.data(), bytes.size());
}

// Reconstruct a latent weight that re-quantizes to the stored code exactly:
// the code point for nearest rounding, the bin midpoint for floor rounding
// (a code-point latent could floor one bin down on a 1-ulp error).
void read_packed_weights(Reader& r, Tensor& latent, QuantizerParams& q) {
  auto n = r.u64();
  std::vector<uint8_t> bytes(n);
  r.bytes(bytes.data(), n);
  auto packed = unpack_qcodes(bytes, latent->v.size());
  if (packed.bits != q.bits) throw std::runtime_error("checkpoint: weight bit-width mismatch");
  q.lower->v[0] = packed.l;
  q.upper->v[0] = packed.u;
  const double span = packed.u - packed.l;
  const double levels = (1 << packed.bits) - 1;
  const double shift = q.round_mode == RoundMode::Floor ? 0.5 : 0.0;
  for (size_t i = 0; i < latent->v.size(); ++i)
    latent->v[i] = packed.l + ((packed.codes[i] + shift) / levels) * span;
}

void write_quantizer_bounds(Writer& w, const QuantizerParams& q) {
  w.f64(q.l());
  w.f64(q.u());
  w.u8(q.initialized ? 1 : 0);
}

void read_quantizer_bounds(Reader& r, QuantizerParams& q) {
  q.lower->v[0] = r.f64();
  q.upper->v[0] = r.f64();
  q.initialized = r.u8() != 0;
}

void write_bn(Writer& w, const Tensor& gamma, const Tensor& beta, const BatchNormState& st) {
  w.f64v(gamma->v);
  w.f64v(beta->v);
  w.f64v(st.running_mean);
  w.f64v(st.running_var);
}

void read_bn(Reader& r, Tensor& gamma, Tensor& beta, BatchNormState& st) {
  gamma->v = r.f64v();
  beta->v = r.f64v();
  st.running_mean = r.f64v();
  st.running_var = r.f64v();
}

uint8_t method_code(const std::string& m) {
  if (m == "multiquant") return 0;
  if (m == "any-precision") return 1;
  if (m == "adabit") return 2;
  throw std::invalid_argument("unknown method '" + m + "'");
}

void write_common_header(Writer& w, uint8_t method, const ArchSpec& arch,
                         const std::vector<int>& bits) {
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u8(method);
  write_arch(w, arch);
  w.u8(static_cast<uint8_t>(bits.size()));
  for (int b : bits) w.u8(static_cast<uint8_t>(b));
}

}  // namespace

void save_checkpoint(const MultiQuantModel& model, const std::string& path) {
  auto& m = const_cast<MultiQuantModel&>(model);
  Writer w(path);
  write_common_header(w, 0, model.arch(), model.plan().bit_candidates);
  w.u8(static_cast<uint8_t>(model.selection().strategy));
  for (int bit : model.plan().bit_candidates) {
    const auto& sel = model.selection().at(bit);
    w.u8(static_cast<uint8_t>(sel.size()));
    for (int id : sel) w.u8(id == kHalfBranch ? 0xFF : static_cast<uint8_t>(id));
  }
  w.f64v(m.stem_weight->v);
  w.f64v(m.stem_bias->v);
  write_bn(w, m.stem_bn_gamma, m.stem_bn_beta, m.stem_bn_state);
  w.f64v(m.head_weight->v);
  w.f64v(m.head_bias->v);
  for (int id : m.all_branch_ids()) {
    for (auto& blk : m.branch(id).blocks) {
      write_packed_weights(w, blk.weight, blk.weight_q);
      for (auto& [bit, aq] : blk.act_q) write_quantizer_bounds(w, aq);
      for (int bit : model.plan().bit_candidates)
        write_bn(w, blk.bn_gamma.at(bit), blk.bn_beta.at(bit), blk.bn_state.at(bit));
    }
  }
}

void save_checkpoint(const SingleModel& model, const std::string& path) {
  auto& m = const_cast<SingleModel&>(model);
  Writer w(path);
  write_common_header(w, method_code(model.method()), model.arch(), model.candidates());
  w.u8(model.weight_rounding() == RoundMode::Floor ? 1 : 0);
  w.f64v(m.stem_weight->v);
  w.f64v(m.stem_bias->v);
  write_bn(w, m.stem_bn_gamma, m.stem_bn_beta, m.stem_bn_state);
  w.f64v(m.head_weight->v);
  w.f64v(m.head_bias->v);
  const bool fp_body = model.method() == "any-precision";
  const int max_bit = model.candidates().back();
  for (auto& blk : m.blocks()) {
    if (fp_body) {
      w.f64v(blk.weight->v);
    } else {
      write_packed_weights(w, blk.weight, blk.weight_q.at(max_bit));
    }
    for (auto& [bit, wq] : blk.weight_q) write_quantizer_bounds(w, wq);
    for (auto& [bit, aq] : blk.act_q) write_quantizer_bounds(w, aq);
    for (int bit : model.candidates())
      write_bn(w, blk.bn_gamma.at(bit), blk.bn_beta.at(bit), blk.bn_state.at(bit));
  }
}

QatModel& Checkpoint::model() {
  if (multiquant) return *multiquant;
  if (single) return *single;
  throw std::runtime_error("empty checkpoint");
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  if (r.u32() != kVersion) throw std::runtime_error("checkpoint: unsupported version");
  const uint8_t method = r.u8();
  auto arch = read_arch(r);
  const auto nbits = r.u8();
  std::vector<int> bits;
  for (int i = 0; i < nbits; ++i) bits.push_back(r.u8());

  Checkpoint ck;
  if (method == 0) {
    auto plan = build_branch_plan(bits);
    const auto strategy = static_cast<SelectionStrategy>(r.u8());
    std::map<int, std::vector<int>> sel;
    for (int bit : plan.bit_candidates) {
      const int count = r.u8();
      std::vector<int> ids;
      for (int i = 0; i < count; ++i) {
        const uint8_t id = r.u8();
        ids.push_back(id == 0xFF ? kHalfBranch : id);
      }
      sel[bit] = ids;
    }
    auto map = build_selection_map(plan, sel);
    map.strategy = strategy;
    ck.method = "multiquant";
    ck.multiquant = std::make_unique<MultiQuantModel>(arch, plan, map, 0);
    auto& m = *ck.multiquant;
    m.stem_weight->v = r.f64v();
    m.stem_bias->v = r.f64v();
    read_bn(r, m.stem_bn_gamma, m.stem_bn_beta, m.stem_bn_state);
    m.head_weight->v = r.f64v();
    m.head_bias->v = r.f64v();
    for (int id : m.all_branch_ids()) {
      for (auto& blk : m.branch(id).blocks) {
        read_packed_weights(r, blk.weight, blk.weight_q);
        for (auto& [bit, aq] : blk.act_q) read_quantizer_bounds(r, aq);
        for (int bit : plan.bit_candidates)
          read_bn(r, blk.bn_gamma.at(bit), blk.bn_beta.at(bit), blk.bn_state.at(bit));
      }
    }
  } else {
    const RoundMode rounding = r.u8() != 0 ? RoundMode::Floor : RoundMode::Nearest;
    ck.method = method == 1 ? "any-precision" : "adabit";
    ck.single = std::make_unique<SingleModel>(arch, bits, rounding, 0, ck.method);
    auto& m = *ck.single;
    m.stem_weight->v = r.f64v();
    m.stem_bias->v = r.f64v();
    read_bn(r, m.stem_bn_gamma, m.stem_bn_beta, m.stem_bn_state);
    m.head_weight->v = r.f64v();
    m.head_bias->v = r.f64v();
    const bool fp_body = ck.method == "any-precision";
    const int max_bit = bits.back();
    for (auto& blk : m.blocks()) {
      if (fp_body) {
        blk.weight->v = r.f64v();
      } else {
        read_packed_weights(r, blk.weight, blk.weight_q.at(max_bit));
      }
      for (auto& [bit, wq] : blk.weight_q) read_quantizer_bounds(r, wq);
      for (auto& [bit, aq] : blk.act_q) read_quantizer_bounds(r, aq);
      for (int bit : bits)
        read_bn(r, blk.bn_gamma.at(bit), blk.bn_beta.at(bit), blk.bn_state.at(bit));
    }
  }
  return ck;
}

}  // namespace mq
