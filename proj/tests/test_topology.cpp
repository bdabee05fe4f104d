#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "multiquant/rng.hpp"
#include "multiquant/topology.hpp"

using namespace mq;

namespace {

Tensor random_images(Rng& rng, int n, const ArchSpec& arch) {
  return tensor({n, arch.in_channels, arch.in_h, arch.in_w},
                rng.normal_vector(static_cast<size_t>(n) * arch.in_channels * arch.in_h * arch.in_w,
                                  0.5, 0.25));
}

ArchSpec tiny_arch() {
  ArchSpec a;
  a.in_channels = 1;
  a.in_h = 12;
  a.in_w = 12;
  a.stem_channels = 4;
  a.body = {{6, true}, {8, true}};
  a.classes = 3;
  return a;
}

}  // namespace

TEST_CASE("branch plans") {
  auto p = build_branch_plan({2, 4, 6, 8});
  CHECK(p.n_full_branches == 4);
  CHECK_FALSE(p.has_half_branch);

  auto p2 = build_branch_plan({2, 3, 4});
  CHECK(p2.n_full_branches == 2);
  CHECK(p2.has_half_branch);

  auto p3 = build_branch_plan({2});
  CHECK(p3.n_full_branches == 1);
  CHECK_FALSE(p3.has_half_branch);

  CHECK_THROWS_AS(build_branch_plan({1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(build_branch_plan({}), std::invalid_argument);
}

TEST_CASE("selection maps match the worked 2/4/6/8 dispersion") {
  auto plan = build_branch_plan({2, 4, 6, 8});
  auto amortized = build_selection_map(plan, SelectionStrategy::Amortized);
  CHECK(amortized.at(2) == std::vector<int>{1});
  CHECK(amortized.at(4) == std::vector<int>{2, 3});
  CHECK(amortized.at(6) == std::vector<int>{2, 3, 4});
  CHECK(amortized.at(8) == std::vector<int>{1, 2, 3, 4});

  auto serial = build_selection_map(plan, SelectionStrategy::Serial);
  CHECK(serial.at(2) == std::vector<int>{1});
  CHECK(serial.at(4) == std::vector<int>{1, 2});
  CHECK(serial.at(6) == std::vector<int>{1, 2, 3});
  CHECK(serial.at(8) == std::vector<int>{1, 2, 3, 4});

  CHECK(branch_usage(plan, amortized)[1] == 2);
  CHECK(branch_usage(plan, serial)[1] == 4);
}

TEST_CASE("explicit maps are validated") {
  auto plan = build_branch_plan({2, 4});
  std::map<int, std::vector<int>> ok{{2, {2}}, {4, {1, 2}}};
  auto map = build_selection_map(plan, ok);
  CHECK(map.strategy == SelectionStrategy::Explicit);
  CHECK(map.at(2) == std::vector<int>{2});

  std::map<int, std::vector<int>> wrong_size{{2, {1, 2}}, {4, {1, 2}}};
  CHECK_THROWS_AS(build_selection_map(plan, wrong_size), std::invalid_argument);
  std::map<int, std::vector<int>> missing_top{{2, {1}}, {4, {1, 1}}};
  CHECK_THROWS_AS(build_selection_map(plan, missing_top), std::invalid_argument);
}

TEST_CASE("odd candidates pull in the half branch") {
  auto plan = build_branch_plan({2, 3, 4});
  auto serial = build_selection_map(plan, SelectionStrategy::Serial);
  CHECK(serial.at(3) == std::vector<int>{1, kHalfBranch});
  auto amortized = build_selection_map(plan, SelectionStrategy::Amortized);
  CHECK(amortized.at(4) == std::vector<int>{1, 2});
  CHECK(amortized.at(3).back() == kHalfBranch);
  CHECK(amortized.at(3).size() == 2);
}

TEST_CASE("amortized load never exceeds serial load") {
  const std::vector<std::vector<int>> candidate_sets{
      {2, 4, 6, 8}, {2, 3, 4}, {2, 4}, {2, 3}, {4, 8}, {2, 4, 8},
      {2, 6}, {3, 5}, {2, 4, 6}, {2, 3, 4, 5, 6}, {8}, {2, 8},
  };
  for (const auto& bits : candidate_sets) {
    auto plan = build_branch_plan(bits);
    auto a = branch_usage(plan, build_selection_map(plan, SelectionStrategy::Amortized));
    auto s = branch_usage(plan, build_selection_map(plan, SelectionStrategy::Serial));
    int amax = 0, smax = 0;
    for (auto& [id, c] : a) amax = std::max(amax, c);
    for (auto& [id, c] : s) smax = std::max(smax, c);
    INFO("candidates ", bits.front(), "..", bits.back());
    CHECK(amax <= smax);
  }
}

TEST_CASE("half branch halves internal channels but keeps the final conv output") {
  ArchSpec arch = tiny_arch();
  arch.body = {{16, true}, {32, true}};
  auto plan = build_branch_plan({2, 3, 4});
  auto model = MultiQuantModel(arch, plan, build_selection_map(plan, SelectionStrategy::Serial), 1);
  const auto& half = model.branch(kHalfBranch);
  REQUIRE(half.is_half);
  CHECK(half.in_channels == 2);  // ceil(4/2)
  CHECK(half.blocks[0].out_channels == 8);
  CHECK(half.blocks[1].out_channels == 32);  // kept for the head
  const auto& full = model.branch(1);
  CHECK(full.blocks[0].out_channels == 16);
  CHECK(full.blocks[1].out_channels == 32);
}

TEST_CASE("a 4-branch body holds exactly 4x the parameters of one body") {
  auto arch = tiny_arch();
  auto plan = build_branch_plan({2, 4, 6, 8});
  auto model =
      MultiQuantModel(arch, plan, build_selection_map(plan, SelectionStrategy::Amortized), 3);
  int64_t total = 0;
  for (int id : model.all_branch_ids()) total += model.body_weight_count(id);
  CHECK(total == 4 * model.body_weight_count(1));
}

TEST_CASE("single-candidate plan degenerates to one 2-bit branch") {
  auto arch = tiny_arch();
  auto plan = build_branch_plan({2});
  auto model = MultiQuantModel(arch, plan, build_selection_map(plan, SelectionStrategy::Amortized), 5);
  CHECK(model.all_branch_ids() == std::vector<int>{1});
  CHECK(model.selection().at(2) == std::vector<int>{1});

  Rng rng(7);
  auto x = random_images(rng, 2, arch);
  Graph g;
  model.set_training(false);
  auto out = model.forward(g, x);
  CHECK(out->shape == Shape{2, arch.classes});
}

TEST_CASE("set_bitwidth validates membership and rebinds state") {
  auto arch = tiny_arch();
  auto plan = build_branch_plan({2, 4, 6, 8});
  auto model =
      MultiQuantModel(arch, plan, build_selection_map(plan, SelectionStrategy::Amortized), 5);
  CHECK_THROWS_AS(model.set_bitwidth(5), std::invalid_argument);
  model.set_bitwidth(4);
  CHECK(model.active_bitwidth() == 4);
  CHECK(model.active_selection() == std::vector<int>{2, 3});
}

TEST_CASE("bit switching is stateless in eval mode") {
  auto arch = tiny_arch();
  auto plan = build_branch_plan({2, 4});
  auto model =
      MultiQuantModel(arch, plan, build_selection_map(plan, SelectionStrategy::Amortized), 9);
  model.set_training(false);
  Rng rng(11);
  auto x = random_images(rng, 2, arch);

  model.set_bitwidth(4);
  Graph g1;
  auto first = model.forward(g1, x);

  model.set_bitwidth(2);
  Graph g2;
  (void)model.forward(g2, x);
  model.set_bitwidth(4);
  Graph g3;
  auto again = model.forward(g3, x);
  CHECK(first->v == again->v);
}

TEST_CASE("composed forward equals the external per-branch sum bitwise") {
  auto arch = tiny_arch();
  auto plan = build_branch_plan({2, 3, 4});
  auto model =
      MultiQuantModel(arch, plan, build_selection_map(plan, SelectionStrategy::Amortized), 13);
  model.set_training(false);
  Rng rng(17);
  auto x = random_images(rng, 3, arch);

  for (int bit : plan.bit_candidates) {
    model.set_bitwidth(bit);
    Graph g;
    auto composed = model.forward(g, x);

    Graph g2;
    auto stem = model.stem_forward(g2, x);
    Tensor summed;
    for (int id : model.selection().at(bit)) {
      auto out = model.branch_forward(g2, stem, id, bit);
      summed = summed ? add(g2, summed, out) : out;
    }
    auto external = model.head_forward(g2, summed);
    CHECK(composed->v == external->v);
  }
}

TEST_CASE("with identical branches and identity bn the sum scales linearly") {
  auto arch = tiny_arch();
  arch.body = {{6, false}};  // single block, no pooling, to keep the algebra visible
  auto plan = build_branch_plan({2, 4, 6, 8});
  auto model =
      MultiQuantModel(arch, plan, build_selection_map(plan, SelectionStrategy::Serial), 21);
  model.set_training(false);

  // clone branch 1 into all branches and force eval-mode BN to identity
  auto& ref = model.branch(1);
  for (int id : model.all_branch_ids()) {
    auto& br = model.branch(id);
    for (size_t i = 0; i < br.blocks.size(); ++i) {
      br.blocks[i].weight->v = ref.blocks[i].weight->v;
      br.blocks[i].weight_q.lower->v[0] = ref.blocks[i].weight_q.l();
      br.blocks[i].weight_q.upper->v[0] = ref.blocks[i].weight_q.u();
      for (int bit : plan.bit_candidates) {
        br.blocks[i].act_q.at(bit).lower->v[0] = 0.0;
        br.blocks[i].act_q.at(bit).upper->v[0] = 1.0;
        auto& st = br.blocks[i].bn_state.at(bit);
        std::fill(st.running_mean.begin(), st.running_mean.end(), 0.0);
        std::fill(st.running_var.begin(), st.running_var.end(), 1.0 - st.eps);
        auto& gamma = br.blocks[i].bn_gamma.at(bit);
        std::fill(gamma->v.begin(), gamma->v.end(), 1.0);
      }
    }
  }

  Rng rng(23);
  auto x = random_images(rng, 2, arch);
  Graph g;
  auto stem = model.stem_forward(g, x);
  auto one = model.branch_forward(g, stem, 1, 8);

  model.set_bitwidth(8);
  Graph g2;
  auto stem2 = model.stem_forward(g2, x);
  Tensor summed;
  for (int id : model.selection().at(8)) {
    auto out = model.branch_forward(g2, stem2, id, 8);
    summed = summed ? add(g2, summed, out) : out;
  }
  for (size_t i = 0; i < summed->v.size(); ++i)
    CHECK(summed->v[i] == doctest::Approx(4.0 * one->v[i]).epsilon(1e-9));
}

TEST_CASE("cost parity with the single-model reference") {
  auto plan = build_branch_plan({2, 4, 6, 8});
  auto map = build_selection_map(plan, SelectionStrategy::Amortized);
  auto c8 = compute_cost(plan, map, 8, 1);
  CHECK(c8.multiquant_units == 64.0);
  CHECK(c8.reference_units == 64.0);
  CHECK(c8.parity);
  auto c2 = compute_cost(plan, map, 2, 1);
  CHECK(c2.multiquant_units == 4.0);
  CHECK(c2.parity);
  auto c4 = compute_cost(plan, map, 4, 1);
  CHECK(c4.multiquant_units == 16.0);
  CHECK(c4.parity);

  // odd widths get the half-branch MAC discount instead of parity
  auto plan2 = build_branch_plan({2, 3, 4});
  auto map2 = build_selection_map(plan2, SelectionStrategy::Serial);
  auto c3 = compute_cost(plan2, map2, 3, 100);
  CHECK(c3.multiquant_units == doctest::Approx(2 * 3 * 100 * 1.0 + 2 * 3 * 100 * 0.5));
  CHECK_FALSE(c3.parity);
}

TEST_CASE("storage accounting") {
  auto arch = tiny_arch();
  auto plan = build_branch_plan({2, 4, 6, 8});
  auto model =
      MultiQuantModel(arch, plan, build_selection_map(plan, SelectionStrategy::Amortized), 31);
  auto rep = storage_report(model);

  const auto w1 = model.body_weight_count(1);
  CHECK(rep.per_branch_payload.size() == 4);
  CHECK(rep.per_branch_payload[0] == packed_payload_bytes(w1, 2));
  size_t body = 0;
  for (auto b : rep.per_branch_payload) body += b;
  CHECK(rep.body_payload_bytes == body);
  CHECK(rep.body_payload_bytes == 4 * rep.per_branch_payload[0]);

  // 2-bit codes against a 32-bit reference
  CHECK(rep.compression_ratio == doctest::Approx(16.0));
  CHECK(rep.total_bytes > rep.body_payload_bytes);

  // header overhead only falls under 1% at realistic tensor sizes
  auto desk = MultiQuantModel(default_arch(), plan,
                              build_selection_map(plan, SelectionStrategy::Amortized), 31);
  auto desk_rep = storage_report(desk);
  CHECK(desk_rep.packing_overhead < 0.01);
  CHECK(desk_rep.compression_ratio == doctest::Approx(16.0));
}

TEST_CASE("branch weight quantizers are pinned at 2 bits") {
  auto arch = tiny_arch();
  auto plan = build_branch_plan({2, 4, 6, 8});
  auto model =
      MultiQuantModel(arch, plan, build_selection_map(plan, SelectionStrategy::Amortized), 31);
  CHECK(model.branch_weight_bits() == std::set<int>{2});
  for (int bit : plan.bit_candidates) {
    model.set_bitwidth(bit);
    CHECK(model.active_weight_bits() == 2);
  }
  CHECK(model.branch_weight_bits() == std::set<int>{2});
}

TEST_CASE("checkpoints round-trip bit-exactly in eval mode") {
  auto arch = tiny_arch();
  auto plan = build_branch_plan({2, 3, 4});
  auto model =
      MultiQuantModel(arch, plan, build_selection_map(plan, SelectionStrategy::Amortized), 41);

  // push the model away from initialization a little
  Rng rng(43);
  auto x = random_images(rng, 2, arch);
  model.set_training(true);
  model.set_bitwidth(4);
  Graph g;
  (void)model.forward(g, x);  // calibrates activation quantizers, moves BN stats
  g.clear();

  const std::string path = "topology_ck_test.mqck";
  save_checkpoint(model, path);
  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.method == "multiquant");

  model.set_training(false);
  loaded.multiquant->set_training(false);
  for (int bit : plan.bit_candidates) {
    model.set_bitwidth(bit);
    loaded.multiquant->set_bitwidth(bit);
    Graph ga, gb;
    auto a = model.forward(ga, x);
    auto b = loaded.multiquant->forward(gb, x);
    CHECK(a->v == b->v);
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects garbage") {
  const std::string path = "topology_bad_ck.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint("does_not_exist.mqck"), std::runtime_error);
}

TEST_CASE("single-model baseline switches weight quantizers per bit") {
  auto arch = tiny_arch();
  SingleModel model(arch, {4, 8}, RoundMode::Nearest, 51, "any-precision");
  model.set_bitwidth(8);
  CHECK(model.active_weight_bits() == 8);
  model.set_bitwidth(4);
  CHECK(model.active_weight_bits() == 4);

  auto rep = storage_report(model);
  CHECK(rep.body_payload_bytes == static_cast<size_t>(model.body_weight_count()) * 4);  // fp32

  SingleModel adabit(arch, {4, 8}, RoundMode::Floor, 51, "adabit");
  auto rep2 = storage_report(adabit);
  CHECK(rep2.body_payload_bytes == packed_payload_bytes(adabit.body_weight_count(), 8));
}
