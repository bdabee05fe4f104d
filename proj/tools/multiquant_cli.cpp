#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "multiquant/blas.hpp"
#include "multiquant/error_analysis.hpp"
#include "multiquant/harness.hpp"
#include "multiquant/parallel.hpp"
#include "multiquant/rng.hpp"

using namespace mq;

namespace {

void apply_thread_env() {
  // MQ_THREADS bounds the worker count; BLAS stays single threaded under it
  if (const char* env = std::getenv("MQ_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) set_worker_count(n);
  }
}

std::vector<int> parse_bits(const std::string& csv) {
  std::vector<int> bits;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) bits.push_back(std::stoi(item));
  return bits;
}

struct Overrides {
  std::string bits, strategy, method, distill, out, dataset;
  int epochs = -1;
  int64_t seed = -1;
  int64_t subset = -1;

  void apply(RunConfig& cfg) const {
    if (!bits.empty()) cfg.train.bits = parse_bits(bits);
    if (!strategy.empty()) cfg.train.strategy = strategy;
    if (!method.empty()) cfg.train.method = method;
    if (!distill.empty()) cfg.train.distill = distill == "on";
    if (!out.empty()) cfg.out_dir = out;
    if (!dataset.empty()) cfg.dataset = dataset;
    if (epochs >= 0) cfg.train.epochs = epochs;
    if (seed >= 0) cfg.train.seed = static_cast<uint64_t>(seed);
    if (subset >= 0) cfg.subset = subset;
  }
};

void add_override_flags(CLI::App* cmd, Overrides& ov) {
  cmd->add_option("--bits", ov.bits, "candidate bit-widths, e.g. 2,4,8");
  cmd->add_option("--strategy", ov.strategy, "amortized|serial|explicit")
      ->check(CLI::IsMember({"amortized", "serial", "explicit"}));
  cmd->add_option("--method", ov.method, "multiquant|any-precision|adabit")
      ->check(CLI::IsMember({"multiquant", "any-precision", "adabit"}));
  cmd->add_option("--distill", ov.distill, "on|off")->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--seed", ov.seed, "run seed");
  cmd->add_option("--epochs", ov.epochs, "training epochs");
  cmd->add_option("--subset", ov.subset, "training subset size (0 = all)");
  cmd->add_option("--out", ov.out, "output directory");
  cmd->add_option("--dataset", ov.dataset, "mnist-idx|synthetic");
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_env();
  CLI::App app{"MultiQuant arbitrary bit-width quantization lab"};
  app.require_subcommand(1);

  // ---- train -------------------------------------------------------------
  std::string train_config;
  Overrides train_ov;
  auto* train_cmd = app.add_subcommand("train", "run one training experiment");
  train_cmd->add_option("--config", train_config, "JSON run config (or a prior metadata.json)")
      ->required();
  add_override_flags(train_cmd, train_ov);

  // ---- eval --------------------------------------------------------------
  std::string eval_ck, eval_bits, eval_images, eval_labels;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_ck, "checkpoint file")->required();
  eval_cmd->add_option("--bits", eval_bits, "bit-widths to evaluate (default: all candidates)");
  eval_cmd->add_option("--images", eval_images, "IDX images file")->required();
  eval_cmd->add_option("--labels", eval_labels, "IDX labels file")->required();

  // ---- ablate ------------------------------------------------------------
  std::string ablate_config;
  Overrides ablate_ov;
  auto* ablate_cmd =
      app.add_subcommand("ablate", "selection-strategy x distillation grid (4 runs)");
  ablate_cmd->add_option("--config", ablate_config, "base JSON run config")->required();
  add_override_flags(ablate_cmd, ablate_ov);

  // ---- msqe --------------------------------------------------------------
  std::string msqe_bits = "2,4,6,8", msqe_clips = "1,2,3", msqe_variant = "both";
  std::string msqe_out;
  int64_t msqe_samples = 1000000;
  int64_t msqe_seed = 1;
  bool msqe_transplant = false;
  auto* msqe_cmd = app.add_subcommand("msqe", "quantization-error model report");
  msqe_cmd->add_option("--bits", msqe_bits, "bit-widths");
  msqe_cmd->add_option("--clips", msqe_clips, "clip bounds u");
  msqe_cmd->add_option("--variant", msqe_variant, "squared|as-written|both")
      ->check(CLI::IsMember({"squared", "as-written", "both"}));
  msqe_cmd->add_option("--samples", msqe_samples, "Monte-Carlo sample count");
  msqe_cmd->add_option("--seed", msqe_seed, "Monte-Carlo seed");
  msqe_cmd->add_option("--out", msqe_out, "write CSV here");
  msqe_cmd->add_flag("--transplant", msqe_transplant,
                     "also print activation-noise transplant residuals");

  // ---- report ------------------------------------------------------------
  std::string report_run, report_compare;
  auto* report_cmd = app.add_subcommand("report", "summarize a run directory");
  report_cmd->add_option("--run", report_run, "run directory")->required();
  report_cmd->add_option("--compare", report_compare, "second run for side-by-side deltas");

  // ---- audit -------------------------------------------------------------
  std::string audit_bits = "2,4,6,8", audit_strategy = "amortized";
  auto* audit_cmd = app.add_subcommand("audit", "cost and storage audit of a branch plan");
  audit_cmd->add_option("--bits", audit_bits, "candidate bit-widths");
  audit_cmd->add_option("--strategy", audit_strategy, "amortized|serial")
      ->check(CLI::IsMember({"amortized", "serial"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      auto cfg = load_run_config(train_config);
      train_ov.apply(cfg);
      return run_experiment(cfg);
    }

    if (*eval_cmd) {
      auto ck = load_checkpoint(eval_ck);
      auto& model = ck.model();
      auto split = load_idx_pair(eval_images, eval_labels);
      auto bits = eval_bits.empty() ? model.candidates() : parse_bits(eval_bits);
      double sum = 0.0;
      for (int bit : bits) {
        const double acc = evaluate(model, split, bit);
        sum += acc;
        std::printf("bit %d  accuracy %.4f\n", bit, acc);
      }
      std::printf("Avg. %.4f\n", sum / static_cast<double>(bits.size()));
      return 0;
    }

    if (*ablate_cmd) {
      auto cfg = load_run_config(ablate_config);
      ablate_ov.apply(cfg);
      return run_ablation(cfg);
    }

    if (*msqe_cmd) {
      std::ostringstream os;
      os << msqe_csv_header() << '\n';
      std::vector<ClippingVariant> variants;
      if (msqe_variant != "as-written") variants.push_back(ClippingVariant::Squared);
      if (msqe_variant != "squared") variants.push_back(ClippingVariant::AsWritten);
      for (int b : parse_bits(msqe_bits)) {
        std::stringstream cs(msqe_clips);
        std::string item;
        while (std::getline(cs, item, ',')) {
          for (auto variant : variants) {
            ErrorModelConfig ec;
            ec.bits = b;
            ec.u = std::stod(item);
            ec.clipping_variant = variant;
            ec.n_samples = msqe_samples;
            ec.seed = static_cast<uint64_t>(msqe_seed);
            os << msqe_csv_row(msqe_report(ec)) << '\n';
          }
        }
      }
      std::cout << os.str();
      if (msqe_transplant) {
        Rng rng(static_cast<uint64_t>(msqe_seed));
        auto w = tensor({4, 3, 3, 3}, rng.normal_vector(108));
        std::vector<double> av(3 * 12 * 12);
        for (auto& v : av) v = rng.uniform(0.1, 2.0);
        auto a = tensor({1, 3, 12, 12}, av);
        for (int b : parse_bits(msqe_bits)) {
          auto res = noise_transplant_residual(w, a, b, static_cast<uint64_t>(msqe_seed));
          std::printf("transplant b_a=%d residual %.6f (support %.2f)%s\n", b, res.residual,
                      res.support_fraction, res.conclusive ? "" : " [inconclusive]");
        }
      }
      if (!msqe_out.empty()) {
        std::ofstream out(msqe_out);
        out << os.str();
      }
      return 0;
    }

    if (*report_cmd) {
      auto rep = read_run(report_run);
      if (report_compare.empty())
        std::cout << render_report(rep);
      else
        std::cout << render_comparison(rep, read_run(report_compare));
      return 0;
    }

    if (*audit_cmd) {
      auto plan = build_branch_plan(parse_bits(audit_bits));
      auto map = build_selection_map(plan, strategy_from_string(audit_strategy));
      auto arch = default_arch();
      std::printf("plan: %d full branch(es)%s, body MACs %lld\n", plan.n_full_branches,
                  plan.has_half_branch ? " + half" : "", (long long)arch.body_macs());
      std::printf("%-5s %-12s %16s %16s %7s\n", "bit", "selected", "multiquant", "reference",
                  "parity");
      for (int bit : plan.bit_candidates) {
        auto cost = compute_cost(plan, map, bit, arch.body_macs());
        std::string sel;
        for (int id : map.at(bit)) sel += branch_id_str(id) + " ";
        std::printf("%-5d %-12s %16.0f %16.0f %7s\n", bit, sel.c_str(), cost.multiquant_units,
                    cost.reference_units, cost.parity ? "yes" : bit % 2 ? "odd" : "NO");
      }
      MultiQuantModel model(arch, plan, map, 1);
      auto rep = storage_report(model);
      std::printf("\nstorage:\n");
      for (const auto& item : rep.items)
        std::printf("  %-36s %10zu bytes\n", item.name.c_str(), item.bytes);
      std::printf("  %-36s %10zu bytes\n", "total", rep.total_bytes);
      std::printf("  body compression vs fp32: %.2fx (packing overhead %.3f%%)\n",
                  rep.compression_ratio, 100.0 * rep.packing_overhead);
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
