#include "multiquant/harness.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "multiquant/error_analysis.hpp"

namespace mq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kKnownKeys = {
    "method",        "bits",           "strategy",       "explicit-map",  "distill",
    "epochs",        "batch-size",     "weight-lr",      "weight-momentum",
    "weight-decay",  "quant-lr",       "lr-schedule",    "seed",          "eval-subset",
    "augment-flip",  "augment-crop",   "dataset",        "train-images",  "train-labels",
    "test-images",   "test-labels",    "subset",         "synthetic-classes",
    "synthetic-dim", "synthetic-n",    "arch",           "out",           "emit-msqe",
    "msqe-samples",
};

RunConfig from_json(const json& j, std::vector<std::string>& errors) {
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (std::find(kKnownKeys.begin(), kKnownKeys.end(), key) == kKnownKeys.end())
      errors.push_back("unknown config key '" + key + "'");
  }
  auto get = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const json::exception&) {
      errors.push_back(std::string("config key '") + key + "' has the wrong type");
    }
  };
  get("method", cfg.train.method);
  get("bits", cfg.train.bits);
  get("strategy", cfg.train.strategy);
  get("distill", cfg.train.distill);
  get("epochs", cfg.train.epochs);
  get("batch-size", cfg.train.batch_size);
  get("weight-lr", cfg.train.weight_lr);
  get("weight-momentum", cfg.train.weight_momentum);
  get("weight-decay", cfg.train.weight_decay);
  get("quant-lr", cfg.train.quant_lr);
  get("lr-schedule", cfg.train.lr_schedule);
  get("seed", cfg.train.seed);
  get("eval-subset", cfg.train.eval_subset);
  get("augment-flip", cfg.train.augment_flip);
  get("augment-crop", cfg.train.augment_crop);
  get("dataset", cfg.dataset);
  get("train-images", cfg.train_images);
  get("train-labels", cfg.train_labels);
  get("test-images", cfg.test_images);
  get("test-labels", cfg.test_labels);
  get("subset", cfg.subset);
  get("synthetic-classes", cfg.synthetic_classes);
  get("synthetic-dim", cfg.synthetic_dim);
  get("synthetic-n", cfg.synthetic_n);
  get("arch", cfg.arch);
  get("out", cfg.out_dir);
  get("emit-msqe", cfg.emit_msqe);
  get("msqe-samples", cfg.msqe_samples);
  if (j.contains("explicit-map")) {
    try {
      for (const auto& [bit, ids] : j.at("explicit-map").items()) {
        std::vector<int> sel;
        for (const auto& id : ids) {
          if (id.is_string() && id.get<std::string>() == "H")
            sel.push_back(kHalfBranch);
          else
            sel.push_back(id.get<int>());
        }
        cfg.train.explicit_map[std::stoi(bit)] = sel;
      }
    } catch (const std::exception&) {
      errors.push_back("config key 'explicit-map' is malformed");
    }
  }
  return cfg;
}

json to_json(const RunConfig& cfg) {
  json j;
  j["method"] = cfg.train.method;
  j["bits"] = cfg.train.bits;
  j["strategy"] = cfg.train.strategy;
  if (!cfg.train.explicit_map.empty()) {
    json m;
    for (const auto& [bit, sel] : cfg.train.explicit_map) {
      json ids = json::array();
      for (int id : sel)
        if (id == kHalfBranch)
          ids.push_back("H");
        else
          ids.push_back(id);
      m[std::to_string(bit)] = ids;
    }
    j["explicit-map"] = m;
  }
  j["distill"] = cfg.train.distill;
  j["epochs"] = cfg.train.epochs;
  j["batch-size"] = cfg.train.batch_size;
  j["weight-lr"] = cfg.train.weight_lr;
  j["weight-momentum"] = cfg.train.weight_momentum;
  j["weight-decay"] = cfg.train.weight_decay;
  j["quant-lr"] = cfg.train.quant_lr;
  j["lr-schedule"] = cfg.train.lr_schedule;
  j["seed"] = cfg.train.seed;
  j["eval-subset"] = cfg.train.eval_subset;
  j["augment-flip"] = cfg.train.augment_flip;
  j["augment-crop"] = cfg.train.augment_crop;
  j["dataset"] = cfg.dataset;
  if (!cfg.train_images.empty()) j["train-images"] = cfg.train_images;
  if (!cfg.train_labels.empty()) j["train-labels"] = cfg.train_labels;
  if (!cfg.test_images.empty()) j["test-images"] = cfg.test_images;
  if (!cfg.test_labels.empty()) j["test-labels"] = cfg.test_labels;
  j["subset"] = cfg.subset;
  j["synthetic-classes"] = cfg.synthetic_classes;
  j["synthetic-dim"] = cfg.synthetic_dim;
  j["synthetic-n"] = cfg.synthetic_n;
  j["arch"] = cfg.arch;
  j["out"] = cfg.out_dir;
  j["emit-msqe"] = cfg.emit_msqe;
  j["msqe-samples"] = cfg.msqe_samples;
  return j;
}

std::string csv_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::vector<std::string> validate_run_config(const RunConfig& cfg) {
  std::vector<std::string> errors;
  const auto& t = cfg.train;
  if (t.method != "multiquant" && t.method != "any-precision" && t.method != "adabit")
    errors.push_back("method must be multiquant, any-precision or adabit");
  if (t.bits.empty()) errors.push_back("bits must not be empty");
  for (int b : t.bits)
    if (b < 2 || b > 8) errors.push_back("bit-width " + std::to_string(b) + " outside [2, 8]");
  if (t.strategy != "serial" && t.strategy != "amortized" && t.strategy != "explicit")
    errors.push_back("strategy must be serial, amortized or explicit");
  if (t.strategy == "explicit" && t.explicit_map.empty())
    errors.push_back("strategy 'explicit' needs an explicit-map");
  if (t.epochs < 0) errors.push_back("epochs must be nonnegative");
  if (t.batch_size < 1) errors.push_back("batch-size must be positive");
  if (t.weight_lr < 0 || t.quant_lr < 0) errors.push_back("learning rates must be nonnegative");
  if (t.lr_schedule != "step" && t.lr_schedule != "cosine")
    errors.push_back("lr-schedule must be step or cosine");
  if (cfg.dataset == "mnist-idx") {
    for (const auto& [label, path] :
         std::vector<std::pair<std::string, std::string>>{{"train-images", cfg.train_images},
                                                          {"train-labels", cfg.train_labels},
                                                          {"test-images", cfg.test_images},
                                                          {"test-labels", cfg.test_labels}}) {
      if (path.empty())
        errors.push_back("dataset mnist-idx needs " + label);
      else if (!fs::exists(path))
        errors.push_back(label + " file does not exist: " + path);
    }
  } else if (cfg.dataset == "synthetic") {
    if (cfg.synthetic_classes < 2) errors.push_back("synthetic-classes must be >= 2");
    if (cfg.synthetic_dim < 4) errors.push_back("synthetic-dim must be >= 4");
    if (cfg.synthetic_n < 10) errors.push_back("synthetic-n must be >= 10");
  } else {
    errors.push_back("dataset must be mnist-idx or synthetic");
  }
  if (cfg.subset < 0) errors.push_back("subset must be nonnegative");
  if (cfg.arch != "default" && cfg.arch != "tiny")
    errors.push_back("arch must be default or tiny");
  if (cfg.out_dir.empty()) errors.push_back("out directory is required");
  if (cfg.msqe_samples < 10000) errors.push_back("msqe-samples must be >= 1e4");
  return errors;
}

RunConfig run_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  if (j.contains("config")) j = j.at("config");  // metadata file of a previous run
  std::vector<std::string> errors;
  auto cfg = from_json(j, errors);
  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return run_config_from_json_text(buf.str());
}

ArchSpec arch_from_config(const RunConfig& cfg, int in_h, int in_w, int classes) {
  ArchSpec arch;
  arch.in_channels = 1;
  arch.in_h = in_h;
  arch.in_w = in_w;
  arch.classes = classes;
  if (cfg.arch == "tiny") {
    arch.stem_channels = 8;
    arch.body = {{8, true}, {8, true}};
  }
  return arch;
}

DatasetHandle load_dataset(const RunConfig& cfg) {
  DatasetHandle data;
  if (cfg.dataset == "mnist-idx") {
    data = load_mnist_idx(cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels);
  } else {
    data = make_synthetic(cfg.synthetic_classes, cfg.synthetic_dim, cfg.synthetic_n,
                          cfg.train.seed);
  }
  if (cfg.subset > 0) data.train = subset_split(data.train, cfg.subset, cfg.train.seed);
  return data;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace

int run_experiment(const RunConfig& cfg) {
  // validate everything before touching the filesystem
  auto errors = validate_run_config(cfg);
  if (!errors.empty()) {
    for (const auto& e : errors) std::fprintf(stderr, "config error: %s\n", e.c_str());
    return 2;
  }

  auto data = load_dataset(cfg);
  auto arch = arch_from_config(cfg, data.train.height, data.train.width, data.train.classes);
  auto model = build_model(arch, cfg.train);

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);

  // metadata first: a run is reproducible from this file alone
  json meta;
  meta["format"] = "multiquant-run";
  meta["version"] = 1;
  meta["config"] = to_json(cfg);
  meta["arch-hash"] = arch.hash();
  if (cfg.train.method == "multiquant") {
    const auto& mq_model = dynamic_cast<const MultiQuantModel&>(*model);
    json sel;
    for (const auto& [bit, ids] : mq_model.selection().selected) {
      json arr = json::array();
      for (int id : ids) arr.push_back(branch_id_str(id));
      sel[std::to_string(bit)] = arr;
    }
    meta["selection-map"] = sel;
    json usage;
    for (const auto& [id, count] : branch_usage(mq_model.plan(), mq_model.selection()))
      usage[branch_id_str(id)] = count;
    meta["branch-usage"] = usage;
  }
  write_text(out / "metadata.json", meta.dump(2) + "\n");

  auto result = train(*model, data, cfg.train, (out / "checkpoint.mqck").string());

  std::ostringstream hist;
  hist << history_csv_header() << '\n';
  for (const auto& row : result.history) hist << history_csv_row(row) << '\n';
  write_text(out / "history.csv", hist.str());

  if (result.aborted) {
    json abort;
    abort["aborted"] = true;
    abort["reason"] = result.abort_reason;
    write_text(out / "aborted.json", abort.dump(2) + "\n");
    std::fprintf(stderr, "run aborted: %s\n", result.abort_reason.c_str());
    return 3;
  }

  // storage + size row
  StorageReport storage;
  if (const auto* mq_model = dynamic_cast<const MultiQuantModel*>(model.get()))
    storage = storage_report(*mq_model);
  else
    storage = storage_report(dynamic_cast<const SingleModel&>(*model));
  {
    std::ostringstream os;
    os << "item,bytes\n";
    for (const auto& item : storage.items) os << '"' << item.name << "\"," << item.bytes << '\n';
    os << "total," << storage.total_bytes << '\n';
    os << "fp32_body_reference," << storage.fp32_body_reference_bytes << '\n';
    os << "compression_ratio," << csv_double(storage.compression_ratio) << '\n';
    os << "packing_overhead," << csv_double(storage.packing_overhead) << '\n';
    write_text(out / "storage_report.csv", os.str());
  }

  // Table-2 shaped results: per-bit rows, average, megabytes
  {
    std::ostringstream os;
    os << "bit,accuracy\n";
    for (auto it = result.final_acc.rbegin(); it != result.final_acc.rend(); ++it)
      os << it->first << ',' << csv_double(it->second) << '\n';
    os << "Avg.," << csv_double(result.avg_acc) << '\n';
    os << "Size (MB)," << std::fixed << std::setprecision(2)
       << storage.total_bytes / 1e6 << '\n';
    write_text(out / "results.csv", os.str());
  }

  if (cfg.train.method == "multiquant") {
    const auto& mq_model = dynamic_cast<const MultiQuantModel&>(*model);
    std::ostringstream os;
    os << "bit,selected,multiquant_units,reference_units,parity\n";
    for (int bit : cfg.train.bits) {
      auto cost = compute_cost(mq_model.plan(), mq_model.selection(), bit, arch.body_macs());
      os << bit << ",\"";
      const auto& sel = mq_model.selection().at(bit);
      for (size_t i = 0; i < sel.size(); ++i) os << (i ? " " : "") << branch_id_str(sel[i]);
      os << "\"," << csv_double(cost.multiquant_units) << ',' << csv_double(cost.reference_units)
         << ',' << (cost.parity ? 1 : 0) << '\n';
    }
    write_text(out / "cost_report.csv", os.str());
  }

  if (cfg.emit_msqe) {
    std::ostringstream os;
    os << msqe_csv_header() << '\n';
    for (int b : cfg.train.bits) {
      for (double u : {1.0, 2.0, 3.0}) {
        for (auto variant : {ClippingVariant::Squared, ClippingVariant::AsWritten}) {
          ErrorModelConfig ec;
          ec.bits = b;
          ec.u = u;
          ec.clipping_variant = variant;
          ec.n_samples = cfg.msqe_samples;
          ec.seed = cfg.train.seed;
          os << msqe_csv_row(msqe_report(ec)) << '\n';
        }
      }
    }
    write_text(out / "msqe.csv", os.str());
  }

  for (const auto& [bit, acc] : result.final_acc)
    std::printf("bit %d  accuracy %.4f\n", bit, acc);
  std::printf("Avg. %.4f\nSize (MB) %.2f\n", result.avg_acc, storage.total_bytes / 1e6);
  return 0;
}

int run_ablation(const RunConfig& base) {
  int status = 0;
  for (const std::string strategy : {"amortized", "serial"}) {
    for (bool distill : {true, false}) {
      RunConfig cfg = base;
      cfg.train.strategy = strategy;
      cfg.train.distill = distill;
      cfg.out_dir = (fs::path(base.out_dir) /
                     (strategy + std::string(distill ? "-distill" : "-nodistill")))
                        .string();
      std::printf("[ablate] %s %s -> %s\n", strategy.c_str(),
                  distill ? "distill" : "nodistill", cfg.out_dir.c_str());
      const int rc = run_experiment(cfg);
      if (rc != 0) status = rc;
    }
  }
  return status;
}

RunReport read_run(const std::string& run_dir) {
  const fs::path dir(run_dir);
  std::ifstream meta_in(dir / "metadata.json");
  if (!meta_in) throw std::runtime_error("missing metadata.json in '" + run_dir + "'");
  json meta = json::parse(meta_in);
  const auto& c = meta.at("config");

  RunReport rep;
  rep.method = c.at("method").get<std::string>();
  rep.bits = c.at("bits").get<std::vector<int>>();
  rep.strategy = c.at("strategy").get<std::string>();
  rep.distill = c.at("distill").get<bool>();
  rep.seed = c.at("seed").get<uint64_t>();
  if (meta.contains("branch-usage"))
    for (const auto& [id, count] : meta.at("branch-usage").items())
      rep.branch_usage[id] = count.get<int>();

  if (fs::exists(dir / "aborted.json")) {
    rep.aborted = true;
    return rep;
  }
  std::ifstream results(dir / "results.csv");
  if (!results) throw std::runtime_error("missing history file results.csv in '" + run_dir + "'");
  std::string line;
  std::getline(results, line);  // header
  while (std::getline(results, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    const std::string key = line.substr(0, comma);
    const double value = std::stod(line.substr(comma + 1));
    if (key == "Avg.")
      rep.avg_accuracy = value;
    else if (key == "Size (MB)")
      rep.size_mb = value;
    else
      rep.accuracy[std::stoi(key)] = value;
  }
  return rep;
}

std::string render_report(const RunReport& r) {
  std::ostringstream os;
  os << "method=" << r.method << " strategy=" << r.strategy
     << " distill=" << (r.distill ? "on" : "off") << " seed=" << r.seed << "\n";
  if (r.aborted) {
    os << "run aborted; no results\n";
    return os.str();
  }
  os << std::fixed << std::setprecision(4);
  os << "bit   accuracy\n";
  for (auto it = r.accuracy.rbegin(); it != r.accuracy.rend(); ++it)
    os << std::setw(3) << it->first << "   " << it->second << "\n";
  os << "Avg.  " << r.avg_accuracy << "\n";
  os << "Size (MB)  " << std::setprecision(2) << r.size_mb << "\n";
  if (!r.branch_usage.empty()) {
    os << "branch usage (" << r.strategy << "):";
    for (const auto& [id, count] : r.branch_usage) os << ' ' << id << ':' << count;
    os << "\n";
  }
  return os.str();
}

std::string render_comparison(const RunReport& a, const RunReport& b) {
  std::ostringstream os;
  os << "A: " << render_report(a) << "\nB: " << render_report(b) << "\n";
  os << std::fixed << std::setprecision(4);
  os << "per-bit delta (A - B):\n";
  for (const auto& [bit, acc] : a.accuracy) {
    auto it = b.accuracy.find(bit);
    if (it == b.accuracy.end()) continue;
    os << std::setw(3) << bit << "   " << acc - it->second << "\n";
  }
  os << "Avg.  " << a.avg_accuracy - b.avg_accuracy << "\n";
  return os.str();
}

}  // namespace mq
