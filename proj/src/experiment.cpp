#include "eln/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "eln/checkpoint.hpp"
#include "eln/code_hash.hpp"
#include "eln/metrics.hpp"

namespace fs = std::filesystem;

namespace eln {

namespace {

template <typename T>
T get_value(const nlohmann::json& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("invalid value for '" + key + "'");
  }
}

// Runs a section parser, turning JSON type errors into ConfigError.
template <typename F>
void parse_section(const std::string& key, F&& f) {
  try {
    f();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid value under '" + key + "': " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

bool valid_variant_name(const std::string& name) {
  if (name.empty() || name.front() == '_') return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

int stage_order(Stage s) { return static_cast<int>(s); }

}  // namespace

void ExperimentConfig::validate() const {
  train.validate();
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split_ratio must lie in (0, 1)");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (thresholds.empty()) throw ConfigError("thresholds must not be empty");
  for (double t : thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("thresholds must lie in (0, 1)");
  }
  if (eval_batch_size < 1) throw ConfigError("eval_batch_size must be >= 1");
  if (!dataset.path) {
    dataset.synthetic.validate();
    if (dataset.synthetic.num_classes != train.model.num_classes) {
      throw ConfigError("dataset.synthetic.num_classes (" + std::to_string(dataset.synthetic.num_classes) +
                        ") differs from model.num_classes (" + std::to_string(train.model.num_classes) + ")");
    }
    if (dataset.count < 2) throw ConfigError("dataset.count must be >= 2");
    if (dataset.validation_count < 0) throw ConfigError("dataset.validation_count must be >= 0");
  }
  std::vector<std::string> names;
  for (const auto& v : variants) {
    if (!valid_variant_name(v.name)) throw ConfigError("invalid ablation variant name '" + v.name + "'");
    if (std::find(names.begin(), names.end(), v.name) != names.end()) {
      throw ConfigError("duplicate ablation variant '" + v.name + "'");
    }
    names.push_back(v.name);
    apply_overrides(train, v.overrides).validate();
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& cfg) {
  nlohmann::json dataset{{"synthetic", cfg.dataset.synthetic},
                         {"count", cfg.dataset.count},
                         {"validation_count", cfg.dataset.validation_count}};
  if (cfg.dataset.path) dataset["path"] = cfg.dataset.path->string();
  if (cfg.dataset.validation_path) dataset["validation_path"] = cfg.dataset.validation_path->string();
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : cfg.variants) variants.push_back({{"name", v.name}, {"overrides", v.overrides}});
  j = cfg.train;
  j.erase("seed");
  j["dataset"] = dataset;
  j["split_ratio"] = cfg.split_ratio;
  j["seeds"] = cfg.seeds;
  j["thresholds"] = cfg.thresholds;
  j["ablation"] = {{"variants", variants}};
  j["eval_batch_size"] = cfg.eval_batch_size;
  j["output_dir"] = cfg.output_dir.string();
}

AblationVariant named_variant(const std::string& name) {
  static const std::map<std::string, nlohmann::json> registry{
      {"eln", {{"mask", "eln"}}},
      {"secn", {{"mask", "secn"}, {"train_secn", true}}},
      {"threshold", {{"mask", "threshold"}}},
      {"unmasked", {{"mask", "none"}}},
      {"K0", {{"model", {{"num_aux_decoders", 0}}}, {"alphas", nlohmann::json::array()}}},
      {"K1", {{"model", {{"num_aux_decoders", 1}}}, {"alphas", {20.0}}}},
      {"K2", {{"model", {{"num_aux_decoders", 2}}}, {"alphas", {20.0, 50.0}}}},
      {"K3", {{"model", {{"num_aux_decoders", 3}}}, {"alphas", {20.0, 50.0, 100.0}}}},
      {"pseudo_only", {{"use_pseudo", true}, {"use_contra", false}}},
      {"contra_only", {{"use_pseudo", false}, {"use_contra", true}}},
      {"both", {{"use_pseudo", true}, {"use_contra", true}}},
      {"threshold_only", {{"mask", "threshold"}, {"use_pseudo", true}, {"use_contra", false}}},
  };
  auto it = registry.find(name);
  if (it == registry.end()) throw ConfigError("unknown ablation variant '" + name + "'");
  return AblationVariant{name, it->second};
}

std::vector<AblationVariant> default_variants() {
  std::vector<AblationVariant> out;
  for (const char* n : {"eln", "secn", "threshold", "unmasked", "K0", "K1", "K2", "K3", "pseudo_only", "contra_only",
                        "both", "threshold_only"}) {
    out.push_back(named_variant(n));
  }
  return out;
}

TrainConfig apply_overrides(const TrainConfig& base, const nlohmann::json& overrides) {
  if (!overrides.is_object()) throw ConfigError("ablation overrides must be an object");
  nlohmann::json j = base;
  j.merge_patch(overrides);
  TrainConfig out;
  parse_section("ablation.overrides", [&] { from_json(j, out); });
  return out;
}

ExperimentConfig parse_config_json(const nlohmann::json& j) {
  if (j.is_null()) return parse_config_json(nlohmann::json::object());
  if (!j.is_object()) throw ConfigError("config root must be an object");
  ExperimentConfig cfg;
  nlohmann::json train = nlohmann::json::object();
  for (const auto& [key, value] : j.items()) {
    if (key == "dataset") {
      if (!value.is_object()) throw ConfigError("invalid value for 'dataset'");
      for (const auto& [dk, dv] : value.items()) {
        const std::string path = "dataset." + dk;
        if (dk == "path") {
          cfg.dataset.path = fs::path(get_value<std::string>(dv, path));
        } else if (dk == "validation_path") {
          cfg.dataset.validation_path = fs::path(get_value<std::string>(dv, path));
        } else if (dk == "synthetic") {
          parse_section(path, [&] { from_json(dv, cfg.dataset.synthetic); });
        } else if (dk == "count") {
          cfg.dataset.count = get_value<std::int64_t>(dv, path);
        } else if (dk == "validation_count") {
          cfg.dataset.validation_count = get_value<std::int64_t>(dv, path);
        } else {
          throw ConfigError("unknown key '" + path + "'");
        }
      }
    } else if (key == "split_ratio") {
      cfg.split_ratio = get_value<double>(value, key);
    } else if (key == "seeds") {
      cfg.seeds = get_value<std::vector<std::uint64_t>>(value, key);
    } else if (key == "thresholds") {
      cfg.thresholds = get_value<std::vector<double>>(value, key);
    } else if (key == "eval_batch_size") {
      cfg.eval_batch_size = get_value<int>(value, key);
    } else if (key == "output_dir") {
      cfg.output_dir = fs::path(get_value<std::string>(value, key));
    } else if (key == "ablation") {
      if (!value.is_object()) throw ConfigError("invalid value for 'ablation'");
      for (const auto& [ak, av] : value.items()) {
        if (ak != "variants") throw ConfigError("unknown key 'ablation." + ak + "'");
        if (!av.is_array()) throw ConfigError("invalid value for 'ablation.variants'");
        for (const auto& v : av) {
          if (v.is_string()) {
            cfg.variants.push_back(named_variant(v.get<std::string>()));
          } else if (v.is_object()) {
            AblationVariant var;
            for (const auto& [vk, vv] : v.items()) {
              if (vk == "name") {
                var.name = get_value<std::string>(vv, "ablation.variants.name");
              } else if (vk == "overrides") {
                var.overrides = vv;
              } else {
                throw ConfigError("unknown key 'ablation.variants." + vk + "'");
              }
            }
            cfg.variants.push_back(std::move(var));
          } else {
            throw ConfigError("invalid value in 'ablation.variants'");
          }
        }
      }
    } else if (key == "seed") {
      throw ConfigError("unknown key 'seed' (use 'seeds' or --seed)");
    } else {
      train[key] = value;
    }
  }
  parse_section("config", [&] { from_json(train, cfg.train); });
  // A model section that changes the class count also retargets the scenes.
  if (!j.contains("dataset") || !j["dataset"].contains("synthetic") ||
      !j["dataset"]["synthetic"].contains("num_classes")) {
    cfg.dataset.synthetic.num_classes = cfg.train.model.num_classes;
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return parse_config_json(nlohmann::json::object());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config_json(j);
}

ExperimentData load_experiment_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  std::vector<Sample> all;
  ExperimentData data;
  const int classes = cfg.train.model.num_classes;
  if (cfg.dataset.path) {
    if (!fs::exists(*cfg.dataset.path)) {
      throw PrerequisiteError("dataset.path " + cfg.dataset.path->string() +
                              " does not exist; run `eln-lab gen-data` or fix the path");
    }
    all = load_folder_dataset(*cfg.dataset.path, classes);
    for (const auto& s : all) {
      if (!s.label) {
        throw IngestionError("sample '" + s.id + "' has no label; folder datasets must be fully labeled so the "
                             "split can hide labels for evaluation");
      }
    }
    if (cfg.dataset.validation_path) data.validation = load_folder_dataset(*cfg.dataset.validation_path, classes);
  } else {
    all = generate_dataset(cfg.dataset.synthetic, cfg.dataset.count, 0);
    data.validation = generate_dataset(cfg.dataset.synthetic, cfg.dataset.validation_count, cfg.dataset.count);
  }
  data.split = make_splits(all, cfg.split_ratio, seed);
  if (data.validation.empty()) {
    for (std::size_t i = 0; i < data.split.unlabeled().size(); ++i) {
      const auto& s = data.split.unlabeled()[i];
      data.validation.push_back(Sample{s.id, s.image, data.split.hidden_labels()[i]});
    }
  }
  return data;
}

std::string code_hash() { return kCodeHash; }

std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

fs::path seed_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.output_dir / ("seed_" + std::to_string(seed));
}

void truncate_metric_log(const fs::path& path, Stage stage, std::int64_t iteration) {
  if (!fs::exists(path)) return;
  std::vector<std::string> keep;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json rec;
      try {
        rec = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error&) {
        break;  // a torn final line from an interrupted write
      }
      const Stage s = stage_from_string(rec.at("stage").get<std::string>());
      const auto it = rec.at("iter").get<std::int64_t>();
      if (stage_order(s) < stage_order(stage) || (s == stage && it <= iteration)) keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

namespace {

struct Found {
  fs::path path;
  CheckpointData data;
};

std::optional<Found> most_advanced(const fs::path& dir, Stage limit) {
  std::optional<Found> best;
  for (const char* name : {"pretrain.ckpt", "stage1.ckpt", "stage2.ckpt", "last.ckpt"}) {
    const auto p = dir / name;
    if (!fs::exists(p)) continue;
    auto c = load_checkpoint(p);
    const Stage s = stage_from_string(c.stage);
    if (stage_order(s) > stage_order(limit)) continue;
    if (!best || std::pair(stage_order(s), c.iteration) >
                     std::pair(stage_order(stage_from_string(best->data.stage)), best->data.iteration)) {
      best = Found{p, std::move(c)};
    }
  }
  return best;
}

void write_resolved(const ExperimentConfig& cfg, const TrainConfig& train, const fs::path& dir, std::uint64_t seed) {
  nlohmann::json exp = cfg;
  nlohmann::json tr = train;
  nlohmann::json j{{"experiment", exp},
                   {"train", tr},
                   {"seed", seed},
                   {"code_hash", code_hash()},
                   {"config_hash", config_hash(tr)}};
  write_json(dir / "config.resolved.json", j);
}

}  // namespace

TrainingResult train_run(const ExperimentConfig& cfg, const TrainConfig& train, const ExperimentData& data,
                         const fs::path& run_dir, const RunOptions& opts) {
  const fs::path ckpt_dir = run_dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  write_resolved(cfg, train, run_dir, train.seed);

  TrainState state(train);
  const Stage limit = opts.stop_after.value_or(Stage::stage2);
  const fs::path log_path = run_dir / "metrics.jsonl";
  auto resume = most_advanced(ckpt_dir, limit);
  if (resume) {
    state.restore(resume->data);
    truncate_metric_log(log_path, state.stage, state.iteration);
  } else if (fs::exists(log_path)) {
    fs::remove(log_path);
  }
  MetricLog log(log_path, true);
  TrainingData td{data.split.labeled(), data.split.unlabeled(), data.validation};
  auto result = run_training(state, td, RunPaths{ckpt_dir}, log, opts.stop_after);
  if (opts.evaluate && state.stage == Stage::stage2) {
    write_json(run_dir / "eval.json", evaluate_checkpoint(cfg, data, ckpt_dir / "stage2.ckpt", train.seed));
  }
  return result;
}

nlohmann::json evaluate_checkpoint(const ExperimentConfig& cfg, const ExperimentData& data, const fs::path& checkpoint,
                                   std::uint64_t seed) {
  if (!fs::exists(checkpoint)) {
    throw PrerequisiteError("checkpoint " + checkpoint.string() + " does not exist; train first");
  }
  const auto ck = load_checkpoint(checkpoint);
  TrainConfig tc;
  parse_section("checkpoint config", [&] { from_json(ck.config, tc); });
  SegNet net(tc.model, 0);
  ck.load_parameters("student", net.params());
  std::optional<LocalizerModel> eln, secn;
  if (ck.has_prefix("eln")) {
    eln.emplace(tc.model.num_classes, 1, tc.eln, 0);
    ck.load_parameters("eln", eln->params());
  }
  if (ck.has_prefix("secn")) {
    secn.emplace(tc.model.num_classes, tc.model.num_classes, tc.eln, 0);
    ck.load_parameters("secn", secn->params());
  }
  auto thresholds = cfg.thresholds;
  if (std::find(thresholds.begin(), thresholds.end(), cfg.train.threshold) == thresholds.end()) {
    thresholds.push_back(cfg.train.threshold);
  }
  const auto seg = evaluate_segmentation(net, data.validation, cfg.eval_batch_size);
  const auto loc = compare_localizers(net, data.split.unlabeled(), data.split.hidden_labels(),
                                      LocalizerSet{eln ? &eln->net() : nullptr, secn ? &secn->net() : nullptr,
                                                   thresholds},
                                      cfg.eval_batch_size);
  nlohmann::json j = seg;
  j["localization"] = loc;
  for (const auto& [t, rep] : loc.threshold) {
    if (t == cfg.train.threshold) {
      j["localization"]["threshold_default"] = rep;
      j["localization"]["threshold_default"]["threshold"] = t;
    }
  }
  j["checkpoint"] = checkpoint.filename().string();
  j["stage"] = ck.stage;
  j["iteration"] = ck.iteration;
  j["seed"] = seed;
  j["config_hash"] = config_hash(ck.config);
  j["code_hash"] = code_hash();
  return j;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

void write_summary_csv(const fs::path& path, const std::vector<AblationSummaryRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  auto num = [](double v) {
    if (std::isnan(v)) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "variant,runs,failed,miou_mean,miou_std,miou,eln_f1_mean,eln_f1_std,threshold_f1_mean,threshold_f1_std\n";
  for (const auto& r : rows) {
    char pm[64] = "";
    if (!std::isnan(r.miou_mean)) std::snprintf(pm, sizeof pm, "%.4f +/- %.4f", r.miou_mean, r.miou_std);
    out << r.variant << ',' << r.runs << ',' << r.failed << ',' << num(r.miou_mean) << ',' << num(r.miou_std) << ','
        << pm << ',' << num(r.eln_f1_mean) << ',' << num(r.eln_f1_std) << ',' << num(r.threshold_f1_mean) << ','
        << num(r.threshold_f1_std) << '\n';
  }
}

Command command_from_string(const std::string& s) {
  if (s == "gen-data") return Command::gen_data;
  if (s == "pretrain") return Command::pretrain;
  if (s == "stage1") return Command::stage1;
  if (s == "stage2") return Command::stage2;
  if (s == "train") return Command::train;
  if (s == "eval") return Command::eval;
  if (s == "ablate") return Command::ablate;
  if (s == "plot") return Command::plot;
  throw ConfigError("unknown command '" + s + "'");
}

std::string to_string(Command c) {
  switch (c) {
    case Command::gen_data:
      return "gen-data";
    case Command::pretrain:
      return "pretrain";
    case Command::stage1:
      return "stage1";
    case Command::stage2:
      return "stage2";
    case Command::train:
      return "train";
    case Command::eval:
      return "eval";
    case Command::ablate:
      return "ablate";
    case Command::plot:
      return "plot";
  }
  return "unknown";
}

namespace {

TrainConfig seeded(TrainConfig tc, std::uint64_t seed) {
  tc.seed = seed;
  return tc;
}

void require_checkpoint(const fs::path& run_dir, const char* stage, const char* command) {
  if (!fs::exists(run_dir / "checkpoints" / (std::string(stage) + ".ckpt"))) {
    throw PrerequisiteError("`" + std::string(command) + "` needs " +
                            (run_dir / "checkpoints" / (std::string(stage) + ".ckpt")).string() +
                            "; run `eln-lab " + stage + " --config <same config>` first");
  }
}

// Config without the fields that only matter in stage 2: variants that agree
// on it share one stage-1 run.
std::string stage1_key(const TrainConfig& tc) {
  nlohmann::json j = tc;
  for (const char* k : {"mask", "threshold", "use_pseudo", "use_contra", "freeze_eln", "contrastive", "ema_beta",
                        "stage2_steps", "train_secn", "seed"}) {
    j.erase(k);
  }
  return config_hash(j);
}

int run_ablation(const ExperimentConfig& cfg) {
  const auto variants = cfg.variants.empty() ? default_variants() : cfg.variants;
  std::vector<TrainConfig> configs;
  std::map<std::string, bool> needs_secn;
  std::vector<std::string> keys;
  for (const auto& v : variants) {
    configs.push_back(apply_overrides(cfg.train, v.overrides));
    configs.back().validate();
    const auto key = stage1_key(configs.back());
    keys.push_back(key);
    needs_secn[key] = needs_secn[key] || configs.back().train_secn || configs.back().mask == MaskSource::secn;
  }
  const fs::path root = cfg.output_dir / "ablate";
  std::map<std::string, std::vector<nlohmann::json>> evals;
  std::map<std::string, std::int64_t> failures;
  for (auto seed : cfg.seeds) {
    const auto data = load_experiment_data(cfg, seed);
    std::map<std::string, std::optional<std::string>> shared_error;
    for (std::size_t i = 0; i < variants.size(); ++i) {
      const auto& name = variants[i].name;
      const fs::path run_dir = root / name / ("seed_" + std::to_string(seed));
      try {
        const fs::path shared = root / "_stage1" / keys[i] / ("seed_" + std::to_string(seed));
        if (!shared_error.count(keys[i])) {
          shared_error[keys[i]] = std::nullopt;
          try {
            auto base = seeded(configs[i], seed);
            base.train_secn = needs_secn[keys[i]];
            if (base.mask == MaskSource::secn && !base.train_secn) base.mask = MaskSource::eln;
            train_run(cfg, base, data, shared, RunOptions{Stage::stage1, false});
          } catch (const std::exception& e) {
            shared_error[keys[i]] = e.what();
          }
        }
        if (shared_error[keys[i]]) throw std::runtime_error("shared stage 1 failed: " + *shared_error[keys[i]]);
        fs::create_directories(run_dir / "checkpoints");
        if (!fs::exists(run_dir / "checkpoints" / "stage1.ckpt")) {
          fs::copy_file(shared / "checkpoints" / "stage1.ckpt", run_dir / "checkpoints" / "stage1.ckpt");
        }
        train_run(cfg, seeded(configs[i], seed), data, run_dir, RunOptions{std::nullopt, true});
        evals[name].push_back(read_json(run_dir / "eval.json"));
      } catch (const std::exception& e) {
        ++failures[name];
        std::fprintf(stderr, "ablate: variant %s seed %llu failed: %s\n", name.c_str(),
                     static_cast<unsigned long long>(seed), e.what());
      }
    }
  }

  std::vector<AblationSummaryRow> rows;
  nlohmann::json per_seed = nlohmann::json::object();
  for (const auto& v : variants) {
    AblationSummaryRow r;
    r.variant = v.name;
    r.failed = failures[v.name];
    std::vector<double> miou, eln_f1, thr_f1;
    for (const auto& e : evals[v.name]) {
      miou.push_back(e.at("mIoU").get<double>());
      const auto& loc = e.at("localization");
      if (loc.contains("eln")) eln_f1.push_back(loc["eln"]["f1"].get<double>());
      if (loc.contains("threshold_best")) thr_f1.push_back(loc["threshold_best"]["f1"].get<double>());
      per_seed[v.name].push_back({{"seed", e.at("seed")}, {"mIoU", e.at("mIoU")}});
    }
    r.runs = static_cast<std::int64_t>(miou.size());
    std::tie(r.miou_mean, r.miou_std) = mean_std(miou);
    std::tie(r.eln_f1_mean, r.eln_f1_std) = mean_std(eln_f1);
    std::tie(r.threshold_f1_mean, r.threshold_f1_std) = mean_std(thr_f1);
    rows.push_back(r);
  }
  write_summary_csv(cfg.output_dir / "summary.csv", rows);
  write_json(cfg.output_dir / "summary.json", per_seed);
  std::int64_t failed = 0;
  for (const auto& [n, f] : failures) failed += f;
  return failed > 0 ? 1 : 0;
}

}  // namespace

int run_command(Command command, const ExperimentConfig& cfg, const CommandOptions& opts) {
  cfg.validate();
  fs::create_directories(cfg.output_dir);
  {
    nlohmann::json j = cfg;
    write_json(cfg.output_dir / "config.resolved.json",
               nlohmann::json{{"experiment", j}, {"code_hash", code_hash()}, {"config_hash", config_hash(j)}});
  }
  switch (command) {
    case Command::gen_data: {
      if (cfg.dataset.path) throw ConfigError("gen-data writes synthetic scenes; remove dataset.path");
      const auto all = generate_dataset(cfg.dataset.synthetic, cfg.dataset.count, 0);
      const auto val =
          generate_dataset(cfg.dataset.synthetic, cfg.dataset.validation_count, cfg.dataset.count);
      write_folder_dataset(cfg.output_dir / "data" / "train", all);
      write_folder_dataset(cfg.output_dir / "data" / "validation", val);
      return 0;
    }
    case Command::pretrain:
    case Command::stage1:
    case Command::stage2:
    case Command::train: {
      for (auto seed : cfg.seeds) {
        const auto dir = seed_dir(cfg, seed);
        RunOptions ro;
        if (command == Command::pretrain) ro.stop_after = Stage::pretrain;
        if (command == Command::stage1) {
          require_checkpoint(dir, "pretrain", "stage1");
          ro.stop_after = Stage::stage1;
        }
        if (command == Command::stage2) require_checkpoint(dir, "stage1", "stage2");
        const auto data = load_experiment_data(cfg, seed);
        train_run(cfg, seeded(cfg.train, seed), data, dir, ro);
      }
      return 0;
    }
    case Command::eval: {
      for (auto seed : cfg.seeds) {
        const auto dir = seed_dir(cfg, seed);
        fs::path ckpt;
        if (opts.checkpoint) {
          ckpt = *opts.checkpoint;
        } else {
          for (const char* name : {"stage2.ckpt", "stage1.ckpt", "pretrain.ckpt"}) {
            if (fs::exists(dir / "checkpoints" / name)) {
              ckpt = dir / "checkpoints" / name;
              break;
            }
          }
          if (ckpt.empty()) {
            throw PrerequisiteError("no checkpoint under " + (dir / "checkpoints").string() +
                                    "; run `eln-lab train` or pass --checkpoint");
          }
        }
        const auto data = load_experiment_data(cfg, seed);
        fs::create_directories(dir);
        write_json(dir / "eval.json", evaluate_checkpoint(cfg, data, ckpt, seed));
      }
      return 0;
    }
    case Command::ablate:
      return run_ablation(cfg);
    case Command::plot: {
      const auto written = render_plots(cfg);
      if (written.empty()) {
        throw PrerequisiteError("nothing to plot under " + cfg.output_dir.string() +
                                "; run `eln-lab train` or `eln-lab ablate` first");
      }
      return 0;
    }
  }
  return 0;
}

}  // namespace eln
