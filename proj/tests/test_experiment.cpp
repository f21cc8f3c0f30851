#include <doctest.h>

#include <cmath>
#include <fstream>

#include "eln/experiment.hpp"
#include "fixtures.hpp"

using namespace eln;
namespace fs = std::filesystem;

namespace {

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

// Sets the centre tap of conv `name` so that output o copies input o for o < n.
void centre_identity(ParameterSet& params, const std::string& name, int n) {
  for (auto& p : params.entries()) {
    if (p.name == name + ".weight") {
      auto w = p.value.mutable_data();
      std::fill(w.begin(), w.end(), 0.0F);
      const auto out = p.value.dim(0), in = p.value.dim(1), kh = p.value.dim(2), kw = p.value.dim(3);
      for (std::int64_t o = 0; o < std::min<std::int64_t>(n, std::min(out, in)); ++o) {
        w[static_cast<std::size_t>(((o * in + o) * kh + kh / 2) * kw + kw / 2)] = 1.0F;
      }
    }
    if (p.name == name + ".bias") {
      auto b = p.value.mutable_data();
      std::fill(b.begin(), b.end(), 0.0F);
    }
  }
}

Tensor& param(ParameterSet& params, const std::string& name) {
  for (auto& p : params.entries()) {
    if (p.name == name) return p.value;
  }
  throw std::runtime_error("no parameter " + name);
}

// Uniform images: class 0 is black, class k lights channel k - 1.
std::vector<Sample> uniform_scenes(int per_class, int classes) {
  std::vector<Sample> out;
  for (int i = 0; i < per_class; ++i) {
    for (int k = 0; k < classes; ++k) {
      Sample s;
      s.id = "u" + std::to_string(i) + "_" + std::to_string(k);
      s.image = ImageArray(16, 16, 0.0F);
      if (k > 0) {
        for (int y = 0; y < 16; ++y) {
          for (int x = 0; x < 16; ++x) s.image.at(k - 1, y, x) = 1.0F;
        }
      }
      s.label = LabelArray(16, 16, k);
      out.push_back(std::move(s));
    }
  }
  return out;
}

// A SegNet that predicts the class of a uniform image exactly.
CheckpointData perfect_checkpoint(const TrainConfig& tc) {
  SegNet net(tc.model, 0);
  auto& p = net.params();
  for (std::size_t s = 0; s < tc.model.encoder_channels.size(); ++s) {
    centre_identity(p, "encoder.stage" + std::to_string(s) + ".down", 3);
    centre_identity(p, "encoder.stage" + std::to_string(s) + ".refine", 3);
  }
  centre_identity(p, "decoder.reduce_high", 3);
  centre_identity(p, "decoder.reduce_low", 0);
  centre_identity(p, "decoder.fuse", 3);
  centre_identity(p, "decoder.seg.0", 3);
  centre_identity(p, "decoder.seg.2", 0);
  auto& w = param(p, "decoder.seg.2.weight");
  auto& b = param(p, "decoder.seg.2.bias");
  const auto in = w.dim(1);
  for (int k = 1; k < tc.model.num_classes; ++k) {
    w.mutable_data()[static_cast<std::size_t>(k * in + (k - 1))] = 10.0F;
    b.mutable_data()[static_cast<std::size_t>(k)] = -5.0F;
  }
  CheckpointData ck;
  ck.stage = "stage2";
  ck.iteration = 0;
  ck.config = tc;
  ck.add_parameters("student", p);
  return ck;
}

}  // namespace

TEST_CASE("an empty config yields the defaults") {
  const auto cfg = parse_config_json(nlohmann::json::object());
  const ExperimentConfig defaults;
  CHECK(nlohmann::json(cfg) == nlohmann::json(defaults));
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("alphas must match the number of auxiliary decoders") {
  nlohmann::json j = {{"model", {{"num_aux_decoders", 3}}}, {"alphas", {20, 50, 100}}};
  const auto cfg = parse_config_json(j);
  CHECK(cfg.train.alphas == std::vector<double>{20, 50, 100});
  CHECK_NOTHROW(cfg.validate());
  j["alphas"] = {20, 50};
  CHECK_THROWS_AS(parse_config_json(j).validate(), ConfigError);
}

TEST_CASE("unknown and ill-typed keys are reported by name") {
  auto message = [](const nlohmann::json& j) {
    try {
      parse_config_json(j).validate();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message({{"bogus_key", 1}}).find("bogus_key") != std::string::npos);
  CHECK(message({{"dataset", {{"nope", 1}}}}).find("dataset.nope") != std::string::npos);
  CHECK(message({{"split_ratio", "half"}}).find("split_ratio") != std::string::npos);
  CHECK(message({{"seed", 3}}).find("seeds") != std::string::npos);
  CHECK_FALSE(message({{"ablation", {{"variants", {"not_a_variant"}}}}}).empty());
  CHECK_THROWS_AS(parse_config("/nonexistent/cfg.json"), ConfigError);
}

TEST_CASE("named variants apply their overrides") {
  TrainConfig base;
  const auto v = apply_overrides(base, named_variant("unmasked").overrides);
  CHECK(v.mask == MaskSource::none);
  const auto k3 = apply_overrides(base, named_variant("K3").overrides);
  CHECK(k3.model.num_aux_decoders == 3);
  CHECK(k3.alphas.size() == 3);
  const auto po = apply_overrides(base, named_variant("pseudo_only").overrides);
  CHECK(po.use_pseudo);
  CHECK_FALSE(po.use_contra);
  CHECK(default_variants().size() == 12);
}

TEST_CASE("evaluating a perfect predictor gives mIoU 1") {
  const auto dir = fixture::scratch("perfect");
  write_folder_dataset(dir / "train", uniform_scenes(4, 3));
  write_folder_dataset(dir / "val", uniform_scenes(2, 3));
  auto cfg = fixture::tiny_experiment(dir / "out");
  cfg.train.model.encoder_channels = {4, 4, 4};
  cfg.train.model.decoder_channels = 4;
  cfg.train.model.low_level_channels = 4;
  cfg.dataset.path = dir / "train";
  cfg.dataset.validation_path = dir / "val";
  cfg.split_ratio = 0.5;
  const auto data = load_experiment_data(cfg, 0);
  save_checkpoint(dir / "perfect.ckpt", perfect_checkpoint(cfg.train));
  const auto j = evaluate_checkpoint(cfg, data, dir / "perfect.ckpt", 0);
  CHECK(j.at("mIoU").get<double>() == 1.0);
  CHECK(j.at("pixel_accuracy").get<double>() == 1.0);
  for (const auto& c : j.at("per_class_iou")) CHECK(c.get<double>() == 1.0);
  // Every prediction is correct, so keeping all pixels is perfect localization.
  CHECK(j["localization"]["threshold_best"]["f1"].get<double>() == 1.0);
  fs::remove_all(dir);
}

TEST_CASE("stage commands need the previous stage's checkpoint") {
  const auto dir = fixture::scratch("prereq");
  const auto cfg = fixture::tiny_experiment(dir);
  try {
    run_command(Command::stage2, cfg);
    FAIL("stage2 ran without stage1.ckpt");
  } catch (const PrerequisiteError& e) {
    CHECK(std::string(e.what()).find("stage1") != std::string::npos);
  }
  CHECK_THROWS_AS(run_command(Command::stage1, cfg), PrerequisiteError);
  CHECK_THROWS_AS(run_command(Command::eval, cfg), PrerequisiteError);
  fs::remove_all(dir);
}

TEST_CASE("staged commands, train and eval reruns") {
  const auto dir = fixture::scratch("staged");
  const auto cfg = fixture::tiny_experiment(dir);
  CHECK(run_command(Command::pretrain, cfg) == 0);
  CHECK(run_command(Command::stage1, cfg) == 0);
  CHECK(run_command(Command::stage2, cfg) == 0);
  const auto sd = seed_dir(cfg, 0);
  CHECK(fs::exists(sd / "checkpoints" / "student.ckpt"));
  CHECK(fs::exists(sd / "config.resolved.json"));
  const auto first = fixture::read_file(sd / "eval.json");
  CHECK(run_command(Command::eval, cfg) == 0);
  CHECK(fixture::read_file(sd / "eval.json") == first);
  const auto ej = read_json(sd / "eval.json");
  CHECK(ej.at("code_hash").get<std::string>() == code_hash());
  CHECK(ej.at("checkpoint").get<std::string>() == "stage2.ckpt");

  // A single train command reproduces the staged metric log.
  const auto dir2 = fixture::scratch("staged_train");
  const auto cfg2 = fixture::tiny_experiment(dir2);
  CHECK(run_command(Command::train, cfg2) == 0);
  CHECK(fixture::read_file(seed_dir(cfg2, 0) / "metrics.jsonl") == fixture::read_file(sd / "metrics.jsonl"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("ablation writes one eval per run and a consistent summary") {
  const auto dir = fixture::scratch("ablate");
  auto cfg = fixture::tiny_experiment(dir);
  cfg.seeds = {0, 1, 2};
  cfg.variants = {named_variant("eln"), named_variant("unmasked")};
  CHECK(run_command(Command::ablate, cfg) == 0);
  int evals = 0;
  for (const auto& v : cfg.variants) {
    std::vector<double> miou;
    for (auto s : cfg.seeds) {
      const auto p = dir / "ablate" / v.name / ("seed_" + std::to_string(s)) / "eval.json";
      REQUIRE(fs::exists(p));
      ++evals;
      miou.push_back(read_json(p).at("mIoU").get<double>());
    }
    const auto [m, sd] = mean_std(miou);
    CHECK(m == doctest::Approx((miou[0] + miou[1] + miou[2]) / 3.0).epsilon(1e-12));
    CHECK(sd >= 0.0);
  }
  CHECK(evals == 6);
  std::ifstream csv(dir / "summary.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0].rfind("variant,runs,failed,miou_mean", 0) == 0);
  CHECK(lines[1].rfind("eln,3,0,", 0) == 0);
  CHECK(lines[2].rfind("unmasked,3,0,", 0) == 0);
  // summary.csv means equal the arithmetic means of the eval files.
  for (std::size_t r = 0; r < 2; ++r) {
    std::vector<double> miou;
    for (auto s : cfg.seeds) {
      miou.push_back(read_json(dir / "ablate" / cfg.variants[r].name / ("seed_" + std::to_string(s)) / "eval.json")
                         .at("mIoU")
                         .get<double>());
    }
    const auto row = lines[r + 1];
    const auto c1 = row.find(',', row.find(',', row.find(',') + 1) + 1);
    const double mean = std::stod(row.substr(c1 + 1, row.find(',', c1 + 1) - c1 - 1));
    CHECK(std::fabs(mean - (miou[0] + miou[1] + miou[2]) / 3.0) <= 1e-15);
  }
  CHECK_FALSE(render_plots(cfg).empty());
  fs::remove_all(dir);
}

TEST_CASE("metric log truncation keeps records up to the checkpoint") {
  const auto dir = fixture::scratch("truncate");
  const auto path = dir / "metrics.jsonl";
  {
    std::ofstream out(path);
    out << R"({"stage":"pretrain","iter":1})" << '\n'
        << R"({"stage":"stage1","iter":1})" << '\n'
        << R"({"stage":"stage1","iter":2})" << '\n'
        << R"({"stage":"stage2","iter":1})" << '\n'
        << R"({"stage":"stage2","it)";
  }
  truncate_metric_log(path, Stage::stage1, 1);
  CHECK(fixture::read_file(path) == "{\"stage\":\"pretrain\",\"iter\":1}\n{\"stage\":\"stage1\",\"iter\":1}\n");
  fs::remove_all(dir);
}

TEST_CASE("config hashes are stable and sensitive") {
  const nlohmann::json a = {{"x", 1}};
  CHECK(config_hash(a) == config_hash(nlohmann::json{{"x", 1}}));
  CHECK(config_hash(a) != config_hash(nlohmann::json{{"x", 2}}));
  CHECK(config_hash(a).size() == 16);
  CHECK(code_hash().size() == 40);
}
