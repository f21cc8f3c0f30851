#include "eln/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "eln/ops.hpp"

namespace eln {

namespace {

template <typename T>
T get_checked(const nlohmann::json& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("invalid value for '" + key + "'");
  }
}

}  // namespace

void OptimConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("optim.learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optim.beta1 and optim.beta2 must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("optim.epsilon must be > 0");
  if (labeled_batch < 1 || unlabeled_batch < 1) throw ConfigError("optim batch sizes must be >= 1");
}

void to_json(nlohmann::json& j, const OptimConfig& cfg) {
  j = nlohmann::json{{"learning_rate", cfg.learning_rate}, {"weight_decay", cfg.weight_decay},
                     {"beta1", cfg.beta1},                 {"beta2", cfg.beta2},
                     {"epsilon", cfg.epsilon},             {"labeled_batch", cfg.labeled_batch},
                     {"unlabeled_batch", cfg.unlabeled_batch}};
}

void from_json(const nlohmann::json& j, OptimConfig& cfg) {
  for (const auto& [key, value] : j.items()) {
    const std::string path = "optim." + key;
    if (key == "learning_rate") {
      cfg.learning_rate = get_checked<double>(value, path);
    } else if (key == "weight_decay") {
      cfg.weight_decay = get_checked<double>(value, path);
    } else if (key == "beta1") {
      cfg.beta1 = get_checked<double>(value, path);
    } else if (key == "beta2") {
      cfg.beta2 = get_checked<double>(value, path);
    } else if (key == "epsilon") {
      cfg.epsilon = get_checked<double>(value, path);
    } else if (key == "labeled_batch") {
      cfg.labeled_batch = get_checked<int>(value, path);
    } else if (key == "unlabeled_batch") {
      cfg.unlabeled_batch = get_checked<int>(value, path);
    } else {
      throw ConfigError("unknown key '" + path + "'");
    }
  }
}

void AdamW::step(const std::string& group, ParameterSet& params) {
  const double lr = cfg_.learning_rate, wd = cfg_.weight_decay;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2, eps = cfg_.epsilon;
  for (auto& p : params.entries()) {
    if (!p.value.has_grad()) continue;
    auto& mo = moments_[group + "/" + p.name];
    const auto n = static_cast<std::size_t>(p.value.numel());
    if (mo.m.empty()) {
      mo.m.assign(n, 0.0F);
      mo.v.assign(n, 0.0F);
    }
    ++mo.t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(mo.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(mo.t));
    auto g = p.value.grad();
    auto w = p.value.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      const double m = b1 * mo.m[i] + (1.0 - b1) * gi;
      const double v = b2 * mo.v[i] + (1.0 - b2) * gi * gi;
      mo.m[i] = static_cast<float>(m);
      mo.v[i] = static_cast<float>(v);
      const double update = (m / c1) / (std::sqrt(v / c2) + eps) + wd * w[i];
      w[i] = static_cast<float>(w[i] - lr * update);
    }
  }
}

std::int64_t AdamW::steps(const std::string& key) const {
  auto it = moments_.find(key);
  return it == moments_.end() ? 0 : it->second.t;
}

void AdamW::save(CheckpointData& ckpt) const {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [key, mo] : moments_) {
    const auto n = static_cast<std::int64_t>(mo.m.size());
    ckpt.add_array("optim.m/" + key, {n}, mo.m);
    ckpt.add_array("optim.v/" + key, {n}, mo.v);
    counts[key] = mo.t;
  }
  ckpt.meta["optimizer_steps"] = counts;
}

void AdamW::load(const CheckpointData& ckpt) {
  moments_.clear();
  if (!ckpt.meta.contains("optimizer_steps")) return;
  for (const auto& [key, t] : ckpt.meta["optimizer_steps"].items()) {
    const auto* m = ckpt.find("optim.m/" + key);
    const auto* v = ckpt.find("optim.v/" + key);
    if (m == nullptr || v == nullptr || m->values.size() != v->values.size()) {
      throw IoError("checkpoint: optimizer moments missing for '" + key + "'");
    }
    moments_[key] = Moments{m->values, v->values, t.get<std::int64_t>()};
  }
}

void ema_update(ParameterSet& teacher, const ParameterSet& student, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("ema beta must lie in [0, 1)");
  if (!teacher.same_topology(student)) throw std::invalid_argument("ema_update: teacher/student topology mismatch");
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto t = teacher.entries()[i].value.mutable_data();
    auto s = student.entries()[i].value.data();
    for (std::size_t k = 0; k < t.size(); ++k) {
      t[k] = static_cast<float>(beta * static_cast<double>(t[k]) + (1.0 - beta) * static_cast<double>(s[k]));
    }
  }
}

void EMAState::validate() const {
  if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("ema_beta must lie in [0, 1)");
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::pretrain:
      return "pretrain";
    case Stage::stage1:
      return "stage1";
    case Stage::stage2:
      return "stage2";
  }
  return "unknown";
}

Stage stage_from_string(const std::string& s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "stage1") return Stage::stage1;
  if (s == "stage2") return Stage::stage2;
  throw ConfigError("unknown stage '" + s + "'");
}

std::string to_string(MaskSource m) {
  switch (m) {
    case MaskSource::eln:
      return "eln";
    case MaskSource::secn:
      return "secn";
    case MaskSource::threshold:
      return "threshold";
    case MaskSource::none:
      return "none";
  }
  return "unknown";
}

MaskSource mask_source_from_string(const std::string& s) {
  if (s == "eln") return MaskSource::eln;
  if (s == "secn") return MaskSource::secn;
  if (s == "threshold") return MaskSource::threshold;
  if (s == "none") return MaskSource::none;
  throw ConfigError("unknown mask source '" + s + "' (expected eln, secn, threshold or none)");
}

void TrainConfig::validate() const {
  model.validate();
  optim.validate();
  augmentation.validate();
  contrastive.validate();
  if (alphas.size() != static_cast<std::size_t>(model.num_aux_decoders)) {
    throw ConfigError("alphas has " + std::to_string(alphas.size()) + " entries but model.num_aux_decoders is " +
                      std::to_string(model.num_aux_decoders));
  }
  for (double a : alphas) {
    if (!(a > 0.0)) throw ConfigError("alphas must be > 0");
  }
  EMAState{ema_beta, 0}.validate();
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("threshold must lie in (0, 1]");
  if (pretrain_steps < 0 || stage1_steps < 0 || stage2_steps < 0) throw ConfigError("stage lengths must be >= 0");
  if (eval_every < 0 || checkpoint_every < 0) throw ConfigError("eval_every and checkpoint_every must be >= 0");
  if (mask == MaskSource::secn && !train_secn) throw ConfigError("mask 'secn' requires train_secn");
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
  j = nlohmann::json{{"model", cfg.model},
                     {"eln", cfg.eln},
                     {"optim", cfg.optim},
                     {"augmentation", cfg.augmentation},
                     {"contrastive", cfg.contrastive},
                     {"alphas", cfg.alphas},
                     {"ema_beta", cfg.ema_beta},
                     {"freeze_eln", cfg.freeze_eln},
                     {"train_secn", cfg.train_secn},
                     {"mask", to_string(cfg.mask)},
                     {"threshold", cfg.threshold},
                     {"use_pseudo", cfg.use_pseudo},
                     {"use_contra", cfg.use_contra},
                     {"pretrain_steps", cfg.pretrain_steps},
                     {"stage1_steps", cfg.stage1_steps},
                     {"stage2_steps", cfg.stage2_steps},
                     {"eval_every", cfg.eval_every},
                     {"checkpoint_every", cfg.checkpoint_every},
                     {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
  if (!j.is_object()) throw ConfigError("training config must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "model") {
      from_json(value, cfg.model);
    } else if (key == "eln") {
      from_json(value, cfg.eln);
    } else if (key == "optim") {
      from_json(value, cfg.optim);
    } else if (key == "augmentation") {
      from_json(value, cfg.augmentation);
    } else if (key == "contrastive") {
      from_json(value, cfg.contrastive);
    } else if (key == "alphas") {
      cfg.alphas = get_checked<std::vector<double>>(value, key);
    } else if (key == "ema_beta") {
      cfg.ema_beta = get_checked<double>(value, key);
    } else if (key == "freeze_eln") {
      cfg.freeze_eln = get_checked<bool>(value, key);
    } else if (key == "train_secn") {
      cfg.train_secn = get_checked<bool>(value, key);
    } else if (key == "mask") {
      cfg.mask = mask_source_from_string(get_checked<std::string>(value, key));
    } else if (key == "threshold") {
      cfg.threshold = get_checked<double>(value, key);
    } else if (key == "use_pseudo") {
      cfg.use_pseudo = get_checked<bool>(value, key);
    } else if (key == "use_contra") {
      cfg.use_contra = get_checked<bool>(value, key);
    } else if (key == "pretrain_steps") {
      cfg.pretrain_steps = get_checked<std::int64_t>(value, key);
    } else if (key == "stage1_steps") {
      cfg.stage1_steps = get_checked<std::int64_t>(value, key);
    } else if (key == "stage2_steps") {
      cfg.stage2_steps = get_checked<std::int64_t>(value, key);
    } else if (key == "eval_every") {
      cfg.eval_every = get_checked<std::int64_t>(value, key);
    } else if (key == "checkpoint_every") {
      cfg.checkpoint_every = get_checked<std::int64_t>(value, key);
    } else if (key == "seed") {
      cfg.seed = get_checked<std::uint64_t>(value, key);
    } else {
      throw ConfigError("unknown key '" + key + "'");
    }
  }
}

namespace {

// Sub-seeds for network initialisation.
constexpr std::uint64_t kStudentInit = 0x5717;
constexpr std::uint64_t kAuxInit = 0xA0C5;
constexpr std::uint64_t kElnInit = 0xE17;
constexpr std::uint64_t kSecnInit = 0x5EC7;
constexpr std::uint64_t kAugmentSeed = 0xA06;
constexpr std::uint64_t kContrastSeed = 0xC07;

// Config fields that must agree for a checkpoint to be resumed: they fix
// parameter shapes, optimizer behaviour and every derived random stream.
nlohmann::json state_defining(const nlohmann::json& cfg) {
  nlohmann::json j;
  for (const char* key : {"model", "eln", "optim", "alphas", "seed"}) {
    if (cfg.contains(key)) j[key] = cfg[key];
  }
  return j;
}

// Fields that additionally shape stage-2 steps.
nlohmann::json stage2_defining(const nlohmann::json& cfg) {
  nlohmann::json j;
  for (const char* key : {"augmentation", "contrastive", "ema_beta", "freeze_eln", "mask", "threshold", "use_pseudo",
                          "use_contra"}) {
    if (cfg.contains(key)) j[key] = cfg[key];
  }
  return j;
}

void freeze(ParameterSet& params) {
  for (auto& p : params.entries()) {
    p.value.zero_grad();
    p.value.set_requires_grad(false);
  }
}

}  // namespace

TrainState::TrainState(const TrainConfig& cfg)
    : student(cfg.model, derive_seed({cfg.seed, kStudentInit})),
      aux(cfg.model, derive_seed({cfg.seed, kAuxInit})),
      eln(cfg.model.num_classes, 1, cfg.eln, derive_seed({cfg.seed, kElnInit})),
      optimizer(cfg.optim),
      ema{cfg.ema_beta, 0},
      cfg_(cfg) {
  cfg_.validate();
  if (cfg_.train_secn) {
    secn.emplace(cfg.model.num_classes, cfg.model.num_classes, cfg.eln, derive_seed({cfg.seed, kSecnInit}));
  }
}

void TrainState::enter(Stage s) {
  if (s == Stage::stage2) {
    begin_stage2();
    return;
  }
  stage = s;
  iteration = 0;
}

void TrainState::begin_stage2() {
  teacher.emplace(cfg_.model, derive_seed({cfg_.seed, kStudentInit}));
  teacher->params().copy_values_from(student.params());
  freeze(teacher->params());
  ema = EMAState{cfg_.ema_beta, 0};
  stage = Stage::stage2;
  iteration = 0;
}

CheckpointData TrainState::to_checkpoint() const {
  CheckpointData c;
  c.stage = to_string(stage);
  c.iteration = iteration;
  c.config = cfg_;
  c.add_parameters("student", student.params());
  c.add_parameters("aux", aux.params());
  c.add_parameters("eln", eln.params());
  if (secn) c.add_parameters("secn", secn->params());
  if (teacher) c.add_parameters("teacher", teacher->params());
  optimizer.save(c);
  c.meta["ema_step"] = ema.step;
  return c;
}

void TrainState::restore(const CheckpointData& ckpt) {
  const nlohmann::json mine = cfg_;
  if (state_defining(ckpt.config) != state_defining(mine)) {
    throw ConfigError("checkpoint was written with a different model/optimizer/seed configuration; "
                      "start a fresh output directory or restore the original config");
  }
  const Stage s = stage_from_string(ckpt.stage);
  if (s == Stage::stage2 && ckpt.iteration > 0 && stage2_defining(ckpt.config) != stage2_defining(mine)) {
    throw ConfigError("mid-stage-2 checkpoint was written with different stage-2 settings");
  }
  ckpt.load_parameters("student", student.params());
  ckpt.load_parameters("aux", aux.params());
  ckpt.load_parameters("eln", eln.params());
  // A checkpoint's s-ECN is ignored when this config does not train one.
  if (cfg_.train_secn && ckpt.has_prefix("secn")) {
    if (!secn) {
      secn.emplace(cfg_.model.num_classes, cfg_.model.num_classes, cfg_.eln, derive_seed({cfg_.seed, kSecnInit}));
    }
    ckpt.load_parameters("secn", secn->params());
  } else if (cfg_.train_secn && s != Stage::pretrain && !(s == Stage::stage1 && ckpt.iteration == 0)) {
    throw ConfigError("config trains the s-ECN but the checkpoint has no s-ECN parameters");
  }
  teacher.reset();
  if (ckpt.has_prefix("teacher")) {
    teacher.emplace(cfg_.model, derive_seed({cfg_.seed, kStudentInit}));
    ckpt.load_parameters("teacher", teacher->params());
    freeze(teacher->params());
  }
  optimizer.load(ckpt);
  ema = EMAState{cfg_.ema_beta, ckpt.meta.value("ema_step", std::int64_t{0})};
  stage = s;
  iteration = ckpt.iteration;
}

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void require_stage(const TrainState& state, Stage s, const char* op) {
  if (state.stage != s) {
    throw StageError(std::string(op) + " called in stage '" + to_string(state.stage) + "', expected '" +
                     to_string(s) + "'");
  }
}

void require_labels(const Batch& batch, const char* op) {
  if (batch.size == 0 || !batch.has_labels()) throw LossError(std::string(op) + ": batch has no labels");
}

void zero_all(TrainState& state) {
  state.student.params().zero_grad();
  state.aux.params().zero_grad();
  state.eln.params().zero_grad();
  if (state.secn) state.secn->params().zero_grad();
}

}  // namespace

double pretrain_step(TrainState& state, const Batch& labeled) {
  require_stage(state, Stage::pretrain, "pretrain_step");
  require_labels(labeled, "pretrain_step");
  state.student.params().zero_grad();
  auto out = state.student.forward(labeled.images, false);
  auto loss = sup_loss(ProbMap::from_logits(out.logits), labeled.labels);
  loss.backward();
  state.optimizer.step("student", state.student.params());
  ++state.iteration;
  return loss.item();
}

void pretrain_main(TrainState& state, std::span<const Sample> labeled, std::int64_t steps) {
  if (labeled.empty()) throw ConfigError("pretraining needs a non-empty labeled set");
  for (std::int64_t s = 0; s < steps; ++s) {
    pretrain_step(state, sample_labeled_batch(state.config(), labeled, kPretrainStream, state.iteration));
  }
}

LabeledObjective labeled_objective(const TrainState& state, const Batch& labeled, bool with_eln) {
  require_labels(labeled, "labeled_objective");
  const auto& cfg = state.config();
  LabeledObjective obj;
  auto& d = obj.diagnostics;

  auto features = state.student.encode(labeled.images);
  auto main_out = state.student.decode(features, false);
  auto main = softmax_and_entropy(main_out.logits);
  auto sup = sup_loss(main.probs, labeled.labels);

  // Auxiliary decoders see detached features so L_aux never reaches the encoder.
  const auto frozen = features.detached();
  std::vector<SoftmaxEntropy> aux_out;
  std::vector<ProbMap> aux_probs;
  for (std::size_t k = 0; k < state.aux.size(); ++k) {
    aux_out.push_back(softmax_and_entropy(state.aux[k].forward(frozen, false).logits));
    aux_probs.push_back(aux_out.back().probs);
  }
  auto aux = aux_loss(main.probs, aux_probs, labeled.labels, cfg.alphas);

  Tensor eln_term, secn_term;
  if (with_eln || state.secn) {
    std::vector<ElnInput> inputs;
    std::vector<const SoftmaxEntropy*> preds{&main};
    for (const auto& a : aux_out) preds.push_back(&a);
    for (const auto* p : preds) inputs.push_back(build_eln_input(labeled.images, p->probs.probs, p->entropy));
    if (with_eln) {
      std::vector<ValidityMap> validities;
      std::vector<CorrectnessMask> masks;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        validities.push_back(eln_forward(state.eln.net(), inputs[i]));
        masks.push_back(correctness_mask(preds[i]->probs.probs, labeled.labels));
      }
      auto e = eln_loss(validities, masks);
      eln_term = e.value;
      d.eln = e.value.item();
      d.bce_fallbacks = e.fallback_images;
    }
    if (state.secn) {
      std::vector<Tensor> terms;
      for (const auto& in : inputs) terms.push_back(ce_loss(secn_forward(state.secn->net(), in), labeled.labels));
      secn_term = scale(add_scalars(terms), 1.0F / static_cast<float>(terms.size()));
      d.secn = secn_term.item();
    }
  }

  const Tensor parts[] = {labeled_total(sup, aux.value, eln_term), secn_term};
  obj.total = add_scalars(parts);
  d.sup = sup.item();
  d.aux = aux.value.item();
  d.total = obj.total.item();
  d.main_ce = mean_of(aux.main_ce);
  for (std::size_t k = 0; k < aux.aux_ce.size(); ++k) d.aux_ce.push_back(aux.mean_aux_ce(k));
  d.gate_fraction = aux.gate_fraction();
  return obj;
}

namespace {

void apply_labeled_updates(TrainState& state, bool update_eln) {
  state.optimizer.step("student", state.student.params());
  state.optimizer.step("aux", state.aux.params());
  if (update_eln) state.optimizer.step("eln", state.eln.params());
  if (state.secn) state.optimizer.step("secn", state.secn->params());
}

}  // namespace

Stage1Diagnostics train_labeled_step(TrainState& state, const Batch& labeled) {
  const bool with_eln = !(state.stage == Stage::stage2 && state.config().freeze_eln);
  zero_all(state);
  auto obj = labeled_objective(state, labeled, with_eln);
  obj.total.backward();
  apply_labeled_updates(state, with_eln);
  return obj.diagnostics;
}

Stage1Diagnostics stage1_step(TrainState& state, const Batch& labeled) {
  require_stage(state, Stage::stage1, "stage1_step");
  auto d = train_labeled_step(state, labeled);
  ++state.iteration;
  return d;
}

BinaryMap stage2_mask(const TrainState& state, const Tensor& clean_images, const Tensor& teacher_probs) {
  NoGradGuard no_grad;
  const auto& cfg = state.config();
  switch (cfg.mask) {
    case MaskSource::none:
      return BinaryMap::filled(teacher_probs.dim(0), teacher_probs.dim(2), teacher_probs.dim(3), 1);
    case MaskSource::threshold:
      return threshold_mask(teacher_probs, cfg.threshold);
    case MaskSource::eln:
    case MaskSource::secn: {
      auto input = build_eln_input(clean_images, teacher_probs, normalized_entropy(teacher_probs));
      if (cfg.mask == MaskSource::eln) return round_validity(eln_forward(state.eln.net(), input).values);
      if (!state.secn) throw StageError("mask 'secn' requested but no s-ECN was trained");
      return secn_valid_mask(secn_forward(state.secn->net(), input).probs, teacher_probs);
    }
  }
  throw StageError("unknown mask source");
}

Stage2Diagnostics stage2_step(TrainState& state, const Batch& labeled, const UnlabeledBatch& unlabeled,
                              const BinaryMap* mask_override) {
  require_stage(state, Stage::stage2, "stage2_step");
  if (!state.teacher) throw StageError("stage2_step: teacher is not initialised");
  if (!unlabeled.clean.defined() || !unlabeled.perturbed.defined() || unlabeled.clean.dim(0) == 0) {
    throw StageError("stage2_step: missing unlabeled batch");
  }
  if (unlabeled.clean.shape() != unlabeled.perturbed.shape()) {
    throw ShapeError("stage2_step: clean and perturbed unlabeled batches differ in shape");
  }
  const auto& cfg = state.config();
  const bool with_eln = !cfg.freeze_eln;
  Stage2Diagnostics d;

  // Teacher branch: probabilities, embeddings and validity, all constants.
  Tensor teacher_probs, teacher_embedding;
  BinaryMap valid;
  {
    NoGradGuard no_grad;
    auto t = state.teacher->forward(unlabeled.clean, cfg.use_contra);
    teacher_probs = ProbMap::from_logits(t.logits).probs;
    teacher_embedding = t.embedding;
    valid = mask_override != nullptr ? *mask_override : stage2_mask(state, unlabeled.clean, teacher_probs);
  }
  if (valid.batch != teacher_probs.dim(0) || valid.height != teacher_probs.dim(2) ||
      valid.width != teacher_probs.dim(3)) {
    throw ShapeError("stage2_step: validity mask does not match the unlabeled batch");
  }
  const auto pseudo = pseudo_labels(teacher_probs);

  zero_all(state);
  auto obj = labeled_objective(state, labeled, with_eln);
  d.labeled = obj.diagnostics;

  auto student = state.student.forward(unlabeled.perturbed, cfg.use_contra);
  Tensor pseudo_term, contra_term;
  {
    auto pl = pseudo_loss(ProbMap::from_logits(student.logits), pseudo, valid);
    d.valid_fraction = pl.valid_fraction();
    if (cfg.use_pseudo) {
      pseudo_term = pl.value;
      d.pseudo = pl.value.item();
    }
  }
  if (cfg.use_contra) {
    const auto h = student.embedding.dim(2), w = student.embedding.dim(3);
    auto c = contrastive_loss(student.embedding, teacher_embedding, downsample_nearest(pseudo, h, w),
                              downsample_nearest(valid, h, w), cfg.contrastive,
                              derive_seed({cfg.seed, kContrastSeed, static_cast<std::uint64_t>(state.iteration)}));
    contra_term = c.value;
    d.contra = c.value.item();
    d.contrastive_anchors = c.anchors;
  }
  const Tensor parts[] = {obj.total, unlabeled_total(pseudo_term, contra_term)};
  auto total = add_scalars(parts);
  d.total = total.item();
  total.backward();
  apply_labeled_updates(state, with_eln);

  ema_update(state.teacher->params(), state.student.params(), state.ema.beta);
  ++state.ema.step;
  ++state.iteration;
  return d;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t stream, std::int64_t iteration,
                                       std::size_t batch_size, std::size_t dataset_size) {
  if (dataset_size == 0) throw ConfigError("cannot sample a batch from an empty dataset");
  std::vector<std::size_t> out;
  std::vector<std::size_t> perm;
  std::uint64_t perm_epoch = ~0ULL;
  const auto start = static_cast<std::uint64_t>(iteration) * batch_size;
  for (std::size_t j = 0; j < batch_size; ++j) {
    const std::uint64_t pos = start + j;
    const std::uint64_t epoch = pos / dataset_size;
    if (epoch != perm_epoch) {
      perm.resize(dataset_size);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng(derive_seed({seed, stream, epoch}));
      rng.shuffle(perm);
      perm_epoch = epoch;
    }
    out.push_back(perm[pos % dataset_size]);
  }
  return out;
}

Batch sample_labeled_batch(const TrainConfig& cfg, std::span<const Sample> labeled, std::uint64_t stream,
                           std::int64_t iteration) {
  const auto idx =
      batch_indices(cfg.seed, stream, iteration, static_cast<std::size_t>(cfg.optim.labeled_batch), labeled.size());
  Rng rng(derive_seed({cfg.seed, stream, kAugmentSeed, static_cast<std::uint64_t>(iteration)}));
  std::vector<Sample> picked;
  for (auto i : idx) picked.push_back(augment_shared(labeled[i], cfg.augmentation, rng));
  return make_batch(picked, true);
}

UnlabeledBatch sample_unlabeled_batch(const TrainConfig& cfg, std::span<const Sample> unlabeled,
                                      std::int64_t iteration) {
  const auto idx = batch_indices(cfg.seed, kStage2UnlabeledStream, iteration,
                                 static_cast<std::size_t>(cfg.optim.unlabeled_batch), unlabeled.size());
  Rng rng(derive_seed({cfg.seed, kStage2UnlabeledStream, kAugmentSeed, static_cast<std::uint64_t>(iteration)}));
  std::vector<ImageArray> clean, perturbed;
  for (auto i : idx) {
    Sample s{unlabeled[i].id, unlabeled[i].image, std::nullopt};
    s = augment_shared(s, cfg.augmentation, rng);
    perturbed.push_back(perturb_photometric(s.image, cfg.augmentation, rng));
    clean.push_back(std::move(s.image));
  }
  return UnlabeledBatch{make_image_batch(clean).images, make_image_batch(perturbed).images};
}

MetricLog::MetricLog(const std::filesystem::path& path, bool append) {
  out_.emplace(path, append ? std::ios::app : std::ios::trunc);
  if (!*out_) throw IoError("cannot open metric log " + path.string());
}

void MetricLog::write(const nlohmann::json& record) {
  records_.push_back(record);
  if (out_) {
    *out_ << record.dump() << '\n';
    out_->flush();
  }
}

nlohmann::json stage1_record(const Stage1Diagnostics& d) {
  return nlohmann::json{{"sup", d.sup},
                        {"aux", d.aux},
                        {"eln", d.eln},
                        {"secn", d.secn},
                        {"total", d.total},
                        {"main_ce", d.main_ce},
                        {"aux_ce", d.aux_ce},
                        {"gate_fraction", d.gate_fraction},
                        {"bce_fallbacks", d.bce_fallbacks}};
}

nlohmann::json stage2_record(const Stage2Diagnostics& d) {
  auto j = stage1_record(d.labeled);
  j["labeled_total"] = d.labeled.total;
  j["pseudo"] = d.pseudo;
  j["contra"] = d.contra;
  j["total"] = d.total;
  j["valid_fraction"] = d.valid_fraction;
  j["contrastive_anchors"] = d.contrastive_anchors;
  return j;
}

namespace {

std::int64_t stage_length(const TrainConfig& cfg, Stage s) {
  switch (s) {
    case Stage::pretrain:
      return cfg.pretrain_steps;
    case Stage::stage1:
      return cfg.stage1_steps;
    case Stage::stage2:
      return cfg.stage2_steps;
  }
  return 0;
}

void save_student(const TrainState& state, const std::filesystem::path& path) {
  CheckpointData c;
  c.stage = to_string(state.stage);
  c.iteration = state.iteration;
  c.config = state.config();
  c.meta["student_only"] = true;
  c.add_parameters("student", state.student.params());
  save_checkpoint(path, c);
}

}  // namespace

TrainingResult run_training(TrainState& state, const TrainingData& data, const RunPaths& paths, MetricLog& log,
                            std::optional<Stage> stop_after) {
  const auto& cfg = state.config();
  if (data.labeled.empty()) throw ConfigError("training needs a non-empty labeled set");
  if (cfg.stage2_steps > 0 && data.unlabeled.empty()) throw ConfigError("stage 2 needs a non-empty unlabeled set");
  std::filesystem::create_directories(paths.checkpoints);
  TrainingResult result;

  for (;;) {
    const Stage s = state.stage;
    const std::int64_t length = stage_length(cfg, s);
    while (state.iteration < length) {
      nlohmann::json rec;
      switch (s) {
        case Stage::pretrain: {
          auto b = sample_labeled_batch(cfg, data.labeled, kPretrainStream, state.iteration);
          rec["sup"] = pretrain_step(state, b);
          break;
        }
        case Stage::stage1: {
          auto b = sample_labeled_batch(cfg, data.labeled, kStage1Stream, state.iteration);
          rec = stage1_record(stage1_step(state, b));
          break;
        }
        case Stage::stage2: {
          auto b = sample_labeled_batch(cfg, data.labeled, kStage2LabeledStream, state.iteration);
          auto u = sample_unlabeled_batch(cfg, data.unlabeled, state.iteration);
          rec = stage2_record(stage2_step(state, b, u));
          break;
        }
      }
      nlohmann::json line{{"stage", to_string(s)}, {"iter", state.iteration}};
      line.update(rec);
      const bool at_end = state.iteration == length;
      if (!data.validation.empty() && (at_end || (cfg.eval_every > 0 && state.iteration % cfg.eval_every == 0))) {
        line["mIoU"] = evaluate_segmentation(state.student, data.validation).miou;
      }
      log.write(line);
      if (cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 && !at_end) {
        save_checkpoint(paths.checkpoints / "last.ckpt", state.to_checkpoint());
      }
    }
    save_checkpoint(paths.checkpoints / (to_string(s) + ".ckpt"), state.to_checkpoint());
    if (s == Stage::stage2 || (stop_after && *stop_after == s)) break;
    state.enter(s == Stage::pretrain ? Stage::stage1 : Stage::stage2);
  }

  result.student_checkpoint = paths.checkpoints / "student.ckpt";
  save_student(state, result.student_checkpoint);
  if (!data.validation.empty()) result.final_eval = evaluate_segmentation(state.student, data.validation);
  return result;
}

}  // namespace eln
