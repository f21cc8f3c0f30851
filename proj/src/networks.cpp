#include "eln/networks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "eln/datagen.hpp"
#include "eln/ops.hpp"

namespace eln {

Tensor ParameterSet::add(std::string name, Shape shape, std::vector<float> init) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter '" + name + "'");
  Tensor t = Tensor::from_data(std::move(shape), std::move(init), true);
  entries_.push_back({std::move(name), t});
  return t;
}

const Tensor* ParameterSet::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e.value;
  }
  return nullptr;
}

std::int64_t ParameterSet::total_elements() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

bool ParameterSet::same_topology(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name) return false;
    if (entries_[i].value.shape() != other.entries_[i].value.shape()) return false;
  }
  return true;
}

void ParameterSet::copy_values_from(const ParameterSet& other) {
  if (!same_topology(other)) throw std::invalid_argument("parameter topology mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto src = other.entries_[i].value.data();
    auto dst = entries_[i].value.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& e : entries_) {
    feed(e.name.data(), e.name.size());
    for (auto d : e.value.shape()) feed(&d, sizeof d);
    auto data = e.value.data();
    feed(data.data(), data.size_bytes());
  }
  return h;
}

double ParameterSet::grad_norm() const {
  double s = 0.0;
  for (const auto& e : entries_) {
    for (float g : e.value.grad()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

Conv2d Conv2d::create(ParameterSet& params, const std::string& name, int in_channels, int out_channels, int kernel,
                      int stride, Rng& rng) {
  const int fan_in = in_channels * kernel * kernel;
  const double std = std::sqrt(2.0 / fan_in);
  std::vector<float> w(static_cast<std::size_t>(out_channels * fan_in));
  for (auto& v : w) v = static_cast<float>(std * rng.normal());
  Conv2d conv;
  conv.weight = params.add(name + ".weight", {out_channels, in_channels, kernel, kernel}, std::move(w));
  conv.bias = params.add(name + ".bias", {out_channels}, std::vector<float>(static_cast<std::size_t>(out_channels), 0.0F));
  conv.stride = stride;
  conv.padding = kernel / 2;
  return conv;
}

Tensor Conv2d::operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }

void SegModelConfig::validate() const {
  if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
  if (embedding_dim < 1) throw ConfigError("model.embedding_dim must be >= 1");
  if (encoder_channels.size() < 2) throw ConfigError("model.encoder_channels needs at least two stages");
  if (decoder_channels < 1 || low_level_channels < 1) throw ConfigError("model decoder widths must be >= 1");
  if (num_aux_decoders < 0) throw ConfigError("K (num_aux_decoders) must be >= 0");
}

void to_json(nlohmann::json& j, const SegModelConfig& cfg) {
  j = nlohmann::json{{"num_classes", cfg.num_classes},
                     {"embedding_dim", cfg.embedding_dim},
                     {"encoder_channels", cfg.encoder_channels},
                     {"decoder_channels", cfg.decoder_channels},
                     {"low_level_channels", cfg.low_level_channels},
                     {"num_aux_decoders", cfg.num_aux_decoders}};
}

void from_json(const nlohmann::json& j, SegModelConfig& cfg) {
  for (const auto& [key, value] : j.items()) {
    if (key == "num_classes") {
      cfg.num_classes = value.get<int>();
    } else if (key == "embedding_dim") {
      cfg.embedding_dim = value.get<int>();
    } else if (key == "encoder_channels") {
      cfg.encoder_channels = value.get<std::vector<int>>();
    } else if (key == "decoder_channels") {
      cfg.decoder_channels = value.get<int>();
    } else if (key == "low_level_channels") {
      cfg.low_level_channels = value.get<int>();
    } else if (key == "num_aux_decoders") {
      cfg.num_aux_decoders = value.get<int>();
    } else {
      throw ConfigError("unknown key 'model." + key + "'");
    }
  }
}

void to_json(nlohmann::json& j, const ElnConfig& cfg) { j = nlohmann::json{{"channels", cfg.channels}}; }

void from_json(const nlohmann::json& j, ElnConfig& cfg) {
  for (const auto& [key, value] : j.items()) {
    if (key == "channels") {
      cfg.channels = value.get<std::vector<int>>();
      if (cfg.channels.empty()) throw ConfigError("eln.channels must not be empty");
    } else {
      throw ConfigError("unknown key 'eln." + key + "'");
    }
  }
}

EncoderFeatures EncoderFeatures::detached() const {
  return {low.detach(), high.detach(), image_height, image_width};
}

Encoder::Encoder(ParameterSet& params, const std::string& prefix, const SegModelConfig& cfg, Rng& rng) {
  int in = 3;
  for (std::size_t s = 0; s < cfg.encoder_channels.size(); ++s) {
    const int out = cfg.encoder_channels[s];
    const std::string name = prefix + ".stage" + std::to_string(s);
    Stage st{Conv2d::create(params, name + ".down", in, out, 3, 2, rng),
             Conv2d::create(params, name + ".refine", out, out, 3, 1, rng)};
    stages_.push_back(std::move(st));
    in = out;
  }
  stride_ = 1 << cfg.encoder_channels.size();
}

EncoderFeatures Encoder::forward(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw ShapeError("encoder expects [B, 3, H, W], got " + shape_str(image.shape()));
  }
  if (image.dim(2) % stride_ != 0 || image.dim(3) % stride_ != 0) {
    throw ShapeError("image size " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                     " is not divisible by encoder stride " + std::to_string(stride_));
  }
  EncoderFeatures f;
  f.image_height = image.dim(2);
  f.image_width = image.dim(3);
  Tensor x = image;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    x = relu(stages_[s].down(x));
    x = relu(stages_[s].refine(x));
    if (s == 1) f.low = x;
  }
  f.high = x;
  return f;
}

Decoder::Decoder(ParameterSet& params, const std::string& prefix, const SegModelConfig& cfg, Rng& rng)
    : prefix_(prefix),
      reduce_high_(Conv2d::create(params, prefix + ".reduce_high", cfg.encoder_channels.back(), cfg.decoder_channels,
                                  1, 1, rng)),
      reduce_low_(Conv2d::create(params, prefix + ".reduce_low", cfg.encoder_channels[1], cfg.low_level_channels, 1, 1,
                                 rng)),
      fuse_(Conv2d::create(params, prefix + ".fuse", cfg.decoder_channels + cfg.low_level_channels,
                           cfg.decoder_channels, 3, 1, rng)),
      seg_hidden_(Conv2d::create(params, prefix + ".seg.0", cfg.decoder_channels, cfg.decoder_channels, 1, 1, rng)),
      seg_out_(Conv2d::create(params, prefix + ".seg.2", cfg.decoder_channels, cfg.num_classes, 1, 1, rng)),
      proj_hidden_(Conv2d::create(params, prefix + ".proj.0", cfg.decoder_channels, cfg.decoder_channels, 1, 1, rng)),
      proj_out_(Conv2d::create(params, prefix + ".proj.2", cfg.decoder_channels, cfg.embedding_dim, 1, 1, rng)) {}

Tensor Decoder::trunk(const EncoderFeatures& features) const {
  if (features.high.dim(1) != reduce_high_.in_channels() || features.low.dim(1) != reduce_low_.in_channels()) {
    throw ShapeError("decoder channel mismatch: features " + shape_str(features.high.shape()) + " / " +
                     shape_str(features.low.shape()));
  }
  Tensor high = relu(reduce_high_(features.high));
  high = upsample_bilinear(high, features.low.dim(2), features.low.dim(3));
  Tensor low = relu(reduce_low_(features.low));
  const Tensor parts[] = {high, low};
  return relu(fuse_(concat_channels(parts)));
}

Tensor Decoder::seg_head(const Tensor& trunk_out, std::int64_t out_h, std::int64_t out_w) const {
  Tensor logits = seg_out_(relu(seg_hidden_(trunk_out)));
  return upsample_bilinear(logits, out_h, out_w);
}

Tensor Decoder::proj_head(const Tensor& trunk_out) const { return proj_out_(relu(proj_hidden_(trunk_out))); }

DecoderOutput Decoder::forward(const EncoderFeatures& features, bool with_embedding) const {
  Tensor t = trunk(features);
  DecoderOutput out;
  out.logits = seg_head(t, features.image_height, features.image_width);
  if (with_embedding) out.embedding = proj_head(t);
  return out;
}

ProbMap ProbMap::from_logits(const Tensor& logits) {
  ProbMap p;
  p.log_probs = log_softmax_channels(logits);
  p.probs = exp(p.log_probs);
  return p;
}

ProbMap ProbMap::from_probabilities(const Tensor& probs) {
  ProbMap p;
  p.probs = probs;
  p.log_probs = log(probs);
  return p;
}

ProbMap ProbMap::detached() const { return {log_probs.detach(), probs.detach()}; }

Tensor normalized_entropy(const Tensor& probs) {
  if (probs.rank() != 4) throw ShapeError("entropy expects [B, C, H, W]");
  const std::int64_t batch = probs.dim(0), classes = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  const double norm = std::log(static_cast<double>(classes));
  std::vector<float> out(static_cast<std::size_t>(batch * hw));
  auto p = probs.data();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < hw; ++i) {
      double h = 0.0;
      for (std::int64_t c = 0; c < classes; ++c) {
        const double v = p[static_cast<std::size_t>((b * classes + c) * hw + i)];
        if (v > 0.0) h -= v * std::log(v);
      }
      out[static_cast<std::size_t>(b * hw + i)] = static_cast<float>(std::clamp(h / norm, 0.0, 1.0));
    }
  }
  return Tensor::from_data({batch, 1, probs.dim(2), probs.dim(3)}, std::move(out));
}

SoftmaxEntropy softmax_and_entropy(const Tensor& logits) {
  SoftmaxEntropy out;
  out.probs = ProbMap::from_logits(logits);
  out.entropy = normalized_entropy(out.probs.probs);
  return out;
}

ElnInput build_eln_input(const Tensor& image, const Tensor& probs, const Tensor& entropy) {
  if (image.rank() != 4 || probs.rank() != 4 || entropy.rank() != 4) throw ShapeError("ELN input parts must be rank 4");
  if (image.dim(1) != 3 || entropy.dim(1) != 1) throw ShapeError("ELN input expects 3 image and 1 entropy channel");
  const Tensor parts[] = {image.detach(), probs.detach(), entropy.detach()};
  ElnInput in;
  in.stacked = concat_channels(parts);
  in.num_classes = static_cast<int>(probs.dim(1));
  return in;
}

LocalizerNet::LocalizerNet(ParameterSet& params, const std::string& prefix, int num_classes, int out_channels,
                           const ElnConfig& cfg, Rng& rng)
    : num_classes_(num_classes), out_channels_(out_channels) {
  int in = 3 + num_classes + 1;
  for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
    stages_.push_back(Conv2d::create(params, prefix + ".stage" + std::to_string(s), in, cfg.channels[s], 3, 2, rng));
    in = cfg.channels[s];
  }
  context_ = Conv2d::create(params, prefix + ".context", in, in, 3, 1, rng);
  head_ = Conv2d::create(params, prefix + ".head", in, out_channels, 1, 1, rng);
  shortcut_ = Conv2d::create(params, prefix + ".shortcut", 3 + num_classes + 1, out_channels, 1, 1, rng);
}

Tensor LocalizerNet::forward_logits(const ElnInput& input) const {
  const Tensor& x = input.stacked;
  if (x.rank() != 4 || x.dim(1) != 3 + num_classes_ + 1) {
    throw ShapeError("localizer expects " + std::to_string(3 + num_classes_ + 1) + " input channels, got " +
                     shape_str(x.shape()));
  }
  Tensor h = x;
  for (const auto& s : stages_) h = relu(s(h));
  h = relu(context_(h));
  Tensor coarse = upsample_bilinear(head_(h), x.dim(2), x.dim(3));
  return add(coarse, shortcut_(x));
}

ValidityMap eln_forward(const LocalizerNet& eln, const ElnInput& input) {
  if (eln.out_channels() != 1) throw ShapeError("eln_forward requires a single-channel localizer");
  ValidityMap v;
  v.logits = eln.forward_logits(input);
  v.values = sigmoid(v.logits);
  return v;
}

ProbMap secn_forward(const LocalizerNet& secn, const ElnInput& input) {
  if (secn.out_channels() != secn.num_classes()) throw ShapeError("secn_forward requires C output channels");
  return ProbMap::from_logits(secn.forward_logits(input));
}

SegNet::SegNet(const SegModelConfig& cfg, std::uint64_t seed)
    : cfg_((cfg.validate(), cfg)),
      init_rng_(seed),
      encoder_(params_, "encoder", cfg_, init_rng_),
      decoder_(params_, "decoder", cfg_, init_rng_) {}

AuxDecoders::AuxDecoders(const SegModelConfig& cfg, std::uint64_t seed) : init_rng_(seed) {
  for (int k = 0; k < cfg.num_aux_decoders; ++k) {
    decoders_.emplace_back(params_, "aux" + std::to_string(k + 1), cfg, init_rng_);
  }
}

std::vector<const NamedParameter*> AuxDecoders::params_of(std::size_t k) const {
  const std::string prefix = "aux" + std::to_string(k + 1) + ".";
  std::vector<const NamedParameter*> out;
  for (const auto& e : params_.entries()) {
    if (e.name.rfind(prefix, 0) == 0) out.push_back(&e);
  }
  return out;
}

LocalizerModel::LocalizerModel(int num_classes, int out_channels, const ElnConfig& cfg, std::uint64_t seed)
    : init_rng_(seed), net_(params_, out_channels == 1 ? "eln" : "secn", num_classes, out_channels, cfg, init_rng_) {}

}  // namespace eln
