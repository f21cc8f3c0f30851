// Segmentation encoder/decoders, the error localization network and the
// parameter bookkeeping shared by training, EMA and checkpoints.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eln/random.hpp"
#include "eln/tensor.hpp"

namespace eln {

struct NamedParameter {
  std::string name;
  Tensor value;
};

// Ordered, named collection of leaf tensors that require grad.
class ParameterSet {
 public:
  Tensor add(std::string name, Shape shape, std::vector<float> init);

  const std::vector<NamedParameter>& entries() const { return entries_; }
  std::vector<NamedParameter>& entries() { return entries_; }
  const Tensor* find(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  std::int64_t total_elements() const;

  void zero_grad();
  // Copies values by name; throws std::invalid_argument unless both sets
  // have identical names and shapes.
  void copy_values_from(const ParameterSet& other);
  bool same_topology(const ParameterSet& other) const;
  // FNV-1a over names, shapes and raw float bits.
  std::uint64_t checksum() const;
  double grad_norm() const;

 private:
  std::vector<NamedParameter> entries_;
};

struct Conv2d {
  Tensor weight;
  Tensor bias;
  int stride = 1;
  int padding = 0;

  // He-normal weights, zero bias.
  static Conv2d create(ParameterSet& params, const std::string& name, int in_channels, int out_channels, int kernel,
                       int stride, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  std::int64_t in_channels() const { return weight.dim(1); }
};

struct SegModelConfig {
  int num_classes = 4;
  int embedding_dim = 16;
  std::vector<int> encoder_channels{16, 32, 64};  // one stride-2 stage each
  int decoder_channels = 32;
  int low_level_channels = 16;
  int num_aux_decoders = 2;

  void validate() const;
  int stride() const { return 1 << encoder_channels.size(); }
};

void to_json(nlohmann::json& j, const SegModelConfig& cfg);
void from_json(const nlohmann::json& j, SegModelConfig& cfg);

struct ElnConfig {
  std::vector<int> channels{16, 32};  // stride-2 stages

  int stride() const { return 1 << channels.size(); }
};

void to_json(nlohmann::json& j, const ElnConfig& cfg);
void from_json(const nlohmann::json& j, ElnConfig& cfg);

struct EncoderFeatures {
  Tensor low;   // stride 4 (second stage)
  Tensor high;  // final stage
  std::int64_t image_height = 0;
  std::int64_t image_width = 0;

  EncoderFeatures detached() const;
};

class Encoder {
 public:
  Encoder(ParameterSet& params, const std::string& prefix, const SegModelConfig& cfg, Rng& rng);
  // Throws ShapeError if H or W is not divisible by the total stride.
  EncoderFeatures forward(const Tensor& image) const;
  int stride() const { return stride_; }

 private:
  struct Stage {
    Conv2d down;
    Conv2d refine;
  };
  std::vector<Stage> stages_;
  int stride_ = 1;
};

struct DecoderOutput {
  Tensor logits;     // [B, C, H, W] at input resolution
  Tensor embedding;  // [B, D, h, w] at trunk resolution; undefined if not requested
};

// Low-level fusion trunk followed by a Seg head and a Proj head, each two
// 1x1 convolutions with a ReLU between them.
class Decoder {
 public:
  Decoder(ParameterSet& params, const std::string& prefix, const SegModelConfig& cfg, Rng& rng);
  Tensor trunk(const EncoderFeatures& features) const;
  Tensor seg_head(const Tensor& trunk_out, std::int64_t out_h, std::int64_t out_w) const;
  Tensor proj_head(const Tensor& trunk_out) const;
  DecoderOutput forward(const EncoderFeatures& features, bool with_embedding = true) const;

  const std::string& prefix() const { return prefix_; }

 private:
  std::string prefix_;
  Conv2d reduce_high_;
  Conv2d reduce_low_;
  Conv2d fuse_;
  Conv2d seg_hidden_;
  Conv2d seg_out_;
  Conv2d proj_hidden_;
  Conv2d proj_out_;
};

// Class probabilities stored with their logarithms so that losses can use
// log-probabilities directly.
struct ProbMap {
  Tensor log_probs;  // [B, C, H, W]
  Tensor probs;      // exp(log_probs)

  static ProbMap from_logits(const Tensor& logits);
  // Wraps given probabilities (log taken elementwise); gradient flows to
  // `probs` through the log.
  static ProbMap from_probabilities(const Tensor& probs);
  std::int64_t num_classes() const { return probs.dim(1); }
  ProbMap detached() const;
};

struct SoftmaxEntropy {
  ProbMap probs;
  Tensor entropy;  // [B, 1, H, W], -sum p ln p / ln C, no gradient
};

SoftmaxEntropy softmax_and_entropy(const Tensor& logits);
Tensor normalized_entropy(const Tensor& probs);

// [image | probs | entropy] along channels, all detached.
struct ElnInput {
  Tensor stacked;  // [B, 3 + C + 1, H, W]
  int num_classes = 0;
};

ElnInput build_eln_input(const Tensor& image, const Tensor& probs, const Tensor& entropy);

struct ValidityMap {
  Tensor logits;  // [B, 1, H, W]
  Tensor values;  // sigmoid(logits)
};

// Stride-4 encoder-decoder over the stacked ELN input with a full-resolution
// 1x1 shortcut. With out_channels = 1 it is the ELN; with out_channels = C it
// is the simple error-correction baseline (s-ECN).
class LocalizerNet {
 public:
  LocalizerNet(ParameterSet& params, const std::string& prefix, int num_classes, int out_channels,
               const ElnConfig& cfg, Rng& rng);
  Tensor forward_logits(const ElnInput& input) const;
  int num_classes() const { return num_classes_; }
  int out_channels() const { return out_channels_; }

 private:
  int num_classes_;
  int out_channels_;
  std::vector<Conv2d> stages_;
  Conv2d context_;
  Conv2d head_;
  Conv2d shortcut_;
};

ValidityMap eln_forward(const LocalizerNet& eln, const ElnInput& input);
ProbMap secn_forward(const LocalizerNet& secn, const ElnInput& input);

// Encoder plus main decoder: the network that is trained, EMA-averaged and
// exported. Parameter names are relative ("encoder.*", "decoder.*").
class SegNet {
 public:
  SegNet(const SegModelConfig& cfg, std::uint64_t seed);
  SegNet(const SegNet&) = delete;
  SegNet& operator=(const SegNet&) = delete;
  SegNet(SegNet&&) = default;

  EncoderFeatures encode(const Tensor& image) const { return encoder_.forward(image); }
  DecoderOutput decode(const EncoderFeatures& f, bool with_embedding = true) const {
    return decoder_.forward(f, with_embedding);
  }
  DecoderOutput forward(const Tensor& image, bool with_embedding = true) const {
    return decode(encode(image), with_embedding);
  }

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const SegModelConfig& config() const { return cfg_; }
  const Decoder& decoder() const { return decoder_; }

 private:
  SegModelConfig cfg_;
  ParameterSet params_;
  Rng init_rng_;
  Encoder encoder_;
  Decoder decoder_;
};

// K auxiliary decoders with the main decoder's architecture.
class AuxDecoders {
 public:
  AuxDecoders(const SegModelConfig& cfg, std::uint64_t seed);
  AuxDecoders(const AuxDecoders&) = delete;
  AuxDecoders& operator=(const AuxDecoders&) = delete;
  AuxDecoders(AuxDecoders&&) = default;

  std::size_t size() const { return decoders_.size(); }
  const Decoder& operator[](std::size_t k) const { return decoders_[k]; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  // Parameters belonging to decoder k (names prefixed "aux<k+1>.").
  std::vector<const NamedParameter*> params_of(std::size_t k) const;

 private:
  ParameterSet params_;
  Rng init_rng_;
  std::vector<Decoder> decoders_;
};

class LocalizerModel {
 public:
  LocalizerModel(int num_classes, int out_channels, const ElnConfig& cfg, std::uint64_t seed);
  LocalizerModel(const LocalizerModel&) = delete;
  LocalizerModel& operator=(const LocalizerModel&) = delete;
  LocalizerModel(LocalizerModel&&) = default;

  const LocalizerNet& net() const { return net_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

 private:
  ParameterSet params_;
  Rng init_rng_;
  LocalizerNet net_;
};

}  // namespace eln
