#include "eln/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace eln {

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::rectangle:
      return "rectangle";
    case ShapeKind::ellipse:
      return "ellipse";
    case ShapeKind::triangle:
      return "triangle";
  }
  return "unknown";
}

ShapeKind shape_kind_from_string(const std::string& name) {
  if (name == "rectangle") return ShapeKind::rectangle;
  if (name == "ellipse") return ShapeKind::ellipse;
  if (name == "triangle") return ShapeKind::triangle;
  throw ConfigError("unknown shape kind '" + name + "'");
}

void SyntheticSceneSpec::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
  if (height <= 0 || width <= 0) throw ConfigError("image size must be positive");
  if (min_shapes < 0 || max_shapes < min_shapes) throw ConfigError("invalid shapes_per_image range");
  if (shape_kinds.empty()) throw ConfigError("shape_kinds must not be empty");
  if (texture_noise_std < 0.0 || color_jitter < 0.0) throw ConfigError("noise and jitter must be non-negative");
  if (min_extent <= 0.0 || max_extent < min_extent) throw ConfigError("invalid shape extent range");
}

void to_json(nlohmann::json& j, const SyntheticSceneSpec& spec) {
  std::vector<std::string> kinds;
  for (auto k : spec.shape_kinds) kinds.push_back(to_string(k));
  j = nlohmann::json{{"image_size", {spec.height, spec.width}},
                     {"num_classes", spec.num_classes},
                     {"shapes_per_image", {spec.min_shapes, spec.max_shapes}},
                     {"shape_kinds", kinds},
                     {"texture_noise_std", spec.texture_noise_std},
                     {"color_jitter", spec.color_jitter},
                     {"extent", {spec.min_extent, spec.max_extent}},
                     {"seed", spec.seed}};
}

void from_json(const nlohmann::json& j, SyntheticSceneSpec& spec) {
  for (const auto& [key, value] : j.items()) {
    if (key == "image_size") {
      spec.height = value.at(0).get<int>();
      spec.width = value.at(1).get<int>();
    } else if (key == "num_classes") {
      spec.num_classes = value.get<int>();
    } else if (key == "shapes_per_image") {
      spec.min_shapes = value.at(0).get<int>();
      spec.max_shapes = value.at(1).get<int>();
    } else if (key == "shape_kinds") {
      spec.shape_kinds.clear();
      for (const auto& k : value) spec.shape_kinds.push_back(shape_kind_from_string(k.get<std::string>()));
    } else if (key == "texture_noise_std") {
      spec.texture_noise_std = value.get<double>();
    } else if (key == "color_jitter") {
      spec.color_jitter = value.get<double>();
    } else if (key == "extent") {
      spec.min_extent = value.at(0).get<double>();
      spec.max_extent = value.at(1).get<double>();
    } else if (key == "seed") {
      spec.seed = value.get<std::uint64_t>();
    } else {
      throw ConfigError("unknown key 'dataset.synthetic." + key + "'");
    }
  }
}

std::array<double, 3> class_color(int cls, int num_classes) {
  const double hue = num_classes > 1 ? static_cast<double>(cls - 1) / static_cast<double>(num_classes - 1) : 0.0;
  const double s = 0.75, v = 0.85;
  const double h6 = std::fmod(hue, 1.0) * 6.0;
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0:
      return {v, t, p};
    case 1:
      return {q, v, p};
    case 2:
      return {p, v, t};
    case 3:
      return {p, q, v};
    case 4:
      return {t, p, v};
    default:
      return {v, p, q};
  }
}

namespace {

bool inside_shape(ShapeKind kind, double py, double px, double cy, double cx, double ry, double rx) {
  switch (kind) {
    case ShapeKind::rectangle:
      return std::fabs(py - cy) <= ry && std::fabs(px - cx) <= rx;
    case ShapeKind::ellipse: {
      const double dy = (py - cy) / ry, dx = (px - cx) / rx;
      return dy * dy + dx * dx <= 1.0;
    }
    case ShapeKind::triangle: {
      // Apex at top; half width grows linearly from 0 at the apex to rx at the base.
      if (py < cy - ry || py > cy + ry) return false;
      const double half = rx * (py - (cy - ry)) / (2.0 * ry);
      return std::fabs(px - cx) <= half;
    }
  }
  return false;
}

}  // namespace

Sample generate_scene(const SyntheticSceneSpec& spec, std::int64_t index) {
  spec.validate();
  if (index < 0) throw ConfigError("scene index must be >= 0");
  Rng rng(derive_seed({spec.seed, static_cast<std::uint64_t>(index)}));
  const int h = spec.height, w = spec.width;

  std::array<double, 3> background{};
  for (auto& v : background) v = rng.uniform(0.3, 0.7);

  std::vector<double> canvas(static_cast<std::size_t>(3 * h * w));
  for (int c = 0; c < 3; ++c) {
    std::fill_n(canvas.begin() + c * h * w, h * w, background[static_cast<std::size_t>(c)]);
  }
  LabelArray label(h, w, 0);

  const auto n_shapes = rng.range(spec.min_shapes, spec.max_shapes);
  for (std::int64_t s = 0; s < n_shapes; ++s) {
    const ShapeKind kind = spec.shape_kinds[rng.below(spec.shape_kinds.size())];
    const auto cls = static_cast<std::int32_t>(rng.range(1, spec.num_classes - 1));
    auto color = class_color(cls, spec.num_classes);
    for (auto& v : color) v += rng.uniform(-spec.color_jitter, spec.color_jitter);
    const double cy = rng.uniform(0.0, h), cx = rng.uniform(0.0, w);
    const double ry = rng.uniform(spec.min_extent, spec.max_extent) * h;
    const double rx = rng.uniform(spec.min_extent, spec.max_extent) * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!inside_shape(kind, y + 0.5, x + 0.5, cy, cx, ry, rx)) continue;
        label.at(y, x) = cls;
        for (int c = 0; c < 3; ++c) canvas[static_cast<std::size_t>((c * h + y) * w + x)] = color[static_cast<std::size_t>(c)];
      }
    }
  }

  Sample sample;
  sample.id = "scene_" + std::to_string(index);
  sample.image = ImageArray(h, w);
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double v = canvas[i] + spec.texture_noise_std * rng.normal();
    sample.image.values[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  sample.label = std::move(label);
  return sample;
}

std::vector<Sample> generate_dataset(const SyntheticSceneSpec& spec, std::int64_t count, std::int64_t first_index) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(generate_scene(spec, first_index + i));
  return out;
}

DatasetSplit::DatasetSplit(std::vector<Sample> labeled, std::vector<Sample> unlabeled, std::vector<LabelArray> hidden,
                           std::vector<std::size_t> labeled_indices, double ratio, std::uint64_t seed)
    : labeled_(std::move(labeled)),
      unlabeled_(std::move(unlabeled)),
      hidden_(std::move(hidden)),
      labeled_indices_(std::move(labeled_indices)),
      ratio_(ratio),
      seed_(seed) {}

DatasetSplit make_splits(std::span<const Sample> samples, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
  for (const auto& s : samples) {
    if (!s.label) throw ConfigError("make_splits requires labeled samples; '" + s.id + "' has no label");
  }
  const auto n = samples.size();
  const auto n_labeled = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  if (n_labeled == 0) throw ConfigError("split ratio yields zero labeled samples");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed({seed, 0x5111'7ULL}));
  rng.shuffle(order);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_labeled));
  std::sort(chosen.begin(), chosen.end());

  std::vector<bool> is_labeled(n, false);
  for (auto i : chosen) is_labeled[i] = true;
  std::vector<Sample> labeled, unlabeled;
  std::vector<LabelArray> hidden;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_labeled[i]) {
      labeled.push_back(samples[i]);
    } else {
      Sample u = samples[i];
      hidden.push_back(std::move(*u.label));
      u.label.reset();
      unlabeled.push_back(std::move(u));
    }
  }
  return {std::move(labeled), std::move(unlabeled), std::move(hidden), std::move(chosen), ratio, seed};
}

void AugmentationConfig::validate() const {
  for (double p : {flip_probability, photometric_probability, grayscale_probability}) {
    if (p < 0.0 || p > 1.0) throw ConfigError("augmentation probabilities must lie in [0, 1]");
  }
  if (brightness < 0.0 || contrast < 0.0 || saturation < 0.0) throw ConfigError("jitter strengths must be >= 0");
}

void to_json(nlohmann::json& j, const AugmentationConfig& cfg) {
  j = nlohmann::json{{"flip_probability", cfg.flip_probability},
                     {"photometric_probability", cfg.photometric_probability},
                     {"grayscale_probability", cfg.grayscale_probability},
                     {"brightness", cfg.brightness},
                     {"contrast", cfg.contrast},
                     {"saturation", cfg.saturation}};
}

void from_json(const nlohmann::json& j, AugmentationConfig& cfg) {
  for (const auto& [key, value] : j.items()) {
    if (key == "flip_probability") {
      cfg.flip_probability = value.get<double>();
    } else if (key == "photometric_probability") {
      cfg.photometric_probability = value.get<double>();
    } else if (key == "grayscale_probability") {
      cfg.grayscale_probability = value.get<double>();
    } else if (key == "brightness") {
      cfg.brightness = value.get<double>();
    } else if (key == "contrast") {
      cfg.contrast = value.get<double>();
    } else if (key == "saturation") {
      cfg.saturation = value.get<double>();
    } else {
      throw ConfigError("unknown key 'augmentation." + key + "'");
    }
  }
}

Sample flip_horizontal(const Sample& sample) {
  Sample out = sample;
  const int h = sample.image.height, w = sample.image.width;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.image.at(c, y, x) = sample.image.at(c, y, w - 1 - x);
    }
  }
  if (sample.label) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.label->at(y, x) = sample.label->at(y, w - 1 - x);
    }
  }
  return out;
}

Sample augment_shared(const Sample& sample, const AugmentationConfig& cfg, Rng& rng) {
  return rng.bernoulli(cfg.flip_probability) ? flip_horizontal(sample) : sample;
}

namespace {

constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

}  // namespace

ImageArray apply_color_jitter(const ImageArray& image, const ColorJitter& jitter) {
  const std::size_t plane = static_cast<std::size_t>(image.height * image.width);
  std::vector<double> v(image.values.begin(), image.values.end());
  for (auto& x : v) x += jitter.brightness;

  if (jitter.contrast != 1.0) {
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += kLumaR * v[i] + kLumaG * v[plane + i] + kLumaB * v[2 * plane + i];
    mean /= static_cast<double>(plane);
    for (auto& x : v) x = mean + jitter.contrast * (x - mean);
  }
  if (jitter.saturation != 1.0) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double gray = kLumaR * v[i] + kLumaG * v[plane + i] + kLumaB * v[2 * plane + i];
      for (std::size_t c = 0; c < 3; ++c) v[c * plane + i] = gray + jitter.saturation * (v[c * plane + i] - gray);
    }
  }
  ImageArray out(image.height, image.width);
  for (std::size_t i = 0; i < v.size(); ++i) out.values[i] = static_cast<float>(std::clamp(v[i], 0.0, 1.0));
  return out;
}

ImageArray to_grayscale(const ImageArray& image) {
  const std::size_t plane = static_cast<std::size_t>(image.height * image.width);
  ImageArray out(image.height, image.width);
  for (std::size_t i = 0; i < plane; ++i) {
    const double gray = kLumaR * image.values[i] + kLumaG * image.values[plane + i] + kLumaB * image.values[2 * plane + i];
    const auto g = static_cast<float>(std::clamp(gray, 0.0, 1.0));
    out.values[i] = out.values[plane + i] = out.values[2 * plane + i] = g;
  }
  return out;
}

ImageArray perturb_photometric(const ImageArray& image, const AugmentationConfig& cfg, Rng& rng) {
  ImageArray out = image;
  if (rng.bernoulli(cfg.photometric_probability)) {
    ColorJitter j;
    j.brightness = rng.uniform(-cfg.brightness, cfg.brightness);
    j.contrast = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
    j.saturation = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation);
    out = apply_color_jitter(out, j);
  }
  if (rng.bernoulli(cfg.grayscale_probability)) out = to_grayscale(out);
  return out;
}

Batch make_batch(std::span<const Sample> samples, bool with_labels) {
  if (samples.empty()) throw ConfigError("empty batch");
  Batch batch;
  batch.size = static_cast<std::int64_t>(samples.size());
  batch.height = samples[0].image.height;
  batch.width = samples[0].image.width;
  const std::size_t plane = static_cast<std::size_t>(batch.height * batch.width);
  std::vector<float> pixels;
  pixels.reserve(samples.size() * 3 * plane);
  for (const auto& s : samples) {
    if (s.image.height != batch.height || s.image.width != batch.width) {
      throw ShapeError("batch samples differ in size ('" + s.id + "')");
    }
    pixels.insert(pixels.end(), s.image.values.begin(), s.image.values.end());
    if (with_labels) {
      if (!s.label) throw ConfigError("sample '" + s.id + "' has no label");
      batch.labels.insert(batch.labels.end(), s.label->values.begin(), s.label->values.end());
    }
  }
  batch.images = Tensor::from_data({batch.size, 3, batch.height, batch.width}, std::move(pixels));
  return batch;
}

Batch make_image_batch(std::span<const ImageArray> images) {
  std::vector<Sample> samples;
  samples.reserve(images.size());
  for (const auto& img : images) samples.push_back(Sample{"", img, std::nullopt});
  return make_batch(samples, false);
}

}  // namespace eln
