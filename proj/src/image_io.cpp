#include <algorithm>
#include <map>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "eln/datagen.hpp"

namespace eln {

namespace fs = std::filesystem;

namespace {

std::map<std::string, fs::path> png_files_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") out[entry.path().stem().string()] = entry.path();
  }
  return out;
}

ImageArray read_rgb(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image " + path.string());
  if (bgr.depth() != CV_8U) throw IngestionError("image " + path.string() + " is not 8-bit");
  ImageArray img(bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(row[x][2 - c]) / 255.0F;
    }
  }
  return img;
}

LabelArray read_label(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("cannot read label " + path.string());
  if (m.type() != CV_8UC1) throw IngestionError("label " + path.string() + " must be 8-bit single channel");
  LabelArray label(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) label.at(y, x) = row[x];
  }
  return label;
}

}  // namespace

std::vector<Sample> load_folder_dataset(const fs::path& root, int num_classes) {
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + root.string());
  auto images = png_files_by_stem(root / "images");
  auto labels = png_files_by_stem(root / "labels");
  for (const auto& [stem, path] : labels) {
    if (!images.contains(stem)) throw IngestionError("label '" + stem + "' has no matching image");
  }
  std::vector<Sample> out;
  for (const auto& [stem, path] : images) {
    Sample s;
    s.id = stem;
    s.image = read_rgb(path);
    if (auto it = labels.find(stem); it != labels.end()) {
      LabelArray label = read_label(it->second);
      if (label.height != s.image.height || label.width != s.image.width) {
        throw IngestionError("sample '" + stem + "': label size differs from image size");
      }
      auto bad = std::find_if(label.values.begin(), label.values.end(), [&](auto v) { return v >= num_classes; });
      if (bad != label.values.end()) {
        throw IngestionError("sample '" + stem + "': label value " + std::to_string(*bad) + " >= num_classes " +
                             std::to_string(num_classes));
      }
      s.label = std::move(label);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_folder_dataset(const fs::path& root, std::span<const Sample> samples) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");
  for (const auto& s : samples) {
    if (s.id.empty()) throw IoError("cannot write a sample without an id");
    cv::Mat bgr(s.image.height, s.image.width, CV_8UC3);
    for (int y = 0; y < s.image.height; ++y) {
      auto* row = bgr.ptr<cv::Vec3b>(y);
      for (int x = 0; x < s.image.width; ++x) {
        for (int c = 0; c < 3; ++c) {
          row[x][2 - c] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image.at(c, y, x), 0.0F, 1.0F) * 255.0F));
        }
      }
    }
    const auto image_path = root / "images" / (s.id + ".png");
    if (!cv::imwrite(image_path.string(), bgr)) throw IoError("cannot write " + image_path.string());
    if (s.label) {
      cv::Mat m(s.label->height, s.label->width, CV_8UC1);
      for (int y = 0; y < m.rows; ++y) {
        for (int x = 0; x < m.cols; ++x) m.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(s.label->at(y, x));
      }
      const auto label_path = root / "labels" / (s.id + ".png");
      if (!cv::imwrite(label_path.string(), m)) throw IoError("cannot write " + label_path.string());
    }
  }
}

}  // namespace eln
