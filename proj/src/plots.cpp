#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "eln/experiment.hpp"

namespace fs = std::filesystem;

namespace eln {

namespace {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

const cv::Scalar kPalette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214},
                               {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// Axes with min/max tick labels; returns the plot-area rectangle.
cv::Rect draw_axes(cv::Mat& img, const std::string& title, double x0, double x1, double y0, double y1) {
  const cv::Rect area(70, 40, img.cols - 90, img.rows - 90);
  cv::rectangle(img, area, {0, 0, 0}, 1);
  cv::putText(img, title, {70, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.55, {0, 0, 0}, 1, cv::LINE_AA);
  cv::putText(img, fmt(y1), {5, area.y + 5}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1, cv::LINE_AA);
  cv::putText(img, fmt(y0), {5, area.y + area.height}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1, cv::LINE_AA);
  cv::putText(img, fmt(x0), {area.x, area.y + area.height + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1,
              cv::LINE_AA);
  cv::putText(img, fmt(x1), {area.x + area.width - 30, area.y + area.height + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
              {0, 0, 0}, 1, cv::LINE_AA);
  return area;
}

bool line_chart(const fs::path& path, const std::string& title, const std::vector<Series>& series) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      if (!std::isfinite(y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!std::isfinite(x0)) return false;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  cv::Mat img(480, 800, CV_8UC3, cv::Scalar(255, 255, 255));
  const auto area = draw_axes(img, title, x0, x1, y0, y1);
  auto map = [&](double x, double y) {
    return cv::Point(area.x + static_cast<int>((x - x0) / (x1 - x0) * area.width),
                     area.y + area.height - static_cast<int>((y - y0) / (y1 - y0) * area.height));
  };
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto color = kPalette[i % std::size(kPalette)];
    std::vector<cv::Point> pts;
    for (auto [x, y] : series[i].points) {
      if (std::isfinite(y)) pts.push_back(map(x, y));
    }
    if (pts.size() == 1) cv::circle(img, pts[0], 3, color, cv::FILLED, cv::LINE_AA);
    if (pts.size() > 1) cv::polylines(img, pts, false, color, 1, cv::LINE_AA);
    cv::putText(img, series[i].name, {area.x + area.width - 160, area.y + 18 + 16 * static_cast<int>(i)},
                cv::FONT_HERSHEY_SIMPLEX, 0.45, color, 1, cv::LINE_AA);
  }
  fs::create_directories(path.parent_path());
  return cv::imwrite(path.string(), img);
}

bool bar_chart(const fs::path& path, const std::string& title,
               const std::vector<std::tuple<std::string, double, double>>& bars) {
  if (bars.empty()) return false;
  double y1 = 0.0;
  for (const auto& [n, m, s] : bars) y1 = std::max(y1, m + s);
  if (y1 <= 0.0) y1 = 1.0;
  cv::Mat img(480, std::max(800, 90 + 70 * static_cast<int>(bars.size())), CV_8UC3, cv::Scalar(255, 255, 255));
  const auto area = draw_axes(img, title, 0, static_cast<double>(bars.size()), 0.0, y1);
  const int w = area.width / static_cast<int>(bars.size());
  auto ypix = [&](double y) { return area.y + area.height - static_cast<int>(y / y1 * area.height); };
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const auto& [name, mean, sd] = bars[i];
    const int x = area.x + static_cast<int>(i) * w;
    cv::rectangle(img, cv::Point(x + w / 5, ypix(mean)), cv::Point(x + 4 * w / 5, ypix(0.0)),
                  kPalette[i % std::size(kPalette)], cv::FILLED);
    cv::line(img, {x + w / 2, ypix(mean - sd)}, {x + w / 2, ypix(mean + sd)}, {0, 0, 0}, 1, cv::LINE_AA);
    cv::putText(img, name, {x + 2, area.y + area.height + 34}, cv::FONT_HERSHEY_SIMPLEX, 0.38, {0, 0, 0}, 1,
                cv::LINE_AA);
    cv::putText(img, fmt(mean), {x + w / 5, ypix(mean) - 4}, cv::FONT_HERSHEY_SIMPLEX, 0.38, {0, 0, 0}, 1,
                cv::LINE_AA);
  }
  fs::create_directories(path.parent_path());
  return cv::imwrite(path.string(), img);
}

std::vector<nlohmann::json> read_records(const fs::path& path) {
  std::vector<nlohmann::json> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error&) {
      break;
    }
  }
  return out;
}

std::vector<fs::path> sorted_dirs(const fs::path& root, const std::string& prefix) {
  std::vector<fs::path> out;
  if (!fs::is_directory(root)) return out;
  for (const auto& e : fs::directory_iterator(root)) {
    const auto name = e.path().filename().string();
    if (e.is_directory() && name.rfind(prefix, 0) == 0) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::vector<fs::path> render_plots(const ExperimentConfig& cfg) {
  std::vector<fs::path> written;
  const fs::path plots = cfg.output_dir / "plots";
  for (const auto& dir : sorted_dirs(cfg.output_dir, "seed_")) {
    const auto tag = dir.filename().string();
    const auto records = read_records(dir / "metrics.jsonl");
    if (!records.empty()) {
      // Global step: stages laid end to end.
      std::map<std::string, Series> losses;
      Series miou{"mIoU", {}};
      std::map<std::string, std::int64_t> stage_len;
      for (const auto& r : records) {
        auto& len = stage_len[r.at("stage").get<std::string>()];
        len = std::max(len, r.at("iter").get<std::int64_t>());
      }
      for (const auto& r : records) {
        const auto stage = r.at("stage").get<std::string>();
        double x = static_cast<double>(r.at("iter").get<std::int64_t>());
        if (stage != "pretrain") x += static_cast<double>(stage_len["pretrain"]);
        if (stage == "stage2") x += static_cast<double>(stage_len["stage1"]);
        for (const char* k : {"sup", "aux", "eln", "pseudo", "contra", "total"}) {
          if (r.contains(k) && r[k].is_number()) {
            auto& s = losses[k];
            s.name = k;
            s.points.emplace_back(x, r[k].get<double>());
          }
        }
        if (r.contains("mIoU") && r["mIoU"].is_number()) miou.points.emplace_back(x, r["mIoU"].get<double>());
      }
      std::vector<Series> ls;
      for (auto& [k, s] : losses) ls.push_back(std::move(s));
      const auto p1 = plots / (tag + "_losses.png");
      if (line_chart(p1, tag + " losses", ls)) written.push_back(p1);
      const auto p2 = plots / (tag + "_miou.png");
      if (line_chart(p2, tag + " validation mIoU", {miou})) written.push_back(p2);
    }
    if (fs::exists(dir / "eval.json")) {
      std::ifstream in(dir / "eval.json");
      const auto e = nlohmann::json::parse(in);
      const auto& loc = e.at("localization");
      Series sweep{"threshold F1", {}};
      for (const auto& t : loc.at("threshold_sweep")) {
        sweep.points.emplace_back(t.at("threshold").get<double>(), t.at("f1").get<double>());
      }
      std::vector<Series> all{sweep};
      for (const char* k : {"eln", "secn"}) {
        if (!loc.contains(k) || sweep.points.empty()) continue;
        const double f1 = loc[k].at("f1").get<double>();
        all.push_back(Series{std::string(k) + " F1", {{sweep.points.front().first, f1}, {sweep.points.back().first, f1}}});
      }
      const auto p = plots / (tag + "_localization.png");
      if (line_chart(p, tag + " localization F1 vs threshold", all)) written.push_back(p);
    }
  }
  std::vector<std::tuple<std::string, double, double>> miou_bars, f1_bars;
  for (const auto& vdir : sorted_dirs(cfg.output_dir / "ablate", "")) {
    const auto name = vdir.filename().string();
    if (name.front() == '_') continue;
    std::vector<double> miou, f1;
    for (const auto& sdir : sorted_dirs(vdir, "seed_")) {
      if (!fs::exists(sdir / "eval.json")) continue;
      std::ifstream in(sdir / "eval.json");
      const auto e = nlohmann::json::parse(in);
      miou.push_back(e.at("mIoU").get<double>());
      if (e.at("localization").contains("eln")) f1.push_back(e["localization"]["eln"].at("f1").get<double>());
    }
    if (!miou.empty()) {
      auto [m, s] = mean_std(miou);
      miou_bars.emplace_back(name, m, s);
    }
    if (!f1.empty()) {
      auto [m, s] = mean_std(f1);
      f1_bars.emplace_back(name, m, s);
    }
  }
  if (bar_chart(plots / "ablation_miou.png", "ablation mIoU (mean +/- std over seeds)", miou_bars)) {
    written.push_back(plots / "ablation_miou.png");
  }
  if (bar_chart(plots / "ablation_eln_f1.png", "ablation ELN F1 (mean +/- std over seeds)", f1_bars)) {
    written.push_back(plots / "ablation_eln_f1.png");
  }
  return written;
}

}  // namespace eln
