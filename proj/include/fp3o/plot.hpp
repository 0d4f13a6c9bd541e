#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fp3o/metrics.hpp"

namespace fp3o {

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> mean;
  std::vector<double> band;  // one standard deviation across seeds
};

namespace detail {

inline std::string fmt_num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

inline const char* palette(int i) {
  static const char* colors[] = {"#4878cf", "#d65f5f", "#59a14f", "#e49444",
                                 "#8172b2", "#937860", "#64b5cd", "#c44e52"};
  return colors[i % 8];
}

}  // namespace detail

// Minimal SVG line chart with mean +- band regions and a legend.
inline void write_svg_chart(std::ostream& out, const std::string& title,
                            const std::vector<PlotSeries>& series) {
  const double width = 720, height = 480;
  const double ml = 70, mr = 20, mt = 36, mb = 46;
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  bool any = false;
  for (const PlotSeries& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double lo = s.mean[i] - s.band[i], hi = s.mean[i] + s.band[i];
      if (!any) {
        x_min = x_max = s.x[i];
        y_min = lo;
        y_max = hi;
        any = true;
      }
      x_min = std::min(x_min, s.x[i]);
      x_max = std::max(x_max, s.x[i]);
      y_min = std::min(y_min, lo);
      y_max = std::max(y_max, hi);
    }
  if (x_max <= x_min) x_max = x_min + 1.0;
  if (y_max <= y_min) y_max = y_min + 1.0;
  const double y_pad = 0.05 * (y_max - y_min);
  y_min -= y_pad;
  y_max += y_pad;

  auto sx = [&](double x) {
    return ml + (x - x_min) / (x_max - x_min) * (width - ml - mr);
  };
  auto sy = [&](double y) {
    return height - mb - (y - y_min) / (y_max - y_min) * (height - mt - mb);
  };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " "
      << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"14\">" << title
      << "</text>\n";
  // axes
  out << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\""
      << width - mr << "\" y2=\"" << height - mb
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
      << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 5; ++t) {
    const double fx = x_min + (x_max - x_min) * t / 5.0;
    const double fy = y_min + (y_max - y_min) * t / 5.0;
    out << "<text x=\"" << sx(fx) << "\" y=\"" << height - mb + 16
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        << "font-size=\"10\">" << detail::fmt_num(fx) << "</text>\n";
    out << "<text x=\"" << ml - 6 << "\" y=\"" << sy(fy) + 3
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
        << "font-size=\"10\">" << detail::fmt_num(fy) << "</text>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << sy(fy) << "\" x2=\""
        << width - mr << "\" y2=\"" << sy(fy)
        << "\" stroke=\"#dddddd\" stroke-width=\"0.5\"/>\n";
  }

  int idx = 0;
  for (const PlotSeries& s : series) {
    const char* color = detail::palette(idx);
    if (!s.x.empty()) {
      out << "<polygon fill=\"" << color << "\" opacity=\"0.18\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i)
        out << sx(s.x[i]) << "," << sy(s.mean[i] + s.band[i]) << " ";
      for (std::size_t i = s.x.size(); i-- > 0;)
        out << sx(s.x[i]) << "," << sy(s.mean[i] - s.band[i]) << " ";
      out << "\"/>\n";
      out << "<polyline fill=\"none\" stroke=\"" << color
          << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i)
        out << sx(s.x[i]) << "," << sy(s.mean[i]) << " ";
      out << "\"/>\n";
    }
    out << "<rect x=\"" << ml + 10 << "\" y=\"" << mt + 14 * idx << "\" "
        << "width=\"10\" height=\"10\" fill=\"" << color << "\"/>\n";
    out << "<text x=\"" << ml + 24 << "\" y=\"" << mt + 14 * idx + 9
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << s.label
        << "</text>\n";
    ++idx;
  }
  if (series.empty())
    out << "<text x=\"" << width / 2 << "\" y=\"" << height / 2
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        << "font-size=\"12\" fill=\"#888888\">no data</text>\n";
  out << "</svg>\n";
}

struct PlotResult {
  int series = 0;
  int warnings = 0;
  std::vector<std::filesystem::path> outputs;
};

// Read every metrics JSONL under in_dir, group runs by (env, algo,
// sharing), aggregate seeds into mean +- std bands, and emit one SVG per
// metric. Malformed lines are skipped and counted.
inline PlotResult plot_runs(const std::filesystem::path& in_dir,
                            const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  PlotResult result;
  std::map<std::string, std::map<std::uint64_t, std::vector<MetricRecord>>>
      groups;
  if (fs::exists(in_dir))
    for (const auto& entry : fs::recursive_directory_iterator(in_dir)) {
      if (!entry.is_regular_file() || entry.path().extension() != ".jsonl")
        continue;
      std::ifstream in(entry.path());
      const std::vector<MetricRecord> records =
          read_jsonl(in, &result.warnings);
      for (const MetricRecord& r : records) {
        const std::string key = r.env + " " + r.algo + " " + r.sharing;
        groups[key][r.seed].push_back(r);
      }
    }

  auto build = [&](auto&& value_of, bool eval_only) {
    std::vector<PlotSeries> series;
    for (const auto& [label, seeds] : groups) {
      // per-seed sequences, truncated to the shortest
      std::vector<std::vector<std::pair<double, double>>> runs;
      for (const auto& [seed, records] : seeds) {
        std::vector<std::pair<double, double>> pts;
        for (const MetricRecord& r : records) {
          if (eval_only && !r.eval_mean) continue;
          pts.emplace_back(static_cast<double>(r.env_steps), value_of(r));
        }
        if (!pts.empty()) runs.push_back(std::move(pts));
      }
      if (runs.empty()) continue;
      std::size_t len = runs[0].size();
      for (const auto& r : runs) len = std::min(len, r.size());
      PlotSeries s;
      s.label = label;
      for (std::size_t i = 0; i < len; ++i) {
        double mean = 0.0;
        for (const auto& r : runs) mean += r[i].second;
        mean /= runs.size();
        double var = 0.0;
        for (const auto& r : runs)
          var += (r[i].second - mean) * (r[i].second - mean);
        var /= runs.size();
        s.x.push_back(runs[0][i].first);
        s.mean.push_back(mean);
        s.band.push_back(std::sqrt(var));
      }
      series.push_back(std::move(s));
    }
    return series;
  };

  fs::create_directories(out_dir);
  {
    const auto series = build(
        [](const MetricRecord& r) { return r.eval_mean.value_or(0.0); }, true);
    result.series += static_cast<int>(series.size());
    const fs::path p = out_dir / "eval_return.svg";
    std::ofstream out(p);
    write_svg_chart(out, "evaluation return", series);
    result.outputs.push_back(p);
  }
  {
    const auto series = build(
        [](const MetricRecord& r) {
          double worst = 0.0;
          for (double v : r.kl_max) worst = std::max(worst, v);
          return worst;
        },
        false);
    const fs::path p = out_dir / "kl_max.svg";
    std::ofstream out(p);
    write_svg_chart(out, "max per-agent KL", series);
    result.outputs.push_back(p);
  }
  return result;
}

}  // namespace fp3o
