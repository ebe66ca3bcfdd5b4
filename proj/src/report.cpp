// SPDX-License-Identifier: Apache-2.0
#include "cpe/report.hpp"

#include "cpe/config.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <tuple>

namespace cpe {

using nlohmann::json;

namespace {

struct MetricRecord {
  std::int64_t step = 0;
  std::string metric;
  std::string expert;  // "E1".. or empty
  std::string group;
  double value = 0.0;
  int row = -1, col = -1, channel = -1;
  std::string origin;
};

struct RunData {
  std::string name;
  ExperimentConfig config;
  std::vector<MetricRecord> records;
  std::int64_t final_step = 0;
};

RunData load_run(const std::filesystem::path& dir) {
  RunData run;
  run.name = dir.filename().string();
  const auto config_path = dir / "config.json";
  const auto metrics_path = dir / "metrics.jsonl";
  if (!std::filesystem::exists(config_path) || !std::filesystem::exists(metrics_path))
    throw std::runtime_error("report: '" + dir.string() +
                             "' is not a run directory (missing config.json or metrics.jsonl)");
  run.config = load_experiment_config(config_path);

  std::ifstream in(metrics_path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    MetricRecord r;
    r.step = j.at("step").get<std::int64_t>();
    r.metric = j.at("metric").get<std::string>();
    if (j.contains("expert") && !j.at("expert").is_null())
      r.expert = j.at("expert").get<std::string>();
    if (j.contains("group") && !j.at("group").is_null())
      r.group = j.at("group").get<std::string>();
    r.value = j.at("value").get<double>();
    r.row = j.value("row", -1);
    r.col = j.value("col", -1);
    r.channel = j.value("channel", -1);
    r.origin = j.value("origin", std::string());
    run.final_step = std::max(run.final_step, r.step);
    run.records.push_back(std::move(r));
  }
  if (run.records.empty())
    throw std::runtime_error("report: no metrics records in " + metrics_path.string());
  return run;
}

std::string cell_label(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << cfg.dataset.type << "/" << to_string(cfg.split.distribution_case) << "/n1="
      << cfg.split.n1 << ",m1=" << cfg.split.m1 << ",gamma=" << cfg.split.gamma_l
      << "/experts=" << cfg.num_experts << (cfg.train.cbn_enabled ? "/cbn" : "/no-cbn");
  return out.str();
}

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;
  int n = 0;
};

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd out;
  out.n = static_cast<int>(values.size());
  if (values.empty()) return out;
  for (double v : values) out.mean += v;
  out.mean /= values.size();
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.stddev = std::sqrt(ss / values.size());
  return out;
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(digits);
  out << v;
  return out.str();
}

// --- tiny SVG helpers -------------------------------------------------------

class SvgCanvas {
 public:
  SvgCanvas(int width, int height) : width_(width), height_(height) {
    body_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
          << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " "
          << height << "\">\n";
    body_ << "<rect width=\"" << width << "\" height=\"" << height
          << "\" fill=\"white\"/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    body_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w
          << "\" height=\"" << h << "\" fill=\"" << fill << "\"/>\n";
  }
  void circle(double x, double y, double r, const std::string& fill) {
    body_ << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"" << r
          << "\" fill=\"" << fill << "\" fill-opacity=\"0.7\"/>\n";
  }
  void line(double x1, double y1, double x2, double y2) {
    body_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2
          << "\" y2=\"" << y2 << "\" stroke=\"#444\" stroke-width=\"1\"/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 11) {
    body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-family=\"sans-serif\" font-size=\""
          << size << "\">" << s << "</text>\n";
  }
  void save(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("report: cannot write " + path.string());
    out << body_.str() << "</svg>\n";
  }

 private:
  int width_, height_;
  std::ostringstream body_;
};

const char* kExpertColor[] = {"#4477aa", "#ee6677", "#228833"};

void write_f1_outputs(const std::vector<RunData>& runs,
                      const std::filesystem::path& out_dir) {
  std::ofstream csv(out_dir / "f1_bars.csv");
  csv << "run,case,expert,group,f1\n";

  struct Bar {
    std::string run, case_name, expert, group;
    double value;
  };
  std::vector<Bar> bars;
  for (const auto& run : runs) {
    for (const auto& r : run.records) {
      if (r.metric != "pseudo_f1" || r.step != run.final_step) continue;
      bars.push_back({run.name, to_string(run.config.split.distribution_case), r.expert,
                      r.group, r.value});
      csv << run.name << ',' << to_string(run.config.split.distribution_case) << ','
          << r.expert << ',' << r.group << ',' << fmt(r.value) << '\n';
    }
  }

  // grouped bars: one cluster per (run, group), one bar per expert
  std::vector<Bar> plot;
  for (const auto& b : bars)
    if (b.group != "overall") plot.push_back(b);
  const int width = std::max(480, static_cast<int>(plot.size()) * 18 + 120);
  SvgCanvas svg(width, 320);
  const double base = 260, x0 = 60, bar_w = 14, h_max = 200;
  svg.line(x0 - 10, base, width - 20, base);
  svg.line(x0 - 10, base, x0 - 10, base - h_max - 10);
  svg.text(8, base - h_max, "F1=1", 10);
  double x = x0;
  std::string last_cluster;
  for (const auto& b : plot) {
    const std::string cluster = b.run + "/" + b.group;
    if (!last_cluster.empty() && cluster != last_cluster) x += 10;
    if (cluster != last_cluster) {
      svg.text(x, base + 14, b.group, 9);
      last_cluster = cluster;
    }
    int expert_idx = (b.expert.size() == 2 && b.expert[1] >= '1') ? b.expert[1] - '1' : 0;
    expert_idx = std::clamp(expert_idx, 0, 2);
    svg.rect(x, base - b.value * h_max, bar_w, b.value * h_max, kExpertColor[expert_idx]);
    x += bar_w + 2;
  }
  svg.text(x0, 24, "Final pseudo-label F1 per expert (blue=E1, red=E2, green=E3)");
  svg.save(out_dir / "f1_bars.svg");
}

void write_accuracy_table(const std::vector<RunData>& runs,
                          const std::filesystem::path& out_dir) {
  std::map<std::string, std::vector<double>> cells;
  for (const auto& run : runs) {
    std::optional<double> final_acc;
    for (const auto& r : run.records)
      if (r.metric == "test_top1" && r.step == run.final_step) final_acc = r.value;
    if (final_acc) cells[cell_label(run.config)].push_back(*final_acc);
  }

  json table = json::array();
  std::ostringstream txt;
  txt << "cell | top-1 accuracy (mean +/- std over seeds) | runs\n";
  txt << "-----|------------------------------------------|-----\n";
  for (const auto& [label, values] : cells) {
    const auto ms = mean_std(values);
    table.push_back(json{{"cell", label},
                         {"mean", ms.mean},
                         {"std", ms.stddev},
                         {"runs", ms.n}});
    txt << label << " | " << fmt(ms.mean, 3) << " +/- " << fmt(ms.stddev, 3) << " | "
        << ms.n << '\n';
  }
  std::ofstream jf(out_dir / "accuracy_table.json");
  jf << table.dump(2) << '\n';
  std::ofstream tf(out_dir / "accuracy_table.txt");
  tf << txt.str();
}

void write_feature_outputs(const std::vector<RunData>& runs,
                           const std::filesystem::path& out_dir) {
  std::ofstream csv(out_dir / "feature_stats.csv");
  csv << "run,group,origin,channel,mean,std\n";

  struct Dot {
    double mean, stddev;
    std::string group, origin;
  };
  std::vector<Dot> dots;
  for (const auto& run : runs) {
    std::map<std::tuple<std::string, std::string, int>, std::pair<double, double>> chan;
    for (const auto& r : run.records) {
      if (r.step != run.final_step || r.channel < 0) continue;
      auto key = std::make_tuple(r.group, r.origin, r.channel);
      if (r.metric == "feature_mean") chan[key].first = r.value;
      if (r.metric == "feature_std") chan[key].second = r.value;
    }
    for (const auto& [key, ms] : chan) {
      csv << run.name << ',' << std::get<0>(key) << ',' << std::get<1>(key) << ','
          << std::get<2>(key) << ',' << fmt(ms.first) << ',' << fmt(ms.second) << '\n';
      dots.push_back({ms.first, ms.second, std::get<0>(key), std::get<1>(key)});
    }
  }

  SvgCanvas svg(480, 360);
  if (!dots.empty()) {
    double lo_m = dots[0].mean, hi_m = dots[0].mean, hi_s = 0.0;
    for (const auto& d : dots) {
      lo_m = std::min(lo_m, d.mean);
      hi_m = std::max(hi_m, d.mean);
      hi_s = std::max(hi_s, d.stddev);
    }
    const double span_m = std::max(1e-9, hi_m - lo_m), span_s = std::max(1e-9, hi_s);
    for (const auto& d : dots) {
      const double x = 50 + 380 * (d.mean - lo_m) / span_m;
      const double y = 310 - 260 * d.stddev / span_s;
      std::string color = d.group == "head" ? "#4477aa" : d.group == "medium" ? "#ccbb44" : "#ee6677";
      if (d.origin == "unlabeled") {
        svg.circle(x, y, 4, color);
      } else {
        svg.rect(x - 3, y - 3, 6, 6, color);
      }
    }
  }
  svg.text(50, 24, "Feature channels: mean (x) vs std (y); squares=labeled, dots=unlabeled");
  svg.text(50, 40, "blue=head, yellow=medium, red=tail", 10);
  svg.save(out_dir / "feature_stats.svg");
}

void write_confusions(const std::vector<RunData>& runs,
                      const std::filesystem::path& out_dir) {
  for (const auto& run : runs) {
    std::map<std::pair<int, int>, double> m;
    int C = 0;
    for (const auto& r : run.records) {
      if (r.metric != "confusion" || r.step != run.final_step) continue;
      m[{r.row, r.col}] = r.value;
      C = std::max(C, std::max(r.row, r.col) + 1);
    }
    if (C == 0) continue;
    std::ofstream csv(out_dir / ("confusion_" + run.name + ".csv"));
    double max_count = 1.0;
    for (const auto& [rc, v] : m) max_count = std::max(max_count, v);
    SvgCanvas svg(60 + C * 24, 80 + C * 24);
    svg.text(10, 20, "Confusion (rows=true, cols=predicted): " + run.name, 10);
    for (int r = 0; r < C; ++r) {
      for (int c = 0; c < C; ++c) {
        const double v = m.count({r, c}) ? m[{r, c}] : 0.0;
        csv << static_cast<std::int64_t>(v) << (c + 1 < C ? "," : "\n");
        const int shade = static_cast<int>(255 - 215 * (v / max_count));
        std::ostringstream color;
        color << "rgb(" << shade << "," << shade << ",255)";
        svg.rect(40 + c * 24, 40 + r * 24, 23, 23, color.str());
      }
    }
    svg.save(out_dir / ("confusion_" + run.name + ".svg"));
  }
}

}  // namespace

void write_report(const std::vector<std::filesystem::path>& run_dirs,
                  const std::filesystem::path& out_dir) {
  if (run_dirs.empty()) throw std::invalid_argument("report: no run directories given");
  std::vector<RunData> runs;
  for (const auto& dir : run_dirs) runs.push_back(load_run(dir));
  std::sort(runs.begin(), runs.end(),
            [](const RunData& a, const RunData& b) { return a.name < b.name; });

  std::filesystem::create_directories(out_dir);
  write_accuracy_table(runs, out_dir);
  write_f1_outputs(runs, out_dir);
  write_feature_outputs(runs, out_dir);
  write_confusions(runs, out_dir);
}

}  // namespace cpe
