#include "wdlab/plot.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace wdlab {

PlotKind plot_kind_from_string(const std::string& s) {
  if (s == "norm_curves") return PlotKind::NormCurves;
  if (s == "accuracy_curves") return PlotKind::AccuracyCurves;
  if (s == "decomposition") return PlotKind::Decomposition;
  if (s == "cosines") return PlotKind::Cosines;
  if (s == "quantile_band") return PlotKind::QuantileBand;
  if (s == "sharpness_bars") return PlotKind::SharpnessBars;
  throw std::invalid_argument("plot: unknown kind '" + s + "'");
}

namespace {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::vector<nlohmann::json> read_metric_lines(const std::string& run_dir) {
  const std::string path = (fs::path(run_dir) / "metrics.jsonl").string();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("plot: cannot open " + path);
  std::vector<nlohmann::json> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(nlohmann::json::parse(line));
  }
  return lines;
}

std::string run_label(const std::string& run_dir,
                      const std::vector<nlohmann::json>& lines) {
  if (!lines.empty() && lines.front().contains("run_id"))
    return lines.front().at("run_id").get<std::string>();
  return fs::path(run_dir).filename().string();
}

double require_field(const nlohmann::json& rec, const char* field,
                     const std::string& run, const std::string& kind) {
  if (!rec.contains(field))
    throw std::runtime_error("plot: run '" + run + "' is missing column '" +
                             field + "' required by kind " + kind);
  return rec.at(field).get<double>();
}

// Axis tick placement on multiples of 1/2/5.
std::vector<double> nice_ticks(double lo, double hi, int target = 6) {
  if (!(hi > lo)) hi = lo + 1.0;
  const double span = hi - lo;
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (raw <= m * mag) {
      step = m * mag;
      break;
    }
  }
  std::vector<double> ticks;
  for (double t = std::ceil(lo / step) * step; t <= hi + step * 1e-9; t += step)
    ticks.push_back(t);
  return ticks;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
                          "#bcbd22", "#e377c2"};

void write_line_svg(const std::string& out_path, const std::vector<Series>& series,
                    const std::string& title, const std::string& x_label,
                    const std::string& y_label) {
  const double width = 860, height = 520;
  const double ml = 70, mr = 180, mt = 40, mb = 50;
  const double pw = width - ml - mr, ph = height - mt - mb;

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    for (double v : s.x) { xmin = std::min(xmin, v); xmax = std::max(xmax, v); }
    for (double v : s.y) { ymin = std::min(ymin, v); ymax = std::max(ymax, v); }
  }
  if (!std::isfinite(xmin)) { xmin = 0; xmax = 1; }
  if (!std::isfinite(ymin)) { ymin = 0; ymax = 1; }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double v) { return mt + ph - (v - ymin) / (ymax - ymin) * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " "
      << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << ml << "\" y=\"24\" font-family=\"sans-serif\" "
         "font-size=\"16\">" << title << "</text>\n";

  for (double t : nice_ticks(xmin, xmax)) {
    svg << "<line x1=\"" << fmt(px(t)) << "\" y1=\"" << mt + ph << "\" x2=\""
        << fmt(px(t)) << "\" y2=\"" << mt << "\" stroke=\"#eeeeee\"/>\n";
    svg << "<text x=\"" << fmt(px(t)) << "\" y=\"" << mt + ph + 18
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">"
        << fmt(t) << "</text>\n";
  }
  for (double t : nice_ticks(ymin, ymax)) {
    svg << "<line x1=\"" << ml << "\" y1=\"" << fmt(py(t)) << "\" x2=\""
        << ml + pw << "\" y2=\"" << fmt(py(t)) << "\" stroke=\"#eeeeee\"/>\n";
    svg << "<text x=\"" << ml - 6 << "\" y=\"" << fmt(py(t) + 4)
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">"
        << fmt(t) << "</text>\n";
  }
  svg << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw
      << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#333333\"/>\n";
  svg << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 12
      << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">"
      << x_label << "</text>\n";
  svg << "<text x=\"18\" y=\"" << mt + ph / 2
      << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" "
         "transform=\"rotate(-90 18 " << mt + ph / 2 << ")\">" << y_label
      << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kPalette[i % (sizeof(kPalette) / sizeof(kPalette[0]))];
    svg << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (k) svg << " ";
      svg << fmt(px(s.x[k])) << "," << fmt(py(s.y[k]));
    }
    svg << "\"/>\n";
    const double ly = mt + 16.0 * static_cast<double>(i);
    svg << "<line x1=\"" << ml + pw + 10 << "\" y1=\"" << fmt(ly) << "\" x2=\""
        << ml + pw + 30 << "\" y2=\"" << fmt(ly) << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << ml + pw + 34 << "\" y=\"" << fmt(ly + 4)
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << s.label
        << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("plot: cannot write " + out_path);
  out << svg.str();
}

void write_bar_svg(const std::string& out_path, const std::vector<Series>& bars,
                   const std::string& title) {
  // bars: one Series per run; x ignored, y holds one value per metric label.
  const double width = 860, height = 520;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"70\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">"
      << title << "</text>\n";

  double ymax = 0;
  for (const auto& s : bars)
    for (double v : s.y) ymax = std::max(ymax, std::abs(v));
  if (ymax == 0) ymax = 1;

  const double ml = 70, mt = 50, ph = 400;
  const double group_w = (width - ml - 40) / std::max<std::size_t>(1, bars.size());
  for (std::size_t g = 0; g < bars.size(); ++g) {
    const auto& s = bars[g];
    const double bar_w = group_w / (static_cast<double>(s.y.size()) + 1.0);
    for (std::size_t k = 0; k < s.y.size(); ++k) {
      const double h = std::abs(s.y[k]) / ymax * ph;
      const double x = ml + group_w * static_cast<double>(g) +
                       bar_w * static_cast<double>(k);
      const char* color = kPalette[k % (sizeof(kPalette) / sizeof(kPalette[0]))];
      svg << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(mt + ph - h)
          << "\" width=\"" << fmt(bar_w * 0.9) << "\" height=\"" << fmt(h)
          << "\" fill=\"" << color << "\"/>\n";
      svg << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(mt + ph - h - 4)
          << "\" font-family=\"sans-serif\" font-size=\"10\">" << fmt(s.y[k])
          << "</text>\n";
    }
    svg << "<text x=\"" << fmt(ml + group_w * static_cast<double>(g))
        << "\" y=\"" << mt + ph + 18
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << s.label
        << "</text>\n";
  }
  svg << "</svg>\n";
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("plot: cannot write " + out_path);
  out << svg.str();
}

void export_series_csv(const std::string& out_path, const std::vector<Series>& series) {
  const fs::path p = fs::path(out_path).replace_extension(".csv");
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("plot: cannot write " + p.string());
  out << "series,x,y\n";
  char buf[64];
  for (const auto& s : series) {
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g", s.x[k], s.y[k]);
      out << s.label << "," << buf << "\n";
    }
  }
}

}  // namespace

void plot_runs(const std::vector<std::string>& run_dirs, PlotKind kind,
               const std::string& out_path) {
  if (run_dirs.empty()) throw std::invalid_argument("plot: no runs given");

  std::vector<Series> series;
  std::string title, xlab, ylab;
  const std::string kind_name =
      kind == PlotKind::NormCurves ? "norm_curves"
      : kind == PlotKind::AccuracyCurves ? "accuracy_curves"
      : kind == PlotKind::Decomposition ? "decomposition"
      : kind == PlotKind::Cosines ? "cosines"
      : kind == PlotKind::QuantileBand ? "quantile_band"
                                       : "sharpness_bars";

  for (const auto& dir : run_dirs) {
    const auto lines = read_metric_lines(dir);
    const std::string label = run_label(dir, lines);

    switch (kind) {
      case PlotKind::NormCurves: {
        Series s{label, {}, {}};
        for (const auto& rec : lines) {
          if (rec.at("phase") != "epoch") continue;
          const long epoch = rec.at("epoch").get<long>();
          if (epoch < 0) continue;
          s.x.push_back(static_cast<double>(epoch));
          s.y.push_back(std::sqrt(require_field(rec, "weight_norm_sq", label, kind_name)));
        }
        series.push_back(std::move(s));
        title = "Weight norm over training";
        xlab = "epoch";
        ylab = "||w||";
        break;
      }
      case PlotKind::AccuracyCurves: {
        Series train{label + "/train", {}, {}};
        Series test{label + "/test", {}, {}};
        for (const auto& rec : lines) {
          if (rec.at("phase") != "epoch") continue;
          const long epoch = rec.at("epoch").get<long>();
          if (epoch < 0) continue;
          train.x.push_back(static_cast<double>(epoch));
          train.y.push_back(require_field(rec, "train_acc", label, kind_name));
          if (rec.contains("test_acc")) {
            test.x.push_back(static_cast<double>(epoch));
            test.y.push_back(rec.at("test_acc").get<double>());
          }
        }
        series.push_back(std::move(train));
        if (!test.x.empty()) series.push_back(std::move(test));
        title = "Accuracy over training";
        xlab = "epoch";
        ylab = "accuracy";
        break;
      }
      case PlotKind::Decomposition: {
        Series sq{label + "/square", {}, {}};
        Series cr{label + "/cross", {}, {}};
        for (const auto& rec : lines) {
          if (rec.at("phase") != "step") continue;
          const double step = rec.at("step").get<double>();
          sq.x.push_back(step);
          sq.y.push_back(require_field(rec, "square_term", label, kind_name));
          cr.x.push_back(step);
          cr.y.push_back(require_field(rec, "cross_term", label, kind_name));
        }
        series.push_back(std::move(sq));
        series.push_back(std::move(cr));
        title = "Squared-norm change decomposition";
        xlab = "step";
        ylab = "term value";
        break;
      }
      case PlotKind::Cosines: {
        Series cp{label + "/cos_pos", {}, {}};
        Series cn{label + "/cos_neg", {}, {}};
        for (const auto& rec : lines) {
          if (rec.at("phase") != "step") continue;
          const double step = rec.at("step").get<double>();
          cp.x.push_back(step);
          cp.y.push_back(require_field(rec, "cos_pos", label, kind_name));
          cn.x.push_back(step);
          cn.y.push_back(require_field(rec, "cos_neg", label, kind_name));
        }
        series.push_back(std::move(cp));
        series.push_back(std::move(cn));
        title = "Weight/gradient cosines";
        xlab = "step";
        ylab = "cosine";
        break;
      }
      case PlotKind::QuantileBand: {
        std::vector<Series> bands;
        for (const auto& rec : lines) {
          if (rec.at("phase") != "epoch") continue;
          const long epoch = rec.at("epoch").get<long>();
          if (epoch < 0) continue;
          if (!rec.contains("ratio_quantiles"))
            throw std::runtime_error("plot: run '" + label +
                                     "' is missing column 'ratio_quantiles' "
                                     "required by kind quantile_band");
          const auto& qs = rec.at("ratio_quantiles");
          if (bands.empty()) {
            for (const auto& q : qs)
              bands.push_back(Series{label + "/q" + fmt(q.at(0).get<double>()), {}, {}});
          }
          for (std::size_t k = 0; k < qs.size() && k < bands.size(); ++k) {
            bands[k].x.push_back(static_cast<double>(epoch));
            bands[k].y.push_back(qs[k].at(1).get<double>());
          }
        }
        for (auto& b : bands) series.push_back(std::move(b));
        title = "log |m_i| / |w_i| quantiles";
        xlab = "epoch";
        ylab = "log ratio";
        break;
      }
      case PlotKind::SharpnessBars: {
        // Latest sharpness report in the run directory.
        std::vector<fs::path> reports;
        for (const auto& entry : fs::directory_iterator(dir)) {
          const std::string name = entry.path().filename().string();
          if (name.rfind("sharpness_epoch", 0) == 0 &&
              entry.path().extension() == ".json")
            reports.push_back(entry.path());
        }
        if (reports.empty())
          throw std::runtime_error("plot: run '" + label +
                                   "' has no sharpness reports required by kind "
                                   "sharpness_bars");
        std::sort(reports.begin(), reports.end());
        std::ifstream in(reports.back());
        nlohmann::json j;
        in >> j;
        Series s{label, {0, 1, 2, 3}, {}};
        s.y.push_back(j.at("multiplicative").at("delta").get<double>());
        s.y.push_back(j.at("additive").at("delta").get<double>());
        s.y.push_back(j.at("keskar").at("value").get<double>());
        s.y.push_back(j.at("hessian_top_eigenvalue").at("value").get<double>());
        series.push_back(std::move(s));
        title = "Sharpness metrics (mult delta, add delta, box, top eig)";
        break;
      }
    }
  }

  if (kind == PlotKind::SharpnessBars) {
    write_bar_svg(out_path, series, title);
  } else {
    write_line_svg(out_path, series, title, xlab, ylab);
  }
  export_series_csv(out_path, series);
}

}  // namespace wdlab
