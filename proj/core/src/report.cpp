#include "smn/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "smn/error.hpp"

namespace smn {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 160, kTop = 40, kBottom = 50;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const {
    return kLeft + (x1 > x0 ? (x - x0) / (x1 - x0) : 0.5) * (kWidth - kLeft - kRight);
  }
  double py(double y) const {
    return kHeight - kBottom - (y1 > y0 ? (y - y0) / (y1 - y0) : 0.5) *
                                   (kHeight - kTop - kBottom);
  }
};

void header(std::ostringstream& s, const std::string& title) {
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
    << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
    << escape(title) << "</text>\n";
}

void axes(std::ostringstream& s, const Frame& f, const std::string& xl, const std::string& yl) {
  const double l = f.px(f.x0), r = f.px(f.x1), b = f.py(f.y0), t = f.py(f.y1);
  s << "<path d=\"M" << fmt(l) << ' ' << fmt(t) << " L" << fmt(l) << ' ' << fmt(b) << " L"
    << fmt(r) << ' ' << fmt(b) << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4, yv = f.y0 + (f.y1 - f.y0) * i / 4;
    s << "<text x=\"" << fmt(f.px(xv)) << "\" y=\"" << fmt(b + 16)
      << "\" text-anchor=\"middle\">" << fmt(xv) << "</text>\n";
    s << "<text x=\"" << fmt(l - 6) << "\" y=\"" << fmt(f.py(yv) + 4)
      << "\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
  }
  s << "<text x=\"" << fmt((l + r) / 2) << "\" y=\"" << fmt(kHeight - 10)
    << "\" text-anchor=\"middle\">" << escape(xl) << "</text>\n";
  s << "<text x=\"16\" y=\"" << fmt((t + b) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << fmt((t + b) / 2) << ")\">" << escape(yl) << "</text>\n";
}

void legend(std::ostringstream& s, const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = kTop + 10 + 18.0 * i;
    s << "<rect x=\"" << kWidth - kRight + 15 << "\" y=\"" << y - 9
      << "\" width=\"12\" height=\"12\" fill=\"" << kPalette[i % 8] << "\"/>\n"
      << "<text x=\"" << kWidth - kRight + 32 << "\" y=\"" << y + 1 << "\">" << escape(names[i])
      << "</text>\n";
  }
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

double to_double(const std::string& s, const std::filesystem::path& path, std::size_t line) {
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw FormatError(path.string() + ":" + std::to_string(line) + ": bad number '" + s + "'");
  }
}

}  // namespace

std::string svg_line_plot(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<Series>& series) {
  Frame f{0, 1, 0, 1};
  bool first = true;
  for (const auto& sr : series)
    for (std::size_t i = 0; i < std::min(sr.x.size(), sr.y.size()); ++i) {
      if (!std::isfinite(sr.x[i]) || !std::isfinite(sr.y[i])) continue;
      if (first) {
        f = {sr.x[i], sr.x[i], sr.y[i], sr.y[i]};
        first = false;
      }
      f.x0 = std::min(f.x0, sr.x[i]);
      f.x1 = std::max(f.x1, sr.x[i]);
      f.y0 = std::min(f.y0, sr.y[i]);
      f.y1 = std::max(f.y1, sr.y[i]);
    }
  f.y0 = std::min(f.y0, 0.0);
  std::ostringstream s;
  header(s, title);
  axes(s, f, x_label, y_label);
  std::vector<std::string> names;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& sr = series[k];
    names.push_back(sr.name);
    s << "<polyline fill=\"none\" stroke=\"" << kPalette[k % 8] << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < std::min(sr.x.size(), sr.y.size()); ++i)
      if (std::isfinite(sr.x[i]) && std::isfinite(sr.y[i]))
        s << fmt(f.px(sr.x[i])) << ',' << fmt(f.py(sr.y[i])) << ' ';
    s << "\"/>\n";
  }
  legend(s, names);
  s << "</svg>\n";
  return s.str();
}

std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& series) {
  double top = 1e-9;
  for (const auto& sr : series)
    for (double v : sr.y)
      if (std::isfinite(v)) top = std::max(top, v);
  Frame f{0, static_cast<double>(std::max<std::size_t>(categories.size(), 1)), 0, top};
  std::ostringstream s;
  header(s, title);
  const double l = f.px(0), r = f.px(f.x1), b = f.py(0);
  s << "<path d=\"M" << fmt(l) << ' ' << fmt(f.py(top)) << " L" << fmt(l) << ' ' << fmt(b)
    << " L" << fmt(r) << ' ' << fmt(b) << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = top * i / 4;
    s << "<text x=\"" << fmt(l - 6) << "\" y=\"" << fmt(f.py(yv) + 4)
      << "\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
  }
  const double group = (r - l) / f.x1;
  const double bar = group * 0.8 / std::max<std::size_t>(series.size(), 1);
  std::vector<std::string> names;
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double gx = l + group * c + group * 0.1;
    for (std::size_t k = 0; k < series.size(); ++k) {
      if (c >= series[k].y.size() || !std::isfinite(series[k].y[c])) continue;
      const double v = std::max(series[k].y[c], 0.0);
      s << "<rect x=\"" << fmt(gx + bar * k) << "\" y=\"" << fmt(f.py(v)) << "\" width=\""
        << fmt(bar) << "\" height=\"" << fmt(b - f.py(v)) << "\" fill=\"" << kPalette[k % 8]
        << "\"/>\n";
    }
    s << "<text x=\"" << fmt(l + group * (c + 0.5)) << "\" y=\"" << fmt(b + 16)
      << "\" text-anchor=\"middle\">" << escape(categories[c]) << "</text>\n";
  }
  for (const auto& sr : series) names.push_back(sr.name);
  legend(s, names);
  s << "</svg>\n";
  return s.str();
}

std::string svg_pr_curves(const std::vector<ComparisonRow>& rows) {
  std::vector<Series> series;
  for (const auto& row : rows) {
    if (row.result.pr50.empty()) continue;
    Series sr{row.method + " / " + row.protocol, {}, row.result.pr50};
    for (std::size_t i = 0; i < sr.y.size(); ++i) sr.x.push_back(i / 100.0);
    series.push_back(std::move(sr));
  }
  return svg_line_plot("Precision-recall at IoU 0.5", "recall", "precision", series);
}

std::string svg_comparison(const std::vector<ComparisonRow>& rows) {
  std::vector<std::string> protocols, methods;
  for (const auto& r : rows) {
    if (std::find(protocols.begin(), protocols.end(), r.protocol) == protocols.end())
      protocols.push_back(r.protocol);
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end())
      methods.push_back(r.method);
  }
  std::vector<Series> series;
  for (const auto& m : methods) {
    Series ap{m + " AP", {}, std::vector<double>(protocols.size(), NAN)};
    for (const auto& r : rows)
      if (r.method == m) {
        const auto at = std::find(protocols.begin(), protocols.end(), r.protocol);
        ap.y[at - protocols.begin()] = r.result.ap;
      }
    series.push_back(std::move(ap));
  }
  return svg_bar_chart("AP by method and protocol", protocols, series);
}

std::string svg_loss_curve(const std::string& title, const TrainLog& log) {
  Series raw{"total", {}, {}}, avg{"moving average (50)", {}, {}};
  double window = 0.0;
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto& r = log.records[i];
    raw.x.push_back(static_cast<double>(r.step));
    raw.y.push_back(r.total);
    window += r.total;
    if (i >= 50) window -= log.records[i - 50].total;
    avg.x.push_back(static_cast<double>(r.step));
    avg.y.push_back(window / std::min<std::size_t>(i + 1, 50));
  }
  return svg_line_plot(title, "step", "loss", {raw, avg});
}

TrainLog read_train_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("training log not found: " + path.string());
  TrainLog log;
  std::string line;
  std::getline(in, line);
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() < 9) throw FormatError(path.string() + ":" + std::to_string(n) + ": short row");
    LossRecord r;
    r.step = static_cast<std::uint64_t>(to_double(c[0], path, n));
    r.lr = to_double(c[1], path, n);
    r.rpn_cls = to_double(c[2], path, n);
    r.rpn_reg = to_double(c[3], path, n);
    r.cls = to_double(c[4], path, n);
    r.cls_reg = to_double(c[5], path, n);
    r.recon = to_double(c[6], path, n);
    r.dedup = to_double(c[7], path, n);
    r.total = to_double(c[8], path, n);
    log.records.push_back(r);
  }
  return log;
}

std::vector<ComparisonRow> read_comparison_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("comparison table not found: " + path.string());
  std::vector<ComparisonRow> rows;
  std::string line;
  std::getline(in, line);
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 13) throw FormatError(path.string() + ":" + std::to_string(n) + ": expected 13 columns");
    ComparisonRow row{c[0], c[1], {}};
    EvalResult& r = row.result;
    double* dst[] = {&r.ap,    &r.ap50, &r.ap75,     &r.ap_small,  &r.ap_medium,
                     &r.ap_large, &r.ar10, &r.ar, &r.ar_small, &r.ar_medium, &r.ar_large};
    for (int i = 0; i < 11; ++i) *dst[i] = to_double(c[2 + i], path, n);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace smn
