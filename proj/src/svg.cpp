// Minimal line-plot renderer for experiment CSVs: one panel, sweep value on
// the x axis, theory as solid lines and simulations as points with 1-SE bars.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "glamp/experiment.hpp"

namespace glamp {
namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_or_nan(const std::string& s) {
  if (s.empty()) return NAN;
  try {
    return std::stod(s);
  } catch (...) {
    return NAN;
  }
}

struct Point {
  double x, theory, theory_se, emp, emp_se;
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace

std::string render_svg_from_csv(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::string line;
  std::getline(in, line);
  const auto header = split_csv_line(line);
  auto col = [&](const std::string& name) -> std::size_t {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? header.size() : static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t cx = col("sweep_value"), ce = col("estimator"), ct = col("mse_theory"),
                    cts = col("mse_theory_se"), cm = col("mse_empirical"), cms = col("mse_empirical_se"),
                    cp = col("sweep_param");
  std::map<std::string, std::vector<Point>> series;
  std::vector<std::string> order;
  std::string xname = "sweep value";
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    auto get = [&](std::size_t i) { return i < f.size() ? f[i] : std::string(); };
    const std::string est = get(ce);
    if (!series.count(est)) order.push_back(est);
    if (!get(cp).empty()) xname = get(cp);
    series[est].push_back({parse_or_nan(get(cx)), parse_or_nan(get(ct)), parse_or_nan(get(cts)),
                           parse_or_nan(get(cm)), parse_or_nan(get(cms))});
  }

  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& [_, pts] : series) {
    for (const auto& p : pts) {
      if (std::isfinite(p.x)) {
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
      }
      for (double y : {p.theory, p.emp - (std::isfinite(p.emp_se) ? p.emp_se : 0.0),
                       p.emp + (std::isfinite(p.emp_se) ? p.emp_se : 0.0)})
        if (std::isfinite(y)) {
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
        }
    }
  }
  if (!std::isfinite(x0)) x0 = 0.0, x1 = 1.0;
  if (!std::isfinite(y0)) y0 = 0.0, y1 = 1.0;
  if (x1 <= x0) x0 -= 0.5, x1 += 0.5;
  if (y1 <= y0) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;

  const double W = 640, H = 420, L = 70, R = 170, T = 20, B = 50;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    s << "<text x=\"" << num(sx(xv)) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">"
      << label(xv) << "</text>\n";
    s << "<text x=\"" << L - 6 << "\" y=\"" << num(sy(yv) + 4) << "\" text-anchor=\"end\">"
      << label(yv) << "</text>\n";
  }
  s << "<text x=\"" << num((L + W - R) / 2) << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">"
    << xname << "</text>\n";
  s << "<text x=\"16\" y=\"" << num((T + H - B) / 2) << "\" transform=\"rotate(-90 16 "
    << num((T + H - B) / 2) << ")\" text-anchor=\"middle\">risk</text>\n";

  for (std::size_t k = 0; k < order.size(); ++k) {
    const char* colour = kPalette[k % 6];
    auto pts = series[order[k]];
    std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.x < b.x; });
    std::string path;
    for (const auto& p : pts)
      if (std::isfinite(p.x) && std::isfinite(p.theory))
        path += (path.empty() ? "M" : " L") + num(sx(p.x)) + " " + num(sy(p.theory));
    if (!path.empty())
      s << "<path d=\"" << path << "\" fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    for (const auto& p : pts) {
      if (!std::isfinite(p.x) || !std::isfinite(p.emp)) continue;
      const double e = std::isfinite(p.emp_se) ? p.emp_se : 0.0;
      s << "<line x1=\"" << num(sx(p.x)) << "\" y1=\"" << num(sy(p.emp - e)) << "\" x2=\"" << num(sx(p.x))
        << "\" y2=\"" << num(sy(p.emp + e)) << "\" stroke=\"" << colour << "\"/>\n";
      s << "<circle cx=\"" << num(sx(p.x)) << "\" cy=\"" << num(sy(p.emp)) << "\" r=\"3.5\" fill=\""
        << colour << "\"/>\n";
    }
    const double ly = T + 16 + 34.0 * k;
    s << "<line x1=\"" << W - R + 14 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 36 << "\" y2=\"" << ly
      << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << W - R + 42 << "\" y=\"" << ly + 4 << "\">" << order[k] << " theory</text>\n";
    s << "<circle cx=\"" << W - R + 25 << "\" cy=\"" << ly + 16 << "\" r=\"3.5\" fill=\"" << colour << "\"/>\n";
    s << "<text x=\"" << W - R + 42 << "\" y=\"" << ly + 20 << "\">" << order[k] << " simulated</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace glamp
