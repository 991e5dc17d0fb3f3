#pragma once

// Minimal SVG output: multi-series line charts and heatmaps. Numbers are
// printed with fixed precision so identical data gives identical files.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "qds/errors.hpp"

namespace qds::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct LineChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  std::vector<Series> series;
};

struct Heatmap {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::size_t nx = 0, ny = 0;
  std::vector<double> values;  // [iy * nx + ix]; iy grows upwards
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool log_color = false;
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
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

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#17becf", "#bcbd22"};
  return colors[i % 10];
}

// Sequential colour ramp (dark blue to yellow) for t in [0, 1].
inline std::string ramp(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const double stops[4][3] = {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {253, 231, 37}};
  const double pos = t * 3.0;
  const std::size_t i = std::min<std::size_t>(2, static_cast<std::size_t>(pos));
  const double f = pos - static_cast<double>(i);
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(stops[i][0] + f * (stops[i + 1][0] - stops[i][0])),
                static_cast<int>(stops[i][1] + f * (stops[i + 1][1] - stops[i][1])),
                static_cast<int>(stops[i][2] + f * (stops[i + 1][2] - stops[i][2])));
  return buf;
}

constexpr double kW = 640, kH = 420, kLeft = 70, kRight = 160, kTop = 40, kBottom = 50;

inline std::string header(const std::string& title) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kW) + "\" height=\"" + num(kH) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
         "<text x=\"" + num(kW / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) +
         "</text>\n";
}

inline std::string axis_labels(const std::string& xl, const std::string& yl) {
  const double cx = kLeft + (kW - kLeft - kRight) / 2, cy = kTop + (kH - kTop - kBottom) / 2;
  return "<text x=\"" + num(cx) + "\" y=\"" + num(kH - 12) + "\" text-anchor=\"middle\">" + escape(xl) +
         "</text>\n<text x=\"16\" y=\"" + num(cy) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " + num(cy) +
         ")\">" + escape(yl) + "</text>\n";
}

}  // namespace detail

/// Non-finite points (and non-positive ones on log axes) split the polyline.
inline std::string render(const LineChart& c) {
  using namespace detail;
  auto tx = [&](double v) { return c.log_x ? std::log10(v) : v; };
  auto ty = [&](double v) { return c.log_y ? std::log10(v) : v; };
  auto usable = [&](double x, double y) {
    return std::isfinite(x) && std::isfinite(y) && (!c.log_x || x > 0) && (!c.log_y || y > 0);
  };
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : c.series) {
    if (s.x.size() != s.y.size()) throw ContractError("svg: series '" + s.name + "' has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!usable(s.x[i], s.y[i])) continue;
      xmin = std::min(xmin, tx(s.x[i]));
      xmax = std::max(xmax, tx(s.x[i]));
      ymin = std::min(ymin, ty(s.y[i]));
      ymax = std::max(ymax, ty(s.y[i]));
    }
  }
  if (!(xmax >= xmin)) xmin = 0, xmax = 1;
  if (!(ymax >= ymin)) ymin = 0, ymax = 1;
  if (xmax == xmin) xmin -= 0.5, xmax += 0.5;
  if (ymax == ymin) ymin -= 0.5, ymax += 0.5;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto px = [&](double v) { return kLeft + (v - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double v) { return kTop + ph - (v - ymin) / (ymax - ymin) * ph; };

  std::string out = header(c.title);
  out += "<rect x=\"" + num(kLeft) + "\" y=\"" + num(kTop) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = xmin + (xmax - xmin) * i / 4.0, fy = ymin + (ymax - ymin) * i / 4.0;
    const double lx = c.log_x ? std::pow(10.0, fx) : fx, ly = c.log_y ? std::pow(10.0, fy) : fy;
    out += "<text x=\"" + num(px(fx)) + "\" y=\"" + num(kTop + ph + 16) + "\" text-anchor=\"middle\">" + tick(lx) +
           "</text>\n";
    out += "<text x=\"" + num(kLeft - 6) + "\" y=\"" + num(py(fy) + 4) + "\" text-anchor=\"end\">" + tick(ly) +
           "</text>\n";
  }
  out += axis_labels(c.x_label, c.y_label);
  for (std::size_t si = 0; si < c.series.size(); ++si) {
    const auto& s = c.series[si];
    std::string pts;
    auto flush = [&] {
      if (!pts.empty())
        out += "<polyline fill=\"none\" stroke=\"" + std::string(palette(si)) + "\" stroke-width=\"1.5\" points=\"" +
               pts + "\"/>\n";
      pts.clear();
    };
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!usable(s.x[i], s.y[i])) {
        flush();
        continue;
      }
      if (!pts.empty()) pts += ' ';
      pts += num(px(tx(s.x[i]))) + "," + num(py(ty(s.y[i])));
    }
    flush();
    const double ly = kTop + 14 + 18 * static_cast<double>(si);
    out += "<line x1=\"" + num(kW - kRight + 10) + "\" y1=\"" + num(ly - 4) + "\" x2=\"" + num(kW - kRight + 30) +
           "\" y2=\"" + num(ly - 4) + "\" stroke=\"" + palette(si) + "\" stroke-width=\"2\"/>\n";
    out += "<text x=\"" + num(kW - kRight + 36) + "\" y=\"" + num(ly) + "\">" + escape(s.name) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

inline std::string render(const Heatmap& h) {
  using namespace detail;
  if (h.values.size() != h.nx * h.ny || h.nx == 0 || h.ny == 0) throw ContractError("svg: heatmap size mismatch");
  auto val = [&](double v) { return h.log_color ? (v > 0 ? std::log10(v) : -std::numeric_limits<double>::infinity()) : v; };
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : h.values) {
    const double t = val(v);
    if (!std::isfinite(t)) continue;
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  if (!(hi > lo)) hi = lo + 1;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  const double cw = pw / static_cast<double>(h.nx), ch = ph / static_cast<double>(h.ny);
  std::string out = header(h.title);
  for (std::size_t iy = 0; iy < h.ny; ++iy)
    for (std::size_t ix = 0; ix < h.nx; ++ix) {
      const double t = val(h.values[iy * h.nx + ix]);
      const std::string fill = std::isfinite(t) ? ramp((t - lo) / (hi - lo)) : std::string("#ffffff");
      out += "<rect x=\"" + num(kLeft + cw * static_cast<double>(ix)) + "\" y=\"" +
             num(kTop + ph - ch * static_cast<double>(iy + 1)) + "\" width=\"" + num(cw) + "\" height=\"" + num(ch) +
             "\" fill=\"" + fill + "\"/>\n";
    }
  out += "<rect x=\"" + num(kLeft) + "\" y=\"" + num(kTop) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = h.x0 + (h.x1 - h.x0) * i / 4.0, fy = h.y0 + (h.y1 - h.y0) * i / 4.0;
    out += "<text x=\"" + num(kLeft + pw * i / 4.0) + "\" y=\"" + num(kTop + ph + 16) + "\" text-anchor=\"middle\">" +
           tick(fx) + "</text>\n";
    out += "<text x=\"" + num(kLeft - 6) + "\" y=\"" + num(kTop + ph - ph * i / 4.0 + 4) + "\" text-anchor=\"end\">" +
           tick(fy) + "</text>\n";
  }
  out += axis_labels(h.x_label, h.y_label);
  for (int i = 0; i <= 10; ++i) {
    const double t = i / 10.0;
    out += "<rect x=\"" + num(kW - kRight + 20) + "\" y=\"" + num(kTop + ph - ph * (t + 0.1)) + "\" width=\"16\" height=\"" +
           num(ph / 10.0 + 0.5) + "\" fill=\"" + ramp(t) + "\"/>\n";
  }
  out += "<text x=\"" + num(kW - kRight + 40) + "\" y=\"" + num(kTop + 10) + "\">" + tick(hi) + "</text>\n";
  out += "<text x=\"" + num(kW - kRight + 40) + "\" y=\"" + num(kTop + ph) + "\">" + tick(lo) + "</text>\n";
  if (h.log_color)
    out += "<text x=\"" + num(kW - kRight + 40) + "\" y=\"" + num(kTop + ph / 2) + "\">log10</text>\n";
  out += "</svg>\n";
  return out;
}

}  // namespace qds::svg
