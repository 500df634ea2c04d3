#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scalenet/analysis.hpp"
#include "scalenet/errors.hpp"

namespace scalenet {

enum class ReportFormat { csv, json, svg };

inline const char* to_string(ReportFormat f) {
  switch (f) {
    case ReportFormat::csv: return "csv";
    case ReportFormat::json: return "json";
    default: return "svg";
  }
}

inline ReportFormat report_format_from_string(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  if (s == "svg") return ReportFormat::svg;
  throw config_error("unknown report format '" + s + "'");
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open '" + path + "' for writing");
  out << text;
  out.flush();
  if (!out) throw io_error("failed while writing '" + path + "'");
}

}  // namespace detail

// ---- CSV ----

inline std::string to_csv(const GradNormProfile& p) {
  std::string out = "layer,grad_norm\n";
  for (std::size_t i = 0; i < p.norms.size(); ++i) {
    out += std::to_string(i) + "," + detail::fmt_double(p.norms[i]) + "\n";
  }
  return out;
}

inline std::string to_csv(const CkaMatrix& m) {
  std::string out = "layer_a";
  for (std::size_t j = 0; j < m.cols; ++j) out += ",b" + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < m.rows; ++i) {
    out += std::to_string(i);
    for (std::size_t j = 0; j < m.cols; ++j)
      out += "," + detail::fmt_double(m.at(i, j));
    out += "\n";
  }
  return out;
}

inline std::string to_csv(const HistogramSet& set) {
  std::string out = "layer,bin_lo,bin_hi,count\n";
  for (std::size_t h = 0; h < set.hists.size(); ++h) {
    const Histogram& hist = set.hists[h];
    for (std::size_t b = 0; b < hist.counts.size(); ++b) {
      out += std::to_string(set.layers[h]) + "," +
             detail::fmt_double(hist.edges[b]) + "," +
             detail::fmt_double(hist.edges[b + 1]) + "," +
             std::to_string(hist.counts[b]) + "\n";
    }
  }
  return out;
}

// ---- JSON ----

inline nlohmann::json to_json_doc(const GradNormProfile& p) {
  return {{"type", "grad_norm_profile"},
          {"batch_size", p.batch_size},
          {"norms", p.norms}};
}

inline GradNormProfile grad_norm_profile_from_json(const nlohmann::json& j) {
  if (j.value("type", "") != "grad_norm_profile") {
    throw format_error("grad_norm_profile_from_json: wrong document type");
  }
  GradNormProfile p;
  j.at("batch_size").get_to(p.batch_size);
  j.at("norms").get_to(p.norms);
  return p;
}

inline nlohmann::json to_json_doc(const CkaMatrix& m) {
  return {{"type", "cka_matrix"},
          {"rows", m.rows},
          {"cols", m.cols},
          {"values", m.values}};
}

inline CkaMatrix cka_matrix_from_json(const nlohmann::json& j) {
  if (j.value("type", "") != "cka_matrix") {
    throw format_error("cka_matrix_from_json: wrong document type");
  }
  CkaMatrix m;
  j.at("rows").get_to(m.rows);
  j.at("cols").get_to(m.cols);
  j.at("values").get_to(m.values);
  if (m.values.size() != m.rows * m.cols) {
    throw format_error("cka_matrix_from_json: values length mismatch");
  }
  return m;
}

inline nlohmann::json to_json_doc(const HistogramSet& set) {
  std::vector<std::vector<std::size_t>> counts;
  counts.reserve(set.hists.size());
  for (const Histogram& h : set.hists) counts.push_back(h.counts);
  return {{"type", "activation_histograms"},
          {"lo", set.lo},
          {"hi", set.hi},
          {"bins", set.bins},
          {"layers", set.layers},
          {"counts", counts}};
}

inline HistogramSet histogram_set_from_json(const nlohmann::json& j) {
  if (j.value("type", "") != "activation_histograms") {
    throw format_error("histogram_set_from_json: wrong document type");
  }
  HistogramSet set;
  j.at("lo").get_to(set.lo);
  j.at("hi").get_to(set.hi);
  j.at("bins").get_to(set.bins);
  j.at("layers").get_to(set.layers);
  std::vector<std::vector<std::size_t>> counts;
  j.at("counts").get_to(counts);
  for (std::vector<std::size_t>& c : counts) {
    if (c.size() != set.bins) {
      throw format_error("histogram_set_from_json: count row length mismatch");
    }
    Histogram h;
    h.edges.resize(set.bins + 1);
    for (std::size_t i = 0; i <= set.bins; ++i)
      h.edges[i] = set.lo + (set.hi - set.lo) * double(i) / double(set.bins);
    h.counts = std::move(c);
    set.hists.push_back(std::move(h));
  }
  if (set.hists.size() != set.layers.size()) {
    throw format_error("histogram_set_from_json: layers/counts mismatch");
  }
  return set;
}

// ---- SVG ----

namespace detail {

inline std::string svg_open(std::size_t width, std::size_t height) {
  const std::string w = std::to_string(width), h = std::to_string(height);
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + w +
         "\" height=\"" + h + "\" viewBox=\"0 0 " + w + " " + h + "\">\n" +
         "<rect x=\"0\" y=\"0\" width=\"" + w + "\" height=\"" + h +
         "\" fill=\"#ffffff\"/>\n";
}

inline std::string svg_text(double x, double y, const std::string& text,
                            const std::string& anchor = "middle",
                            int size = 11) {
  return "<text x=\"" + fmt_double(x) + "\" y=\"" + fmt_double(y) +
         "\" font-family=\"sans-serif\" font-size=\"" + std::to_string(size) +
         "\" text-anchor=\"" + anchor + "\" fill=\"#333333\">" + text +
         "</text>\n";
}

inline std::string svg_line(double x1, double y1, double x2, double y2,
                            const std::string& color = "#888888") {
  return "<line x1=\"" + fmt_double(x1) + "\" y1=\"" + fmt_double(y1) +
         "\" x2=\"" + fmt_double(x2) + "\" y2=\"" + fmt_double(y2) +
         "\" stroke=\"" + color + "\" stroke-width=\"1\"/>\n";
}

// White-to-blue ramp for values in [0, 1]; out-of-range values are clamped.
inline std::string heat_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const int r = int(255 + (31 - 255) * v);
  const int g = int(255 + (119 - 255) * v);
  const int b = int(255 + (180 - 255) * v);
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace detail

// Line chart of per-layer gradient norms.
inline std::string to_svg(const GradNormProfile& p) {
  const std::size_t width = 640, height = 360;
  const double left = 60, right = 20, top = 30, bottom = 40;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  double max_norm = 0;
  for (double v : p.norms) max_norm = std::max(max_norm, v);
  if (max_norm <= 0) max_norm = 1;

  std::string svg = detail::svg_open(width, height);
  svg += detail::svg_text(width / 2.0, 18, "gradient norm by layer group");
  svg += detail::svg_line(left, top, left, top + plot_h);
  svg += detail::svg_line(left, top + plot_h, left + plot_w, top + plot_h);
  svg += detail::svg_text(left - 8, top + 4, detail::fmt_double(max_norm),
                          "end", 10);
  svg += detail::svg_text(left - 8, top + plot_h + 4, "0", "end", 10);

  const std::size_t n = p.norms.size();
  std::string points;
  for (std::size_t i = 0; i < n; ++i) {
    const double x =
        n > 1 ? left + plot_w * double(i) / double(n - 1) : left + plot_w / 2;
    const double y = top + plot_h * (1.0 - p.norms[i] / max_norm);
    points += detail::fmt_double(x) + "," + detail::fmt_double(y) + " ";
    svg += "<circle cx=\"" + detail::fmt_double(x) + "\" cy=\"" +
           detail::fmt_double(y) + "\" r=\"3\" fill=\"#1f77b4\"/>\n";
    svg += detail::svg_text(x, top + plot_h + 16, std::to_string(i), "middle",
                            10);
  }
  if (n > 1) {
    svg += "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" "
           "points=\"" + points + "\"/>\n";
  }
  svg += "</svg>\n";
  return svg;
}

// Heatmap with layer-of-a rows and layer-of-b columns.
inline std::string to_svg(const CkaMatrix& m) {
  const double left = 60, top = 40, label = 20;
  const double cell =
      m.rows == 0 || m.cols == 0
          ? 24
          : std::clamp(480.0 / double(std::max(m.rows, m.cols)), 8.0, 48.0);
  const std::size_t width = std::size_t(left + cell * double(m.cols) + 40);
  const std::size_t height =
      std::size_t(top + cell * double(m.rows) + label + 20);

  std::string svg = detail::svg_open(width, height);
  svg += detail::svg_text(width / 2.0, 20, "layer similarity (linear CKA)");
  for (std::size_t i = 0; i < m.rows; ++i) {
    svg += detail::svg_text(left - 8, top + cell * (double(i) + 0.7),
                            std::to_string(i), "end", 10);
    for (std::size_t j = 0; j < m.cols; ++j) {
      svg += "<rect x=\"" + detail::fmt_double(left + cell * double(j)) +
             "\" y=\"" + detail::fmt_double(top + cell * double(i)) +
             "\" width=\"" + detail::fmt_double(cell) + "\" height=\"" +
             detail::fmt_double(cell) + "\" fill=\"" +
             detail::heat_color(m.at(i, j)) +
             "\" stroke=\"#dddddd\" stroke-width=\"0.5\"/>\n";
    }
  }
  for (std::size_t j = 0; j < m.cols; ++j) {
    svg += detail::svg_text(left + cell * (double(j) + 0.5),
                            top + cell * double(m.rows) + 14,
                            std::to_string(j), "middle", 10);
  }
  svg += "</svg>\n";
  return svg;
}

// One bar panel per requested layer, stacked vertically.
inline std::string to_svg(const HistogramSet& set) {
  const std::size_t width = 640;
  const double left = 60, right = 20, panel_h = 140, gap = 30, top0 = 30;
  const double plot_w = width - left - right;
  const std::size_t height =
      std::size_t(top0 + (panel_h + gap) * double(set.hists.size()) + 10);

  std::string svg = detail::svg_open(width, std::max<std::size_t>(height, 80));
  for (std::size_t h = 0; h < set.hists.size(); ++h) {
    const Histogram& hist = set.hists[h];
    const double top = top0 + (panel_h + gap) * double(h);
    std::size_t max_count = 1;
    for (std::size_t c : hist.counts) max_count = std::max(max_count, c);
    svg += detail::svg_text(left, top - 8,
                            "layer " + std::to_string(set.layers[h]), "start");
    svg += detail::svg_line(left, top, left, top + panel_h);
    svg += detail::svg_line(left, top + panel_h, left + plot_w, top + panel_h);
    const double bar_w = plot_w / double(hist.counts.size());
    for (std::size_t b = 0; b < hist.counts.size(); ++b) {
      const double bh =
          panel_h * double(hist.counts[b]) / double(max_count);
      svg += "<rect x=\"" + detail::fmt_double(left + bar_w * double(b)) +
             "\" y=\"" + detail::fmt_double(top + panel_h - bh) +
             "\" width=\"" + detail::fmt_double(bar_w) + "\" height=\"" +
             detail::fmt_double(bh) + "\" fill=\"#2ca02c\"/>\n";
    }
    svg += detail::svg_text(left, top + panel_h + 14,
                            detail::fmt_double(set.lo), "start", 10);
    svg += detail::svg_text(left + plot_w, top + panel_h + 14,
                            detail::fmt_double(set.hi), "end", 10);
  }
  svg += "</svg>\n";
  return svg;
}

// ---- dispatch ----

template <class Data>
void emit_report(const Data& data, ReportFormat fmt, const std::string& path) {
  switch (fmt) {
    case ReportFormat::csv:
      detail::write_text_file(path, to_csv(data));
      break;
    case ReportFormat::json:
      detail::write_text_file(path, to_json_doc(data).dump(2) + "\n");
      break;
    case ReportFormat::svg:
      detail::write_text_file(path, to_svg(data));
      break;
  }
}

}  // namespace scalenet
