// Report emission: CSV rows for metric records and scalars, a JSON dump of
// the whole bundle, and hand-drawn SVG plots (polyline/rect primitives, no
// plotting dependency). All emitters are pure functions of the bundle, so
// re-emitting an identical bundle yields byte-identical files.
#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtc/suites.hpp"

namespace vtc {

namespace detail {

inline std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string fmt6(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

inline std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  return out + "\"";
}

inline std::string json_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  return out + "\"";
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::invalid_argument("report: cannot write: " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::invalid_argument("report: short write: " + path);
}

}  // namespace detail

inline std::string records_csv(const ReportBundle& b) {
  std::string csv =
      "suite,label,model_seed,data_seed,config,m_cl_nc,m_cl_c,m_adv_nc,m_adv_c,upr,cae,csg\n";
  for (const ReportRow& r : b.records) {
    csv += detail::csv_quote(r.suite) + "," + detail::csv_quote(r.label) + "," +
           std::to_string(r.model_seed) + "," + std::to_string(r.data_seed) + "," +
           r.config_digest + "," + detail::fmt17(r.rec.m_cl_nc) + "," +
           detail::fmt17(r.rec.m_cl_c) + "," + detail::fmt17(r.rec.m_adv_nc) + "," +
           detail::fmt17(r.rec.m_adv_c) + "," + detail::fmt17(r.rec.upr) + "," +
           detail::fmt17(r.rec.cae) + "," + detail::fmt17(r.rec.csg) + "\n";
  }
  return csv;
}

inline std::string scalars_csv(const ReportBundle& b) {
  std::string csv = "suite,label,model_seed,data_seed,config,metric,value\n";
  for (const ScalarRow& r : b.scalars) {
    csv += detail::csv_quote(r.suite) + "," + detail::csv_quote(r.label) + "," +
           std::to_string(r.model_seed) + "," + std::to_string(r.data_seed) + "," +
           r.config_digest + "," + detail::csv_quote(r.metric) + "," +
           detail::fmt17(r.value) + "\n";
  }
  return csv;
}

inline std::string bundle_json(const ReportBundle& b) {
  std::string j = "{\n  \"records\": [";
  for (std::size_t i = 0; i < b.records.size(); ++i) {
    const ReportRow& r = b.records[i];
    j += (i ? ",\n    " : "\n    ");
    j += "{\"suite\": " + detail::json_quote(r.suite) +
         ", \"label\": " + detail::json_quote(r.label) +
         ", \"model_seed\": " + std::to_string(r.model_seed) +
         ", \"data_seed\": " + std::to_string(r.data_seed) +
         ", \"config\": " + detail::json_quote(r.config_digest) +
         ", \"m_cl_nc\": " + detail::fmt17(r.rec.m_cl_nc) +
         ", \"m_cl_c\": " + detail::fmt17(r.rec.m_cl_c) +
         ", \"m_adv_nc\": " + detail::fmt17(r.rec.m_adv_nc) +
         ", \"m_adv_c\": " + detail::fmt17(r.rec.m_adv_c) +
         ", \"upr\": " + detail::fmt17(r.rec.upr) + ", \"cae\": " + detail::fmt17(r.rec.cae) +
         ", \"csg\": " + detail::fmt17(r.rec.csg) + "}";
  }
  j += b.records.empty() ? "]" : "\n  ]";
  j += ",\n  \"scalars\": [";
  for (std::size_t i = 0; i < b.scalars.size(); ++i) {
    const ScalarRow& r = b.scalars[i];
    j += (i ? ",\n    " : "\n    ");
    j += "{\"suite\": " + detail::json_quote(r.suite) +
         ", \"label\": " + detail::json_quote(r.label) +
         ", \"model_seed\": " + std::to_string(r.model_seed) +
         ", \"data_seed\": " + std::to_string(r.data_seed) +
         ", \"config\": " + detail::json_quote(r.config_digest) +
         ", \"metric\": " + detail::json_quote(r.metric) +
         ", \"value\": " + detail::fmt17(r.value) + "}";
  }
  j += b.scalars.empty() ? "]" : "\n  ]";
  j += ",\n  \"flags\": [";
  for (std::size_t i = 0; i < b.flags.size(); ++i)
    j += (i ? ", " : "") + detail::json_quote(b.flags[i]);
  j += "],\n  \"tables\": [";
  for (std::size_t i = 0; i < b.tables.size(); ++i) {
    j += (i ? ",\n    " : "\n    ");
    j += "{\"name\": " + detail::json_quote(b.tables[i].name) +
         ", \"csv\": " + detail::json_quote(b.tables[i].csv) + "}";
  }
  j += b.tables.empty() ? "]" : "\n  ]";
  j += ",\n  \"plots\": [";
  for (std::size_t i = 0; i < b.plots.size(); ++i) {
    const Plot& p = b.plots[i];
    j += (i ? ",\n    " : "\n    ");
    j += "{\"name\": " + detail::json_quote(p.name) + ", \"kind\": " + detail::json_quote(p.kind) +
         ", \"series\": [";
    for (std::size_t si = 0; si < p.series.size(); ++si) {
      const PlotSeries& s = p.series[si];
      j += (si ? ", " : "") + std::string("{\"name\": ") + detail::json_quote(s.name) +
           ", \"x\": [";
      for (std::size_t k = 0; k < s.x.size(); ++k)
        j += (k ? "," : "") + detail::fmt17(s.x[k]);
      j += "], \"y\": [";
      for (std::size_t k = 0; k < s.y.size(); ++k)
        j += (k ? "," : "") + detail::fmt17(s.y[k]);
      j += "]}";
    }
    j += "]}";
  }
  j += b.plots.empty() ? "]" : "\n  ]";
  j += "\n}\n";
  return j;
}

// Fixed 640x400 canvas with a 60/20-pixel margin frame. Series are scaled
// into the data's bounding box; bars split the x extent evenly.
inline std::string plot_svg(const Plot& p) {
  const double width = 640, height = 400, ml = 60, mr = 20, mt = 30, mb = 50;
  const double iw = width - ml - mr, ih = height - mt - mb;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const PlotSeries& s : p.series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        first = false;
      }
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmax - xmin < 1e-12) xmax = xmin + 1.0;
  if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
  ymin = std::min(ymin, 0.0);
  auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * iw; };
  auto sy = [&](double y) { return mt + ih - (y - ymin) / (ymax - ymin) * ih; };

  static const char* palette[] = {"#3366cc", "#dc3912", "#109618", "#ff9900", "#990099"};
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
                    "viewBox=\"0 0 640 400\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"400\" fill=\"white\"/>\n";
  svg += "<text x=\"320\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"14\">" + p.name + "</text>\n";
  svg += "<line x1=\"" + detail::fmt6(ml) + "\" y1=\"" + detail::fmt6(mt + ih) + "\" x2=\"" +
         detail::fmt6(ml + iw) + "\" y2=\"" + detail::fmt6(mt + ih) +
         "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + detail::fmt6(ml) + "\" y1=\"" + detail::fmt6(mt) + "\" x2=\"" +
         detail::fmt6(ml) + "\" y2=\"" + detail::fmt6(mt + ih) + "\" stroke=\"black\"/>\n";
  svg += "<text x=\"" + detail::fmt6(ml + iw / 2) + "\" y=\"" + detail::fmt6(height - 12) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + p.x_label +
         "</text>\n";
  svg += "<text x=\"16\" y=\"" + detail::fmt6(mt + ih / 2) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
         "transform=\"rotate(-90 16 " + detail::fmt6(mt + ih / 2) + ")\">" + p.y_label +
         "</text>\n";
  for (double frac : {0.0, 0.5, 1.0}) {
    const double yv = ymin + frac * (ymax - ymin);
    svg += "<text x=\"" + detail::fmt6(ml - 6) + "\" y=\"" + detail::fmt6(sy(yv) + 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
           detail::fmt6(yv) + "</text>\n";
  }

  if (p.kind == "bar") {
    std::size_t total = 0;
    for (const PlotSeries& s : p.series) total += s.y.size();
    const double bw = total > 0 ? iw / (static_cast<double>(total) * 1.5 + 0.5) : iw;
    std::size_t slot = 0;
    for (std::size_t si = 0; si < p.series.size(); ++si) {
      for (double yv : p.series[si].y) {
        const double x0 = ml + bw * (0.5 + 1.5 * static_cast<double>(slot));
        const double y0 = sy(std::max(yv, 0.0));
        const double hb = std::fabs(sy(0.0) - sy(yv));
        svg += "<rect x=\"" + detail::fmt6(x0) + "\" y=\"" + detail::fmt6(y0) + "\" width=\"" +
               detail::fmt6(bw) + "\" height=\"" + detail::fmt6(hb) + "\" fill=\"" +
               palette[si % 5] + "\"/>\n";
        ++slot;
      }
    }
  } else {
    for (std::size_t si = 0; si < p.series.size(); ++si) {
      const PlotSeries& s = p.series[si];
      std::string pts;
      for (std::size_t i = 0; i < s.x.size(); ++i)
        pts += detail::fmt6(sx(s.x[i])) + "," + detail::fmt6(sy(s.y[i])) + " ";
      svg += "<polyline fill=\"none\" stroke=\"" + std::string(palette[si % 5]) +
             "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
      for (std::size_t i = 0; i < s.x.size(); ++i)
        svg += "<circle cx=\"" + detail::fmt6(sx(s.x[i])) + "\" cy=\"" +
               detail::fmt6(sy(s.y[i])) + "\" r=\"3\" fill=\"" + palette[si % 5] + "\"/>\n";
    }
  }
  svg += "</svg>\n";
  return svg;
}

// Writes the requested formats ("csv", "json", "svg") into out_dir and
// returns the paths written, in emission order.
inline std::vector<std::string> emit_report(const ReportBundle& b, const std::string& out_dir,
                                            const std::vector<std::string>& formats = {
                                                "csv", "json", "svg"}) {
  if (formats.empty()) throw std::invalid_argument("report: no formats requested");
  const std::string dir = out_dir.empty() ? "." : out_dir;
  std::vector<std::string> written;
  for (const std::string& f : formats) {
    if (f == "csv") {
      detail::write_text(dir + "/records.csv", records_csv(b));
      written.push_back(dir + "/records.csv");
      detail::write_text(dir + "/scalars.csv", scalars_csv(b));
      written.push_back(dir + "/scalars.csv");
      for (const TableArtifact& t : b.tables) {
        detail::write_text(dir + "/" + t.name + ".csv", t.csv);
        written.push_back(dir + "/" + t.name + ".csv");
      }
    } else if (f == "json") {
      detail::write_text(dir + "/bundle.json", bundle_json(b));
      written.push_back(dir + "/bundle.json");
    } else if (f == "svg") {
      for (const Plot& p : b.plots) {
        detail::write_text(dir + "/" + p.name + ".svg", plot_svg(p));
        written.push_back(dir + "/" + p.name + ".svg");
      }
    } else {
      throw std::invalid_argument("report: unknown format: " + f);
    }
  }
  return written;
}

}  // namespace vtc
