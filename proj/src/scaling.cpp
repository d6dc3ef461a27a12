#include "archscale/scaling.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "archscale/errors.hpp"

namespace archscale::scaling {

namespace {

double apply(Transform transform, double x) {
  return transform == Transform::kLog10 ? std::log10(x) : x;
}

std::string trim(std::string_view s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string_view::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return std::string(s.substr(begin, end - begin + 1));
}

std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos
                                                                           : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string format_number(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string_view axis_id(Axis axis) {
  switch (axis) {
    case Axis::kFlopsUpstream: return "F,U";
    case Axis::kFlopsDownstream: return "F,D";
    case Axis::kParamsUpstream: return "P,U";
    case Axis::kParamsDownstream: return "P,D";
    case Axis::kUpstreamDownstream: return "U,D";
  }
  return "?";
}

Transform axis_transform(Axis axis) {
  return axis == Axis::kUpstreamDownstream ? Transform::kIdentity : Transform::kLog10;
}

ScalingFit fit_slope(const std::vector<std::pair<double, double>>& points, Transform transform) {
  if (points.size() < 2) throw InputError("fit_slope needs at least 2 points");
  std::vector<double> xs;
  xs.reserve(points.size());
  for (const auto& [x, y] : points) {
    if (!std::isfinite(x) || !std::isfinite(y)) throw NumericError("fit_slope: non-finite point");
    if (transform == Transform::kLog10 && !(x > 0.0))
      throw InputError("fit_slope: log10 transform needs x > 0");
    xs.push_back(apply(transform, x));
  }
  const double n = static_cast<double>(points.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += points[i].second;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = points[i].second - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (!(sxx > 0.0)) throw DegenerateFitError("fit_slope: x has zero variance");

  ScalingFit fit;
  fit.alpha = sxy / sxx;
  fit.intercept = my - fit.alpha * mx;
  fit.n_points = points.size();
  fit.x_transform = transform;
  if (syy > 0.0) {
    double ss_res = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double r = points[i].second - (fit.alpha * xs[i] + fit.intercept);
      ss_res += r * r;
    }
    fit.r_squared = std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
  } else {
    fit.r_squared = 1.0;
  }
  return fit;
}

ScalingRecord from_run_record(const RunRecord& record) {
  ScalingRecord out;
  out.run_id = record.run_id;
  out.family = record.family;
  out.size_label = record.size_label;
  out.params = static_cast<double>(record.params);
  out.flops = static_cast<double>(record.flops_forward);
  out.upstream = record.upstream_neg_log_ppl;
  if (record.has_downstream) out.downstream = record.downstream_mean;
  return out;
}

std::vector<ScalingRecord> from_run_records(const std::vector<RunRecord>& records) {
  std::vector<ScalingRecord> out;
  out.reserve(records.size());
  for (const auto& r : records)
    if (r.status == "ok") out.push_back(from_run_record(r));
  return out;
}

bool SlopeRow::complete() const {
  return std::all_of(fits.begin(), fits.end(), [](const auto& f) { return f.has_value(); });
}

SlopeTable slope_table(const std::vector<ScalingRecord>& records) {
  struct Accum {
    double params = 0, flops = 0, u = 0, d = 0;
    std::size_t n = 0, nd = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::pair<std::string, Accum>>> groups;
  for (const auto& r : records) {
    auto [it, inserted] = groups.try_emplace(r.family);
    if (inserted) order.push_back(r.family);
    auto& sizes = it->second;
    auto s = std::find_if(sizes.begin(), sizes.end(),
                          [&](const auto& p) { return p.first == r.size_label; });
    if (s == sizes.end()) s = sizes.insert(sizes.end(), {r.size_label, Accum{}});
    Accum& a = s->second;
    a.params += r.params;
    a.flops += r.flops;
    a.u += r.upstream;
    a.n += 1;
    if (r.downstream) {
      a.d += *r.downstream;
      a.nd += 1;
    }
  }

  SlopeTable table;
  for (const auto& family : order) {
    const auto& sizes = groups.at(family);
    if (sizes.size() < 2) {
      table.warnings.push_back("family '" + family + "' has fewer than 2 sizes; row omitted");
      continue;
    }
    SlopeRow row;
    row.family = family;
    for (std::size_t ai = 0; ai < kAxes.size(); ++ai) {
      const Axis axis = kAxes[ai];
      const bool needs_d = axis != Axis::kFlopsUpstream && axis != Axis::kParamsUpstream;
      std::vector<std::pair<double, double>> pts;
      for (const auto& [label, a] : sizes) {
        const double n = static_cast<double>(a.n);
        const double u = a.u / n;
        if (needs_d && a.nd == 0) continue;
        const double d = a.nd ? a.d / static_cast<double>(a.nd) : 0.0;
        switch (axis) {
          case Axis::kFlopsUpstream: pts.emplace_back(a.flops / n, u); break;
          case Axis::kFlopsDownstream: pts.emplace_back(a.flops / n, d); break;
          case Axis::kParamsUpstream: pts.emplace_back(a.params / n, u); break;
          case Axis::kParamsDownstream: pts.emplace_back(a.params / n, d); break;
          case Axis::kUpstreamDownstream: pts.emplace_back(u, d); break;
        }
      }
      const std::string where = "family '" + family + "' (" + std::string(axis_id(axis)) + ")";
      if (pts.size() < 2) {
        table.warnings.push_back(where + ": fewer than 2 points with this metric");
        continue;
      }
      try {
        ScalingFit fit = fit_slope(pts, axis_transform(axis));
        fit.family = family;
        fit.axis = axis;
        row.fits[ai] = fit;
      } catch (const DegenerateFitError&) {
        table.warnings.push_back(where + ": degenerate fit (constant x)");
      }
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string slope_table_csv(const SlopeTable& table) {
  std::string out = "family";
  for (Axis axis : kAxes) {
    const std::string id(axis_id(axis));
    const std::string tag = std::string(1, id[0]) + id[2];
    out += ",alpha_" + tag + ",r2_" + tag + ",n_" + tag;
  }
  out += "\n";
  for (const auto& row : table.rows) {
    out += csv_field(row.family);
    for (const auto& fit : row.fits) {
      if (fit)
        out += "," + format_number(fit->alpha) + "," + format_number(fit->r_squared) + "," +
               std::to_string(fit->n_points);
      else
        out += ",,,";
    }
    out += "\n";
  }
  return out;
}

std::vector<ParetoPoint> pareto_frontier(const std::vector<ParetoPoint>& points) {
  for (const auto& p : points)
    if (!std::isfinite(p.cost) || !std::isfinite(p.quality))
      throw InputError("pareto_frontier: non-finite point '" + p.run_id + "'");
  std::vector<ParetoPoint> sorted = points;
  std::sort(sorted.begin(), sorted.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
    if (a.cost != b.cost) return a.cost < b.cost;
    if (a.quality != b.quality) return a.quality > b.quality;
    return a.run_id < b.run_id;
  });
  // Sweeping by increasing cost, a point survives only if it beats every
  // cheaper (or equally cheap, listed earlier) point on quality.
  std::vector<ParetoPoint> frontier;
  for (const auto& p : sorted)
    if (frontier.empty() || p.quality > frontier.back().quality) frontier.push_back(p);
  return frontier;
}

CostAxis parse_cost_axis(std::string_view text) {
  if (text == "flops" || text == "F") return CostAxis::kFlops;
  if (text == "params" || text == "P") return CostAxis::kParams;
  throw ConfigError("unknown cost axis '" + std::string(text) + "' (expected flops or params)");
}

QualityAxis parse_quality_axis(std::string_view text) {
  if (text == "U" || text == "upstream") return QualityAxis::kUpstream;
  if (text == "D" || text == "downstream") return QualityAxis::kDownstream;
  throw ConfigError("unknown quality axis '" + std::string(text) + "' (expected U or D)");
}

std::vector<ParetoPoint> pareto_points(const std::vector<ScalingRecord>& records, CostAxis cost,
                                       QualityAxis quality) {
  std::vector<ParetoPoint> out;
  for (const auto& r : records) {
    if (quality == QualityAxis::kDownstream && !r.downstream) continue;
    out.push_back({r.run_id, cost == CostAxis::kFlops ? r.flops : r.params,
                   quality == QualityAxis::kUpstream ? r.upstream : *r.downstream});
  }
  return out;
}

std::string frontier_csv(const std::vector<ParetoPoint>& frontier) {
  std::string out = "run_id,cost,quality\n";
  for (const auto& p : frontier)
    out += csv_field(p.run_id) + "," + format_number(p.cost) + "," + format_number(p.quality) +
           "\n";
  return out;
}

std::vector<ScalingRecord> ingest_table(std::string_view csv_text, std::string_view source) {
  const std::string prefix = source.empty() ? "line " : std::string(source) + ":";
  std::vector<ScalingRecord> out;
  std::istringstream in{std::string(csv_text)};
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  static const std::vector<std::string> kHeader = {"family", "size",  "params", "flops",
                                                   "U",      "glue",  "sglue",  "squad"};
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto fields = split_csv(t);
    const std::string where = prefix + std::to_string(line_no);
    if (!header_seen) {
      if (fields != kHeader)
        throw InputError(where + ": expected header family,size,params,flops,U,glue,sglue,squad");
      header_seen = true;
      continue;
    }
    if (fields.size() != kHeader.size())
      throw InputError(where + ": expected 8 fields, got " + std::to_string(fields.size()));
    auto number = [&](std::size_t i, bool optional) -> std::optional<double> {
      const std::string& f = fields[i];
      if (f.empty()) {
        if (optional) return std::nullopt;
        throw InputError(where + ": empty " + kHeader[i]);
      }
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || ptr != f.data() + f.size() || !std::isfinite(v))
        throw InputError(where + ": bad number '" + f + "' in column " + kHeader[i]);
      return v;
    };
    if (fields[0].empty() || fields[1].empty())
      throw InputError(where + ": family and size are required");
    ScalingRecord r;
    r.family = fields[0];
    r.size_label = fields[1];
    r.run_id = r.family + "-" + r.size_label;
    r.params = *number(2, false);
    r.flops = *number(3, false);
    r.upstream = *number(4, false);
    double sum = 0.0;
    int count = 0;
    for (std::size_t i = 5; i < 8; ++i)
      if (auto v = number(i, true)) {
        sum += *v;
        ++count;
      }
    if (count > 0) r.downstream = sum / count / 100.0;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ScalingRecord> ingest_table_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return ingest_table(buffer.str(), path.string());
}

std::string scatter_csv(const std::vector<ScalingRecord>& records) {
  std::string out = "run_id,family,size,params,flops,U,D\n";
  for (const auto& r : records)
    out += csv_field(r.run_id) + "," + csv_field(r.family) + "," + csv_field(r.size_label) + "," +
           format_number(r.params) + "," + format_number(r.flops) + "," +
           format_number(r.upstream) + "," + (r.downstream ? format_number(*r.downstream) : "") +
           "\n";
  return out;
}

std::string scatter_svg(const std::vector<ScalingRecord>& records) {
  constexpr double W = 720, H = 480, L = 70, R = 170, T = 30, B = 50;
  static const char* kColours[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                   "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                   "#bcbd22", "#17becf", "#393b79", "#637939"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::vector<const ScalingRecord*> valid;
  for (const auto& r : records)
    if (r.flops > 0 && std::isfinite(r.upstream)) valid.push_back(&r);
  if (valid.empty()) {
    os << "<text x=\"20\" y=\"40\">no data</text>\n</svg>\n";
    return os.str();
  }
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (auto* r : valid) {
    const double x = std::log10(r->flops);
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y0 = std::min(y0, r->upstream);
    y1 = std::max(y1, r->upstream);
  }
  if (x1 - x0 < 1e-12) { x0 -= 0.5; x1 += 0.5; }
  if (y1 - y0 < 1e-12) { y0 -= 0.5; y1 += 0.5; }
  const double px = (x1 - x0) * 0.05, py = (y1 - y0) * 0.05;
  x0 -= px; x1 += px; y0 -= py; y1 += py;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    os << "<text x=\"" << sx(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">"
       << format_number(std::round(xv * 100) / 100) << "</text>\n"
       << "<text x=\"" << L - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">"
       << format_number(std::round(yv * 100) / 100) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10
     << "\" text-anchor=\"middle\">log10 FLOPs</text>\n"
     << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\" text-anchor=\"middle\">U (neg. log perplexity)</text>\n";

  std::vector<std::string> families;
  for (auto* r : valid)
    if (std::find(families.begin(), families.end(), r->family) == families.end())
      families.push_back(r->family);
  for (auto* r : valid) {
    const auto fi = std::find(families.begin(), families.end(), r->family) - families.begin();
    os << "<circle cx=\"" << sx(std::log10(r->flops)) << "\" cy=\"" << sy(r->upstream)
       << "\" r=\"4\" fill=\"" << kColours[fi % 12] << "\"><title>" << r->run_id
       << "</title></circle>\n";
  }
  std::vector<ParetoPoint> pts;
  for (auto* r : valid) pts.push_back({r->run_id, r->flops, r->upstream});
  const auto frontier = pareto_frontier(pts);
  os << "<polyline fill=\"none\" stroke=\"black\" stroke-dasharray=\"4 3\" points=\"";
  for (const auto& p : frontier) os << sx(std::log10(p.cost)) << "," << sy(p.quality) << " ";
  os << "\"/>\n";
  for (std::size_t i = 0; i < families.size(); ++i) {
    const double y = T + 14.0 * static_cast<double>(i);
    os << "<circle cx=\"" << W - R + 20 << "\" cy=\"" << y << "\" r=\"4\" fill=\""
       << kColours[i % 12] << "\"/>\n<text x=\"" << W - R + 30 << "\" y=\"" << y + 4 << "\">"
       << families[i] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

ReportFiles write_report(const std::vector<ScalingRecord>& records,
                         const std::filesystem::path& markdown_path) {
  ReportFiles files;
  files.markdown = markdown_path;
  const auto stem = markdown_path.stem().string();
  files.scatter_csv = markdown_path.parent_path() / (stem + "_scatter.csv");
  files.scatter_svg = markdown_path.parent_path() / (stem + "_scatter.svg");

  const SlopeTable table = slope_table(records);
  std::ostringstream md;
  md << "# Scaling report\n\n" << records.size() << " runs.\n\n## Slopes\n\n| family |";
  for (Axis a : kAxes) md << " alpha(" << axis_id(a) << ") |";
  md << "\n|---|---|---|---|---|---|\n";
  for (const auto& row : table.rows) {
    md << "| " << row.family << " |";
    for (const auto& f : row.fits) {
      if (f) {
        std::ostringstream v;
        v.precision(3);
        v << std::fixed << f->alpha;
        md << " " << v.str() << " |";
      } else {
        md << " - |";
      }
    }
    md << "\n";
  }
  if (!table.warnings.empty()) {
    md << "\nWarnings:\n\n";
    for (const auto& w : table.warnings) md << "- " << w << "\n";
  }
  const std::pair<CostAxis, const char*> costs[] = {{CostAxis::kFlops, "FLOPs"},
                                                    {CostAxis::kParams, "params"}};
  const std::pair<QualityAxis, const char*> qualities[] = {{QualityAxis::kUpstream, "U"},
                                                           {QualityAxis::kDownstream, "D"}};
  for (const auto& [c, cname] : costs)
    for (const auto& [q, qname] : qualities) {
      const auto pts = pareto_points(records, c, q);
      if (pts.empty()) continue;
      md << "\n## Pareto frontier: " << cname << " vs " << qname << "\n\n| run | cost | quality |\n"
         << "|---|---|---|\n";
      for (const auto& p : pareto_frontier(pts))
        md << "| " << p.run_id << " | " << format_number(p.cost) << " | "
           << format_number(p.quality) << " |\n";
    }
  md << "\nScatter data: `" << files.scatter_csv.filename().string() << "`, plot: `"
     << files.scatter_svg.filename().string() << "`.\n";

  auto write = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p);
    if (!out) throw InputError("cannot write " + p.string());
    out << text;
  };
  write(files.markdown, md.str());
  write(files.scatter_csv, scatter_csv(records));
  write(files.scatter_svg, scatter_svg(records));
  return files;
}

}  // namespace archscale::scaling
