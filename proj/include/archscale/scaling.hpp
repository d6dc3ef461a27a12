#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "archscale/records.hpp"

namespace archscale::scaling {

// Zero variance in x; no slope exists.
class DegenerateFitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Transform { kLog10, kIdentity };

// (x, y) pairs in slope-table column order.
enum class Axis { kFlopsUpstream, kFlopsDownstream, kParamsUpstream, kParamsDownstream,
                  kUpstreamDownstream };
inline constexpr std::array<Axis, 5> kAxes = {
    Axis::kFlopsUpstream, Axis::kFlopsDownstream, Axis::kParamsUpstream,
    Axis::kParamsDownstream, Axis::kUpstreamDownstream};

std::string_view axis_id(Axis axis);  // "F,U", "F,D", ...
Transform axis_transform(Axis axis);  // log10 for cost axes, identity for (U,D)

struct ScalingFit {
  std::string family;
  Axis axis = Axis::kFlopsUpstream;
  double alpha = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  std::size_t n_points = 0;
  Transform x_transform = Transform::kLog10;
};

// Ordinary least squares y = alpha * T(x) + b.
ScalingFit fit_slope(const std::vector<std::pair<double, double>>& points, Transform transform);

// Cost and quality of one run, with doubles so that transcribed rows in
// arbitrary units fit alongside measured records.
struct ScalingRecord {
  std::string run_id;
  std::string family;
  std::string size_label;
  double params = 0.0;
  double flops = 0.0;
  double upstream = 0.0;  // U
  std::optional<double> downstream;  // D in [0, 1]
};

ScalingRecord from_run_record(const RunRecord& record);
std::vector<ScalingRecord> from_run_records(const std::vector<RunRecord>& records);

struct SlopeRow {
  std::string family;
  std::array<std::optional<ScalingFit>, 5> fits;  // indexed like kAxes
  bool complete() const;
};

struct SlopeTable {
  std::vector<SlopeRow> rows;  // first-appearance order of families
  std::vector<std::string> warnings;
};

// Runs are averaged per (family, size) before fitting, so repeated seeds
// count once. Families with fewer than two sizes are omitted with a warning.
SlopeTable slope_table(const std::vector<ScalingRecord>& records);
std::string slope_table_csv(const SlopeTable& table);

struct ParetoPoint {
  std::string run_id;
  double cost = 0.0;
  double quality = 0.0;
};

// Non-dominated subset sorted by cost; duplicates appear once (lowest run_id).
std::vector<ParetoPoint> pareto_frontier(const std::vector<ParetoPoint>& points);

enum class CostAxis { kFlops, kParams };
enum class QualityAxis { kUpstream, kDownstream };
CostAxis parse_cost_axis(std::string_view text);        // "flops" | "params"
QualityAxis parse_quality_axis(std::string_view text);  // "U" | "D"

// Records lacking the requested quality are skipped.
std::vector<ParetoPoint> pareto_points(const std::vector<ScalingRecord>& records, CostAxis cost,
                                       QualityAxis quality);
std::string frontier_csv(const std::vector<ParetoPoint>& frontier);

// CSV with header family,size,params,flops,U,glue,sglue,squad. D is the mean
// of the non-empty downstream columns divided by 100. Errors carry the line.
std::vector<ScalingRecord> ingest_table(std::string_view csv_text, std::string_view source = "");
std::vector<ScalingRecord> ingest_table_file(const std::filesystem::path& path);

// Markdown summary plus <stem>_scatter.csv and <stem>_scatter.svg next to it.
struct ReportFiles {
  std::filesystem::path markdown;
  std::filesystem::path scatter_csv;
  std::filesystem::path scatter_svg;
};
ReportFiles write_report(const std::vector<ScalingRecord>& records,
                         const std::filesystem::path& markdown_path);

std::string scatter_csv(const std::vector<ScalingRecord>& records);
// log10(FLOPs) against U, one colour per family, frontier drawn as a line.
std::string scatter_svg(const std::vector<ScalingRecord>& records);

}  // namespace archscale::scaling
