#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "archscale/errors.hpp"
#include "archscale/scaling.hpp"

using namespace archscale;
using namespace archscale::scaling;

namespace {

const std::filesystem::path kTable = std::filesystem::path(ARCHSCALE_DATA_DIR) / "table1.csv";

std::vector<std::string> ids(const std::vector<ParetoPoint>& pts) {
  std::vector<std::string> out;
  for (const auto& p : pts) out.push_back(p.run_id);
  return out;
}

// Exhaustive dominance oracle; duplicates collapse to the smallest id.
std::vector<std::string> brute_force_frontier(const std::vector<ParetoPoint>& pts) {
  std::vector<ParetoPoint> keep;
  for (const auto& a : pts) {
    bool out = false;
    for (const auto& b : pts) {
      const bool dominates = b.cost <= a.cost && b.quality >= a.quality &&
                             (b.cost < a.cost || b.quality > a.quality);
      const bool earlier_twin = b.cost == a.cost && b.quality == a.quality && b.run_id < a.run_id;
      out = out || dominates || earlier_twin;
    }
    if (!out) keep.push_back(a);
  }
  std::sort(keep.begin(), keep.end(),
            [](const auto& x, const auto& y) { return x.cost < y.cost; });
  return ids(keep);
}

}  // namespace

TEST_CASE("fit_slope basics") {
  const auto fit = fit_slope({{1, 0}, {10, 1}}, Transform::kLog10);
  CHECK(fit.alpha == 1.0);
  CHECK(fit.intercept == 0.0);
  CHECK(fit.r_squared == 1.0);
  CHECK(fit.n_points == 2);
  CHECK(fit_slope({{1, 2}, {3, 6}, {5, 10}}, Transform::kIdentity).alpha ==
        doctest::Approx(2.0));
  CHECK_THROWS_AS(fit_slope({{2, 1}, {2, 3}}, Transform::kIdentity), DegenerateFitError);
  CHECK_THROWS_AS(fit_slope({{0, 1}, {2, 3}}, Transform::kLog10), InputError);
  CHECK_THROWS_AS(fit_slope({{1, 1}}, Transform::kLog10), InputError);
}

TEST_CASE("fit_slope is affine-equivariant in y") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(1.0, 1000.0), n(-1.0, 1.0);
  std::vector<std::pair<double, double>> pts, scaled, shifted;
  for (int i = 0; i < 8; ++i) {
    const double x = u(rng), y = n(rng);
    pts.emplace_back(x, y);
    scaled.emplace_back(x, 4.0 * y);
    shifted.emplace_back(x, y + 0.5);
  }
  const double a = fit_slope(pts, Transform::kLog10).alpha;
  CHECK(fit_slope(scaled, Transform::kLog10).alpha == doctest::Approx(4.0 * a).epsilon(1e-12));
  CHECK(fit_slope(shifted, Transform::kLog10).alpha == doctest::Approx(a).epsilon(1e-12));
  const double r2 = fit_slope(pts, Transform::kLog10).r_squared;
  CHECK(r2 >= 0.0);
  CHECK(r2 <= 1.0);
}

TEST_CASE("table ingest") {
  const auto rows = ingest_table_file(kTable);
  CHECK(rows.size() == 54);
  const auto& first = rows.front();
  CHECK(first.family == "transformer");
  CHECK(first.size_label == "tiny");
  CHECK(first.params == 16e6);
  CHECK(first.downstream.value() == doctest::Approx((69.3 + 56.9 + 73.6) / 300.0));
  CHECK(ingest_table("").empty());
  CHECK(ingest_table("family,size,params,flops,U,glue,sglue,squad\n").empty());
  try {
    ingest_table("family,size,params,flops,U,glue,sglue,squad\nx,tiny,1,2,abc,,,\n");
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(ingest_table("family,size,params,flops,U,glue,sglue,squad\nx,tiny,1,2\n"),
                  InputError);
  CHECK_THROWS_AS(ingest_table("a,b\n"), InputError);
  // Missing downstream columns leave D unset.
  const auto bare = ingest_table("family,size,params,flops,U,glue,sglue,squad\nx,s,1,2,-1,,,\n");
  CHECK_FALSE(bare.front().downstream.has_value());
}

TEST_CASE("slope table on the shipped table") {
  const auto table = slope_table(ingest_table_file(kTable));
  const auto row = [&](const std::string& f) {
    return *std::find_if(table.rows.begin(), table.rows.end(),
                         [&](const auto& r) { return r.family == f; });
  };
  // Independent OLS of NegLogPpl on log10 FLOPs over the five rows.
  CHECK(row("transformer").fits[0]->alpha == doctest::Approx(0.54298).epsilon(1e-4));
  CHECK(row("glu").fits[0]->alpha == doctest::Approx(0.49763).epsilon(1e-4));
  CHECK(row("performer").fits[0]->alpha == doctest::Approx(0.4874).epsilon(1e-3));
  CHECK(table.rows.size() == 12);
  for (const auto& r : table.rows) CHECK(r.complete());
  CHECK(table.warnings.empty());
  const std::string csv = slope_table_csv(table);
  CHECK(csv.rfind("family,alpha_FU,", 0) == 0);
}

TEST_CASE("slope table warns on single-size families") {
  std::vector<ScalingRecord> recs = {{"a", "solo", "tiny", 1e6, 1e9, -2.0, 0.5}};
  const auto table = slope_table(recs);
  CHECK(table.rows.empty());
  REQUIRE(table.warnings.size() == 1);
  CHECK(table.warnings[0].find("solo") != std::string::npos);
}

TEST_CASE("slope table averages seeds per size") {
  std::vector<ScalingRecord> recs;
  for (int seed = 0; seed < 3; ++seed) {
    recs.push_back({"s" + std::to_string(seed), "f", "small", 10, 100, -2.0 + 0.1 * seed, {}});
    recs.push_back({"b" + std::to_string(seed), "f", "big", 100, 1000, -1.0 + 0.1 * seed, {}});
  }
  const auto table = slope_table(recs);
  REQUIRE(table.rows.size() == 1);
  CHECK(table.rows[0].fits[0]->alpha == doctest::Approx(1.0));
  CHECK(table.rows[0].fits[0]->n_points == 2);
  CHECK_FALSE(table.rows[0].fits[1].has_value());  // no downstream values
  CHECK_FALSE(table.rows[0].complete());
}

TEST_CASE("pareto frontier") {
  CHECK(ids(pareto_frontier({{"only", 1, 1}})) == std::vector<std::string>{"only"});
  const std::vector<ParetoPoint> base = {{"funnel", 8.10, -1.83},
                                         {"performer", 10.8, -2.23},
                                         {"transformer", 11.4, -1.75},
                                         {"switch", 12.7, -1.66}};
  CHECK(ids(pareto_frontier(base)) ==
        std::vector<std::string>{"funnel", "transformer", "switch"});
  CHECK(ids(pareto_frontier({{"a", 1, 1}, {"b", 1, 1}})) == std::vector<std::string>{"a"});
  CHECK_THROWS_AS(pareto_frontier({{"nan", NAN, 1}}), InputError);
}

TEST_CASE("pareto frontier matches brute force, permutations and pruning") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> small(0, 6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ParetoPoint> pts;
    const int n = 1 + trial % 12;
    for (int i = 0; i < n; ++i)
      pts.push_back({"p" + std::to_string(i), double(small(rng)), double(small(rng))});
    const auto frontier = ids(pareto_frontier(pts));
    CHECK(frontier == brute_force_frontier(pts));
    auto shuffled = pts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(ids(pareto_frontier(shuffled)) == frontier);
    std::vector<ParetoPoint> pruned;
    for (const auto& p : pts)
      if (std::find(frontier.begin(), frontier.end(), p.run_id) != frontier.end())
        pruned.push_back(p);
    CHECK(ids(pareto_frontier(pruned)) == frontier);
  }
}

TEST_CASE("report files") {
  const auto dir = std::filesystem::temp_directory_path() / "archscale_report_test";
  std::filesystem::create_directories(dir);
  const auto files = write_report(ingest_table_file(kTable), dir / "summary.md");
  CHECK(std::filesystem::exists(files.markdown));
  CHECK(files.scatter_csv.filename() == "summary_scatter.csv");
  std::ifstream svg(files.scatter_svg);
  std::string first;
  std::getline(svg, first);
  CHECK(first.rfind("<svg", 0) == 0);
  std::filesystem::remove_all(dir);
}
