// Acceptance runner: one PASS/FAIL line per criterion, details indented below.
// Usage: acceptance [--only N[,M...]] [--work DIR]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "archscale/cost_model.hpp"
#include "archscale/ladders.hpp"
#include "archscale/model.hpp"
#include "archscale/records.hpp"
#include "archscale/scaling.hpp"
#include "checks.hpp"
#include "cli.hpp"

using namespace archscale;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string summary;
  std::vector<std::string> details;
  void fail(const std::string& why) {
    pass = false;
    details.push_back(why);
  }
};

const fs::path kData = ARCHSCALE_DATA_DIR;
fs::path g_work;

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.precision(digits);
  os << std::fixed << v;
  return os.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(std::vector<std::string> args, std::string* captured_err = nullptr) {
  args.insert(args.begin(), "archscale");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = archscale::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (captured_err) *captured_err = err.str();
  return code;
}

// 1. Parameter counts against the transcribed table.
Outcome params_reproduction() {
  Outcome o;
  const auto table = scaling::ingest_table_file(kData / "table1.csv");
  std::size_t compared = 0, within = 0;
  for (const auto& row : table) {
    const Family f = family_from_string(row.family);
    const auto ladder = standard_ladder(f);
    const LadderEntry& e = find_size(ladder, row.size_label);
    const double ours = static_cast<double>(count_params(e.config).params_total);
    const double dev = (ours - row.params) / row.params;
    double tol = 0.20;
    if (f == Family::kTransformer &&
        (row.size_label == "base" || row.size_label == "large" || row.size_label == "xl"))
      tol = 0.02;
    if (f == Family::kSwitch && row.size_label == "base") tol = 0.10;
    ++compared;
    const std::string line = row.family + " " + row.size_label + ": " +
                             fixed(ours / 1e6, 1) + "M vs " + fixed(row.params / 1e6, 1) +
                             "M (" + (dev >= 0 ? "+" : "") + fixed(dev * 100, 1) + "%, tol " +
                             fixed(tol * 100, 0) + "%)";
    if (std::abs(dev) <= tol) {
      ++within;
      if (tol < 0.2) o.details.push_back(line);
    } else {
      o.fail(line + " OUT OF TOLERANCE");
    }
  }
  o.summary = std::to_string(within) + "/" + std::to_string(compared) +
              " rows within tolerance";
  return o;
}

// 2. Slopes fitted on the table.
Outcome slope_reproduction() {
  Outcome o;
  const auto table = scaling::slope_table(scaling::ingest_table_file(kData / "table1.csv"));
  const std::map<std::string, double> expected = {{"transformer", 0.54}, {"glu", 0.49}};
  for (const auto& [family, alpha] : expected) {
    const auto it = std::find_if(table.rows.begin(), table.rows.end(),
                                 [&](const auto& r) { return r.family == family; });
    if (it == table.rows.end() || !it->fits[0]) {
      o.fail(family + ": no (F,U) fit");
      continue;
    }
    const double got = it->fits[0]->alpha;
    const std::string line = family + " alpha(F,U) = " + fixed(got, 4) + " (expected " +
                             fixed(alpha, 2) + " +- 0.01)";
    if (std::abs(got - alpha) <= 0.01)
      o.details.push_back(line);
    else
      o.fail(line);
  }
  o.summary = o.pass ? "transformer and glu slopes reproduced" : "slope mismatch";
  return o;
}

// 3. Closed-form costs equal the instrumented forward pass.
Outcome cost_exactness() {
  Outcome o;
  std::size_t checked = 0;
  for (Family f : kAllFamilies) {
    for (const auto& e : desk_ladder(f)) {
      for (auto [ne, nd] : {std::pair<std::size_t, std::size_t>{16, 12}, {33, 9}}) {
        const auto r = checks::cost_exactness(e.config, ne, nd);
        ++checked;
        if (!r.ok) o.fail(std::string(family_id(f)) + " " + e.label + ": " + r.detail);
      }
    }
  }
  o.summary = std::to_string(checked) + " (family, size, length) cases";
  return o;
}

// 4. Finite-difference gradients.
Outcome gradient_suite() {
  Outcome o;
  double worst = 0.0;
  std::string worst_where;
  for (Family f : kAllFamilies) {
    for (std::uint64_t seed : {1, 2, 3}) {
      GradcheckOptions opts;
      opts.seed = seed;
      const auto r = gradcheck(Model::build(tiny_config(f), seed), opts);
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        worst_where = std::string(family_id(f)) + " seed " + std::to_string(seed) + " " +
                      r.worst_param;
      }
      if (!r.passed(1e-4))
        o.fail(std::string(family_id(f)) + " seed " + std::to_string(seed) + ": " +
               std::to_string(r.max_rel_error) + " at " + r.worst_param);
    }
  }
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << worst;
  o.summary = "36 checks, max relative error " + os.str() + " (" + worst_where + ")";
  return o;
}

// 5. Exact reductions.
Outcome reductions() {
  Outcome o;
  const std::pair<const char*, std::function<checks::Result()>> cases[] = {
      {"glu with unit gate == ffn", [] { return checks::glu_unit_gate_equals_ffn(4); }},
      {"mos K=1 == softmax head", [] { return checks::mos_single_component_equals_softmax(4); }},
      {"switch N_E=1 == dense ffn", [] { return checks::switch_single_expert_equals_dense(4); }},
      {"universal params constant in N_R", checks::universal_params_constant_in_recurrence},
      {"albert params constant in N_L", checks::albert_params_constant_in_layers}};
  for (const auto& [name, fn] : cases) {
    const auto r = fn();
    if (r.ok)
      o.details.push_back(std::string(name) + ": " + r.detail);
    else
      o.fail(std::string(name) + ": " + r.detail);
  }
  o.summary = std::to_string(o.pass ? 5 : 5 - o.details.size()) + " identities";
  o.summary = o.pass ? "5/5 identities exact" : "identity broken";
  return o;
}

// 6. Attention cost growth from n=128 to n=256 at desk-tiny dims.
Outcome complexity() {
  Outcome o;
  const ModelConfig c = desk_ladder(Family::kTransformer).front().config;
  const auto ratio = [&](bool performer) {
    return static_cast<double>(
               checks::attention_block_multiplies(performer, 256, c.d_model, c.n_heads, c.d_kv)) /
           static_cast<double>(
               checks::attention_block_multiplies(performer, 128, c.d_model, c.n_heads, c.d_kv));
  };
  const double rp = ratio(true), rv = ratio(false);
  if (rp < 1.9 || rp > 2.1) o.fail("performer ratio " + fixed(rp, 3) + " outside [1.9, 2.1]");
  if (rv < 3.0) o.fail("vanilla ratio " + fixed(rv, 3) + " below 3.0");
  o.summary = "performer " + fixed(rp, 3) + ", vanilla " + fixed(rv, 3) + " (d " +
              std::to_string(c.d_model) + ", " + std::to_string(c.n_heads) + " heads of " +
              std::to_string(c.d_kv) + ")";
  return o;
}

// 7. Decoder causality.
Outcome causality() {
  Outcome o;
  for (Family f : kAllFamilies) {
    const auto r = checks::causality(tiny_config(f), 8, 21);
    if (!r.ok) o.fail(std::string(family_id(f)) + ": " + r.detail);
  }
  o.summary = "12 families, 8 positions each";
  return o;
}

// 8. Desk ladder end to end through the command-line entry point.
Outcome end_to_end() {
  Outcome o;
  const fs::path dir = g_work / "e2e";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string records = (dir / "records.jsonl").string();
  std::string err;
  const int code = cli({"pretrain", "--family", "transformer", "--ladder", "--seeds", "1,2,3",
                        "--steps", "2000", "--finetune-steps", "500", "--batch", "4", "--seq-len",
                        "32", "--out", records},
                       &err);
  if (code != 0) {
    o.fail("pretrain exited " + std::to_string(code) + ": " + err);
    o.summary = "training failed";
    return o;
  }
  const auto runs = read_records(records);
  std::map<std::string, std::pair<double, int>> by_size;
  std::map<std::string, double> d_by_size;
  for (const auto& r : runs) {
    if (r.status != "ok") o.fail(r.run_id + " status " + r.status);
    auto& [sum, n] = by_size[r.size_label];
    sum += r.upstream_neg_log_ppl;
    ++n;
    d_by_size[r.size_label] += r.downstream_mean / 3.0;
  }
  std::vector<double> means;
  std::string trend;
  for (const auto& e : desk_ladder(Family::kTransformer)) {
    const auto it = by_size.find(e.label);
    if (it == by_size.end() || it->second.second != 3) {
      o.fail("missing runs for " + e.label);
      continue;
    }
    means.push_back(it->second.first / 3.0);
    trend += (trend.empty() ? "" : " < ") + e.label + " " + fixed(means.back(), 4);
    o.details.push_back(e.label + ": mean U " + fixed(means.back(), 4) + ", mean D " +
                        fixed(d_by_size[e.label], 4));
  }
  for (std::size_t i = 1; i < means.size(); ++i)
    if (!(means[i] > means[i - 1])) o.fail("mean U does not improve at step " + std::to_string(i));

  const std::string slopes = (dir / "slopes.csv").string();
  if (cli({"fit", "--in", records, "--out", slopes}) != 0) {
    o.fail("fit failed");
  } else {
    const auto table = scaling::slope_table(scaling::from_run_records(runs));
    const bool complete = !table.rows.empty() && table.rows.front().complete();
    const std::string csv = read_file(slopes);
    std::size_t lines = 0;
    for (char ch : csv) lines += ch == '\n';
    if (!complete || lines != 2 || csv.find("\ntransformer,") == std::string::npos ||
        csv.find(",,") != std::string::npos)
      o.fail("slope table row incomplete:\n" + csv);
    else
      o.details.push_back("alpha(F,U) " + fixed(table.rows.front().fits[0]->alpha, 4) +
                          ", alpha(U,D) " + fixed(table.rows.front().fits[4]->alpha, 4));
  }
  const std::string frontier = (dir / "frontier.csv").string();
  if (cli({"pareto", "--in", records, "--cost", "flops", "--quality", "U", "--out", frontier}) !=
      0) {
    o.fail("pareto failed");
  } else {
    const std::string csv = read_file(frontier);
    const auto rows = std::count(csv.begin(), csv.end(), '\n') - 1;
    if (rows < 1) o.fail("empty frontier");
    o.details.push_back("frontier with " + std::to_string(rows) + " runs");
  }
  o.summary = "mean U " + trend;
  return o;
}

// 9. Pareto frontier on the Base-size upstream subset.
Outcome pareto_oracle() {
  Outcome o;
  const auto table = scaling::ingest_table_file(kData / "table1.csv");
  const std::set<std::string> subset = {"funnel", "performer", "transformer", "switch"};
  std::vector<scaling::ParetoPoint> pts;
  for (const auto& r : table)
    if (r.size_label == "base" && subset.count(r.family))
      pts.push_back({r.family, r.flops, r.upstream});
  const auto frontier = scaling::pareto_frontier(pts);
  std::set<std::string> got;
  for (const auto& p : frontier) got.insert(p.run_id);
  // Exhaustive pairwise dominance oracle.
  std::set<std::string> expected;
  for (const auto& a : pts) {
    bool dominated = false;
    for (const auto& b : pts)
      if (b.cost <= a.cost && b.quality >= a.quality &&
          (b.cost < a.cost || b.quality > a.quality))
        dominated = true;
    if (!dominated) expected.insert(a.run_id);
  }
  const std::set<std::string> paper = {"funnel", "transformer", "switch"};
  if (got != expected) o.fail("frontier differs from the pairwise oracle");
  if (got != paper) o.fail("frontier is not {funnel, transformer, switch}");
  if (got.count("performer")) o.fail("performer on the frontier");
  std::string names;
  for (const auto& p : frontier) names += (names.empty() ? "" : ", ") + p.run_id;
  o.summary = "frontier {" + names + "}";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  g_work = fs::temp_directory_path() / "archscale_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else if (a == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance [--only N[,M...]] [--work DIR]\n");
      return 2;
    }
  }
  fs::create_directories(g_work);

  struct Criterion {
    int id;
    const char* name;
    Outcome (*run)();
    double budget_seconds;  // 0: reported only
  };
  const Criterion criteria[] = {
      {1, "parameter counts", params_reproduction, 1.0},
      {2, "slope reproduction", slope_reproduction, 1.0},
      {3, "cost-model exactness", cost_exactness, 60.0},
      {4, "gradient suite", gradient_suite, 300.0},
      {5, "reduction identities", reductions, 0.0},
      {6, "attention complexity", complexity, 0.0},
      {7, "decoder causality", causality, 0.0},
      {8, "end-to-end desk run", end_to_end, 0.0},
      {9, "pareto oracle", pareto_oracle, 0.0},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.fail(std::string("exception: ") + e.what());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_seconds > 0 && secs > c.budget_seconds)
      o.fail("runtime " + fixed(secs, 2) + " s exceeds " + fixed(c.budget_seconds, 0) + " s");
    std::printf("CRITERION %d %s: %s - %s [%.2f s]\n", c.id, o.pass ? "PASS" : "FAIL", c.name,
                o.summary.c_str(), secs);
    for (const auto& d : o.details) std::printf("    %s\n", d.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
