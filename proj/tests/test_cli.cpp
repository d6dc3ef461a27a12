#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "archscale/records.hpp"
#include "cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "archscale");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = archscale::cli::run(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

const std::string kTable = std::string(ARCHSCALE_DATA_DIR) + "/table1.csv";

}  // namespace

TEST_CASE("count") {
  const auto r = run({"count", "--family", "transformer", "--size", "base"});
  CHECK(r.code == 0);
  CHECK(r.out.find("\"params_total\": 222903552") != std::string::npos);
  CHECK(r.err.find("222.9M") != std::string::npos);
  CHECK(run({"count", "--family", "nonesuch", "--size", "base"}).code == 1);
  CHECK(run({"count", "--family", "albert", "--size", "tiny"}).code == 1);
  CHECK(run({"count", "--bogus-flag"}).code == 1);
  CHECK(run({}).code == 1);
}

TEST_CASE("ladder") {
  const auto r = run({"ladder", "--family", "glu", "--desk"});
  CHECK(r.code == 0);
  CHECK(r.out.find("[base]") != std::string::npos);
  const auto p = run({"ladder", "--family", "transformer", "--desk", "--protocol", "depth",
                      "--steps", "2"});
  CHECK(p.code == 0);
  CHECK(p.out.find("[step1]") != std::string::npos);
  CHECK(run({"ladder", "--family", "glu", "--protocol", "diagonal"}).code == 1);
}

TEST_CASE("gradcheck exit codes") {
  CHECK(run({"gradcheck", "--family", "performer", "--tiny"}).code == 0);
  const auto strict = run({"gradcheck", "--family", "transformer", "--tiny", "--tol", "0"});
  CHECK(strict.code == 2);
  CHECK(strict.out.find("FAILED") != std::string::npos);
}

TEST_CASE("fit and pareto on the shipped table") {
  const auto dir = fs::temp_directory_path() / "archscale_cli_test";
  fs::remove_all(dir);
  const auto fit = run({"--out-dir", dir.string(), "fit", "--in", kTable, "--out", "slopes.csv"});
  CHECK(fit.code == 0);
  CHECK(fs::exists(dir / "slopes.csv"));
  const auto pareto = run({"pareto", "--in", kTable, "--cost", "flops", "--quality", "U",
                           "--size", "base", "--family", "funnel,performer,transformer,switch"});
  CHECK(pareto.code == 0);
  CHECK(pareto.out == "run_id,cost,quality\nfunnel-base,8.1,-1.83\ntransformer-base,11.4,-1.75\n"
                      "switch-base,12.7,-1.66\n");
  CHECK(run({"pareto", "--in", kTable, "--cost", "speed"}).code == 1);
  CHECK(run({"fit", "--in", (dir / "missing.jsonl").string()}).code == 1);
  fs::remove_all(dir);
}

TEST_CASE("pretrain, finetune and report") {
  const auto dir = fs::temp_directory_path() / "archscale_cli_train";
  fs::remove_all(dir);
  const std::string records = (dir / "runs.jsonl").string();
  const auto pre = run({"--seed", "4", "pretrain", "--family", "lconv", "--size", "tiny",
                        "--steps", "3", "--batch", "2", "--seq-len", "16", "--docs", "40",
                        "--ckpt-dir", (dir / "ck").string(), "--out", records});
  REQUIRE(pre.code == 0);
  auto recs = archscale::read_records(records);
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].seed == 4);
  CHECK(fs::exists(recs[0].checkpoint));
  const auto ft = run({"finetune", "--ckpt", recs[0].checkpoint, "--steps", "2", "--batch", "2",
                       "--from", records, "--out", records});
  CHECK(ft.code == 0);
  recs = archscale::read_records(records);
  REQUIRE(recs.size() == 2);
  CHECK(recs[1].has_downstream);
  CHECK(recs[1].pretrain_steps == 3);
  const auto rep = run({"report", "--in", records, "--out", (dir / "report.md").string()});
  CHECK(rep.code == 0);
  CHECK(fs::exists(dir / "report_scatter.svg"));
  CHECK(run({"pretrain", "--family", "lconv", "--size", "huge", "--out", records}).code == 1);
  fs::remove_all(dir);
}
