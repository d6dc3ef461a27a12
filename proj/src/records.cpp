#include "archscale/records.hpp"

#include <fstream>
#include <json.hpp>
#include <mutex>

#include "archscale/errors.hpp"

namespace archscale {

using nlohmann::ordered_json;

std::string to_json_line(const RunRecord& r) {
  ordered_json j;
  j["schema_version"] = kRecordSchemaVersion;
  j["run_id"] = r.run_id;
  j["family"] = r.family;
  j["size_label"] = r.size_label;
  j["params"] = r.params;
  j["flops_forward"] = r.flops_forward;
  j["flops_n_enc"] = r.flops_n_enc;
  j["flops_n_dec"] = r.flops_n_dec;
  j["steps_per_sec"] = r.steps_per_sec;
  j["upstream_neg_log_ppl"] = r.upstream_neg_log_ppl;
  j["initial_loss"] = r.initial_loss;
  j["final_train_loss"] = r.final_train_loss;
  j["downstream"] = r.downstream;
  j["downstream_mean"] = r.downstream_mean;
  j["has_downstream"] = r.has_downstream;
  j["pretrain_steps"] = r.pretrain_steps;
  j["finetune_steps"] = r.finetune_steps;
  j["skipped_steps"] = r.skipped_steps;
  j["seed"] = r.seed;
  j["status"] = r.status;
  j["checkpoint"] = r.checkpoint;
  return j.dump();
}

RunRecord record_from_json(const std::string& line) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const std::exception& e) {
    throw InputError(std::string("malformed record: ") + e.what());
  }
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kRecordSchemaVersion) {
      throw InputError("unsupported record schema_version " + std::to_string(version));
    }
    RunRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.family = j.at("family").get<std::string>();
    r.size_label = j.value("size_label", "");
    r.params = j.at("params").get<std::uint64_t>();
    r.flops_forward = j.at("flops_forward").get<std::uint64_t>();
    r.flops_n_enc = j.value("flops_n_enc", std::size_t{0});
    r.flops_n_dec = j.value("flops_n_dec", std::size_t{0});
    r.steps_per_sec = j.value("steps_per_sec", 0.0);
    r.upstream_neg_log_ppl = j.at("upstream_neg_log_ppl").get<double>();
    r.initial_loss = j.value("initial_loss", 0.0);
    r.final_train_loss = j.value("final_train_loss", 0.0);
    if (j.contains("downstream")) {
      r.downstream = j["downstream"].get<std::map<std::string, double>>();
    }
    r.downstream_mean = j.value("downstream_mean", 0.0);
    r.has_downstream = j.value("has_downstream", false);
    r.pretrain_steps = j.value("pretrain_steps", std::size_t{0});
    r.finetune_steps = j.value("finetune_steps", std::size_t{0});
    r.skipped_steps = j.value("skipped_steps", std::size_t{0});
    r.seed = j.value("seed", std::uint64_t{0});
    r.status = j.value("status", "ok");
    r.checkpoint = j.value("checkpoint", "");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("record is missing a field: ") + e.what());
  }
}

void append_record(const std::filesystem::path& path, const RunRecord& record) {
  static std::mutex sink_mutex;
  const std::lock_guard<std::mutex> lock(sink_mutex);
  std::ofstream out(path, std::ios::app);
  if (!out) throw InputError("cannot append to " + path.string());
  out << to_json_line(record) << "\n";
}

std::vector<RunRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open records file " + path.string());
  std::vector<RunRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(line));
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace archscale
