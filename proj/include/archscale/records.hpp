#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace archscale {

inline constexpr int kRecordSchemaVersion = 1;

// One training run (or one transcribed result row).
struct RunRecord {
  std::string run_id;
  std::string family;      // family id, e.g. "transformer"
  std::string size_label;  // "tiny", "base", ...
  std::uint64_t params = 0;
  std::uint64_t flops_forward = 0;
  std::size_t flops_n_enc = 0;  // accounting lengths of flops_forward
  std::size_t flops_n_dec = 0;
  double steps_per_sec = 0.0;
  double upstream_neg_log_ppl = 0.0;  // U = -(validation cross-entropy per token)
  double initial_loss = 0.0;
  double final_train_loss = 0.0;
  std::map<std::string, double> downstream;  // task -> exact-match accuracy
  double downstream_mean = 0.0;              // D
  bool has_downstream = false;
  std::size_t pretrain_steps = 0;
  std::size_t finetune_steps = 0;
  std::size_t skipped_steps = 0;
  std::uint64_t seed = 0;
  std::string status = "ok";  // "ok" or "diverged"
  std::string checkpoint;
};

std::string to_json_line(const RunRecord& record);
RunRecord record_from_json(const std::string& line);  // throws InputError

// Appends one line; safe to call from several threads of one process.
void append_record(const std::filesystem::path& path, const RunRecord& record);
std::vector<RunRecord> read_records(const std::filesystem::path& path);

}  // namespace archscale
