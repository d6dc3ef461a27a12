#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "archscale/config.hpp"
#include "archscale/cost_model.hpp"
#include "archscale/errors.hpp"
#include "archscale/harness.hpp"
#include "archscale/ladders.hpp"
#include "archscale/model.hpp"
#include "archscale/records.hpp"
#include "archscale/scaling.hpp"

namespace archscale::cli {

namespace fs = std::filesystem;

namespace {

// Thrown by a subcommand whose check ran and failed.
struct CheckFailed {
  std::string message;
};

struct Globals {
  std::uint64_t seed = 0;
  std::string out_dir;
  bool verbose = false;
};

fs::path resolve_output(const Globals& g, const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return p;
  std::string base = g.out_dir;
  if (base.empty())
    if (const char* env = std::getenv("ARCHSCALE_OUT")) base = env;
  if (base.empty()) return p;
  fs::create_directories(base);
  return fs::path(base) / p;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

// Either the given file or stdout when the path is empty or "-".
void emit(const Globals& g, const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-")
    out << text;
  else
    write_text(resolve_output(g, path), text);
}

std::vector<LadderEntry> ladder_for(Family family, bool desk) {
  return desk ? desk_ladder(family) : standard_ladder(family);
}

ModelConfig lookup_config(const std::string& family, const std::string& size, bool desk,
                          const std::string& config_file) {
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) throw InputError("cannot open " + config_file);
    std::stringstream buffer;
    buffer << in.rdbuf();
    ModelConfig c = parse_config(buffer.str());
    validate(c);
    return c;
  }
  if (family.empty()) throw ConfigError("--family is required (or --config)");
  const Family f = family_from_string(family);
  if (size.empty()) throw ConfigError("--size is required (or --config)");
  if (size == "tiny-test") return tiny_config(f);
  return find_size(ladder_for(f, desk), size).config;
}

std::string human_count(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  if (v >= 1e9)
    os << v / 1e9 << "B";
  else if (v >= 1e6)
    os << v / 1e6 << "M";
  else if (v >= 1e3)
    os << v / 1e3 << "K";
  else
    os << v;
  return os.str();
}

std::vector<scaling::ScalingRecord> load_scaling_records(const std::string& path) {
  if (path.empty()) throw ConfigError("--in is required");
  if (fs::path(path).extension() == ".csv") return scaling::ingest_table_file(path);
  return scaling::from_run_records(read_records(path));
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<std::string> read_corpus_or_synthetic(const std::string& corpus, std::size_t docs,
                                                  std::uint64_t corpus_seed) {
  if (!corpus.empty()) {
    auto text = harness::read_corpus(corpus);
    if (text.size() < 2) throw InputError(corpus + ": need at least 2 documents");
    return text;
  }
  return harness::synthetic_corpus(docs, corpus_seed);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Architecture scaling toolkit: model zoo, cost model, desk training, slope fits"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for model init, data sampling and checks")
      ->capture_default_str();
  app.add_option("--out-dir", g.out_dir,
                 "Directory for relative output paths (default: $ARCHSCALE_OUT or cwd)");
  app.add_flag("-v,--verbose", g.verbose, "Progress logging on stderr");

  // count
  std::string family, size, config_file, out_path, csv_path;
  bool desk = false;
  std::size_t n_enc = kDefaultAccountingLength, n_dec = kDefaultAccountingLength;
  auto* count = app.add_subcommand("count", "Closed-form parameter and forward-FLOP counts");
  count->add_option("--family", family, "Family id");
  count->add_option("--size", size, "Size label (tiny..xl, tiny-test)");
  count->add_option("--config", config_file, "Config file in key = value form");
  count->add_flag("--desk", desk, "Use the byte-vocabulary desk ladder");
  count->add_option("--n-enc", n_enc, "Encoder accounting length")->capture_default_str();
  count->add_option("--n-dec", n_dec, "Decoder accounting length")->capture_default_str();
  count->add_option("--out", out_path, "JSON output file (default stdout)");
  count->add_option("--csv", csv_path, "Per-component CSV output file");

  // ladder
  std::string protocol;
  std::size_t protocol_steps = 4;
  auto* ladder = app.add_subcommand("ladder", "Print the configs of a scaling ladder");
  ladder->add_option("--family", family, "Family id")->required();
  ladder->add_flag("--desk", desk, "Desk ladder instead of the standard one");
  ladder->add_option("--protocol", protocol, "uniform, depth or width doubling from --size");
  ladder->add_option("--size", size, "Base size for --protocol (default: smallest)");
  ladder->add_option("--steps", protocol_steps, "Configs in a protocol ladder")
      ->capture_default_str();
  ladder->add_option("--out", out_path, "Output file (default stdout)");

  // pretrain
  harness::PretrainOptions pre;
  std::string corpus, ckpt_dir;
  std::size_t docs = 2000, finetune_steps = 0, jobs = 1;
  std::uint64_t corpus_seed = 0;
  bool standard = false, whole_ladder = false;
  std::string seeds_text;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Span-corruption pretraining of one model");
  pretrain_cmd->add_option("--family", family, "Family id")->required();
  pretrain_cmd->add_option("--size", size, "Size label (desk ladder unless --standard)");
  pretrain_cmd->add_flag("--ladder", whole_ladder, "Run every size of the family's ladder");
  pretrain_cmd->add_flag("--standard", standard, "Look sizes up in the standard ladder");
  pretrain_cmd->add_option("--steps", pre.steps, "Optimizer steps")->capture_default_str();
  pretrain_cmd->add_option("--batch", pre.batch, "Sequences per step")->capture_default_str();
  pretrain_cmd->add_option("--seq-len", pre.seq_len, "Token window per sequence")
      ->capture_default_str();
  pretrain_cmd->add_option("--lr-scale", pre.optimizer.scale, "Adafactor step scale")
      ->capture_default_str();
  pretrain_cmd->add_option("--warmup", pre.optimizer.warmup, "Warmup steps")->capture_default_str();
  pretrain_cmd->add_option("--seeds", seeds_text, "Comma-separated seeds (overrides --seed)");
  pretrain_cmd->add_option("--corpus", corpus, "UTF-8 text, one document per line");
  pretrain_cmd->add_option("--docs", docs, "Synthetic corpus size when --corpus is absent")
      ->capture_default_str();
  pretrain_cmd->add_option("--corpus-seed", corpus_seed, "Synthetic corpus seed")
      ->capture_default_str();
  pretrain_cmd->add_option("--finetune-steps", finetune_steps, "Finetune afterwards (0: skip)")
      ->capture_default_str();
  pretrain_cmd->add_option("--ckpt-dir", ckpt_dir, "Write one checkpoint per run here");
  pretrain_cmd->add_option("--jobs", jobs, "Concurrent runs")->capture_default_str();
  pretrain_cmd->add_option("--out", out_path, "JSON Lines results file (appended)")->required();

  // finetune
  harness::FinetuneOptions fine;
  std::string ckpt, from_records;
  auto* finetune_cmd = app.add_subcommand("finetune", "Finetune a checkpoint on the synthetic tasks");
  finetune_cmd->add_option("--ckpt", ckpt, "Checkpoint from pretrain")->required();
  finetune_cmd->add_option("--steps", fine.steps, "Optimizer steps")->capture_default_str();
  finetune_cmd->add_option("--batch", fine.batch, "Examples per step")->capture_default_str();
  finetune_cmd->add_option("--from", from_records, "Records file holding the pretrain record");
  finetune_cmd->add_option("--out", out_path, "JSON Lines results file (appended)")->required();

  // fit
  std::string in_path;
  auto* fit = app.add_subcommand("fit", "Per-family slope table");
  fit->add_option("--in", in_path, "records.jsonl or a family,size,params,... CSV")->required();
  fit->add_option("--out", out_path, "CSV output file (default stdout)");

  // pareto
  std::string cost_axis = "flops", quality_axis = "U", families_filter, sizes_filter;
  auto* pareto = app.add_subcommand("pareto", "Non-dominated runs in (cost, quality)");
  pareto->add_option("--in", in_path, "records.jsonl or CSV table")->required();
  pareto->add_option("--cost", cost_axis, "flops or params")->capture_default_str();
  pareto->add_option("--quality", quality_axis, "U or D")->capture_default_str();
  pareto->add_option("--family", families_filter, "Comma-separated family filter");
  pareto->add_option("--size", sizes_filter, "Comma-separated size filter");
  pareto->add_option("--out", out_path, "CSV output file (default stdout)");

  // gradcheck
  bool tiny = false;
  double tolerance = 1e-4;
  std::size_t samples = 3;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  gradcheck_cmd->add_option("--family", family, "Family id or 'all'")->required();
  gradcheck_cmd->add_flag("--tiny", tiny, "Use the d_model 16 test config");
  gradcheck_cmd->add_option("--size", size, "Desk size instead of --tiny");
  gradcheck_cmd->add_option("--tol", tolerance, "Maximum relative error")->capture_default_str();
  gradcheck_cmd->add_option("--samples", samples, "Coordinates per parameter tensor")
      ->capture_default_str();

  // report
  auto* report = app.add_subcommand("report", "Markdown report with scatter CSV and SVG");
  report->add_option("--in", in_path, "records.jsonl or CSV table")->required();
  report->add_option("--out", out_path, "Markdown output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInputError;
  }

  try {
    if (*count) {
      const ModelConfig c = lookup_config(family, size, desk, config_file);
      const CostReport r = count_flops(c, n_enc, n_dec);
      emit(g, out_path, to_json(r) + "\n", out);
      if (!csv_path.empty()) write_text(resolve_output(g, csv_path), to_csv(r));
      err << family_display_name(c.family) << ": " << human_count(double(r.params_total))
          << " params, " << human_count(double(r.flops_forward)) << " forward FLOPs at "
          << r.n_enc << "/" << r.n_dec << " tokens\n";
    } else if (*ladder) {
      const Family f = family_from_string(family);
      std::vector<LadderEntry> entries;
      if (protocol.empty()) {
        entries = ladder_for(f, desk);
      } else {
        const auto base_ladder = ladder_for(f, desk);
        const LadderEntry& base = size.empty() ? base_ladder.front() : find_size(base_ladder, size);
        entries = protocol_ladder(base.config, parse_protocol(protocol), protocol_steps);
      }
      std::string text;
      for (const auto& e : entries) {
        const CostReport r = count_params(e.config);
        text += "[" + e.label + "]\n" + format_config(e.config) +
                "params = " + std::to_string(r.params_total) + "\n\n";
      }
      emit(g, out_path, text, out);
    } else if (*pretrain_cmd) {
      const Family f = family_from_string(family);
      std::vector<LadderEntry> entries;
      const auto full = ladder_for(f, !standard);
      if (whole_ladder) {
        entries = full;
      } else {
        if (size.empty()) throw ConfigError("--size or --ladder is required");
        entries.push_back(find_size(full, size));
      }
      std::vector<std::uint64_t> seeds;
      if (seeds_text.empty()) {
        seeds.push_back(g.seed);
      } else {
        for (const auto& s : split_list(seeds_text)) {
          try {
            seeds.push_back(std::stoull(s));
          } catch (const std::exception&) {
            throw ConfigError("bad seed '" + s + "'");
          }
        }
      }
      if (jobs == 0) throw ConfigError("--jobs must be >= 1");
      const auto text = read_corpus_or_synthetic(corpus, docs, corpus_seed);
      const fs::path records_path = resolve_output(g, out_path);
      if (records_path.has_parent_path()) fs::create_directories(records_path.parent_path());
      fs::path ckpt_path;
      if (!ckpt_dir.empty()) {
        ckpt_path = resolve_output(g, ckpt_dir);
        fs::create_directories(ckpt_path);
      }

      struct Job {
        const LadderEntry* entry;
        std::uint64_t seed;
      };
      std::vector<Job> work;
      for (const auto& e : entries)
        for (auto s : seeds) work.push_back({&e, s});
      std::mutex log_mutex;
      std::atomic<std::size_t> next{0};
      std::exception_ptr failure;
      auto log = [&](const std::string& line) {
        std::lock_guard lock(log_mutex);
        err << line << "\n";
        err.flush();
      };
      auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < work.size();) {
          try {
            const Job& job = work[i];
            const std::string tag = family + "-" + job.entry->label + "-s" +
                                    std::to_string(job.seed);
            Model model = Model::build(job.entry->config, job.seed);
            harness::PretrainOptions o = pre;
            o.seed = job.seed;
            if (g.verbose) {
              o.log_every = std::max<std::size_t>(1, o.steps / 10);
              o.on_log = [&, tag](std::size_t s, double l) {
                log(tag + " pretrain step " + std::to_string(s) + " loss " + std::to_string(l));
              };
            }
            RunRecord record = harness::pretrain(model, text, o, job.entry->label);
            if (finetune_steps > 0 && record.status == "ok") {
              harness::FinetuneOptions fo;
              fo.steps = finetune_steps;
              fo.batch = pre.batch;
              fo.seed = job.seed;
              fo.optimizer = pre.optimizer;
              harness::finetune(model, record, fo);
            }
            if (!ckpt_path.empty()) {
              const fs::path p = ckpt_path / (record.run_id + ".ckpt");
              model.save(p);
              record.checkpoint = p.string();
            }
            append_record(records_path, record);
            std::ostringstream line;
            line << record.run_id << ": U " << std::fixed << std::setprecision(4)
                 << record.upstream_neg_log_ppl;
            if (record.has_downstream) line << " D " << record.downstream_mean;
            line << " (" << record.status << ", " << std::setprecision(1)
                 << record.steps_per_sec << " steps/s)";
            log(line.str());
          } catch (...) {
            std::lock_guard lock(log_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      };
      const std::size_t n_threads = std::min(jobs, work.size());
      std::vector<std::thread> threads;
      for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
      worker();
      for (auto& t : threads) t.join();
      if (failure) std::rethrow_exception(failure);
    } else if (*finetune_cmd) {
      Model model = Model::load(ckpt);
      RunRecord record;
      bool found = false;
      if (!from_records.empty()) {
        for (const auto& r : read_records(from_records)) {
          if (!r.checkpoint.empty() && fs::equivalent(r.checkpoint, ckpt)) {
            record = r;
            found = true;
          }
        }
        if (!found) throw InputError("no record in " + from_records + " refers to " + ckpt);
      }
      if (!found) {
        const CostReport c = count_flops(model.config());
        record.family = std::string(family_id(model.config().family));
        record.size_label = fs::path(ckpt).stem().string();
        record.run_id = record.size_label;
        record.params = c.params_total;
        record.flops_forward = c.flops_forward;
        record.flops_n_enc = c.n_enc;
        record.flops_n_dec = c.n_dec;
        record.seed = g.seed;
        record.checkpoint = ckpt;
      }
      fine.seed = g.seed;
      harness::finetune(model, record, fine);
      append_record(resolve_output(g, out_path), record);
      err << record.run_id << ": D " << record.downstream_mean << "\n";
    } else if (*fit) {
      const auto records = load_scaling_records(in_path);
      const auto table = scaling::slope_table(records);
      for (const auto& w : table.warnings) err << "warning: " << w << "\n";
      emit(g, out_path, scaling::slope_table_csv(table), out);
    } else if (*pareto) {
      auto records = load_scaling_records(in_path);
      const auto fams = split_list(families_filter);
      const auto sizes = split_list(sizes_filter);
      std::erase_if(records, [&](const scaling::ScalingRecord& r) {
        const bool fam_ok =
            fams.empty() || std::find(fams.begin(), fams.end(), r.family) != fams.end();
        const bool size_ok =
            sizes.empty() || std::find(sizes.begin(), sizes.end(), r.size_label) != sizes.end();
        return !(fam_ok && size_ok);
      });
      const auto pts = scaling::pareto_points(records, scaling::parse_cost_axis(cost_axis),
                                              scaling::parse_quality_axis(quality_axis));
      if (pts.empty()) throw InputError("no runs with the requested metrics");
      emit(g, out_path, scaling::frontier_csv(scaling::pareto_frontier(pts)), out);
    } else if (*gradcheck_cmd) {
      std::vector<Family> fams;
      if (family == "all")
        fams.assign(kAllFamilies.begin(), kAllFamilies.end());
      else
        fams.push_back(family_from_string(family));
      if (!tiny && size.empty()) tiny = true;
      bool ok = true;
      for (Family f : fams) {
        const ModelConfig c = tiny ? tiny_config(f) : find_size(desk_ladder(f), size).config;
        GradcheckOptions o;
        o.seed = g.seed;
        o.samples_per_tensor = samples;
        const GradcheckReport r = gradcheck(Model::build(c, g.seed), o);
        out << family_id(f) << " checked " << r.checked << " max_rel_error " << std::scientific
            << std::setprecision(3) << r.max_rel_error << std::defaultfloat << " worst "
            << r.worst_param << " (" << r.worst_op << ") "
            << (r.passed(tolerance) ? "ok" : "FAILED") << "\n";
        ok = ok && r.passed(tolerance);
      }
      if (!ok) throw CheckFailed{"gradient check exceeded tolerance"};
    } else if (*report) {
      const auto records = load_scaling_records(in_path);
      const auto files = scaling::write_report(records, resolve_output(g, out_path));
      err << "wrote " << files.markdown.string() << ", " << files.scatter_csv.string() << ", "
          << files.scatter_svg.string() << "\n";
    }
  } catch (const CheckFailed& e) {
    err << "check failed: " << e.message << "\n";
    return kExitCheckFailed;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInputError;
  }
  return kExitOk;
}

}  // namespace archscale::cli
