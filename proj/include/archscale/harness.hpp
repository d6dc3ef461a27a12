#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "archscale/model.hpp"
#include "archscale/records.hpp"
#include "archscale/tensor.hpp"

namespace archscale::harness {

// ---------------------------------------------------------------------------
// Byte tokenizer: 3 specials followed by the 256 byte values. Sentinels reuse
// the ids of bytes 0xFF, 0xFE, ... 0xF5, which never occur in valid UTF-8.

inline constexpr int kPad = 0;
inline constexpr int kEos = 1;
inline constexpr int kBos = 2;
inline constexpr int kByteOffset = 3;
inline constexpr std::size_t kVocabSize = 259;
inline constexpr std::size_t kSentinelCount = 11;

int sentinel_id(std::size_t index);
bool is_sentinel(int id);

// Bytes that would collide with sentinel ids are replaced by '?'.
std::vector<int> tokenize(std::string_view text);
// Specials are dropped; sentinels render as <extra_id_k>.
std::string detokenize(std::span<const int> ids);

// ---------------------------------------------------------------------------
// Corpora

// Seeded first-order Markov text over a synthetic lexicon.
std::vector<std::string> synthetic_corpus(std::size_t documents, std::uint64_t seed);
// UTF-8 text, one document per line; blank lines are skipped.
std::vector<std::string> read_corpus(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Span corruption

struct SpanCorruption {
  std::vector<int> encoder;  // kept tokens with one sentinel per span, then EOS
  std::vector<int> target;   // sentinel + span tokens per span, then EOS
  std::size_t noise_tokens = 0;
  std::size_t spans = 0;
};

// round(n * rate) noise tokens in max(1, round(noise / mean_span)) spans (at
// most kSentinelCount), span and gap lengths drawn as random partitions.
// Returns nullopt for sequences shorter than 2 tokens.
std::optional<SpanCorruption> span_corrupt(std::span<const int> tokens, double rate,
                                           double mean_span, std::mt19937_64& rng);
// Inverse of span_corrupt (without the trailing EOS).
std::vector<int> reconstruct(const SpanCorruption& corruption);

// ---------------------------------------------------------------------------
// Adafactor

struct AdafactorConfig {
  double scale = 0.05;       // lr = scale * min(1/sqrt(t), t / warmup^1.5)
  std::size_t warmup = 100;
  double clip_threshold = 1.0;
  double eps1 = 1e-30;
  double eps2 = 1e-3;           // floor on the parameter RMS step multiplier
  bool scale_parameter = true;  // step size relative to each tensor's RMS
  double decay_exponent = 0.8;  // beta2_t = 1 - t^-decay_exponent
};

class Adafactor {
 public:
  struct Slot {
    bool factored = false;
    std::vector<double> row;   // [rows], factored only
    std::vector<double> col;   // [cols], factored only
    std::vector<double> full;  // unfactored second moment
  };

  Adafactor(std::vector<Tensor> parameters, AdafactorConfig config = {});

  // Applies the gradients accumulated on the parameters, then clears them.
  // A non-finite gradient skips the update (counted) and still clears.
  bool step();

  double learning_rate(std::size_t step) const;
  std::size_t steps() const { return steps_; }
  std::size_t skipped() const { return skipped_; }
  const std::vector<Slot>& state() const { return slots_; }

 private:
  std::vector<Tensor> params_;
  AdafactorConfig config_;
  std::vector<Slot> slots_;
  std::size_t steps_ = 0;
  std::size_t skipped_ = 0;
};

// ---------------------------------------------------------------------------
// Training

struct Example {
  std::vector<int> encoder;
  std::vector<int> decoder_in;      // BOS + target[:-1]
  std::vector<int> decoder_target;
};

Example make_example(std::vector<int> encoder, std::vector<int> target);

inline constexpr double kDivergenceLoss = 1e4;

struct PretrainOptions {
  std::size_t steps = 2000;
  std::size_t batch = 32;
  std::size_t seq_len = 128;
  double corrupt_rate = 0.15;
  double mean_span = 3.0;
  std::uint64_t seed = 0;
  AdafactorConfig optimizer;
  std::size_t eval_examples = 64;
  std::uint64_t eval_seed = 20240601;  // validation set is shared by all runs
  std::size_t log_every = 0;           // 0 disables progress callbacks
  std::function<void(std::size_t step, double loss)> on_log;
};

struct FinetuneOptions {
  std::size_t steps = 500;
  std::size_t batch = 32;
  std::size_t payload_len = 8;
  std::uint64_t seed = 0;
  AdafactorConfig optimizer;
  std::size_t eval_per_task = 50;
  std::uint64_t eval_seed = 20240602;
  std::size_t log_every = 0;
  std::function<void(std::size_t step, double loss)> on_log;
};

// Held-out span-corruption examples from the last tenth of the corpus.
std::vector<Example> validation_set(const Model& model, const std::vector<std::string>& corpus,
                                    const PretrainOptions& options);
// Token-weighted mean cross-entropy (natural log) without the auxiliary loss.
double evaluate_loss(const Model& model, std::span<const Example> examples);

// Trains with span corruption and fills params, flops, U and step counts.
RunRecord pretrain(const Model& model, const std::vector<std::string>& corpus,
                   const PretrainOptions& options, const std::string& size_label);

// Synthetic transduction tasks: "copy", "reverse", "modsum".
inline constexpr std::string_view kTasks[] = {"copy", "reverse", "modsum"};

Example task_example(std::string_view task, std::size_t payload_len, std::mt19937_64& rng);
// Exact-match accuracy of greedy decoding per task.
std::map<std::string, double> evaluate_downstream(const Model& model,
                                                  const FinetuneOptions& options);

// Trains on the task mixture and fills downstream accuracies and D.
void finetune(const Model& model, RunRecord& record, const FinetuneOptions& options);

}  // namespace archscale::harness
