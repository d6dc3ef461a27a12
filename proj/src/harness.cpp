#include "archscale/harness.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "archscale/cost_model.hpp"
#include "archscale/errors.hpp"
#include "archscale/ops.hpp"

namespace archscale::harness {

// ---------------------------------------------------------------------------
// Tokenizer

int sentinel_id(std::size_t index) {
  if (index >= kSentinelCount) throw ContractError("sentinel index out of range");
  return kByteOffset + 0xFF - static_cast<int>(index);
}

bool is_sentinel(int id) {
  return id > kByteOffset + 0xFF - static_cast<int>(kSentinelCount) && id <= kByteOffset + 0xFF;
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char ch : text) {
    int id = kByteOffset + static_cast<unsigned char>(ch);
    if (is_sentinel(id)) id = kByteOffset + '?';
    out.push_back(id);
  }
  return out;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id < kByteOffset) continue;
    if (is_sentinel(id)) {
      out += "<extra_id_" + std::to_string(kByteOffset + 0xFF - id) + ">";
    } else {
      out.push_back(static_cast<char>(id - kByteOffset));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpora

std::vector<std::string> synthetic_corpus(std::size_t documents, std::uint64_t seed) {
  static constexpr const char* kSyllables[] = {"ka", "lo", "mi", "ne", "su", "ta", "ri", "po",
                                               "ve", "da", "gu", "ho", "zi", "be", "fa", "ju"};
  constexpr std::size_t kLexicon = 240;
  constexpr std::size_t kSuccessors = 6;
  std::mt19937_64 rng(seed);
  auto uniform = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };

  std::vector<std::string> words(kLexicon);
  for (auto& w : words) {
    const std::size_t syllables = 1 + uniform(3);
    for (std::size_t s = 0; s < syllables; ++s) w += kSyllables[uniform(16)];
  }
  std::vector<std::array<std::size_t, kSuccessors>> next(kLexicon);
  for (auto& row : next) {
    for (auto& w : row) w = uniform(kLexicon);
  }
  // Successor k is drawn with weight 1/(k+1).
  std::vector<double> cumulative(kSuccessors);
  double total = 0.0;
  for (std::size_t k = 0; k < kSuccessors; ++k) cumulative[k] = (total += 1.0 / (k + 1.0));

  std::vector<std::string> docs;
  docs.reserve(documents);
  for (std::size_t d = 0; d < documents; ++d) {
    std::string doc;
    std::size_t word = uniform(kLexicon);
    const std::size_t length = 30 + uniform(50);
    for (std::size_t i = 0; i < length; ++i) {
      if (!doc.empty()) doc += (i % 11 == 0) ? ". " : " ";
      doc += words[word];
      const double u = std::generate_canonical<double, 53>(rng) * total;
      const std::size_t k = static_cast<std::size_t>(
          std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
      word = next[word][std::min(k, kSuccessors - 1)];
    }
    docs.push_back(doc + ".");
  }
  return docs;
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus " + path.string());
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    docs.push_back(line);
  }
  if (docs.empty()) throw InputError("corpus " + path.string() + " has no documents");
  return docs;
}

// ---------------------------------------------------------------------------
// Span corruption

namespace {

// Random composition of `total` into `parts` positive integers.
std::vector<std::size_t> random_partition(std::size_t total, std::size_t parts,
                                          std::mt19937_64& rng) {
  std::vector<std::size_t> cuts(total - 1);
  std::iota(cuts.begin(), cuts.end(), 1);
  std::shuffle(cuts.begin(), cuts.end(), rng);
  cuts.resize(parts - 1);
  std::sort(cuts.begin(), cuts.end());
  std::vector<std::size_t> out;
  std::size_t prev = 0;
  for (std::size_t c : cuts) {
    out.push_back(c - prev);
    prev = c;
  }
  out.push_back(total - prev);
  return out;
}

}  // namespace

std::optional<SpanCorruption> span_corrupt(std::span<const int> tokens, double rate,
                                           double mean_span, std::mt19937_64& rng) {
  if (!(rate > 0.0 && rate < 1.0)) throw ConfigError("span_corrupt: rate must lie in (0, 1)");
  if (!(mean_span >= 1.0)) throw ConfigError("span_corrupt: mean_span must be >= 1");
  const std::size_t n = tokens.size();
  if (n < 2) return std::nullopt;

  SpanCorruption out;
  std::size_t noise = static_cast<std::size_t>(std::llround(static_cast<double>(n) * rate));
  noise = std::min(noise, n - 1);
  if (noise == 0) {
    out.encoder.assign(tokens.begin(), tokens.end());
    out.encoder.push_back(kEos);
    out.target = {kEos};
    return out;
  }
  std::size_t spans = static_cast<std::size_t>(
      std::llround(static_cast<double>(noise) / mean_span));
  spans = std::clamp<std::size_t>(spans, 1, std::min({kSentinelCount, noise, n - noise}));
  const auto noise_lengths = random_partition(noise, spans, rng);
  const auto keep_lengths = random_partition(n - noise, spans, rng);

  std::size_t pos = 0;
  for (std::size_t s = 0; s < spans; ++s) {
    out.encoder.insert(out.encoder.end(), tokens.begin() + pos,
                       tokens.begin() + pos + keep_lengths[s]);
    pos += keep_lengths[s];
    out.encoder.push_back(sentinel_id(s));
    out.target.push_back(sentinel_id(s));
    out.target.insert(out.target.end(), tokens.begin() + pos,
                      tokens.begin() + pos + noise_lengths[s]);
    pos += noise_lengths[s];
  }
  out.encoder.push_back(kEos);
  out.target.push_back(kEos);
  out.noise_tokens = noise;
  out.spans = spans;
  return out;
}

std::vector<int> reconstruct(const SpanCorruption& c) {
  std::vector<int> out;
  for (int id : c.encoder) {
    if (id == kEos) break;
    if (!is_sentinel(id)) {
      out.push_back(id);
      continue;
    }
    auto it = std::find(c.target.begin(), c.target.end(), id);
    if (it == c.target.end()) throw InputError("reconstruct: sentinel missing from target");
    for (++it; it != c.target.end() && *it != kEos && !is_sentinel(*it); ++it) {
      out.push_back(*it);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adafactor

Adafactor::Adafactor(std::vector<Tensor> parameters, AdafactorConfig config)
    : params_(std::move(parameters)), config_(config) {
  for (const Tensor& p : params_) {
    Slot s;
    const auto& shape = p.shape();
    s.factored = shape.size() == 2 && shape[0] > 1 && shape[1] > 1;
    if (s.factored) {
      s.row.assign(shape[0], 0.0);
      s.col.assign(shape[1], 0.0);
    } else {
      s.full.assign(p.numel(), 0.0);
    }
    slots_.push_back(std::move(s));
  }
}

double Adafactor::learning_rate(std::size_t step) const {
  const double t = static_cast<double>(std::max<std::size_t>(step, 1));
  const double w = static_cast<double>(std::max<std::size_t>(config_.warmup, 1));
  return config_.scale * std::min(1.0 / std::sqrt(t), t / std::pow(w, 1.5));
}

bool Adafactor::step() {
  bool finite = true;
  for (const Tensor& p : params_) {
    for (double g : p.grad()) finite = finite && std::isfinite(g);
  }
  if (!finite) {
    ++skipped_;
    for (Tensor& p : params_) p.zero_grad();
    return false;
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double beta2 = 1.0 - std::pow(t, -config_.decay_exponent);
  const double lr = learning_rate(steps_);

  std::vector<double> update;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    const auto grad = p.grad();
    if (grad.empty()) continue;
    Slot& s = slots_[i];
    update.assign(grad.size(), 0.0);
    if (s.factored) {
      const std::size_t rows = s.row.size(), cols = s.col.size();
      std::vector<double> row_mean(rows, 0.0), col_mean(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const double g2 = grad[r * cols + c] * grad[r * cols + c] + config_.eps1;
          row_mean[r] += g2 / static_cast<double>(cols);
          col_mean[c] += g2 / static_cast<double>(rows);
        }
      }
      for (std::size_t r = 0; r < rows; ++r) s.row[r] = beta2 * s.row[r] + (1 - beta2) * row_mean[r];
      for (std::size_t c = 0; c < cols; ++c) s.col[c] = beta2 * s.col[c] + (1 - beta2) * col_mean[c];
      const double row_avg =
          std::accumulate(s.row.begin(), s.row.end(), 0.0) / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const double v = s.row[r] * s.col[c] / row_avg;
          update[r * cols + c] = grad[r * cols + c] / std::sqrt(v);
        }
      }
    } else {
      for (std::size_t j = 0; j < grad.size(); ++j) {
        s.full[j] = beta2 * s.full[j] + (1 - beta2) * (grad[j] * grad[j] + config_.eps1);
        update[j] = grad[j] / std::sqrt(s.full[j]);
      }
    }
    double sq = 0.0;
    for (double u : update) sq += u * u;
    const double rms = std::sqrt(sq / static_cast<double>(update.size()));
    const double denom = std::max(1.0, rms / config_.clip_threshold);
    auto data = p.mutable_data();
    double step = lr;
    if (config_.scale_parameter) {
      double p2 = 0.0;
      for (double x : data) p2 += x * x;
      step *= std::max(config_.eps2, std::sqrt(p2 / static_cast<double>(data.size())));
    }
    for (std::size_t j = 0; j < update.size(); ++j) data[j] -= step * update[j] / denom;
    p.zero_grad();
  }
  return true;
}

// ---------------------------------------------------------------------------
// Training

Example make_example(std::vector<int> encoder, std::vector<int> target) {
  Example ex;
  ex.encoder = std::move(encoder);
  ex.decoder_in.push_back(kBos);
  ex.decoder_in.insert(ex.decoder_in.end(), target.begin(), target.end() - 1);
  ex.decoder_target = std::move(target);
  return ex;
}

namespace {

std::vector<int> token_stream(const std::vector<std::string>& docs, std::size_t begin,
                              std::size_t end) {
  std::vector<int> out;
  for (std::size_t i = begin; i < end; ++i) {
    const auto ids = tokenize(docs[i]);
    out.insert(out.end(), ids.begin(), ids.end());
    out.push_back(kEos);
  }
  return out;
}

struct CorpusSplit {
  std::vector<int> train;
  std::vector<int> valid;
};

CorpusSplit split_corpus(const std::vector<std::string>& docs) {
  if (docs.empty()) throw InputError("corpus is empty");
  CorpusSplit s;
  if (docs.size() == 1) {
    s.train = token_stream(docs, 0, 1);
    s.valid = s.train;
    return s;
  }
  const std::size_t valid_docs = std::max<std::size_t>(1, docs.size() / 10);
  s.train = token_stream(docs, 0, docs.size() - valid_docs);
  s.valid = token_stream(docs, docs.size() - valid_docs, docs.size());
  return s;
}

std::size_t window_length(const Model& model, std::size_t seq_len) {
  const ModelConfig& c = model.config();
  if (c.family == Family::kMixer) return std::min(seq_len, c.n_enc_fixed - 1);
  return seq_len;
}

Example sample_span_example(const std::vector<int>& stream, std::size_t window, double rate,
                            double mean_span, std::mt19937_64& rng) {
  const std::size_t len = std::min(window, stream.size());
  for (;;) {
    const std::size_t start =
        stream.size() > len ? static_cast<std::size_t>(rng() % (stream.size() - len + 1)) : 0;
    const std::span<const int> tokens(stream.data() + start, len);
    if (auto c = span_corrupt(tokens, rate, mean_span, rng)) {
      return make_example(std::move(c->encoder), std::move(c->target));
    }
  }
}

std::vector<Tensor> parameter_tensors(const Model& model) {
  std::vector<Tensor> out;
  for (const auto& p : model.parameters()) out.push_back(p.tensor);
  return out;
}

// Accumulates d(mean batch loss)/d(params); returns the mean loss.
double accumulate_batch(const Model& model, std::span<const Example> batch) {
  double total = 0.0;
  const double weight = 1.0 / static_cast<double>(batch.size());
  for (const Example& ex : batch) {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = model.loss(ex.encoder, ex.decoder_in, ex.decoder_target);
    total += loss.item();
    tape.backward(ops::scale(loss, weight));
  }
  return total * weight;
}

bool diverged(double loss) { return !std::isfinite(loss) || loss > kDivergenceLoss; }

}  // namespace

std::vector<Example> validation_set(const Model& model, const std::vector<std::string>& corpus,
                                    const PretrainOptions& options) {
  const CorpusSplit split = split_corpus(corpus);
  std::mt19937_64 rng(options.eval_seed);
  std::vector<Example> out;
  const std::size_t window = window_length(model, options.seq_len);
  for (std::size_t i = 0; i < options.eval_examples; ++i) {
    out.push_back(sample_span_example(split.valid, window, options.corrupt_rate,
                                      options.mean_span, rng));
  }
  return out;
}

double evaluate_loss(const Model& model, std::span<const Example> examples) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const Example& ex : examples) {
    const ForwardResult r = model.forward(ex.encoder, ex.decoder_in);
    const double ce = ops::cross_entropy(r.logits, ex.decoder_target).item();
    total += ce * static_cast<double>(ex.decoder_target.size());
    tokens += ex.decoder_target.size();
  }
  return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
}

RunRecord pretrain(const Model& model, const std::vector<std::string>& corpus,
                   const PretrainOptions& options, const std::string& size_label) {
  if (options.batch == 0) throw ConfigError("batch must be >= 1");
  const ModelConfig& config = model.config();
  const CostReport cost = count_flops(config);

  RunRecord record;
  record.family = std::string(family_id(config.family));
  record.size_label = size_label;
  record.seed = options.seed;
  record.params = cost.params_total;
  record.flops_forward = cost.flops_forward;
  record.flops_n_enc = cost.n_enc;
  record.flops_n_dec = cost.n_dec;
  record.run_id = record.family + "-" + size_label + "-s" + std::to_string(options.seed);

  const CorpusSplit split = split_corpus(corpus);
  const std::vector<Example> valid = validation_set(model, corpus, options);
  record.initial_loss = evaluate_loss(model, valid);

  std::mt19937_64 rng(options.seed * 0x9E3779B97F4A7C15ULL + 1);
  Adafactor optimizer(parameter_tensors(model), options.optimizer);
  const std::size_t window = window_length(model, options.seq_len);
  std::vector<Example> batch(options.batch);
  const auto start = std::chrono::steady_clock::now();
  double loss = record.initial_loss;
  std::size_t step = 0;
  for (; step < options.steps; ++step) {
    for (auto& ex : batch) {
      ex = sample_span_example(split.train, window, options.corrupt_rate, options.mean_span, rng);
    }
    loss = accumulate_batch(model, batch);
    if (diverged(loss)) {
      record.status = "diverged";
      break;
    }
    optimizer.step();
    if (options.log_every != 0 && options.on_log && (step + 1) % options.log_every == 0) {
      options.on_log(step + 1, loss);
    }
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  record.pretrain_steps = step;
  record.steps_per_sec = seconds > 0.0 ? static_cast<double>(step) / seconds : 0.0;
  record.final_train_loss = loss;
  record.skipped_steps = optimizer.skipped();
  record.upstream_neg_log_ppl = record.status == "ok" ? -evaluate_loss(model, valid) : -loss;
  return record;
}

Example task_example(std::string_view task, std::size_t payload_len, std::mt19937_64& rng) {
  if (payload_len == 0) throw ConfigError("payload length must be >= 1");
  std::string payload(payload_len, ' ');
  std::string target;
  if (task == "modsum") {
    int sum = 0;
    for (char& ch : payload) {
      const int digit = static_cast<int>(rng() % 10);
      ch = static_cast<char>('0' + digit);
      sum += digit;
    }
    target = std::string(1, static_cast<char>('0' + sum % 10));
  } else if (task == "copy" || task == "reverse") {
    for (char& ch : payload) ch = static_cast<char>('a' + rng() % 26);
    target = payload;
    if (task == "reverse") std::reverse(target.begin(), target.end());
  } else {
    throw ConfigError("unknown task '" + std::string(task) + "'");
  }
  std::vector<int> enc = tokenize(std::string(task) + ": " + payload);
  enc.push_back(kEos);
  std::vector<int> tgt = tokenize(target);
  tgt.push_back(kEos);
  return make_example(std::move(enc), std::move(tgt));
}

std::map<std::string, double> evaluate_downstream(const Model& model,
                                                  const FinetuneOptions& options) {
  std::map<std::string, double> out;
  std::mt19937_64 rng(options.eval_seed);
  for (std::string_view task : kTasks) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < options.eval_per_task; ++i) {
      const Example ex = task_example(task, options.payload_len, rng);
      const std::vector<int> want(ex.decoder_target.begin(), ex.decoder_target.end() - 1);
      const auto got = model.greedy_decode(ex.encoder, want.size() + 1, kBos, kEos);
      if (got == want) ++correct;
    }
    out[std::string(task)] = options.eval_per_task == 0
                                 ? 0.0
                                 : static_cast<double>(correct) /
                                       static_cast<double>(options.eval_per_task);
  }
  return out;
}

void finetune(const Model& model, RunRecord& record, const FinetuneOptions& options) {
  if (options.batch == 0) throw ConfigError("batch must be >= 1");
  std::mt19937_64 rng(options.seed * 0xD1B54A32D192ED03ULL + 7);
  Adafactor optimizer(parameter_tensors(model), options.optimizer);
  std::vector<Example> batch(options.batch);
  std::size_t step = 0;
  for (; step < options.steps; ++step) {
    for (auto& ex : batch) {
      ex = task_example(kTasks[rng() % std::size(kTasks)], options.payload_len, rng);
    }
    const double loss = accumulate_batch(model, batch);
    if (diverged(loss)) {
      record.status = "diverged";
      break;
    }
    optimizer.step();
    if (options.log_every != 0 && options.on_log && (step + 1) % options.log_every == 0) {
      options.on_log(step + 1, loss);
    }
  }
  record.finetune_steps = step;
  record.skipped_steps += optimizer.skipped();
  record.downstream = evaluate_downstream(model, options);
  double sum = 0.0;
  for (const auto& [_, acc] : record.downstream) sum += acc;
  record.downstream_mean = sum / static_cast<double>(record.downstream.size());
  record.has_downstream = true;
}

}  // namespace archscale::harness
