#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "archscale/cost_model.hpp"
#include "archscale/errors.hpp"
#include "archscale/harness.hpp"
#include "archscale/ladders.hpp"
#include "archscale/records.hpp"

using namespace archscale;
using namespace archscale::harness;

TEST_CASE("byte tokenizer") {
  const auto ids = tokenize("Hi!");
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == kByteOffset + 'H');
  CHECK(detokenize(ids) == "Hi!");
  CHECK(detokenize(tokenize("na\xc3\xafve")) == "na\xc3\xafve");
  for (std::size_t k = 0; k < kSentinelCount; ++k) {
    CHECK(is_sentinel(sentinel_id(k)));
    CHECK(sentinel_id(k) < int(kVocabSize));
  }
  CHECK_FALSE(is_sentinel(kByteOffset + 'a'));
  // A byte that collides with a sentinel id is replaced.
  const auto replaced = tokenize(std::string(1, char(0xFF)));
  CHECK(replaced[0] == kByteOffset + '?');
  const std::vector<int> with_sentinel = {kByteOffset + 'a', sentinel_id(0), kEos};
  CHECK(detokenize(with_sentinel) == "a<extra_id_0>");
}

TEST_CASE("span corruption statistics and inversion") {
  std::mt19937_64 rng(1);
  std::vector<int> tokens(200);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = kByteOffset + int('a' + i % 26);
  double noise = 0.0, spans = 0.0;
  const int trials = 2000;
  for (int t = 0; t < trials; ++t) {
    std::vector<int> seq(tokens.begin(), tokens.begin() + 20 + t % 100);
    const auto c = span_corrupt(seq, 0.15, 3.0, rng);
    REQUIRE(c.has_value());
    CHECK(reconstruct(*c) == seq);
    CHECK(c->encoder.back() == kEos);
    CHECK(c->target.back() == kEos);
    CHECK(c->noise_tokens == std::size_t(std::lround(seq.size() * 0.15)));
    noise += double(c->noise_tokens) / double(seq.size());
    spans += double(c->noise_tokens) / double(c->spans);
  }
  CHECK(noise / trials == doctest::Approx(0.15).epsilon(0.05));
  CHECK(spans / trials == doctest::Approx(3.0).epsilon(0.15));
  const std::vector<int> one = {5};
  CHECK_FALSE(span_corrupt(one, 0.15, 3.0, rng).has_value());
}

TEST_CASE("adafactor matches a scalar simulation") {
  AdafactorConfig cfg;
  cfg.warmup = 4;
  cfg.scale_parameter = false;
  Tensor w = Tensor::parameter({1, 1}, {0.5});
  Adafactor opt({w}, cfg);
  const double grads[] = {0.3, -0.1, 2.0, 0.05, -0.7};
  double v = 0.0, x = 0.5;
  for (std::size_t t = 1; t <= 5; ++t) {
    const double g = grads[t - 1];
    w.node()->grad = {g};
    REQUIRE(opt.step());
    const double beta2 = 1.0 - std::pow(double(t), -0.8);
    v = beta2 * v + (1 - beta2) * (g * g + 1e-30);
    double u = g / std::sqrt(v);
    u /= std::max(1.0, std::abs(u) / 1.0);
    const double lr = cfg.scale * std::min(1.0 / std::sqrt(double(t)), double(t) / std::pow(4.0, 1.5));
    x -= lr * u;
    CHECK(w.data()[0] == doctest::Approx(x).epsilon(1e-12));
  }
  CHECK(opt.steps() == 5);
}

TEST_CASE("adafactor factored moments are exact for rank-one squared gradients") {
  AdafactorConfig cfg;
  cfg.clip_threshold = 1e9;
  cfg.scale_parameter = false;
  Tensor w = Tensor::parameter({2, 3}, std::vector<double>(6, 0.0));
  Adafactor opt({w}, cfg);
  REQUIRE(opt.state()[0].factored);
  // g^2 = a_r * b_c, so the factored estimate reproduces it and the first
  // update is lr * sign(g).
  const double a[] = {1.0, 4.0}, b[] = {0.25, 1.0, 9.0};
  std::vector<double> g(6);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) g[r * 3 + c] = ((r + c) % 2 ? -1 : 1) * std::sqrt(a[r] * b[c]);
  w.node()->grad = g;
  REQUIRE(opt.step());
  const double lr = opt.learning_rate(1);
  for (int i = 0; i < 6; ++i) CHECK(w.data()[i] == doctest::Approx(-lr * (g[i] > 0 ? 1 : -1)));
}

TEST_CASE("adafactor steps scale with the parameter RMS") {
  // First step with an unfactored moment: |update| = 1 before clipping, so the
  // change is lr * max(eps2, rms(w)).
  for (double w0 : {3.0, 1e-5}) {
    Tensor w = Tensor::parameter({1, 1}, {w0});
    Adafactor opt({w});
    w.node()->grad = {0.2};
    REQUIRE(opt.step());
    const double expected = w0 - opt.learning_rate(1) * std::max(1e-3, w0);
    CHECK(w.data()[0] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("adafactor skips non-finite gradients") {
  Tensor w = Tensor::parameter({1, 2}, {1.0, 2.0});
  Adafactor opt({w});
  w.node()->grad = {NAN, 1.0};
  CHECK_FALSE(opt.step());
  CHECK(opt.skipped() == 1);
  CHECK(opt.steps() == 0);
  CHECK(w.data()[0] == 1.0);
  CHECK(w.grad()[1] == 0.0);
}

TEST_CASE("synthetic corpus is deterministic") {
  const auto a = synthetic_corpus(20, 3), b = synthetic_corpus(20, 3), c = synthetic_corpus(20, 4);
  CHECK(a == b);
  CHECK(a != c);
  for (const auto& doc : a) CHECK_FALSE(doc.empty());
}

TEST_CASE("corpus file reading skips blank lines") {
  const auto path = std::filesystem::temp_directory_path() / "archscale_corpus.txt";
  {
    std::ofstream out(path);
    out << "first doc\n\nsecond doc\n";
  }
  const auto docs = read_corpus(path);
  CHECK(docs == std::vector<std::string>{"first doc", "second doc"});
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_corpus(path), InputError);
}

TEST_CASE("task examples") {
  std::mt19937_64 rng(2);
  const auto ex = task_example("reverse", 5, rng);
  const std::string enc = detokenize(ex.encoder);
  REQUIRE(enc.rfind("reverse: ", 0) == 0);
  std::string payload = enc.substr(9);
  std::reverse(payload.begin(), payload.end());
  CHECK(detokenize(ex.decoder_target) == payload);
  CHECK(ex.decoder_in.front() == kBos);
  CHECK(ex.decoder_in.size() == ex.decoder_target.size());
  const auto sum = task_example("modsum", 4, rng);
  CHECK(sum.decoder_target.size() == 2);
  CHECK_THROWS_AS(task_example("sort", 4, rng), ConfigError);
}

TEST_CASE("pretraining is deterministic and records match the cost model") {
  const auto corpus = synthetic_corpus(60, 1);
  const ModelConfig cfg = desk_ladder(Family::kTransformer).front().config;
  PretrainOptions o;
  o.steps = 6;
  o.batch = 2;
  o.seq_len = 24;
  o.eval_examples = 4;
  o.seed = 3;
  const RunRecord a = pretrain(Model::build(cfg, 3), corpus, o, "tiny");
  const RunRecord b = pretrain(Model::build(cfg, 3), corpus, o, "tiny");
  CHECK(std::round(a.upstream_neg_log_ppl * 1e6) == std::round(b.upstream_neg_log_ppl * 1e6));
  CHECK(a.upstream_neg_log_ppl == b.upstream_neg_log_ppl);
  CHECK(a.pretrain_steps == 6);
  CHECK(std::abs(a.initial_loss / std::log(double(kVocabSize)) - 1) < 0.05);
  const CostReport cost = count_flops(cfg);
  CHECK(a.params == cost.params_total);
  CHECK(a.flops_forward == cost.flops_forward);
  CHECK(a.run_id == "transformer-tiny-s3");

  RunRecord ft = a;
  FinetuneOptions f;
  f.steps = 2;
  f.batch = 2;
  f.eval_per_task = 2;
  finetune(Model::build(cfg, 3), ft, f);
  CHECK(ft.has_downstream);
  CHECK(ft.downstream.size() == 3);
  CHECK(ft.downstream_mean >= 0.0);
  CHECK(ft.downstream_mean <= 1.0);
}

TEST_CASE("run records round trip through JSON Lines") {
  RunRecord r;
  r.run_id = "x-1";
  r.family = "glu";
  r.size_label = "small";
  r.params = 123;
  r.flops_forward = 456;
  r.upstream_neg_log_ppl = -1.25;
  r.downstream = {{"copy", 0.5}};
  r.downstream_mean = 0.5;
  r.has_downstream = true;
  const RunRecord back = record_from_json(to_json_line(r));
  CHECK(back.run_id == r.run_id);
  CHECK(back.params == 123);
  CHECK(back.upstream_neg_log_ppl == -1.25);
  CHECK(back.downstream == r.downstream);

  const auto path = std::filesystem::temp_directory_path() / "archscale_records.jsonl";
  std::filesystem::remove(path);
  append_record(path, r);
  append_record(path, r);
  CHECK(read_records(path).size() == 2);
  {
    std::ofstream out(path, std::ios::app);
    out << "{not json\n";
  }
  try {
    read_records(path);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find(":3") != std::string::npos);
  }
  std::filesystem::remove(path);
  CHECK_THROWS_AS(record_from_json("{\"schema_version\": 99}"), InputError);
}
