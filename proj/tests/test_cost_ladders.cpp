#include <doctest.h>

#include <cmath>

#include "archscale/config.hpp"
#include "archscale/cost_model.hpp"
#include "archscale/errors.hpp"
#include "archscale/ladders.hpp"
#include "archscale/model.hpp"
#include "checks.hpp"

using namespace archscale;

TEST_CASE("closed-form costs equal the instrumented forward pass") {
  for (Family f : kAllFamilies) {
    CAPTURE(family_id(f));
    for (auto [ne, nd] : {std::pair<std::size_t, std::size_t>{5, 6}, {8, 8}, {3, 1}}) {
      const auto r = checks::cost_exactness(tiny_config(f), ne, nd);
      CHECK_MESSAGE(r.ok, r.detail);
    }
  }
}

TEST_CASE("vanilla standard ladder parameter counts") {
  // Independent closed form for the T5-style vanilla model: shared tied
  // embedding, q/k/v/o per attention, two FFN matrices, scale-only norms, one
  // relative bias table per stack.
  const auto oracle = [](std::size_t L, std::size_t dff, std::size_t d, std::size_t dkv,
                         std::size_t h) {
    const double inner = double(dkv * h);
    const double attn = 4.0 * d * inner, ffn = 2.0 * d * dff;
    const double enc = L * (attn + ffn + 2.0 * d) + d;
    const double dec = L * (2 * attn + ffn + 3.0 * d) + d;
    return 32128.0 * d + enc + dec + 2.0 * 32 * h;
  };
  const auto ladder = standard_ladder(Family::kTransformer);
  REQUIRE(ladder.size() == 5);
  const double expected[] = {oracle(4, 1024, 256, 32, 4), oracle(6, 2048, 512, 32, 8),
                             oracle(12, 3072, 768, 64, 12), oracle(24, 4096, 1024, 64, 16),
                             oracle(24, 16384, 1024, 128, 32)};
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(double(count_params(ladder[i].config).params_total) == expected[i]);
  CHECK(std::abs(count_params(ladder[2].config).params_total / 223e6 - 1) < 0.005);
}

TEST_CASE("switch costs: many more parameters, similar FLOPs") {
  const auto sw = find_size(standard_ladder(Family::kSwitch), "base").config;
  const auto tr = find_size(standard_ladder(Family::kTransformer), "base").config;
  const auto a = count_flops(sw), b = count_flops(tr);
  const double ratio = double(a.flops_forward) / double(b.flops_forward);
  CHECK(ratio >= 1.0);
  CHECK(ratio <= 1.3);
  CHECK(double(a.params_total) / double(b.params_total) > 8.0);
  CHECK(std::abs(a.params_total / 2.0e9 - 1) < 0.10);
}

TEST_CASE("cost report serialisation") {
  const auto r = count_flops(tiny_config(Family::kMos), 4, 4);
  const std::string json = to_json(r);
  CHECK(json.find("\"params_total\"") != std::string::npos);
  const std::string csv = to_csv(r);
  CHECK(csv.rfind("kind,component,value\n", 0) == 0);
  CHECK(csv.find("params,output,") != std::string::npos);
  CHECK(csv.find("flops,output,") != std::string::npos);
}

TEST_CASE("ladders") {
  std::size_t rows = 0;
  for (Family f : kAllFamilies) {
    const auto standard = standard_ladder(f);
    rows += standard.size();
    for (const auto& e : standard) CHECK_NOTHROW(validate(e.config));
    const auto desk = desk_ladder(f);
    REQUIRE(desk.size() == 3);
    for (std::size_t i = 1; i < desk.size(); ++i)
      CHECK(count_params(desk[i].config).params_total >
            count_params(desk[i - 1].config).params_total);
  }
  CHECK(rows == 54);
  CHECK(standard_ladder(Family::kAlbert).front().label == "small");
  CHECK(standard_ladder(Family::kMixer).front().label == "small");
  CHECK(standard_ladder(Family::kPerformer).back().label == "large");
  CHECK_THROWS_AS(find_size(standard_ladder(Family::kAlbert), "tiny"), ConfigError);
  CHECK(find_size(desk_ladder(Family::kGlu), "BASE").label == "base");
}

TEST_CASE("protocol ladders double the chosen axis") {
  const ModelConfig base = desk_ladder(Family::kTransformer).front().config;
  const auto depth = protocol_ladder(base, Protocol::kDepth, 3);
  CHECK(depth[2].config.n_layers_enc == 4 * base.n_layers_enc);
  CHECK(depth[2].config.d_model == base.d_model);
  const auto width = protocol_ladder(base, Protocol::kWidth, 3);
  CHECK(width[1].config.d_ff == 2 * base.d_ff);
  CHECK(width[1].config.n_layers_dec == base.n_layers_dec);
  const auto uniform = protocol_ladder(base, Protocol::kUniform, 2);
  CHECK(uniform[1].config.d_model == 2 * base.d_model);
  CHECK(uniform[1].config.n_heads == 2 * base.n_heads);
  const auto ut = protocol_ladder(desk_ladder(Family::kUniversal).front().config,
                                  Protocol::kDepth, 3);
  CHECK(ut[2].config.n_recurrence == 4 * ut[0].config.n_recurrence);
  CHECK(count_params(ut[2].config).params_total == count_params(ut[0].config).params_total);
  CHECK_THROWS_AS(protocol_ladder(base, Protocol::kDepth, 1), ConfigError);
  CHECK(parse_protocol("width") == Protocol::kWidth);
  CHECK_THROWS_AS(parse_protocol("sideways"), ConfigError);
}

TEST_CASE("config text round trip and rejection") {
  for (Family f : kAllFamilies) {
    const auto c = desk_ladder(f).back().config;
    CHECK(parse_config(format_config(c)) == c);
  }
  CHECK_THROWS_AS(parse_config("colour = blue\n"), ConfigError);
  CHECK_THROWS_AS(family_from_string("bogus"), ConfigError);
  CHECK(family_from_string("Transformer") == Family::kTransformer);
}

TEST_CASE("attention cost grows linearly for performer, quadratically for vanilla") {
  const double p = double(checks::attention_block_multiplies(true, 256, 48, 4, 12)) /
                   double(checks::attention_block_multiplies(true, 128, 48, 4, 12));
  const double v = double(checks::attention_block_multiplies(false, 256, 48, 4, 12)) /
                   double(checks::attention_block_multiplies(false, 128, 48, 4, 12));
  CHECK(p == doctest::Approx(2.0).epsilon(0.05));
  CHECK(v >= 3.0);
}
