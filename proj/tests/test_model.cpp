#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "archscale/errors.hpp"
#include "archscale/ladders.hpp"
#include "archscale/layers.hpp"
#include "archscale/model.hpp"
#include "archscale/ops.hpp"
#include "checks.hpp"

using namespace archscale;

TEST_CASE("every family passes the gradient check at the tiny config") {
  for (Family f : kAllFamilies) {
    CAPTURE(family_id(f));
    const auto r = gradcheck(Model::build(tiny_config(f), 7));
    CHECK(r.checked > 0);
    CHECK(r.passed());
  }
}

TEST_CASE("decoder is causal for every family") {
  for (Family f : kAllFamilies) {
    CAPTURE(family_id(f));
    const auto r = checks::causality(tiny_config(f), 6, 3);
    CHECK_MESSAGE(r.ok, r.detail);
  }
}

TEST_CASE("reduction identities hold bitwise") {
  CHECK(checks::glu_unit_gate_equals_ffn(1).ok);
  CHECK(checks::mos_single_component_equals_softmax(1).ok);
  CHECK(checks::switch_single_expert_equals_dense(1).ok);
  CHECK(checks::universal_params_constant_in_recurrence().ok);
  CHECK(checks::albert_params_constant_in_layers().ok);
}

TEST_CASE("step-0 loss is close to uniform at desk sizes") {
  for (Family f : kAllFamilies) {
    CAPTURE(family_id(f));
    const ModelConfig c = desk_ladder(f).front().config;
    const Model m = Model::build(c, 2);
    const auto enc = checks::ids(8, c.vocab, 1), dec = checks::ids(7, c.vocab, 2);
    const double loss = m.loss(enc, dec, dec).item();
    CHECK(std::abs(loss / std::log(double(c.vocab)) - 1.0) < 0.05);
  }
}

TEST_CASE("build is deterministic in the seed") {
  const auto c = tiny_config(Family::kEvolved);
  const auto a = Model::build(c, 5), b = Model::build(c, 5), d = Model::build(c, 6);
  const auto enc = checks::ids(5, c.vocab, 1), dec = checks::ids(4, c.vocab, 2);
  CHECK(checks::bitwise_equal(a.forward(enc, dec).logits, b.forward(enc, dec).logits));
  CHECK_FALSE(checks::bitwise_equal(a.forward(enc, dec).logits, d.forward(enc, dec).logits));
}

TEST_CASE("checkpoint round trip preserves outputs") {
  const auto path = std::filesystem::temp_directory_path() / "archscale_unit_ckpt.bin";
  for (Family f : {Family::kSwitch, Family::kAlbert, Family::kMixer, Family::kMos}) {
    CAPTURE(family_id(f));
    const auto c = tiny_config(f);
    const Model m = Model::build(c, 3);
    m.save(path);
    const Model back = Model::load(path);
    CHECK(back.config() == c);
    const auto enc = checks::ids(6, c.vocab, 1), dec = checks::ids(5, c.vocab, 2);
    CHECK(checks::bitwise_equal(m.forward(enc, dec).logits, back.forward(enc, dec).logits));
  }
  {
    std::ofstream junk(path, std::ios::binary);
    junk << "not a checkpoint";
  }
  CHECK_THROWS_AS(Model::load(path), InputError);
  std::filesystem::remove(path);
}

TEST_CASE("input validation") {
  const auto c = tiny_config(Family::kTransformer);
  const Model m = Model::build(c, 1);
  const std::vector<int> bad = {3, 99};
  const std::vector<int> ok = {3, 4};
  CHECK_THROWS_AS(m.forward(bad, ok), InputError);
  const Model mixer = Model::build(tiny_config(Family::kMixer), 1);
  CHECK_THROWS_AS(mixer.forward(checks::ids(9, 37, 1), ok), InputError);
  CHECK_NOTHROW(mixer.forward(checks::ids(8, 37, 1), ok));
  ModelConfig broken = c;
  broken.d_model = 0;
  CHECK_THROWS_AS(Model::build(broken, 0), ConfigError);
  CHECK_THROWS_AS(m.parameter("no.such.parameter"), InputError);
}

TEST_CASE("switch routing respects capacity") {
  layers::ParamBuilder pb(4);
  const auto p = layers::make_moe(pb, "moe", 8, 16, 4);
  const Tensor x = pb.normal("x", {10, 8}, 1.0);
  const auto out = layers::moe_ffn(x, p, 1.0);
  CHECK(out.capacity == 3);
  std::size_t kept = 0;
  for (std::size_t e = 0; e < 4; ++e) kept += std::min(out.tokens_per_expert[e], out.capacity);
  std::size_t not_dropped = 0;
  for (bool d : out.dropped) not_dropped += d ? 0 : 1;
  CHECK(kept == not_dropped);
  for (std::size_t t = 0; t < 10; ++t) {
    if (!out.dropped[t]) continue;
    for (std::size_t j = 0; j < 8; ++j) CHECK(out.output.at(t, j) == 0.0);
  }
  // Balanced routing gives an auxiliary loss of about 1; it is never below 0.
  CHECK(out.aux_loss.item() > 0.0);
  CHECK(layers::expert_capacity(10, 4, 1.25) == 4);
  CHECK(layers::expert_capacity(1, 8, 1.0) == 1);
}

TEST_CASE("greedy decoding stops at the stop token or max length") {
  const auto c = tiny_config(Family::kTransformer);
  const Model m = Model::build(c, 1);
  const auto out = m.greedy_decode(checks::ids(5, c.vocab, 1), 6, 2, 1);
  CHECK(out.size() <= 6);
}
