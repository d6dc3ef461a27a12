#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "archscale/config.hpp"
#include "archscale/model.hpp"

// Property checks shared by the unit suites and the acceptance runner.
namespace archscale::checks {

struct Result {
  bool ok = true;
  std::string detail;
};

// Deterministic ids in [3, vocab) for inputs of the given length.
std::vector<int> ids(std::size_t n, std::size_t vocab, std::uint64_t seed);

// Forward pass under an instrumented tape against count_flops / count_params.
Result cost_exactness(const ModelConfig& config, std::size_t n_enc, std::size_t n_dec);

// Perturbs every decoder position in turn; logits of earlier positions must be
// bitwise unchanged and the perturbed position's own row must change.
Result causality(const ModelConfig& config, std::size_t n, std::uint64_t seed);

// Multiplies of one self-attention block (projections included) at length n.
std::uint64_t attention_block_multiplies(bool performer, std::size_t n, std::size_t d_model,
                                         std::size_t heads, std::size_t d_kv);

// Exact reductions between families at the tiny config.
Result glu_unit_gate_equals_ffn(std::uint64_t seed);
Result mos_single_component_equals_softmax(std::uint64_t seed);
Result switch_single_expert_equals_dense(std::uint64_t seed);
Result universal_params_constant_in_recurrence();
Result albert_params_constant_in_layers();

bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace archscale::checks
