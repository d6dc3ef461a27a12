#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include "archscale/config.hpp"

namespace archscale {

inline constexpr std::size_t kDefaultAccountingLength = 512;

struct CostReport {
  std::uint64_t params_total = 0;
  std::map<std::string, std::uint64_t> params_by_component;
  // FLOPs of one forward pass (2 x multiplies) producing logits for n_dec
  // decoder positions from n_enc encoder tokens.
  std::uint64_t flops_forward = 0;
  std::map<std::string, std::uint64_t> flops_by_component;
  std::size_t n_enc = 0;
  std::size_t n_dec = 0;
};

// Exact closed-form parameter count.
CostReport count_params(const ModelConfig& config);

// Parameters plus forward FLOPs. The Mixer encoder always runs at its fixed
// length, so n_enc is replaced by n_enc_fixed for that family.
CostReport count_flops(const ModelConfig& config, std::size_t n_enc = kDefaultAccountingLength,
                       std::size_t n_dec = kDefaultAccountingLength);

// Component name for a model parameter, as used in params_by_component.
std::string parameter_component(const std::string& parameter_name);

std::string to_json(const CostReport& report);
// "kind,component,value" rows (kind is params or flops), with a header line.
std::string to_csv(const CostReport& report);

}  // namespace archscale
