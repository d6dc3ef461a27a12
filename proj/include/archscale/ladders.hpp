#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "archscale/config.hpp"

namespace archscale {

struct LadderEntry {
  std::string label;  // "tiny", "small", "base", "large", "xl", or "step<k>"
  ModelConfig config;
};

enum class Protocol { kUniform, kDepth, kWidth };

std::string_view protocol_id(Protocol protocol);
Protocol parse_protocol(std::string_view text);  // throws ConfigError

// Sizes at which a family is reported, with the published hyperparameters.
std::vector<LadderEntry> standard_ladder(Family family);

// Doubling ladders from a base config. Depth doubles the layer count (the
// recurrence count for the Universal Transformer), width doubles d_ff, uniform
// doubles d_model, d_ff and the head count together. steps >= 2 configs.
std::vector<LadderEntry> protocol_ladder(const ModelConfig& base, Protocol protocol,
                                         std::size_t steps);

// Three byte-vocabulary sizes (about 0.15M, 0.8M and 3M parameters for the
// vanilla family) that train in minutes on one core.
std::vector<LadderEntry> desk_ladder(Family family);

inline constexpr std::size_t kByteVocab = 259;
inline constexpr std::size_t kDeskMixerLength = 128;
inline constexpr std::size_t kStandardMixerLength = 512;

// Case-insensitive label lookup; throws ConfigError listing the valid labels.
const LadderEntry& find_size(const std::vector<LadderEntry>& ladder, std::string_view label);

}  // namespace archscale
