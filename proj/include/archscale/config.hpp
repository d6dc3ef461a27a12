#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

namespace archscale {

enum class Family {
  kTransformer,
  kEvolved,
  kUniversal,
  kSwitch,
  kPerformer,
  kFunnel,
  kAlbert,
  kMos,
  kGlu,
  kLconv,
  kDconv,
  kMixer,
};

inline constexpr std::array<Family, 12> kAllFamilies = {
    Family::kTransformer, Family::kEvolved, Family::kUniversal, Family::kSwitch,
    Family::kPerformer,   Family::kFunnel,  Family::kAlbert,    Family::kMos,
    Family::kGlu,         Family::kLconv,   Family::kDconv,     Family::kMixer,
};

// Short identifier used on the command line and in files ("transformer", "switch", ...).
std::string_view family_id(Family family);
// Name as printed in result tables ("Switch Transformer", "MLP-Mixer", ...).
std::string_view family_display_name(Family family);
// Accepts identifiers, display names and a few aliases, case-insensitively.
std::optional<Family> parse_family(std::string_view text);
Family family_from_string(std::string_view text);  // throws ConfigError

enum class Activation { kRelu, kGelu, kSilu };

std::string_view activation_id(Activation activation);

struct ModelConfig {
  Family family = Family::kTransformer;
  std::size_t n_layers_enc = 1;
  std::size_t n_layers_dec = 1;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t d_kv = 16;
  std::size_t n_heads = 4;
  std::size_t n_experts = 1;     // Switch
  std::size_t n_recurrence = 1;  // Universal: applications of the shared layer
  std::size_t k_mos = 4;         // MoS mixture components
  std::size_t vocab = 32128;
  bool share_enc_dec = false;    // ALBERT
  std::size_t embed_factor = 0;  // ALBERT factorised width E; 0 selects d_model / 2
  std::size_t n_enc_fixed = 0;   // Mixer encoder length
  std::size_t kernel_width = 7;  // LConv / DConv
  double capacity_factor = 1.25; // Switch
  Activation ffn_activation = Activation::kRelu;
  std::size_t relative_buckets = 32;

  std::size_t inner_dim() const { return n_heads * d_kv; }
  std::size_t albert_embed_width() const { return embed_factor != 0 ? embed_factor : d_model / 2; }
  // Hidden width of the Mixer token-mixing MLP.
  std::size_t token_mlp_dim() const { return d_model / 2 == 0 ? 1 : d_model / 2; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Throws ConfigError when a field is out of range or inconsistent with the family.
void validate(const ModelConfig& config);

// "key = value" lines; '#' starts a comment. Unknown keys are rejected.
std::string format_config(const ModelConfig& config);
ModelConfig parse_config(std::string_view text);

}  // namespace archscale
