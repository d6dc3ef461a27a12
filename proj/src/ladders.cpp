#include "archscale/ladders.hpp"

#include <algorithm>
#include <cctype>

#include "archscale/errors.hpp"

namespace archscale {

namespace {

struct Geometry {
  const char* label;
  std::size_t layers, d_ff, d_model, d_kv, heads;
};

constexpr Geometry kVanilla[] = {
    {"tiny", 4, 1024, 256, 32, 4},     {"small", 6, 2048, 512, 32, 8},
    {"base", 12, 3072, 768, 64, 12},   {"large", 24, 4096, 1024, 64, 16},
    {"xl", 24, 16384, 1024, 128, 32},
};

struct SwitchGeometry {
  Geometry g;
  std::size_t experts;
};

constexpr SwitchGeometry kSwitch[] = {
    {{"tiny", 4, 1024, 512, 64, 12}, 32},  {{"small", 6, 2048, 512, 64, 12}, 32},
    {{"base", 12, 3072, 768, 64, 12}, 32}, {{"large", 24, 3072, 768, 64, 12}, 32},
    {{"xl", 48, 3072, 768, 64, 12}, 128},
};

constexpr Geometry kUniversal[] = {
    {"tiny", 3, 1024, 128, 32, 8},
    {"small", 3, 2048, 512, 32, 8},
    {"base", 3, 3072, 768, 64, 12},
    {"large", 3, 32768, 1024, 64, 16},
};

constexpr Geometry kDesk[] = {
    {"tiny", 2, 192, 48, 12, 4},
    {"small", 3, 384, 96, 16, 6},
    {"base", 4, 640, 160, 32, 5},
};

constexpr std::size_t kDeskExperts = 4;

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

ModelConfig from_geometry(Family family, const Geometry& g, std::size_t vocab) {
  ModelConfig c;
  c.family = family;
  c.n_layers_enc = g.layers;
  c.n_layers_dec = g.layers;
  c.d_model = g.d_model;
  c.d_ff = g.d_ff;
  c.d_kv = g.d_kv;
  c.n_heads = g.heads;
  c.vocab = vocab;
  if (family == Family::kUniversal) {
    c.n_layers_enc = 1;
    c.n_layers_dec = 1;
    c.n_recurrence = g.layers;
  }
  if (family == Family::kAlbert) c.share_enc_dec = true;
  return c;
}

// Sizes present in the published results for families on the vanilla geometry.
std::vector<std::string_view> reported_sizes(Family family) {
  switch (family) {
    case Family::kPerformer:
    case Family::kDconv:
      return {"tiny", "small", "base", "large"};
    case Family::kAlbert:
      return {"small", "base", "large"};
    case Family::kMixer:
      return {"small", "base", "large", "xl"};
    default:
      return {"tiny", "small", "base", "large", "xl"};
  }
}

}  // namespace

std::string_view protocol_id(Protocol protocol) {
  switch (protocol) {
    case Protocol::kUniform:
      return "uniform";
    case Protocol::kDepth:
      return "depth";
    case Protocol::kWidth:
      return "width";
  }
  return "uniform";
}

Protocol parse_protocol(std::string_view text) {
  const std::string t = lower(text);
  if (t == "uniform") return Protocol::kUniform;
  if (t == "depth") return Protocol::kDepth;
  if (t == "width") return Protocol::kWidth;
  throw ConfigError("unknown scaling protocol '" + std::string(text) +
                    "' (expected uniform, depth or width)");
}

std::vector<LadderEntry> standard_ladder(Family family) {
  std::vector<LadderEntry> out;
  if (family == Family::kSwitch) {
    for (const auto& s : kSwitch) {
      ModelConfig c = from_geometry(family, s.g, 32128);
      c.n_experts = s.experts;
      out.push_back({s.g.label, c});
    }
    return out;
  }
  if (family == Family::kUniversal) {
    for (const auto& g : kUniversal) out.push_back({g.label, from_geometry(family, g, 32128)});
    return out;
  }
  const auto sizes = reported_sizes(family);
  for (const auto& g : kVanilla) {
    if (std::find(sizes.begin(), sizes.end(), g.label) == sizes.end()) continue;
    ModelConfig c = from_geometry(family, g, 32128);
    if (family == Family::kMixer) c.n_enc_fixed = kStandardMixerLength;
    out.push_back({g.label, c});
  }
  return out;
}

std::vector<LadderEntry> protocol_ladder(const ModelConfig& base, Protocol protocol,
                                         std::size_t steps) {
  if (steps < 2) throw ConfigError("protocol ladder needs at least 2 steps");
  validate(base);
  std::vector<LadderEntry> out;
  ModelConfig c = base;
  for (std::size_t k = 0; k < steps; ++k) {
    out.push_back({"step" + std::to_string(k), c});
    switch (protocol) {
      case Protocol::kDepth:
        if (c.family == Family::kUniversal) {
          c.n_recurrence *= 2;
        } else {
          c.n_layers_enc *= 2;
          c.n_layers_dec *= 2;
        }
        break;
      case Protocol::kWidth:
        c.d_ff *= 2;
        break;
      case Protocol::kUniform:
        c.d_model *= 2;
        c.d_ff *= 2;
        c.n_heads *= 2;
        break;
    }
  }
  return out;
}

std::vector<LadderEntry> desk_ladder(Family family) {
  std::vector<LadderEntry> out;
  for (const auto& g : kDesk) {
    ModelConfig c = from_geometry(family, g, kByteVocab);
    if (family == Family::kSwitch) c.n_experts = kDeskExperts;
    if (family == Family::kMixer) c.n_enc_fixed = kDeskMixerLength;
    out.push_back({g.label, c});
  }
  return out;
}

const LadderEntry& find_size(const std::vector<LadderEntry>& ladder, std::string_view label) {
  const std::string want = lower(label);
  std::string valid;
  for (const auto& e : ladder) {
    if (e.label == want) return e;
    valid += (valid.empty() ? "" : ", ") + e.label;
  }
  throw ConfigError("size '" + std::string(label) + "' not in ladder (valid: " + valid + ")");
}

}  // namespace archscale
