#include "archscale/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>
#include <string>

#include "archscale/errors.hpp"

namespace archscale {

namespace {

struct FamilyNames {
  Family family;
  std::string_view id;
  std::string_view display;
};

constexpr std::array<FamilyNames, 12> kNames = {{
    {Family::kTransformer, "transformer", "Transformer"},
    {Family::kEvolved, "evolved", "Evolved Transformer"},
    {Family::kUniversal, "universal", "Universal Transformer"},
    {Family::kSwitch, "switch", "Switch Transformer"},
    {Family::kPerformer, "performer", "Performer"},
    {Family::kFunnel, "funnel", "Funnel Transformer"},
    {Family::kAlbert, "albert", "ALBERT"},
    {Family::kMos, "mos", "MoS-Transformer"},
    {Family::kGlu, "glu", "GLU-Transformer"},
    {Family::kLconv, "lconv", "LConv"},
    {Family::kDconv, "dconv", "DConv"},
    {Family::kMixer, "mixer", "MLP-Mixer"},
}};

std::string normalise(std::string_view text) {
  std::string out;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::size_t parse_count(std::string_view key, std::string_view value) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("config: '" + std::string(key) + "' expects a non-negative integer, got '" +
                      std::string(value) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  const std::string v = normalise(value);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: '" + std::string(key) + "' expects true/false");
}

double parse_real(std::string_view key, std::string_view value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(value), &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + std::string(key) + "' expects a number");
  }
}

}  // namespace

std::string_view family_id(Family family) {
  for (const auto& n : kNames) {
    if (n.family == family) return n.id;
  }
  return "unknown";
}

std::string_view family_display_name(Family family) {
  for (const auto& n : kNames) {
    if (n.family == family) return n.display;
  }
  return "unknown";
}

std::optional<Family> parse_family(std::string_view text) {
  const std::string key = normalise(text);
  for (const auto& n : kNames) {
    if (key == normalise(n.id) || key == normalise(n.display)) return n.family;
  }
  if (key == "vanilla" || key == "t5") return Family::kTransformer;
  if (key == "et" || key == "evolvedtransformer") return Family::kEvolved;
  if (key == "ut") return Family::kUniversal;
  if (key == "moe" || key == "switchtransformer") return Family::kSwitch;
  if (key == "glutrans") return Family::kGlu;
  if (key == "mostrans") return Family::kMos;
  if (key == "mlpmixer") return Family::kMixer;
  return std::nullopt;
}

Family family_from_string(std::string_view text) {
  if (auto f = parse_family(text)) return *f;
  throw ConfigError("unknown model family '" + std::string(text) + "'");
}

std::string_view activation_id(Activation activation) {
  switch (activation) {
    case Activation::kRelu:
      return "relu";
    case Activation::kGelu:
      return "gelu";
    case Activation::kSilu:
      return "silu";
  }
  return "relu";
}

void validate(const ModelConfig& c) {
  auto fail = [&](const std::string& what) {
    throw ConfigError(std::string(family_id(c.family)) + " config: " + what);
  };
  if (c.n_layers_enc < 1 || c.n_layers_dec < 1) fail("layer counts must be >= 1");
  if (c.d_model < 1 || c.d_ff < 1 || c.d_kv < 1 || c.n_heads < 1) {
    fail("d_model, d_ff, d_kv and n_heads must be >= 1");
  }
  if (c.vocab < 2) fail("vocab must be >= 2");
  if (c.relative_buckets < 2) fail("relative_buckets must be >= 2");
  if (c.n_experts < 1 || c.n_recurrence < 1 || c.k_mos < 1) {
    fail("n_experts, n_recurrence and k_mos must be >= 1");
  }
  switch (c.family) {
    case Family::kSwitch:
      if (!(c.capacity_factor > 0.0)) fail("capacity_factor must be positive");
      break;
    case Family::kUniversal:
      if (c.n_layers_enc != 1 || c.n_layers_dec != 1) {
        fail("a Universal Transformer has one shared layer per stack; use n_recurrence for depth");
      }
      break;
    case Family::kAlbert:
      if (c.albert_embed_width() < 1) fail("embed_factor must be >= 1");
      break;
    case Family::kMixer:
      if (c.n_enc_fixed < 1) fail("n_enc_fixed must be >= 1");
      break;
    case Family::kLconv:
    case Family::kDconv:
      if (c.d_model % c.n_heads != 0) fail("d_model must be divisible by the kernel group count");
      if (c.kernel_width < 1) fail("kernel_width must be >= 1");
      break;
    case Family::kEvolved:
      if (c.d_model % 2 != 0) fail("d_model must be even");
      break;
    default:
      break;
  }
  if (c.family != Family::kSwitch && c.n_experts != 1) fail("n_experts applies to switch only");
  if (c.family != Family::kUniversal && c.n_recurrence != 1) {
    fail("n_recurrence applies to universal only");
  }
  if (c.family != Family::kAlbert && c.share_enc_dec) fail("share_enc_dec applies to albert only");
}

std::string format_config(const ModelConfig& c) {
  std::ostringstream out;
  out << "family = " << family_id(c.family) << "\n"
      << "n_layers_enc = " << c.n_layers_enc << "\n"
      << "n_layers_dec = " << c.n_layers_dec << "\n"
      << "d_model = " << c.d_model << "\n"
      << "d_ff = " << c.d_ff << "\n"
      << "d_kv = " << c.d_kv << "\n"
      << "n_heads = " << c.n_heads << "\n"
      << "n_experts = " << c.n_experts << "\n"
      << "n_recurrence = " << c.n_recurrence << "\n"
      << "k_mos = " << c.k_mos << "\n"
      << "vocab = " << c.vocab << "\n"
      << "share_enc_dec = " << (c.share_enc_dec ? "true" : "false") << "\n"
      << "embed_factor = " << c.embed_factor << "\n"
      << "n_enc_fixed = " << c.n_enc_fixed << "\n"
      << "kernel_width = " << c.kernel_width << "\n"
      << "capacity_factor = " << c.capacity_factor << "\n"
      << "ffn_activation = " << activation_id(c.ffn_activation) << "\n"
      << "relative_buckets = " << c.relative_buckets << "\n";
  return out.str();
}

ModelConfig parse_config(std::string_view text) {
  ModelConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = line;
    if (auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string_view key = trim(view.substr(0, eq));
    const std::string_view value = trim(view.substr(eq + 1));
    if (key == "family") {
      c.family = family_from_string(value);
    } else if (key == "n_layers_enc") {
      c.n_layers_enc = parse_count(key, value);
    } else if (key == "n_layers_dec") {
      c.n_layers_dec = parse_count(key, value);
    } else if (key == "d_model") {
      c.d_model = parse_count(key, value);
    } else if (key == "d_ff") {
      c.d_ff = parse_count(key, value);
    } else if (key == "d_kv") {
      c.d_kv = parse_count(key, value);
    } else if (key == "n_heads") {
      c.n_heads = parse_count(key, value);
    } else if (key == "n_experts") {
      c.n_experts = parse_count(key, value);
    } else if (key == "n_recurrence") {
      c.n_recurrence = parse_count(key, value);
    } else if (key == "k_mos") {
      c.k_mos = parse_count(key, value);
    } else if (key == "vocab") {
      c.vocab = parse_count(key, value);
    } else if (key == "share_enc_dec") {
      c.share_enc_dec = parse_bool(key, value);
    } else if (key == "embed_factor") {
      c.embed_factor = parse_count(key, value);
    } else if (key == "n_enc_fixed") {
      c.n_enc_fixed = parse_count(key, value);
    } else if (key == "kernel_width") {
      c.kernel_width = parse_count(key, value);
    } else if (key == "capacity_factor") {
      c.capacity_factor = parse_real(key, value);
    } else if (key == "ffn_activation") {
      const std::string v = normalise(value);
      if (v == "relu") {
        c.ffn_activation = Activation::kRelu;
      } else if (v == "gelu") {
        c.ffn_activation = Activation::kGelu;
      } else if (v == "silu" || v == "swish") {
        c.ffn_activation = Activation::kSilu;
      } else {
        throw ConfigError("config: unknown ffn_activation '" + std::string(value) + "'");
      }
    } else if (key == "relative_buckets") {
      c.relative_buckets = parse_count(key, value);
    } else {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" +
                        std::string(key) + "'");
    }
  }
  return c;
}

}  // namespace archscale
