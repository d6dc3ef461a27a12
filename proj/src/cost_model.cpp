#include "archscale/cost_model.hpp"

#include <json.hpp>
#include <sstream>

#include "archscale/layers.hpp"
#include "archscale/model.hpp"
#include "archscale/op_costs.hpp"

namespace archscale {

namespace {

using u64 = std::uint64_t;
namespace oc = op_costs;

u64 activation_cost(Activation a) {
  switch (a) {
    case Activation::kRelu:
      return oc::kRelu;
    case Activation::kGelu:
      return oc::kGelu;
    case Activation::kSilu:
      return oc::kSilu;
  }
  return oc::kRelu;
}

bool has_encoder_bias(Family f) {
  return f != Family::kPerformer && f != Family::kLconv && f != Family::kDconv &&
         f != Family::kMixer;
}

bool has_decoder_bias(Family f) {
  return f != Family::kPerformer && f != Family::kLconv && f != Family::kDconv;
}

// ---------------------------------------------------------------------------
// Parameters

struct ParamCounter {
  const ModelConfig& c;
  u64 d, hd, dff;

  explicit ParamCounter(const ModelConfig& cfg)
      : c(cfg), d(cfg.d_model), hd(cfg.inner_dim()), dff(cfg.d_ff) {}

  u64 attention() const { return 4 * d * hd; }
  u64 ffn() const { return 2 * d * dff; }
  u64 glu() const { return 3 * d * dff; }
  u64 moe() const { return d * c.n_experts + c.n_experts * ffn(); }
  u64 ffn_variant(bool moe_layer) const {
    if (moe_layer) return moe();
    return c.family == Family::kGlu ? glu() : ffn();
  }
  u64 conv() const {
    const u64 w = c.kernel_width, g = c.n_heads;
    const u64 kernel = c.family == Family::kDconv ? d * g * w : w * g;
    return 2 * d * d + kernel + d * d;
  }
  u64 enc_layer(std::size_t i) const {
    switch (c.family) {
      case Family::kLconv:
      case Family::kDconv:
        return d + conv() + d + ffn();
      case Family::kMixer: {
        const u64 n = c.n_enc_fixed, s = c.token_mlp_dim();
        return d + s * n + s + n * s + n + d + d * dff + dff + dff * d + d;
      }
      case Family::kEvolved:
        return d + 2 * d * d + d + 4 * d * d + 3 * d * (d / 2) + 4 * d +
               layers::kEvolvedEncoderSepWidth * 4 * d + 4 * d * (d / 2) + d + attention() + d +
               ffn();
      default:
        return 2 * d + attention() + ffn_variant(c.family == Family::kSwitch && i % 2 == 1);
    }
  }
  u64 dec_layer(std::size_t i) const {
    switch (c.family) {
      case Family::kLconv:
      case Family::kDconv:
        return d + conv() + d + attention() + d + ffn();
      case Family::kEvolved:
        return d + 2 * attention() + d + layers::kEvolvedDecoderLeftWidth * d + 4 * d * d +
               layers::kEvolvedDecoderRightWidth * d + d * (d / 2) + 4 * d +
               layers::kEvolvedDecoderSepWidth * 4 * d + 4 * d * d + d + attention() + d +
               attention() + d + ffn();
      default:
        return 3 * d + 2 * attention() +
               ffn_variant(c.family == Family::kSwitch && i % 2 == 1);
    }
  }
};

void fill_params(const ModelConfig& c, CostReport& r) {
  const ParamCounter pc(c);
  const u64 d = c.d_model, v = c.vocab;
  const bool albert_shared = c.family == Family::kAlbert && c.share_enc_dec;
  const bool shared_stack = c.family == Family::kUniversal || c.family == Family::kAlbert;
  auto& m = r.params_by_component;

  if (c.family == Family::kAlbert) {
    const u64 e = c.albert_embed_width();
    m["embedding"] = v * e + e * d;
  } else {
    m["embedding"] = v * d;
  }
  const u64 table = static_cast<u64>(c.relative_buckets) * c.n_heads;
  u64 tables = 0;
  if (albert_shared) {
    tables = table;
  } else {
    if (has_encoder_bias(c.family)) tables += table;
    if (has_decoder_bias(c.family)) tables += table;
  }
  if (tables != 0) m["relative_bias"] = tables;

  const std::size_t enc_built = shared_stack ? 1 : c.n_layers_enc;
  u64 enc = 0;
  for (std::size_t i = 0; i < enc_built; ++i) enc += pc.enc_layer(i);
  m["encoder"] = enc;

  u64 dec = 0;
  if (albert_shared) {
    dec = d + pc.attention();  // cross-attention and its norm
  } else {
    const std::size_t dec_built = shared_stack ? 1 : c.n_layers_dec;
    for (std::size_t i = 0; i < dec_built; ++i) dec += pc.dec_layer(i);
  }
  m["decoder"] = dec;
  m["final_norm"] = albert_shared ? d : 2 * d;
  if (c.family == Family::kMos) m["output"] = d * c.k_mos + c.k_mos * d * d + v * d;

  r.params_total = 0;
  for (const auto& [_, count] : m) r.params_total += count;
}

// ---------------------------------------------------------------------------
// Forward multiplies

struct FlopCounter {
  const ModelConfig& c;
  std::map<std::string, u64>& out;
  u64 d, hd, dff, heads, dkv;

  FlopCounter(const ModelConfig& cfg, std::map<std::string, u64>& sink)
      : c(cfg), out(sink), d(cfg.d_model), hd(cfg.inner_dim()), dff(cfg.d_ff),
        heads(cfg.n_heads), dkv(cfg.d_kv) {}

  void charge(std::string_view key, u64 mults) {
    if (mults != 0) out[std::string(key)] += mults;
  }

  u64 rms(u64 n, u64 width) const { return oc::kRmsNorm * n * width; }

  u64 rel_attention(u64 nq, u64 nk) const {
    const u64 proj = nq * d * hd + 2 * nk * d * hd + nq * hd * d;
    const u64 per_head = nq * nk * dkv + oc::kMul * nq * nk + oc::kSoftmax * nq * nk +
                         nq * nk * dkv;
    return proj + heads * per_head;
  }
  u64 performer(u64 nq, u64 nk) const {
    const u64 proj = nq * d * hd + 2 * nk * d * hd + nq * hd * d;
    const u64 per_head = nk * dkv * dkv + nq * (dkv * dkv + 2 * dkv);
    return proj + heads * per_head;
  }
  u64 attention(u64 nq, u64 nk) const {
    return c.family == Family::kPerformer ? performer(nq, nk) : rel_attention(nq, nk);
  }
  u64 ffn(u64 n, Activation act) const {
    return n * d * dff + activation_cost(act) * n * dff + n * dff * d;
  }
  u64 glu(u64 n) const {
    return 2 * n * d * dff + oc::kGelu * n * dff + oc::kMul * n * dff + n * dff * d;
  }
  u64 moe(u64 n) const {
    const u64 e = c.n_experts;
    const u64 cap = layers::expert_capacity(n, e, c.capacity_factor);
    return n * d * e + oc::kSoftmax * n * e + e * ffn(cap, Activation::kRelu) +
           oc::kMul * n * d + oc::kMeanRows * e + oc::kMul * e;
  }
  u64 ffn_variant(u64 n, bool moe_layer) const {
    if (moe_layer) return moe(n);
    if (c.family == Family::kGlu) return glu(n);
    return ffn(n, c.ffn_activation);
  }
  u64 conv_block(u64 n) const {
    const u64 w = c.kernel_width, g = c.n_heads;
    u64 total = n * d * 2 * d + oc::kSigmoid * n * d + oc::kMul * n * d;
    if (c.family == Family::kDconv) {
      total += n * d * g * w + oc::kSoftmax * n * g * w;
    } else {
      total += oc::kSoftmax * w * g;
    }
    return total + n * d * w + n * d * d;
  }
  u64 mixer(u64 n) const {
    const u64 s = c.token_mlp_dim();
    return rms(n, d) + s * n * d + oc::kGelu * s * d + n * s * d + rms(n, d) + n * d * dff +
           oc::kGelu * n * dff + n * dff * d;
  }
  u64 evolved_encoder(u64 n) const {
    const u64 half = d / 2, wide = 4 * d;
    u64 t = rms(n, d) + 2 * n * d * d + oc::kSigmoid * n * d + oc::kMul * n * d;
    t += rms(n, d) + n * d * wide + n * 3 * d * half;
    t += rms(n, wide) + n * wide * layers::kEvolvedEncoderSepWidth + n * wide * half;
    t += rms(n, d) + rel_attention(n, n);
    t += rms(n, d) + ffn(n, Activation::kRelu);
    return t;
  }
  u64 evolved_decoder(u64 n, u64 m) const {
    const u64 half = d / 2, wide = 4 * d;
    u64 t = rms(n, d) + rel_attention(n, n) + rel_attention(n, m);
    t += rms(n, d) + n * d * layers::kEvolvedDecoderLeftWidth + n * d * wide +
         n * d * layers::kEvolvedDecoderRightWidth + n * d * half;
    t += rms(n, wide) + n * wide * layers::kEvolvedDecoderSepWidth + n * wide * d;
    t += rms(n, d) + rel_attention(n, n);
    t += rms(n, d) + rel_attention(n, m);
    t += rms(n, d) + ffn(n, Activation::kSilu);
    return t;
  }

  void run(u64 n_enc, u64 n_dec) {
    const Family f = c.family;
    const bool shared_stack = f == Family::kUniversal || f == Family::kAlbert;
    const u64 v = c.vocab;
    if (f == Family::kAlbert) {
      const u64 e = c.albert_embed_width();
      charge(component::kEmbedding, n_enc * e * d + n_dec * e * d);
    }

    // Encoder.
    const std::size_t enc_steps = f == Family::kUniversal ? c.n_recurrence : c.n_layers_enc;
    u64 n = n_enc;
    std::size_t pools = 0;
    for (std::size_t s = 0; s < enc_steps; ++s) {
      const std::size_t layer = shared_stack ? 0 : s;
      switch (f) {
        case Family::kLconv:
        case Family::kDconv:
          charge(component::kEncoderMixing, rms(n, d) + conv_block(n));
          charge(component::kEncoderFfn, rms(n, d) + ffn(n, c.ffn_activation));
          break;
        case Family::kMixer:
          charge(component::kEncoderMixing, mixer(n));
          break;
        case Family::kEvolved:
          charge(component::kEncoderMixing, evolved_encoder(n));
          break;
        default:
          charge(component::kEncoderMixing, rms(n, d) + attention(n, n));
          charge(component::kEncoderFfn,
                 rms(n, d) + ffn_variant(n, f == Family::kSwitch && layer % 2 == 1));
          break;
      }
      if (f == Family::kFunnel && (s + 1) % 2 == 0 && pools < 2) {
        ++pools;
        n = (n + 1) / 2;
        charge(component::kEncoderPool, oc::kMeanPool * n * d);
      }
    }
    charge(component::kEncoderNorm, rms(n, d));
    const u64 m = n;

    // Decoder.
    const std::size_t dec_steps = f == Family::kUniversal ? c.n_recurrence : c.n_layers_dec;
    const u64 t = n_dec;
    for (std::size_t s = 0; s < dec_steps; ++s) {
      const std::size_t layer = shared_stack ? 0 : s;
      switch (f) {
        case Family::kLconv:
        case Family::kDconv:
          charge(component::kDecoderSelf, rms(t, d) + conv_block(t));
          charge(component::kDecoderCross, rms(t, d) + rel_attention(t, m));
          charge(component::kDecoderFfn, rms(t, d) + ffn(t, c.ffn_activation));
          break;
        case Family::kEvolved:
          charge(component::kDecoderSelf, evolved_decoder(t, m));
          break;
        default:
          charge(component::kDecoderSelf, rms(t, d) + attention(t, t));
          charge(component::kDecoderCross, rms(t, d) + attention(t, m));
          charge(component::kDecoderFfn,
                 rms(t, d) + ffn_variant(t, f == Family::kSwitch && layer % 2 == 1));
          break;
      }
    }
    charge(component::kDecoderNorm, rms(t, d));

    if (f == Family::kMos) {
      const u64 k = c.k_mos;
      u64 o = t * d * k + oc::kSoftmax * t * k;
      o += k * (t * d * d + oc::kTanh * t * d + t * d * v + oc::kSoftmax * t * v +
                oc::kMul * t * v);
      o += oc::kLog * t * v;
      charge(component::kOutput, o);
    } else if (f == Family::kAlbert) {
      const u64 e = c.albert_embed_width();
      charge(component::kOutput, oc::kMul * t * d + t * d * e + t * e * v);
    } else {
      charge(component::kOutput, oc::kMul * t * d + t * d * v);
    }
  }
};

}  // namespace

CostReport count_params(const ModelConfig& config) {
  validate(config);
  CostReport r;
  fill_params(config, r);
  return r;
}

CostReport count_flops(const ModelConfig& config, std::size_t n_enc, std::size_t n_dec) {
  CostReport r = count_params(config);
  if (config.family == Family::kMixer) n_enc = config.n_enc_fixed;
  r.n_enc = n_enc;
  r.n_dec = n_dec;
  std::map<std::string, u64> mults;
  FlopCounter counter(config, mults);
  counter.run(n_enc, n_dec);
  for (const auto& [key, value] : mults) {
    r.flops_by_component[key] = 2 * value;
    r.flops_forward += 2 * value;
  }
  return r;
}

std::string parameter_component(const std::string& name) {
  auto ends_with = [&](std::string_view s) {
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  if (name.rfind("shared.embed", 0) == 0) return "embedding";
  if (ends_with("relative_bias")) return "relative_bias";
  if (ends_with("final_norm")) return "final_norm";
  if (name.rfind("encoder.", 0) == 0) return "encoder";
  if (name.rfind("decoder.", 0) == 0) return "decoder";
  return "output";
}

std::string to_json(const CostReport& report) {
  nlohmann::ordered_json j;
  j["params_total"] = report.params_total;
  j["params_by_component"] = report.params_by_component;
  j["n_enc"] = report.n_enc;
  j["n_dec"] = report.n_dec;
  j["flops_forward"] = report.flops_forward;
  j["flops_by_component"] = report.flops_by_component;
  return j.dump(2);
}

std::string to_csv(const CostReport& report) {
  std::ostringstream out;
  out << "kind,component,value\n";
  for (const auto& [k, v] : report.params_by_component) out << "params," << k << "," << v << "\n";
  out << "params,total," << report.params_total << "\n";
  for (const auto& [k, v] : report.flops_by_component) out << "flops," << k << "," << v << "\n";
  out << "flops,total," << report.flops_forward << "\n";
  return out.str();
}

}  // namespace archscale
