#include "archscale/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <variant>

#include "archscale/errors.hpp"
#include "archscale/ops.hpp"

namespace archscale {

using namespace archscale::layers;
using namespace archscale::ops;

namespace {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

constexpr double kEmbeddingStddev = 0.2;
constexpr double kBiasTableStddev = 0.1;

using FfnVariant = std::variant<FfnParams, GluParams, MoeParams>;

struct EncAttnLayer {
  Tensor attn_norm;
  AttentionParams attn;
  Tensor ffn_norm;
  FfnVariant ffn;
};

struct EncConvLayer {
  Tensor conv_norm;
  ConvParams conv;
  Tensor ffn_norm;
  FfnParams ffn;
};

using EncLayer = std::variant<EncAttnLayer, EncConvLayer, MixerParams, EvolvedEncoderParams>;

struct DecAttnLayer {
  Tensor self_norm;
  AttentionParams self_attn;
  Tensor cross_norm;
  AttentionParams cross_attn;
  Tensor ffn_norm;
  FfnVariant ffn;
};

struct DecConvLayer {
  Tensor conv_norm;
  ConvParams conv;
  Tensor cross_norm;
  AttentionParams cross_attn;
  Tensor ffn_norm;
  FfnParams ffn;
};

using DecLayer = std::variant<DecAttnLayer, DecConvLayer, EvolvedDecoderParams>;

bool uses_encoder_bias(Family f) {
  return f != Family::kPerformer && f != Family::kLconv && f != Family::kDconv &&
         f != Family::kMixer;
}

bool uses_decoder_bias(Family f) {
  return f != Family::kPerformer && f != Family::kLconv && f != Family::kDconv;
}

}  // namespace

struct Model::Impl {
  ModelConfig config;
  std::vector<NamedParameter> params;
  Tensor embedding;  // [V x d], or [V x E] for ALBERT
  Tensor embed_proj; // ALBERT [E x d]
  Tensor enc_bias, dec_bias;
  std::vector<EncLayer> enc_layers;
  std::vector<std::size_t> enc_schedule;
  std::vector<bool> pool_after;
  Tensor enc_final_norm;
  std::vector<DecLayer> dec_layers;
  std::vector<std::size_t> dec_schedule;
  Tensor dec_final_norm;
  std::optional<MosParams> mos;

  struct Context {
    const ForwardOptions* options;
    Tensor aux;
  };

  Tensor attention(const Tensor& q_in, const Tensor& kv_in, const AttentionParams& p,
                   std::span<const Tensor> biases, bool causal) const {
    if (config.family == Family::kPerformer) return performer_attention(q_in, kv_in, p, causal);
    return rel_attention(q_in, kv_in, p, biases, causal);
  }

  Tensor feed_forward(const Tensor& x, const FfnVariant& ffn, Context& ctx) const {
    return std::visit(
        Overloaded{
            [&](const FfnParams& p) { return layers::ffn(x, p, config.ffn_activation); },
            [&](const GluParams& p) {
              if (ctx.options->neutralize_glu_gate) {
                const Tensor act = gelu(matmul(x, p.w_act));
                return glu_combine(act, Tensor::from(act.shape(),
                                                     std::vector<double>(act.numel(), 1.0)),
                                   p.wo);
              }
              return glu_ffn(x, p);
            },
            [&](const MoeParams& p) {
              MoeOutput out = moe_ffn(x, p, config.capacity_factor);
              ctx.aux = ctx.aux.defined() ? add(ctx.aux, out.aux_loss) : out.aux_loss;
              return out.output;
            }},
        ffn);
  }

  Tensor embed_tokens(std::span<const int> ids) const {
    CostTag tag(component::kEmbedding);
    Tensor x = embed(ids, embedding);
    if (embed_proj.defined()) x = matmul(x, embed_proj);
    return x;
  }

  Tensor encode(std::span<const int> ids, Context& ctx) const {
    std::vector<int> padded(ids.begin(), ids.end());
    if (config.family == Family::kMixer) {
      if (padded.size() > config.n_enc_fixed) {
        throw InputError("encoder input of length " + std::to_string(padded.size()) +
                         " exceeds the fixed mixer length " + std::to_string(config.n_enc_fixed));
      }
      padded.resize(config.n_enc_fixed, 0);
    }
    if (padded.empty()) throw InputError("encoder input is empty");
    Tensor x = embed_tokens(padded);

    std::vector<Tensor> biases;
    std::size_t bias_len = 0;
    auto current_biases = [&]() -> std::span<const Tensor> {
      if (!enc_bias.defined()) return {};
      if (bias_len != x.rows()) {
        bias_len = x.rows();
        biases = head_biases(enc_bias, config.n_heads, bias_len, bias_len, true);
      }
      return biases;
    };

    for (std::size_t s = 0; s < enc_schedule.size(); ++s) {
      std::visit(Overloaded{
                     [&](const EncAttnLayer& l) {
                       {
                         CostTag tag(component::kEncoderMixing);
                         const Tensor a = rms_norm(x, l.attn_norm);
                         x = add(x, attention(a, a, l.attn, current_biases(), false));
                       }
                       CostTag tag(component::kEncoderFfn);
                       x = add(x, feed_forward(rms_norm(x, l.ffn_norm), l.ffn, ctx));
                     },
                     [&](const EncConvLayer& l) {
                       {
                         CostTag tag(component::kEncoderMixing);
                         x = add(x, conv_block(rms_norm(x, l.conv_norm), l.conv, false));
                       }
                       CostTag tag(component::kEncoderFfn);
                       x = add(x, layers::ffn(rms_norm(x, l.ffn_norm), l.ffn,
                                              config.ffn_activation));
                     },
                     [&](const MixerParams& l) {
                       CostTag tag(component::kEncoderMixing);
                       x = mixer_block(x, l);
                     },
                     [&](const EvolvedEncoderParams& l) {
                       CostTag tag(component::kEncoderMixing);
                       x = evolved_encoder_block(x, l, current_biases());
                     }},
                 enc_layers[enc_schedule[s]]);
      if (pool_after[s]) {
        CostTag tag(component::kEncoderPool);
        x = mean_pool_stride2(x);
      }
    }
    CostTag tag(component::kEncoderNorm);
    return rms_norm(x, enc_final_norm);
  }

  Tensor decode(const Tensor& memory, std::span<const int> ids, Context& ctx) const {
    if (ids.empty()) throw InputError("decoder input is empty");
    Tensor y = embed_tokens(ids);
    const std::size_t n = ids.size();
    std::vector<Tensor> biases;
    if (dec_bias.defined()) biases = head_biases(dec_bias, config.n_heads, n, n, false);

    for (std::size_t index : dec_schedule) {
      std::visit(Overloaded{
                     [&](const DecAttnLayer& l) {
                       {
                         CostTag tag(component::kDecoderSelf);
                         const Tensor a = rms_norm(y, l.self_norm);
                         y = add(y, attention(a, a, l.self_attn, biases, true));
                       }
                       {
                         CostTag tag(component::kDecoderCross);
                         y = add(y, attention(rms_norm(y, l.cross_norm), memory, l.cross_attn,
                                              {}, false));
                       }
                       CostTag tag(component::kDecoderFfn);
                       y = add(y, feed_forward(rms_norm(y, l.ffn_norm), l.ffn, ctx));
                     },
                     [&](const DecConvLayer& l) {
                       {
                         CostTag tag(component::kDecoderSelf);
                         y = add(y, conv_block(rms_norm(y, l.conv_norm), l.conv, true));
                       }
                       {
                         CostTag tag(component::kDecoderCross);
                         y = add(y, rel_attention(rms_norm(y, l.cross_norm), memory,
                                                  l.cross_attn, {}, false));
                       }
                       CostTag tag(component::kDecoderFfn);
                       y = add(y, layers::ffn(rms_norm(y, l.ffn_norm), l.ffn,
                                              config.ffn_activation));
                     },
                     [&](const EvolvedDecoderParams& l) {
                       CostTag tag(component::kDecoderSelf);
                       y = evolved_decoder_block(y, memory, l, biases);
                     }},
                 dec_layers[index]);
    }
    Tensor h;
    {
      CostTag tag(component::kDecoderNorm);
      h = rms_norm(y, dec_final_norm);
    }
    CostTag tag(component::kOutput);
    if (mos) return ops::log(mos_head(h, *mos));
    const Tensor scaled = scale(h, 1.0 / std::sqrt(static_cast<double>(config.d_model)));
    if (embed_proj.defined()) return matmul_nt(matmul_nt(scaled, embed_proj), embedding);
    return matmul_nt(scaled, embedding);
  }
};

namespace {

FfnVariant make_ffn_variant(ParamBuilder& pb, const std::string& prefix, const ModelConfig& c,
                            bool moe) {
  if (moe) return make_moe(pb, prefix + ".moe", c.d_model, c.d_ff, c.n_experts);
  if (c.family == Family::kGlu) return make_glu(pb, prefix + ".glu", c.d_model, c.d_ff);
  return make_ffn(pb, prefix + ".ffn", c.d_model, c.d_ff);
}

EncAttnLayer make_enc_attn(ParamBuilder& pb, const std::string& prefix, const ModelConfig& c,
                           bool moe) {
  EncAttnLayer l;
  l.attn_norm = pb.ones(prefix + ".attn_norm", {1, c.d_model});
  l.attn = make_attention(pb, prefix + ".attention", c.d_model, c.n_heads, c.d_kv);
  l.ffn_norm = pb.ones(prefix + ".ffn_norm", {1, c.d_model});
  l.ffn = make_ffn_variant(pb, prefix, c, moe);
  return l;
}

DecAttnLayer make_dec_attn(ParamBuilder& pb, const std::string& prefix, const ModelConfig& c,
                           bool moe) {
  DecAttnLayer l;
  l.self_norm = pb.ones(prefix + ".self_norm", {1, c.d_model});
  l.self_attn = make_attention(pb, prefix + ".self_attention", c.d_model, c.n_heads, c.d_kv);
  l.cross_norm = pb.ones(prefix + ".cross_norm", {1, c.d_model});
  l.cross_attn = make_attention(pb, prefix + ".cross_attention", c.d_model, c.n_heads, c.d_kv);
  l.ffn_norm = pb.ones(prefix + ".ffn_norm", {1, c.d_model});
  l.ffn = make_ffn_variant(pb, prefix, c, moe);
  return l;
}

std::string layer_prefix(const char* stack, std::size_t i) {
  return std::string(stack) + ".layer" + std::to_string(i);
}

}  // namespace

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  const ModelConfig& c = config;
  auto impl = std::make_shared<Impl>();
  impl->config = c;
  ParamBuilder pb(seed);
  const Family f = c.family;
  const std::size_t d = c.d_model;

  if (f == Family::kAlbert) {
    const std::size_t e = c.albert_embed_width();
    impl->embedding = pb.normal("shared.embedding", {c.vocab, e}, kEmbeddingStddev);
    impl->embed_proj = pb.linear("shared.embed_proj", e, d);
  } else {
    impl->embedding = pb.normal("shared.embedding", {c.vocab, d}, kEmbeddingStddev);
  }

  const bool albert_shared = f == Family::kAlbert && c.share_enc_dec;
  if (uses_encoder_bias(f)) {
    impl->enc_bias = pb.normal(albert_shared ? "shared.relative_bias" : "encoder.relative_bias",
                               {c.relative_buckets, c.n_heads}, kBiasTableStddev);
  }
  if (albert_shared) {
    impl->dec_bias = impl->enc_bias;
  } else if (uses_decoder_bias(f)) {
    impl->dec_bias = pb.normal("decoder.relative_bias", {c.relative_buckets, c.n_heads},
                               kBiasTableStddev);
  }

  // Encoder.
  const bool shared_stack = f == Family::kUniversal || f == Family::kAlbert;
  const std::size_t enc_built = shared_stack ? 1 : c.n_layers_enc;
  const std::size_t enc_steps = f == Family::kUniversal ? c.n_recurrence : c.n_layers_enc;
  for (std::size_t i = 0; i < enc_built; ++i) {
    const std::string prefix = layer_prefix("encoder", i);
    switch (f) {
      case Family::kLconv:
      case Family::kDconv: {
        EncConvLayer l;
        l.conv_norm = pb.ones(prefix + ".conv_norm", {1, d});
        l.conv = make_conv(pb, prefix + ".conv", d, c.n_heads, c.kernel_width,
                           f == Family::kDconv);
        l.ffn_norm = pb.ones(prefix + ".ffn_norm", {1, d});
        l.ffn = make_ffn(pb, prefix + ".ffn", d, c.d_ff);
        impl->enc_layers.emplace_back(std::move(l));
        break;
      }
      case Family::kMixer:
        impl->enc_layers.emplace_back(
            make_mixer(pb, prefix + ".mixer", c.n_enc_fixed, d, c.token_mlp_dim(), c.d_ff));
        break;
      case Family::kEvolved:
        impl->enc_layers.emplace_back(make_evolved_encoder(pb, prefix, c));
        break;
      default:
        impl->enc_layers.emplace_back(
            make_enc_attn(pb, prefix, c, f == Family::kSwitch && i % 2 == 1));
        break;
    }
  }
  std::size_t pools = 0;
  for (std::size_t s = 0; s < enc_steps; ++s) {
    impl->enc_schedule.push_back(shared_stack ? 0 : s);
    const bool pool = f == Family::kFunnel && (s + 1) % 2 == 0 && pools < 2;
    if (pool) ++pools;
    impl->pool_after.push_back(pool);
  }
  impl->enc_final_norm =
      pb.ones(albert_shared ? "shared.final_norm" : "encoder.final_norm", {1, d});

  // Decoder.
  const std::size_t dec_built = shared_stack ? 1 : c.n_layers_dec;
  const std::size_t dec_steps = f == Family::kUniversal ? c.n_recurrence : c.n_layers_dec;
  for (std::size_t i = 0; i < dec_built; ++i) {
    const std::string prefix = layer_prefix("decoder", i);
    switch (f) {
      case Family::kLconv:
      case Family::kDconv: {
        DecConvLayer l;
        l.conv_norm = pb.ones(prefix + ".conv_norm", {1, d});
        l.conv = make_conv(pb, prefix + ".conv", d, c.n_heads, c.kernel_width,
                           f == Family::kDconv);
        l.cross_norm = pb.ones(prefix + ".cross_norm", {1, d});
        l.cross_attn = make_attention(pb, prefix + ".cross_attention", d, c.n_heads, c.d_kv);
        l.ffn_norm = pb.ones(prefix + ".ffn_norm", {1, d});
        l.ffn = make_ffn(pb, prefix + ".ffn", d, c.d_ff);
        impl->dec_layers.emplace_back(std::move(l));
        break;
      }
      case Family::kEvolved:
        impl->dec_layers.emplace_back(make_evolved_decoder(pb, prefix, c));
        break;
      default:
        if (albert_shared) {
          const auto& enc = std::get<EncAttnLayer>(impl->enc_layers[0]);
          DecAttnLayer l;
          l.self_norm = enc.attn_norm;
          l.self_attn = enc.attn;
          l.cross_norm = pb.ones(prefix + ".cross_norm", {1, d});
          l.cross_attn = make_attention(pb, prefix + ".cross_attention", d, c.n_heads, c.d_kv);
          l.ffn_norm = enc.ffn_norm;
          l.ffn = enc.ffn;
          impl->dec_layers.emplace_back(std::move(l));
        } else {
          impl->dec_layers.emplace_back(
              make_dec_attn(pb, prefix, c, f == Family::kSwitch && i % 2 == 1));
        }
        break;
    }
  }
  for (std::size_t s = 0; s < dec_steps; ++s) impl->dec_schedule.push_back(shared_stack ? 0 : s);
  impl->dec_final_norm =
      albert_shared ? impl->enc_final_norm : pb.ones("decoder.final_norm", {1, d});

  if (f == Family::kMos) impl->mos = make_mos(pb, "output.mos", d, c.vocab, c.k_mos);

  impl->params = std::move(pb.parameters());
  return Model(std::move(impl));
}

const ModelConfig& Model::config() const { return impl_->config; }

const std::vector<NamedParameter>& Model::parameters() const { return impl_->params; }

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : impl_->params) total += p.tensor.numel();
  return total;
}

Tensor Model::parameter(std::string_view name) const {
  for (const auto& p : impl_->params) {
    if (p.name == name) return p.tensor;
  }
  throw InputError("no parameter named '" + std::string(name) + "'");
}

Tensor Model::encode(std::span<const int> enc_ids) const {
  const ForwardOptions options;
  Impl::Context ctx{&options, {}};
  return impl_->encode(enc_ids, ctx);
}

ForwardResult Model::forward(std::span<const int> enc_ids, std::span<const int> dec_ids,
                             const ForwardOptions& options) const {
  if (options.neutralize_glu_gate && impl_->config.family != Family::kGlu) {
    throw ConfigError("neutralize_glu_gate applies to the glu family only");
  }
  Impl::Context ctx{&options, {}};
  ForwardResult result;
  const Tensor memory = impl_->encode(enc_ids, ctx);
  result.encoder_length = memory.rows();
  result.logits = impl_->decode(memory, dec_ids, ctx);
  result.aux_loss = ctx.aux;
  return result;
}

Tensor Model::loss(std::span<const int> enc_ids, std::span<const int> dec_in,
                   std::span<const int> dec_target) const {
  if (dec_in.size() != dec_target.size()) {
    throw InputError("decoder input and target lengths differ");
  }
  const ForwardResult r = forward(enc_ids, dec_in);
  Tensor loss = cross_entropy(r.logits, dec_target);
  if (r.aux_loss.defined()) loss = add(loss, scale(r.aux_loss, kMoeAuxLossWeight));
  return loss;
}

std::vector<int> Model::greedy_decode(std::span<const int> enc_ids, std::size_t max_len,
                                      int start, int stop) const {
  const ForwardOptions options;
  Impl::Context ctx{&options, {}};
  const Tensor memory = impl_->encode(enc_ids, ctx);
  std::vector<int> prefix{start};
  std::vector<int> out;
  const std::size_t vocab = impl_->config.vocab;
  while (out.size() < max_len) {
    const Tensor logits = impl_->decode(memory, prefix, ctx);
    const auto row = logits.data().subspan((prefix.size() - 1) * vocab, vocab);
    const int next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (next == stop) break;
    out.push_back(next);
    prefix.push_back(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "ASCK", u32 version, u64 config length + config text, u64
// parameter count, then per parameter: u32 name length + name, u32 ndim,
// ndim x u64 dims, float64 values. All integers and floats little-endian.

namespace {

constexpr char kMagic[4] = {'A', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw InputError("checkpoint " + path.string() + ": truncated");
  }
  return value;
}

std::string get_string(std::istream& in, std::size_t size, const std::filesystem::path& path) {
  if (size > (1u << 30)) throw InputError("checkpoint " + path.string() + ": corrupt length");
  std::string s(size, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(size))) {
    throw InputError("checkpoint " + path.string() + ": truncated");
  }
  return s;
}

}  // namespace

void Model::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = format_config(impl_->config);
  put<std::uint64_t>(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put<std::uint64_t>(out, impl_->params.size());
  for (const auto& p : impl_->params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.shape().size()));
    for (std::size_t dim : p.tensor.shape()) put<std::uint64_t>(out, dim);
    const auto data = p.tensor.data();
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw InputError(path.string() + " is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw InputError("checkpoint " + path.string() + ": unsupported version " +
                     std::to_string(version));
  }
  const auto cfg_len = get<std::uint64_t>(in, path);
  const ModelConfig config = parse_config(get_string(in, cfg_len, path));
  Model model = build(config, 0);
  const auto count = get<std::uint64_t>(in, path);
  if (count != model.impl_->params.size()) {
    throw InputError("checkpoint " + path.string() + ": parameter list does not match config");
  }
  for (auto& p : model.impl_->params) {
    const auto name_len = get<std::uint32_t>(in, path);
    const std::string name = get_string(in, name_len, path);
    const auto ndim = get<std::uint32_t>(in, path);
    Shape shape;
    for (std::uint32_t i = 0; i < ndim; ++i) shape.push_back(get<std::uint64_t>(in, path));
    if (name != p.name || shape != p.tensor.shape()) {
      throw InputError("checkpoint " + path.string() + ": unexpected parameter '" + name + "'");
    }
    auto dst = p.tensor.mutable_data();
    if (!in.read(reinterpret_cast<char*>(dst.data()),
                 static_cast<std::streamsize>(dst.size() * sizeof(double)))) {
      throw InputError("checkpoint " + path.string() + ": truncated");
    }
  }
  return model;
}

// ---------------------------------------------------------------------------

namespace {

std::string op_of_parameter(const std::string& name, Family family) {
  auto has = [&](std::string_view s) { return name.find(s) != std::string::npos; };
  if (has("relative_bias")) return "relative_bias";
  if (has("embed")) return "embedding";
  if (has("mos")) return "mos_head";
  if (has(".moe.")) return "moe_ffn";
  if (has(".glu.")) return "glu_ffn";
  if (has(".mixer.")) return "mixer_block";
  if (has(".conv.")) return family == Family::kDconv ? "dconv_block" : "lconv_block";
  if (family == Family::kEvolved && !has("final_norm")) return "evolved_cell";
  if (has("attention")) {
    return family == Family::kPerformer ? "performer_attention" : "rel_attention";
  }
  if (has(".ffn.")) return "ffn";
  if (has("norm")) return "rms_norm";
  return "other";
}

}  // namespace

GradcheckReport gradcheck(const Model& model, const GradcheckOptions& options) {
  const ModelConfig& c = model.config();
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<int> token(0, static_cast<int>(c.vocab) - 1);
  std::vector<int> enc(options.n_enc), dec_in(options.n_dec), dec_out(options.n_dec);
  for (int& t : enc) t = token(rng);
  for (int& t : dec_in) t = token(rng);
  for (int& t : dec_out) t = token(rng);

  auto eval = [&] {
    const double v = model.loss(enc, dec_in, dec_out).item();
    if (!std::isfinite(v)) throw NumericError("gradcheck: non-finite loss");
    return v;
  };

  for (const auto& p : model.parameters()) p.tensor.node()->grad.clear();
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = model.loss(enc, dec_in, dec_out);
    if (!std::isfinite(loss.item())) throw NumericError("gradcheck: non-finite loss");
    tape.backward(loss);
  }

  GradcheckReport report;
  report.family = c.family;
  for (const auto& p : model.parameters()) {
    Tensor t = p.tensor;
    const std::vector<double> analytic = t.node()->grad.empty()
                                             ? std::vector<double>(t.numel(), 0.0)
                                             : t.node()->grad;
    std::uniform_int_distribution<std::size_t> coord(0, t.numel() - 1);
    for (std::size_t s = 0; s < options.samples_per_tensor; ++s) {
      const std::size_t i = coord(rng);
      auto data = t.mutable_data();
      const double original = data[i];
      data[i] = original + options.step;
      const double up = eval();
      data[i] = original - options.step;
      const double down = eval();
      data[i] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), options.floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++report.checked;
      if (err >= report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = p.name;
        report.worst_op = op_of_parameter(p.name, c.family);
      }
    }
  }
  for (const auto& p : model.parameters()) p.tensor.node()->grad.clear();
  return report;
}

ModelConfig tiny_config(Family family) {
  ModelConfig c;
  c.family = family;
  c.n_layers_enc = 2;
  c.n_layers_dec = 2;
  c.d_model = 16;
  c.d_ff = 32;
  c.d_kv = 4;
  c.n_heads = 4;
  c.vocab = 37;
  c.relative_buckets = 8;
  switch (family) {
    case Family::kSwitch:
      c.n_experts = 4;
      c.capacity_factor = 4.0;
      break;
    case Family::kUniversal:
      c.n_layers_enc = 1;
      c.n_layers_dec = 1;
      c.n_recurrence = 2;
      break;
    case Family::kAlbert:
      c.share_enc_dec = true;
      break;
    case Family::kMixer:
      c.n_enc_fixed = 8;
      break;
    case Family::kLconv:
    case Family::kDconv:
      c.kernel_width = 3;
      break;
    default:
      break;
  }
  return c;
}

}  // namespace archscale
