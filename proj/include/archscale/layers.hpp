#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "archscale/config.hpp"
#include "archscale/ops.hpp"
#include "archscale/tensor.hpp"

// Sequence-model building blocks. Blocks are free functions of (parameters,
// input); parameter structs hold tensor handles, so two structs may share
// storage (layer sharing in UT and ALBERT).
namespace archscale::layers {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// Creates parameter leaves in registration order from one seeded stream.
class ParamBuilder {
 public:
  explicit ParamBuilder(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(const std::string& name, Shape shape, double stddev);
  // N(0, 1/fan_in) for a [fan_in x fan_out] projection.
  Tensor linear(const std::string& name, std::size_t fan_in, std::size_t fan_out);
  Tensor ones(const std::string& name, Shape shape);
  Tensor zeros(const std::string& name, Shape shape);

  std::vector<NamedParameter>& parameters() { return params_; }

 private:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values);

  std::mt19937_64 rng_;
  std::vector<NamedParameter> params_;
};

// ---------------------------------------------------------------------------
// Attention

struct AttentionParams {
  Tensor q, k, v, o;  // [d x H*dkv] x3, [H*dkv x d]
  std::size_t heads = 0;
  std::size_t d_kv = 0;
};

AttentionParams make_attention(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                               std::size_t heads, std::size_t d_kv);

// Per-head [buckets x heads] table lookups, computed once per stack and length.
std::vector<Tensor> head_biases(const Tensor& table, std::size_t heads, std::size_t nq,
                                std::size_t nk, bool bidirectional);

// Multi-head scaled dot-product attention with optional additive per-head bias
// (one [nq x nk] tensor per head). Self-attention passes the same tensor as
// q_in and kv_in; causal masking on cross-attention is a contract error.
Tensor rel_attention(const Tensor& q_in, const Tensor& kv_in, const AttentionParams& p,
                     std::span<const Tensor> biases, bool causal,
                     std::vector<Tensor>* probabilities = nullptr);

inline constexpr double kPerformerEpsilon = 1e-6;

// ReLU-kernel linear attention (no position bias).
Tensor performer_attention(const Tensor& q_in, const Tensor& kv_in, const AttentionParams& p,
                           bool causal);

// ---------------------------------------------------------------------------
// Feed-forward variants

struct FfnParams {
  Tensor wi, wo;  // [d x dff], [dff x d]
};

struct GluParams {
  Tensor w_act, w_gate, wo;  // [d x dff] x2, [dff x d]
};

struct MoeParams {
  Tensor router;  // [d x N_E]
  std::vector<FfnParams> experts;
};

FfnParams make_ffn(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                   std::size_t d_ff);
GluParams make_glu(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                   std::size_t d_ff);
MoeParams make_moe(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                   std::size_t d_ff, std::size_t experts);

Tensor activate(const Tensor& x, Activation activation);

// act(x W1) W2.
Tensor ffn(const Tensor& x, const FfnParams& p, Activation activation = Activation::kRelu);
// (gelu(x W) * (x V)) W2.
Tensor glu_ffn(const Tensor& x, const GluParams& p);
// (activated * gate) W2: the output half of glu_ffn.
Tensor glu_combine(const Tensor& activated, const Tensor& gate, const Tensor& wo);

inline constexpr double kMoeAuxLossWeight = 0.01;

struct MoeOutput {
  Tensor output;    // [n x d]; dropped tokens are zero rows
  Tensor aux_loss;  // N_E * sum_i f_i * P_i (unweighted)
  std::vector<std::size_t> assignment;   // top-1 expert per token
  std::vector<bool> dropped;             // token exceeded its expert's capacity
  std::vector<std::size_t> tokens_per_expert;
  std::size_t capacity = 0;
};

// ceil(capacity_factor * tokens / experts), at least 1.
std::size_t expert_capacity(std::size_t tokens, std::size_t experts, double capacity_factor);

// Top-1 switch routing. Each expert runs on a fixed buffer of `capacity`
// slots filled in token order; the result is scaled by the router probability.
MoeOutput moe_ffn(const Tensor& x, const MoeParams& p, double capacity_factor);

// ---------------------------------------------------------------------------
// Mixture of softmaxes output head

struct MosParams {
  Tensor gate;                      // [d x K]
  std::vector<Tensor> projections;  // K x [d x d]
  Tensor output_embedding;          // [V x d]
};

MosParams make_mos(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                   std::size_t vocab, std::size_t k);

// p = sum_k pi_k(h) softmax(tanh(h W_k) E^T); rows are distributions over vocab.
Tensor mos_head(const Tensor& h, const MosParams& p);

// ---------------------------------------------------------------------------
// Lightweight / dynamic convolution

struct ConvParams {
  Tensor w_in;         // [d x 2d] GLU input projection
  Tensor kernel;       // [width x groups] (lightweight)
  Tensor kernel_proj;  // [d x groups*width] (dynamic)
  Tensor w_out;        // [d x d]
  std::size_t width = 0;
  std::size_t groups = 0;
  bool dynamic = false;
};

ConvParams make_conv(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                     std::size_t groups, std::size_t width, bool dynamic);

// GLU(x W_in): the sequence fed to the convolution.
Tensor conv_input(const Tensor& x, const ConvParams& p);
// softmax over the width of the static kernel, [width x groups].
Tensor lconv_kernel(const ConvParams& p);
// Per-position kernels predicted from h, softmax over width: [n x groups*width].
Tensor dconv_kernels(const Tensor& h, const ConvParams& p);

Tensor lconv_block(const Tensor& x, const ConvParams& p, bool causal);
Tensor dconv_block(const Tensor& x, const ConvParams& p, bool causal);
inline Tensor conv_block(const Tensor& x, const ConvParams& p, bool causal) {
  return p.dynamic ? dconv_block(x, p, causal) : lconv_block(x, p, causal);
}

// ---------------------------------------------------------------------------
// MLP-Mixer encoder block

struct MixerParams {
  Tensor token_norm;            // [1 x d]
  Tensor token_w1, token_b1;    // [S x n], [S x 1]
  Tensor token_w2, token_b2;    // [n x S], [n x 1]
  Tensor channel_norm;          // [1 x d]
  Tensor channel_wi, channel_bi;  // [d x dff], [1 x dff]
  Tensor channel_wo, channel_bo;  // [dff x d], [1 x d]
};

MixerParams make_mixer(ParamBuilder& pb, const std::string& prefix, std::size_t length,
                       std::size_t d_model, std::size_t token_dim, std::size_t d_ff);

// x + token_mlp(norm(x)) followed by x + channel_mlp(norm(x)). Input length
// must equal the fixed mixer length.
Tensor mixer_block(const Tensor& x, const MixerParams& p);

// ---------------------------------------------------------------------------
// Evolved Transformer cells

struct EvolvedEncoderParams {
  Tensor glu_norm, glu_value, glu_gate;              // [1xd], [dxd], [dxd]
  Tensor conv_norm, left, right;                      // [1xd], [dx4d], [3d x d/2]
  Tensor hidden_norm, sep_depthwise, sep_pointwise;   // [1x4d], [9x4d], [4d x d/2]
  Tensor attn_norm;
  AttentionParams attn;
  Tensor ffn_norm;
  FfnParams ffn;
};

struct EvolvedDecoderParams {
  Tensor branch_norm;
  AttentionParams branch_self, branch_cross;
  Tensor conv_norm;
  Tensor left_depthwise, left_pointwise;    // [11xd], [dx4d]
  Tensor right_depthwise, right_pointwise;  // [7xd], [d x d/2]
  Tensor hidden_norm, sep_depthwise, sep_pointwise;  // [1x4d], [7x4d], [4dxd]
  Tensor self_norm;
  AttentionParams self_attn;
  Tensor cross_norm;
  AttentionParams cross_attn;
  Tensor ffn_norm;
  FfnParams ffn;  // swish
};

inline constexpr std::size_t kEvolvedEncoderSepWidth = 9;
inline constexpr std::size_t kEvolvedDecoderLeftWidth = 11;
inline constexpr std::size_t kEvolvedDecoderRightWidth = 7;
inline constexpr std::size_t kEvolvedDecoderSepWidth = 7;

EvolvedEncoderParams make_evolved_encoder(ParamBuilder& pb, const std::string& prefix,
                                          const ModelConfig& c);
EvolvedDecoderParams make_evolved_decoder(ParamBuilder& pb, const std::string& prefix,
                                          const ModelConfig& c);

Tensor evolved_encoder_block(const Tensor& x, const EvolvedEncoderParams& p,
                             std::span<const Tensor> biases);
Tensor evolved_decoder_block(const Tensor& x, const Tensor& memory,
                             const EvolvedDecoderParams& p, std::span<const Tensor> biases);

}  // namespace archscale::layers
