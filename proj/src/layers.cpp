#include "archscale/layers.hpp"

#include <cmath>

#include "archscale/errors.hpp"

namespace archscale::layers {

using namespace archscale::ops;

Tensor ParamBuilder::add(const std::string& name, Shape shape, std::vector<double> values) {
  Tensor t = Tensor::parameter(std::move(shape), std::move(values));
  params_.push_back({name, t});
  return t;
}

Tensor ParamBuilder::normal(const std::string& name, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(detail::shape_numel(shape));
  for (double& v : values) v = dist(rng_);
  return add(name, std::move(shape), std::move(values));
}

Tensor ParamBuilder::linear(const std::string& name, std::size_t fan_in, std::size_t fan_out) {
  return normal(name, {fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

Tensor ParamBuilder::ones(const std::string& name, Shape shape) {
  const std::size_t n = detail::shape_numel(shape);
  return add(name, std::move(shape), std::vector<double>(n, 1.0));
}

Tensor ParamBuilder::zeros(const std::string& name, Shape shape) {
  const std::size_t n = detail::shape_numel(shape);
  return add(name, std::move(shape), std::vector<double>(n, 0.0));
}

// ---------------------------------------------------------------------------

AttentionParams make_attention(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                               std::size_t heads, std::size_t d_kv) {
  const std::size_t inner = heads * d_kv;
  AttentionParams p;
  p.q = pb.linear(prefix + ".q", d_model, inner);
  p.k = pb.linear(prefix + ".k", d_model, inner);
  p.v = pb.linear(prefix + ".v", d_model, inner);
  p.o = pb.linear(prefix + ".o", inner, d_model);
  p.heads = heads;
  p.d_kv = d_kv;
  return p;
}

std::vector<Tensor> head_biases(const Tensor& table, std::size_t heads, std::size_t nq,
                                std::size_t nk, bool bidirectional) {
  std::vector<Tensor> out;
  out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    out.push_back(relative_bias(table, h, nq, nk, bidirectional));
  }
  return out;
}

Tensor rel_attention(const Tensor& q_in, const Tensor& kv_in, const AttentionParams& p,
                     std::span<const Tensor> biases, bool causal,
                     std::vector<Tensor>* probabilities) {
  if (causal && !q_in.same_node(kv_in)) {
    throw ContractError("rel_attention: causal masking is only defined for self-attention");
  }
  if (!biases.empty() && biases.size() != p.heads) {
    throw DimensionError("rel_attention: one bias matrix per head required");
  }
  const Tensor q = matmul(q_in, p.q);
  const Tensor k = matmul(kv_in, p.k);
  const Tensor v = matmul(kv_in, p.v);
  const double logit_scale = 1.0 / std::sqrt(static_cast<double>(p.d_kv));
  std::vector<Tensor> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const Tensor qh = slice_cols(q, h * p.d_kv, p.d_kv);
    const Tensor kh = slice_cols(k, h * p.d_kv, p.d_kv);
    const Tensor vh = slice_cols(v, h * p.d_kv, p.d_kv);
    Tensor logits = scale(matmul_nt(qh, kh), logit_scale);
    if (!biases.empty()) logits = add(logits, biases[h]);
    if (causal) logits = mask_future(logits);
    const Tensor probs = softmax(logits, 1);
    if (probabilities != nullptr) probabilities->push_back(probs);
    heads.push_back(matmul(probs, vh));
  }
  return matmul(concat_cols(heads), p.o);
}

Tensor performer_attention(const Tensor& q_in, const Tensor& kv_in, const AttentionParams& p,
                           bool causal) {
  if (causal && !q_in.same_node(kv_in)) {
    throw ContractError("performer_attention: causal form is only defined for self-attention");
  }
  const Tensor q = relu(matmul(q_in, p.q));
  const Tensor k = relu(matmul(kv_in, p.k));
  const Tensor v = matmul(kv_in, p.v);
  std::vector<Tensor> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    heads.push_back(linear_attention(slice_cols(q, h * p.d_kv, p.d_kv),
                                     slice_cols(k, h * p.d_kv, p.d_kv),
                                     slice_cols(v, h * p.d_kv, p.d_kv), causal,
                                     kPerformerEpsilon));
  }
  return matmul(concat_cols(heads), p.o);
}

// ---------------------------------------------------------------------------

FfnParams make_ffn(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                   std::size_t d_ff) {
  return {pb.linear(prefix + ".wi", d_model, d_ff), pb.linear(prefix + ".wo", d_ff, d_model)};
}

GluParams make_glu(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                   std::size_t d_ff) {
  return {pb.linear(prefix + ".w_act", d_model, d_ff), pb.linear(prefix + ".w_gate", d_model, d_ff),
          pb.linear(prefix + ".wo", d_ff, d_model)};
}

MoeParams make_moe(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                   std::size_t d_ff, std::size_t experts) {
  MoeParams p;
  p.router = pb.linear(prefix + ".router", d_model, experts);
  for (std::size_t e = 0; e < experts; ++e) {
    p.experts.push_back(make_ffn(pb, prefix + ".expert" + std::to_string(e), d_model, d_ff));
  }
  return p;
}

Tensor activate(const Tensor& x, Activation activation) {
  switch (activation) {
    case Activation::kRelu:
      return relu(x);
    case Activation::kGelu:
      return gelu(x);
    case Activation::kSilu:
      return silu(x);
  }
  return relu(x);
}

Tensor ffn(const Tensor& x, const FfnParams& p, Activation activation) {
  return matmul(activate(matmul(x, p.wi), activation), p.wo);
}

Tensor glu_combine(const Tensor& activated, const Tensor& gate, const Tensor& wo) {
  return matmul(mul(activated, gate), wo);
}

Tensor glu_ffn(const Tensor& x, const GluParams& p) {
  return glu_combine(gelu(matmul(x, p.w_act)), matmul(x, p.w_gate), p.wo);
}

std::size_t expert_capacity(std::size_t tokens, std::size_t experts, double capacity_factor) {
  const double raw = capacity_factor * static_cast<double>(tokens) / static_cast<double>(experts);
  const auto cap = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return cap == 0 ? 1 : cap;
}

MoeOutput moe_ffn(const Tensor& x, const MoeParams& p, double capacity_factor) {
  const std::size_t n = x.rows();
  const std::size_t experts = p.experts.size();
  if (experts == 0) throw ConfigError("moe_ffn: no experts");
  const Tensor probs = softmax(matmul(x, p.router), 1);

  MoeOutput out;
  out.capacity = expert_capacity(n, experts, capacity_factor);
  out.assignment.resize(n);
  out.dropped.assign(n, false);
  out.tokens_per_expert.assign(experts, 0);
  std::vector<std::vector<std::ptrdiff_t>> slots(
      experts, std::vector<std::ptrdiff_t>(out.capacity, -1));
  std::vector<std::size_t> filled(experts, 0);
  const auto pv = probs.data();
  for (std::size_t t = 0; t < n; ++t) {
    std::size_t best = 0;
    for (std::size_t e = 1; e < experts; ++e) {
      if (pv[t * experts + e] > pv[t * experts + best]) best = e;
    }
    out.assignment[t] = best;
    ++out.tokens_per_expert[best];
    if (filled[best] < out.capacity) {
      slots[best][filled[best]++] = static_cast<std::ptrdiff_t>(t);
    } else {
      out.dropped[t] = true;
    }
  }

  Tensor combined;
  for (std::size_t e = 0; e < experts; ++e) {
    const Tensor buffer = gather_rows(x, slots[e]);
    const Tensor y = ffn(buffer, p.experts[e], Activation::kRelu);
    const Tensor back = scatter_rows(y, slots[e], n);
    combined = combined.defined() ? add(combined, back) : back;
  }
  out.output = mul_col(combined, pick_cols(probs, out.assignment));

  std::vector<double> fraction(experts);
  for (std::size_t e = 0; e < experts; ++e) {
    fraction[e] = static_cast<double>(experts) * static_cast<double>(out.tokens_per_expert[e]) /
                  static_cast<double>(n);
  }
  out.aux_loss = sum(mul(mean_rows(probs), Tensor::from({1, experts}, std::move(fraction))));
  return out;
}

// ---------------------------------------------------------------------------

MosParams make_mos(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                   std::size_t vocab, std::size_t k) {
  MosParams p;
  p.gate = pb.linear(prefix + ".gate", d_model, k);
  for (std::size_t i = 0; i < k; ++i) {
    p.projections.push_back(pb.linear(prefix + ".proj" + std::to_string(i), d_model, d_model));
  }
  p.output_embedding = pb.normal(prefix + ".output_embedding", {vocab, d_model},
                                 0.2 / std::sqrt(static_cast<double>(d_model)));
  return p;
}

Tensor mos_head(const Tensor& h, const MosParams& p) {
  const std::size_t k = p.projections.size();
  const Tensor prior = softmax(matmul(h, p.gate), 1);
  Tensor mixture;
  for (std::size_t i = 0; i < k; ++i) {
    const Tensor component =
        softmax(matmul_nt(ops::tanh(matmul(h, p.projections[i])), p.output_embedding), 1);
    const Tensor weighted = mul_col(component, slice_cols(prior, i, 1));
    mixture = mixture.defined() ? add(mixture, weighted) : weighted;
  }
  return mixture;
}

// ---------------------------------------------------------------------------

ConvParams make_conv(ParamBuilder& pb, const std::string& prefix, std::size_t d_model,
                     std::size_t groups, std::size_t width, bool dynamic) {
  if (groups == 0 || d_model % groups != 0) {
    throw ConfigError("conv block: d_model must be divisible by the kernel group count");
  }
  ConvParams p;
  p.width = width;
  p.groups = groups;
  p.dynamic = dynamic;
  p.w_in = pb.linear(prefix + ".w_in", d_model, 2 * d_model);
  if (dynamic) {
    p.kernel_proj = pb.linear(prefix + ".kernel_proj", d_model, groups * width);
  } else {
    p.kernel = pb.normal(prefix + ".kernel", {width, groups}, 1.0);
  }
  p.w_out = pb.linear(prefix + ".w_out", d_model, d_model);
  return p;
}

Tensor conv_input(const Tensor& x, const ConvParams& p) {
  const std::size_t d = x.cols();
  const Tensor u = matmul(x, p.w_in);
  return mul(slice_cols(u, 0, d), sigmoid(slice_cols(u, d, d)));
}

Tensor lconv_kernel(const ConvParams& p) { return softmax(p.kernel, 0); }

Tensor dconv_kernels(const Tensor& h, const ConvParams& p) {
  const std::size_t n = h.rows();
  const Tensor raw = reshape(matmul(h, p.kernel_proj), {n * p.groups, p.width});
  return reshape(softmax(raw, 1), {n, p.groups * p.width});
}

Tensor lconv_block(const Tensor& x, const ConvParams& p, bool causal) {
  const Tensor h = conv_input(x, p);
  const Tensor y =
      depthwise_conv1d(h, lconv_kernel(p), causal ? Padding::kCausal : Padding::kSame);
  return matmul(y, p.w_out);
}

Tensor dconv_block(const Tensor& x, const ConvParams& p, bool causal) {
  const Tensor h = conv_input(x, p);
  const Tensor y = dynamic_conv1d(h, dconv_kernels(h, p), p.width,
                                  causal ? Padding::kCausal : Padding::kSame);
  return matmul(y, p.w_out);
}

// ---------------------------------------------------------------------------

MixerParams make_mixer(ParamBuilder& pb, const std::string& prefix, std::size_t length,
                       std::size_t d_model, std::size_t token_dim, std::size_t d_ff) {
  MixerParams p;
  p.token_norm = pb.ones(prefix + ".token_norm", {1, d_model});
  p.token_w1 = pb.normal(prefix + ".token_w1", {token_dim, length},
                         1.0 / std::sqrt(static_cast<double>(length)));
  p.token_b1 = pb.normal(prefix + ".token_b1", {token_dim, 1}, 0.02);
  p.token_w2 = pb.normal(prefix + ".token_w2", {length, token_dim},
                         1.0 / std::sqrt(static_cast<double>(token_dim)));
  p.token_b2 = pb.normal(prefix + ".token_b2", {length, 1}, 0.02);
  p.channel_norm = pb.ones(prefix + ".channel_norm", {1, d_model});
  p.channel_wi = pb.linear(prefix + ".channel_wi", d_model, d_ff);
  p.channel_bi = pb.normal(prefix + ".channel_bi", {1, d_ff}, 0.02);
  p.channel_wo = pb.linear(prefix + ".channel_wo", d_ff, d_model);
  p.channel_bo = pb.normal(prefix + ".channel_bo", {1, d_model}, 0.02);
  return p;
}

Tensor mixer_block(const Tensor& x, const MixerParams& p) {
  if (x.rows() != p.token_w1.cols()) {
    throw ContractError("mixer_block: sequence length " + std::to_string(x.rows()) +
                        " differs from the fixed mixer length " +
                        std::to_string(p.token_w1.cols()) + "; pad upstream");
  }
  const Tensor a = rms_norm(x, p.token_norm);
  const Tensor hidden = gelu(add_broadcast(matmul(p.token_w1, a), p.token_b1));
  const Tensor mixed = add(x, add_broadcast(matmul(p.token_w2, hidden), p.token_b2));
  const Tensor b = rms_norm(mixed, p.channel_norm);
  const Tensor inner = gelu(add_broadcast(matmul(b, p.channel_wi), p.channel_bi));
  return add(mixed, add_broadcast(matmul(inner, p.channel_wo), p.channel_bo));
}

// ---------------------------------------------------------------------------

EvolvedEncoderParams make_evolved_encoder(ParamBuilder& pb, const std::string& prefix,
                                          const ModelConfig& c) {
  const std::size_t d = c.d_model;
  EvolvedEncoderParams p;
  p.glu_norm = pb.ones(prefix + ".glu_norm", {1, d});
  p.glu_value = pb.linear(prefix + ".glu_value", d, d);
  p.glu_gate = pb.linear(prefix + ".glu_gate", d, d);
  p.conv_norm = pb.ones(prefix + ".conv_norm", {1, d});
  p.left = pb.linear(prefix + ".left", d, 4 * d);
  p.right = pb.linear(prefix + ".right", 3 * d, d / 2);
  p.hidden_norm = pb.ones(prefix + ".hidden_norm", {1, 4 * d});
  p.sep_depthwise = pb.normal(prefix + ".sep_depthwise", {kEvolvedEncoderSepWidth, 4 * d},
                              1.0 / std::sqrt(static_cast<double>(kEvolvedEncoderSepWidth)));
  p.sep_pointwise = pb.linear(prefix + ".sep_pointwise", 4 * d, d / 2);
  p.attn_norm = pb.ones(prefix + ".attn_norm", {1, d});
  p.attn = make_attention(pb, prefix + ".attention", d, c.n_heads, c.d_kv);
  p.ffn_norm = pb.ones(prefix + ".ffn_norm", {1, d});
  p.ffn = make_ffn(pb, prefix + ".ffn", d, c.d_ff);
  return p;
}

EvolvedDecoderParams make_evolved_decoder(ParamBuilder& pb, const std::string& prefix,
                                          const ModelConfig& c) {
  const std::size_t d = c.d_model;
  auto depthwise = [&](const std::string& name, std::size_t width, std::size_t channels) {
    return pb.normal(prefix + name, {width, channels},
                     1.0 / std::sqrt(static_cast<double>(width)));
  };
  EvolvedDecoderParams p;
  p.branch_norm = pb.ones(prefix + ".branch_norm", {1, d});
  p.branch_self = make_attention(pb, prefix + ".branch_self", d, c.n_heads, c.d_kv);
  p.branch_cross = make_attention(pb, prefix + ".branch_cross", d, c.n_heads, c.d_kv);
  p.conv_norm = pb.ones(prefix + ".conv_norm", {1, d});
  p.left_depthwise = depthwise(".left_depthwise", kEvolvedDecoderLeftWidth, d);
  p.left_pointwise = pb.linear(prefix + ".left_pointwise", d, 4 * d);
  p.right_depthwise = depthwise(".right_depthwise", kEvolvedDecoderRightWidth, d);
  p.right_pointwise = pb.linear(prefix + ".right_pointwise", d, d / 2);
  p.hidden_norm = pb.ones(prefix + ".hidden_norm", {1, 4 * d});
  p.sep_depthwise = depthwise(".sep_depthwise", kEvolvedDecoderSepWidth, 4 * d);
  p.sep_pointwise = pb.linear(prefix + ".sep_pointwise", 4 * d, d);
  p.self_norm = pb.ones(prefix + ".self_norm", {1, d});
  p.self_attn = make_attention(pb, prefix + ".self_attention", d, c.n_heads, c.d_kv);
  p.cross_norm = pb.ones(prefix + ".cross_norm", {1, d});
  p.cross_attn = make_attention(pb, prefix + ".cross_attention", d, c.n_heads, c.d_kv);
  p.ffn_norm = pb.ones(prefix + ".ffn_norm", {1, d});
  p.ffn = make_ffn(pb, prefix + ".ffn", d, c.d_ff);
  return p;
}

Tensor evolved_encoder_block(const Tensor& x, const EvolvedEncoderParams& p,
                             std::span<const Tensor> biases) {
  const std::size_t d = x.cols();
  const Tensor a = rms_norm(x, p.glu_norm);
  Tensor h = add(x, mul(matmul(a, p.glu_value), sigmoid(matmul(a, p.glu_gate))));

  const Tensor b = rms_norm(h, p.conv_norm);
  const Tensor left = relu(matmul(b, p.left));
  const std::vector<Tensor> taps = {shift_rows(b, 1), b, shift_rows(b, -1)};
  const Tensor right = relu(matmul(concat_cols(taps), p.right));
  const Tensor hidden = rms_norm(add(left, pad_cols(right, 4 * d)), p.hidden_norm);
  const Tensor sep =
      matmul(depthwise_conv1d(hidden, p.sep_depthwise, Padding::kSame), p.sep_pointwise);
  h = add(h, pad_cols(sep, d));

  const Tensor c = rms_norm(h, p.attn_norm);
  h = add(h, rel_attention(c, c, p.attn, biases, false));
  return add(h, ffn(rms_norm(h, p.ffn_norm), p.ffn, Activation::kRelu));
}

Tensor evolved_decoder_block(const Tensor& x, const Tensor& memory,
                             const EvolvedDecoderParams& p, std::span<const Tensor> biases) {
  const std::size_t d = x.cols();
  const Tensor a = rms_norm(x, p.branch_norm);
  Tensor h = add(x, add(rel_attention(a, a, p.branch_self, biases, true),
                        rel_attention(a, memory, p.branch_cross, {}, false)));

  const Tensor b = rms_norm(h, p.conv_norm);
  const Tensor left = relu(matmul(depthwise_conv1d(b, p.left_depthwise, Padding::kCausal),
                                  p.left_pointwise));
  const Tensor right =
      matmul(depthwise_conv1d(b, p.right_depthwise, Padding::kCausal), p.right_pointwise);
  const Tensor hidden = rms_norm(add(left, pad_cols(right, 4 * d)), p.hidden_norm);
  h = add(h, matmul(depthwise_conv1d(hidden, p.sep_depthwise, Padding::kCausal),
                    p.sep_pointwise));

  const Tensor s = rms_norm(h, p.self_norm);
  h = add(h, rel_attention(s, s, p.self_attn, biases, true));
  h = add(h, rel_attention(rms_norm(h, p.cross_norm), memory, p.cross_attn, {}, false));
  return add(h, ffn(rms_norm(h, p.ffn_norm), p.ffn, Activation::kSilu));
}

}  // namespace archscale::layers
