#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "archscale/config.hpp"
#include "archscale/layers.hpp"
#include "archscale/tensor.hpp"

namespace archscale {

// Component keys shared by the instrumented forward pass and the cost model.
namespace component {
inline constexpr std::string_view kEmbedding = "embedding";
inline constexpr std::string_view kEncoderMixing = "encoder.mixing";
inline constexpr std::string_view kEncoderFfn = "encoder.ffn";
inline constexpr std::string_view kEncoderPool = "encoder.pool";
inline constexpr std::string_view kEncoderNorm = "encoder.final_norm";
inline constexpr std::string_view kDecoderSelf = "decoder.self";
inline constexpr std::string_view kDecoderCross = "decoder.cross";
inline constexpr std::string_view kDecoderFfn = "decoder.ffn";
inline constexpr std::string_view kDecoderNorm = "decoder.final_norm";
inline constexpr std::string_view kOutput = "output";
}  // namespace component

struct ForwardOptions {
  // Replaces the GLU gate branch with ones (GLU family only).
  bool neutralize_glu_gate = false;
};

struct ForwardResult {
  Tensor logits;    // [n_dec x vocab]; log-probabilities for MoS
  Tensor aux_loss;  // Switch load-balancing term summed over MoE layers; undefined otherwise
  std::size_t encoder_length = 0;  // rows of the encoder output (after pooling / padding)
};

// An encoder-decoder model of one family. Copies share parameter storage.
class Model {
 public:
  // Validates the config; throws ConfigError.
  static Model build(const ModelConfig& config, std::uint64_t seed = 0);

  const ModelConfig& config() const;
  // Unique parameter tensors in registration order (shared weights appear once).
  const std::vector<layers::NamedParameter>& parameters() const;
  std::size_t parameter_count() const;
  Tensor parameter(std::string_view name) const;  // throws InputError

  Tensor encode(std::span<const int> enc_ids) const;
  // dec_ids is the shifted decoder input; position t sees dec_ids[0..t].
  ForwardResult forward(std::span<const int> enc_ids, std::span<const int> dec_ids,
                        const ForwardOptions& options = {}) const;
  // Mean token cross-entropy plus the weighted Switch auxiliary loss.
  Tensor loss(std::span<const int> enc_ids, std::span<const int> dec_in,
              std::span<const int> dec_target) const;
  // Greedy decoding from `start` until `stop` or max_len tokens (excluding start).
  std::vector<int> greedy_decode(std::span<const int> enc_ids, std::size_t max_len, int start,
                                 int stop) const;

  // Binary checkpoint; see README for the byte layout.
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

  struct Impl;

 private:
  explicit Model(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t n_enc = 6;
  std::size_t n_dec = 5;
  std::size_t samples_per_tensor = 3;  // coordinates probed per parameter tensor
  double step = 1e-5;
  double floor = 1e-6;  // denominator floor for the relative error
};

struct GradcheckReport {
  Family family = Family::kTransformer;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::string worst_param;
  std::string worst_op;  // block type owning the worst parameter
  bool passed(double tolerance = 1e-4) const { return max_rel_error < tolerance; }
};

// Central-difference check of d loss / d param on random coordinates.
GradcheckReport gradcheck(const Model& model, const GradcheckOptions& options = {});

// Small config used by gradient and property tests (d_model 16).
ModelConfig tiny_config(Family family);

}  // namespace archscale
