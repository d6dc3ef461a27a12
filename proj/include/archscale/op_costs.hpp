#pragma once

#include <cstdint>

// Multiplies charged per output element by the elementwise and reduction ops.
// The tensor ops and the closed-form cost model both read these, so the two
// accountings agree by construction. Additions, comparisons and data movement
// are free; transcendental functions are charged as one multiply each.
namespace archscale::op_costs {

inline constexpr std::uint64_t kMul = 1;        // a*b, x*s, x*col
inline constexpr std::uint64_t kRelu = 0;
inline constexpr std::uint64_t kTanh = 1;
inline constexpr std::uint64_t kSigmoid = 2;    // exp + reciprocal
inline constexpr std::uint64_t kSilu = 3;       // sigmoid + product
inline constexpr std::uint64_t kGelu = 7;       // tanh approximation: x^3, 3 scalings, tanh, x*, 0.5*
inline constexpr std::uint64_t kLog = 1;
inline constexpr std::uint64_t kSoftmax = 2;    // exp + normalisation
inline constexpr std::uint64_t kRmsNorm = 3;    // square, normalise, scale
inline constexpr std::uint64_t kMeanPool = 1;   // per pooled output element
inline constexpr std::uint64_t kMeanRows = 1;   // per output column
inline constexpr std::uint64_t kCrossEntropy = 2;

}  // namespace archscale::op_costs
