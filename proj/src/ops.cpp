#include "archscale/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "archscale/errors.hpp"
#include "archscale/op_costs.hpp"

namespace archscale::ops {

namespace {

using detail::Node;

void charge(std::uint64_t multiplies) {
  if (Tape* tape = Tape::active()) tape->add_multiplies(multiplies);
}

Tensor finish(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
              std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  Tape* tape = Tape::active();
  bool needs_grad = false;
  for (const Tensor* in : inputs) needs_grad = needs_grad || in->requires_grad();
  if (needs_grad && tape != nullptr && tape->records_gradients()) {
    node->requires_grad = true;
    for (const Tensor* in : inputs) node->inputs.push_back(in->node());
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of input i, or nullptr when that input is a constant.
double* grad_of(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

const std::vector<double>& value_of(Node& self, std::size_t i) { return self.inputs[i]->value; }

void require_2d(const Tensor& t, const char* op) {
  if (!t.defined() || t.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor");
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw DimensionError(std::string(op) + ": shape mismatch");
}

std::vector<double> transposed(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  }
  return out;
}

// c += a . b without the ascending-order guarantee; only used in backward.
void gemm_accumulate(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  std::vector<double> tmp(m * n);
  kernels::gemm(a, b, tmp.data(), m, k, n);
  for (std::size_t i = 0; i < m * n; ++i) c[i] += tmp[i];
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& x, std::uint64_t cost_per_element, Forward f, Derivative df) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  charge(cost_per_element * out.size());
  return finish(x.shape(), std::move(out), {&x}, [df](Node& self) {
    double* gx = grad_of(self, 0);
    if (gx == nullptr) return;
    const auto& xv = value_of(self, 0);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

std::size_t conv_left_pad(std::size_t width, Padding padding) {
  return padding == Padding::kCausal ? width - 1 : (width - 1) / 2;
}

}  // namespace

namespace kernels {

namespace {

constexpr std::size_t kTile = 32;

// c[r][0..32) = sum_p a[r][p] * panel[p][0..32) for `rows` rows, each element
// accumulated with fma in ascending p from zero.
void panel_rows(const double* a, std::size_t lda, const double* panel, std::size_t k,
                double* c, std::size_t ldc, std::size_t rows) {
#if defined(__AVX512F__)
  std::size_t r = 0;
  for (; r + 4 <= rows; r += 4) {
    __m512d acc[4][4];
    for (auto& row : acc) {
      for (auto& v : row) v = _mm512_setzero_pd();
    }
    const double* a0 = a + r * lda;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = panel + p * kTile;
      const __m512d b0 = _mm512_loadu_pd(bp);
      const __m512d b1 = _mm512_loadu_pd(bp + 8);
      const __m512d b2 = _mm512_loadu_pd(bp + 16);
      const __m512d b3 = _mm512_loadu_pd(bp + 24);
      for (std::size_t q = 0; q < 4; ++q) {
        const __m512d x = _mm512_set1_pd(a0[q * lda + p]);
        acc[q][0] = _mm512_fmadd_pd(x, b0, acc[q][0]);
        acc[q][1] = _mm512_fmadd_pd(x, b1, acc[q][1]);
        acc[q][2] = _mm512_fmadd_pd(x, b2, acc[q][2]);
        acc[q][3] = _mm512_fmadd_pd(x, b3, acc[q][3]);
      }
    }
    for (std::size_t q = 0; q < 4; ++q) {
      double* out = c + (r + q) * ldc;
      for (std::size_t v = 0; v < 4; ++v) _mm512_storeu_pd(out + 8 * v, acc[q][v]);
    }
  }
  for (; r < rows; ++r) {
    __m512d acc[4] = {_mm512_setzero_pd(), _mm512_setzero_pd(), _mm512_setzero_pd(),
                      _mm512_setzero_pd()};
    const double* ar = a + r * lda;
    for (std::size_t p = 0; p < k; ++p) {
      const __m512d x = _mm512_set1_pd(ar[p]);
      const double* bp = panel + p * kTile;
      for (std::size_t v = 0; v < 4; ++v) {
        acc[v] = _mm512_fmadd_pd(x, _mm512_loadu_pd(bp + 8 * v), acc[v]);
      }
    }
    for (std::size_t v = 0; v < 4; ++v) _mm512_storeu_pd(c + r * ldc + 8 * v, acc[v]);
  }
#else
  for (std::size_t r = 0; r < rows; ++r) {
    double acc[kTile] = {};
    const double* ar = a + r * lda;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = panel + p * kTile;
      const double x = ar[p];
      for (std::size_t j = 0; j < kTile; ++j) acc[j] = std::fma(x, bp[j], acc[j]);
    }
    std::copy(acc, acc + kTile, c + r * ldc);
  }
#endif
}

}  // namespace

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n) {
  thread_local std::vector<double> panel;
  std::size_t j0 = 0;
  for (; j0 + kTile <= n; j0 += kTile) {
    panel.resize(k * kTile);
    for (std::size_t p = 0; p < k; ++p) {
      std::copy_n(b + p * n + j0, kTile, panel.data() + p * kTile);
    }
    panel_rows(a, k, panel.data(), k, c + j0, n, m);
  }
  if (j0 < n) {
    const std::size_t w = n - j0;
    for (std::size_t i = 0; i < m; ++i) {
      double acc[kTile] = {};
      const double* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double* bp = b + p * n + j0;
        const double x = ai[p];
        for (std::size_t j = 0; j < w; ++j) acc[j] = std::fma(x, bp[j], acc[j]);
      }
      std::copy(acc, acc + w, c + i * n + j0);
    }
  }
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw DimensionError("matmul: inner dimensions differ");
  std::vector<double> out(m * n);
  kernels::gemm(a.data().data(), b.data().data(), out.data(), m, k, n);
  charge(static_cast<std::uint64_t>(m) * k * n);
  return finish({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const auto& av = value_of(self, 0);
    const auto& bv = value_of(self, 1);
    if (double* ga = grad_of(self, 0)) {
      const auto bt = transposed(bv.data(), k, n);
      gemm_accumulate(self.grad.data(), bt.data(), ga, m, n, k);
    }
    if (double* gb = grad_of(self, 1)) {
      const auto at = transposed(av.data(), m, k);
      gemm_accumulate(at.data(), self.grad.data(), gb, k, m, n);
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) throw DimensionError("matmul_nt: inner dimensions differ");
  const auto bt = transposed(b.data().data(), n, k);
  std::vector<double> out(m * n);
  kernels::gemm(a.data().data(), bt.data(), out.data(), m, k, n);
  charge(static_cast<std::uint64_t>(m) * k * n);
  return finish({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const auto& av = value_of(self, 0);
    const auto& bv = value_of(self, 1);
    if (double* ga = grad_of(self, 0)) {
      gemm_accumulate(self.grad.data(), bv.data(), ga, m, n, k);
    }
    if (double* gb = grad_of(self, 1)) {
      const auto gt = transposed(self.grad.data(), m, n);
      gemm_accumulate(gt.data(), av.data(), gb, n, m, k);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  return finish({c, r}, transposed(a.data().data(), r, c), {&a}, [r, c](Node& self) {
    if (double* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return finish(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (std::size_t in = 0; in < 2; ++in) {
      if (double* g = grad_of(self, in)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor add_broadcast(const Tensor& x, const Tensor& bias) {
  require_2d(x, "add_broadcast");
  require_2d(bias, "add_broadcast");
  const std::size_t r = x.rows(), c = x.cols();
  const bool row_bias = bias.rows() == 1 && bias.cols() == c;
  const bool col_bias = bias.cols() == 1 && bias.rows() == r;
  if (!row_bias && !col_bias) throw DimensionError("add_broadcast: bias shape mismatch");
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  const auto bv = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = xv[i * c + j] + (row_bias ? bv[j] : bv[i]);
    }
  }
  return finish(x.shape(), std::move(out), {&x, &bias}, [r, c, row_bias](Node& self) {
    if (double* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r * c; ++i) gx[i] += self.grad[i];
    }
    if (double* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gb[row_bias ? j : i] += self.grad[i * c + j];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  charge(op_costs::kMul * out.size());
  return finish(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const auto& av = value_of(self, 0);
    const auto& bv = value_of(self, 1);
    if (double* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += self.grad[i] * bv[i];
    }
    if (double* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] += self.grad[i] * av[i];
    }
  });
}

Tensor mul_col(const Tensor& x, const Tensor& col) {
  require_2d(x, "mul_col");
  require_2d(col, "mul_col");
  const std::size_t r = x.rows(), c = x.cols();
  if (col.rows() != r || col.cols() != 1) throw DimensionError("mul_col: expected [rows x 1]");
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  const auto cv = col.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * cv[i];
  }
  charge(op_costs::kMul * out.size());
  return finish(x.shape(), std::move(out), {&x, &col}, [r, c](Node& self) {
    const auto& xv = value_of(self, 0);
    const auto& cv = value_of(self, 1);
    if (double* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[i * c + j] * cv[i];
      }
    }
    if (double* gc = grad_of(self, 1)) {
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += self.grad[i * c + j] * xv[i * c + j];
        gc[i] += acc;
      }
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  charge(op_costs::kMul * out.size());
  return finish(x.shape(), std::move(out), {&x}, [factor](Node& self) {
    if (double* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * factor;
    }
  });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, op_costs::kRelu, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, op_costs::kGelu,
      [](double v) {
        const double u = kGeluC * (v + kGeluA * v * v * v);
        return 0.5 * v * (1.0 + std::tanh(u));
      },
      [](double v, double) {
        const double u = kGeluC * (v + kGeluA * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, op_costs::kTanh, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, op_costs::kSigmoid, stable_sigmoid,
               [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, op_costs::kSilu, [](double v) { return v * stable_sigmoid(v); },
      [](double v, double) {
        const double s = stable_sigmoid(v);
        return s + v * s * (1.0 - s);
      });
}

Tensor log(const Tensor& x) {
  return unary(
      x, op_costs::kLog, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor softmax(const Tensor& x, int axis) {
  require_2d(x, "softmax");
  if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
  const std::size_t r = x.rows(), c = x.cols();
  // Normalise `lines` vectors of length `len`; element e of line l sits at
  // l*line_stride + e*elem_stride.
  const std::size_t lines = axis == 1 ? r : c;
  const std::size_t len = axis == 1 ? c : r;
  const std::size_t line_stride = axis == 1 ? c : 1;
  const std::size_t elem_stride = axis == 1 ? 1 : c;
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * line_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < len; ++e) mx = std::max(mx, xv[base + e * elem_stride]);
    double total = 0.0;
    for (std::size_t e = 0; e < len; ++e) {
      const std::size_t idx = base + e * elem_stride;
      out[idx] = std::exp(xv[idx] - mx);
      total += out[idx];
    }
    const double inv = 1.0 / total;
    for (std::size_t e = 0; e < len; ++e) out[base + e * elem_stride] *= inv;
  }
  charge(op_costs::kSoftmax * out.size());
  return finish(x.shape(), std::move(out), {&x},
                [lines, len, line_stride, elem_stride](Node& self) {
                  double* gx = grad_of(self, 0);
                  if (gx == nullptr) return;
                  for (std::size_t l = 0; l < lines; ++l) {
                    const std::size_t base = l * line_stride;
                    double dot = 0.0;
                    for (std::size_t e = 0; e < len; ++e) {
                      const std::size_t idx = base + e * elem_stride;
                      dot += self.grad[idx] * self.value[idx];
                    }
                    for (std::size_t e = 0; e < len; ++e) {
                      const std::size_t idx = base + e * elem_stride;
                      gx[idx] += self.value[idx] * (self.grad[idx] - dot);
                    }
                  }
                });
}

Tensor rms_norm(const Tensor& x, const Tensor& scale_row) {
  require_2d(x, "rms_norm");
  require_2d(scale_row, "rms_norm");
  const std::size_t r = x.rows(), c = x.cols();
  if (scale_row.rows() != 1 || scale_row.cols() != c) {
    throw DimensionError("rms_norm: scale must be [1 x cols]");
  }
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  const auto sv = scale_row.data();
  for (std::size_t i = 0; i < r; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += xv[i * c + j] * xv[i * c + j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(c) + kRmsNormEpsilon);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * inv * sv[j];
  }
  charge(op_costs::kRmsNorm * out.size());
  return finish(x.shape(), std::move(out), {&x, &scale_row}, [r, c](Node& self) {
    const auto& xv = value_of(self, 0);
    const auto& sv = value_of(self, 1);
    double* gx = grad_of(self, 0);
    double* gs = grad_of(self, 1);
    std::vector<double> xhat(c), dxhat(c);
    for (std::size_t i = 0; i < r; ++i) {
      double ss = 0.0;
      for (std::size_t j = 0; j < c; ++j) ss += xv[i * c + j] * xv[i * c + j];
      const double inv = 1.0 / std::sqrt(ss / static_cast<double>(c) + kRmsNormEpsilon);
      double proj = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        xhat[j] = xv[i * c + j] * inv;
        dxhat[j] = self.grad[i * c + j] * sv[j];
        proj += dxhat[j] * xhat[j];
        if (gs != nullptr) gs[j] += self.grad[i * c + j] * xhat[j];
      }
      proj /= static_cast<double>(c);
      if (gx != nullptr) {
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += inv * (dxhat[j] - xhat[j] * proj);
      }
    }
  });
}

Tensor embed(std::span<const int> ids, const Tensor& table) {
  require_2d(table, "embed");
  const std::size_t vocab = table.rows(), width = table.cols();
  std::vector<int> rows(ids.begin(), ids.end());
  std::vector<double> out(rows.size() * width);
  const auto tv = table.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= vocab) {
      throw InputError("embed: token id " + std::to_string(rows[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  const std::size_t n = rows.size();
  return finish({n, width}, std::move(out), {&table},
                [rows = std::move(rows), width](Node& self) {
                  double* gt = grad_of(self, 0);
                  if (gt == nullptr) return;
                  for (std::size_t i = 0; i < rows.size(); ++i) {
                    double* dst = gt + static_cast<std::size_t>(rows[i]) * width;
                    for (std::size_t j = 0; j < width; ++j) dst[j] += self.grad[i * width + j];
                  }
                });
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernels, Padding padding) {
  require_2d(x, "depthwise_conv1d");
  require_2d(kernels, "depthwise_conv1d");
  const std::size_t n = x.rows(), d = x.cols(), w = kernels.rows(), groups = kernels.cols();
  if (groups == 0 || d % groups != 0) {
    throw DimensionError("depthwise_conv1d: channels not divisible by kernel groups");
  }
  const std::size_t per_group = d / groups;
  const std::size_t left = conv_left_pad(w, padding);
  std::vector<double> out(n * d, 0.0);
  const auto xv = x.data();
  const auto kv = kernels.data();
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t k = 0; k < w; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
      for (std::size_t c = 0; c < d; ++c) {
        out[t * d + c] += kv[k * groups + c / per_group] * xv[static_cast<std::size_t>(src) * d + c];
      }
    }
  }
  charge(static_cast<std::uint64_t>(n) * d * w);
  return finish({n, d}, std::move(out), {&x, &kernels},
                [n, d, w, groups, per_group, left](Node& self) {
                  const auto& xv = value_of(self, 0);
                  const auto& kv = value_of(self, 1);
                  double* gx = grad_of(self, 0);
                  double* gk = grad_of(self, 1);
                  for (std::size_t t = 0; t < n; ++t) {
                    for (std::size_t k = 0; k < w; ++k) {
                      const std::ptrdiff_t src =
                          static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(left);
                      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
                      const std::size_t s = static_cast<std::size_t>(src);
                      for (std::size_t c = 0; c < d; ++c) {
                        const double g = self.grad[t * d + c];
                        const std::size_t kidx = k * groups + c / per_group;
                        if (gx != nullptr) gx[s * d + c] += kv[kidx] * g;
                        if (gk != nullptr) gk[kidx] += xv[s * d + c] * g;
                      }
                    }
                  }
                });
}

Tensor dynamic_conv1d(const Tensor& x, const Tensor& kernels, std::size_t width,
                      Padding padding) {
  require_2d(x, "dynamic_conv1d");
  require_2d(kernels, "dynamic_conv1d");
  const std::size_t n = x.rows(), d = x.cols();
  if (width == 0 || kernels.rows() != n || kernels.cols() % width != 0) {
    throw DimensionError("dynamic_conv1d: kernels must be [n x groups*width]");
  }
  const std::size_t groups = kernels.cols() / width;
  if (groups == 0 || d % groups != 0) {
    throw DimensionError("dynamic_conv1d: channels not divisible by kernel groups");
  }
  const std::size_t per_group = d / groups;
  const std::size_t kc = groups * width;
  const std::size_t left = conv_left_pad(width, padding);
  std::vector<double> out(n * d, 0.0);
  const auto xv = x.data();
  const auto kv = kernels.data();
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t k = 0; k < width; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
      for (std::size_t c = 0; c < d; ++c) {
        out[t * d + c] +=
            kv[t * kc + (c / per_group) * width + k] * xv[static_cast<std::size_t>(src) * d + c];
      }
    }
  }
  charge(static_cast<std::uint64_t>(n) * d * width);
  return finish({n, d}, std::move(out), {&x, &kernels},
                [n, d, width, kc, per_group, left](Node& self) {
                  const auto& xv = value_of(self, 0);
                  const auto& kv = value_of(self, 1);
                  double* gx = grad_of(self, 0);
                  double* gk = grad_of(self, 1);
                  for (std::size_t t = 0; t < n; ++t) {
                    for (std::size_t k = 0; k < width; ++k) {
                      const std::ptrdiff_t src =
                          static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(left);
                      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
                      const std::size_t s = static_cast<std::size_t>(src);
                      for (std::size_t c = 0; c < d; ++c) {
                        const double g = self.grad[t * d + c];
                        const std::size_t kidx = t * kc + (c / per_group) * width + k;
                        if (gx != nullptr) gx[s * d + c] += kv[kidx] * g;
                        if (gk != nullptr) gk[kidx] += xv[s * d + c] * g;
                      }
                    }
                  }
                });
}

Tensor mean_pool_stride2(const Tensor& x) {
  require_2d(x, "mean_pool_stride2");
  const std::size_t n = x.rows(), d = x.cols();
  const std::size_t m = (n + 1) / 2;
  std::vector<double> out(m * d);
  const auto xv = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const bool pair = 2 * i + 1 < n;
    for (std::size_t c = 0; c < d; ++c) {
      out[i * d + c] = pair ? 0.5 * (xv[2 * i * d + c] + xv[(2 * i + 1) * d + c])
                            : 1.0 * xv[2 * i * d + c];
    }
  }
  charge(op_costs::kMeanPool * out.size());
  return finish({m, d}, std::move(out), {&x}, [n, d, m](Node& self) {
    double* gx = grad_of(self, 0);
    if (gx == nullptr) return;
    for (std::size_t i = 0; i < m; ++i) {
      const bool pair = 2 * i + 1 < n;
      for (std::size_t c = 0; c < d; ++c) {
        const double g = self.grad[i * d + c];
        if (pair) {
          gx[2 * i * d + c] += 0.5 * g;
          gx[(2 * i + 1) * d + c] += 0.5 * g;
        } else {
          gx[2 * i * d + c] += g;
        }
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_2d(logits, "cross_entropy");
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m) throw DimensionError("cross_entropy: one target per row required");
  if (m == 0) throw DimensionError("cross_entropy: empty batch");
  std::vector<int> tg(targets.begin(), targets.end());
  for (int t : tg) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw InputError("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
    }
  }
  const auto lv = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = lv.data() + i * v;
    const double mx = *std::max_element(row, row + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    total += mx + std::log(s) - row[tg[i]];
  }
  charge(op_costs::kCrossEntropy * m * v);
  return finish({}, {total / static_cast<double>(m)}, {&logits},
                [m, v, tg = std::move(tg)](Node& self) {
                  double* gl = grad_of(self, 0);
                  if (gl == nullptr) return;
                  const auto& lv = value_of(self, 0);
                  const double g = self.grad[0] / static_cast<double>(m);
                  for (std::size_t i = 0; i < m; ++i) {
                    const double* row = lv.data() + i * v;
                    const double mx = *std::max_element(row, row + v);
                    double s = 0.0;
                    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
                    for (std::size_t j = 0; j < v; ++j) {
                      const double p = std::exp(row[j] - mx) / s;
                      gl[i * v + j] += g * (p - (static_cast<int>(j) == tg[i] ? 1.0 : 0.0));
                    }
                  }
                });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return finish({}, {total}, {&x}, [](Node& self) {
    if (double* gx = grad_of(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
    }
  });
}

Tensor mean_rows(const Tensor& x) {
  require_2d(x, "mean_rows");
  const std::size_t r = x.rows(), c = x.cols();
  if (r == 0) throw DimensionError("mean_rows: no rows");
  std::vector<double> out(c, 0.0);
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
  }
  const double inv = 1.0 / static_cast<double>(r);
  for (double& v : out) v *= inv;
  charge(op_costs::kMeanRows * c);
  return finish({1, c}, std::move(out), {&x}, [r, c, inv](Node& self) {
    if (double* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j] * inv;
      }
    }
  });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_2d(x, "slice_cols");
  const std::size_t r = x.rows(), c = x.cols();
  if (start + count > c) throw DimensionError("slice_cols: range outside tensor");
  std::vector<double> out(r * count);
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(i * c + start), count,
                out.begin() + static_cast<std::ptrdiff_t>(i * count));
  }
  return finish({r, count}, std::move(out), {&x}, [r, c, start, count](Node& self) {
    if (double* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < count; ++j) gx[i * c + start + j] += self.grad[i * count + j];
      }
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t r = parts.front().rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != r) throw DimensionError("concat_cols: row counts differ");
    offsets.push_back(total);
    total += p.cols();
  }
  std::vector<double> out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    const std::size_t pc = parts[k].cols();
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(i * pc), pc,
                  out.begin() + static_cast<std::ptrdiff_t>(i * total + offsets[k]));
    }
  }
  auto node = std::make_shared<Node>();
  node->shape = {r, total};
  node->value = std::move(out);
  node->leaf = false;
  Tape* tape = Tape::active();
  bool needs_grad = false;
  for (const Tensor& p : parts) needs_grad = needs_grad || p.requires_grad();
  if (needs_grad && tape != nullptr && tape->records_gradients()) {
    node->requires_grad = true;
    for (const Tensor& p : parts) node->inputs.push_back(p.node());
    node->backward = [r, total, offsets](Node& self) {
      for (std::size_t k = 0; k < self.inputs.size(); ++k) {
        double* g = grad_of(self, k);
        if (g == nullptr) continue;
        const std::size_t pc = self.inputs[k]->shape[1];
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += self.grad[i * total + offsets[k] + j];
        }
      }
    };
    tape->record(node);
  }
  return Tensor(std::move(node));
}

Tensor pad_cols(const Tensor& x, std::size_t total) {
  require_2d(x, "pad_cols");
  const std::size_t r = x.rows(), c = x.cols();
  if (total < c) throw DimensionError("pad_cols: target narrower than input");
  std::vector<double> out(r * total, 0.0);
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(i * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(i * total));
  }
  return finish({r, total}, std::move(out), {&x}, [r, c, total](Node& self) {
    if (double* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[i * total + j];
      }
    }
  });
}

Tensor shift_rows(const Tensor& x, std::ptrdiff_t offset) {
  require_2d(x, "shift_rows");
  const std::size_t r = x.rows(), c = x.cols();
  const auto n = static_cast<std::ptrdiff_t>(r);
  std::vector<double> out(r * c, 0.0);
  const auto xv = x.data();
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    const std::ptrdiff_t src = t - offset;
    if (src < 0 || src >= n) continue;
    std::copy_n(xv.begin() + src * static_cast<std::ptrdiff_t>(c), c,
                out.begin() + t * static_cast<std::ptrdiff_t>(c));
  }
  return finish({r, c}, std::move(out), {&x}, [n, c, offset](Node& self) {
    double* gx = grad_of(self, 0);
    if (gx == nullptr) return;
    for (std::ptrdiff_t t = 0; t < n; ++t) {
      const std::ptrdiff_t src = t - offset;
      if (src < 0 || src >= n) continue;
      for (std::size_t j = 0; j < c; ++j) {
        gx[static_cast<std::size_t>(src) * c + j] += self.grad[static_cast<std::size_t>(t) * c + j];
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (detail::shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: element count changes");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return finish(std::move(shape), std::move(out), {&x}, [](Node& self) {
    if (double* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::ptrdiff_t> rows) {
  require_2d(x, "gather_rows");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<std::ptrdiff_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * c, 0.0);
  const auto xv = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0) continue;
    if (static_cast<std::size_t>(idx[i]) >= r) throw DimensionError("gather_rows: row out of range");
    std::copy_n(xv.begin() + idx[i] * static_cast<std::ptrdiff_t>(c), c,
                out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  const std::size_t n = idx.size();
  return finish({n, c}, std::move(out), {&x}, [idx = std::move(idx), c](Node& self) {
    double* gx = grad_of(self, 0);
    if (gx == nullptr) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0) continue;
      for (std::size_t j = 0; j < c; ++j) {
        gx[static_cast<std::size_t>(idx[i]) * c + j] += self.grad[i * c + j];
      }
    }
  });
}

Tensor scatter_rows(const Tensor& src, std::span<const std::ptrdiff_t> dest, std::size_t n_rows) {
  require_2d(src, "scatter_rows");
  const std::size_t r = src.rows(), c = src.cols();
  if (dest.size() != r) throw DimensionError("scatter_rows: one destination per source row");
  std::vector<std::ptrdiff_t> idx(dest.begin(), dest.end());
  std::vector<double> out(n_rows * c, 0.0);
  const auto sv = src.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (idx[i] < 0) continue;
    if (static_cast<std::size_t>(idx[i]) >= n_rows) {
      throw DimensionError("scatter_rows: destination out of range");
    }
    for (std::size_t j = 0; j < c; ++j) {
      out[static_cast<std::size_t>(idx[i]) * c + j] += sv[i * c + j];
    }
  }
  return finish({n_rows, c}, std::move(out), {&src}, [idx = std::move(idx), c](Node& self) {
    double* gs = grad_of(self, 0);
    if (gs == nullptr) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0) continue;
      for (std::size_t j = 0; j < c; ++j) {
        gs[i * c + j] += self.grad[static_cast<std::size_t>(idx[i]) * c + j];
      }
    }
  });
}

Tensor pick_cols(const Tensor& x, std::span<const std::size_t> cols) {
  require_2d(x, "pick_cols");
  const std::size_t r = x.rows(), c = x.cols();
  if (cols.size() != r) throw DimensionError("pick_cols: one column per row");
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  std::vector<double> out(r);
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (idx[i] >= c) throw DimensionError("pick_cols: column out of range");
    out[i] = xv[i * c + idx[i]];
  }
  return finish({r, 1}, std::move(out), {&x}, [idx = std::move(idx), c](Node& self) {
    if (double* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) gx[i * c + idx[i]] += self.grad[i];
    }
  });
}

Tensor mask_future(const Tensor& x) {
  require_2d(x, "mask_future");
  const std::size_t r = x.rows(), c = x.cols();
  if (r != c) throw DimensionError("mask_future: causal masking needs square logits");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = i + 1; j < c; ++j) out[i * c + j] = -std::numeric_limits<double>::infinity();
  }
  return finish({r, c}, std::move(out), {&x}, [r, c](Node& self) {
    if (double* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j <= i; ++j) gx[i * c + j] += self.grad[i * c + j];
      }
    }
  });
}

std::size_t relative_position_bucket(std::ptrdiff_t relative_position, bool bidirectional,
                                     std::size_t num_buckets, std::size_t max_distance) {
  std::size_t bucket = 0;
  std::ptrdiff_t n = -relative_position;
  std::size_t buckets = num_buckets;
  if (bidirectional) {
    buckets /= 2;
    if (n < 0) bucket += buckets;
    n = n < 0 ? -n : n;
  } else {
    n = std::max<std::ptrdiff_t>(n, 0);
  }
  const auto max_exact = static_cast<std::ptrdiff_t>(buckets / 2);
  if (n < max_exact) return bucket + static_cast<std::size_t>(n);
  const double ratio = std::log(static_cast<double>(n) / static_cast<double>(max_exact)) /
                       std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact));
  auto large = static_cast<std::size_t>(max_exact) +
               static_cast<std::size_t>(ratio * static_cast<double>(buckets - static_cast<std::size_t>(max_exact)));
  large = std::min(large, buckets - 1);
  return bucket + large;
}

Tensor relative_bias(const Tensor& table, std::size_t head, std::size_t nq, std::size_t nk,
                     bool bidirectional, std::size_t max_distance) {
  require_2d(table, "relative_bias");
  const std::size_t buckets = table.rows(), heads = table.cols();
  if (head >= heads) throw DimensionError("relative_bias: head out of range");
  std::vector<std::size_t> index(nq * nk);
  std::vector<double> out(nq * nk);
  const auto tv = table.data();
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < nk; ++j) {
      const auto rel = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i);
      const std::size_t b = relative_position_bucket(rel, bidirectional, buckets, max_distance);
      index[i * nk + j] = b * heads + head;
      out[i * nk + j] = tv[index[i * nk + j]];
    }
  }
  return finish({nq, nk}, std::move(out), {&table}, [index = std::move(index)](Node& self) {
    if (double* gt = grad_of(self, 0)) {
      for (std::size_t i = 0; i < index.size(); ++i) gt[index[i]] += self.grad[i];
    }
  });
}

Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal,
                        double eps) {
  require_2d(q, "linear_attention");
  require_2d(k, "linear_attention");
  require_2d(v, "linear_attention");
  const std::size_t nq = q.rows(), nk = k.rows(), dk = q.cols(), dv = v.cols();
  if (k.cols() != dk || v.rows() != nk) throw DimensionError("linear_attention: shape mismatch");
  if (causal && nq != nk) throw DimensionError("linear_attention: causal form needs nq == nk");
  const auto qv = q.data();
  const auto kv = k.data();
  const auto vv = v.data();
  std::vector<double> out(nq * dv);
  std::vector<double> state(dk * dv, 0.0);
  std::vector<double> norm(dk, 0.0);
  auto absorb = [&](std::size_t s) {
    for (std::size_t a = 0; a < dk; ++a) {
      const double ka = kv[s * dk + a];
      norm[a] += ka;
      for (std::size_t b = 0; b < dv; ++b) state[a * dv + b] += ka * vv[s * dv + b];
    }
  };
  auto emit = [&](std::size_t t) {
    double den = eps;
    for (std::size_t a = 0; a < dk; ++a) den += qv[t * dk + a] * norm[a];
    for (std::size_t b = 0; b < dv; ++b) {
      double num = 0.0;
      for (std::size_t a = 0; a < dk; ++a) num += qv[t * dk + a] * state[a * dv + b];
      out[t * dv + b] = num / den;
    }
  };
  if (causal) {
    for (std::size_t t = 0; t < nq; ++t) {
      absorb(t);
      emit(t);
    }
  } else {
    for (std::size_t s = 0; s < nk; ++s) absorb(s);
    for (std::size_t t = 0; t < nq; ++t) emit(t);
  }
  charge(static_cast<std::uint64_t>(nk) * dk * dv +
         static_cast<std::uint64_t>(nq) * (dk * dv + dk + dv));
  return finish({nq, dv}, std::move(out), {&q, &k, &v}, [nq, nk, dk, dv, causal, eps](Node& self) {
    const auto& qv = value_of(self, 0);
    const auto& kv = value_of(self, 1);
    const auto& vv = value_of(self, 2);
    double* gq = grad_of(self, 0);
    double* gk = grad_of(self, 1);
    double* gv = grad_of(self, 2);
    std::vector<double> state(dk * dv, 0.0), norm(dk, 0.0);
    std::vector<double> g_num(nq * dv), g_den(nq);
    auto absorb = [&](std::size_t s) {
      for (std::size_t a = 0; a < dk; ++a) {
        norm[a] += kv[s * dk + a];
        for (std::size_t b = 0; b < dv; ++b) state[a * dv + b] += kv[s * dk + a] * vv[s * dv + b];
      }
    };
    // Forward sweep: per-query gradients need the (prefix) state at t.
    auto query_grad = [&](std::size_t t) {
      double den = eps;
      for (std::size_t a = 0; a < dk; ++a) den += qv[t * dk + a] * norm[a];
      double dot = 0.0;
      for (std::size_t b = 0; b < dv; ++b) {
        g_num[t * dv + b] = self.grad[t * dv + b] / den;
        dot += self.grad[t * dv + b] * self.value[t * dv + b];
      }
      g_den[t] = -dot / den;
      if (gq == nullptr) return;
      for (std::size_t a = 0; a < dk; ++a) {
        double acc = g_den[t] * norm[a];
        for (std::size_t b = 0; b < dv; ++b) acc += state[a * dv + b] * g_num[t * dv + b];
        gq[t * dk + a] += acc;
      }
    };
    if (causal) {
      for (std::size_t t = 0; t < nq; ++t) {
        absorb(t);
        query_grad(t);
      }
    } else {
      for (std::size_t s = 0; s < nk; ++s) absorb(s);
      for (std::size_t t = 0; t < nq; ++t) query_grad(t);
    }
    if (gk == nullptr && gv == nullptr) return;
    // Reverse sweep: key s receives from every query that can see it.
    std::vector<double> acc_state(dk * dv, 0.0), acc_norm(dk, 0.0);
    auto take_query = [&](std::size_t t) {
      for (std::size_t a = 0; a < dk; ++a) {
        const double qa = qv[t * dk + a];
        acc_norm[a] += g_den[t] * qa;
        for (std::size_t b = 0; b < dv; ++b) acc_state[a * dv + b] += qa * g_num[t * dv + b];
      }
    };
    auto key_grad = [&](std::size_t s) {
      for (std::size_t a = 0; a < dk; ++a) {
        if (gk != nullptr) {
          double acc = acc_norm[a];
          for (std::size_t b = 0; b < dv; ++b) acc += acc_state[a * dv + b] * vv[s * dv + b];
          gk[s * dk + a] += acc;
        }
      }
      if (gv != nullptr) {
        for (std::size_t b = 0; b < dv; ++b) {
          double acc = 0.0;
          for (std::size_t a = 0; a < dk; ++a) acc += acc_state[a * dv + b] * kv[s * dk + a];
          gv[s * dv + b] += acc;
        }
      }
    };
    if (causal) {
      for (std::size_t t = nq; t-- > 0;) {
        take_query(t);
        key_grad(t);
      }
    } else {
      for (std::size_t t = 0; t < nq; ++t) take_query(t);
      for (std::size_t s = 0; s < nk; ++s) key_grad(s);
    }
  });
}

}  // namespace archscale::ops
