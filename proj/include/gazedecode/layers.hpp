#pragma once

// Forward and backward passes for the fixed layer set used by the gaze
// encoder and the conditional VAE. Every reduction runs in a fixed order
// (row-major, left to right over the reduced index) so results are
// bit-reproducible; the inner loops are written as axpy updates over the
// contiguous output index, which vectorizes without reassociating sums.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gazedecode/errors.hpp"
#include "gazedecode/tensor.hpp"

namespace gazedecode {

namespace detail {

// C[m x n] += A[m x k] * B[k x n], all row-major.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fully connected layer: out = x * w + b.

template <typename T>
struct LinearGrads {
  BasicTensor<T> x;  // empty when not requested
  BasicTensor<T> w;
  BasicTensor<T> b;
};

template <typename T>
void check_linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(w.shape(), 2, "linear weight");
  require_rank(b.shape(), 1, "linear bias");
  if (x.dim(1) != w.dim(0))
    throw DimensionError("linear: input width " + std::to_string(x.dim(1)) +
                         " does not match weight rows " + std::to_string(w.dim(0)));
  if (b.dim(0) != w.dim(1))
    throw DimensionError("linear: bias length " + std::to_string(b.dim(0)) +
                         " does not match weight columns " + std::to_string(w.dim(1)));
}

template <typename T>
BasicTensor<T> linear_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                              const BasicTensor<T>& b) {
  check_linear(x, w, b);
  const std::size_t n = x.dim(0), d_in = w.dim(0), d_out = w.dim(1);
  BasicTensor<T> out({n, d_out});
  for (std::size_t i = 0; i < n; ++i)
    std::copy(b.data().begin(), b.data().end(), out.ptr() + i * d_out);
  detail::gemm_acc(x.ptr(), w.ptr(), out.ptr(), n, d_in, d_out);
  return out;
}

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                               const BasicTensor<T>& grad_out, bool want_grad_x = true) {
  const std::size_t n = x.dim(0), d_in = w.dim(0), d_out = w.dim(1);
  require_shape(grad_out.shape(), {n, d_out}, "linear upstream gradient");
  LinearGrads<T> g{BasicTensor<T>(), BasicTensor<T>({d_in, d_out}),
                   BasicTensor<T>({d_out})};
  // grad_w = x^T * grad_out, accumulated sample by sample.
  for (std::size_t s = 0; s < n; ++s) {
    const T* go = grad_out.ptr() + s * d_out;
    for (std::size_t i = 0; i < d_in; ++i) {
      const T xv = x(s, i);
      T* gw = g.w.ptr() + i * d_out;
      for (std::size_t j = 0; j < d_out; ++j) gw[j] += xv * go[j];
    }
    for (std::size_t j = 0; j < d_out; ++j) g.b[j] += go[j];
  }
  if (want_grad_x) {
    g.x = BasicTensor<T>({n, d_in});
    const std::vector<T> wt = detail::transpose(w.ptr(), d_in, d_out);
    detail::gemm_acc(grad_out.ptr(), wt.data(), g.x.ptr(), n, d_out, d_in);
  }
  return g;
}

// ---------------------------------------------------------------------------
// 3x3 cross-correlation with zero padding, stride 1 or 2.

struct ConvGeometry {
  std::size_t in_h, in_w, out_h, out_w, stride, pad;
};

inline ConvGeometry conv_geometry(std::size_t h, std::size_t w, std::size_t stride,
                                  std::size_t pad) {
  if (stride != 1 && stride != 2)
    throw ParameterError("conv2d stride must be 1 or 2, got " + std::to_string(stride));
  if (h + 2 * pad < 3 || w + 2 * pad < 3)
    throw DimensionError("conv2d: 3x3 kernel larger than padded input " +
                         std::to_string(h) + "x" + std::to_string(w));
  return {h, w, (h + 2 * pad - 3) / stride + 1, (w + 2 * pad - 3) / stride + 1, stride, pad};
}

namespace detail {

// col[(ci*9 + ky*3 + kx) x (oy*out_w + ox)] for one sample.
template <typename T>
void im2col(const T* x, std::size_t channels, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* xc = x + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        T* row = col + ((c * 3 + ky) * 3 + kx) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w))
                          ? T{0}
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, const ConvGeometry& g, T* x) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    T* xc = x + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const T* row = col + ((c * 3 + ky) * 3 + kx) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          T* dst = xc + static_cast<std::size_t>(iy) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            dst[static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
ConvGeometry check_conv(const BasicTensor<T>& x, const BasicTensor<T>& k,
                        const BasicTensor<T>& b, std::size_t stride, std::size_t pad) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(k.shape(), 4, "conv2d kernel");
  require_rank(b.shape(), 1, "conv2d bias");
  if (k.dim(2) != 3 || k.dim(3) != 3)
    throw DimensionError("conv2d supports 3x3 kernels only, got " + shape_str(k.shape()));
  if (k.dim(1) != x.dim(1))
    throw DimensionError("conv2d: kernel expects " + std::to_string(k.dim(1)) +
                         " input channels, input has " + std::to_string(x.dim(1)));
  if (b.dim(0) != k.dim(0))
    throw DimensionError("conv2d: bias length does not match output channels");
  return conv_geometry(x.dim(2), x.dim(3), stride, pad);
}

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& k,
                              const BasicTensor<T>& b, std::size_t stride,
                              std::size_t pad = 1) {
  const ConvGeometry g = check_conv(x, k, b, stride, pad);
  const std::size_t n = x.dim(0), c_in = x.dim(1), c_out = k.dim(0);
  const std::size_t rows = c_in * 9, plane = g.out_h * g.out_w;
  BasicTensor<T> out({n, c_out, g.out_h, g.out_w});
  std::vector<T> col(rows * plane);
  for (std::size_t s = 0; s < n; ++s) {
    detail::im2col(x.ptr() + s * c_in * g.in_h * g.in_w, c_in, g, col.data());
    T* o = out.ptr() + s * c_out * plane;
    for (std::size_t co = 0; co < c_out; ++co) std::fill(o + co * plane, o + (co + 1) * plane, b[co]);
    detail::gemm_acc(k.ptr(), col.data(), o, c_out, rows, plane);
  }
  return out;
}

template <typename T>
struct ConvGrads {
  BasicTensor<T> x;  // empty when not requested
  BasicTensor<T> k;
  BasicTensor<T> b;
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& k,
                             const BasicTensor<T>& grad_out, std::size_t stride,
                             std::size_t pad = 1, bool want_grad_x = true) {
  const ConvGeometry g = conv_geometry(x.dim(2), x.dim(3), stride, pad);
  const std::size_t n = x.dim(0), c_in = x.dim(1), c_out = k.dim(0);
  const std::size_t rows = c_in * 9, plane = g.out_h * g.out_w;
  require_shape(grad_out.shape(), {n, c_out, g.out_h, g.out_w}, "conv2d upstream gradient");
  ConvGrads<T> grads{BasicTensor<T>(), BasicTensor<T>(k.shape()), BasicTensor<T>({c_out})};
  if (want_grad_x) grads.x = BasicTensor<T>(x.shape());
  std::vector<T> col(rows * plane);
  std::vector<T> gcol(want_grad_x ? rows * plane : 0);
  const std::vector<T> kt = detail::transpose(k.ptr(), c_out, rows);
  for (std::size_t s = 0; s < n; ++s) {
    const T* go = grad_out.ptr() + s * c_out * plane;
    detail::im2col(x.ptr() + s * c_in * g.in_h * g.in_w, c_in, g, col.data());
    const std::vector<T> col_t = detail::transpose(col.data(), rows, plane);
    detail::gemm_acc(go, col_t.data(), grads.k.ptr(), c_out, plane, rows);
    for (std::size_t co = 0; co < c_out; ++co) {
      T acc = grads.b[co];
      for (std::size_t p = 0; p < plane; ++p) acc += go[co * plane + p];
      grads.b[co] = acc;
    }
    if (want_grad_x) {
      std::fill(gcol.begin(), gcol.end(), T{0});
      detail::gemm_acc(kt.data(), go, gcol.data(), rows, c_out, plane);
      detail::col2im_add(gcol.data(), c_in, g, grads.x.ptr() + s * c_in * g.in_h * g.in_w);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Elementwise activations.

enum class Activation { relu, sigmoid };

template <typename T>
T sigmoid(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

// log(1 + e^v) without overflow.
template <typename T>
T softplus(T v) {
  return std::max(v, T{0}) + std::log1p(std::exp(-std::abs(v)));
}

template <typename T>
BasicTensor<T> activation_forward(const BasicTensor<T>& x, Activation kind) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = kind == Activation::relu ? std::max(x[i], T{0}) : sigmoid(x[i]);
  return out;
}

// Gradient w.r.t. the activation input `x`.
template <typename T>
BasicTensor<T> activation_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out,
                                   Activation kind) {
  require_shape(grad_out.shape(), x.shape(), "activation upstream gradient");
  BasicTensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (kind == Activation::relu) {
      g[i] = x[i] > T{0} ? grad_out[i] : T{0};
    } else {
      const T s = sigmoid(x[i]);
      g[i] = grad_out[i] * s * (T{1} - s);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Row-wise softmax and mean cross-entropy.

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  BasicTensor<T> probs(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.ptr() + i * k;
    T* out = probs.ptr() + i * k;
    const T mx = *std::max_element(row, row + k);
    T total{0};
    for (std::size_t j = 0; j < k; ++j) total += (out[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[j] /= total;
  }
  return probs;
}

template <typename T>
struct SoftmaxXent {
  T loss;
  BasicTensor<T> probs;
};

template <typename T>
SoftmaxXent<T> softmax_xent(const BasicTensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "softmax logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n)
    throw DimensionError("softmax_xent: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  SoftmaxXent<T> r{T{0}, softmax_rows(logits)};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw IndexError("label " + std::to_string(labels[i]) + " outside [0," +
                       std::to_string(k) + ")");
    const T* row = logits.ptr() + i * k;
    const T mx = *std::max_element(row, row + k);
    T total{0};
    for (std::size_t j = 0; j < k; ++j) total += std::exp(row[j] - mx);
    r.loss += -(row[labels[i]] - mx - std::log(total));
  }
  r.loss /= static_cast<T>(n);
  return r;
}

// Gradient of the mean loss w.r.t. the logits: (probs - onehot) / N.
template <typename T>
BasicTensor<T> softmax_xent_backward(const BasicTensor<T>& probs, std::span<const int> labels) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  BasicTensor<T> g = probs;
  const T inv_n = T{1} / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    g(i, static_cast<std::size_t>(labels[i])) -= T{1};
    for (std::size_t j = 0; j < k; ++j) g(i, j) *= inv_n;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Per-channel mean over spatial positions (global average pooling).

template <typename T>
BasicTensor<T> spatial_mean(const BasicTensor<T>& x) {
  require_rank(x.shape(), 4, "spatial_mean input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (plane == 0) throw DimensionError("spatial_mean: empty spatial extent");
  BasicTensor<T> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    const T* p = x.ptr() + i * plane;
    T acc{0};
    for (std::size_t j = 0; j < plane; ++j) acc += p[j];
    out[i] = acc / static_cast<T>(plane);
  }
  return out;
}

template <typename T>
BasicTensor<T> spatial_mean_backward(const Shape& input_shape, const BasicTensor<T>& grad_out) {
  const std::size_t n = input_shape.at(0), c = input_shape.at(1);
  const std::size_t plane = input_shape.at(2) * input_shape.at(3);
  require_shape(grad_out.shape(), {n, c}, "spatial_mean upstream gradient");
  BasicTensor<T> g(input_shape);
  for (std::size_t i = 0; i < n * c; ++i)
    std::fill(g.ptr() + i * plane, g.ptr() + (i + 1) * plane,
              grad_out[i] / static_cast<T>(plane));
  return g;
}

}  // namespace gazedecode
