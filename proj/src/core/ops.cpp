#include "lkc/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace lkc {

namespace {

using Index = std::ptrdiff_t;

/// Range of output positions [lo, hi) whose input tap (o * stride + tap - pad)
/// lands inside [0, in_extent).
struct TapRange {
  Index lo;
  Index hi;
};

TapRange tap_range(Index in_extent, Index out_extent, Index stride, Index tap, Index pad) {
  Index lo = 0;
  if (pad > tap) lo = (pad - tap + stride - 1) / stride;
  const Index last = in_extent - 1 + pad - tap;
  if (last < 0) return {0, 0};
  const Index hi = std::min(out_extent, last / stride + 1);
  return {lo, std::max(lo, hi)};
}

template <Real T>
void check_conv(const Tensor<T>& input, const Tensor<T>& kernel, const ConvSpec& spec) {
  spec.validate();
  require(input.rank() == 4, "shape_mismatch",
          "conv2d expects NCHW input, got " + shape_string(input.shape()));
  require(input.dim(1) == spec.in_channels, "shape_mismatch",
          "conv2d input has " + std::to_string(input.dim(1)) + " channels, spec expects " +
              std::to_string(spec.in_channels));
  require(kernel.shape() == spec.kernel_shape(), "shape_mismatch",
          "conv2d kernel shape " + shape_string(kernel.shape()) + " does not match spec " +
              shape_string(spec.kernel_shape()));
}

template <Real T>
void check_channels(const Tensor<T>& input, const Tensor<T>& per_channel, const char* what) {
  require(input.rank() == 4 || input.rank() == 2, "shape_mismatch",
          std::string(what) + " expects NCHW or NC input, got " + shape_string(input.shape()));
  require(per_channel.size() == input.dim(1), "shape_mismatch",
          std::string(what) + ": input has " + std::to_string(input.dim(1)) +
              " channels, parameters have " + std::to_string(per_channel.size()));
}

std::size_t spatial_size(const Shape& shape) {
  std::size_t s = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) s *= shape[i];
  return s;
}

}  // namespace

ConvSpec ConvSpec::same(std::size_t in, std::size_t out, std::size_t kernel, std::size_t groups,
                        std::size_t stride) {
  ConvSpec spec;
  spec.in_channels = in;
  spec.out_channels = out;
  spec.kernel_h = kernel;
  spec.kernel_w = kernel;
  spec.stride = stride;
  spec.groups = groups;
  spec.same_padding = true;
  return spec;
}

ConvSpec ConvSpec::padded(std::size_t in, std::size_t out, std::size_t kernel_h, std::size_t kernel_w,
                          std::size_t pad_h, std::size_t pad_w, std::size_t stride, std::size_t groups) {
  ConvSpec spec;
  spec.in_channels = in;
  spec.out_channels = out;
  spec.kernel_h = kernel_h;
  spec.kernel_w = kernel_w;
  spec.stride = stride;
  spec.groups = groups;
  spec.same_padding = false;
  spec.pad_h = pad_h;
  spec.pad_w = pad_w;
  return spec;
}

std::size_t ConvSpec::out_extent(std::size_t in, std::size_t kernel, std::size_t pad) const {
  require(in >= 1, "shape_mismatch", "conv2d spatial extent must be >= 1");
  require(in + 2 * pad >= kernel, "shape_mismatch",
          "conv2d kernel " + std::to_string(kernel) + " larger than padded input " +
              std::to_string(in + 2 * pad));
  return (in + 2 * pad - kernel) / stride + 1;
}

void ConvSpec::validate() const {
  require(in_channels > 0 && out_channels > 0, "invalid_argument", "conv channels must be positive");
  require(kernel_h > 0 && kernel_w > 0, "invalid_argument", "conv kernel must be positive");
  require(stride >= 1, "invalid_argument", "conv stride must be >= 1");
  require(groups >= 1 && in_channels % groups == 0 && out_channels % groups == 0, "invalid_argument",
          "conv groups " + std::to_string(groups) + " must divide channels " +
              std::to_string(in_channels) + "->" + std::to_string(out_channels));
  if (same_padding)
    require(kernel_h % 2 == 1 && kernel_w % 2 == 1, "invalid_argument",
            "'same' padding requires odd kernel, got " + std::to_string(kernel_h) + "x" +
                std::to_string(kernel_w));
}

template <Real T>
BatchNormParams<T> BatchNormParams<T>::identity(std::size_t channels) {
  BatchNormParams<T> bn;
  bn.mean = Tensor<T>({channels}, T{0});
  bn.var = Tensor<T>({channels}, T{1});
  bn.gamma = Tensor<T>({channels}, T{1});
  bn.beta = Tensor<T>({channels}, T{0});
  return bn;
}

template <Real T>
void BatchNormParams<T>::validate() const {
  const std::size_t c = gamma.size();
  require(mean.size() == c && var.size() == c && beta.size() == c, "shape_mismatch",
          "batch norm parameter vectors must share one length");
  require(eps > 0, "invalid_argument", "batch norm eps must be positive");
  for (std::size_t i = 0; i < c; ++i)
    require(var[i] >= 0, "invalid_argument", "batch norm running variance must be >= 0");
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

/// Shift-and-add over kernel taps; used for grouped and depthwise kernels.
template <Real T>
Tensor<T> conv2d_direct(const Tensor<T>& input, const Tensor<T>& kernel, const ConvSpec& spec) {
  const Index n_batch = input.dim(0), channels = input.dim(1);
  const Index h = input.dim(2), w = input.dim(3);
  const Index oh_n = spec.out_h(h), ow_n = spec.out_w(w);
  const Index out_c = spec.out_channels, groups = spec.groups;
  const Index cin_g = channels / groups, cout_g = out_c / groups;
  const Index kh_n = spec.kernel_h, kw_n = spec.kernel_w, stride = spec.stride;
  const Index ph = spec.padding_h(), pw = spec.padding_w();

  Tensor<T> out({static_cast<std::size_t>(n_batch), static_cast<std::size_t>(out_c),
                 static_cast<std::size_t>(oh_n), static_cast<std::size_t>(ow_n)});
  const T* in = input.data();
  const T* k = kernel.data();
  T* o = out.data();

  for (Index n = 0; n < n_batch; ++n) {
    for (Index oc = 0; oc < out_c; ++oc) {
      const Index g = oc / cout_g;
      T* oplane = o + (n * out_c + oc) * oh_n * ow_n;
      for (Index icg = 0; icg < cin_g; ++icg) {
        const T* iplane = in + (n * channels + g * cin_g + icg) * h * w;
        const T* kplane = k + (oc * cin_g + icg) * kh_n * kw_n;
        for (Index kh = 0; kh < kh_n; ++kh) {
          const TapRange rows = tap_range(h, oh_n, stride, kh, ph);
          for (Index kw = 0; kw < kw_n; ++kw) {
            const T wv = kplane[kh * kw_n + kw];
            if (wv == T{0}) continue;
            const TapRange cols = tap_range(w, ow_n, stride, kw, pw);
            if (stride == 1 && cols.lo == 0 && cols.hi == w && ow_n == w) {
              // Full-width rows are contiguous in both planes.
              T* orow = oplane + rows.lo * w;
              const T* irow = iplane + (rows.lo + kh - ph) * w;
              const Index len = (rows.hi - rows.lo) * w;
#pragma omp simd
              for (Index i = 0; i < len; ++i) orow[i] += wv * irow[i];
              continue;
            }
            for (Index oy = rows.lo; oy < rows.hi; ++oy) {
              T* orow = oplane + oy * ow_n;
              const Index base = (oy * stride + kh - ph) * w + (kw - pw);
              if (stride == 1) {
#pragma omp simd
                for (Index ox = cols.lo; ox < cols.hi; ++ox) orow[ox] += wv * iplane[base + ox];
              } else {
                for (Index ox = cols.lo; ox < cols.hi; ++ox) orow[ox] += wv * iplane[base + ox * stride];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <Real T>
ConvGrads<T> conv2d_backward_direct(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& grad_out,
                                    const ConvSpec& spec) {
  const Index n_batch = input.dim(0), channels = input.dim(1);
  const Index h = input.dim(2), w = input.dim(3);
  const Index oh_n = spec.out_h(h), ow_n = spec.out_w(w);
  const Index out_c = spec.out_channels, groups = spec.groups;
  require(grad_out.shape() == Shape{static_cast<std::size_t>(n_batch), static_cast<std::size_t>(out_c),
                                    static_cast<std::size_t>(oh_n), static_cast<std::size_t>(ow_n)},
          "shape_mismatch", "conv2d_backward: gradient shape " + shape_string(grad_out.shape()));
  const Index cin_g = channels / groups, cout_g = out_c / groups;
  const Index kh_n = spec.kernel_h, kw_n = spec.kernel_w, stride = spec.stride;
  const Index ph = spec.padding_h(), pw = spec.padding_w();

  ConvGrads<T> grads;
  grads.input = Tensor<T>(input.shape());
  grads.kernel = Tensor<T>(kernel.shape());
  const T* in = input.data();
  const T* k = kernel.data();
  const T* go = grad_out.data();
  T* gi = grads.input.data();
  T* gk = grads.kernel.data();

  for (Index n = 0; n < n_batch; ++n) {
    for (Index oc = 0; oc < out_c; ++oc) {
      const Index g = oc / cout_g;
      const T* gplane = go + (n * out_c + oc) * oh_n * ow_n;
      for (Index icg = 0; icg < cin_g; ++icg) {
        const Index ic = g * cin_g + icg;
        const T* iplane = in + (n * channels + ic) * h * w;
        T* giplane = gi + (n * channels + ic) * h * w;
        const T* kplane = k + (oc * cin_g + icg) * kh_n * kw_n;
        T* gkplane = gk + (oc * cin_g + icg) * kh_n * kw_n;
        for (Index kh = 0; kh < kh_n; ++kh) {
          const TapRange rows = tap_range(h, oh_n, stride, kh, ph);
          for (Index kw = 0; kw < kw_n; ++kw) {
            const T wv = kplane[kh * kw_n + kw];
            const TapRange cols = tap_range(w, ow_n, stride, kw, pw);
            T acc = 0;
            if (stride == 1 && cols.lo == 0 && cols.hi == w && ow_n == w) {
              const T* grow = gplane + rows.lo * w;
              const Index off = (rows.lo + kh - ph) * w;
              const Index len = (rows.hi - rows.lo) * w;
#pragma omp simd reduction(+ : acc)
              for (Index i = 0; i < len; ++i) acc += grow[i] * iplane[off + i];
              if (wv != T{0}) {
#pragma omp simd
                for (Index i = 0; i < len; ++i) giplane[off + i] += wv * grow[i];
              }
              gkplane[kh * kw_n + kw] += acc;
              continue;
            }
            for (Index oy = rows.lo; oy < rows.hi; ++oy) {
              const T* grow = gplane + oy * ow_n;
              const Index base = (oy * stride + kh - ph) * w + (kw - pw);
              T row_acc = 0;
              if (stride == 1) {
#pragma omp simd reduction(+ : row_acc)
                for (Index ox = cols.lo; ox < cols.hi; ++ox) row_acc += grow[ox] * iplane[base + ox];
                if (wv != T{0}) {
#pragma omp simd
                  for (Index ox = cols.lo; ox < cols.hi; ++ox) giplane[base + ox] += wv * grow[ox];
                }
              } else {
                for (Index ox = cols.lo; ox < cols.hi; ++ox) {
                  row_acc += grow[ox] * iplane[base + ox * stride];
                  giplane[base + ox * stride] += wv * grow[ox];
                }
              }
              acc += row_acc;
            }
            gkplane[kh * kw_n + kw] += acc;
          }
        }
      }
    }
  }

  return grads;
}


/// Geometry shared by the lowered (im2col) path, groups == 1.
struct Lowering {
  Index channels, h, w, oh, ow, kh, kw, stride, ph, pw, out_c;

  Index rows() const { return channels * kh * kw; }
  Index cols() const { return oh * ow; }
  bool trivial() const { return kh == 1 && kw == 1 && stride == 1 && ph == 0 && pw == 0; }
};

Lowering lowering_of(const Shape& input, const ConvSpec& spec) {
  Lowering g;
  g.channels = static_cast<Index>(input[1]);
  g.h = static_cast<Index>(input[2]);
  g.w = static_cast<Index>(input[3]);
  g.oh = static_cast<Index>(spec.out_h(input[2]));
  g.ow = static_cast<Index>(spec.out_w(input[3]));
  g.kh = static_cast<Index>(spec.kernel_h);
  g.kw = static_cast<Index>(spec.kernel_w);
  g.stride = static_cast<Index>(spec.stride);
  g.ph = static_cast<Index>(spec.padding_h());
  g.pw = static_cast<Index>(spec.padding_w());
  g.out_c = static_cast<Index>(spec.out_channels);
  return g;
}

/// cols[(c * kh + ky) * kw + kx][oy * ow + ox] = image[c][oy * s + ky - ph][ox * s + kx - pw], 0 outside.
template <Real T>
void im2col(const T* image, const Lowering& g, T* cols) {
  const Index p_n = g.cols();
  for (Index c = 0; c < g.channels; ++c)
    for (Index ky = 0; ky < g.kh; ++ky) {
      const TapRange rows = tap_range(g.h, g.oh, g.stride, ky, g.ph);
      for (Index kx = 0; kx < g.kw; ++kx) {
        const TapRange cr = tap_range(g.w, g.ow, g.stride, kx, g.pw);
        T* row = cols + ((c * g.kh + ky) * g.kw + kx) * p_n;
        std::fill(row, row + p_n, T{0});
        const T* plane = image + c * g.h * g.w;
        for (Index oy = rows.lo; oy < rows.hi; ++oy) {
          const T* src = plane + (oy * g.stride + ky - g.ph) * g.w + kx - g.pw;
          T* dst = row + oy * g.ow;
          for (Index ox = cr.lo; ox < cr.hi; ++ox) dst[ox] = src[ox * g.stride];
        }
      }
    }
}

/// Inverse scatter of im2col: image += fold(cols).
template <Real T>
void col2im_add(const T* cols, const Lowering& g, T* image) {
  const Index p_n = g.cols();
  for (Index c = 0; c < g.channels; ++c)
    for (Index ky = 0; ky < g.kh; ++ky) {
      const TapRange rows = tap_range(g.h, g.oh, g.stride, ky, g.ph);
      for (Index kx = 0; kx < g.kw; ++kx) {
        const TapRange cr = tap_range(g.w, g.ow, g.stride, kx, g.pw);
        const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * p_n;
        T* plane = image + c * g.h * g.w;
        for (Index oy = rows.lo; oy < rows.hi; ++oy) {
          T* dst = plane + (oy * g.stride + ky - g.ph) * g.w + kx - g.pw;
          const T* src = row + oy * g.ow;
          for (Index ox = cr.lo; ox < cr.hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
    }
}

/// out[o][p] += sum_r weight[o][r] * cols[r][p], r ascending for every output.
template <Real T>
void gemm_accumulate(const T* weight, const T* cols, Index out_rows, Index inner, Index p_n, T* out) {
  constexpr Index kBlock = 4;
  Index o = 0;
  for (; o + kBlock <= out_rows; o += kBlock) {
    T* o0 = out + o * p_n;
    T* o1 = o0 + p_n;
    T* o2 = o1 + p_n;
    T* o3 = o2 + p_n;
    for (Index r = 0; r < inner; ++r) {
      const T w0 = weight[o * inner + r], w1 = weight[(o + 1) * inner + r];
      const T w2 = weight[(o + 2) * inner + r], w3 = weight[(o + 3) * inner + r];
      const T* c = cols + r * p_n;
#pragma omp simd
      for (Index p = 0; p < p_n; ++p) {
        const T v = c[p];
        o0[p] += w0 * v;
        o1[p] += w1 * v;
        o2[p] += w2 * v;
        o3[p] += w3 * v;
      }
    }
  }
  for (; o < out_rows; ++o) {
    T* orow = out + o * p_n;
    for (Index r = 0; r < inner; ++r) {
      const T wv = weight[o * inner + r];
      const T* c = cols + r * p_n;
#pragma omp simd
      for (Index p = 0; p < p_n; ++p) orow[p] += wv * c[p];
    }
  }
}

template <Real T>
Tensor<T> conv2d_lowered(const Tensor<T>& input, const Tensor<T>& kernel, const ConvSpec& spec) {
  const Lowering g = lowering_of(input.shape(), spec);
  const Index n_batch = static_cast<Index>(input.dim(0));
  Tensor<T> out({input.dim(0), spec.out_channels, static_cast<std::size_t>(g.oh), static_cast<std::size_t>(g.ow)});
  std::vector<T> cols(g.trivial() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
  for (Index n = 0; n < n_batch; ++n) {
    const T* image = input.data() + n * g.channels * g.h * g.w;
    const T* c = image;
    if (!g.trivial()) {
      im2col(image, g, cols.data());
      c = cols.data();
    }
    gemm_accumulate(kernel.data(), c, g.out_c, g.rows(), g.cols(), out.data() + n * g.out_c * g.cols());
  }
  return out;
}

template <Real T>
ConvGrads<T> conv2d_backward_lowered(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& grad_out,
                                     const ConvSpec& spec) {
  const Lowering g = lowering_of(input.shape(), spec);
  const Index n_batch = static_cast<Index>(input.dim(0));
  const Index r_n = g.rows(), p_n = g.cols();
  ConvGrads<T> grads;
  grads.input = Tensor<T>(input.shape());
  grads.kernel = Tensor<T>(kernel.shape());
  // Kernel transposed to [rows, out_c] so the input gradient is another accumulate.
  std::vector<T> kernel_t(static_cast<std::size_t>(r_n * g.out_c));
  for (Index o = 0; o < g.out_c; ++o)
    for (Index r = 0; r < r_n; ++r) kernel_t[r * g.out_c + o] = kernel[o * r_n + r];
  std::vector<T> cols(g.trivial() ? 0 : static_cast<std::size_t>(r_n * p_n));
  std::vector<T> grad_cols(g.trivial() ? 0 : static_cast<std::size_t>(r_n * p_n));

  for (Index n = 0; n < n_batch; ++n) {
    const T* image = input.data() + n * g.channels * g.h * g.w;
    const T* go = grad_out.data() + n * g.out_c * p_n;
    T* gi = grads.input.data() + n * g.channels * g.h * g.w;
    const T* c = image;
    if (!g.trivial()) {
      im2col(image, g, cols.data());
      c = cols.data();
    }
    for (Index o = 0; o < g.out_c; ++o) {
      const T* grow = go + o * p_n;
      for (Index r = 0; r < r_n; ++r) {
        const T* crow = c + r * p_n;
        T acc = 0;
#pragma omp simd reduction(+ : acc)
        for (Index p = 0; p < p_n; ++p) acc += grow[p] * crow[p];
        grads.kernel[o * r_n + r] += acc;
      }
    }
    if (g.trivial()) {
      gemm_accumulate(kernel_t.data(), go, r_n, g.out_c, p_n, gi);
    } else {
      std::fill(grad_cols.begin(), grad_cols.end(), T{0});
      gemm_accumulate(kernel_t.data(), go, r_n, g.out_c, p_n, grad_cols.data());
      col2im_add(grad_cols.data(), g, gi);
    }
  }
  return grads;
}


/// Stride-1 grouped convolution on zero-padded planes. Each output row is
/// computed over the padded width, so every kernel tap is one contiguous
/// multiply-add over oh * padded-width values; the extra columns are dropped.
struct PaddedPlanes {
  Index h, w, oh, ow, hp, wp, kh, kw, ph, pw;

  Index plane() const { return hp * wp + kw; }  // slack for the last row's overhang
  Index ext() const { return oh * wp; }
};

PaddedPlanes padded_of(const Shape& input, const ConvSpec& spec) {
  PaddedPlanes g;
  g.h = static_cast<Index>(input[2]);
  g.w = static_cast<Index>(input[3]);
  g.oh = static_cast<Index>(spec.out_h(input[2]));
  g.ow = static_cast<Index>(spec.out_w(input[3]));
  g.kh = static_cast<Index>(spec.kernel_h);
  g.kw = static_cast<Index>(spec.kernel_w);
  g.ph = static_cast<Index>(spec.padding_h());
  g.pw = static_cast<Index>(spec.padding_w());
  g.hp = g.h + 2 * g.ph;
  g.wp = g.w + 2 * g.pw;
  return g;
}

template <Real T>
std::vector<T> pad_planes(const Tensor<T>& input, const PaddedPlanes& g) {
  const Index planes = static_cast<Index>(input.dim(0) * input.dim(1));
  std::vector<T> out(static_cast<std::size_t>(planes * g.plane()), T{0});
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < g.h; ++y) {
      const T* src = input.data() + (p * g.h + y) * g.w;
      std::copy(src, src + g.w, out.data() + p * g.plane() + (y + g.ph) * g.wp + g.pw);
    }
  return out;
}

template <Real T>
Tensor<T> conv2d_grouped_s1(const Tensor<T>& input, const Tensor<T>& kernel, const ConvSpec& spec) {
  const PaddedPlanes g = padded_of(input.shape(), spec);
  const Index n_batch = input.dim(0), channels = input.dim(1), out_c = spec.out_channels;
  const Index cin_g = channels / static_cast<Index>(spec.groups), cout_g = out_c / static_cast<Index>(spec.groups);
  const std::vector<T> padded = pad_planes(input, g);
  Tensor<T> out({input.dim(0), spec.out_channels, static_cast<std::size_t>(g.oh), static_cast<std::size_t>(g.ow)});
  std::vector<T> ext(static_cast<std::size_t>(g.ext()));
  for (Index n = 0; n < n_batch; ++n)
    for (Index oc = 0; oc < out_c; ++oc) {
      std::fill(ext.begin(), ext.end(), T{0});
      const Index grp = oc / cout_g;
      for (Index icg = 0; icg < cin_g; ++icg) {
        const T* plane = padded.data() + (n * channels + grp * cin_g + icg) * g.plane();
        const T* kplane = kernel.data() + (oc * cin_g + icg) * g.kh * g.kw;
        for (Index ky = 0; ky < g.kh; ++ky)
          for (Index kx = 0; kx < g.kw; ++kx) {
            const T wv = kplane[ky * g.kw + kx];
            if (wv == T{0}) continue;
            const T* src = plane + ky * g.wp + kx;
            T* dst = ext.data();
            const Index len = g.ext();
#pragma omp simd
            for (Index i = 0; i < len; ++i) dst[i] += wv * src[i];
          }
      }
      T* oplane = out.data() + (n * out_c + oc) * g.oh * g.ow;
      for (Index y = 0; y < g.oh; ++y) std::copy(ext.data() + y * g.wp, ext.data() + y * g.wp + g.ow, oplane + y * g.ow);
    }
  return out;
}

template <Real T>
ConvGrads<T> conv2d_backward_grouped_s1(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& grad_out,
                                        const ConvSpec& spec) {
  const PaddedPlanes g = padded_of(input.shape(), spec);
  const Index n_batch = input.dim(0), channels = input.dim(1), out_c = spec.out_channels;
  const Index cin_g = channels / static_cast<Index>(spec.groups), cout_g = out_c / static_cast<Index>(spec.groups);
  const std::vector<T> padded = pad_planes(input, g);
  std::vector<T> grad_padded(padded.size(), T{0});
  ConvGrads<T> grads;
  grads.input = Tensor<T>(input.shape());
  grads.kernel = Tensor<T>(kernel.shape());
  std::vector<T> ext(static_cast<std::size_t>(g.ext()));
  for (Index n = 0; n < n_batch; ++n)
    for (Index oc = 0; oc < out_c; ++oc) {
      // Output gradient laid out on the padded width, zero in the dropped columns.
      std::fill(ext.begin(), ext.end(), T{0});
      const T* gplane = grad_out.data() + (n * out_c + oc) * g.oh * g.ow;
      for (Index y = 0; y < g.oh; ++y) std::copy(gplane + y * g.ow, gplane + (y + 1) * g.ow, ext.data() + y * g.wp);
      const Index grp = oc / cout_g;
      for (Index icg = 0; icg < cin_g; ++icg) {
        const Index plane_off = (n * channels + grp * cin_g + icg) * g.plane();
        const T* plane = padded.data() + plane_off;
        T* gplane_in = grad_padded.data() + plane_off;
        const T* kplane = kernel.data() + (oc * cin_g + icg) * g.kh * g.kw;
        T* gkplane = grads.kernel.data() + (oc * cin_g + icg) * g.kh * g.kw;
        const Index len = g.ext();
        const T* e = ext.data();
        for (Index ky = 0; ky < g.kh; ++ky)
          for (Index kx = 0; kx < g.kw; ++kx) {
            const Index off = ky * g.wp + kx;
            T acc = 0;
#pragma omp simd reduction(+ : acc)
            for (Index i = 0; i < len; ++i) acc += e[i] * plane[off + i];
            gkplane[ky * g.kw + kx] += acc;
            const T wv = kplane[ky * g.kw + kx];
            if (wv == T{0}) continue;
            T* dst = gplane_in + off;
#pragma omp simd
            for (Index i = 0; i < len; ++i) dst[i] += wv * e[i];
          }
      }
    }
  const Index planes = n_batch * channels;
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < g.h; ++y) {
      const T* src = grad_padded.data() + p * g.plane() + (y + g.ph) * g.wp + g.pw;
      std::copy(src, src + g.w, grads.input.data() + (p * g.h + y) * g.w);
    }
  return grads;
}

template <Real T>
Tensor<T> bias_grad(const Tensor<T>& grad_out) {
  const std::size_t n_batch = grad_out.dim(0), out_c = grad_out.dim(1), plane = grad_out.dim(2) * grad_out.dim(3);
  Tensor<T> g({out_c});
  for (std::size_t oc = 0; oc < out_c; ++oc) {
    double acc = 0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const T* gplane = grad_out.data() + (n * out_c + oc) * plane;
      for (std::size_t i = 0; i < plane; ++i) acc += gplane[i];
    }
    g[oc] = static_cast<T>(acc);
  }
  return g;
}

}  // namespace

template <Real T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const ConvSpec& spec) {
  check_conv(input, kernel, spec);
  if (spec.groups == 1) return conv2d_lowered(input, kernel, spec);
  return spec.stride == 1 ? conv2d_grouped_s1(input, kernel, spec) : conv2d_direct(input, kernel, spec);
}

template <Real T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 const ConvSpec& spec) {
  require(bias.size() == spec.out_channels, "shape_mismatch",
          "conv2d bias length " + std::to_string(bias.size()) + " != out channels " +
              std::to_string(spec.out_channels));
  Tensor<T> out = conv2d(input, kernel, spec);
  const std::size_t plane = out.dim(2) * out.dim(3);
  for (std::size_t n = 0; n < out.dim(0); ++n)
    for (std::size_t c = 0; c < out.dim(1); ++c) {
      T* p = out.data() + (n * out.dim(1) + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += bias[c];
    }
  return out;
}


template <Real T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& grad_out,
                             const ConvSpec& spec, bool with_bias) {
  check_conv(input, kernel, spec);
  require(grad_out.shape() == Shape{input.dim(0), spec.out_channels, spec.out_h(input.dim(2)), spec.out_w(input.dim(3))},
          "shape_mismatch", "conv2d_backward: gradient shape " + shape_string(grad_out.shape()));
  ConvGrads<T> grads = spec.groups == 1  ? conv2d_backward_lowered(input, kernel, grad_out, spec)
                       : spec.stride == 1 ? conv2d_backward_grouped_s1(input, kernel, grad_out, spec)
                                          : conv2d_backward_direct(input, kernel, grad_out, spec);
  if (with_bias) grads.bias = bias_grad(grad_out);
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <Real T>
BatchStats<T> batch_statistics(const Tensor<T>& input) {
  require(input.rank() == 4 || input.rank() == 2, "shape_mismatch",
          "batch norm expects NCHW or NC input, got " + shape_string(input.shape()));
  const std::size_t n_batch = input.dim(0), channels = input.dim(1);
  const std::size_t plane = spatial_size(input.shape());
  const double count = static_cast<double>(n_batch * plane);
  BatchStats<T> stats{Tensor<T>({channels}), Tensor<T>({channels})};
  for (std::size_t c = 0; c < channels; ++c) {
    double sum = 0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const T* p = input.data() + (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) sum += p[i];
    }
    const double mean = sum / count;
    double sq = 0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const T* p = input.data() + (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    stats.mean[c] = static_cast<T>(mean);
    stats.var[c] = static_cast<T>(sq / count);
  }
  return stats;
}

template <Real T>
Tensor<T> batchnorm_apply(const Tensor<T>& input, const Tensor<T>& mean, const Tensor<T>& var,
                          const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  check_channels(input, gamma, "batchnorm");
  check_channels(input, beta, "batchnorm");
  check_channels(input, mean, "batchnorm");
  check_channels(input, var, "batchnorm");
  const std::size_t n_batch = input.dim(0), channels = input.dim(1);
  const std::size_t plane = spatial_size(input.shape());
  Tensor<T> out(input.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(var[c]) + eps);
    const T scale = static_cast<T>(gamma[c] * inv);
    const T mu = mean[c];
    const T shift = beta[c];
    for (std::size_t n = 0; n < n_batch; ++n) {
      const T* p = input.data() + (n * channels + c) * plane;
      T* q = out.data() + (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * scale + shift;
    }
  }
  return out;
}

template <Real T>
void update_running_stats(BatchNormParams<T>& params, const BatchStats<T>& stats) {
  const double m = params.momentum;
  for (std::size_t c = 0; c < params.channels(); ++c) {
    params.mean[c] = static_cast<T>((1.0 - m) * params.mean[c] + m * stats.mean[c]);
    params.var[c] = static_cast<T>((1.0 - m) * params.var[c] + m * stats.var[c]);
  }
}

template <Real T>
Tensor<T> batchnorm(const Tensor<T>& input, BatchNormParams<T>& params, Mode mode,
                    BatchStats<T>* batch_stats_out) {
  params.validate();
  check_channels(input, params.gamma, "batchnorm");
  if (mode == Mode::kEval) return batchnorm_eval(input, params);
  BatchStats<T> stats = batch_statistics(input);
  Tensor<T> out = batchnorm_apply(input, stats.mean, stats.var, params.gamma, params.beta, params.eps);
  update_running_stats(params, stats);
  if (batch_stats_out) *batch_stats_out = std::move(stats);
  return out;
}

template <Real T>
Tensor<T> batchnorm_eval(const Tensor<T>& input, const BatchNormParams<T>& params) {
  params.validate();
  return batchnorm_apply(input, params.mean, params.var, params.gamma, params.beta, params.eps);
}

template <Real T>
AffineGrads<T> batchnorm_backward_fixed(const Tensor<T>& input, const Tensor<T>& grad_out,
                                        const Tensor<T>& mean, const Tensor<T>& var,
                                        const Tensor<T>& gamma, double eps) {
  check_channels(input, gamma, "batchnorm_backward");
  require(grad_out.shape() == input.shape(), "shape_mismatch", "batchnorm_backward: gradient shape");
  const std::size_t n_batch = input.dim(0), channels = input.dim(1);
  const std::size_t plane = spatial_size(input.shape());
  AffineGrads<T> g{Tensor<T>(input.shape()), Tensor<T>({channels}), Tensor<T>({channels})};
  for (std::size_t c = 0; c < channels; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(var[c]) + eps);
    const T scale = static_cast<T>(gamma[c] * inv);
    double dgamma = 0, dbeta = 0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double go = grad_out[off + i];
        dbeta += go;
        dgamma += go * (input[off + i] - mean[c]) * inv;
        g.input[off + i] = grad_out[off + i] * scale;
      }
    }
    g.weight[c] = static_cast<T>(dgamma);
    g.bias[c] = static_cast<T>(dbeta);
  }
  return g;
}

template <Real T>
AffineGrads<T> batchnorm_backward_batch(const Tensor<T>& input, const Tensor<T>& grad_out,
                                        const BatchStats<T>& stats, const Tensor<T>& gamma, double eps) {
  check_channels(input, gamma, "batchnorm_backward");
  require(grad_out.shape() == input.shape(), "shape_mismatch", "batchnorm_backward: gradient shape");
  const std::size_t n_batch = input.dim(0), channels = input.dim(1);
  const std::size_t plane = spatial_size(input.shape());
  const double count = static_cast<double>(n_batch * plane);
  AffineGrads<T> g{Tensor<T>(input.shape()), Tensor<T>({channels}), Tensor<T>({channels})};
  for (std::size_t c = 0; c < channels; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(stats.var[c]) + eps);
    const double mu = stats.mean[c];
    double dgamma = 0, dbeta = 0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double go = grad_out[off + i];
        dbeta += go;
        dgamma += go * (input[off + i] - mu) * inv;
      }
    }
    const double k = gamma[c] * inv / count;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double xhat = (input[off + i] - mu) * inv;
        g.input[off + i] = static_cast<T>(k * (count * grad_out[off + i] - dbeta - xhat * dgamma));
      }
    }
    g.weight[c] = static_cast<T>(dgamma);
    g.bias[c] = static_cast<T>(dbeta);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling

template <Real T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& input, std::size_t grid_h, std::size_t grid_w) {
  require(input.rank() == 4, "shape_mismatch", "adaptive_avg_pool expects NCHW input");
  const std::size_t n_batch = input.dim(0), channels = input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  require(grid_h >= 1 && grid_w >= 1, "invalid_argument", "pool grid must be >= 1");
  require(h >= grid_h && w >= grid_w, "shape_mismatch",
          "pool grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " larger than input " +
              std::to_string(h) + "x" + std::to_string(w));
  Tensor<T> out({n_batch, channels, grid_h, grid_w});
  for (std::size_t nc = 0; nc < n_batch * channels; ++nc) {
    const T* p = input.data() + nc * h * w;
    for (std::size_t i = 0; i < grid_h; ++i) {
      const std::size_t y0 = i * h / grid_h, y1 = (i + 1) * h / grid_h;
      for (std::size_t j = 0; j < grid_w; ++j) {
        const std::size_t x0 = j * w / grid_w, x1 = (j + 1) * w / grid_w;
        double sum = 0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) sum += p[y * w + x];
        out[(nc * grid_h + i) * grid_w + j] = static_cast<T>(sum / static_cast<double>((y1 - y0) * (x1 - x0)));
      }
    }
  }
  return out;
}

template <Real T>
Tensor<T> adaptive_avg_pool_backward(const Shape& input_shape, const Tensor<T>& grad_out) {
  require(input_shape.size() == 4 && grad_out.rank() == 4, "shape_mismatch",
          "adaptive_avg_pool_backward expects NCHW shapes");
  const std::size_t n_batch = input_shape[0], channels = input_shape[1];
  const std::size_t h = input_shape[2], w = input_shape[3];
  const std::size_t grid_h = grad_out.dim(2), grid_w = grad_out.dim(3);
  Tensor<T> grad(input_shape);
  for (std::size_t nc = 0; nc < n_batch * channels; ++nc) {
    T* p = grad.data() + nc * h * w;
    for (std::size_t i = 0; i < grid_h; ++i) {
      const std::size_t y0 = i * h / grid_h, y1 = (i + 1) * h / grid_h;
      for (std::size_t j = 0; j < grid_w; ++j) {
        const std::size_t x0 = j * w / grid_w, x1 = (j + 1) * w / grid_w;
        const T share = grad_out[(nc * grid_h + i) * grid_w + j] / static_cast<T>((y1 - y0) * (x1 - x0));
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) p[y * w + x] += share;
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Linear, ReLU, dropout, loss

template <Real T>
Tensor<T> linear(const Tensor<T>& input, const LinearParams<T>& params) {
  require(input.rank() == 2, "shape_mismatch", "linear expects [N, in] input");
  require(params.weight.rank() == 2, "shape_mismatch", "linear weight must be [out, in]");
  const std::size_t n_batch = input.dim(0), in = input.dim(1);
  const std::size_t out_f = params.weight.dim(0);
  require(params.weight.dim(1) == in, "shape_mismatch",
          "linear expects " + std::to_string(params.weight.dim(1)) + " input features, got " +
              std::to_string(in));
  require(params.bias.size() == out_f, "shape_mismatch", "linear bias length mismatch");
  Tensor<T> out({n_batch, out_f});
  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* x = input.data() + n * in;
    for (std::size_t o = 0; o < out_f; ++o) {
      const T* wrow = params.weight.data() + o * in;
      double acc = params.bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(wrow[i]) * x[i];
      out[n * out_f + o] = static_cast<T>(acc);
    }
  }
  return out;
}

template <Real T>
AffineGrads<T> linear_backward(const Tensor<T>& input, const LinearParams<T>& params,
                               const Tensor<T>& grad_out) {
  const std::size_t n_batch = input.dim(0), in = input.dim(1);
  const std::size_t out_f = params.weight.dim(0);
  require(grad_out.shape() == Shape{n_batch, out_f}, "shape_mismatch", "linear_backward: gradient shape");
  AffineGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(params.weight.shape()), Tensor<T>({out_f})};
  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* x = input.data() + n * in;
    T* gx = g.input.data() + n * in;
    for (std::size_t o = 0; o < out_f; ++o) {
      const T go = grad_out[n * out_f + o];
      const T* wrow = params.weight.data() + o * in;
      T* gwrow = g.weight.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        gx[i] += go * wrow[i];
        gwrow[i] += go * x[i];
      }
      g.bias[o] += go;
    }
  }
  return g;
}

template <Real T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (T& v : out.values()) v = v > T{0} ? v : T{0};
  return out;
}

template <Real T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  require(input.shape() == grad_out.shape(), "shape_mismatch", "relu_backward: gradient shape");
  Tensor<T> g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > T{0} ? grad_out[i] : T{0};
  return g;
}

template <Real T>
DropoutResult<T> dropout(const Tensor<T>& input, double p, Rng& rng, bool active) {
  require(p >= 0.0 && p < 1.0, "invalid_argument", "dropout probability must be in [0, 1)");
  DropoutResult<T> r{input, Tensor<T>(input.shape(), T{1})};
  if (!active || p == 0.0) return r;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T m = rng.uniform() < p ? T{0} : keep_scale;
    r.mask[i] = m;
    r.output[i] = input[i] * m;
  }
  return r;
}

template <Real T>
T smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, double beta) {
  require(pred.size() == target.size() && pred.size() > 0, "shape_mismatch",
          "smooth_l1: prediction/target length mismatch");
  require(beta > 0, "invalid_argument", "smooth_l1 beta must be positive");
  double total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    const double a = std::abs(d);
    total += a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
  }
  return static_cast<T>(total / static_cast<double>(pred.size()));
}

template <Real T>
Tensor<T> smooth_l1_grad(const Tensor<T>& pred, const Tensor<T>& target, double beta) {
  require(pred.size() == target.size() && pred.size() > 0, "shape_mismatch",
          "smooth_l1: prediction/target length mismatch");
  Tensor<T> g(pred.shape());
  const double n = static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    const double slope = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
    g[i] = static_cast<T>(slope / n);
  }
  return g;
}

template <Real T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  require(fan_in > 0, "invalid_argument", "fan_in must be positive");
  Tensor<T> t(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (T& v : t.values()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

#define LKC_INSTANTIATE_OPS(T)                                                                          \
  template struct BatchNormParams<T>;                                                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const ConvSpec&);                        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvSpec&);      \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                        const ConvSpec&, bool);                                         \
  template BatchStats<T> batch_statistics(const Tensor<T>&);                                             \
  template Tensor<T> batchnorm_apply(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                     const Tensor<T>&, const Tensor<T>&, double);                       \
  template void update_running_stats(BatchNormParams<T>&, const BatchStats<T>&);                         \
  template Tensor<T> batchnorm(const Tensor<T>&, BatchNormParams<T>&, Mode, BatchStats<T>*);             \
  template Tensor<T> batchnorm_eval(const Tensor<T>&, const BatchNormParams<T>&);                        \
  template AffineGrads<T> batchnorm_backward_fixed(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                                   const Tensor<T>&, const Tensor<T>&, double);         \
  template AffineGrads<T> batchnorm_backward_batch(const Tensor<T>&, const Tensor<T>&,                   \
                                                   const BatchStats<T>&, const Tensor<T>&, double);     \
  template Tensor<T> adaptive_avg_pool(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> adaptive_avg_pool_backward(const Shape&, const Tensor<T>&);                         \
  template Tensor<T> linear(const Tensor<T>&, const LinearParams<T>&);                                   \
  template AffineGrads<T> linear_backward(const Tensor<T>&, const LinearParams<T>&, const Tensor<T>&);   \
  template Tensor<T> relu(const Tensor<T>&);                                                             \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                  \
  template DropoutResult<T> dropout(const Tensor<T>&, double, Rng&, bool);                               \
  template T smooth_l1(const Tensor<T>&, const Tensor<T>&, double);                                      \
  template Tensor<T> smooth_l1_grad(const Tensor<T>&, const Tensor<T>&, double);                         \
  template Tensor<T> he_normal(Shape, std::size_t, Rng&);

LKC_INSTANTIATE_OPS(float)
LKC_INSTANTIATE_OPS(double)

}  // namespace lkc
