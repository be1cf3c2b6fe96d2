#pragma once

#include "dpc/types.hpp"

namespace dpc {

// A single-channel convolution kernel, odd side k, 2D (k*k) or 3D (k*k*k)
// taps stored row-major.
struct ConvKernel {
  int k = 3;
  int dims = 2;
  Eigen::ArrayXd w;

  ConvKernel() = default;
  ConvKernel(int side, int dimensions) : k(side), dims(dimensions) {
    if (side < 1 || side % 2 == 0) throw ConfigError("ConvKernel: side must be odd");
    if (dims != 2 && dims != 3) throw ConfigError("ConvKernel: dims must be 2 or 3");
    Eigen::Index nw = 1;
    for (int d = 0; d < dims; ++d) nw *= side;
    w = Eigen::ArrayXd::Zero(nw);
  }
  // center tap 1, rest 0
  static ConvKernel identity(int side, int dimensions) {
    ConvKernel c(side, dimensions);
    Eigen::Index center = 0;
    for (int d = 0; d < dimensions; ++d) center = center * side + side / 2;
    c.w[center] = 1.0;
    return c;
  }
};

// A stack of 2-3 conv layers with a pointwise leaky nonlinearity between
// layers (none after the last, so the identity initialization passes any
// input through unchanged).
struct Extractor {
  std::vector<ConvKernel> layers;
  double leak = 0.1;

  static Extractor identity(int n_layers, int side, int dims) {
    Extractor e;
    for (int i = 0; i < n_layers; ++i) e.layers.push_back(ConvKernel::identity(side, dims));
    return e;
  }
};

// Four extractors mirroring the per-stage split: a rotation/scale pair and a
// translation pair, one per input side.
struct FilterStack {
  int dims = 2;
  Extractor rs1, rs2, t1, t2;

  static FilterStack identity(int dims, int n_layers = 2, int side = 3) {
    FilterStack s;
    s.dims = dims;
    s.rs1 = s.rs2 = s.t1 = s.t2 = Extractor::identity(n_layers, side, dims);
    return s;
  }
};

enum class Stage { RotScale, Translation };

// --- zero-padded same-size convolution, plus the pieces backward needs ---

template <typename T>
Grid2<T> conv_same(const Grid2<T>& g, const ConvKernel& ker) {
  if (ker.dims != 2) throw ShapeError("conv_same: kernel dims != grid dims");
  const int n = g.n(), k = ker.k, h = k / 2;
  Grid2<T> out(g.B, g.extent);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int a = 0; a < k; ++a) {
        const int ii = i + a - h;
        if (ii < 0 || ii >= n) continue;
        for (int b = 0; b < k; ++b) {
          const int jj = j + b - h;
          if (jj < 0 || jj >= n) continue;
          acc += ker.w[a * k + b] * double(g(ii, jj));
        }
      }
      out(i, j) = T(acc);
    }
  return out;
}

template <typename T>
Grid3<T> conv_same(const Grid3<T>& g, const ConvKernel& ker) {
  if (ker.dims != 3) throw ShapeError("conv_same: kernel dims != grid dims");
  const int n = g.n(), k = ker.k, h = k / 2;
  Grid3<T> out(g.B, g.extent);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int q = 0; q < n; ++q) {
        double acc = 0;
        for (int a = 0; a < k; ++a) {
          const int ii = i + a - h;
          if (ii < 0 || ii >= n) continue;
          for (int b = 0; b < k; ++b) {
            const int jj = j + b - h;
            if (jj < 0 || jj >= n) continue;
            for (int c = 0; c < k; ++c) {
              const int qq = q + c - h;
              if (qq < 0 || qq >= n) continue;
              acc += ker.w[(a * k + b) * k + c] * double(g(ii, jj, qq));
            }
          }
        }
        out(i, j, q) = T(acc);
      }
  return out;
}

template <typename GridT>
GridT leaky(const GridT& g, double slope) {
  GridT out = g;
  for (Eigen::Index i = 0; i < out.data.size(); ++i)
    if (out.data[i] < 0) out.data[i] *= slope;
  return out;
}

// Forward pass through one extractor; optionally records the pre-activation
// outputs of each layer for the backward pass.
template <typename GridT>
GridT extract(const GridT& g, const Extractor& ex,
              std::vector<GridT>* pre_acts = nullptr) {
  if (ex.layers.empty()) throw ConfigError("extract: empty extractor");
  GridT cur = g;
  for (size_t li = 0; li < ex.layers.size(); ++li) {
    GridT z = conv_same(cur, ex.layers[li]);
    if (pre_acts) pre_acts->push_back(z);
    cur = (li + 1 < ex.layers.size()) ? leaky(z, ex.leak) : z;
  }
  return cur;
}

template <typename GridT>
GridT extract(const GridT& g, const FilterStack& stack, Stage stage, int side) {
  const Extractor& ex = stage == Stage::RotScale ? (side == 1 ? stack.rs1 : stack.rs2)
                                                 : (side == 1 ? stack.t1 : stack.t2);
  return extract(g, ex);
}

// Adjoint of conv_same w.r.t. the input: convolution with the flipped kernel
// (still zero-padded same-size).
inline ConvKernel flip(const ConvKernel& ker) {
  ConvKernel f(ker.k, ker.dims);
  const Eigen::Index nw = ker.w.size();
  for (Eigen::Index i = 0; i < nw; ++i) f.w[nw - 1 - i] = ker.w[i];
  return f;
}

template <typename GridT>
GridT conv_backward_input(const GridT& gbar, const ConvKernel& ker) {
  return conv_same(gbar, flip(ker));
}

// Gradient w.r.t. the kernel taps: dL/dw[a,b] = sum_ij gbar(i,j) g(i+a-h, j+b-h).
template <typename T>
Eigen::ArrayXd conv_backward_weights(const Grid2<T>& g, const Grid2<T>& gbar, int k) {
  const int n = g.n(), h = k / 2;
  Eigen::ArrayXd gw = Eigen::ArrayXd::Zero(Eigen::Index(k) * k);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b) {
      double acc = 0;
      for (int i = 0; i < n; ++i) {
        const int ii = i + a - h;
        if (ii < 0 || ii >= n) continue;
        for (int j = 0; j < n; ++j) {
          const int jj = j + b - h;
          if (jj < 0 || jj >= n) continue;
          acc += double(gbar(i, j)) * double(g(ii, jj));
        }
      }
      gw[a * k + b] = acc;
    }
  return gw;
}

template <typename T>
Eigen::ArrayXd conv_backward_weights(const Grid3<T>& g, const Grid3<T>& gbar, int k) {
  const int n = g.n(), h = k / 2;
  Eigen::ArrayXd gw = Eigen::ArrayXd::Zero(Eigen::Index(k) * k * k);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b)
      for (int c = 0; c < k; ++c) {
        double acc = 0;
        for (int i = 0; i < n; ++i) {
          const int ii = i + a - h;
          if (ii < 0 || ii >= n) continue;
          for (int j = 0; j < n; ++j) {
            const int jj = j + b - h;
            if (jj < 0 || jj >= n) continue;
            for (int q = 0; q < n; ++q) {
              const int qq = q + c - h;
              if (qq < 0 || qq >= n) continue;
              acc += double(gbar(i, j, q)) * double(g(ii, jj, qq));
            }
          }
        }
        gw[(a * k + b) * k + c] = acc;
      }
  return gw;
}

}  // namespace dpc
