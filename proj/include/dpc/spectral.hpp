#pragma once

#include "dpc/types.hpp"

#include <unsupported/Eigen/FFT>

namespace dpc {
namespace detail {

// One shared FFT object per thread; it caches kissfft plans per length.
inline Eigen::FFT<double>& fft_engine() {
  thread_local Eigen::FFT<double> fft;
  return fft;
}

// In-place unnormalized forward transform along one axis of a flat row-major
// complex array with the given shape.
inline void fft_axis(Eigen::ArrayXcd& a, const std::vector<int>& shape, int axis) {
  const int rank = int(shape.size());
  const int n = shape[axis];
  Eigen::Index stride = 1;
  for (int d = axis + 1; d < rank; ++d) stride *= shape[d];
  Eigen::Index lines = a.size() / n;
  std::vector<std::complex<double>> in(n), out(n);
  auto& fft = fft_engine();
  for (Eigen::Index line = 0; line < lines; ++line) {
    // decompose the line index into the non-axis coordinates -> base offset
    Eigen::Index offset = 0, r = line;
    for (int d = rank - 1; d >= 0; --d) {
      if (d == axis) continue;
      Eigen::Index coord = r % shape[d];
      r /= shape[d];
      Eigen::Index s = 1;
      for (int e = d + 1; e < rank; ++e) s *= shape[e];
      offset += coord * s;
    }
    for (int i = 0; i < n; ++i) in[i] = a[offset + i * stride];
    fft.fwd(out, in);
    for (int i = 0; i < n; ++i) a[offset + i * stride] = out[i];
  }
}

// Unnormalized forward DFT over all axes.
inline void fft_all(Eigen::ArrayXcd& a, const std::vector<int>& shape) {
  for (int axis = 0; axis < int(shape.size()); ++axis) fft_axis(a, shape, axis);
}

// Unnormalized inverse via conj(fwd(conj(x))).
inline void ifft_all(Eigen::ArrayXcd& a, const std::vector<int>& shape) {
  a = a.conjugate();
  fft_all(a, shape);
  a = a.conjugate();
}

}  // namespace detail

// Forward DFT with 1/(2B)^d normalization: G(j) = (1/N^d) sum_x g(x) e^{-2pi i j.x/N}.
template <typename T>
Spectrum3<T> dft(const Grid3<T>& g) {
  Spectrum3<T> S(g.B, false);
  Eigen::ArrayXcd buf = g.data.template cast<std::complex<double>>();
  detail::fft_all(buf, {g.n(), g.n(), g.n()});
  S.data = (buf / double(g.size())).cast<std::complex<T>>();
  return S;
}

template <typename T>
Spectrum2<T> dft(const Grid2<T>& g) {
  Spectrum2<T> S(g.B, false);
  Eigen::ArrayXcd buf = g.data.template cast<std::complex<double>>();
  detail::fft_all(buf, {g.n(), g.n()});
  S.data = (buf / double(g.size())).cast<std::complex<T>>();
  return S;
}

// Inverse of dft (so idft(dft(g)) = g): unnormalized inverse transform.
template <typename T>
Grid3<T> idft(const Spectrum3<T>& S) {
  if (S.centered) throw ShapeError("idft: expects an uncentered spectrum");
  Eigen::ArrayXcd buf = S.data.template cast<std::complex<double>>();
  detail::ifft_all(buf, {S.n(), S.n(), S.n()});
  Grid3<T> g(S.B, 1.0);
  g.data = buf.real().cast<T>();
  return g;
}

template <typename T>
Grid2<T> idft(const Spectrum2<T>& S) {
  if (S.centered) throw ShapeError("idft: expects an uncentered spectrum");
  Eigen::ArrayXcd buf = S.data.template cast<std::complex<double>>();
  detail::ifft_all(buf, {S.n(), S.n()});
  Grid2<T> g(S.B, 1.0);
  g.data = buf.real().cast<T>();
  return g;
}

// |dft(g)| with the zero frequency moved to storage index B per axis.
template <typename T>
Grid3<T> magnitude_spectrum(const Grid3<T>& g) {
  Spectrum3<T> S = dft(g);
  const int n = g.n(), B = g.B;
  Grid3<T> m(B, g.extent);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        m((i + B) % n, (j + B) % n, (k + B) % n) = std::abs(S(i, j, k));
  return m;
}

template <typename T>
Grid2<T> magnitude_spectrum(const Grid2<T>& g) {
  Spectrum2<T> S = dft(g);
  const int n = g.n(), B = g.B;
  Grid2<T> m(B, g.extent);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m((i + B) % n, (j + B) % n) = std::abs(S(i, j));
  return m;
}

// (G1 . conj(G2)) / (|G2|^2 + eps), eps = eps_rel * mean|G2|^2 plus a tiny
// absolute floor so an all-zero G2 yields zeros rather than NaNs.
template <typename SpecT>
SpecT cross_power(const SpecT& G1, const SpecT& G2, double eps_rel = 1e-8) {
  if (G1.B != G2.B || G1.centered != G2.centered)
    throw ShapeError("cross_power: mismatched spectra");
  SpecT C = G1;
  Eigen::ArrayXd p = G2.data.abs2().template cast<double>();
  double eps = eps_rel * p.mean() + 1e-300;
  C.data = (G1.data * G2.data.conjugate()) / (p + eps).cast<typename SpecT::ArrayT::Scalar>();
  return C;
}

namespace detail {

// Maps the raw inverse-transform array to signed-shift indexing:
// out[s + B] = raw[(-s) mod N] per axis, so index i stands for shift i - B.
inline Eigen::Index reindex1(int i, int B, int n) { return ((B - i) % n + n) % n; }

}  // namespace detail

// Phase correlation: correlate(a, b) peaks at the shift s with b(x) = a(x - s).
// The inverse transform is divided by N^d so a perfect match peaks near 1.
template <typename T>
CorrMap3<T> correlate(const Grid3<T>& g1, const Grid3<T>& g2, double eps_rel = 1e-8) {
  if (g1.B != g2.B) throw ShapeError("correlate: mismatched grids");
  auto C = cross_power(dft(g1), dft(g2), eps_rel);
  Eigen::ArrayXcd buf = C.data.template cast<std::complex<double>>();
  detail::ifft_all(buf, {g1.n(), g1.n(), g1.n()});
  buf /= double(g1.size());
  double im = buf.imag().abs().maxCoeff();
  if (im > 1e-4)
    throw NumericalError("correlate: imaginary residue " + std::to_string(im));
  const int n = g1.n(), B = g1.B;
  CorrMap3<T> out(B);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        out(i, j, k) = T(buf[(detail::reindex1(i, B, n) * n + detail::reindex1(j, B, n)) * n +
                             detail::reindex1(k, B, n)]
                             .real());
  return out;
}

template <typename T>
CorrMap2<T> correlate(const Grid2<T>& g1, const Grid2<T>& g2, double eps_rel = 1e-8) {
  if (g1.B != g2.B) throw ShapeError("correlate: mismatched grids");
  auto C = cross_power(dft(g1), dft(g2), eps_rel);
  Eigen::ArrayXcd buf = C.data.template cast<std::complex<double>>();
  detail::ifft_all(buf, {g1.n(), g1.n()});
  buf /= double(g1.size());
  double im = buf.imag().abs().maxCoeff();
  if (im > 1e-4)
    throw NumericalError("correlate: imaginary residue " + std::to_string(im));
  const int n = g1.n(), B = g1.B;
  CorrMap2<T> out(B);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      out(i, j) = T(buf[detail::reindex1(i, B, n) * n + detail::reindex1(j, B, n)].real());
  return out;
}

// 1D variant used along the log-radius axis of the scale stage. Handles any
// length n (the scale stage crops rows); zero shift sits at index n/2.
inline CorrMap1<double> correlate1(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b,
                                   double eps_rel = 1e-8) {
  if (a.size() != b.size()) throw ShapeError("correlate1: length mismatch");
  const int n = int(a.size());
  const int c = n / 2;
  Eigen::ArrayXcd A = a.cast<std::complex<double>>();
  Eigen::ArrayXcd Bc = b.cast<std::complex<double>>();
  detail::fft_all(A, {n});
  detail::fft_all(Bc, {n});
  A /= double(n);
  Bc /= double(n);
  Eigen::ArrayXd p = Bc.abs2();
  double eps = eps_rel * p.mean() + 1e-300;
  Eigen::ArrayXcd C = (A * Bc.conjugate()) / (p + eps);
  detail::ifft_all(C, {n});
  C /= double(n);
  CorrMap1<double> out(n);
  for (int i = 0; i < n; ++i) out.data[i] = C[detail::reindex1(i, c, n)].real();
  return out;
}

}  // namespace dpc
