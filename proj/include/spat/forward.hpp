#pragma once

// Forward operators. The photoacoustic operator is split as
//   A = A_eir' * A_s
// where A_s deposits each point absorber as a 1/r weighted, two-tap
// fractional delay at its time of flight, and A_eir' convolves every
// transducer trace with the time derivative of the transducer impulse
// response. The microscopy variant is a plain 2D convolution with a PSF.

#include <Eigen/SparseCore>
#include <unsupported/Eigen/FFT>
#include <bit>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "spat/error.hpp"
#include "spat/geometry.hpp"
#include "spat/types.hpp"

namespace spat {

struct MediumParams {
  double beta = 2.07e-4;  // 1/K, water at room temperature
  double c_p = 4184.0;    // J/(kg K)
  double c0 = 1500.0;     // m/s

  void validate() const {
    if (!(beta > 0.0) || !(c_p > 0.0) || !(c0 > 0.0))
      throw InvalidArgument("medium parameters must be positive");
  }
  double prefactor() const { return beta / (4.0 * std::numbers::pi * c_p); }
};

namespace detail {

inline ComplexVector fft(const ComplexVector& x) {
  Eigen::FFT<double> f;
  ComplexVector out;
  f.fwd(out, x);
  return out;
}

inline ComplexVector ifft(const ComplexVector& x) {
  Eigen::FFT<double> f;
  ComplexVector out;
  f.inv(out, x);
  return out;
}

/// Signed frequency (Hz) of bin k on a length-P grid with period dt.
inline double bin_frequency(Index k, Index P, double dt) {
  const Index s = (k <= P / 2) ? k : k - P;
  return double(s) / (double(P) * dt);
}

// 2D transforms: columns first, then rows.
inline ComplexMatrix fft2(const ComplexMatrix& x, bool inverse) {
  Eigen::FFT<double> f;
  ComplexMatrix tmp(x.rows(), x.cols());
  ComplexVector in, out;
  for (Index c = 0; c < x.cols(); ++c) {
    in = x.col(c);
    if (inverse) f.inv(out, in); else f.fwd(out, in);
    tmp.col(c) = out;
  }
  ComplexMatrix res(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    in = tmp.row(r).transpose();
    if (inverse) f.inv(out, in); else f.fwd(out, in);
    res.row(r) = out.transpose();
  }
  return res;
}

}  // namespace detail

/// Gaussian-envelope cosine impulse response and the spectrum of its time
/// derivative on an FFT grid long enough for truncated linear convolution.
struct EirModel {
  double f0;
  double fwhm;
  double sigma_t;
  Timebase timebase;
  Index fft_size;
  /// Spectrum of EIR' (derivative kernel), circular storage with the
  /// kernel peak at sample 0.
  ComplexVector kernel_spectrum;

  double eir(double t) const {
    return std::cos(2.0 * std::numbers::pi * f0 * t) *
           std::exp(-t * t / (2.0 * sigma_t * sigma_t));
  }

  double eir_derivative(double t) const {
    const double w = 2.0 * std::numbers::pi * f0;
    const double env = std::exp(-t * t / (2.0 * sigma_t * sigma_t));
    return (-w * std::sin(w * t) - t / (sigma_t * sigma_t) * std::cos(w * t)) *
           env;
  }

  /// Circularly stored EIR samples at offsets -(T-1)..(T-1) samples.
  Vector eir_kernel() const {
    const int T = timebase.samples;
    Vector k = Vector::Zero(fft_size);
    for (int j = -(T - 1); j <= T - 1; ++j)
      k((j + fft_size) % fft_size) = eir(j * timebase.dt);
    return k;
  }

  /// Time-domain EIR' kernel (inverse transform of kernel_spectrum).
  Vector derivative_kernel() const {
    return detail::ifft(kernel_spectrum).real();
  }
};

inline EirModel build_eir(double f0, double fwhm, const Timebase& tb) {
  if (!(f0 > 0.0)) throw InvalidArgument("EIR center frequency must be positive");
  if (!(fwhm > 0.0)) throw InvalidArgument("EIR FWHM must be positive");
  const double nyquist = 0.5 / tb.dt;
  if (!(nyquist > f0 + fwhm))
    throw InvalidArgument("EIR band f0 + fwhm = " + std::to_string(f0 + fwhm) +
                          " Hz exceeds Nyquist " + std::to_string(nyquist) +
                          " Hz");

  const double sigma_t =
      std::sqrt(2.0 * std::numbers::ln2) / (std::numbers::pi * fwhm);
  const Index P = Index(std::bit_ceil(unsigned(2 * tb.samples - 1)));
  EirModel model{f0, fwhm, sigma_t, tb, P, {}};

  const Vector k = model.eir_kernel();
  ComplexVector spec = detail::fft(k.cast<std::complex<double>>());
  for (Index b = 0; b < P; ++b) {
    const double f = (2 * b == P) ? 0.0 : detail::bin_frequency(b, P, tb.dt);
    spec(b) *= std::complex<double>(0.0, 2.0 * std::numbers::pi * f);
  }
  model.kernel_spectrum = std::move(spec);
  return model;
}

/// Sparse time-of-flight operator A_s (rows = T*M transducer-major, cols = N).
struct SparseSignalOperator {
  Eigen::SparseMatrix<double> matrix;
  ObjectGrid grid;
  TransducerArray array;
  Timebase timebase;
  MediumParams medium;

  Index rows() const { return matrix.rows(); }
  Index cols() const { return matrix.cols(); }
};

/// Fractional sample indices this close to an integer snap onto it.
inline constexpr double kDelaySnap = 1e-9;

/// Transducer/pixel pairs closer than `min_distance` are rejected; the
/// default guard is one grid spacing.
inline SparseSignalOperator build_sparse_signal_operator(
    const ObjectGrid& grid, const TransducerArray& array, const Timebase& tb,
    const MediumParams& medium, std::optional<double> min_distance = {}) {
  medium.validate();
  const double guard = min_distance.value_or(grid.min_spacing());
  const int T = tb.samples;
  const Index M = array.size();
  const Index N = grid.size();
  const double pref = medium.prefactor();

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(std::size_t(2 * M * N));
  for (Index n = 0; n < N; ++n) {
    const Point3 x = grid.point(n);
    for (Index m = 0; m < M; ++m) {
      const double r = (array.position(m) - x).norm();
      if (r < guard)
        throw ArrivalOutOfWindow(
            "pixel " + std::to_string(n) + " lies within " +
                std::to_string(guard) + " m of transducer " + std::to_string(m),
            int(n), int(m));
      double f = (r / medium.c0 - tb.t0) / tb.dt;
      const double nearest = std::round(f);
      if (std::abs(f - nearest) < kDelaySnap) f = nearest;
      if (f < 0.0 || f > T - 1)
        throw ArrivalOutOfWindow(
            "arrival time " + std::to_string(r / medium.c0) + " s of pixel " +
                std::to_string(n) + " at transducer " + std::to_string(m) +
                " lies outside the recording window",
            int(n), int(m));
      const double amp = pref / r;
      const auto i0 = static_cast<Index>(std::floor(f));
      const double frac = f - double(i0);
      const Index row = m * T + i0;
      if (frac == 0.0) {
        trips.emplace_back(row, n, amp);
      } else {
        trips.emplace_back(row, n, amp * (1.0 - frac));
        trips.emplace_back(row + 1, n, amp * frac);
      }
    }
  }
  Eigen::SparseMatrix<double> S(Index(T) * M, N);
  S.setFromTriplets(trips.begin(), trips.end());
  return SparseSignalOperator{std::move(S), grid, array, tb, medium};
}

/// Default budget for dense materialization (bytes).
inline constexpr std::size_t kDefaultMemoryBudget = std::size_t(2) << 30;

class ForwardOperator {
 public:
  struct Pat {
    SparseSignalOperator signal;
    EirModel eir;
  };
  struct Microscopy {
    Matrix kernel;
    ObjectGrid grid;
    Index pad_rows;
    Index pad_cols;
    ComplexMatrix kernel_spectrum;
  };

  static ForwardOperator pat(SparseSignalOperator signal, EirModel eir) {
    if (eir.timebase.samples != signal.timebase.samples ||
        eir.timebase.dt != signal.timebase.dt)
      throw DimensionMismatch("EIR and signal operator use different timebases");
    return ForwardOperator(Pat{std::move(signal), std::move(eir)});
  }

  static ForwardOperator microscopy(const Matrix& kernel, const ObjectGrid& grid) {
    if (kernel.size() == 0 || kernel.rows() > grid.n_y() ||
        kernel.cols() > grid.n_x())
      throw InvalidArgument("PSF kernel " + std::to_string(kernel.rows()) + "x" +
                            std::to_string(kernel.cols()) +
                            " does not fit the grid");
    if (!kernel.allFinite()) throw InvalidArgument("PSF kernel is not finite");
    const Index pr = grid.n_y() + kernel.rows() - 1;
    const Index pc = grid.n_x() + kernel.cols() - 1;
    ComplexMatrix padded = ComplexMatrix::Zero(pr, pc);
    padded.topLeftCorner(kernel.rows(), kernel.cols()) =
        kernel.cast<std::complex<double>>();
    return ForwardOperator(
        Microscopy{kernel, grid, pr, pc, detail::fft2(padded, false)});
  }

  Index rows() const {
    if (auto p = std::get_if<Pat>(&parts_)) return p->signal.rows();
    return std::get<Microscopy>(parts_).grid.size();
  }
  Index cols() const {
    if (auto p = std::get_if<Pat>(&parts_)) return p->signal.cols();
    return std::get<Microscopy>(parts_).grid.size();
  }

  bool is_pat() const { return std::holds_alternative<Pat>(parts_); }
  const Pat& pat_parts() const { return std::get<Pat>(parts_); }
  const Microscopy& microscopy_parts() const {
    return std::get<Microscopy>(parts_);
  }

  Vector apply(const Vector& rho) const {
    detail::require_dims(rho.size() == cols(),
                         "apply: expected " + std::to_string(cols()) +
                             " coefficients, got " + std::to_string(rho.size()));
    Eigen::FFT<double> fft;
    if (auto p = std::get_if<Pat>(&parts_)) return apply_pat(*p, rho, fft, false);
    return apply_microscopy(std::get<Microscopy>(parts_), rho, false);
  }

  Vector apply_adjoint(const Vector& y) const {
    detail::require_dims(y.size() == rows(),
                         "apply_adjoint: expected " + std::to_string(rows()) +
                             " samples, got " + std::to_string(y.size()));
    Eigen::FFT<double> fft;
    if (auto p = std::get_if<Pat>(&parts_)) return apply_pat(*p, y, fft, true);
    return apply_microscopy(std::get<Microscopy>(parts_), y, true);
  }

  /// Dense matrix whose column j is apply(e_j).
  Matrix materialize_dense(std::size_t budget = kDefaultMemoryBudget) const {
    const double bytes = double(rows()) * double(cols()) * sizeof(double);
    if (bytes > double(budget))
      throw MemoryBudgetExceeded(
          "dense operator " + std::to_string(rows()) + "x" +
          std::to_string(cols()) + " needs " + std::to_string(bytes) +
          " bytes, budget is " + std::to_string(budget));
    Matrix A(rows(), cols());
    Vector e = Vector::Zero(cols());
    Eigen::FFT<double> fft;
    for (Index j = 0; j < cols(); ++j) {
      e(j) = 1.0;
      if (auto p = std::get_if<Pat>(&parts_))
        A.col(j) = apply_pat(*p, e, fft, false);
      else
        A.col(j) = apply_microscopy(std::get<Microscopy>(parts_), e, false);
      e(j) = 0.0;
    }
    return A;
  }

  void cache_dense(std::size_t budget = kDefaultMemoryBudget) {
    dense_ = materialize_dense(budget);
  }
  const std::optional<Matrix>& dense_cache() const { return dense_; }

 private:
  explicit ForwardOperator(std::variant<Pat, Microscopy> parts)
      : parts_(std::move(parts)) {}

  static Vector apply_pat(const Pat& p, const Vector& in,
                          Eigen::FFT<double>& fft, bool adjoint) {
    const int T = p.signal.timebase.samples;
    const Index M = p.signal.array.size();
    const Index P = p.eir.fft_size;
    const Vector traces = adjoint ? in : Vector(p.signal.matrix * in);

    Vector conv(traces.size());
    ComplexVector buf(P), spec;
    for (Index m = 0; m < M; ++m) {
      buf.setZero();
      buf.head(T) = traces.segment(m * T, T).cast<std::complex<double>>();
      fft.fwd(spec, buf);
      if (adjoint)
        spec.array() *= p.eir.kernel_spectrum.array().conjugate();
      else
        spec.array() *= p.eir.kernel_spectrum.array();
      fft.inv(buf, spec);
      conv.segment(m * T, T) = buf.head(T).real();
    }
    if (adjoint) return p.signal.matrix.transpose() * conv;
    return conv;
  }

  static Vector apply_microscopy(const Microscopy& mp, const Vector& in,
                                 bool adjoint) {
    const int ny = mp.grid.n_y(), nx = mp.grid.n_x();
    const Index cr = mp.kernel.rows() / 2, cc = mp.kernel.cols() / 2;
    ComplexMatrix pad = ComplexMatrix::Zero(mp.pad_rows, mp.pad_cols);
    const Index r0 = adjoint ? cr : 0, c0 = adjoint ? cc : 0;
    for (int r = 0; r < ny; ++r)
      for (int c = 0; c < nx; ++c)
        pad(r0 + r, c0 + c) = in(mp.grid.index(r, c));
    ComplexMatrix spec = detail::fft2(pad, false);
    if (adjoint)
      spec.array() *= mp.kernel_spectrum.array().conjugate();
    else
      spec.array() *= mp.kernel_spectrum.array();
    const ComplexMatrix full = detail::fft2(spec, true);
    Vector out(mp.grid.size());
    const Index o_r = adjoint ? 0 : cr, o_c = adjoint ? 0 : cc;
    for (int r = 0; r < ny; ++r)
      for (int c = 0; c < nx; ++c)
        out(mp.grid.index(r, c)) = full(o_r + r, o_c + c).real();
    return out;
  }

  std::variant<Pat, Microscopy> parts_;
  std::optional<Matrix> dense_;
};

inline ForwardOperator build_pat_operator(const ObjectGrid& grid,
                                          const TransducerArray& array,
                                          const Timebase& tb,
                                          const MediumParams& medium,
                                          double f0, double fwhm) {
  return ForwardOperator::pat(
      build_sparse_signal_operator(grid, array, tb, medium),
      build_eir(f0, fwhm, tb));
}

inline ForwardOperator build_microscopy_operator(const Matrix& psf,
                                                 const ObjectGrid& grid) {
  return ForwardOperator::microscopy(psf, grid);
}

inline Vector apply_forward(const ForwardOperator& op, const Vector& rho) {
  return op.apply(rho);
}

inline Matrix materialize_dense(const ForwardOperator& op,
                                std::size_t budget = kDefaultMemoryBudget) {
  return op.materialize_dense(budget);
}

/// Normalized 2D Gaussian PSF of size rows x cols and width sigma (pixels).
inline Matrix gaussian_psf(int rows, int cols, double sigma) {
  if (rows < 1 || cols < 1 || !(sigma > 0.0))
    throw InvalidArgument("gaussian_psf: bad size or width");
  Matrix h(rows, cols);
  const double cr = (rows - 1) / 2.0, cc = (cols - 1) / 2.0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      h(r, c) = std::exp(-((r - cr) * (r - cr) + (c - cc) * (c - cc)) /
                         (2.0 * sigma * sigma));
  return h / h.sum();
}

/// Magnitude of the analytic signal (Hilbert envelope) of a real trace.
/// The trace is zero-padded to twice its length to avoid wrap-around.
inline Vector analytic_envelope(const Vector& x) {
  const Index n = x.size();
  const Index P = 2 * n;
  ComplexVector padded = ComplexVector::Zero(P);
  padded.head(n) = x.cast<std::complex<double>>();
  ComplexVector spec = detail::fft(padded);
  for (Index k = 1; k < P; ++k) {
    if (2 * k < P) spec(k) *= 2.0;
    else if (2 * k > P) spec(k) = 0.0;
  }
  return detail::ifft(spec).head(n).cwiseAbs();
}

/// Sub-sample position of the envelope maximum: the Hilbert envelope is
/// smoothed with a [1 2 1]/4 filter and the peak refined by a parabola.
inline double envelope_peak(const Vector& trace) {
  const Vector env = analytic_envelope(trace);
  const Index n = env.size();
  if (n < 3) {
    Index i = 0;
    if (n) env.maxCoeff(&i);
    return double(i);
  }
  Vector s(n);
  for (Index i = 0; i < n; ++i) {
    const double l = env(i > 0 ? i - 1 : i), r = env(i + 1 < n ? i + 1 : i);
    s(i) = 0.25 * l + 0.5 * env(i) + 0.25 * r;
  }
  Index k;
  s.maxCoeff(&k);
  if (k == 0 || k == n - 1) return double(k);
  const double a = s(k - 1), b = s(k), c = s(k + 1);
  const double denom = a - 2.0 * b + c;
  return denom < 0.0 ? double(k) + 0.5 * (a - c) / denom : double(k);
}

}  // namespace spat
