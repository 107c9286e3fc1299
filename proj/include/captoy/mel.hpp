#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <vector>

#include "captoy/common.hpp"
#include "captoy/matrix.hpp"

namespace captoy {

// In-place iterative radix-2 FFT.
inline void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ConfigError("fft size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

struct MelSpectrogram {
  Matrix frames;  // T x bands, log band energies
  int sample_rate = 0;
  double hop_seconds = 0.0;
};

struct MelOptions {
  int frame_length = 1200;  // 50 ms at 24 kHz
  int hop = 300;            // 12.5 ms at 24 kHz
  int fft_size = 2048;
  int bands = 80;
  double fmin = 80.0;
  double fmax = 12000.0;
  double log_floor = 1e-10;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filterbank with unit peaks, bands x (fft_size/2 + 1).
inline Matrix mel_filterbank(const MelOptions& opts, int sample_rate) {
  const int bins = opts.fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(opts.fmin);
  const double mel_hi = hz_to_mel(opts.fmax);
  std::vector<double> edges(static_cast<std::size_t>(opts.bands) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / (opts.bands + 1));

  Matrix fb(opts.bands, bins);
  for (int m = 0; m < opts.bands; ++m) {
    const double left = edges[static_cast<std::size_t>(m)];
    const double peak = edges[static_cast<std::size_t>(m) + 1];
    const double right = edges[static_cast<std::size_t>(m) + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / opts.fft_size;
      const double rise = (f - left) / (peak - left);
      const double fall = (right - f) / (right - peak);
      fb(m, k) = std::max(0.0, std::min(rise, fall));
    }
  }
  return fb;
}

// Hann-windowed magnitude STFT followed by the mel filterbank and natural-log
// compression. Frames are laid out without padding: count = 1 + (len - frame)/hop.
inline MelSpectrogram mel_spectrogram(const Vec& samples, int sample_rate,
                                      const MelOptions& opts = {}) {
  if (static_cast<int>(samples.size()) < opts.frame_length)
    throw DataError("signal shorter than one analysis frame");
  if (opts.fft_size < opts.frame_length) throw ConfigError("fft size smaller than frame");

  Vec window(static_cast<std::size_t>(opts.frame_length));
  for (int i = 0; i < opts.frame_length; ++i)
    window[static_cast<std::size_t>(i)] =
        0.5 * (1.0 - std::cos(2.0 * M_PI * i / opts.frame_length));

  const Matrix fb = mel_filterbank(opts, sample_rate);
  const int bins = opts.fft_size / 2 + 1;
  const int count = 1 + (static_cast<int>(samples.size()) - opts.frame_length) / opts.hop;

  MelSpectrogram out;
  out.frames = Matrix(count, opts.bands);
  out.sample_rate = sample_rate;
  out.hop_seconds = static_cast<double>(opts.hop) / sample_rate;

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(opts.fft_size));
  Vec mag(static_cast<std::size_t>(bins));
  for (int t = 0; t < count; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * static_cast<std::size_t>(opts.hop);
    for (int i = 0; i < opts.fft_size; ++i) {
      buf[static_cast<std::size_t>(i)] =
          i < opts.frame_length
              ? samples[start + static_cast<std::size_t>(i)] * window[static_cast<std::size_t>(i)]
              : 0.0;
    }
    fft_radix2(buf);
    for (int k = 0; k < bins; ++k) mag[static_cast<std::size_t>(k)] = std::abs(buf[static_cast<std::size_t>(k)]);
    for (int m = 0; m < opts.bands; ++m) {
      double e = 0.0;
      const double* row = fb.row_ptr(m);
      for (int k = 0; k < bins; ++k) e += row[k] * mag[static_cast<std::size_t>(k)];
      out.frames(t, m) = std::log(std::max(e, opts.log_floor));
    }
  }
  return out;
}

// Orthonormal DCT-II of one frame, all coefficients.
inline Vec dct2_orthonormal(const Vec& x) {
  const int n = static_cast<int>(x.size());
  if (n == 0) throw ConfigError("empty dct input");
  Vec out(static_cast<std::size_t>(n));
  const double s0 = std::sqrt(1.0 / n);
  const double s = std::sqrt(2.0 / n);
  for (int j = 0; j < n; ++j) {
    double acc = 0.0;
    for (int b = 0; b < n; ++b)
      acc += x[static_cast<std::size_t>(b)] * std::cos(M_PI * j * (2.0 * b + 1.0) / (2.0 * n));
    out[static_cast<std::size_t>(j)] = (j == 0 ? s0 : s) * acc;
  }
  return out;
}

// Cepstral coefficients 1..13 per frame (the energy coefficient 0 is dropped).
inline Matrix mfcc13(const MelSpectrogram& mel) {
  const int bands = mel.frames.cols();
  if (mel.frames.rows() < 1) throw ConfigError("need at least one frame");
  if (bands < 14) throw ConfigError("need at least 14 bands for 13 cepstral coefficients");
  Matrix out(mel.frames.rows(), 13);
  for (int t = 0; t < mel.frames.rows(); ++t) {
    const Vec coef = dct2_orthonormal(mel.frames.row(t));
    for (int j = 0; j < 13; ++j) out(t, j) = coef[static_cast<std::size_t>(j) + 1];
  }
  return out;
}

}  // namespace captoy
