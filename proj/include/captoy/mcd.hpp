#pragma once

#include <cmath>

#include "captoy/dtw.hpp"
#include "captoy/matrix.hpp"
#include "captoy/mel.hpp"
#include "captoy/toy_data.hpp"

namespace captoy {

// Conventional cepstral-distortion scaling, off by default.
inline const double kMcdScale = 10.0 * std::sqrt(2.0) / std::log(10.0);

struct McdOptions {
  double warp_penalty = 1.0;
  bool conventional_scale = false;
  bool per_frame_by_max_len = false;
};

// Average per-frame cost of the penalized alignment between two frame
// matrices (MFCC rows for audio, raw channels for toy model output).
inline double mcd_dtw(const Matrix& a, const Matrix& b, const McdOptions& opts = {}) {
  DtwOptions dopts;
  dopts.warp_penalty = opts.warp_penalty;
  dopts.cost_scale = opts.conventional_scale ? kMcdScale : 1.0;
  dopts.per_frame_by_max_len = opts.per_frame_by_max_len;
  return dtw(a, b, dopts).per_frame_cost;
}

inline double mcd_dtw(const Utterance& a, const Utterance& b, const McdOptions& opts = {}) {
  return mcd_dtw(a.frames, b.frames, opts);
}

inline double mcd_dtw_audio(const Vec& a, const Vec& b, int sample_rate,
                            const McdOptions& opts = {}, const MelOptions& mel_opts = {}) {
  const Matrix fa = mfcc13(mel_spectrogram(a, sample_rate, mel_opts));
  const Matrix fb = mfcc13(mel_spectrogram(b, sample_rate, mel_opts));
  return mcd_dtw(fa, fb, opts);
}

}  // namespace captoy
