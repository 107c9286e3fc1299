#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <vector>

#include "captoy/common.hpp"
#include "captoy/gaussian.hpp"
#include "captoy/matrix.hpp"
#include "captoy/mcd.hpp"
#include "captoy/model.hpp"
#include "captoy/rng.hpp"
#include "captoy/toy_data.hpp"

namespace captoy {

enum class LatentLevel { flat, via_z_h, via_z_l };

struct TransferJob {
  Utterance reference;
  int target_y_t = 0;
  int target_y_s = 0;
  LatentLevel latent_level = LatentLevel::flat;
  int num_samples = 1;
  std::uint64_t seed = 0;
};

// Re-synthesizes the reference's style with the job's target labels.
//
// flat:     deterministic embedding (posterior mean, or the heuristic
//           bottleneck), so every requested sample is the same decode.
// via_z_h:  one z_H inferred from the reference, then num_samples
//           independent draws from the conditional prior p(z_L | z_H).
// via_z_l:  num_samples independent draws from q(z_L | reference).
inline std::vector<Matrix> transfer(const Model& model, const TransferJob& job, int max_len) {
  if (job.num_samples < 1) throw ConfigError("num_samples must be >= 1");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  const ModelConfig& cfg = model.config();
  if (job.latent_level != LatentLevel::flat && !cfg.hierarchical)
    throw ConfigError("via_z_h / via_z_l transfer requires a hierarchical model");

  Rng rng(mix_seed(job.seed, 0x7472616eULL));
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(job.num_samples));

  if (job.latent_level == LatentLevel::flat) {
    const EncodedReference ref = model.encode_reference(job.reference.frames);
    Vec z;
    if (cfg.bottleneck == Bottleneck::tanh_heuristic) {
      z = model.heuristic_bottleneck(ref);
    } else {
      z = model.posterior(ref, model.condition_summary(job.reference.y_t, job.reference.y_s)).mean;
    }
    const Matrix decoded = model.decode_free_running(z, job.target_y_t, job.target_y_s, max_len);
    for (int s = 0; s < job.num_samples; ++s) out.push_back(decoded);
    return out;
  }

  const DiagGaussian q_l = model.posterior_for(job.reference);
  if (job.latent_level == LatentLevel::via_z_h) {
    const Vec z_l = sample_reparam(q_l, rng.normal_vec(cfg.latent_dim));
    const Vec z_h = sample_reparam(model.hier_q_h(z_l), rng.normal_vec(cfg.latent_dim));
    const DiagGaussian p_l = model.hier_p_l(z_h);
    for (int s = 0; s < job.num_samples; ++s) {
      const Vec z = sample_reparam(p_l, rng.normal_vec(cfg.latent_dim));
      out.push_back(model.decode_free_running(z, job.target_y_t, job.target_y_s, max_len));
    }
  } else {
    for (int s = 0; s < job.num_samples; ++s) {
      const Vec z = sample_reparam(q_l, rng.normal_vec(cfg.latent_dim));
      out.push_back(model.decode_free_running(z, job.target_y_t, job.target_y_s, max_len));
    }
  }
  return out;
}

// Unconditional generation: z from the model's prior, then free-running decode.
inline std::vector<Matrix> prior_sample(const Model& model, int y_t, int y_s, int n,
                                        std::uint64_t seed, int max_len) {
  if (n < 0) throw ConfigError("sample count must be >= 0");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  const ModelConfig& cfg = model.config();
  if (cfg.bottleneck != Bottleneck::variational)
    throw ConfigError("prior sampling requires a variational bottleneck");

  Rng rng(mix_seed(seed, 0x7072696fULL));
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    Vec z = rng.normal_vec(cfg.latent_dim);
    if (cfg.hierarchical) z = sample_reparam(model.hier_p_l(z), rng.normal_vec(cfg.latent_dim));
    out.push_back(model.decode_free_running(z, y_t, y_s, max_len));
  }
  return out;
}

struct TransferEvalOptions {
  LatentLevel latent_level = LatentLevel::flat;
  int num_samples = 5;
  std::uint64_t seed = 0;
  McdOptions mcd;
};

struct TransferSummary {
  double ref_dist = 0.0;      // mean mcd_dtw(first sample, reference)
  double inter_sample = 0.0;  // mean mcd_dtw(first sample, each subsequent sample)
  int count = 0;
};

// Same-text, same-speaker transfer over a held-out set, scored with the shared
// generator signature so oracle stubs can stand in for the model.
inline TransferSummary evaluate_transfer_with(
    const std::function<std::vector<Matrix>(const Utterance&, int)>& generate,
    const Dataset& data, const TransferEvalOptions& opts = {}) {
  if (data.empty()) throw ConfigError("empty dataset");
  TransferSummary sum;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::vector<Matrix> outs = generate(data[i], static_cast<int>(i));
    if (outs.empty()) throw ConfigError("generator returned no samples");
    sum.ref_dist += mcd_dtw(outs.front(), data[i].frames, opts.mcd);
    if (outs.size() > 1) {
      double acc = 0.0;
      for (std::size_t k = 1; k < outs.size(); ++k)
        acc += mcd_dtw(outs.front(), outs[k], opts.mcd);
      sum.inter_sample += acc / static_cast<double>(outs.size() - 1);
    }
  }
  sum.count = static_cast<int>(data.size());
  sum.ref_dist /= sum.count;
  sum.inter_sample /= sum.count;
  return sum;
}

inline int free_running_cap(const Dataset& data) {
  int longest = 1;
  for (const Utterance& u : data) longest = std::max(longest, u.length());
  return 2 * longest;
}

inline TransferSummary evaluate_transfer(const Model& model, const Dataset& data,
                                         const TransferEvalOptions& opts = {}) {
  const int max_len = free_running_cap(data);
  return evaluate_transfer_with(
      [&](const Utterance& u, int index) {
        TransferJob job;
        job.reference = u;
        job.target_y_t = u.y_t;
        job.target_y_s = u.y_s;
        job.latent_level = opts.latent_level;
        job.num_samples = opts.num_samples;
        job.seed = mix_seed(opts.seed, static_cast<std::uint64_t>(index));
        return transfer(model, job, max_len);
      },
      data, opts);
}

}  // namespace captoy
