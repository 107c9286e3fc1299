#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "captoy/common.hpp"
#include "captoy/gaussian.hpp"
#include "captoy/matrix.hpp"
#include "captoy/numerics.hpp"
#include "captoy/rng.hpp"
#include "captoy/toy_data.hpp"

namespace captoy {

inline constexpr int kEmbedDim = 8;

enum class Bottleneck { variational, tanh_heuristic };

struct ModelConfig {
  int channels = 8;
  int num_text_classes = 10;
  int num_speakers = 4;
  int latent_dim = 2;
  int hidden_dim = 32;
  bool hierarchical = false;
  bool condition_on_text = true;
  bool condition_on_speaker = true;
  Bottleneck bottleneck = Bottleneck::variational;

  void validate() const {
    if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
    if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (num_text_classes < 1 || num_speakers < 1)
      throw ConfigError("need at least one text class and one speaker");
    if (hierarchical && bottleneck != Bottleneck::variational)
      throw ConfigError("hierarchical mode requires the variational bottleneck");
  }

  // Width of the conditioning vector fed to the posterior network.
  int cond_dim() const {
    return (condition_on_text ? kEmbedDim : 0) + (condition_on_speaker ? kEmbedDim : 0);
  }

  bool operator==(const ModelConfig&) const = default;
};

struct EncodedReference {
  Vec summary;
};

// Both latent levels of one hierarchical inference pass, with the three
// distributions needed by the training objective and the capacity meter.
struct HierLatents {
  Vec z_h, z_l;
  DiagGaussian q_l;          // q(z_L | x, cond)
  DiagGaussian q_h;          // q(z_H | z_L)
  DiagGaussian p_l_given_h;  // p(z_L | z_H)
};

// Reconstruction and rate terms of one training example. recon_nll is summed
// over frames; divide by `frames` for the per-frame view.
struct FlatTerms {
  double recon_nll = 0.0;
  double r = 0.0;
  int frames = 0;
};

struct HierTerms {
  double recon_nll = 0.0;
  double r_h = 0.0;
  double r_l = 0.0;
  int frames = 0;
};

// Conditional sequence model with an information-bottlenecked style latent.
//
// Pieces: a tanh recurrent reference encoder summarizing the input sequence,
// a posterior network mapping [summary || condition embeddings] to a diagonal
// Gaussian (or a deterministic tanh projection in heuristic mode), an optional
// second latent level (q(z_H|z_L) with a learned conditional prior p(z_L|z_H)),
// and a tanh recurrent decoder conditioned on [z || text emb || speaker emb]
// that predicts frames plus a stop logit.
//
// All training passes accumulate hand-derived gradients into the ParamStore.
// Const methods are inference-only and safe to call concurrently on a frozen
// instance.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    create_params();
    init_params(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  //--------------------------------------------------------------------------
  // Inference
  //--------------------------------------------------------------------------

  EncodedReference encode_reference(const Matrix& frames) const {
    if (frames.rows() < 1) throw ConfigError("cannot encode an empty sequence");
    if (frames.cols() != cfg_.channels) throw ConfigError("frame channel count mismatch");
    RnnCache cache;
    encoder_forward(frames, cache);
    return EncodedReference{cache.h.back()};
  }

  // Concatenated posterior-side embeddings for whichever labels the posterior
  // conditions on; empty when both flags are off.
  Vec condition_summary(int y_t, int y_s) const {
    Vec cond;
    if (cfg_.condition_on_text) {
      check_labels(y_t, 0);
      const Vec row = params_.value("post.text_emb").row(y_t);
      cond.insert(cond.end(), row.begin(), row.end());
    }
    if (cfg_.condition_on_speaker) {
      check_labels(0, y_s);
      const Vec row = params_.value("post.spk_emb").row(y_s);
      cond.insert(cond.end(), row.begin(), row.end());
    }
    return cond;
  }

  DiagGaussian posterior(const EncodedReference& ref, const Vec& cond) const {
    require_variational();
    TwoHeadCache c;
    two_head_forward("post", concat(ref.summary, cond), c);
    return DiagGaussian(c.mu, c.lv);
  }

  DiagGaussian posterior_for(const Utterance& u) const {
    return posterior(encode_reference(u.frames), condition_summary(u.y_t, u.y_s));
  }

  // Deterministic low-dimensional embedding used by the non-variational
  // baseline: affine projection of the summary followed by tanh.
  Vec heuristic_bottleneck(const EncodedReference& ref) const {
    if (cfg_.bottleneck != Bottleneck::tanh_heuristic)
      throw ConfigError("model is not in heuristic-bottleneck mode");
    return tanh_vec(affine(params_.value("bneck.w"), params_.value("bneck.b").row(0),
                           ref.summary));
  }

  DiagGaussian hier_q_h(const Vec& z_l) const {
    require_hierarchical();
    TwoHeadCache c;
    two_head_forward("hq", z_l, c);
    return DiagGaussian(c.mu, c.lv);
  }

  DiagGaussian hier_p_l(const Vec& z_h) const {
    require_hierarchical();
    TwoHeadCache c;
    two_head_forward("hp", z_h, c);
    return DiagGaussian(c.mu, c.lv);
  }

  HierLatents hierarchical_posterior(const EncodedReference& ref, const Vec& cond,
                                     const Vec& eps_l, const Vec& eps_h) const {
    require_hierarchical();
    HierLatents out;
    TwoHeadCache c;
    two_head_forward("post", concat(ref.summary, cond), c);
    out.q_l = DiagGaussian(c.mu, c.lv);
    out.z_l = sample_reparam(out.q_l, eps_l);
    out.q_h = hier_q_h(out.z_l);
    out.z_h = sample_reparam(out.q_h, eps_h);
    out.p_l_given_h = hier_p_l(out.z_h);
    return out;
  }

  // Teacher forcing: the decoder consumes ground-truth previous frames.
  // Returns predicted frames and the summed loss (L1 + stop cross-entropy).
  std::pair<Matrix, double> decode_teacher_forced(const Vec& z, int y_t, int y_s,
                                                  const Matrix& x) const {
    DecCache cache;
    decoder_forward(z, y_t, y_s, x, cache);
    Matrix pred(x.rows(), cfg_.channels);
    for (int t = 0; t < x.rows(); ++t)
      for (int d = 0; d < cfg_.channels; ++d) pred(t, d) = cache.xhat[static_cast<std::size_t>(t)][static_cast<std::size_t>(d)];
    return {std::move(pred), decoder_loss(cache, x)};
  }

  // Free-running generation: the decoder feeds back its own predictions and
  // halts when the stop head fires (sigmoid > 0.5) or at max_len frames.
  Matrix decode_free_running(const Vec& z, int y_t, int y_s, int max_len) const {
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
    if (static_cast<int>(z.size()) != cfg_.latent_dim) throw ConfigError("latent dimension mismatch");
    const Vec c = decoder_context(z, y_t, y_s);
    const Matrix& w_h = params_.value("dec.w_h");
    const Matrix& w_x = params_.value("dec.w_x");
    const Matrix& w_c = params_.value("dec.w_c");
    const Vec b = params_.value("dec.b").row(0);
    const Matrix& w_o = params_.value("dec.w_o");
    const Vec b_o = params_.value("dec.b_o").row(0);
    const Vec w_s = params_.value("dec.w_s").row(0);
    const double b_s = params_.value("dec.b_s")(0, 0);
    const Vec wc_c = matvec(w_c, c);

    std::vector<Vec> out;
    Vec h(static_cast<std::size_t>(cfg_.hidden_dim), 0.0);
    Vec x_prev(static_cast<std::size_t>(cfg_.channels), 0.0);
    for (int t = 0; t < max_len; ++t) {
      Vec a = matvec(w_h, h);
      const Vec ax = matvec(w_x, x_prev);
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::tanh(a[i] + ax[i] + wc_c[i] + b[i]);
      h = std::move(a);
      Vec xhat = affine(w_o, b_o, h);
      const double s = dot(w_s, h) + b_s;
      out.push_back(xhat);
      x_prev = std::move(xhat);
      if (sigmoid(s) > 0.5) break;
    }
    Matrix frames(static_cast<int>(out.size()), cfg_.channels);
    for (std::size_t t = 0; t < out.size(); ++t)
      for (int d = 0; d < cfg_.channels; ++d) frames(static_cast<int>(t), d) = out[t][static_cast<std::size_t>(d)];
    return frames;
  }

  //--------------------------------------------------------------------------
  // Training passes (forward + gradient accumulation)
  //--------------------------------------------------------------------------

  // Single-sample reparameterized pass. Accumulates
  //   scale * d/d_theta [ recon_nll + kl_weight * KL(q || N(0,I)) ]
  // into the parameter gradients and returns the loss terms unscaled.
  FlatTerms elbo_backward(const Utterance& u, const Vec& eps, double kl_weight,
                          double scale = 1.0) {
    require_variational();
    if (cfg_.hierarchical) throw ConfigError("flat pass called on a hierarchical model");

    RnnCache enc;
    encoder_forward(u.frames, enc);
    const Vec cond = condition_summary(u.y_t, u.y_s);
    TwoHeadCache post;
    two_head_forward("post", concat(enc.h.back(), cond), post);
    const DiagGaussian q(post.mu, post.lv);
    const Vec z = sample_reparam(q, eps);
    DecCache dec;
    decoder_forward(z, u.y_t, u.y_s, u.frames, dec);

    FlatTerms terms;
    terms.recon_nll = decoder_loss(dec, u.frames);
    terms.r = kl_to_standard_normal(q);
    terms.frames = u.length();

    Vec d_z(z.size(), 0.0);
    decoder_backward(dec, u.y_t, u.y_s, u.frames, scale, d_z);

    Vec d_mu(z.size(), 0.0), d_lv(z.size(), 0.0);
    const double wk = scale * kl_weight;
    for (std::size_t i = 0; i < z.size(); ++i) {
      d_mu[i] = wk * q.mean[i];
      d_lv[i] = wk * 0.5 * (std::exp(q.log_var[i]) - 1.0);
      const double sd = std::exp(0.5 * q.log_var[i]);
      d_mu[i] += d_z[i];
      d_lv[i] += d_z[i] * eps[i] * 0.5 * sd;
    }
    backprop_posterior_input(post, d_mu, d_lv, enc, u);
    return terms;
  }

  // Hierarchical pass. Rates: r_h = KL(q_H || N(0,I)) and r_l = KL(q_L ||
  // p(z_L|z_H)) at the sampled z_H; the decoder consumes z_L. Accumulates
  //   scale * d [ recon_nll + w_h * r_h + w_l * r_l ].
  HierTerms hier_elbo_backward(const Utterance& u, const Vec& eps_l, const Vec& eps_h,
                               double w_h, double w_l, double scale = 1.0) {
    require_hierarchical();

    RnnCache enc;
    encoder_forward(u.frames, enc);
    const Vec cond = condition_summary(u.y_t, u.y_s);
    TwoHeadCache post;
    two_head_forward("post", concat(enc.h.back(), cond), post);
    const DiagGaussian q_l(post.mu, post.lv);
    const Vec z_l = sample_reparam(q_l, eps_l);
    TwoHeadCache hq;
    two_head_forward("hq", z_l, hq);
    const DiagGaussian q_h(hq.mu, hq.lv);
    const Vec z_h = sample_reparam(q_h, eps_h);
    TwoHeadCache hp;
    two_head_forward("hp", z_h, hp);
    const DiagGaussian p_l(hp.mu, hp.lv);
    DecCache dec;
    decoder_forward(z_l, u.y_t, u.y_s, u.frames, dec);

    HierTerms terms;
    terms.recon_nll = decoder_loss(dec, u.frames);
    terms.r_h = kl_to_standard_normal(q_h);
    terms.r_l = kl_divergence(q_l, p_l);
    terms.frames = u.length();

    // Reconstruction pulls on z_L.
    Vec d_z_l(z_l.size(), 0.0);
    decoder_backward(dec, u.y_t, u.y_s, u.frames, scale, d_z_l);

    // r_l pulls on (q_L, p_L) parameters; the p_L side routes through z_H.
    Vec d_mu_l(z_l.size(), 0.0), d_lv_l(z_l.size(), 0.0);
    Vec d_mu_p(z_l.size(), 0.0), d_lv_p(z_l.size(), 0.0);
    kl_backward(q_l, p_l, scale * w_l, d_mu_l, d_lv_l, d_mu_p, d_lv_p);
    Vec d_z_h(z_h.size(), 0.0);
    two_head_backward("hp", hp, d_mu_p, d_lv_p, d_z_h);

    // r_h pulls on q_H directly; the z_H sample adds the pathwise term.
    Vec d_mu_h(z_h.size(), 0.0), d_lv_h(z_h.size(), 0.0);
    const double wh = scale * w_h;
    for (std::size_t i = 0; i < z_h.size(); ++i) {
      d_mu_h[i] = wh * q_h.mean[i];
      d_lv_h[i] = wh * 0.5 * (std::exp(q_h.log_var[i]) - 1.0);
      const double sd = std::exp(0.5 * q_h.log_var[i]);
      d_mu_h[i] += d_z_h[i];
      d_lv_h[i] += d_z_h[i] * eps_h[i] * 0.5 * sd;
    }
    two_head_backward("hq", hq, d_mu_h, d_lv_h, d_z_l);

    for (std::size_t i = 0; i < z_l.size(); ++i) {
      const double sd = std::exp(0.5 * q_l.log_var[i]);
      d_mu_l[i] += d_z_l[i];
      d_lv_l[i] += d_z_l[i] * eps_l[i] * 0.5 * sd;
    }
    backprop_posterior_input(post, d_mu_l, d_lv_l, enc, u);
    return terms;
  }

  // Deterministic-bottleneck pass for the baseline: encoder -> tanh projection
  // -> decoder, plain reconstruction loss.
  FlatTerms recon_backward(const Utterance& u, double scale = 1.0) {
    if (cfg_.bottleneck != Bottleneck::tanh_heuristic)
      throw ConfigError("recon pass requires heuristic-bottleneck mode");
    RnnCache enc;
    encoder_forward(u.frames, enc);
    const Vec pre = affine(params_.value("bneck.w"), params_.value("bneck.b").row(0),
                           enc.h.back());
    const Vec z = tanh_vec(pre);
    DecCache dec;
    decoder_forward(z, u.y_t, u.y_s, u.frames, dec);

    FlatTerms terms;
    terms.recon_nll = decoder_loss(dec, u.frames);
    terms.frames = u.length();

    Vec d_z(z.size(), 0.0);
    decoder_backward(dec, u.y_t, u.y_s, u.frames, scale, d_z);
    Vec d_pre(z.size(), 0.0);
    tanh_backward(z, d_z, d_pre);
    Vec d_summary(static_cast<std::size_t>(cfg_.hidden_dim), 0.0);
    affine_backward(params_.value("bneck.w"), enc.h.back(), d_pre, params_.grad("bneck.w"),
                    params_.grad("bneck.b").data(), &d_summary);
    encoder_backward(u.frames, enc, d_summary);
    return terms;
  }

  //--------------------------------------------------------------------------
  // Checkpoints
  //--------------------------------------------------------------------------

  void save(std::ostream& os) const {
    os.write("CAPCKPT1", 8);
    write_u32(os, static_cast<std::uint32_t>(cfg_.channels));
    write_u32(os, static_cast<std::uint32_t>(cfg_.num_text_classes));
    write_u32(os, static_cast<std::uint32_t>(cfg_.num_speakers));
    write_u32(os, static_cast<std::uint32_t>(cfg_.latent_dim));
    write_u32(os, static_cast<std::uint32_t>(cfg_.hidden_dim));
    write_u32(os, pack_flags());
    write_u32(os, static_cast<std::uint32_t>(params_.count()));
    for (std::size_t i = 0; i < params_.count(); ++i) {
      const Param& p = params_.param(i);
      write_u32(os, static_cast<std::uint32_t>(p.name.size()));
      os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      write_u32(os, static_cast<std::uint32_t>(p.value.rows()));
      write_u32(os, static_cast<std::uint32_t>(p.value.cols()));
      for (double x : p.value.data()) write_f64(os, x);
    }
  }

  void save_file(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    save(os);
    if (!os) throw DataError("write failed for " + path);
  }

  static Model load(std::istream& is, const std::string& what) {
    ByteReader r(is, what);
    char magic[8];
    r.read_bytes(magic, 8);
    if (std::memcmp(magic, "CAPCKPT1", 8) != 0)
      r.fail("bad magic (not a checkpoint, or unsupported version)");
    ModelConfig cfg;
    cfg.channels = static_cast<int>(r.read_u32());
    cfg.num_text_classes = static_cast<int>(r.read_u32());
    cfg.num_speakers = static_cast<int>(r.read_u32());
    cfg.latent_dim = static_cast<int>(r.read_u32());
    cfg.hidden_dim = static_cast<int>(r.read_u32());
    const std::uint32_t flags = r.read_u32();
    cfg.hierarchical = (flags & 1u) != 0;
    cfg.condition_on_text = (flags & 2u) != 0;
    cfg.condition_on_speaker = (flags & 4u) != 0;
    cfg.bottleneck = (flags & 8u) ? Bottleneck::tanh_heuristic : Bottleneck::variational;
    cfg.validate();

    Model model(cfg);
    const std::uint32_t n = r.read_u32();
    if (n != model.params_.count()) r.fail("tensor count mismatch");
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::uint32_t name_len = r.read_u32();
      if (name_len > 256) r.fail("implausible tensor name length");
      std::string name(name_len, '\0');
      r.read_bytes(name.data(), name_len);
      if (!model.params_.has(name)) r.fail("unknown tensor '" + name + "'");
      Param& p = model.params_.at(name);
      const int rows = static_cast<int>(r.read_u32());
      const int cols = static_cast<int>(r.read_u32());
      if (rows != p.value.rows() || cols != p.value.cols())
        r.fail("shape mismatch for tensor '" + name + "'");
      for (double& x : p.value.data()) x = r.read_f64();
      if (!p.value.all_finite()) r.fail("non-finite values in tensor '" + name + "'");
    }
    return model;
  }

  static Model load_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    return load(is, "checkpoint file " + path);
  }

 private:
  // Uninitialized-parameter constructor used by checkpoint loading.
  explicit Model(ModelConfig cfg) : cfg_(cfg) { create_params(); }

  struct RnnCache {
    std::vector<Vec> h;  // h[0] = zero state, h[t] after consuming frame t
  };

  struct TwoHeadCache {
    Vec in, h1, mu, lv_raw, lv;
  };

  struct DecCache {
    Vec c;                  // [z || text emb || speaker emb]
    std::vector<Vec> h;     // h[0] = zero state
    std::vector<Vec> xhat;  // predictions, one per frame
    Vec s;                  // stop logits
  };

  std::uint32_t pack_flags() const {
    std::uint32_t f = 0;
    if (cfg_.hierarchical) f |= 1u;
    if (cfg_.condition_on_text) f |= 2u;
    if (cfg_.condition_on_speaker) f |= 4u;
    if (cfg_.bottleneck == Bottleneck::tanh_heuristic) f |= 8u;
    return f;
  }

  void require_variational() const {
    if (cfg_.bottleneck != Bottleneck::variational)
      throw ConfigError("operation requires the variational bottleneck");
  }

  void require_hierarchical() const {
    require_variational();
    if (!cfg_.hierarchical) throw ConfigError("operation requires a hierarchical model");
  }

  void check_labels(int y_t, int y_s) const {
    if (y_t < 0 || y_t >= cfg_.num_text_classes) throw ConfigError("text class out of range");
    if (y_s < 0 || y_s >= cfg_.num_speakers) throw ConfigError("speaker id out of range");
  }

  void create_params() {
    const int h = cfg_.hidden_dim;
    const int d = cfg_.channels;
    const int z = cfg_.latent_dim;
    params_.add("enc.w_h", h, h);
    params_.add("enc.w_x", h, d);
    params_.add("enc.b", 1, h);
    if (cfg_.bottleneck == Bottleneck::variational) {
      if (cfg_.condition_on_text) params_.add("post.text_emb", cfg_.num_text_classes, kEmbedDim);
      if (cfg_.condition_on_speaker) params_.add("post.spk_emb", cfg_.num_speakers, kEmbedDim);
      create_two_head("post", h + cfg_.cond_dim(), h, z);
      if (cfg_.hierarchical) {
        create_two_head("hq", z, h, z);
        create_two_head("hp", z, h, z);
      }
    } else {
      params_.add("bneck.w", z, h);
      params_.add("bneck.b", 1, z);
    }
    params_.add("dec.text_emb", cfg_.num_text_classes, kEmbedDim);
    params_.add("dec.spk_emb", cfg_.num_speakers, kEmbedDim);
    params_.add("dec.w_h", h, h);
    params_.add("dec.w_x", h, d);
    params_.add("dec.w_c", h, z + 2 * kEmbedDim);
    params_.add("dec.b", 1, h);
    params_.add("dec.w_o", d, h);
    params_.add("dec.b_o", 1, d);
    params_.add("dec.w_s", 1, h);
    params_.add("dec.b_s", 1, 1);
  }

  void create_two_head(const std::string& prefix, int in_dim, int hidden, int out_dim) {
    params_.add(prefix + ".w1", hidden, in_dim);
    params_.add(prefix + ".b1", 1, hidden);
    params_.add(prefix + ".w_mu", out_dim, hidden);
    params_.add(prefix + ".b_mu", 1, out_dim);
    params_.add(prefix + ".w_lv", out_dim, hidden);
    params_.add(prefix + ".b_lv", 1, out_dim);
  }

  void init_params(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    for (std::size_t i = 0; i < params_.count(); ++i) {
      Param& p = params_.param(i);
      const std::string& n = p.name;
      if (n.ends_with(".b") || n.ends_with(".b1") || n.ends_with(".b_mu") ||
          n.ends_with(".b_o")) {
        continue;  // zero biases
      }
      if (n.ends_with(".b_lv")) continue;       // unit variance at start
      if (n.ends_with(".w_lv")) continue;       // log-variance head starts flat
      if (n == "dec.w_s") continue;             // stop head learns from scratch
      if (n == "dec.b_s") {
        p.value(0, 0) = -2.0;  // start with low stop probability
        continue;
      }
      if (n.ends_with("_emb")) {
        init_normal(p.value, rng, 0.5);
        continue;
      }
      double scale = 1.0 / std::sqrt(static_cast<double>(p.value.cols()));
      if (n.ends_with(".w_mu")) scale *= 0.1;  // posterior starts near the prior
      init_normal(p.value, rng, scale);
    }
  }

  //--------------------------------------------------------------------------
  // Encoder
  //--------------------------------------------------------------------------

  void encoder_forward(const Matrix& frames, RnnCache& cache) const {
    const Matrix& w_h = params_.value("enc.w_h");
    const Matrix& w_x = params_.value("enc.w_x");
    const Vec b = params_.value("enc.b").row(0);
    cache.h.assign(1, Vec(static_cast<std::size_t>(cfg_.hidden_dim), 0.0));
    for (int t = 0; t < frames.rows(); ++t) {
      Vec a = matvec(w_h, cache.h.back());
      const Vec ax = matvec(w_x, frames.row(t));
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::tanh(a[i] + ax[i] + b[i]);
      cache.h.push_back(std::move(a));
    }
  }

  // Backprop through time; d_summary is the gradient at the final state.
  void encoder_backward(const Matrix& frames, const RnnCache& cache, const Vec& d_summary) {
    const Matrix& w_h = params_.value("enc.w_h");
    Matrix& d_w_h = params_.grad("enc.w_h");
    Matrix& d_w_x = params_.grad("enc.w_x");
    Vec& d_b = params_.grad("enc.b").data();
    Vec d_h = d_summary;
    for (int t = frames.rows() - 1; t >= 0; --t) {
      const Vec& h_t = cache.h[static_cast<std::size_t>(t) + 1];
      Vec d_a(d_h.size(), 0.0);
      tanh_backward(h_t, d_h, d_a);
      add_outer(d_w_h, d_a, cache.h[static_cast<std::size_t>(t)]);
      add_outer(d_w_x, d_a, frames.row(t));
      for (std::size_t i = 0; i < d_a.size(); ++i) d_b[i] += d_a[i];
      d_h = matvec_transposed(w_h, d_a);
    }
  }

  //--------------------------------------------------------------------------
  // Two-headed MLP (shared by posterior, q_H, and the conditional prior)
  //--------------------------------------------------------------------------

  void two_head_forward(const std::string& prefix, Vec in, TwoHeadCache& c) const {
    c.in = std::move(in);
    c.h1 = tanh_vec(affine(params_.value(prefix + ".w1"),
                           params_.value(prefix + ".b1").row(0), c.in));
    c.mu = affine(params_.value(prefix + ".w_mu"), params_.value(prefix + ".b_mu").row(0), c.h1);
    c.lv_raw =
        affine(params_.value(prefix + ".w_lv"), params_.value(prefix + ".b_lv").row(0), c.h1);
    c.lv = c.lv_raw;
    for (double& v : c.lv) v = std::clamp(v, -kLogVarClamp, kLogVarClamp);
  }

  // The log-variance clamp is a hard saturation: gradient is zero outside the
  // band, matching the forward exactly.
  void two_head_backward(const std::string& prefix, const TwoHeadCache& c, const Vec& d_mu,
                         const Vec& d_lv, Vec& d_in) {
    Vec d_lv_raw(d_lv.size(), 0.0);
    for (std::size_t i = 0; i < d_lv.size(); ++i)
      if (std::fabs(c.lv_raw[i]) < kLogVarClamp) d_lv_raw[i] = d_lv[i];
    Vec d_h1(c.h1.size(), 0.0);
    affine_backward(params_.value(prefix + ".w_mu"), c.h1, d_mu, params_.grad(prefix + ".w_mu"),
                    params_.grad(prefix + ".b_mu").data(), &d_h1);
    affine_backward(params_.value(prefix + ".w_lv"), c.h1, d_lv_raw,
                    params_.grad(prefix + ".w_lv"), params_.grad(prefix + ".b_lv").data(), &d_h1);
    Vec d_a1(c.h1.size(), 0.0);
    tanh_backward(c.h1, d_h1, d_a1);
    affine_backward(params_.value(prefix + ".w1"), c.in, d_a1, params_.grad(prefix + ".w1"),
                    params_.grad(prefix + ".b1").data(), &d_in);
  }

  // Routes posterior-head gradients back through the MLP into the encoder and
  // the posterior-side embedding tables.
  void backprop_posterior_input(const TwoHeadCache& post, const Vec& d_mu, const Vec& d_lv,
                                const RnnCache& enc, const Utterance& u) {
    Vec d_in(post.in.size(), 0.0);
    two_head_backward("post", post, d_mu, d_lv, d_in);
    const int h = cfg_.hidden_dim;
    Vec d_summary(d_in.begin(), d_in.begin() + h);
    std::size_t off = static_cast<std::size_t>(h);
    if (cfg_.condition_on_text) {
      double* row = params_.grad("post.text_emb").row_ptr(u.y_t);
      for (int i = 0; i < kEmbedDim; ++i) row[i] += d_in[off + static_cast<std::size_t>(i)];
      off += kEmbedDim;
    }
    if (cfg_.condition_on_speaker) {
      double* row = params_.grad("post.spk_emb").row_ptr(u.y_s);
      for (int i = 0; i < kEmbedDim; ++i) row[i] += d_in[off + static_cast<std::size_t>(i)];
    }
    encoder_backward(u.frames, enc, d_summary);
  }

  // d(w * KL(q||p)) for diagonal Gaussians, accumulated into all four slots.
  static void kl_backward(const DiagGaussian& q, const DiagGaussian& p, double w, Vec& d_mu_q,
                          Vec& d_lv_q, Vec& d_mu_p, Vec& d_lv_p) {
    for (std::size_t i = 0; i < q.mean.size(); ++i) {
      const double inv_vp = std::exp(-p.log_var[i]);
      const double vq = std::exp(q.log_var[i]);
      const double delta = q.mean[i] - p.mean[i];
      d_mu_q[i] += w * delta * inv_vp;
      d_mu_p[i] -= w * delta * inv_vp;
      d_lv_q[i] += w * 0.5 * (vq * inv_vp - 1.0);
      d_lv_p[i] += w * 0.5 * (1.0 - (vq + delta * delta) * inv_vp);
    }
  }

  //--------------------------------------------------------------------------
  // Decoder
  //--------------------------------------------------------------------------

  Vec decoder_context(const Vec& z, int y_t, int y_s) const {
    check_labels(y_t, y_s);
    if (static_cast<int>(z.size()) != cfg_.latent_dim)
      throw ConfigError("latent dimension mismatch");
    Vec c = z;
    const Vec te = params_.value("dec.text_emb").row(y_t);
    const Vec se = params_.value("dec.spk_emb").row(y_s);
    c.insert(c.end(), te.begin(), te.end());
    c.insert(c.end(), se.begin(), se.end());
    return c;
  }

  void decoder_forward(const Vec& z, int y_t, int y_s, const Matrix& x, DecCache& cache) const {
    if (x.cols() != cfg_.channels) throw ConfigError("frame channel count mismatch");
    cache.c = decoder_context(z, y_t, y_s);
    const Matrix& w_h = params_.value("dec.w_h");
    const Matrix& w_x = params_.value("dec.w_x");
    const Matrix& w_c = params_.value("dec.w_c");
    const Vec b = params_.value("dec.b").row(0);
    const Matrix& w_o = params_.value("dec.w_o");
    const Vec b_o = params_.value("dec.b_o").row(0);
    const Vec w_s = params_.value("dec.w_s").row(0);
    const double b_s = params_.value("dec.b_s")(0, 0);
    const Vec wc_c = matvec(w_c, cache.c);

    cache.h.assign(1, Vec(static_cast<std::size_t>(cfg_.hidden_dim), 0.0));
    cache.xhat.clear();
    cache.s.clear();
    Vec zero(static_cast<std::size_t>(cfg_.channels), 0.0);
    for (int t = 0; t < x.rows(); ++t) {
      const Vec x_prev = (t == 0) ? zero : x.row(t - 1);
      Vec a = matvec(w_h, cache.h.back());
      const Vec ax = matvec(w_x, x_prev);
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::tanh(a[i] + ax[i] + wc_c[i] + b[i]);
      cache.h.push_back(std::move(a));
      cache.xhat.push_back(affine(w_o, b_o, cache.h.back()));
      cache.s.push_back(dot(w_s, cache.h.back()) + b_s);
    }
  }

  // Summed loss: per-frame L1 plus stop-logit cross-entropy (target 1 only at
  // the final frame).
  double decoder_loss(const DecCache& cache, const Matrix& x) const {
    double loss = 0.0;
    for (int t = 0; t < x.rows(); ++t) {
      const Vec& xh = cache.xhat[static_cast<std::size_t>(t)];
      for (int d = 0; d < cfg_.channels; ++d) loss += std::fabs(xh[static_cast<std::size_t>(d)] - x(t, d));
      const double target = (t == x.rows() - 1) ? 1.0 : 0.0;
      loss += bce_with_logit(cache.s[static_cast<std::size_t>(t)], target);
    }
    return loss;
  }

  void decoder_backward(const DecCache& cache, int y_t, int y_s, const Matrix& x, double weight,
                        Vec& d_z) {
    const Matrix& w_h = params_.value("dec.w_h");
    const Matrix& w_o = params_.value("dec.w_o");
    const Vec w_s = params_.value("dec.w_s").row(0);
    Matrix& d_w_h = params_.grad("dec.w_h");
    Matrix& d_w_x = params_.grad("dec.w_x");
    Matrix& d_w_c = params_.grad("dec.w_c");
    Vec& d_b = params_.grad("dec.b").data();
    Matrix& d_w_o = params_.grad("dec.w_o");
    Vec& d_b_o = params_.grad("dec.b_o").data();
    Vec& d_w_s = params_.grad("dec.w_s").data();
    double& d_b_s = params_.grad("dec.b_s")(0, 0);

    Vec zero(static_cast<std::size_t>(cfg_.channels), 0.0);
    Vec d_h(static_cast<std::size_t>(cfg_.hidden_dim), 0.0);
    Vec d_c(cache.c.size(), 0.0);
    for (int t = x.rows() - 1; t >= 0; --t) {
      const Vec& h_t = cache.h[static_cast<std::size_t>(t) + 1];
      const Vec& xh = cache.xhat[static_cast<std::size_t>(t)];

      Vec d_xhat(static_cast<std::size_t>(cfg_.channels));
      for (int d = 0; d < cfg_.channels; ++d) {
        const double diff = xh[static_cast<std::size_t>(d)] - x(t, d);
        d_xhat[static_cast<std::size_t>(d)] = weight * (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0));
      }
      const double target = (t == x.rows() - 1) ? 1.0 : 0.0;
      const double d_s = weight * bce_with_logit_grad(cache.s[static_cast<std::size_t>(t)], target);

      affine_backward(w_o, h_t, d_xhat, d_w_o, d_b_o, &d_h);
      for (std::size_t i = 0; i < w_s.size(); ++i) {
        d_w_s[i] += d_s * h_t[i];
        d_h[i] += d_s * w_s[i];
      }
      d_b_s += d_s;

      Vec d_a(d_h.size(), 0.0);
      tanh_backward(h_t, d_h, d_a);
      const Vec x_prev = (t == 0) ? zero : x.row(t - 1);
      add_outer(d_w_h, d_a, cache.h[static_cast<std::size_t>(t)]);
      add_outer(d_w_x, d_a, x_prev);
      add_outer(d_w_c, d_a, cache.c);
      for (std::size_t i = 0; i < d_a.size(); ++i) d_b[i] += d_a[i];
      axpy(1.0, matvec_transposed(params_.value("dec.w_c"), d_a), d_c);
      d_h = matvec_transposed(w_h, d_a);
    }

    for (int i = 0; i < cfg_.latent_dim; ++i) d_z[static_cast<std::size_t>(i)] += d_c[static_cast<std::size_t>(i)];
    double* d_te = params_.grad("dec.text_emb").row_ptr(y_t);
    double* d_se = params_.grad("dec.spk_emb").row_ptr(y_s);
    for (int i = 0; i < kEmbedDim; ++i) {
      d_te[i] += d_c[static_cast<std::size_t>(cfg_.latent_dim + i)];
      d_se[i] += d_c[static_cast<std::size_t>(cfg_.latent_dim + kEmbedDim + i)];
    }
  }

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace captoy
