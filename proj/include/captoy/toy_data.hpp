#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "captoy/common.hpp"
#include "captoy/matrix.hpp"
#include "captoy/rng.hpp"

namespace captoy {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

// Synthetic corpus description. Each "text" class owns a smooth per-channel
// template curve and a base length; each "speaker" owns an additive offset
// vector. Continuous style factors (amplitude, tempo) vary per utterance.
struct ToySpec {
  int channels = 8;
  int num_text_classes = 10;
  int num_speakers = 4;
  std::vector<int> base_lengths;  // one per text class, defaulted if empty
  std::uint64_t rng_seed = 0;

  void validate_and_default() {
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (num_text_classes < 2 || num_speakers < 2)
      throw ConfigError("need at least 2 text classes and 2 speakers");
    if (base_lengths.empty()) {
      base_lengths.resize(static_cast<std::size_t>(num_text_classes));
      for (int c = 0; c < num_text_classes; ++c) base_lengths[static_cast<std::size_t>(c)] = 12 + 3 * (c % 10);
    }
    if (static_cast<int>(base_lengths.size()) != num_text_classes)
      throw ConfigError("base_lengths size must equal num_text_classes");
    bool distinct = false;
    for (std::size_t i = 1; i < base_lengths.size(); ++i) {
      if (base_lengths[i] < 12 || base_lengths[i] > 40)
        throw ConfigError("base lengths must lie in [12, 40]");
      if (base_lengths[i] != base_lengths[0]) distinct = true;
    }
    if (base_lengths[0] < 12 || base_lengths[0] > 40)
      throw ConfigError("base lengths must lie in [12, 40]");
    if (!distinct) throw ConfigError("base lengths must differ across at least two classes");
  }
};

// Ground-truth style factors behind one utterance.
struct StyleTruth {
  double amplitude = 1.0;
  double tempo = 1.0;
  Vec offset;  // the speaker's offset vector, denormalized truth
};

struct Utterance {
  Matrix frames;  // L x channels
  int y_t = 0;
  int y_s = 0;
  StyleTruth truth;

  int length() const { return frames.rows(); }
};

using Dataset = std::vector<Utterance>;

// Frozen per-class template parameters and per-speaker offsets, all derived
// from the spec seed so datasets are reproducible from the spec alone.
struct ToyTables {
  Matrix freq;    // T x D, cycles over the unit interval
  Matrix phase;   // T x D
  Matrix offset;  // S x D
};

inline ToyTables build_tables(const ToySpec& spec) {
  ToyTables t;
  t.freq = Matrix(spec.num_text_classes, spec.channels);
  t.phase = Matrix(spec.num_text_classes, spec.channels);
  t.offset = Matrix(spec.num_speakers, spec.channels);
  Rng tmpl(mix_seed(spec.rng_seed, 1));
  for (int c = 0; c < spec.num_text_classes; ++c) {
    for (int d = 0; d < spec.channels; ++d) {
      t.freq(c, d) = tmpl.uniform(0.5, 2.5);
      t.phase(c, d) = tmpl.uniform(0.0, kTwoPi);
    }
  }
  Rng spk(mix_seed(spec.rng_seed, 2));
  for (int s = 0; s < spec.num_speakers; ++s)
    for (int d = 0; d < spec.channels; ++d) t.offset(s, d) = spk.normal(0.0, 0.5);
  return t;
}

// Template curve for class c, channel d, evaluated at u in [0, 1].
inline double template_value(const ToyTables& t, int c, int d, double u) {
  return std::sin(kTwoPi * t.freq(c, d) * u + t.phase(c, d));
}

inline int utterance_length(const ToySpec& spec, int y_t, double tempo) {
  return static_cast<int>(
      std::lround(spec.base_lengths[static_cast<std::size_t>(y_t)] * tempo));
}

// frame_t = a * template(t/L) + offset + noise. Pass noise = nullptr for the
// noiseless debug variant.
inline Matrix synth_frames(const ToySpec& spec, const ToyTables& tables, int y_t, int y_s,
                           double amplitude, double tempo, Rng* noise) {
  if (y_t < 0 || y_t >= spec.num_text_classes) throw ConfigError("text class out of range");
  if (y_s < 0 || y_s >= spec.num_speakers) throw ConfigError("speaker id out of range");
  const int len = utterance_length(spec, y_t, tempo);
  Matrix frames(len, spec.channels);
  for (int t = 0; t < len; ++t) {
    const double u = static_cast<double>(t) / len;
    for (int d = 0; d < spec.channels; ++d) {
      double v = amplitude * template_value(tables, y_t, d, u) + tables.offset(y_s, d);
      if (noise != nullptr) v += noise->normal(0.0, 0.05);
      frames(t, d) = v;
    }
  }
  return frames;
}

// Deterministic given (spec, n). Each utterance draws from its own derived
// stream, so generation order (or sharding) cannot change the data.
inline Dataset generate_dataset(const ToySpec& spec_in, int n) {
  ToySpec spec = spec_in;
  spec.validate_and_default();
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  const ToyTables tables = build_tables(spec);
  Dataset data;
  data.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(spec.rng_seed, 16 + static_cast<std::uint64_t>(i)));
    Utterance u;
    u.y_t = rng.uniform_int(spec.num_text_classes);
    u.y_s = rng.uniform_int(spec.num_speakers);
    u.truth.amplitude = rng.log_normal(0.0, 0.25);
    u.truth.tempo = rng.uniform(0.75, 1.25);
    u.truth.offset = tables.offset.row(u.y_s);
    u.frames = synth_frames(spec, tables, u.y_t, u.y_s, u.truth.amplitude, u.truth.tempo, &rng);
    data.push_back(std::move(u));
  }
  return data;
}

// Order-stable disjoint split: the first round(n * fraction) utterances train.
inline std::pair<Dataset, Dataset> split(const Dataset& data, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train fraction must lie strictly between 0 and 1");
  const auto cut = static_cast<std::size_t>(
      std::llround(static_cast<double>(data.size()) * train_fraction));
  Dataset train(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(cut));
  Dataset test(data.begin() + static_cast<std::ptrdiff_t>(cut), data.end());
  return {std::move(train), std::move(test)};
}

//============================================================================
// On-disk format: "CAPTOY1" header + spec fields + per-utterance records
//============================================================================

inline void write_dataset(std::ostream& os, const ToySpec& spec, const Dataset& data) {
  os.write("CAPTOY1", 7);
  write_u32(os, static_cast<std::uint32_t>(spec.channels));
  write_u32(os, static_cast<std::uint32_t>(spec.num_text_classes));
  write_u32(os, static_cast<std::uint32_t>(spec.num_speakers));
  for (int b : spec.base_lengths) write_u32(os, static_cast<std::uint32_t>(b));
  write_u64(os, spec.rng_seed);
  write_u64(os, static_cast<std::uint64_t>(data.size()));
  for (const Utterance& u : data) {
    write_u32(os, static_cast<std::uint32_t>(u.length()));
    write_u32(os, static_cast<std::uint32_t>(u.y_t));
    write_u32(os, static_cast<std::uint32_t>(u.y_s));
    write_f64(os, u.truth.amplitude);
    write_f64(os, u.truth.tempo);
    for (double o : u.truth.offset) write_f64(os, o);
    for (double x : u.frames.data()) write_f64(os, x);
  }
}

inline void save_dataset(const std::string& path, const ToySpec& spec, const Dataset& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_dataset(os, spec, data);
  if (!os) throw DataError("write failed for " + path);
}

inline std::pair<ToySpec, Dataset> read_dataset(std::istream& is, const std::string& what) {
  ByteReader r(is, what);
  char magic[7];
  r.read_bytes(magic, 7);
  if (std::memcmp(magic, "CAPTOY1", 7) != 0) r.fail("bad magic (not a toy dataset)");
  ToySpec spec;
  spec.channels = static_cast<int>(r.read_u32());
  spec.num_text_classes = static_cast<int>(r.read_u32());
  spec.num_speakers = static_cast<int>(r.read_u32());
  if (spec.channels < 1 || spec.channels > 4096) r.fail("implausible channel count");
  if (spec.num_text_classes < 2 || spec.num_text_classes > 65536) r.fail("implausible class count");
  if (spec.num_speakers < 2 || spec.num_speakers > 65536) r.fail("implausible speaker count");
  spec.base_lengths.resize(static_cast<std::size_t>(spec.num_text_classes));
  for (int& b : spec.base_lengths) b = static_cast<int>(r.read_u32());
  spec.rng_seed = r.read_u64();
  const std::uint64_t n = r.read_u64();
  if (n > (1ULL << 32)) r.fail("implausible utterance count");
  Dataset data;
  data.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    Utterance u;
    const int len = static_cast<int>(r.read_u32());
    if (len < 1 || len > 1000000) r.fail("implausible utterance length");
    u.y_t = static_cast<int>(r.read_u32());
    u.y_s = static_cast<int>(r.read_u32());
    if (u.y_t < 0 || u.y_t >= spec.num_text_classes) r.fail("text class out of range");
    if (u.y_s < 0 || u.y_s >= spec.num_speakers) r.fail("speaker id out of range");
    u.truth.amplitude = r.read_f64();
    u.truth.tempo = r.read_f64();
    u.truth.offset.resize(static_cast<std::size_t>(spec.channels));
    for (double& o : u.truth.offset) o = r.read_f64();
    u.frames = Matrix(len, spec.channels);
    for (double& x : u.frames.data()) x = r.read_f64();
    if (!u.frames.all_finite()) r.fail("non-finite frame data");
    data.push_back(std::move(u));
  }
  return {std::move(spec), std::move(data)};
}

inline std::pair<ToySpec, Dataset> load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_dataset(is, "dataset file " + path);
}

}  // namespace captoy
