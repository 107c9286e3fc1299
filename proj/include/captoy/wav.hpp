#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <string>
#include <vector>

#include "captoy/common.hpp"
#include "captoy/matrix.hpp"

namespace captoy {

struct WavAudio {
  Vec samples;  // mono, scaled to [-1, 1)
  int sample_rate = 0;
};

// Minimal RIFF/WAVE reader: PCM, 16-bit, mono or stereo (stereo is averaged
// down to mono). Unknown chunks are skipped; parse errors name the chunk.
inline WavAudio wav_read(std::istream& is, const std::string& what = "wav") {
  ByteReader r(is, what);

  char magic[4];
  r.read_bytes(magic, 4);
  if (std::string(magic, 4) != "RIFF") r.fail("missing RIFF magic");
  r.read_u32();  // declared file size, unused
  r.read_bytes(magic, 4);
  if (std::string(magic, 4) != "WAVE") r.fail("missing WAVE form type");

  bool have_fmt = false;
  int channels = 0;
  int rate = 0;
  WavAudio out;
  bool have_data = false;

  while (!have_data) {
    char id[4];
    r.read_bytes(id, 4);
    const std::string chunk(id, 4);
    const std::uint32_t size = r.read_u32();

    try {
      if (chunk == "fmt ") {
        if (size < 16) r.fail("chunk too small");
        const std::uint16_t format = r.read_u16();
        if (format != 1) r.fail("declares non-PCM format " + std::to_string(format));
        channels = r.read_u16();
        if (channels != 1 && channels != 2)
          r.fail("declares " + std::to_string(channels) + " channels, want 1 or 2");
        rate = static_cast<int>(r.read_u32());
        r.read_u32();  // byte rate
        r.read_u16();  // block align
        const std::uint16_t bits = r.read_u16();
        if (bits != 16) r.fail("declares " + std::to_string(bits) + "-bit samples, want 16");
        for (std::uint32_t i = 16; i < size; ++i) {
          char pad;
          r.read_bytes(&pad, 1);
        }
        have_fmt = true;
      } else if (chunk == "data") {
        if (!have_fmt) r.fail("appears before fmt chunk");
        if (size % (2 * static_cast<std::uint32_t>(channels)) != 0)
          r.fail("size not a whole number of frames");
        const std::uint32_t frames = size / (2 * static_cast<std::uint32_t>(channels));
        out.samples.reserve(frames);
        for (std::uint32_t i = 0; i < frames; ++i) {
          double acc = 0.0;
          for (int c = 0; c < channels; ++c) {
            const std::uint16_t raw = r.read_u16();
            acc += static_cast<double>(static_cast<std::int16_t>(raw));
          }
          out.samples.push_back(acc / channels / 32768.0);
        }
        have_data = true;
      } else {
        for (std::uint32_t i = 0; i < size; ++i) {
          char skip;
          r.read_bytes(&skip, 1);
        }
        if (size % 2 == 1) {  // RIFF chunks are word-aligned
          char pad;
          r.read_bytes(&pad, 1);
        }
      }
    } catch (const DataError& e) {
      throw DataError("\"" + chunk + "\" chunk: " + e.what());
    }
  }
  out.sample_rate = rate;
  return out;
}

inline WavAudio wav_read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return wav_read(is, path);
}

}  // namespace captoy
