// Copyright 2026 The predmask Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "predmask/wav_io.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "predmask/error.h"

namespace predmask {
namespace {

void PutU32(std::vector<uint8_t>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void PutU16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(static_cast<uint8_t>(v));
  b.push_back(static_cast<uint8_t>(v >> 8));
}

uint32_t GetU32(const uint8_t* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

uint16_t GetU16(const uint8_t* p) { return static_cast<uint16_t>(p[0] | (p[1] << 8)); }

}  // namespace

int16_t ToPcm16(double v) {
  const double c = std::clamp(v, -1.0, 1.0);
  return static_cast<int16_t>(std::clamp(std::lround(c * 32767.0), -32768L, 32767L));
}

double FromPcm16(int16_t v) { return std::max(-1.0, v / 32767.0); }

std::vector<uint8_t> EncodeWav(const Waveform& w) {
  if (w.sample_rate <= 0) throw ConfigError("wav: sample rate must be positive");
  const uint32_t data_bytes = static_cast<uint32_t>(w.samples.size() * 2);
  std::vector<uint8_t> b;
  b.reserve(44 + data_bytes);
  const char* riff = "RIFF";
  b.insert(b.end(), riff, riff + 4);
  PutU32(b, 36 + data_bytes);
  const char* wave = "WAVEfmt ";
  b.insert(b.end(), wave, wave + 8);
  PutU32(b, 16);
  PutU16(b, 1);  // PCM
  PutU16(b, 1);  // mono
  PutU32(b, static_cast<uint32_t>(w.sample_rate));
  PutU32(b, static_cast<uint32_t>(w.sample_rate) * 2);
  PutU16(b, 2);
  PutU16(b, 16);
  const char* data = "data";
  b.insert(b.end(), data, data + 4);
  PutU32(b, data_bytes);
  for (double s : w.samples) PutU16(b, static_cast<uint16_t>(ToPcm16(s)));
  return b;
}

Waveform DecodeWav(const std::vector<uint8_t>& bytes, int target_rate) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError("wav: not a RIFF/WAVE stream");
  }
  size_t pos = 12;
  int rate = 0;
  bool have_fmt = false;
  const uint8_t* pcm = nullptr;
  size_t pcm_bytes = 0;
  while (pos + 8 <= bytes.size()) {
    const uint8_t* id = bytes.data() + pos;
    const uint32_t len = GetU32(id + 4);
    const size_t body = pos + 8;
    const size_t avail = bytes.size() - body;
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (len < 16 || avail < 16) throw FormatError("wav: short fmt chunk");
      const uint8_t* f = bytes.data() + body;
      const uint16_t format = GetU16(f), channels = GetU16(f + 2), bits = GetU16(f + 14);
      rate = static_cast<int>(GetU32(f + 4));
      if (format != 1) throw FormatError("wav: only PCM is supported");
      if (channels != 1) throw FormatError("wav: only mono is supported");
      if (bits != 16) throw FormatError("wav: only 16-bit samples are supported");
      if (rate <= 0) throw FormatError("wav: bad sample rate");
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      pcm = bytes.data() + body;
      pcm_bytes = std::min<size_t>(len, avail);
      break;
    }
    pos = body + len + (len & 1);
  }
  if (!have_fmt) throw FormatError("wav: missing fmt chunk");
  if (!pcm) throw FormatError("wav: missing data chunk");
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(pcm_bytes / 2);
  for (size_t i = 0; i < w.samples.size(); ++i) {
    w.samples[i] = FromPcm16(static_cast<int16_t>(GetU16(pcm + 2 * i)));
  }
  if (target_rate > 0 && target_rate != rate) {
    w.samples = ResampleLinear(w.samples, rate, target_rate);
    w.sample_rate = target_rate;
  }
  return w;
}

Waveform ReadWav(const std::string& path, int target_rate) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                             std::istreambuf_iterator<char>());
  try {
    return DecodeWav(bytes, target_rate);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void WriteWav(const std::string& path, const Waveform& w) {
  const std::vector<uint8_t> bytes = EncodeWav(w);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace predmask
