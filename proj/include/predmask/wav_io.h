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

// Mono 16-bit PCM RIFF/WAVE files.

#ifndef PREDMASK_WAV_IO_H_
#define PREDMASK_WAV_IO_H_

#include <cstdint>
#include <string>
#include <vector>

#include "predmask/spectral.h"

namespace predmask {

// Resamples to target_rate when positive and different from the file rate.
Waveform ReadWav(const std::string& path, int target_rate = 0);
// Samples are clipped to [-1, 1] and rounded to the nearest code.
void WriteWav(const std::string& path, const Waveform& w);

// In-memory forms used by tests and the PCM pipe.
std::vector<uint8_t> EncodeWav(const Waveform& w);
Waveform DecodeWav(const std::vector<uint8_t>& bytes, int target_rate = 0);

int16_t ToPcm16(double v);
double FromPcm16(int16_t v);

}  // namespace predmask

#endif  // PREDMASK_WAV_IO_H_
