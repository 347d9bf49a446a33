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

#include "predmask/checkpoint.h"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "predmask/error.h"

namespace predmask {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'P', 'M', 'C', 'K'};
constexpr uint32_t kVersion = 1;

template <typename T>
void Put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T Take(std::istream& is, const std::string& path) {
  T v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw FormatError("checkpoint " + path + ": truncated");
  }
  return v;
}

std::string TakeString(std::istream& is, uint64_t n, const std::string& path) {
  if (n > (1ull << 30)) throw FormatError("checkpoint " + path + ": implausible length");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw FormatError("checkpoint " + path + ": truncated");
  }
  return s;
}

}  // namespace

const Tensor& Checkpoint::Get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("checkpoint: no tensor named " + name);
}

void SaveCheckpoint(const std::string& path, const nlohmann::json& config,
                    const std::vector<const Parameter*>& params) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp);
    os.write(kMagic, 4);
    Put<uint32_t>(os, kVersion);
    const std::string cfg = config.dump();
    Put<uint64_t>(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    Put<uint32_t>(os, static_cast<uint32_t>(params.size()));
    std::vector<float> buf;
    for (const Parameter* p : params) {
      Put<uint32_t>(os, static_cast<uint32_t>(p->name.size()));
      os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
      Put<uint32_t>(os, static_cast<uint32_t>(p->value.ndim()));
      for (int d : p->value.shape()) Put<int32_t>(os, d);
      buf.assign(p->value.values().begin(), p->value.values().end());
      os.write(reinterpret_cast<const char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!os) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint LoadCheckpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("checkpoint not found: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("checkpoint " + path + ": bad magic");
  }
  const uint32_t version = Take<uint32_t>(is, path);
  if (version != kVersion) {
    throw FormatError("checkpoint " + path + ": unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::string cfg = TakeString(is, Take<uint64_t>(is, path), path);
  try {
    ckpt.config = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path + ": bad config block: " + e.what());
  }
  const uint32_t count = Take<uint32_t>(is, path);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = TakeString(is, Take<uint32_t>(is, path), path);
    const uint32_t rank = Take<uint32_t>(is, path);
    if (rank > 8) throw FormatError("checkpoint " + path + ": bad rank for " + name);
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = Take<int32_t>(is, path);
      if (shape[d] < 0) throw FormatError("checkpoint " + path + ": negative dim in " + name);
    }
    std::vector<float> buf(NumElements(shape));
    if (!buf.empty() && !is.read(reinterpret_cast<char*>(buf.data()),
                                 static_cast<std::streamsize>(buf.size() * sizeof(float)))) {
      throw FormatError("checkpoint " + path + ": truncated tensor " + name);
    }
    ckpt.tensors.emplace_back(std::move(name),
                              Tensor(std::move(shape), std::vector<double>(buf.begin(), buf.end())));
  }
  return ckpt;
}

void AssignParameters(const Checkpoint& ckpt, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    const Tensor& t = ckpt.Get(p->name);
    if (t.shape() != p->value.shape()) {
      throw FormatError("checkpoint tensor " + p->name + " has shape " +
                        ShapeToString(t.shape()) + ", expected " +
                        ShapeToString(p->value.shape()));
    }
    p->value = t;
  }
}

}  // namespace predmask
