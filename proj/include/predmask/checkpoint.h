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

// Binary checkpoint: "PMCK", u32 version, u64 config length, config JSON,
// u32 tensor count, then per tensor u32 name length, name, u32 rank,
// i32 dims, float32 values. All integers little-endian.

#ifndef PREDMASK_CHECKPOINT_H_
#define PREDMASK_CHECKPOINT_H_

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "predmask/autodiff.h"

namespace predmask {

struct Checkpoint {
  nlohmann::json config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  // Throws FormatError when absent.
  const Tensor& Get(const std::string& name) const;
};

// Writes through a temporary file and rename, so readers never see a
// partial checkpoint.
void SaveCheckpoint(const std::string& path, const nlohmann::json& config,
                    const std::vector<const Parameter*>& params);
Checkpoint LoadCheckpoint(const std::string& path);
// Copies tensors into params by name; every param must be present with a
// matching shape.
void AssignParameters(const Checkpoint& ckpt, const std::vector<Parameter*>& params);

}  // namespace predmask

#endif  // PREDMASK_CHECKPOINT_H_
