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

#ifndef PREDMASK_ERROR_H_
#define PREDMASK_ERROR_H_

#include <stdexcept>
#include <string>

namespace predmask {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Operand shapes are incompatible; the message names the op and the shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A signal or spectrogram is shorter than the operation requires.
class InputTooShortError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or unknown configuration key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A stage needs an upstream artifact that does not exist.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

// Training or optimization produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (WAV, checkpoint, manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace predmask

#endif  // PREDMASK_ERROR_H_
