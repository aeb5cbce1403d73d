// Copyright 2026 The RandQ Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace randq {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A numeric argument outside its documented domain (bit < 2, p < 1, k out of range, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (non-scalar loss, mismatched counts, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Inconsistent or unknown configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// Malformed binary file. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace randq
