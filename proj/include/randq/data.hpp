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

// Synthetic sequence tasks for the toy seq2seq model.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace randq {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstContentToken = 3;

enum class TaskKind { kCopy, kReverse, kAddition };

std::string to_string(TaskKind t);
TaskKind parse_task(const std::string& s);

// Addition tokens: digit d is kFirstContentToken + d, '+' follows the digits.
inline constexpr int digit_token(int d) { return kFirstContentToken + d; }
inline constexpr int kPlusToken = kFirstContentToken + 10;

struct TaskSpec {
  TaskKind task = TaskKind::kCopy;
  int vocab_size = 32;
  int seq_len = 12;
  int n_train = 8000;
  int n_eval = 1000;
  std::uint64_t seed = 0;

  void validate() const;
  // Longest target a task instance can produce, excluding EOS.
  int max_target_len() const;
};

// Content tokens only; BOS/EOS are added when batching.
struct Example {
  std::vector<int> source;
  std::vector<int> target;
  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

// Deterministic in spec.seed. Example i of a split depends only on (seed, split, i).
std::pair<Dataset, Dataset> generate_dataset(const TaskSpec& spec);

// Token encoding of a non-negative integer for the addition task.
std::vector<int> encode_number(std::uint64_t value);

// One example per line: source ids, a tab, target ids; ids separated by single spaces.
void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

// Fraction of sequences with any mismatch once both sides are cut at their first EOS.
double sequence_error_rate(std::span<const std::vector<int>> predictions, std::span<const std::vector<int>> targets);

}  // namespace randq
