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

#include "randq/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "randq/error.hpp"
#include "randq/random.hpp"

namespace randq {

std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kAddition: return "addition";
  }
  return "?";
}

TaskKind parse_task(const std::string& s) {
  if (s == "copy") return TaskKind::kCopy;
  if (s == "reverse") return TaskKind::kReverse;
  if (s == "addition") return TaskKind::kAddition;
  throw ConfigError("unknown task '" + s + "' (expected copy, reverse or addition)");
}

void TaskSpec::validate() const {
  if (vocab_size < 4) throw ConfigError("vocab_size must be at least 4, got " + std::to_string(vocab_size));
  if (seq_len < 1) throw ConfigError("seq_len must be at least 1, got " + std::to_string(seq_len));
  if (n_train < 0 || n_eval < 0) throw ConfigError("dataset sizes must be non-negative");
  if (task == TaskKind::kAddition) {
    if (vocab_size <= kPlusToken) {
      throw ConfigError("addition needs vocab_size >= " + std::to_string(kPlusToken + 1));
    }
    if (seq_len < 3) throw ConfigError("addition needs seq_len >= 3");
  }
}

int TaskSpec::max_target_len() const {
  if (task == TaskKind::kAddition) return (seq_len - 1) / 2 + 1;
  return seq_len;
}

std::vector<int> encode_number(std::uint64_t value) {
  std::vector<int> out;
  do {
    out.push_back(digit_token(static_cast<int>(value % 10)));
    value /= 10;
  } while (value != 0);
  std::reverse(out.begin(), out.end());
  return out;
}

namespace {

Example make_example(const TaskSpec& spec, std::uint64_t key) {
  CounterRng rng(key);
  Example ex;
  if (spec.task == TaskKind::kAddition) {
    const int digits = (spec.seq_len - 1) / 2;
    std::uint64_t limit = 1;
    for (int i = 0; i < digits; ++i) limit *= 10;
    const std::uint64_t a = rng.next_below(limit);
    const std::uint64_t b = rng.next_below(limit);
    ex.source = encode_number(a);
    ex.source.push_back(kPlusToken);
    const std::vector<int> rhs = encode_number(b);
    ex.source.insert(ex.source.end(), rhs.begin(), rhs.end());
    ex.target = encode_number(a + b);
    return ex;
  }
  const int min_len = (spec.seq_len + 1) / 2;
  const int len = min_len + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.seq_len - min_len + 1)));
  const auto content = static_cast<std::uint64_t>(spec.vocab_size - kFirstContentToken);
  for (int i = 0; i < len; ++i) ex.source.push_back(kFirstContentToken + static_cast<int>(rng.next_below(content)));
  ex.target = ex.source;
  if (spec.task == TaskKind::kReverse) std::reverse(ex.target.begin(), ex.target.end());
  return ex;
}

Dataset make_split(const TaskSpec& spec, std::uint64_t split, int count) {
  Dataset out;
  out.reserve(static_cast<std::size_t>(count));
  const std::uint64_t base = derive_key(spec.seed, {hash_name("data"), split});
  for (int i = 0; i < count; ++i) out.push_back(make_example(spec, derive_key(base, {static_cast<std::uint64_t>(i)})));
  return out;
}

void append_ids(std::ostream& os, const std::vector<int>& ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) os << ' ';
    os << ids[i];
  }
}

std::vector<int> parse_ids(std::string_view text, std::size_t offset) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find(' ', pos), text.size());
    int value = 0;
    const auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + end, value);
    if (ec != std::errc{} || ptr != text.data() + end || value < 0) {
      throw FormatError("expected a non-negative token id", offset + pos);
    }
    out.push_back(value);
    pos = end + 1;
  }
  return out;
}

}  // namespace

std::pair<Dataset, Dataset> generate_dataset(const TaskSpec& spec) {
  spec.validate();
  return {make_split(spec, 0, spec.n_train), make_split(spec, 1, spec.n_eval)};
}

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  for (const Example& ex : data) {
    append_ids(os, ex.source);
    os << '\t';
    append_ids(os, ex.target);
    os << '\n';
  }
  if (!os) throw Error("write to " + path.string() + " failed");
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::stringstream buffer;
  buffer << is.rdbuf();
  const std::string text = buffer.str();
  Dataset out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) throw FormatError("missing newline at end of record", text.size());
    const std::string_view line(text.data() + pos, end - pos);
    const std::size_t tab = line.find('\t');
    if (tab == std::string_view::npos) throw FormatError("record has no tab separator", pos);
    Example ex{parse_ids(line.substr(0, tab), pos), parse_ids(line.substr(tab + 1), pos + tab + 1)};
    if (ex.source.empty()) throw FormatError("empty source sequence", pos);
    out.push_back(std::move(ex));
    pos = end + 1;
  }
  return out;
}

double sequence_error_rate(std::span<const std::vector<int>> predictions, std::span<const std::vector<int>> targets) {
  if (predictions.size() != targets.size()) {
    throw ContractError("sequence_error_rate: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(targets.size()) + " targets");
  }
  if (predictions.empty()) return 0.0;
  const auto cut = [](const std::vector<int>& s) {
    return std::span<const int>(s.data(), static_cast<std::size_t>(std::find(s.begin(), s.end(), kEos) - s.begin()));
  };
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto p = cut(predictions[i]);
    const auto t = cut(targets[i]);
    wrong += !std::equal(p.begin(), p.end(), t.begin(), t.end());
  }
  return static_cast<double>(wrong) / static_cast<double>(predictions.size());
}

}  // namespace randq
