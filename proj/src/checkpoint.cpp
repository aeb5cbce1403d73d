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

#include "randq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "randq/error.hpp"

namespace randq {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'Q', 'C', 'K'};

enum Section : std::uint8_t { kParam = 0, kEma = 1, kQuantized = 2 };
enum DType : std::uint8_t { kFloat32 = 0, kQuantizedInt = 1 };

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    out_.append(p, sizeof(T));
  }
  void bytes(const void* data, std::size_t n) { out_.append(static_cast<const char*>(data), n); }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void shape(const Shape& s) {
    put<std::uint8_t>(static_cast<std::uint8_t>(s.size()));
    for (std::size_t d : s) put<std::uint64_t>(d);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == in_.size(); }

  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) throw FormatError(std::string("truncated file while reading ") + what, pos_);
  }
  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    const std::string_view out = in_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::string str(const char* what) {
    const auto n = get<std::uint32_t>(what);
    return std::string(bytes(n, what));
  }
  Shape shape() {
    const std::size_t start = pos_;
    const auto rank = get<std::uint8_t>("rank");
    Shape s;
    std::size_t total = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
      const auto d = get<std::uint64_t>("dimension");
      // Anything larger than the file cannot be backed by a payload.
      if (d > in_.size() || (d != 0 && total > in_.size() / d)) throw FormatError("implausible tensor shape", start);
      total *= d;
      s.push_back(static_cast<std::size_t>(d));
    }
    return s;
  }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

void put_tensor(Writer& w, std::uint8_t section, const std::string& name, const Tensor& t) {
  w.put<std::uint8_t>(section);
  w.str(name);
  w.put<std::uint8_t>(kFloat32);
  w.shape(t.shape());
  w.bytes(t.data().data(), t.numel() * sizeof(float));
}

void put_quantized(Writer& w, const std::string& name, const QuantizedTensor& q) {
  w.put<std::uint8_t>(kQuantized);
  w.str(name);
  w.put<std::uint8_t>(kQuantizedInt);
  w.shape(q.shape());
  w.put<std::uint8_t>(static_cast<std::uint8_t>(q.bit()));
  w.put<std::uint8_t>(q.scales().granularity == Granularity::kPerChannel ? 1 : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(q.scales().scales.size()));
  w.bytes(q.scales().scales.data(), q.scales().scales.size() * sizeof(float));
  w.put<std::uint64_t>(q.storage().size());
  w.bytes(q.storage().data(), q.storage().size());
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint8_t>(kCheckpointVersion);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(ckpt.step));
  w.str(ckpt.config_digest);
  const ModelConfig& m = ckpt.model;
  for (int v : {m.n_enc_layers, m.n_dec_layers, m.d_model, m.n_heads, m.d_ff, m.vocab_size}) w.put<std::int32_t>(v);
  w.put<std::uint8_t>(m.quantize_scope == QuantizeScope::kAllDense ? 1 : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.params.size() + ckpt.ema.size() + ckpt.quantized.size()));
  for (const auto& [name, t] : ckpt.params) put_tensor(w, kParam, name, t);
  for (const auto& [name, t] : ckpt.ema) put_tensor(w, kEma, name, t);
  for (const auto& [name, q] : ckpt.quantized) put_quantized(w, name, q);
  return w.take();
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(4, "magic") != std::string_view(kMagic, 4)) throw FormatError("not a checkpoint (bad magic)", 0);
  const auto version = r.get<std::uint8_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), r.offset() - 1);
  }
  Checkpoint ckpt;
  ckpt.step = static_cast<long>(r.get<std::uint64_t>("step"));
  ckpt.config_digest = r.str("config digest");
  const std::size_t model_at = r.offset();
  ModelConfig& m = ckpt.model;
  for (int* v : {&m.n_enc_layers, &m.n_dec_layers, &m.d_model, &m.n_heads, &m.d_ff, &m.vocab_size}) {
    *v = r.get<std::int32_t>("model config");
  }
  const auto scope = r.get<std::uint8_t>("quantize scope");
  if (scope > 1) throw FormatError("bad quantize scope", r.offset() - 1);
  m.quantize_scope = scope ? QuantizeScope::kAllDense : QuantizeScope::kEncoderOnly;
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad model config: ") + e.what(), model_at);
  }

  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.offset();
    const auto section = r.get<std::uint8_t>("section");
    std::string name = r.str("tensor name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    const Shape shape = r.shape();
    if (section == kQuantized) {
      if (dtype != kQuantizedInt) throw FormatError("quantized section holds a non-quantized tensor", entry_at);
      const auto bit = r.get<std::uint8_t>("bit width");
      const auto gran = r.get<std::uint8_t>("granularity");
      if (gran > 1) throw FormatError("bad granularity tag", r.offset() - 1);
      const auto n_scales = r.get<std::uint32_t>("scale count");
      const std::string_view raw_scales = r.bytes(std::size_t{n_scales} * sizeof(float), "scales");
      ScaleSet scales{std::vector<float>(n_scales), gran ? Granularity::kPerChannel : Granularity::kPerTensor};
      std::memcpy(scales.scales.data(), raw_scales.data(), raw_scales.size());
      const auto n_bytes = r.get<std::uint64_t>("payload size");
      const std::string_view raw = r.bytes(static_cast<std::size_t>(n_bytes), "quantized payload");
      try {
        QuantizedTensor q = QuantizedTensor::from_storage(shape, bit, std::move(scales),
                                                          std::vector<std::uint8_t>(raw.begin(), raw.end()));
        if (!ckpt.quantized.emplace(name, std::move(q)).second) {
          throw FormatError("duplicate tensor '" + name + "'", entry_at);
        }
      } catch (const FormatError&) {
        throw;
      } catch (const Error& e) {
        throw FormatError(std::string("bad quantized tensor: ") + e.what(), entry_at);
      }
      continue;
    }
    if (section != kParam && section != kEma) throw FormatError("unknown section tag", entry_at);
    if (dtype != kFloat32) throw FormatError("float section holds a non-float tensor", entry_at);
    Tensor t(shape);
    const std::string_view raw = r.bytes(t.numel() * sizeof(float), "tensor payload");
    std::memcpy(t.data().data(), raw.data(), raw.size());
    ParamMap& target = section == kParam ? ckpt.params : ckpt.ema;
    if (!target.emplace(std::move(name), std::move(t)).second) throw FormatError("duplicate tensor", entry_at);
  }
  if (!r.at_end()) throw FormatError("trailing bytes after tensor table", r.offset());
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write to " + path.string() + " failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::stringstream buffer;
  buffer << is.rdbuf();
  return deserialize_checkpoint(buffer.str());
}

Model model_from_checkpoint(const Checkpoint& ckpt, bool use_ema) {
  Model model{ckpt.model, ckpt.params};
  if (use_ema) {
    for (const auto& [name, t] : ckpt.ema) model.params[name] = t;
  }
  for (const auto& [name, q] : ckpt.quantized) model.params[name] = dequantize(q);
  return model;
}

bool bit_identical(const Checkpoint& a, const Checkpoint& b) { return serialize_checkpoint(a) == serialize_checkpoint(b); }

}  // namespace randq
