#pragma once

// Binary checkpoint: header, INI metadata, named little-endian arrays and a
// trailing CRC-32 over everything before it.
//
//   "P2SCKPT\n"                 8 bytes
//   u32 version
//   u64 body length             bytes between this field and the checksum
//   body:
//     u64 metadata length, metadata (INI text)
//     u32 array count
//     per array: u32 name length, name, u8 element bytes (4 or 8), u32 rank,
//                u64 dims[rank], raw elements
//   u32 crc32

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "pix2seq/config.hpp"
#include "pix2seq/model.hpp"
#include "pix2seq/optim.hpp"

namespace pix2seq {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'P', '2', 'S', 'C', 'K', 'P', 'T', '\n'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, truncated, checksum_mismatch, malformed };
  CheckpointError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

template <class S>
struct Checkpoint {
  RunConfig config;
  long step = 0;
  std::vector<std::string> class_names;  // dense class index -> name
  ModelParams<S> params;
  std::optional<AdamState<S>> optimizer;
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof v);
  }
  void put_bytes(const void* data, std::size_t n) { buf_.append(static_cast<const char*>(data), n); }
  std::string& str() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& buf, std::size_t pos, std::size_t end) : buf_(buf), pos_(pos), end_(end) {}
  template <class T>
  T get() {
    T v;
    get_bytes(&v, sizeof v);
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    if (end_ - pos_ < n)
      throw CheckpointError(CheckpointError::Kind::malformed, "checkpoint: record overruns the body");
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_string(std::size_t n) {
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& buf_;
  std::size_t pos_, end_;
};

template <class S>
void put_array(ByteWriter& w, const std::string& name, const Tensor<S>& t) {
  w.put(static_cast<std::uint32_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put(static_cast<std::uint8_t>(sizeof(S)));
  w.put(std::uint32_t{2});
  w.put(static_cast<std::uint64_t>(t.rows()));
  w.put(static_cast<std::uint64_t>(t.cols()));
  w.put_bytes(t.data(), sizeof(S) * static_cast<std::size_t>(t.size()));
}

inline std::string checkpoint_metadata(const RunConfig& config, long step, const std::vector<std::string>& names,
                                       std::optional<long> adam_step) {
  std::ostringstream os;
  os << write_config(config) << "\n[checkpoint]\nstep = " << step << '\n';
  if (adam_step) os << "adam_step = " << *adam_step << '\n';
  os << "class_names = ";
  for (std::size_t i = 0; i < names.size(); ++i) os << (i ? "," : "") << names[i];
  os << '\n';
  return os.str();
}

inline std::uint32_t crc32_of(const std::string& buf, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < n) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n - off, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

template <class S>
std::string serialize_checkpoint(const Checkpoint<S>& ck) {
  detail::ByteWriter body;
  const std::string meta = detail::checkpoint_metadata(
      ck.config, ck.step, ck.class_names, ck.optimizer ? std::optional<long>(ck.optimizer->step) : std::nullopt);
  body.put(static_cast<std::uint64_t>(meta.size()));
  body.put_bytes(meta.data(), meta.size());
  const auto params = ck.params.named_tensors();
  const std::size_t count = params.size() * (ck.optimizer ? 3 : 1);
  body.put(static_cast<std::uint32_t>(count));
  for (const auto& [name, t] : params) detail::put_array(body, name, *t);
  if (ck.optimizer) {
    for (const auto& [name, t] : ck.optimizer->m.named_tensors()) detail::put_array(body, "adam.m." + name, *t);
    for (const auto& [name, t] : ck.optimizer->v.named_tensors()) detail::put_array(body, "adam.v." + name, *t);
  }
  detail::ByteWriter out;
  out.put_bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  out.put(kCheckpointVersion);
  out.put(static_cast<std::uint64_t>(body.str().size()));
  out.str() += body.str();
  out.put(detail::crc32_of(out.str(), out.str().size()));
  return std::move(out.str());
}

template <class S>
Checkpoint<S> deserialize_checkpoint(const std::string& buf) {
  using Kind = CheckpointError::Kind;
  constexpr std::size_t header = sizeof kCheckpointMagic + 4 + 8;
  if (buf.size() < sizeof kCheckpointMagic) throw CheckpointError(Kind::truncated, "checkpoint: file is truncated");
  if (std::memcmp(buf.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError(Kind::bad_magic, "checkpoint: not a checkpoint file (bad magic)");
  if (buf.size() < header) throw CheckpointError(Kind::truncated, "checkpoint: file is truncated");
  detail::ByteReader head(buf, sizeof kCheckpointMagic, header);
  const auto version = head.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError(Kind::version_mismatch, "checkpoint: version " + std::to_string(version) +
                                                      " is not supported (expected " +
                                                      std::to_string(kCheckpointVersion) + ")");
  const auto body_len = head.get<std::uint64_t>();
  if (buf.size() - header < 4 || body_len > buf.size() - header - 4)
    throw CheckpointError(Kind::truncated, "checkpoint: file is truncated");
  if (body_len != buf.size() - header - 4)
    throw CheckpointError(Kind::malformed, "checkpoint: unexpected trailing bytes");
  const std::size_t end = header + static_cast<std::size_t>(body_len);
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + end, 4);
  if (stored != detail::crc32_of(buf, end))
    throw CheckpointError(Kind::checksum_mismatch, "checkpoint: checksum mismatch (file is corrupted)");

  detail::ByteReader r(buf, header, end);
  const auto meta_len = r.get<std::uint64_t>();
  if (meta_len > body_len) throw CheckpointError(Kind::malformed, "checkpoint: bad metadata length");
  const std::string meta = r.get_string(static_cast<std::size_t>(meta_len));

  Checkpoint<S> ck;
  std::optional<long> adam_step;
  {
    // split off the [checkpoint] section before handing the rest to the config parser
    const auto pos = meta.find("\n[checkpoint]\n");
    if (pos == std::string::npos) throw CheckpointError(Kind::malformed, "checkpoint: missing [checkpoint] metadata");
    try {
      ck.config = parse_config(meta.substr(0, pos));
    } catch (const ConfigError& e) {
      throw CheckpointError(Kind::malformed, std::string("checkpoint metadata: ") + e.what());
    }
    std::istringstream ms(meta.substr(pos + 14));
    std::string line;
    while (std::getline(ms, line)) {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
      if (key == "step") {
        ck.step = std::stol(value);
      } else if (key == "adam_step") {
        adam_step = std::stol(value);
      } else if (key == "class_names") {
        std::istringstream vs(value);
        std::string name;
        while (std::getline(vs, name, ',')) ck.class_names.push_back(name);
      }
    }
  }

  ck.params = ModelParams<S>::zeros(ck.config.model);
  if (adam_step) ck.optimizer = AdamState<S>::zeros_like(ck.params);
  std::map<std::string, Tensor<S>*> slots;
  for (auto& [name, t] : ck.params.named_tensors()) slots[name] = t;
  if (ck.optimizer) {
    ck.optimizer->step = *adam_step;
    for (auto& [name, t] : ck.optimizer->m.named_tensors()) slots["adam.m." + name] = t;
    for (auto& [name, t] : ck.optimizer->v.named_tensors()) slots["adam.v." + name] = t;
  }
  const auto count = r.get<std::uint32_t>();
  if (count != slots.size())
    throw CheckpointError(Kind::malformed, "checkpoint: expected " + std::to_string(slots.size()) + " arrays, found " +
                                               std::to_string(count));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string(r.get<std::uint32_t>());
    const auto it = slots.find(name);
    if (it == slots.end() || !it->second)
      throw CheckpointError(Kind::malformed, "checkpoint: unexpected or repeated array '" + name + "'");
    Tensor<S>& t = *it->second;
    it->second = nullptr;
    const auto elem = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint32_t>();
    if (rank != 2) throw CheckpointError(Kind::malformed, "checkpoint: array '" + name + "' has rank " + std::to_string(rank));
    const auto rows = r.get<std::uint64_t>(), cols = r.get<std::uint64_t>();
    if (rows != static_cast<std::uint64_t>(t.rows()) || cols != static_cast<std::uint64_t>(t.cols()))
      throw CheckpointError(Kind::malformed, "checkpoint: array '" + name + "' shape does not match the config");
    if (elem == sizeof(S)) {
      r.get_bytes(t.data(), sizeof(S) * static_cast<std::size_t>(t.size()));
    } else if (elem == 4 || elem == 8) {
      for (Eigen::Index k = 0; k < t.size(); ++k)
        t.data()[k] = elem == 4 ? static_cast<S>(r.get<float>()) : static_cast<S>(r.get<double>());
    } else {
      throw CheckpointError(Kind::malformed, "checkpoint: array '" + name + "' has element size " + std::to_string(elem));
    }
  }
  if (!r.done()) throw CheckpointError(Kind::malformed, "checkpoint: unexpected bytes after the last array");
  return ck;
}

template <class S>
void save_checkpoint(const Checkpoint<S>& ck, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "failed writing checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw CheckpointError(CheckpointError::Kind::io, "cannot move checkpoint into place at " + path);
}

template <class S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize_checkpoint<S>(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), path + ": " + e.what());
  }
}

}  // namespace pix2seq
