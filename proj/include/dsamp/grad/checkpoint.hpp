#pragma once

#include "dsamp/grad/param_store.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dsamp::grad {

// Layout:
//   magic   "DSAMP\x01"                       6 bytes
//   hlen    uint64 little-endian               8 bytes
//   header  UTF-8 JSON, hlen bytes:
//           {"meta": {...}, "tensors": [{"name", "shape": [r, c], "offset"}]}
//           offsets are relative to the payload start
//   payload float64 little-endian, slots back to back

inline constexpr std::string_view kCheckpointMagic{"DSAMP\x01", 6};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  ParamStore params;
};

namespace detail {
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}
}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json header;
  header["meta"] = ck.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t off = 0;
  for (const auto& s : ck.params.slots()) {
    header["tensors"].push_back({{"name", s.name},
                                 {"shape", {s.value.rows(), s.value.cols()}},
                                 {"offset", off}});
    off += static_cast<std::uint64_t>(s.value.size()) * 8;
  }
  const std::string h = header.dump();
  std::string out(kCheckpointMagic);
  detail::put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + off);
  for (const auto& s : ck.params.slots())
    for (Index k = 0; k < s.value.size(); ++k) detail::put_u64(out, std::bit_cast<std::uint64_t>(s.value.data()[k]));
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 8 || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw CheckpointError("checkpoint: bad magic");
  const std::uint64_t hlen = detail::get_u64(bytes, kCheckpointMagic.size());
  const std::size_t hstart = kCheckpointMagic.size() + 8;
  if (bytes.size() < hstart + hlen) throw CheckpointError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(hstart, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const std::size_t pstart = hstart + hlen;
  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  for (const auto& t : header.at("tensors")) {
    const Index r = t.at("shape").at(0).get<Index>();
    const Index c = t.at("shape").at(1).get<Index>();
    const std::uint64_t off = t.at("offset").get<std::uint64_t>();
    if (pstart + off + static_cast<std::uint64_t>(r * c) * 8 > bytes.size())
      throw CheckpointError("checkpoint: truncated payload for '" + t.at("name").get<std::string>() + "'");
    Matrix m(r, c);
    for (Index k = 0; k < r * c; ++k)
      m.data()[k] = std::bit_cast<double>(detail::get_u64(bytes, pstart + off + static_cast<std::size_t>(k) * 8));
    ck.params.add(t.at("name").get<std::string>(), std::move(m));
  }
  return ck;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
  const std::string bytes = encode_checkpoint(ck);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace dsamp::grad
