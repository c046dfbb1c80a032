#include "molang/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace molang {

namespace {

constexpr char kMagic[4] = {'M', 'O', 'L', 'N'};
constexpr uint32_t kVersion = 1;

std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> table{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
    table[i] = c;
  }
  return table;
}

template <typename T>
void put(std::string& buf, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& buf, size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw CheckpointError("checkpoint truncated");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed) {
  static const std::array<uint32_t, 256> table = make_crc_table();
  uint32_t c = seed ^ 0xffffffffu;
  for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

void save_checkpoint(const ParamStore& store, const std::string& path,
                     const std::string& sidecar_json) {
  std::string payload;
  for (int i = 0; i < store.size(); ++i) {
    const std::string& name = store.name(i);
    const Tensor& t = store.value(i);
    put<uint32_t>(payload, static_cast<uint32_t>(name.size()));
    payload.append(name);
    put<uint8_t>(payload, static_cast<uint8_t>(t.rank()));
    for (int64_t e : t.shape) put<uint64_t>(payload, static_cast<uint64_t>(e));
    payload.append(reinterpret_cast<const char*>(t.data.data()),
                   t.data.size() * sizeof(float));
  }
  std::string out;
  out.append(kMagic, 4);
  put<uint32_t>(out, kVersion);
  put<uint32_t>(out, static_cast<uint32_t>(store.size()));
  out.append(payload);
  put<uint32_t>(out, crc32(reinterpret_cast<const uint8_t*>(payload.data()), payload.size()));

  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("write failed for " + path);
  }
  if (!sidecar_json.empty()) {
    std::ofstream f(path + ".json", std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + path + ".json");
    f << sidecar_json;
  }
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  size_t pos = 0;
  if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw CheckpointError("bad magic in " + path);
  }
  pos = 4;
  uint32_t version = take<uint32_t>(buf, pos);
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  uint32_t count = take<uint32_t>(buf, pos);
  size_t payload_start = pos;

  ParamStore store;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = take<uint32_t>(buf, pos);
    if (pos + name_len > buf.size()) throw CheckpointError("checkpoint truncated");
    std::string name = buf.substr(pos, name_len);
    pos += name_len;
    uint8_t rank = take<uint8_t>(buf, pos);
    std::vector<int64_t> shape;
    int64_t numel = 1;
    for (uint8_t r = 0; r < rank; ++r) {
      uint64_t e = take<uint64_t>(buf, pos);
      if (e == 0 || e > (1ull << 32)) throw CheckpointError("bad extent in " + path);
      shape.push_back(static_cast<int64_t>(e));
      numel *= static_cast<int64_t>(e);
    }
    size_t bytes = static_cast<size_t>(numel) * sizeof(float);
    if (pos + bytes > buf.size()) throw CheckpointError("checkpoint truncated");
    Tensor t;
    t.shape = std::move(shape);
    t.data.resize(static_cast<size_t>(numel));
    std::memcpy(t.data.data(), buf.data() + pos, bytes);
    pos += bytes;
    store.create(name, std::move(t));
  }
  size_t payload_end = pos;
  uint32_t stored = take<uint32_t>(buf, pos);
  uint32_t actual = crc32(reinterpret_cast<const uint8_t*>(buf.data()) + payload_start,
                          payload_end - payload_start);
  if (stored != actual) throw CheckpointError("CRC mismatch in " + path);
  if (pos != buf.size()) throw CheckpointError("trailing bytes in " + path);
  return store;
}

std::string load_checkpoint_sidecar(const std::string& path) {
  std::ifstream f(path + ".json");
  if (!f) throw CheckpointError("cannot open " + path + ".json");
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace molang
