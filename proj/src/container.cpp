#include "pdquant/container.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pdq {

namespace {

void fail(const std::string& path, const std::string& msg) {
  throw std::runtime_error(path + ": " + msg);
}

void append_le_floats(std::string& out, std::span<const float> v) {
  static_assert(sizeof(float) == 4);
  size_t at = out.size();
  out.resize(at + v.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + at, v.data(), v.size() * 4);
  } else {
    for (float f : v) {
      uint32_t u;
      std::memcpy(&u, &f, 4);
      out[at++] = static_cast<char>(u & 0xff);
      out[at++] = static_cast<char>((u >> 8) & 0xff);
      out[at++] = static_cast<char>((u >> 16) & 0xff);
      out[at++] = static_cast<char>((u >> 24) & 0xff);
    }
  }
}

void read_le_floats(const char* src, std::span<float> v) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(v.data(), src, v.size() * 4);
  } else {
    for (size_t i = 0; i < v.size(); ++i) {
      uint32_t u = static_cast<uint8_t>(src[4 * i]) |
                   (static_cast<uint32_t>(static_cast<uint8_t>(src[4 * i + 1])) << 8) |
                   (static_cast<uint32_t>(static_cast<uint8_t>(src[4 * i + 2])) << 16) |
                   (static_cast<uint32_t>(static_cast<uint8_t>(src[4 * i + 3])) << 24);
      std::memcpy(&v[i], &u, 4);
    }
  }
}

uint32_t crc_of(const std::string& bytes) {
  return static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

}  // namespace

const Tensor& Container::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::runtime_error("container: missing tensor " + name);
  return it->second;
}

void write_container(const std::string& path, const std::string& magic, int version,
                     nlohmann::json header, const std::vector<NamedTensor>& payload) {
  nlohmann::json manifest = nlohmann::json::array();
  size_t payload_bytes = 0;
  for (const NamedTensor& nt : payload) {
    manifest.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}});
    payload_bytes += static_cast<size_t>(nt.tensor.size()) * 4;
  }
  header["tensors"] = std::move(manifest);

  std::string buf;
  buf += magic + " " + std::to_string(version) + "\n";
  buf += header.dump();
  buf += "\n@payload " + std::to_string(payload_bytes) + "\n";
  for (const NamedTensor& nt : payload) append_le_floats(buf, nt.tensor.values());

  char crcline[24];
  std::snprintf(crcline, sizeof(crcline), "@crc %08x\n", crc_of(buf));
  buf += crcline;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(path, "cannot open for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) fail(path, "write failed");
}

Container read_container(const std::string& path, const std::string& magic,
                         int expected_version) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(path, "cannot open");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  // Magic and version first so a format/version problem is reported as such.
  size_t eol = buf.find('\n');
  if (eol == std::string::npos) fail(path, "corrupt file: missing header line");
  std::string first = buf.substr(0, eol);
  if (first.rfind(magic + " ", 0) != 0) fail(path, "not a " + magic + " file");
  int version = 0;
  try {
    version = std::stoi(first.substr(magic.size() + 1));
  } catch (...) {
    fail(path, "corrupt file: bad version field");
  }
  if (version != expected_version) {
    fail(path, "unsupported " + magic + " version " + std::to_string(version) + " (expected " +
                   std::to_string(expected_version) + ")");
  }

  // Trailing "@crc XXXXXXXX\n" over everything before it.
  constexpr size_t kCrcLine = 14;
  if (buf.size() < kCrcLine || buf.compare(buf.size() - kCrcLine, 5, "@crc ") != 0 ||
      buf.back() != '\n') {
    fail(path, "checksum line missing (file truncated?)");
  }
  uint32_t stored = 0;
  if (std::sscanf(buf.c_str() + buf.size() - kCrcLine + 5, "%8x", &stored) != 1) {
    fail(path, "checksum line malformed");
  }
  std::string body = buf.substr(0, buf.size() - kCrcLine);
  if (crc_of(body) != stored) fail(path, "checksum mismatch (file corrupt or truncated)");

  size_t json_start = eol + 1;
  size_t json_end = body.find('\n', json_start);
  if (json_end == std::string::npos) fail(path, "corrupt file: missing header");
  size_t marker_end = body.find('\n', json_end + 1);
  if (marker_end == std::string::npos) fail(path, "corrupt file: missing payload marker");
  std::string marker = body.substr(json_end + 1, marker_end - json_end - 1);
  if (marker.rfind("@payload ", 0) != 0) fail(path, "corrupt file: bad payload marker");
  size_t payload_bytes = 0;
  try {
    payload_bytes = static_cast<size_t>(std::stoull(marker.substr(9)));
  } catch (...) {
    fail(path, "corrupt file: bad payload size");
  }
  if (body.size() - (marker_end + 1) != payload_bytes) fail(path, "payload size mismatch");

  Container c;
  try {
    c.header = nlohmann::json::parse(body.substr(json_start, json_end - json_start));
  } catch (const std::exception& e) {
    fail(path, std::string("header parse error: ") + e.what());
  }

  const char* src = body.data() + marker_end + 1;
  size_t offset = 0;
  for (const auto& entry : c.header.at("tensors")) {
    std::string name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    Tensor t(shape);
    size_t nbytes = static_cast<size_t>(t.size()) * 4;
    if (offset + nbytes > payload_bytes) fail(path, "payload overrun for tensor " + name);
    read_le_floats(src + offset, t.values_mut());
    offset += nbytes;
    c.tensors.emplace(std::move(name), std::move(t));
  }
  if (offset != payload_bytes) fail(path, "payload has trailing bytes");
  return c;
}

}  // namespace pdq
