#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdquant/tensor.hpp"

namespace pdq {

/// On-disk container shared by model and dataset files:
///   <MAGIC> <version>\n
///   <single-line JSON header, with a "tensors" manifest>\n
///   @payload <byte count>\n
///   <raw little-endian float32 payload, manifest order>
///   @crc <crc32 over all preceding bytes, 8 hex digits>\n
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void write_container(const std::string& path, const std::string& magic, int version,
                     nlohmann::json header, const std::vector<NamedTensor>& payload);

struct Container {
  nlohmann::json header;
  std::map<std::string, Tensor> tensors;

  const Tensor& tensor(const std::string& name) const;
};

/// Reads and verifies a container. Throws std::runtime_error on a wrong
/// magic, an unsupported version, or a checksum mismatch (which includes
/// truncation).
Container read_container(const std::string& path, const std::string& magic, int expected_version);

}  // namespace pdq
