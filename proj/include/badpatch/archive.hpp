#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "badpatch/tensor.hpp"

namespace badpatch {

/// JSON metadata plus named double tensors, stored losslessly.
///
/// Layout: 8-byte magic, little-endian u64 JSON length, the JSON text, then
/// every tensor's raw little-endian doubles in name order. The JSON carries a
/// "tensors" table with shapes so the file is self-describing.
struct Archive {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  const Tensor& tensor(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

/// Packs a flat vector as a {1, 1, n} tensor.
Tensor pack_vector(const std::vector<double>& values);
std::vector<double> unpack_vector(const Tensor& t);

}  // namespace badpatch
