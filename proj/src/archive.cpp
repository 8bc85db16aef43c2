#include "badpatch/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "badpatch/error.hpp"

namespace badpatch {

namespace {

constexpr char kMagic[8] = {'B', 'P', 'A', 'R', 'C', 'H', '0', '1'};

static_assert(std::endian::native == std::endian::little, "archive I/O assumes little-endian");

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

const Tensor& Archive::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("archive has no tensor '" + name + "'");
  return it->second;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json header;
  header["kind"] = archive.kind;
  header["meta"] = archive.meta;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, t] : archive.tensors) {
    table.push_back({{"name", name},
                     {"shape", {t.shape().channels, t.shape().height, t.shape().width}}});
  }
  header["tensors"] = table;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : archive.tensors) {
      out.write(reinterpret_cast<const char*>(t.storage().data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open archive " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ConfigError(path.string() + " is not a badpatch archive");
  }
  const std::uint64_t length = read_u64(in);
  if (!in || length > (1ull << 32)) throw ConfigError(path.string() + ": corrupt header");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw ConfigError(path.string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(path.string() + ": bad header: " + ex.what());
  }
  Archive archive;
  archive.kind = header.value("kind", "");
  archive.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    const auto dims = entry.at("shape").get<std::vector<int>>();
    if (dims.size() != 3 || dims[0] < 0 || dims[1] < 0 || dims[2] < 0) {
      throw ConfigError(path.string() + ": bad tensor shape");
    }
    const Shape shape{dims[0], dims[1], dims[2]};
    std::vector<double> values(shape.size());
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw ConfigError(path.string() + ": truncated tensor data");
    archive.tensors.emplace(entry.at("name").get<std::string>(), Tensor(shape, std::move(values)));
  }
  return archive;
}

Tensor pack_vector(const std::vector<double>& values) {
  return Tensor(Shape{1, 1, static_cast<int>(values.size())}, values);
}

std::vector<double> unpack_vector(const Tensor& t) { return t.storage(); }

}  // namespace badpatch
