#include "peerdistill/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "peerdistill/error.hpp"
#include "peerdistill/io.hpp"

namespace peerdistill {
namespace {

constexpr char kMagic[8] = {'P', 'D', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const PeerModel& model) {
  nlohmann::json header;
  header["config"] = to_json(model.config());
  header["role_index"] = model.role_index();
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : model.parameters()) {
    header["tensors"].push_back(
        {{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += p.tensor.size();
  }
  const std::string h = header.dump();

  std::string blob(kMagic, sizeof kMagic);
  put_u64(blob, h.size());
  blob += h;
  blob.reserve(blob.size() + offset * sizeof(double));
  for (const auto& p : model.parameters()) {
    const auto v = p.tensor.values();
    blob.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  write_file_atomic(path, blob);
}

PeerModel load_checkpoint(const std::filesystem::path& path) {
  const std::string blob = read_file(path);
  if (blob.size() < 16 || std::memcmp(blob.data(), kMagic, sizeof kMagic) != 0) {
    throw DataError(path.string() + ": not a checkpoint (bad magic)");
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, blob.data() + 8, 8);
  if (16 + hlen > blob.size()) throw DataError(path.string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": corrupt header: " + e.what());
  }
  const std::size_t payload = 16 + hlen;
  if ((blob.size() - payload) % sizeof(double) != 0)
    throw DataError(path.string() + ": payload is not a whole number of doubles");
  const std::size_t available = (blob.size() - payload) / sizeof(double);

  PeerConfig config;
  std::vector<NamedTensor> params;
  int role = 1;
  try {
    config = peer_config_from_json(header.at("config"));
    role = header.value("role_index", 1);
    const PeerModel reference = build(config, 0);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != reference.parameters().size())
      throw DataError(path.string() + ": tensor list does not match its config");
    std::size_t expected_offset = 0;
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      const auto& t = tensors[k];
      const auto& want = reference.parameters()[k];
      auto name = t.at("name").get<std::string>();
      Shape shape = t.at("shape").get<Shape>();
      if (name != want.name || shape != want.tensor.shape())
        throw DataError(path.string() + ": tensor '" + name + "' does not match its config");
      const std::size_t offset = t.at("offset").get<std::size_t>();
      const std::size_t n = shape_size(shape);
      if (offset != expected_offset || offset + n > available)
        throw DataError(path.string() + ": tensor '" + name + "' has a bad offset");
      expected_offset += n;
      std::vector<double> values(n);
      std::memcpy(values.data(), blob.data() + payload + offset * sizeof(double),
                  n * sizeof(double));
      params.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values), true)});
    }
    if (expected_offset != available)
      throw DataError(path.string() + ": trailing bytes after the payload");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": corrupt header: " + e.what());
  }
  PeerModel model(config, std::move(params), role);
  return model;
}

}  // namespace peerdistill
