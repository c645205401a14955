#include "erp/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <fstream>

#include "erp/errors.hpp"

namespace erp {

namespace {

constexpr std::array<char, 8> kMagic = {'E', 'R', 'P', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw ManifestError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json manifest = {{"format", "erp-checkpoint"}, {"version", 1}, {"meta", ckpt.meta}};
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  }
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic.data(), kMagic.size());
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& entry : ckpt.tensors) {
    for (double v : entry.second.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ManifestError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw ManifestError(path.string() + " is not an erp checkpoint");
  }
  const std::uint64_t len = get_u64(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw ManifestError("checkpoint manifest truncated");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  if (manifest.value("format", "") != "erp-checkpoint" || manifest.value("version", 0) != 1) {
    throw ManifestError("unsupported checkpoint format/version");
  }

  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    if (shape.empty() || std::find(shape.begin(), shape.end(), 0) != shape.end()) {
      throw ManifestError("checkpoint tensor '" + entry.value("name", std::string{}) + "' has an empty shape");
    }
    std::vector<double> values(numel_of(shape));
    for (double& v : values) v = std::bit_cast<double>(get_u64(is));
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(),
                              Tensor::from(std::move(shape), std::move(values)));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw ManifestError("trailing bytes after checkpoint payload");
  return ckpt;
}

}  // namespace erp
