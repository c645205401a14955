#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "erp/checkpoint.hpp"
#include "erp/errors.hpp"

using namespace erp;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "erp_unit";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("checkpoint round trip preserves names, shapes, values and meta") {
  Checkpoint ck;
  ck.meta = {{"kind", "test"}, {"n", 3}};
  ck.tensors.emplace_back("a", Tensor::from({2, 2}, {1.5, -2.25, 1e-300, 3.0}));
  ck.tensors.emplace_back("b.bias", Tensor::from({3}, {0.1, 0.2, 0.3}));
  const auto path = temp_file("round.ckpt");
  save_checkpoint(path, ck);
  const auto back = load_checkpoint(path);
  CHECK(back.meta == ck.meta);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].first == "a");
  CHECK(back.tensors[1].second.shape() == Shape{3});
  for (std::size_t i = 0; i < 4; ++i) CHECK(back.tensors[0].second.data()[i] == ck.tensors[0].second.data()[i]);
}

TEST_CASE("checkpoint payload is little-endian f64 after the manifest") {
  Checkpoint ck;
  ck.tensors.emplace_back("x", Tensor::from({1}, {1.0}));
  const auto path = temp_file("layout.ckpt");
  save_checkpoint(path, ck);
  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  REQUIRE(bytes.size() > 24);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "ERPCKPT1");
  // 1.0 == 0x3FF0000000000000
  const std::vector<unsigned char> tail(bytes.end() - 8, bytes.end());
  CHECK(tail == std::vector<unsigned char>{0, 0, 0, 0, 0, 0, 0xF0, 0x3F});
}

TEST_CASE("checkpoint load rejects corruption") {
  Checkpoint ck;
  ck.tensors.emplace_back("x", Tensor::from({2}, {1.0, 2.0}));
  const auto path = temp_file("corrupt.ckpt");
  save_checkpoint(path, ck);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  in.close();

  auto write = [&](const std::string& b) {
    std::ofstream(path, std::ios::binary | std::ios::trunc) << b;
  };
  write(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_checkpoint(path), ManifestError);
  write(bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(path), ManifestError);
  write("NOTACKPT" + bytes.substr(8));
  CHECK_THROWS_AS(load_checkpoint(path), ManifestError);
  CHECK_THROWS_AS(load_checkpoint(temp_file("absent.ckpt")), ManifestError);
}
