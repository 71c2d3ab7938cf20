#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "blxs/checkpoint.hpp"
#include "oracles.hpp"

using namespace blxs;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("blxs_ckpt_" + name)).string();
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), std::streamsize(bytes.size()));
}

struct Cleanup {
  std::vector<std::string> paths;
  ~Cleanup() {
    for (const auto& p : paths) std::remove(p.c_str());
  }
};

}  // namespace

TEST_CASE("backbone save-load-save produces byte-identical files") {
  Cleanup files;
  RngStream rng(401, "ckpt-backbone");
  const Backbone net = init_mlp({2, 8, 8, 3}, rng.derive("net"));
  const std::string p1 = temp_path("net1.bin"), p2 = temp_path("net2.bin");
  files.paths = {p1, p2};

  save_backbone(p1, net);
  const Backbone restored = load_backbone(p1);
  save_backbone(p2, restored);
  REQUIRE(read_file(p1) == read_file(p2));

  // Numeric state survives bit-exactly.
  Backbone a = net, b = restored;
  const auto pa = backbone_params(a);
  const auto pb = backbone_params(b);
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i].len; ++j) REQUIRE(pa[i].data[j] == pb[i].data[j]);
}

TEST_CASE("transformer checkpoints round-trip") {
  Cleanup files;
  RngStream rng(403, "ckpt-tfm");
  const Backbone net = init_transformer({4, 6, 2, 3, 2}, rng.derive("net"));
  const std::string p = temp_path("tfm.bin");
  files.paths = {p};
  save_backbone(p, net);
  const Backbone restored = load_backbone(p);
  Batch batch;
  batch.seq_len = 3;
  batch.inputs = gaussian_matrix(rng, 2 * 3, 4);
  batch.labels = {0, 1};
  REQUIRE(max_abs_diff(forward(restored, batch), forward(net, batch)) == 0.0);
}

TEST_CASE("adapter sets round-trip with modes and scaling intact") {
  Cleanup files;
  RngStream rng(405, "ckpt-adapters");
  const Backbone net = init_transformer({4, 6, 2, 3, 2}, rng.derive("net"));
  RngStream ar = rng.derive("adapters");
  AdapterSet set = make_adapter_set(net, AdapterMode::kLoraXs, 2, 12.0, ar);
  for (std::size_t i = 0; i < set.size(); ++i) set[i].core = gaussian_matrix(ar, 2, 2, 0.3);

  const std::string p = temp_path("adapters.bin");
  files.paths = {p};
  save_adapters(p, set);
  const AdapterSet restored = load_adapters(p);
  REQUIRE(restored.size() == set.size());
  REQUIRE(pack(restored).values == pack(set).values);
  REQUIRE(restored[0].alpha == 12.0);
  REQUIRE(restored[0].mode == AdapterMode::kLoraXs);
}

TEST_CASE("posterior round-trip preserves sampling exactly") {
  Cleanup files;
  RngStream rng(407, "ckpt-post");
  SwagState state(6, 3);
  for (int t = 0; t < 8; ++t) state.collect(gaussian_vector(rng, 6));
  const SwagPosterior post = swag_finalize(state);

  const std::string p = temp_path("post.bin");
  files.paths = {p};
  save_posterior(p, post);
  const SwagPosterior restored = load_posterior(p);

  RngStream a(555, "draw");
  RngStream b(555, "draw");
  REQUIRE(swag_sample(post, a) == swag_sample(restored, b));
}

TEST_CASE("a flipped byte is caught by the checksum") {
  Cleanup files;
  RngStream rng(409, "ckpt-corrupt");
  const Backbone net = init_mlp({2, 4, 4, 2}, rng.derive("net"));
  const std::string p = temp_path("corrupt.bin");
  files.paths = {p};
  save_backbone(p, net);

  std::string bytes = read_file(p);
  bytes[bytes.size() / 2] = char(bytes[bytes.size() / 2] ^ 0x40);
  write_file(p, bytes);
  REQUIRE_THROWS_WITH(load_backbone(p), Catch::Matchers::ContainsSubstring("checksum"));
}

TEST_CASE("truncation, bad magic and kind mismatches are rejected with causes") {
  Cleanup files;
  RngStream rng(411, "ckpt-errors");
  const Backbone net = init_mlp({2, 4, 4, 2}, rng.derive("net"));
  const std::string p = temp_path("errors.bin");
  files.paths = {p};
  save_backbone(p, net);
  const std::string bytes = read_file(p);

  write_file(p, bytes.substr(0, 10));
  REQUIRE_THROWS_AS(load_backbone(p), std::runtime_error);

  std::string magic = bytes;
  magic[0] = 'X';
  write_file(p, magic);
  REQUIRE_THROWS_AS(load_backbone(p), std::runtime_error);

  write_file(p, bytes);
  REQUIRE_THROWS_WITH(load_adapters(p), Catch::Matchers::ContainsSubstring("kind"));
  REQUIRE_THROWS_AS(load_backbone(temp_path("missing.bin")), std::runtime_error);
}
