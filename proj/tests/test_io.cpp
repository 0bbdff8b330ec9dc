#include <fstream>

#include "doctest.h"
#include "rpt/io.hpp"
#include "support/fixture.hpp"
#include "support/tempdir.hpp"

using namespace rpt;

namespace {

void truncate_file(const std::filesystem::path& p, std::uintmax_t size) { std::filesystem::resize_file(p, size); }

void poke(const std::filesystem::path& p, std::streamoff at, char value) {
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(at);
  f.put(value);
}

}  // namespace

TEST_CASE("every artifact kind survives save, load, save byte for byte") {
  fixture::TempDir dir;
  fixture::Setup s(80);
  const ModelConfig& cfg = s.cfg;

  save_artifact(dir / "p1", s.prefix, cfg, 7);
  save_artifact(dir / "p2", load_prefix(dir / "p1", cfg), cfg, 7);
  CHECK(file_checksum(dir / "p1") == file_checksum(dir / "p2"));

  RobustPrefix robust = RobustPrefix::zeros(cfg, {1, 2});
  for (std::size_t i = 0; i < robust.offset.size(); ++i) robust.offset[i] = 0.001f * static_cast<float>(i);
  robust.enforce_mask(cfg.hidden_dim);
  save_artifact(dir / "r1", robust, cfg);
  const RobustPrefix robust2 = load_robust(dir / "r1", cfg);
  CHECK(robust2.trainable_layers == robust.trainable_layers);
  save_artifact(dir / "r2", robust2, cfg);
  CHECK(file_checksum(dir / "r1") == file_checksum(dir / "r2"));

  save_artifact(dir / "d1", s.task.test, 3);
  CHECK(load_dataset(dir / "d1") == s.task.test);
  save_artifact(dir / "d2", load_dataset(dir / "d1"), 3);
  CHECK(file_checksum(dir / "d1") == file_checksum(dir / "d2"));

  save_artifact(dir / "l1", s.lm.params(), cfg);
  const LMParameters lm2 = load_lm(dir / "l1", cfg);
  CHECK(lm2.checksum() == s.lm.params().checksum());
  save_artifact(dir / "l2", lm2, cfg);
  CHECK(file_checksum(dir / "l1") == file_checksum(dir / "l2"));

  const std::vector<int> layers{0, 2};
  const ProjectionSet proj =
      build_projections(collect_correct_activations(s.lm, s.prefix, s.task.task, s.task.train, layers, 2), 2);
  save_artifact(dir / "q1", proj, cfg);
  const ProjectionSet proj2 = load_projection(dir / "q1", cfg);
  CHECK(proj2.layers == layers);
  save_artifact(dir / "q2", proj2, cfg);
  CHECK(file_checksum(dir / "q1") == file_checksum(dir / "q2"));
}

TEST_CASE("projection payload holds a d x d projector and a mean per layer") {
  fixture::TempDir dir;
  const ModelConfig cfg;
  ProjectionSet proj;
  for (int l = 0; l < 3; ++l) {
    proj.layers.push_back(l);
    proj.projectors.emplace_back(Shape{64, 64});
    proj.means.emplace_back(Shape{1, 64});
    proj.ranks.push_back(1);
  }
  save_artifact(dir / "q", proj, cfg);
  CHECK(std::filesystem::file_size(dir / "q") == 32 + 4 * 3 * (64 * 64 + 64));
  const ArtifactHeader h = read_header(dir / "q");
  CHECK(h.kind == ArtifactKind::projection);
  CHECK(h.dims[0] == 3);
  CHECK(h.dims[1] == 64);
}

TEST_CASE("truncated, mistyped and mismatched files raise LoadError") {
  fixture::TempDir dir;
  fixture::Setup s(81);
  save_artifact(dir / "p", s.prefix, s.cfg);
  const auto size = std::filesystem::file_size(dir / "p");

  std::filesystem::copy_file(dir / "p", dir / "short");
  truncate_file(dir / "short", size - 4);
  CHECK_THROWS_AS(load_prefix(dir / "short", s.cfg), LoadError);

  std::filesystem::copy_file(dir / "p", dir / "long");
  {
    std::ofstream f(dir / "long", std::ios::app | std::ios::binary);
    f.put('\0');
  }
  CHECK_THROWS_AS(load_prefix(dir / "long", s.cfg), LoadError);

  std::filesystem::copy_file(dir / "p", dir / "header");
  truncate_file(dir / "header", 16);
  CHECK_THROWS_AS(read_header(dir / "header"), LoadError);

  std::filesystem::copy_file(dir / "p", dir / "magic");
  poke(dir / "magic", 0, 'X');
  CHECK_THROWS_AS(load_prefix(dir / "magic", s.cfg), LoadError);

  std::filesystem::copy_file(dir / "p", dir / "version");
  poke(dir / "version", 4, 9);
  CHECK_THROWS_AS(load_prefix(dir / "version", s.cfg), LoadError);

  CHECK_THROWS_AS(load_robust(dir / "p", s.cfg), LoadError);

  ModelConfig other = s.cfg;
  other.prefix_len += 1;
  CHECK_THROWS_AS(load_prefix(dir / "p", other), LoadError);
  CHECK_THROWS_AS(load_prefix(dir / "missing", s.cfg), LoadError);
}
