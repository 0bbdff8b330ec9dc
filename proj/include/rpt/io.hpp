#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>

#include "rpt/data.hpp"
#include "rpt/defense.hpp"
#include "rpt/model.hpp"

namespace rpt {

// File layout: 32-byte header then a little-endian payload of 32-bit words.
//   magic "RPTF" | u16 version | u16 kind | u32 dims[4] | u64 seed
// Tensors are stored as row-major f32; datasets as u32 token and metadata words.

inline constexpr std::uint16_t kArtifactVersion = 1;

enum class ArtifactKind : std::uint16_t { prefix = 1, robust = 2, projection = 3, dataset = 4, lm = 5 };

struct ArtifactHeader {
  ArtifactKind kind = ArtifactKind::prefix;
  std::array<std::uint32_t, 4> dims{};
  std::uint64_t seed = 0;
};

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ArtifactHeader read_header(const std::filesystem::path& path);

void save_artifact(const std::filesystem::path& path, const PrefixParameters& prefix, const ModelConfig& cfg,
                   std::uint64_t seed = 0);
void save_artifact(const std::filesystem::path& path, const RobustPrefix& robust, const ModelConfig& cfg,
                   std::uint64_t seed = 0);
void save_artifact(const std::filesystem::path& path, const ProjectionSet& proj, const ModelConfig& cfg,
                   std::uint64_t seed = 0);
void save_artifact(const std::filesystem::path& path, const Dataset& data, std::uint64_t seed = 0);
void save_artifact(const std::filesystem::path& path, const LMParameters& lm, const ModelConfig& cfg,
                   std::uint64_t seed = 0);

// Loaders check magic, version, kind and dims against `cfg` and throw LoadError naming the field.
PrefixParameters load_prefix(const std::filesystem::path& path, const ModelConfig& cfg);
RobustPrefix load_robust(const std::filesystem::path& path, const ModelConfig& cfg);
ProjectionSet load_projection(const std::filesystem::path& path, const ModelConfig& cfg);
Dataset load_dataset(const std::filesystem::path& path);
LMParameters load_lm(const std::filesystem::path& path, const ModelConfig& cfg);

/// FNV-1a over the raw bytes of a file.
std::uint64_t file_checksum(const std::filesystem::path& path);

}  // namespace rpt
