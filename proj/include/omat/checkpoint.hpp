#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "omat/detector.hpp"
#include "omat/diffusion.hpp"
#include "omat/tensor.hpp"

namespace omat::ckpt {

// Shared binary container for every on-disk numeric artifact. Layout, all
// integers and floats little-endian:
//   magic "OMAT" | u32 version (=1) | u32 tensor count
//   per tensor: u32 name length | UTF-8 name | u32 rank | u64 extents...
//               | f64 data (row-major)
// Strings other than names (ids, labels) ride as rank-1 byte-code tensors.
inline constexpr std::uint32_t kFormatVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor value;
};

void write_container(const std::filesystem::path& path, std::span<const NamedTensor> items);

// Strict reader: bad magic, unknown version, or truncation -> ArtifactError.
std::vector<NamedTensor> read_container(const std::filesystem::path& path);

// Typed checkpoints on top of the container. Detectors store arch,
// preprocessing, and both MLPs; generators store kind, schedule parameters
// (betas are rebuilt from kind+T on load), decoder, and their networks.
void save_detector(const std::filesystem::path& path, const detector::Detector& d);
detector::Detector load_detector(const std::filesystem::path& path);

void save_generator(const std::filesystem::path& path, const diffusion::Generator& g);
diffusion::Generator load_generator(const std::filesystem::path& path);

// FNV-1a 64 over the raw file bytes, as 16 lowercase hex digits.
std::string file_digest(const std::filesystem::path& path);
std::string digest_hex(std::uint64_t h);

} // namespace omat::ckpt
