#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "composer.hpp"

namespace memvit {

// File layout: "MVCK", u32 version, u64 manifest length, manifest (compact
// JSON), then the blob of little-endian f32 tensors in manifest order.
// Offsets in the manifest are relative to the blob start.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind { model, task_pack };

struct TensorEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;  // bytes
};

struct ModelCheckpoint {
  Composite composite;
  std::string run_config;  // echo of the run configuration that produced it; may be empty
};

struct PackCheckpoint {
  TaskPack pack;
  ModelConfig config;  // backbone shape the pack belongs to
  std::string run_config;
};

std::vector<std::uint8_t> encode_model(const ModelCheckpoint& ckpt);
std::vector<std::uint8_t> encode_pack(const PackCheckpoint& ckpt);
ModelCheckpoint decode_model(const std::vector<std::uint8_t>& bytes);
PackCheckpoint decode_pack(const std::vector<std::uint8_t>& bytes);

// Kind of an encoded checkpoint; throws FormatError when unreadable.
CheckpointKind peek_kind(const std::vector<std::uint8_t>& bytes);
// Manifest JSON (pretty-printed) of an encoded checkpoint.
std::string manifest_text(const std::vector<std::uint8_t>& bytes);
std::vector<TensorEntry> tensor_directory(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

void save_model(const std::filesystem::path& path, const ModelCheckpoint& ckpt);
void save_pack(const std::filesystem::path& path, const PackCheckpoint& ckpt);
ModelCheckpoint load_model(const std::filesystem::path& path);
PackCheckpoint load_pack(const std::filesystem::path& path);

}  // namespace memvit
