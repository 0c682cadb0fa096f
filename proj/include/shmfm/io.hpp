#pragma once

#include "shmfm/common.hpp"
#include "shmfm/signal.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace shmfm {

// ---------------------------------------------------------------------------------------
// Raw recordings.
//
// CSV: header `timestamp,accel_z,label`, one sample per row (label column may be empty).
// Binary (little-endian): "SHM1", u32 fs, u64 count, u8 has_labels, f32 samples[count],
// then u8 labels[count] when has_labels is set.

void write_recording_csv(const std::filesystem::path& path, const RawRecording& rec);
RawRecording read_recording_csv(const std::filesystem::path& path, double fs = 100.0);

void write_recording_bin(const std::filesystem::path& path, const RawRecording& rec);
RawRecording read_recording_bin(const std::filesystem::path& path);

/// Dispatches on extension: `.csv` or anything else as binary.
RawRecording read_recording(const std::filesystem::path& path);

// ---------------------------------------------------------------------------------------
// Spectrogram datasets: `records.bin` holding fixed-size records
// (f32 image[100*100] row-major, f32 target (NaN when absent), u8 tag (255 when absent)).

inline constexpr std::size_t kRecordBytes = kImageSide * kImageSide * 4 + 4 + 1;
inline constexpr std::uint8_t kNoTag = 255;

void write_dataset(const std::filesystem::path& dir, const std::vector<SpectrogramWindow>& windows);
std::vector<SpectrogramWindow> read_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------------------
// Named-tensor container shared by model checkpoints ("MAEC") and PCA models ("PCAM"):
// magic[4], u32 version, u32 meta length + UTF-8 key=value lines, u32 tensor count, then per
// tensor u32 name length, name, u8 rank, u32 dims[rank], f32 data.

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

struct TensorContainer {
  std::array<char, 4> magic{};
  std::uint32_t version = 1;
  std::string meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const;
};

void write_container(const std::filesystem::path& path, const TensorContainer& c);
TensorContainer read_container(const std::filesystem::path& path, std::array<char, 4> expected_magic,
                               std::uint32_t max_version);

/// Parses `key=value` lines (as written into container metadata and config files).
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);

}  // namespace shmfm
