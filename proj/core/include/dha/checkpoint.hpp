// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dha/attention.hpp"
#include "dha/fusion.hpp"
#include "dha/model.hpp"
#include "dha/task.hpp"

namespace dha {

inline constexpr int kCheckpointVersion = 1;

/// One named tensor, stored as little-endian float32.
struct TensorRecord {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;

  bool operator==(const TensorRecord&) const = default;
};

/// Head groups of an attached fusion operator; coefficients live in the
/// tensors as fusion.layers.{l}.{key,value}.omega.
struct FusionLayout {
  bool per_channel = true;
  std::vector<HeadGroups> key_groups;
  std::vector<HeadGroups> value_groups;

  bool operator==(const FusionLayout&) const = default;
};

/// File layout: u64 LE manifest length, UTF-8 JSON manifest, then the
/// tensor payload. The manifest records every tensor's name, shape, byte
/// offset and length, plus a crc32 of the payload.
struct Checkpoint {
  int format_version = kCheckpointVersion;
  ModelConfig config;
  AttentionVariant variant = AttentionVariant::kMha;
  DhaTopology topology;
  std::optional<TaskConfig> task;
  std::optional<FusionLayout> fusion;
  std::vector<TensorRecord> tensors;
};

/// Serialized bytes; deterministic for a given checkpoint.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Payload checksum recorded in the manifest ("crc32:xxxxxxxx").
std::string checkpoint_checksum(const std::filesystem::path& path);

Checkpoint to_checkpoint(const ToyModel& model, const FusionOperator* op = nullptr,
                         const TaskConfig* task = nullptr);

struct LoadedModel {
  ToyModel model;
  std::optional<FusionOperator> op;
  std::optional<TaskConfig> task;
};

/// Rebuilds the model (and fusion operator, if present). Throws
/// VariantMismatchError when `expected` is set and differs from the file.
LoadedModel from_checkpoint(const Checkpoint& ckpt,
                            std::optional<AttentionVariant> expected = std::nullopt);

void save_model(const std::filesystem::path& path, const ToyModel& model,
                const FusionOperator* op = nullptr, const TaskConfig* task = nullptr);
LoadedModel load_model(const std::filesystem::path& path,
                       std::optional<AttentionVariant> expected = std::nullopt);

}  // namespace dha
