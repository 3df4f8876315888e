// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "moeforge/model.hpp"

namespace moeforge {

inline constexpr const char* kCheckpointVersion = "moe-forge-ckpt/1";

/// One named tensor with its role tag and raw values.
struct TensorRecord {
    std::string name;
    RoleTag tag;
    std::vector<std::int64_t> shape;
    std::vector<double> data;
};

/// In-memory checkpoint: an arch snapshot plus role-tagged tensors. Surgery
/// operates on this representation, never on live model code.
struct Checkpoint {
    ArchConfig arch;
    std::vector<TensorRecord> tensors;

    const TensorRecord& at(const std::string& name) const;
    TensorRecord& at(const std::string& name);
};

Checkpoint to_checkpoint(const ModelParams& model);
ModelParams model_from_checkpoint(const Checkpoint& ckpt);

/// On-disk layout: <dir>/manifest.json (human-readable) plus
/// <dir>/tensors.bin (raw little-endian f64, contiguous records, CRC32 per
/// tensor). Writes take an exclusive lock and publish via atomic rename.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
void save_checkpoint(const ModelParams& model, const std::filesystem::path& dir);

/// Throws CheckpointError on version mismatch, truncation or checksum
/// failure.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

struct Violation {
    std::string code;
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
};

/// Checks every manifest invariant (version, unique names, non-overlapping
/// offsets, length accounting, role tagging, blob size, checksums) and
/// reports violations instead of throwing.
ValidationReport validate_checkpoint(const std::filesystem::path& dir);

} // namespace moeforge
