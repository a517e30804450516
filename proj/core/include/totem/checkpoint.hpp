#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "totem/tensor.hpp"

namespace totem {

/// Named tensor bag with run metadata; the on-disk training artifact.
/// Little-endian binary: magic "TOTM", format version u32, then per-tensor
/// records (name length u32, name bytes, rank u32, dims u64[], f64 payload).
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::uint64_t config_hash = 0;
    std::uint64_t step = 0;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

/// Atomic text/binary file write (temp file + rename).
void write_file_atomic(const std::string& path, const std::string& contents);

/// Raw tensor-record stream used by both checkpoints and feature files.
void write_tensor_records(std::ostream& os, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> read_tensor_records(std::istream& is, const std::string& path);

}  // namespace totem
