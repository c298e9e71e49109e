#pragma once

// Checkpoint container:
//   magic "CMVIMCKP" | version u32 LE | manifest length u64 LE |
//   manifest UTF-8 text | raw little-endian blobs.
// One manifest record per line: name<TAB>dtype<TAB>shape(comma list)<TAB>offset.
// Offsets are relative to the blob section start. Typed views are provided
// for tensors, integer scalars, and byte strings.

#include <cstdint>
#include <string>
#include <vector>

#include "cmvim/common.hpp"

namespace cmvim {

constexpr std::uint32_t kCheckpointFormatVersion = 1;

enum class RecordType { f32, f64, u64, u8 };

const char* record_type_name(RecordType t);
RecordType record_type_from_name(const std::string& s);
std::size_t record_type_size(RecordType t);

struct CkptRecord {
    std::string name;
    RecordType type = RecordType::f32;
    std::vector<std::int64_t> shape;
    std::vector<unsigned char> bytes;  // little-endian payload

    std::int64_t numel() const { return numel_of(shape); }
};

struct CheckpointFile {
    std::vector<CkptRecord> records;

    CkptRecord& add(const std::string& name, RecordType type, std::vector<std::int64_t> shape);
    const CkptRecord* find(const std::string& name) const;
    const CkptRecord& require(const std::string& name) const;

    // convenience payload builders
    void add_f32(const std::string& name, const std::vector<std::int64_t>& shape, const float* data);
    void add_f64(const std::string& name, const std::vector<std::int64_t>& shape, const double* data);
    void add_u64(const std::string& name, const std::vector<std::uint64_t>& values);
    void add_text(const std::string& name, const std::string& text);

    std::vector<float> get_f32(const std::string& name) const;
    std::vector<double> get_f64(const std::string& name) const;
    std::vector<std::uint64_t> get_u64(const std::string& name) const;
    std::string get_text(const std::string& name) const;
};

void write_checkpoint(const std::string& path, const CheckpointFile& ckpt);
CheckpointFile read_checkpoint(const std::string& path);

// The manifest text exactly as the writer lays it out (audits, tests).
std::string render_manifest(const CheckpointFile& ckpt);

}  // namespace cmvim
