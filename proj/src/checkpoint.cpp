#include "cmvim/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace cmvim {

namespace {

constexpr char kMagic[8] = {'C', 'M', 'V', 'I', 'M', 'C', 'K', 'P'};

void append_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint64_t read_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

}  // namespace

const char* record_type_name(RecordType t) {
    switch (t) {
        case RecordType::f32: return "f32";
        case RecordType::f64: return "f64";
        case RecordType::u64: return "u64";
        default: return "u8";
    }
}

RecordType record_type_from_name(const std::string& s) {
    if (s == "f32") return RecordType::f32;
    if (s == "f64") return RecordType::f64;
    if (s == "u64") return RecordType::u64;
    if (s == "u8") return RecordType::u8;
    throw IoError("checkpoint: unknown record type '" + s + "'");
}

std::size_t record_type_size(RecordType t) {
    switch (t) {
        case RecordType::f32: return 4;
        case RecordType::f64: return 8;
        case RecordType::u64: return 8;
        default: return 1;
    }
}

CkptRecord& CheckpointFile::add(const std::string& name, RecordType type, std::vector<std::int64_t> shape) {
    check(name.find('\t') == std::string::npos && name.find('\n') == std::string::npos,
          "checkpoint: record name may not contain tabs or newlines");
    for (const auto& r : records) check(r.name != name, "checkpoint: duplicate record '" + name + "'");
    CkptRecord r;
    r.name = name;
    r.type = type;
    r.shape = std::move(shape);
    r.bytes.resize(static_cast<std::size_t>(r.numel()) * record_type_size(type));
    records.push_back(std::move(r));
    return records.back();
}

const CkptRecord* CheckpointFile::find(const std::string& name) const {
    for (const auto& r : records)
        if (r.name == name) return &r;
    return nullptr;
}

const CkptRecord& CheckpointFile::require(const std::string& name) const {
    const auto* r = find(name);
    if (!r) throw IoError("checkpoint: missing record '" + name + "'");
    return *r;
}

void CheckpointFile::add_f32(const std::string& name, const std::vector<std::int64_t>& shape, const float* data) {
    auto& r = add(name, RecordType::f32, shape);
    std::memcpy(r.bytes.data(), data, r.bytes.size());
}

void CheckpointFile::add_f64(const std::string& name, const std::vector<std::int64_t>& shape, const double* data) {
    auto& r = add(name, RecordType::f64, shape);
    std::memcpy(r.bytes.data(), data, r.bytes.size());
}

void CheckpointFile::add_u64(const std::string& name, const std::vector<std::uint64_t>& values) {
    auto& r = add(name, RecordType::u64, {static_cast<std::int64_t>(values.size())});
    std::memcpy(r.bytes.data(), values.data(), r.bytes.size());
}

void CheckpointFile::add_text(const std::string& name, const std::string& text) {
    auto& r = add(name, RecordType::u8, {static_cast<std::int64_t>(text.size())});
    std::memcpy(r.bytes.data(), text.data(), text.size());
}

std::vector<float> CheckpointFile::get_f32(const std::string& name) const {
    const auto& r = require(name);
    check(r.type == RecordType::f32, "checkpoint: record '" + name + "' is not f32");
    std::vector<float> v(static_cast<std::size_t>(r.numel()));
    std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
    return v;
}

std::vector<double> CheckpointFile::get_f64(const std::string& name) const {
    const auto& r = require(name);
    check(r.type == RecordType::f64, "checkpoint: record '" + name + "' is not f64");
    std::vector<double> v(static_cast<std::size_t>(r.numel()));
    std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
    return v;
}

std::vector<std::uint64_t> CheckpointFile::get_u64(const std::string& name) const {
    const auto& r = require(name);
    check(r.type == RecordType::u64, "checkpoint: record '" + name + "' is not u64");
    std::vector<std::uint64_t> v(static_cast<std::size_t>(r.numel()));
    std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
    return v;
}

std::string CheckpointFile::get_text(const std::string& name) const {
    const auto& r = require(name);
    check(r.type == RecordType::u8, "checkpoint: record '" + name + "' is not u8");
    return std::string(r.bytes.begin(), r.bytes.end());
}

std::string render_manifest(const CheckpointFile& ckpt) {
    std::ostringstream os;
    std::uint64_t offset = 0;
    for (const auto& r : ckpt.records) {
        os << r.name << '\t' << record_type_name(r.type) << '\t';
        for (std::size_t i = 0; i < r.shape.size(); ++i) {
            if (i) os << ',';
            os << r.shape[i];
        }
        os << '\t' << offset << '\n';
        offset += r.bytes.size();
    }
    return os.str();
}

void write_checkpoint(const std::string& path, const CheckpointFile& ckpt) {
    const std::string manifest = render_manifest(ckpt);
    std::string header;
    header.append(kMagic, 8);
    append_le(header, kCheckpointFormatVersion);
    append_le(header, static_cast<std::uint64_t>(manifest.size()));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    f.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    for (const auto& r : ckpt.records)
        f.write(reinterpret_cast<const char*>(r.bytes.data()), static_cast<std::streamsize>(r.bytes.size()));
    if (!f) throw IoError("short write: " + path);
}

CheckpointFile read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open: " + path);
    const std::uint64_t file_size = static_cast<std::uint64_t>(f.tellg());
    f.seekg(0);
    unsigned char header[20];
    if (file_size < sizeof(header)) throw IoError("checkpoint truncated (no header): " + path);
    f.read(reinterpret_cast<char*>(header), sizeof(header));
    if (std::memcmp(header, kMagic, 8) != 0) throw IoError("bad magic in checkpoint: " + path);
    const std::uint32_t version = read_u32(header + 8);
    if (version != kCheckpointFormatVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    const std::uint64_t manifest_len = read_u64(header + 12);
    if (file_size < sizeof(header) + manifest_len) throw IoError("checkpoint truncated (manifest): " + path);
    std::string manifest(manifest_len, '\0');
    f.read(manifest.data(), static_cast<std::streamsize>(manifest_len));

    CheckpointFile ckpt;
    std::istringstream ms(manifest);
    std::string line;
    std::uint64_t expect_offset = 0;
    while (std::getline(ms, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        for (int i = 0; i < 3; ++i) {
            const auto tab = line.find('\t', start);
            if (tab == std::string::npos) throw IoError("malformed manifest line: " + line);
            cols.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        cols.push_back(line.substr(start));
        CkptRecord r;
        r.name = cols[0];
        r.type = record_type_from_name(cols[1]);
        if (!cols[2].empty()) {
            std::istringstream ss(cols[2]);
            std::string dim;
            while (std::getline(ss, dim, ',')) r.shape.push_back(std::stoll(dim));
        }
        const std::uint64_t offset = std::stoull(cols[3]);
        if (offset != expect_offset) throw IoError("manifest offsets are not contiguous: " + path);
        r.bytes.resize(static_cast<std::size_t>(r.numel()) * record_type_size(r.type));
        expect_offset += r.bytes.size();
        ckpt.records.push_back(std::move(r));
    }
    if (file_size != sizeof(header) + manifest_len + expect_offset)
        throw IoError("checkpoint payload length mismatch (expected " +
                      std::to_string(sizeof(header) + manifest_len + expect_offset) + " bytes, file has " +
                      std::to_string(file_size) + "): " + path);
    for (auto& r : ckpt.records)
        f.read(reinterpret_cast<char*>(r.bytes.data()), static_cast<std::streamsize>(r.bytes.size()));
    if (!f) throw IoError("short read: " + path);
    return ckpt;
}

}  // namespace cmvim
