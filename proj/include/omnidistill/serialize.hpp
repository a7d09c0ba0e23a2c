// Little-endian binary encoding helpers with CRC32 integrity sections, plus
// atomic file writes (temp + rename). Shared by the dataset, buffer and
// synthetic-set formats.
#pragma once

#include "omnidistill/common.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace omnidistill::io {

inline uint32_t crc32_of(const void* data, size_t len) {
    return static_cast<uint32_t>(::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

class ByteWriter {
public:
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
    void bytes(const void* p, size_t n) { buf_.append(static_cast<const char*>(p), n); }
    void magic(const char tag[4]) { buf_.append(tag, 4); }

    // Row-major f64 payload followed by its CRC32.
    void matrix_section(const Matrix& m) {
        const size_t start = buf_.size();
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) f64(m(i, j));
        u32(crc32_of(buf_.data() + start, buf_.size() - start));
    }

    const std::string& str() const { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string data) : data_(std::move(data)) {}

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }

    std::string str(size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void expect_magic(const char tag[4], const char* what) {
        std::string m = str(4);
        if (std::memcmp(m.data(), tag, 4) != 0)
            throw IoError(std::string(what) + ": bad magic '" + m + "', expected '" + std::string(tag, 4) + "'");
    }

    // Payload of rows*cols f64 followed by a CRC32 covering exactly it.
    Matrix matrix_section(Eigen::Index rows, Eigen::Index cols, const char* what) {
        const size_t payload = static_cast<size_t>(rows) * static_cast<size_t>(cols) * 8;
        need(payload + 4);
        const uint32_t actual = crc32_of(data_.data() + pos_, payload);
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = f64();
        const uint32_t stored = u32();
        if (stored != actual)
            throw IoError(std::string(what) + ": checksum mismatch (payload corrupted)");
        return m;
    }

    size_t remaining() const { return data_.size() - pos_; }
    void done(const char* what) const {
        if (pos_ != data_.size())
            throw IoError(std::string(what) + ": trailing bytes (" + std::to_string(remaining()) + ")");
    }

private:
    void need(size_t n) const {
        if (pos_ + n > data_.size())
            throw IoError("truncated file: expected " + std::to_string(n) + " more bytes, found " +
                          std::to_string(data_.size() - pos_));
    }

    std::string data_;
    size_t pos_ = 0;
};

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

}  // namespace omnidistill::io
