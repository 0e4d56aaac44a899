#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcseg/common.hpp"
#include "pcseg/pointcloud.hpp"

namespace pcseg {

namespace detail {

inline std::uint32_t load_le32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void store_le32(std::uint32_t v, unsigned char* p) {
    p[0] = static_cast<unsigned char>(v);
    p[1] = static_cast<unsigned char>(v >> 8);
    p[2] = static_cast<unsigned char>(v >> 16);
    p[3] = static_cast<unsigned char>(v >> 24);
}

inline float load_le_f32(const unsigned char* p) {
    std::uint32_t bits = load_le32(p);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

inline void store_le_f32(float f, unsigned char* p) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    store_le32(bits, p);
}

inline std::vector<unsigned char> read_all_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    PCSEG_CHECK_IO(in.good(), "cannot open " << path);
    in.seekg(0, std::ios::end);
    auto len = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<unsigned char> bytes(len);
    if (len > 0) in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(len));
    PCSEG_CHECK_IO(in.good(), "short read on " << path);
    return bytes;
}

inline void write_all_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    PCSEG_CHECK_IO(out.good(), "cannot open " << path << " for writing");
    if (!bytes.empty())
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    PCSEG_CHECK_IO(out.good(), "short write on " << path);
}

}  // namespace detail

struct PointReadResult {
    PointCloud cloud;
    std::size_t raw_count = 0;               // records in the file
    std::size_t dropped = 0;                 // NaN/Inf rows rejected
    std::size_t clamped_intensity = 0;       // intensities pulled back into [0, 1]
    std::vector<std::uint32_t> kept_rows;    // original record index of each kept point
};

// Point file: 4 x float32 little-endian per record (x, y, z, intensity).
// The range column is computed on load. Non-finite coordinate rows are dropped.
inline PointReadResult read_point_file(const std::string& path) {
    auto bytes = detail::read_all_bytes(path);
    PCSEG_CHECK_IO(bytes.size() % 16 == 0,
                   path << ": truncated point file, " << bytes.size()
                        << " bytes is not a multiple of 16 (stray data at byte offset "
                        << (bytes.size() / 16) * 16 << ")");
    PointReadResult r;
    r.raw_count = bytes.size() / 16;
    r.cloud.points.reserve(r.raw_count);
    r.kept_rows.reserve(r.raw_count);
    for (std::size_t i = 0; i < r.raw_count; ++i) {
        const unsigned char* rec = bytes.data() + i * 16;
        Point p;
        p.x = detail::load_le_f32(rec);
        p.y = detail::load_le_f32(rec + 4);
        p.z = detail::load_le_f32(rec + 8);
        p.intensity = detail::load_le_f32(rec + 12);
        if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
            ++r.dropped;
            continue;
        }
        if (!std::isfinite(p.intensity)) p.intensity = 0.f;
        if (p.intensity < 0.f) {
            p.intensity = 0.f;
            ++r.clamped_intensity;
        } else if (p.intensity > 1.f) {
            p.intensity = 1.f;
            ++r.clamped_intensity;
        }
        p.range = point_norm(p.x, p.y, p.z);
        r.kept_rows.push_back(static_cast<std::uint32_t>(i));
        r.cloud.points.push_back(p);
    }
    if (r.dropped > 0)
        std::cerr << path << ": dropped " << r.dropped << " non-finite rows of " << r.raw_count << "\n";
    if (r.clamped_intensity > 0)
        std::cerr << path << ": clamped " << r.clamped_intensity << " intensities into [0, 1]\n";
    return r;
}

inline void write_point_file(const std::string& path, const PointCloud& cloud) {
    std::vector<unsigned char> bytes(cloud.size() * 16);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        unsigned char* rec = bytes.data() + i * 16;
        const Point& p = cloud.points[i];
        detail::store_le_f32(p.x, rec);
        detail::store_le_f32(p.y, rec + 4);
        detail::store_le_f32(p.z, rec + 8);
        detail::store_le_f32(p.intensity, rec + 12);
    }
    detail::write_all_bytes(path, bytes);
}

// Maps raw semantic ids (lower 16 bits of a label word) to contiguous train ids
// and back. Loaded from plain-text lines `raw_id train_id`; raw ids absent from
// the table map to the ignore class. The inverse keeps the first raw id listed
// for each train id, so canonical pairs should come first in the file.
class LabelRemap {
public:
    LabelRemap() : LabelRemap(1, 0) {}

    LabelRemap(int class_count, std::int32_t ignore_class)
        : class_count_(class_count),
          ignore_class_(ignore_class),
          raw_to_train_(65536, ignore_class),
          train_to_raw_(static_cast<std::size_t>(class_count), 0),
          have_inverse_(static_cast<std::size_t>(class_count), false) {
        PCSEG_CHECK(ignore_class >= 0 && ignore_class < class_count,
                    "ignore class " << ignore_class << " outside [0, " << class_count << ")");
    }

    static LabelRemap identity(int class_count, std::int32_t ignore_class) {
        LabelRemap m(class_count, ignore_class);
        for (std::int32_t c = 0; c < class_count; ++c)
            m.set(static_cast<std::uint16_t>(c), c);
        return m;
    }

    static LabelRemap load(const std::string& path, int class_count, std::int32_t ignore_class) {
        std::ifstream in(path);
        PCSEG_CHECK_IO(in.good(), "cannot open remap table " << path);
        LabelRemap m(class_count, ignore_class);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            std::istringstream ls(line);
            long raw, train;
            if (!(ls >> raw)) continue;  // blank/comment line
            PCSEG_CHECK_IO(ls >> train, path << ":" << line_no << ": expected `raw_id train_id`");
            PCSEG_CHECK_IO(raw >= 0 && raw < 65536, path << ":" << line_no << ": raw id " << raw
                                                         << " outside [0, 65536)");
            PCSEG_CHECK_IO(train >= 0 && train < class_count,
                           path << ":" << line_no << ": train id " << train << " outside [0, "
                                << class_count << ")");
            m.set(static_cast<std::uint16_t>(raw), static_cast<std::int32_t>(train));
        }
        return m;
    }

    void set(std::uint16_t raw, std::int32_t train) {
        raw_to_train_[raw] = train;
        if (!have_inverse_[static_cast<std::size_t>(train)]) {
            train_to_raw_[static_cast<std::size_t>(train)] = raw;
            have_inverse_[static_cast<std::size_t>(train)] = true;
        }
    }

    std::int32_t to_train(std::uint16_t raw) const { return raw_to_train_[raw]; }
    std::uint16_t to_raw(std::int32_t train) const {
        PCSEG_CHECK(train >= 0 && train < class_count_, "train id " << train << " out of range");
        return train_to_raw_[static_cast<std::size_t>(train)];
    }

    int class_count() const { return class_count_; }
    std::int32_t ignore_class() const { return ignore_class_; }

private:
    int class_count_;
    std::int32_t ignore_class_;
    std::vector<std::int32_t> raw_to_train_;
    std::vector<std::uint16_t> train_to_raw_;
    std::vector<bool> have_inverse_;
};

// Label file: one uint32 little-endian per point; semantic id = value & 0xFFFF
// (upper bits carry instance ids and are not preserved here).
inline std::vector<std::uint32_t> read_label_raw(const std::string& path) {
    auto bytes = detail::read_all_bytes(path);
    PCSEG_CHECK_IO(bytes.size() % 4 == 0, path << ": label file size " << bytes.size()
                                               << " is not a multiple of 4");
    std::vector<std::uint32_t> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::load_le32(bytes.data() + i * 4);
    return out;
}

inline std::vector<std::int32_t> read_label_file(const std::string& path, std::size_t n_points,
                                                 const LabelRemap& remap) {
    auto raw = read_label_raw(path);
    PCSEG_CHECK_IO(raw.size() == n_points, path << ": expected " << n_points << " labels, found "
                                                << raw.size());
    std::vector<std::int32_t> train(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        train[i] = remap.to_train(static_cast<std::uint16_t>(raw[i] & 0xFFFFu));
    return train;
}

inline void write_label_raw(const std::string& path, const std::vector<std::uint32_t>& raw) {
    std::vector<unsigned char> bytes(raw.size() * 4);
    for (std::size_t i = 0; i < raw.size(); ++i) detail::store_le32(raw[i], bytes.data() + i * 4);
    detail::write_all_bytes(path, bytes);
}

inline void write_label_file(const std::string& path, const std::vector<std::int32_t>& train_ids,
                             const LabelRemap& remap) {
    std::vector<std::uint32_t> raw(train_ids.size());
    for (std::size_t i = 0; i < train_ids.size(); ++i)
        raw[i] = static_cast<std::uint32_t>(remap.to_raw(train_ids[i]));
    write_label_raw(path, raw);
}

}  // namespace pcseg
