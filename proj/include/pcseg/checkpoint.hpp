#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcseg/config.hpp"
#include "pcseg/io.hpp"
#include "pcseg/model.hpp"

namespace pcseg {

// Checkpoint layout (all integers little-endian):
//   u32 magic 'PCSG', u32 version
//   u64 config length, config bytes (key=value text)
//   u64 blob count, then per blob:
//     u32 name length, name bytes
//     u32 ndim, u64 dims[ndim]
//     f32 data, row-major
// Parameter data is always stored as float32 regardless of the run profile.
inline constexpr std::uint32_t kCheckpointMagic = 0x50435347u;  // "PCSG"
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void append_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    unsigned char b[4];
    store_le32(v, b);
    out.insert(out.end(), b, b + 4);
}

inline void append_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    append_u32(out, static_cast<std::uint32_t>(v & 0xFFFFFFFFu));
    append_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void append_f32(std::vector<unsigned char>& out, float v) {
    unsigned char b[4];
    store_le_f32(v, b);
    out.insert(out.end(), b, b + 4);
}

class ByteReader {
public:
    ByteReader(const std::vector<unsigned char>& bytes, const std::string& origin)
        : bytes_(bytes), origin_(origin) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = load_le32(bytes_.data() + pos_);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        const std::uint64_t lo = u32();
        const std::uint64_t hi = u32();
        return lo | (hi << 32);
    }
    float f32() {
        need(4);
        float v = load_le_f32(bytes_.data() + pos_);
        pos_ += 4;
        return v;
    }
    std::string str(std::size_t len) {
        need(len);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
        pos_ += len;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) {
        PCSEG_CHECK_IO(pos_ + n <= bytes_.size(),
                       origin_ << ": truncated checkpoint at byte " << pos_);
    }
    const std::vector<unsigned char>& bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

template <class S>
void append_blob(std::vector<unsigned char>& out, const std::string& name, const TensorData<S>& t) {
    append_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    append_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) append_u64(out, static_cast<std::uint64_t>(d));
    for (auto v : t.v) append_f32(out, static_cast<float>(v));
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, ModelParams<S>& params, const ModelConfig& cfg) {
    KvConfig kv;
    model_config_to_kv(cfg, kv);
    const std::string cfg_text = kv.serialize();

    std::vector<unsigned char> out;
    detail::append_u32(out, kCheckpointMagic);
    detail::append_u32(out, kCheckpointVersion);
    detail::append_u64(out, cfg_text.size());
    out.insert(out.end(), cfg_text.begin(), cfg_text.end());

    std::uint64_t blob_count = 0;
    params.visit_trainable([&](const char*, Var<S>&) { ++blob_count; });
    params.visit_buffers([&](const char*, TensorData<S>&) { ++blob_count; });
    detail::append_u64(out, blob_count);
    params.visit_trainable(
        [&](const char* name, Var<S>& v) { detail::append_blob(out, name, v->value); });
    params.visit_buffers(
        [&](const char* name, TensorData<S>& t) { detail::append_blob(out, name, t); });
    detail::write_all_bytes(path, out);
}

template <class S>
struct Checkpoint {
    ModelConfig config;
    ModelParams<S> params;
};

template <class S>
Checkpoint<S> load_checkpoint(const std::string& path) {
    auto bytes = detail::read_all_bytes(path);
    detail::ByteReader r(bytes, path);
    PCSEG_CHECK_IO(r.u32() == kCheckpointMagic, path << ": not a checkpoint (bad magic)");
    const std::uint32_t version = r.u32();
    PCSEG_CHECK_IO(version == kCheckpointVersion,
                   path << ": unsupported checkpoint version " << version);
    const std::string cfg_text = r.str(static_cast<std::size_t>(r.u64()));
    Checkpoint<S> ck{model_config_from_kv(KvConfig::parse_string(cfg_text, path)), {}};
    // Structure the parameter tree from the config, then overwrite every blob.
    ck.params = init_params<S>(ck.config, 0);

    struct Blob {
        Shape shape;
        std::vector<float> data;
    };
    std::unordered_map<std::string, Blob> blobs;
    const std::uint64_t blob_count = r.u64();
    for (std::uint64_t i = 0; i < blob_count; ++i) {
        const std::string name = r.str(r.u32());
        const std::uint32_t ndim = r.u32();
        Blob b;
        std::int64_t numel = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            b.shape.push_back(static_cast<std::int64_t>(r.u64()));
            numel *= b.shape.back();
        }
        b.data.resize(static_cast<std::size_t>(numel));
        for (auto& v : b.data) v = r.f32();
        blobs.emplace(name, std::move(b));
    }
    PCSEG_CHECK_IO(r.done(), path << ": trailing bytes after the last blob");

    auto fill = [&](const char* name, TensorData<S>& dst) {
        auto it = blobs.find(name);
        PCSEG_CHECK(it != blobs.end(), path << ": checkpoint is missing parameter '" << name << "'");
        PCSEG_CHECK(it->second.shape == dst.shape,
                    path << ": parameter '" << name << "' has shape " << shape_str(it->second.shape)
                         << ", config implies " << shape_str(dst.shape));
        for (std::size_t i = 0; i < it->second.data.size(); ++i)
            dst.v[i] = static_cast<S>(it->second.data[i]);
        blobs.erase(it);
    };
    ck.params.visit_trainable([&](const char* name, Var<S>& v) { fill(name, v->value); });
    ck.params.visit_buffers([&](const char* name, TensorData<S>& t) { fill(name, t); });
    PCSEG_CHECK(blobs.empty(), path << ": checkpoint carries " << blobs.size()
                                    << " parameters unknown to this config, first: '"
                                    << blobs.begin()->first << "'");
    return ck;
}

}  // namespace pcseg
