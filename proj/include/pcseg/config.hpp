#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "pcseg/common.hpp"
#include "pcseg/model.hpp"
#include "pcseg/pointcloud.hpp"

namespace pcseg {

// Plain-text `key=value` configuration; later assignments win, `#` comments.
class KvConfig {
public:
    static KvConfig parse_string(const std::string& text, const std::string& origin = "<string>") {
        KvConfig kv;
        std::istringstream in(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            auto eq = line.find('=');
            PCSEG_CHECK_IO(eq != std::string::npos, origin << ":" << line_no << ": expected key=value");
            kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return kv;
    }

    static KvConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        PCSEG_CHECK_IO(in.good(), "cannot open config file " << path);
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse_string(buf.str(), path);
    }

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    void set_int(const std::string& key, std::int64_t v) { kv_[key] = std::to_string(v); }
    void set_double(const std::string& key, double v) {
        std::ostringstream oss;
        oss.precision(17);
        oss << v;
        kv_[key] = oss.str();
    }
    void set_bool(const std::string& key, bool v) { kv_[key] = v ? "true" : "false"; }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? fallback : it->second;
    }

    std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            return std::stoll(it->second);
        } catch (...) {
            PCSEG_CHECK(false, "config key " << key << " is not an integer: '" << it->second << "'");
        }
        return fallback;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (...) {
            PCSEG_CHECK(false, "config key " << key << " is not a number: '" << it->second << "'");
        }
        return fallback;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        const std::string& s = it->second;
        if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
        if (s == "false" || s == "0" || s == "no" || s == "off") return false;
        PCSEG_CHECK(false, "config key " << key << " is not a boolean: '" << s << "'");
        return fallback;
    }

    // Sorted, stable serialization (checkpoint echo, run logs).
    std::string serialize() const {
        std::ostringstream oss;
        for (const auto& [k, v] : kv_) oss << k << "=" << v << "\n";
        return oss.str();
    }

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    static std::string trim(std::string s) {
        auto b = s.find_first_not_of(" \t\r");
        auto e = s.find_last_not_of(" \t\r");
        if (b == std::string::npos) return "";
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> kv_;
};

namespace detail {

inline void grid_to_kv(const GridSpec& g, const std::string& prefix, KvConfig& kv) {
    if (g.kind == GridKind::planar) {
        kv.set(prefix + ".kind", "planar");
        kv.set_int(prefix + ".axis0", g.axis0);
        kv.set_int(prefix + ".axis1", g.axis1);
        kv.set_double(prefix + ".resolution", g.resolution);
        kv.set_double(prefix + ".min0", g.min0);
        kv.set_double(prefix + ".max0", g.max0);
        kv.set_double(prefix + ".min1", g.min1);
        kv.set_double(prefix + ".max1", g.max1);
    } else {
        kv.set(prefix + ".kind", "spherical");
        kv.set_int(prefix + ".height", g.height);
        kv.set_int(prefix + ".width", g.width);
        kv.set_double(prefix + ".fov_up", g.fov_up_deg);
        kv.set_double(prefix + ".fov_down", g.fov_down_deg);
    }
}

inline GridSpec grid_from_kv(const KvConfig& kv, const std::string& prefix, const GridSpec& fallback) {
    const std::string kind = kv.get_str(prefix + ".kind", fallback.kind == GridKind::planar
                                                              ? "planar"
                                                              : "spherical");
    if (kind == "planar") {
        return GridSpec::planar(static_cast<int>(kv.get_int(prefix + ".axis0", fallback.axis0)),
                                static_cast<int>(kv.get_int(prefix + ".axis1", fallback.axis1)),
                                kv.get_double(prefix + ".resolution", fallback.resolution),
                                kv.get_double(prefix + ".min0", fallback.min0),
                                kv.get_double(prefix + ".max0", fallback.max0),
                                kv.get_double(prefix + ".min1", fallback.min1),
                                kv.get_double(prefix + ".max1", fallback.max1));
    }
    PCSEG_CHECK(kind == "spherical", "unknown grid kind '" << kind << "' for " << prefix);
    return GridSpec::spherical(kv.get_int(prefix + ".height", fallback.height),
                               kv.get_int(prefix + ".width", fallback.width),
                               kv.get_double(prefix + ".fov_up", fallback.fov_up_deg),
                               kv.get_double(prefix + ".fov_down", fallback.fov_down_deg));
}

}  // namespace detail

inline void model_config_to_kv(const ModelConfig& cfg, KvConfig& kv) {
    kv.set_int("model.feature_width", cfg.feature_width);
    kv.set_int("model.layers", cfg.layer_count);
    kv.set_int("model.neighbors", cfg.neighbors);
    kv.set_int("model.classes", cfg.class_count);
    kv.set_int("model.ignore_class", cfg.ignore_class);
    kv.set_int("model.embed_hidden", cfg.embed_hidden);
    kv.set_int("model.conv_groups", cfg.conv_groups);
    kv.set_double("model.neighbor_dropout_p", cfg.neighbor_dropout_p);
    kv.set_bool("model.head_skip", cfg.head_skip);
    kv.set_bool("model.relative_neighbors", cfg.relative_neighbors);
    kv.set("model.range_reduce", cfg.range_reduce == CellReduce::average ? "average" : "closest");
    std::string cycle;
    for (std::size_t i = 0; i < cfg.cycle.size(); ++i) {
        if (i) cycle += ",";
        cycle += projection_name(cfg.cycle[i]);
    }
    kv.set("model.cycle", cycle);
    detail::grid_to_kv(cfg.grid_xy, "grid.xy", kv);
    detail::grid_to_kv(cfg.grid_xz, "grid.xz", kv);
    detail::grid_to_kv(cfg.grid_yz, "grid.yz", kv);
    detail::grid_to_kv(cfg.grid_range, "grid.range", kv);
}

inline ModelConfig model_config_from_kv(const KvConfig& kv) {
    ModelConfig cfg;
    cfg.feature_width = static_cast<int>(kv.get_int("model.feature_width", cfg.feature_width));
    cfg.layer_count = static_cast<int>(kv.get_int("model.layers", cfg.layer_count));
    cfg.neighbors = static_cast<int>(kv.get_int("model.neighbors", cfg.neighbors));
    cfg.class_count = static_cast<int>(kv.get_int("model.classes", cfg.class_count));
    cfg.ignore_class = static_cast<int>(kv.get_int("model.ignore_class", cfg.ignore_class));
    cfg.embed_hidden = static_cast<int>(kv.get_int("model.embed_hidden", cfg.embed_hidden));
    cfg.conv_groups = static_cast<int>(kv.get_int("model.conv_groups", cfg.conv_groups));
    cfg.neighbor_dropout_p = kv.get_double("model.neighbor_dropout_p", cfg.neighbor_dropout_p);
    cfg.head_skip = kv.get_bool("model.head_skip", cfg.head_skip);
    cfg.relative_neighbors = kv.get_bool("model.relative_neighbors", cfg.relative_neighbors);
    const std::string reduce = kv.get_str("model.range_reduce", "average");
    PCSEG_CHECK(reduce == "average" || reduce == "closest", "unknown range_reduce '" << reduce << "'");
    cfg.range_reduce = reduce == "average" ? CellReduce::average : CellReduce::closest;
    if (kv.has("model.cycle")) {
        cfg.cycle.clear();
        std::istringstream cs(kv.get_str("model.cycle", ""));
        std::string tok;
        while (std::getline(cs, tok, ',')) cfg.cycle.push_back(projection_from_name(tok));
    }
    cfg.grid_xy = detail::grid_from_kv(kv, "grid.xy", cfg.grid_xy);
    cfg.grid_xz = detail::grid_from_kv(kv, "grid.xz", cfg.grid_xz);
    cfg.grid_yz = detail::grid_from_kv(kv, "grid.yz", cfg.grid_yz);
    cfg.grid_range = detail::grid_from_kv(kv, "grid.range", cfg.grid_range);
    cfg.validate();
    return cfg;
}

inline void preprocess_config_to_kv(const PreprocessConfig& pc, KvConfig& kv) {
    kv.set_double("preprocess.voxel_size", pc.voxel_size);
    const char* axes = "xyz";
    for (int a = 0; a < 3; ++a) {
        kv.set_double(std::string("preprocess.crop_min_") + axes[a], pc.crop_min[static_cast<std::size_t>(a)]);
        kv.set_double(std::string("preprocess.crop_max_") + axes[a], pc.crop_max[static_cast<std::size_t>(a)]);
    }
    kv.set_bool("augment.flip_x", pc.augment.flip_x);
    kv.set_bool("augment.flip_y", pc.augment.flip_y);
    kv.set_bool("augment.rotate_z", pc.augment.rotate_z);
    kv.set_bool("augment.scale", pc.augment.scale);
    kv.set_double("augment.scale_max", pc.scale_max);
    kv.set_bool("augment.scale_xy_only", pc.scale_xy_only);
}

inline PreprocessConfig preprocess_config_from_kv(const KvConfig& kv) {
    PreprocessConfig pc;
    pc.voxel_size = kv.get_double("preprocess.voxel_size", pc.voxel_size);
    const char* axes = "xyz";
    for (int a = 0; a < 3; ++a) {
        pc.crop_min[static_cast<std::size_t>(a)] =
            kv.get_double(std::string("preprocess.crop_min_") + axes[a], pc.crop_min[static_cast<std::size_t>(a)]);
        pc.crop_max[static_cast<std::size_t>(a)] =
            kv.get_double(std::string("preprocess.crop_max_") + axes[a], pc.crop_max[static_cast<std::size_t>(a)]);
    }
    pc.augment.flip_x = kv.get_bool("augment.flip_x", pc.augment.flip_x);
    pc.augment.flip_y = kv.get_bool("augment.flip_y", pc.augment.flip_y);
    pc.augment.rotate_z = kv.get_bool("augment.rotate_z", pc.augment.rotate_z);
    pc.augment.scale = kv.get_bool("augment.scale", pc.augment.scale);
    pc.scale_max = kv.get_double("augment.scale_max", pc.scale_max);
    pc.scale_xy_only = kv.get_bool("augment.scale_xy_only", pc.scale_xy_only);
    pc.validate();
    return pc;
}

}  // namespace pcseg
