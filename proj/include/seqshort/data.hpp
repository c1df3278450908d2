#pragma once

// Bags, manifests, the synthetic witness-bag generator, and stratified splits.
//
// SQBG bag format, all integers little-endian:
//   "SQBG" | u32 version=1 | u32 M | u32 d | u32 label |
//   M*d f32 features (row-major) | M x (i32 x, i32 y) | u32 id length |
//   UTF-8 id | u32 CRC32 of all preceding bytes

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqshort/binary_io.hpp"
#include "seqshort/tensor.hpp"

namespace seqshort {

struct TileCoord {
    std::int32_t x = 0;
    std::int32_t y = 0;
    friend bool operator==(const TileCoord&, const TileCoord&) = default;
    friend auto operator<=>(const TileCoord&, const TileCoord&) = default;
};

struct BagRecord {
    Tensor<float> features;  // M x d
    std::vector<TileCoord> coords;
    std::uint32_t label = 0;
    std::string id;

    std::size_t size() const { return features.rows(); }
    std::size_t dim() const { return features.cols(); }
};

/// Bag features converted to the model scalar type.
template <class T>
Tensor<T> to_model_dtype(const Tensor<float>& features) {
    if constexpr (std::is_same_v<T, float>) {
        return features;
    } else {
        return features.template cast<T>();
    }
}

inline constexpr char kBagMagic[] = "SQBG";
inline constexpr std::uint32_t kBagVersion = 1;

inline std::vector<std::uint8_t> bag_bytes(const BagRecord& bag) {
    if (bag.features.empty() || bag.features.rank() != 2) throw DataError("bag '" + bag.id + "' has no instances");
    if (bag.coords.size() != bag.size()) {
        throw DataError("bag '" + bag.id + "' has " + std::to_string(bag.coords.size()) + " coordinates for " +
                        std::to_string(bag.size()) + " instances");
    }
    io::ByteWriter w;
    w.text(std::string_view(kBagMagic, 4));
    w.u32(kBagVersion);
    w.u32(static_cast<std::uint32_t>(bag.size()));
    w.u32(static_cast<std::uint32_t>(bag.dim()));
    w.u32(bag.label);
    w.bytes(bag.features.storage().data(), bag.features.size() * sizeof(float));
    for (const auto& c : bag.coords) {
        w.i32(c.x);
        w.i32(c.y);
    }
    w.u32(static_cast<std::uint32_t>(bag.id.size()));
    w.text(bag.id);
    return std::move(w).finish_with_crc();
}

inline BagRecord parse_bag(std::span<const std::uint8_t> bytes, const std::string& what) {
    io::ByteReader r(bytes, what);
    r.expect_magic(std::string_view(kBagMagic, 4));
    r.split_crc_trailer();
    const std::uint32_t version = r.u32();
    if (version != kBagVersion) throw VersionError(what + ": unsupported bag version " + std::to_string(version));
    const std::uint32_t m = r.u32();
    const std::uint32_t d = r.u32();
    BagRecord bag;
    bag.label = r.u32();
    if (m == 0 || d == 0) throw DataError(what + ": bag declares M=" + std::to_string(m) + ", d=" + std::to_string(d));
    const std::size_t n = static_cast<std::size_t>(m) * d;
    if (r.remaining() / sizeof(float) < n) throw TruncationError(what + ": feature block is truncated");
    std::vector<float> features(n);
    r.bytes(features.data(), n * sizeof(float));
    bag.features = Tensor<float>::matrix(m, d, std::move(features));
    bag.coords.resize(m);
    for (auto& c : bag.coords) {
        c.x = r.i32();
        c.y = r.i32();
    }
    bag.id = r.text(r.u32());
    r.verify_crc();
    return bag;
}

inline void bag_write(const BagRecord& bag, const std::filesystem::path& path) { io::write_file(path, bag_bytes(bag)); }

inline BagRecord bag_read(const std::filesystem::path& path) { return parse_bag(io::read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Manifests: `<name>.csv` with header path,label,split plus a `<name>.json`
// sidecar carrying num_classes and feature_dim. Paths are stored relative to
// the manifest directory.

struct ManifestEntry {
    std::filesystem::path path;
    std::uint32_t label = 0;
    std::string split;
    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::size_t num_classes = 2;
    std::size_t feature_dim = 0;
    std::filesystem::path root;  // directory that relative entry paths resolve against

    std::filesystem::path resolve(const ManifestEntry& e) const { return e.path.is_absolute() ? e.path : root / e.path; }

    DatasetManifest filter(const std::string& split) const {
        DatasetManifest out{{}, num_classes, feature_dim, root};
        for (const auto& e : entries) {
            if (e.split == split) out.entries.push_back(e);
        }
        return out;
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes, 0);
        for (const auto& e : entries) ++counts.at(e.label);
        return counts;
    }
};

inline std::filesystem::path manifest_sidecar(const std::filesystem::path& csv) {
    auto p = csv;
    return p.replace_extension(".json");
}

inline void manifest_write(const DatasetManifest& manifest, const std::filesystem::path& csv_path,
                           const nlohmann::json& extra = nlohmann::json::object()) {
    std::ostringstream csv;
    csv << "path,label,split\n";
    for (const auto& e : manifest.entries) csv << e.path.generic_string() << ',' << e.label << ',' << e.split << '\n';
    const std::string text = csv.str();
    io::write_file(csv_path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));

    nlohmann::json meta = extra;
    meta["num_classes"] = manifest.num_classes;
    meta["feature_dim"] = manifest.feature_dim;
    const std::string json = meta.dump(2) + "\n";
    io::write_file(manifest_sidecar(csv_path), std::span(reinterpret_cast<const std::uint8_t*>(json.data()), json.size()));
}

/// Reads a manifest. With `check_files`, every referenced bag is opened and
/// must agree with the sidecar's feature_dim and num_classes.
inline DatasetManifest manifest_read(const std::filesystem::path& csv_path, bool check_files = false) {
    std::ifstream in(csv_path);
    if (!in) throw DataError("cannot open manifest '" + csv_path.string() + "'");
    std::ifstream side(manifest_sidecar(csv_path));
    if (!side) throw DataError("manifest '" + csv_path.string() + "' has no JSON sidecar");
    DatasetManifest m;
    try {
        const auto meta = nlohmann::json::parse(side);
        m.num_classes = meta.at("num_classes").get<std::size_t>();
        m.feature_dim = meta.at("feature_dim").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest sidecar for '" + csv_path.string() + "': " + e.what());
    }
    m.root = csv_path.has_parent_path() ? csv_path.parent_path() : std::filesystem::path(".");
    std::string line;
    if (!std::getline(in, line) || line != "path,label,split") {
        throw DataError("manifest '" + csv_path.string() + "' must start with header 'path,label,split'");
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.rfind(',');
        if (c1 == std::string::npos || c1 == c2) {
            throw DataError(csv_path.string() + ":" + std::to_string(line_no) + ": expected 3 fields");
        }
        ManifestEntry e;
        e.path = line.substr(0, c1);
        try {
            e.label = static_cast<std::uint32_t>(std::stoul(line.substr(c1 + 1, c2 - c1 - 1)));
        } catch (const std::exception&) {
            throw DataError(csv_path.string() + ":" + std::to_string(line_no) + ": bad label");
        }
        e.split = line.substr(c2 + 1);
        if (e.label >= m.num_classes) {
            throw DataError(csv_path.string() + ":" + std::to_string(line_no) + ": label " + std::to_string(e.label) +
                            " >= num_classes " + std::to_string(m.num_classes));
        }
        m.entries.push_back(std::move(e));
    }
    if (check_files) {
        for (const auto& e : m.entries) {
            const BagRecord bag = bag_read(m.resolve(e));
            if (bag.dim() != m.feature_dim) {
                throw DataError(m.resolve(e).string() + ": feature dim " + std::to_string(bag.dim()) +
                                " disagrees with manifest feature_dim " + std::to_string(m.feature_dim));
            }
        }
    }
    return m;
}

inline std::vector<BagRecord> load_bags(const DatasetManifest& manifest) {
    std::vector<BagRecord> bags;
    bags.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) {
        BagRecord bag = bag_read(manifest.resolve(e));
        if (bag.dim() != manifest.feature_dim) {
            throw DataError(manifest.resolve(e).string() + ": feature dim " + std::to_string(bag.dim()) +
                            " disagrees with manifest feature_dim " + std::to_string(manifest.feature_dim));
        }
        bag.label = e.label;
        bags.push_back(std::move(bag));
    }
    return bags;
}

// ---------------------------------------------------------------------------
// Synthetic witness bags.

struct SyntheticTaskSpec {
    std::size_t num_classes = 2;
    std::size_t feature_dim = 32;
    std::size_t bag_min = 30;
    std::size_t bag_max = 60;
    std::size_t witness_min = 3;
    std::size_t witness_max = 3;
    double witness_shift = 4.0;
    double noise_std = 1.0;
    std::uint64_t seed = 7;

    void validate() const {
        if (num_classes < 2) throw ConfigError("synthetic: num_classes must be >= 2");
        if (feature_dim < num_classes) {
            throw ConfigError("synthetic: feature_dim must be >= num_classes (one witness axis per class)");
        }
        if (bag_min == 0 || bag_min > bag_max) throw ConfigError("synthetic: need 1 <= bag_min <= bag_max");
        if (witness_min == 0 || witness_min > witness_max) throw ConfigError("synthetic: need 1 <= witness_min <= witness_max");
        if (witness_max > bag_min) {
            throw ConfigError("synthetic: witness count " + std::to_string(witness_max) + " exceeds the smallest bag size " +
                              std::to_string(bag_min));
        }
        if (witness_shift < 0.0) throw ConfigError("synthetic: witness_shift must be >= 0");
        if (!(noise_std > 0.0)) throw ConfigError("synthetic: noise_std must be > 0");
    }

    nlohmann::json to_json() const {
        return {{"num_classes", num_classes}, {"feature_dim", feature_dim}, {"bag_min", bag_min},
                {"bag_max", bag_max},         {"witness_min", witness_min}, {"witness_max", witness_max},
                {"witness_shift", witness_shift}, {"noise_std", noise_std}, {"seed", seed}};
    }
};

/// Row-major placement on a ceil(sqrt(M)) wide grid.
inline std::vector<TileCoord> grid_coords(std::size_t m) {
    const auto width = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(m))));
    std::vector<TileCoord> coords(m);
    for (std::size_t i = 0; i < m; ++i) {
        coords[i] = {static_cast<std::int32_t>(i % width), static_cast<std::int32_t>(i / width)};
    }
    return coords;
}

struct SyntheticBag {
    BagRecord record;
    std::vector<std::size_t> witnesses;  // instance indices carrying the class signal
};

/// Generates n_per_class bags per class, deterministically from spec.seed.
/// Background instances are N(0, std^2 I); a class-c bag also holds witness
/// instances drawn from N(shift * e_c, std^2 I).
inline std::vector<SyntheticBag> generate_synthetic_bags(const SyntheticTaskSpec& spec, std::size_t n_per_class) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> noise(0.0, spec.noise_std);
    std::vector<SyntheticBag> out;
    out.reserve(n_per_class * spec.num_classes);
    std::size_t serial = 0;
    for (std::size_t i = 0; i < n_per_class; ++i) {
        for (std::size_t c = 0; c < spec.num_classes; ++c) {
            const std::size_t m = std::uniform_int_distribution<std::size_t>(spec.bag_min, spec.bag_max)(rng);
            const std::size_t w = std::uniform_int_distribution<std::size_t>(spec.witness_min, spec.witness_max)(rng);
            std::vector<std::size_t> order(m);
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng);
            std::vector<std::size_t> witnesses(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(w));
            std::sort(witnesses.begin(), witnesses.end());

            SyntheticBag bag;
            bag.record.features = Tensor<float>::matrix(m, spec.feature_dim);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < spec.feature_dim; ++j) bag.record.features(r, j) = static_cast<float>(noise(rng));
            for (const std::size_t r : witnesses) {
                bag.record.features(r, c) = static_cast<float>(bag.record.features(r, c) + spec.witness_shift);
            }
            bag.record.coords = grid_coords(m);
            bag.record.label = static_cast<std::uint32_t>(c);
            char id[32];
            std::snprintf(id, sizeof id, "bag_%05zu", serial++);
            bag.record.id = id;
            bag.witnesses = std::move(witnesses);
            out.push_back(std::move(bag));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stratified splitting.

struct SplitFraction {
    std::string name;
    double fraction = 0.0;
};

/// Per class: shuffle with `seed`, then cut at rounded cumulative fractions.
inline DatasetManifest stratified_split(const DatasetManifest& manifest, const std::vector<SplitFraction>& splits,
                                        std::uint64_t seed) {
    if (splits.empty()) throw ConfigError("stratified_split: no splits requested");
    double total = 0.0;
    for (const auto& s : splits) {
        if (s.fraction < 0.0) throw ConfigError("stratified_split: negative fraction for '" + s.name + "'");
        total += s.fraction;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("stratified_split: fractions must sum to 1");

    std::vector<std::vector<std::size_t>> by_class(manifest.num_classes);
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) by_class.at(manifest.entries[i].label).push_back(i);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (!by_class[c].empty() && by_class[c].size() < 2) {
            throw StratificationError("stratified_split: class " + std::to_string(c) + " has only " +
                                      std::to_string(by_class[c].size()) + " member(s)");
        }
    }

    DatasetManifest out = manifest;
    std::mt19937_64 rng(seed);
    for (auto& members : by_class) {
        std::shuffle(members.begin(), members.end(), rng);
        const double n = static_cast<double>(members.size());
        double cumulative = 0.0;
        std::size_t begin = 0;
        for (std::size_t s = 0; s < splits.size(); ++s) {
            cumulative += splits[s].fraction;
            const std::size_t end = s + 1 == splits.size() ? members.size()
                                                            : static_cast<std::size_t>(std::llround(n * cumulative));
            for (std::size_t j = begin; j < std::max(begin, end); ++j) out.entries[members[j]].split = splits[s].name;
            begin = std::max(begin, end);
        }
    }
    return out;
}

/// k stratified folds. Manifest j tags fold j as "val" and the rest "train".
inline std::vector<DatasetManifest> stratified_kfold(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw ConfigError("stratified_kfold: k must be >= 2");
    std::vector<std::vector<std::size_t>> by_class(manifest.num_classes);
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) by_class.at(manifest.entries[i].label).push_back(i);
    std::vector<std::size_t> fold_of(manifest.entries.size());
    std::mt19937_64 rng(seed);
    std::size_t offset = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& members = by_class[c];
        if (members.empty()) continue;
        if (members.size() < k) {
            throw StratificationError("stratified_kfold: class " + std::to_string(c) + " has " +
                                      std::to_string(members.size()) + " members, fewer than k=" + std::to_string(k));
        }
        std::shuffle(members.begin(), members.end(), rng);
        // Rotating the start keeps leftover members from piling into fold 0.
        for (std::size_t j = 0; j < members.size(); ++j) fold_of[members[j]] = (offset + j) % k;
        offset += members.size();
    }
    std::vector<DatasetManifest> folds(k, manifest);
    for (std::size_t f = 0; f < k; ++f) {
        for (std::size_t i = 0; i < manifest.entries.size(); ++i) folds[f].entries[i].split = fold_of[i] == f ? "val" : "train";
    }
    return folds;
}

struct GeneratedDataset {
    DatasetManifest manifest;
    std::filesystem::path manifest_path;
    std::vector<std::vector<std::size_t>> witnesses;  // parallel to manifest.entries
};

/// Writes bags under `out_dir/bags/`, a stratified train/val manifest
/// `out_dir/manifest.csv` (+ .json), and `out_dir/witnesses.csv`.
inline GeneratedDataset generate_synthetic(const SyntheticTaskSpec& spec, std::size_t n_per_class,
                                           const std::filesystem::path& out_dir, double val_fraction = 0.1,
                                           const nlohmann::json& config_echo = nlohmann::json::object()) {
    auto bags = generate_synthetic_bags(spec, n_per_class);
    GeneratedDataset out;
    out.manifest.num_classes = spec.num_classes;
    out.manifest.feature_dim = spec.feature_dim;
    out.manifest.root = out_dir;
    std::ostringstream witness_csv;
    witness_csv << "path,witnesses\n";
    for (auto& bag : bags) {
        const std::filesystem::path rel = std::filesystem::path("bags") / (bag.record.id + ".sqbg");
        bag_write(bag.record, out_dir / rel);
        out.manifest.entries.push_back({rel, bag.record.label, "train"});
        witness_csv << rel.generic_string() << ',';
        for (std::size_t i = 0; i < bag.witnesses.size(); ++i) witness_csv << (i ? ";" : "") << bag.witnesses[i];
        witness_csv << '\n';
        out.witnesses.push_back(std::move(bag.witnesses));
    }
    out.manifest = stratified_split(out.manifest, {{"train", 1.0 - val_fraction}, {"val", val_fraction}}, spec.seed);
    out.manifest_path = out_dir / "manifest.csv";
    nlohmann::json extra = {{"generator", spec.to_json()}, {"val_fraction", val_fraction}};
    if (!config_echo.empty()) extra["config"] = config_echo;
    manifest_write(out.manifest, out.manifest_path, extra);
    const std::string text = witness_csv.str();
    io::write_file(out_dir / "witnesses.csv", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    return out;
}

}  // namespace seqshort
