#pragma once

// SQCK checkpoint format, all integers little-endian:
//
//   "SQCK" | u32 version=1 | u32 tensor count
//   per tensor, in lexicographic name order:
//     u16 name length | UTF-8 name | u8 dtype (0=f32, 1=f64) | u8 ndim |
//     ndim x u32 dims | raw scalar data
//   u32 CRC32 of all preceding bytes
//
// The model configuration travels as an extra f64 tensor named "meta.config"
// so a checkpoint is self-describing.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "seqshort/binary_io.hpp"
#include "seqshort/encoder.hpp"

namespace seqshort {

inline constexpr char kCheckpointMagic[] = "SQCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline const std::string kConfigTensorName = "meta.config";

namespace detail {

inline std::vector<double> encode_config(const ModelConfig& cfg) {
    const auto& s = cfg.seqshort;
    const auto& e = cfg.encoder;
    return {1.0,
            static_cast<double>(s.input_dim),
            static_cast<double>(s.hidden_dim),
            static_cast<double>(s.num_heads),
            static_cast<double>(s.output_len),
            s.bias ? 1.0 : 0.0,
            static_cast<double>(e.num_layers),
            static_cast<double>(e.num_heads),
            static_cast<double>(e.ffn_dim),
            static_cast<double>(e.num_classes),
            e.use_positional_embeddings ? 1.0 : 0.0,
            e.head_hidden_layer ? 1.0 : 0.0,
            e.cls_first ? 1.0 : 0.0,
            e.freeze_policy == FreezePolicy::none ? 0.0 : 1.0,
            e.layer_norm_eps};
}

inline ModelConfig decode_config(const std::vector<double>& v) {
    if (v.size() != 15 || v[0] != 1.0) throw FormatError("checkpoint: unrecognized meta.config record");
    auto count = [&](std::size_t i) { return static_cast<std::size_t>(v[i]); };
    ModelConfig cfg;
    cfg.seqshort = {count(1), count(2), count(3), count(4), v[5] != 0.0};
    cfg.encoder.num_layers = count(6);
    cfg.encoder.num_heads = count(7);
    cfg.encoder.hidden_dim = count(2);
    cfg.encoder.ffn_dim = count(8);
    cfg.encoder.num_classes = count(9);
    cfg.encoder.seq_len = count(4);
    cfg.encoder.use_positional_embeddings = v[10] != 0.0;
    cfg.encoder.head_hidden_layer = v[11] != 0.0;
    cfg.encoder.cls_first = v[12] != 0.0;
    cfg.encoder.freeze_policy = v[13] != 0.0 ? FreezePolicy::frozen_except_layernorm : FreezePolicy::none;
    cfg.encoder.layer_norm_eps = v[14];
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: invalid embedded config: ") + e.what());
    }
    return cfg;
}

struct RawTensor {
    std::uint8_t dtype = 0;
    Shape shape;
    std::vector<double> values;
};

template <class T>
void write_tensor(io::ByteWriter& w, const std::string& name, const Tensor<T>& t) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.text(name);
    w.u8(std::is_same_v<T, float> ? 0 : 1);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (const auto dim : t.shape()) w.u32(static_cast<std::uint32_t>(dim));
    w.bytes(t.storage().data(), t.size() * sizeof(T));
}

inline std::map<std::string, RawTensor> parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what) {
    io::ByteReader r(bytes, what);
    r.expect_magic(std::string_view(kCheckpointMagic, 4));
    r.split_crc_trailer();
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw VersionError(what + ": unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32();
    std::map<std::string, RawTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.text(r.u16());
        RawTensor t;
        t.dtype = r.u8();
        if (t.dtype > 1) throw FormatError(what + ": tensor '" + name + "' has unknown dtype " + std::to_string(t.dtype));
        const std::uint8_t ndim = r.u8();
        if (ndim == 0 || ndim > 2) throw FormatError(what + ": tensor '" + name + "' has rank " + std::to_string(ndim));
        for (std::uint8_t d = 0; d < ndim; ++d) t.shape.push_back(r.u32());
        const std::size_t n = shape_size(t.shape);
        if (n == 0) throw FormatError(what + ": tensor '" + name + "' is empty");
        const std::size_t width = t.dtype == 0 ? 4 : 8;
        if (r.remaining() / width < n) throw TruncationError(what + ": tensor '" + name + "' data is truncated");
        t.values.resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            t.values[j] = t.dtype == 0 ? static_cast<double>(r.scalar<float>()) : r.scalar<double>();
        }
        if (!out.emplace(name, std::move(t)).second) throw FormatError(what + ": duplicate tensor '" + name + "'");
    }
    r.verify_crc();
    return out;
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> checkpoint_bytes(const ClassifierModel<T>& model) {
    std::map<std::string, const Tensor<T>*> ordered;
    for (const auto* p : model.parameters()) ordered.emplace(p->name(), &p->value());
    const auto meta = detail::encode_config(model.config());
    const Tensor<double> meta_tensor({meta.size()}, meta);

    io::ByteWriter w;
    w.text(std::string_view(kCheckpointMagic, 4));
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(ordered.size() + 1));
    bool meta_written = false;
    for (const auto& [name, tensor] : ordered) {
        if (!meta_written && kConfigTensorName < name) {
            detail::write_tensor(w, kConfigTensorName, meta_tensor);
            meta_written = true;
        }
        detail::write_tensor(w, name, *tensor);
    }
    if (!meta_written) detail::write_tensor(w, kConfigTensorName, meta_tensor);
    return std::move(w).finish_with_crc();
}

template <class T>
void checkpoint_save(const ClassifierModel<T>& model, const std::filesystem::path& path) {
    io::write_file(path, checkpoint_bytes(model));
}

inline ModelConfig checkpoint_config(const std::filesystem::path& path) {
    const auto raw = detail::parse_checkpoint(io::read_file(path), path.string());
    const auto it = raw.find(kConfigTensorName);
    if (it == raw.end()) throw FormatError(path.string() + ": missing " + kConfigTensorName);
    return detail::decode_config(it->second.values);
}

/// Builds a model from `cfg` and fills it from the file. Every model tensor
/// must be present with a matching shape.
template <class T>
ClassifierModel<T> checkpoint_load(const std::filesystem::path& path, const ModelConfig& cfg) {
    const auto raw = detail::parse_checkpoint(io::read_file(path), path.string());
    ClassifierModel<T> model(cfg, 0);
    for (auto* p : model.parameters()) {
        const auto it = raw.find(p->name());
        if (it == raw.end()) throw ShapeError(path.string() + ": tensor '" + p->name() + "' is missing");
        if (it->second.shape != p->value().shape()) {
            throw ShapeError(path.string() + ": tensor '" + p->name() + "' has shape " +
                             shape_string(it->second.shape) + " but the model expects " +
                             shape_string(p->value().shape()));
        }
        auto dst = p->value().values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.values[i]);
    }
    const std::size_t expected = model.parameters().size() + (raw.count(kConfigTensorName) ? 1 : 0);
    if (raw.size() != expected) {
        for (const auto& [name, _] : raw) {
            bool known = name == kConfigTensorName;
            for (const auto* p : model.parameters()) known = known || p->name() == name;
            if (!known) throw ShapeError(path.string() + ": tensor '" + name + "' does not belong to this model");
        }
    }
    return model;
}

/// Loads a model using the configuration embedded in the file.
template <class T>
ClassifierModel<T> checkpoint_load(const std::filesystem::path& path) {
    return checkpoint_load<T>(path, checkpoint_config(path));
}

}  // namespace seqshort
