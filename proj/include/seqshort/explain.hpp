#pragma once

// Attention-based explanations: rollout back to the bag instances, relative
// entropy of each SeqShort query against uniform attention, and heatmap
// rasterization onto the tile grid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "seqshort/data.hpp"
#include "seqshort/encoder.hpp"

namespace seqshort {

struct RolloutResult {
    Tensor<double> matrix;           // (S+1) x M
    std::vector<double> cls_heatmap;  // [CLS] row renormalized to sum 1
    double cls_mass = 0.0;            // [CLS] row sum before renormalization
};

namespace detail {

inline Tensor<double> matmul_f64(const Tensor<double>& a, const Tensor<double>& b) { return kernels::matmul(a, b); }

}  // namespace detail

/// Rollout with a SeqShort base case. The first rolled matrix stacks a zero
/// row (at the [CLS] index) onto the head-averaged SeqShort attention, since
/// [CLS] takes no part in that layer. Each encoder layer then contributes
/// A = rownorm(0.5 * attention + 0.5 * I), accounting for its residual path.
template <class T>
RolloutResult rollout(const AttentionTrace<T>& trace, std::size_t expected_layers) {
    if (trace.block_attn.size() != expected_layers) {
        throw TraceError("rollout: trace has " + std::to_string(trace.block_attn.size()) + " block matrices, model has " +
                         std::to_string(expected_layers) + " layers");
    }
    if (trace.seqshort_attn.per_head.empty()) throw TraceError("rollout: trace has no SeqShort attention");
    const Tensor<double> base = trace.seqshort_attn.head_average();
    const std::size_t s = base.rows(), m = base.cols(), n = s + 1;
    if (trace.cls_index > s) throw TraceError("rollout: [CLS] index out of range");

    Tensor<double> rolled = Tensor<double>::matrix(n, m);
    for (std::size_t r = 0, src = 0; r < n; ++r) {
        if (r == trace.cls_index) continue;
        std::copy(base.row(src).begin(), base.row(src).end(), rolled.row(r).begin());
        ++src;
    }
    for (const auto& attn : trace.block_attn) {
        if (attn.rows() != n || attn.cols() != n) {
            throw TraceError("rollout: block attention is " + shape_string(attn.shape()) + ", expected " +
                             std::to_string(n) + "x" + std::to_string(n));
        }
        Tensor<double> mixed = Tensor<double>::matrix(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                mixed(i, j) = 0.5 * attn(i, j) + (i == j ? 0.5 : 0.0);
                total += mixed(i, j);
            }
            for (std::size_t j = 0; j < n; ++j) mixed(i, j) /= total;
        }
        rolled = detail::matmul_f64(mixed, rolled);
    }

    RolloutResult out;
    const auto cls_row = rolled.row(trace.cls_index);
    out.cls_mass = std::accumulate(cls_row.begin(), cls_row.end(), 0.0);
    out.matrix = std::move(rolled);
    if (!(out.cls_mass > 1e-12)) {
        throw ZeroMassError("rollout: the [CLS] row carries no mass over the bag instances");
    }
    out.cls_heatmap.assign(cls_row.begin(), cls_row.end());
    for (auto& v : out.cls_heatmap) v /= out.cls_mass;
    return out;
}

/// KL(p || uniform) = sum p_i ln(p_i M), with 0 ln 0 = 0.
inline double kl_to_uniform(std::span<const double> p) {
    if (p.empty()) throw DistributionError("kl_to_uniform: empty distribution");
    double total = 0.0;
    for (const double v : p) {
        if (!(v >= 0.0)) throw DistributionError("kl_to_uniform: negative or NaN probability");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-6) {
        throw DistributionError("kl_to_uniform: probabilities sum to " + std::to_string(total) + ", not 1");
    }
    const double m = static_cast<double>(p.size());
    double kl = 0.0;
    for (const double v : p) {
        if (v > 0.0) kl += v * std::log(v * m);
    }
    return std::max(kl, 0.0);
}

struct EntropyProfile {
    std::vector<double> values;          // per query, nats
    std::vector<std::size_t> query_index;  // query behind each entry (differs from position when sorted)
    std::size_t bags = 0;
    bool sorted = false;
};

/// Relative entropy of each head-averaged query row for one bag.
template <class T>
std::vector<double> query_relative_entropy(const SeqShortAttention<T>& attn) {
    const Tensor<double> avg = attn.head_average();
    std::vector<double> out(avg.rows());
    for (std::size_t q = 0; q < avg.rows(); ++q) out[q] = kl_to_uniform(avg.row(q));
    return out;
}

/// Dataset mean of the per-query relative entropy, optionally sorted
/// descending.
template <class T>
EntropyProfile entropy_profile(const ClassifierModel<T>& model, const std::vector<BagRecord>& bags, bool sort_desc) {
    if (bags.empty()) throw DataError("entropy_profile: no bags");
    const std::size_t s = model.config().seqshort.output_len;
    std::vector<double> sum(s, 0.0);
    for (const auto& bag : bags) {
        const auto result = model.seqshort().forward(to_model_dtype<T>(bag.features));
        const auto d = query_relative_entropy(result.attention);
        for (std::size_t q = 0; q < s; ++q) sum[q] += d[q];
    }
    EntropyProfile out;
    out.bags = bags.size();
    out.sorted = sort_desc;
    out.query_index.resize(s);
    std::iota(out.query_index.begin(), out.query_index.end(), 0);
    if (sort_desc) {
        std::stable_sort(out.query_index.begin(), out.query_index.end(),
                         [&](std::size_t a, std::size_t b) { return sum[a] > sum[b]; });
    }
    for (const std::size_t q : out.query_index) out.values.push_back(sum[q] / static_cast<double>(bags.size()));
    return out;
}

inline void write_entropy_csv(const EntropyProfile& profile, const std::filesystem::path& path) {
    std::ostringstream csv;
    csv << "query_index,relative_entropy_nats\n";
    char buf[64];
    for (std::size_t i = 0; i < profile.values.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.9g", profile.values[i]);
        csv << profile.query_index[i] << ',' << buf << '\n';
    }
    const std::string text = csv.str();
    io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Weights rasterized over the bounding box of the tile coordinates.
struct HeatmapGrid {
    std::int32_t min_x = 0;
    std::int32_t min_y = 0;
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> cells;  // row-major, untouched cells are 0
    std::size_t duplicates = 0;

    float at(std::size_t x, std::size_t y) const { return cells[y * width + x]; }
};

/// Duplicate coordinates are summed. Contributions are sorted before
/// aggregation, so the result does not depend on input order.
inline HeatmapGrid rasterize(std::span<const double> weights, std::span<const TileCoord> coords) {
    if (weights.size() != coords.size()) {
        throw DimensionError("heatmap: " + std::to_string(weights.size()) + " weights for " +
                             std::to_string(coords.size()) + " coordinates");
    }
    if (weights.empty()) throw DimensionError("heatmap: no weights");
    std::vector<std::pair<TileCoord, double>> items(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) items[i] = {coords[i], weights[i]};
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.first.y != b.first.y) return a.first.y < b.first.y;
        if (a.first.x != b.first.x) return a.first.x < b.first.x;
        return a.second < b.second;
    });
    HeatmapGrid grid;
    std::int32_t max_x = items.front().first.x, max_y = items.front().first.y;
    grid.min_x = max_x;
    grid.min_y = max_y;
    for (const auto& [c, _] : items) {
        grid.min_x = std::min(grid.min_x, c.x);
        grid.min_y = std::min(grid.min_y, c.y);
        max_x = std::max(max_x, c.x);
        max_y = std::max(max_y, c.y);
    }
    grid.width = static_cast<std::size_t>(static_cast<std::int64_t>(max_x) - grid.min_x + 1);
    grid.height = static_cast<std::size_t>(static_cast<std::int64_t>(max_y) - grid.min_y + 1);
    std::vector<double> acc(grid.width * grid.height, 0.0);
    std::vector<bool> touched(acc.size(), false);
    for (const auto& [c, w] : items) {
        const std::size_t idx = static_cast<std::size_t>(c.y - grid.min_y) * grid.width +
                                static_cast<std::size_t>(c.x - grid.min_x);
        if (touched[idx]) ++grid.duplicates;
        touched[idx] = true;
        acc[idx] += w;
    }
    grid.cells.assign(acc.begin(), acc.end());
    return grid;
}

/// Binary P5 PGM with min-max normalization over all cells. A constant grid
/// maps to 255 when positive and 0 otherwise.
inline std::vector<std::uint8_t> pgm_bytes(const HeatmapGrid& grid) {
    const auto [lo_it, hi_it] = std::minmax_element(grid.cells.begin(), grid.cells.end());
    const double lo = *lo_it, hi = *hi_it;
    std::string header = "P5\n" + std::to_string(grid.width) + " " + std::to_string(grid.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    for (const float v : grid.cells) {
        double level = 0.0;
        if (hi > lo) {
            level = 255.0 * (static_cast<double>(v) - lo) / (hi - lo);
        } else if (hi > 0.0) {
            level = 255.0;
        }
        out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(level, 0.0, 255.0))));
    }
    return out;
}

/// CSV with one line per touched grid cell: header x,y,weight, weights with 9
/// significant digits (enough to round-trip a float).
inline std::string heatmap_csv(const HeatmapGrid& grid, std::span<const TileCoord> coords) {
    std::vector<TileCoord> cells(coords.begin(), coords.end());
    std::sort(cells.begin(), cells.end(), [](const TileCoord& a, const TileCoord& b) {
        return a.y != b.y ? a.y < b.y : a.x < b.x;
    });
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
    std::ostringstream csv;
    csv << "x,y,weight\n";
    char buf[64];
    for (const auto& c : cells) {
        const float w = grid.at(static_cast<std::size_t>(c.x - grid.min_x), static_cast<std::size_t>(c.y - grid.min_y));
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(w));
        csv << c.x << ',' << c.y << ',' << buf << '\n';
    }
    return csv.str();
}

struct HeatmapFiles {
    std::filesystem::path csv;
    std::filesystem::path pgm;
    HeatmapGrid grid;
};

/// Writes `<stem>.csv` and `<stem>.pgm`. Duplicate coordinates are summed and
/// reported on stderr.
inline HeatmapFiles heatmap_export(std::span<const double> weights, std::span<const TileCoord> coords,
                                   const std::filesystem::path& stem) {
    HeatmapFiles out;
    out.grid = rasterize(weights, coords);
    if (out.grid.duplicates > 0) {
        std::cerr << "warning: " << out.grid.duplicates << " duplicate tile coordinate(s) in " << stem.string()
                  << "; weights summed\n";
    }
    out.csv = stem;
    out.csv += ".csv";
    out.pgm = stem;
    out.pgm += ".pgm";
    const std::string csv = heatmap_csv(out.grid, coords);
    io::write_file(out.csv, std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
    io::write_file(out.pgm, pgm_bytes(out.grid));
    return out;
}

/// Parses a heatmap CSV back into weights and coordinates.
inline std::pair<std::vector<double>, std::vector<TileCoord>> heatmap_csv_read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open heatmap '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || line != "x,y,weight") throw DataError(path.string() + ": bad heatmap header");
    std::vector<double> weights;
    std::vector<TileCoord> coords;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string x, y, w;
        std::getline(row, x, ',');
        std::getline(row, y, ',');
        std::getline(row, w);
        coords.push_back({static_cast<std::int32_t>(std::stol(x)), static_cast<std::int32_t>(std::stol(y))});
        weights.push_back(static_cast<double>(std::stof(w)));
    }
    return {std::move(weights), std::move(coords)};
}

}  // namespace seqshort
