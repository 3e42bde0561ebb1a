#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "servesim/csv.hpp"
#include "servesim/device.hpp"
#include "servesim/error.hpp"
#include "servesim/model_spec.hpp"
#include "servesim/op_cost.hpp"

namespace servesim {

// Feature names, fixed by the profile CSV schema.
inline constexpr const char* kFeatNumTokens = "num_tokens";
inline constexpr const char* kFeatKvReadBytes = "kv_read_bytes";
inline constexpr const char* kFeatPayloadBytes = "payload_bytes";
inline constexpr const char* kFeatTpDegree = "tp_degree";

using FeatureMap = std::map<std::string, double>;

struct ProfileRecord {
    OpName op;
    FeatureMap features;  // includes tp_degree
    double runtime = 0.0; // seconds
};

/// Which bucket an operator falls into for runtime prediction.
inline OpClass triage(OpName op) {
    switch (op) {
        case OpName::QkvProj:
        case OpName::AttnOutProj:
        case OpName::MlpUpProj:
        case OpName::MlpDownProj:
        case OpName::ActFn:
        case OpName::AddNorm:
            return OpClass::TokenLevel;
        case OpName::AttnPrefill:
        case OpName::AttnDecode:
            return OpClass::SequenceLevel;
        case OpName::AllReduce:
        case OpName::AllGather:
        case OpName::SendRecv:
            return OpClass::Communication;
    }
    throw Error("triage: unknown operator");
}

/// Names the model-prediction features each bucket is trained on.
inline std::vector<std::string> feature_schema(OpClass c) {
    switch (c) {
        case OpClass::TokenLevel: return {kFeatNumTokens};
        case OpClass::SequenceLevel: return {kFeatNumTokens, kFeatKvReadBytes};
        case OpClass::Communication: return {kFeatPayloadBytes};
    }
    throw InternalError("feature_schema: bad op class");
}

/// Knobs for the profiling grid. Defaults follow the repo docs: geometric
/// (power-of-two) levels per feature, KV volume spanning one token to a
/// full batch of maximal contexts, payloads model-agnostic.
struct GridConfig {
    std::int64_t max_context = 4096;
    std::int64_t max_batch_hint = 512;           // largest decode batch worth covering
    std::int64_t kv_bytes_per_token_block = 0;   // set per model/tp before sequence grids
    std::int64_t payload_log2_min = 10;          // 1 KiB
    std::int64_t payload_log2_max = 30;          // 1 GiB
};

namespace detail {
inline std::vector<std::int64_t> pow2_levels(std::int64_t lo, std::int64_t hi) {
    std::vector<std::int64_t> v;
    for (std::int64_t x = lo; x < hi; x *= 2) v.push_back(x);
    v.push_back(hi);  // hi need not be a power of two; it is always the last level
    return v;
}

/// Integer geometric levels with an arbitrary ratio, deduplicated.
inline std::vector<std::int64_t> geometric_levels(std::int64_t lo, std::int64_t hi, double ratio) {
    std::vector<std::int64_t> v;
    double x = static_cast<double>(lo);
    while (x < static_cast<double>(hi)) {
        const auto level = static_cast<std::int64_t>(std::llround(x));
        if (v.empty() || level > v.back()) v.push_back(level);
        x *= ratio;
    }
    if (v.empty() || v.back() != hi) v.push_back(hi);
    return v;
}
}  // namespace detail

/// The minimal deterministic grid of feature points to profile per bucket.
inline std::vector<FeatureMap> profile_grid(OpClass c, const GridConfig& cfg) {
    std::vector<FeatureMap> pts;
    switch (c) {
        case OpClass::TokenLevel: {
            for (auto n : detail::pow2_levels(1, cfg.max_context))
                pts.push_back({{kFeatNumTokens, static_cast<double>(n)}});
            break;
        }
        case OpClass::SequenceLevel: {
            require(cfg.kv_bytes_per_token_block > 0,
                    "profile_grid: kv_bytes_per_token_block unset for sequence-level grid");
            // attention is the hard surface (two features, compute/memory
            // crossover), so its grid runs at ratio sqrt(2) per axis
            const double r = std::sqrt(2.0);
            std::vector<std::int64_t> kv_tokens = {0};
            for (auto k : detail::geometric_levels(1, cfg.max_batch_hint * cfg.max_context, r))
                kv_tokens.push_back(k);
            for (auto n : detail::geometric_levels(1, cfg.max_context, r))
                for (auto k : kv_tokens)
                    pts.push_back({{kFeatNumTokens, static_cast<double>(n)},
                                   {kFeatKvReadBytes,
                                    static_cast<double>(k * cfg.kv_bytes_per_token_block)}});
            break;
        }
        case OpClass::Communication: {
            for (std::int64_t p = cfg.payload_log2_min; p <= cfg.payload_log2_max; ++p)
                pts.push_back({{kFeatPayloadBytes, static_cast<double>(std::int64_t(1) << p)}});
            break;
        }
    }
    return pts;
}

inline double feature_or(const FeatureMap& f, const char* name, double fallback) {
    auto it = f.find(name);
    return it == f.end() ? fallback : it->second;
}

/// Analytical stand-in for measured kernel runtimes: roofline time plus a
/// fixed launch overhead; collectives pay wire time plus per-hop latency.
/// Smooth and monotone in every feature by construction (no tile/wave
/// quantization effects).
inline double synthetic_oracle(const OperatorDescriptor& d, const FeatureMap& features,
                               const DeviceProfile& dev) {
    switch (d.op_class) {
        case OpClass::TokenLevel: {
            OpCost c = token_level_cost(d, feature_or(features, kFeatNumTokens, 0.0));
            return std::max(c.flops / dev.peak_flops, c.bytes / dev.mem_bandwidth) +
                   dev.kernel_overhead;
        }
        case OpClass::SequenceLevel: {
            OpCost c = attention_cost(d, feature_or(features, kFeatNumTokens, 0.0),
                                      feature_or(features, kFeatKvReadBytes, 0.0));
            return std::max(c.flops / dev.peak_flops, c.bytes / dev.mem_bandwidth) +
                   dev.kernel_overhead;
        }
        case OpClass::Communication: {
            OpCost c = communication_cost(d, feature_or(features, kFeatPayloadBytes, 0.0));
            return c.wire_bytes / dev.link_bandwidth +
                   static_cast<double>(c.hops) * dev.kernel_overhead;
        }
    }
    throw InternalError("synthetic_oracle: bad op class");
}

inline constexpr const char* kProfileCsvHeader =
    "op_name,feature:num_tokens,feature:kv_read_bytes,feature:payload_bytes,"
    "feature:tp_degree,runtime_s";

inline std::string profile_records_to_csv(const std::vector<ProfileRecord>& records) {
    std::ostringstream out;
    out << kProfileCsvHeader << "\n";
    auto cell = [](const FeatureMap& f, const char* name) -> std::string {
        auto it = f.find(name);
        return it == f.end() ? std::string() : fmt_double(it->second);
    };
    for (const auto& r : records) {
        out << to_string(r.op) << ',' << cell(r.features, kFeatNumTokens) << ','
            << cell(r.features, kFeatKvReadBytes) << ',' << cell(r.features, kFeatPayloadBytes)
            << ',' << cell(r.features, kFeatTpDegree) << ',' << fmt_double(r.runtime) << "\n";
    }
    return out.str();
}

/// Parses and validates a profile CSV (schema: kProfileCsvHeader). This is the
/// seam where externally measured data replaces the synthetic oracle.
inline std::vector<ProfileRecord> ingest_profile_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), "profile csv: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    require(line == kProfileCsvHeader,
            std::string("profile csv: bad header; expected '") + kProfileCsvHeader + "'");

    std::vector<ProfileRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto cells = split_csv_line(line);
        const std::string ctx = "profile csv line " + std::to_string(line_no);
        require(cells.size() == 6, ctx + ": expected 6 columns, got " + std::to_string(cells.size()));
        ProfileRecord r;
        r.op = op_name_from_string(cells[0]);
        auto put = [&](const char* name, const std::string& cell) {
            if (!cell.empty()) r.features[name] = parse_double(cell, ctx);
        };
        put(kFeatNumTokens, cells[1]);
        put(kFeatKvReadBytes, cells[2]);
        put(kFeatPayloadBytes, cells[3]);
        put(kFeatTpDegree, cells[4]);
        require(r.features.count(kFeatTpDegree), ctx + ": missing feature:tp_degree");
        r.runtime = parse_double(cells[5], ctx);
        require(r.runtime > 0.0, ctx + ": runtime_s must be positive");
        for (const auto& name : feature_schema(triage(r.op)))
            require(r.features.count(name),
                    ctx + ": op " + to_string(r.op) + " requires feature:" + name);
        records.push_back(std::move(r));
    }
    return records;
}

namespace detail {

/// Per-axis sorted levels of a feature-point tensor grid.
inline std::vector<std::vector<double>> grid_axes(const std::vector<FeatureMap>& pts,
                                                  const std::vector<std::string>& schema) {
    std::vector<std::vector<double>> axes(schema.size());
    for (const auto& p : pts)
        for (std::size_t f = 0; f < schema.size(); ++f) axes[f].push_back(p.at(schema[f]));
    for (auto& ax : axes) {
        std::sort(ax.begin(), ax.end());
        ax.erase(std::unique(ax.begin(), ax.end()), ax.end());
    }
    return axes;
}

}  // namespace detail

/// Adaptive refinement of the base grid against the oracle: wherever the
/// log-space midpoint of two adjacent levels interpolates poorly (the
/// compute/memory crossover bends the runtime surface inside a cell), that
/// axis gap is bisected. Keeps the profile minimal while bounding the error
/// a downstream interpolator can inherit from the grid.
inline std::vector<FeatureMap> refine_grid_against_oracle(const OperatorDescriptor& d,
                                                          std::vector<FeatureMap> pts,
                                                          const DeviceProfile& dev,
                                                          double tol = 0.015,
                                                          int max_extra_levels = 24) {
    const auto schema = feature_schema(d.op_class);
    auto axes = detail::grid_axes(pts, schema);

    auto rebuild = [&] {
        std::vector<FeatureMap> out;
        std::vector<std::size_t> sizes;
        std::size_t cells = 1;
        for (auto& ax : axes) cells *= ax.size();
        for (std::size_t c = 0; c < cells; ++c) {
            FeatureMap f;
            std::size_t rem = c;
            for (std::size_t k = axes.size(); k-- > 0;) {
                f[schema[k]] = axes[k][rem % axes[k].size()];
                rem /= axes[k].size();
            }
            out.push_back(std::move(f));
        }
        return out;
    };

    for (int round = 0; round < max_extra_levels; ++round) {
        double worst = 0.0;
        std::size_t worst_axis = 0;
        double worst_mid = 0.0;
        for (std::size_t f = 0; f < axes.size(); ++f) {
            // cross sections at the other axes' levels
            std::vector<FeatureMap> sections{{}};
            for (std::size_t g = 0; g < axes.size(); ++g) {
                if (g == f) continue;
                std::vector<FeatureMap> next;
                for (const auto& base : sections)
                    for (double v : axes[g]) {
                        FeatureMap m = base;
                        m[schema[g]] = v;
                        next.push_back(std::move(m));
                    }
                sections = std::move(next);
            }
            for (std::size_t i = 0; i + 1 < axes[f].size(); ++i) {
                const double a = axes[f][i], b = axes[f][i + 1];
                const double mid = std::expm1(0.5 * (std::log1p(a) + std::log1p(b)));
                for (auto section : sections) {
                    section[schema[f]] = a;
                    const double ya = std::log(synthetic_oracle(d, section, dev));
                    section[schema[f]] = b;
                    const double yb = std::log(synthetic_oracle(d, section, dev));
                    section[schema[f]] = mid;
                    const double truth = synthetic_oracle(d, section, dev);
                    const double interp = std::exp(0.5 * (ya + yb));
                    const double err = std::fabs(interp - truth) / truth;
                    if (err > worst) {
                        worst = err;
                        worst_axis = f;
                        worst_mid = mid;
                    }
                }
            }
        }
        if (worst <= tol) break;
        auto& ax = axes[worst_axis];
        ax.insert(std::upper_bound(ax.begin(), ax.end(), worst_mid), worst_mid);
    }
    return rebuild();
}

/// Runs the oracle over the (adaptively refined) grid for every operator of
/// `spec` at each requested TP degree. send_recv is always included so
/// pipeline configs can be simulated from the same profile.
inline std::vector<ProfileRecord> generate_synthetic_profile(
    const ModelSpec& spec, const DeviceProfile& dev, const std::vector<std::int64_t>& tp_degrees,
    GridConfig grid = {}) {
    grid.max_context = spec.max_context;
    std::vector<ProfileRecord> records;
    for (std::int64_t tp : tp_degrees) {
        ParallelismConfig par{tp, 1, 1};
        validate(spec, par);
        auto ops = derive_operators(spec, par);
        {
            OperatorDescriptor sr;
            sr.op = OpName::SendRecv;
            sr.op_class = OpClass::Communication;
            sr.count = 1;
            sr.tp_degree = tp;
            sr.payload_bytes_per_token = spec.hidden_dim * spec.param_bytes_per_element;
            sr.elem_bytes = spec.param_bytes_per_element;
            ops.push_back(sr);
        }
        grid.kv_bytes_per_token_block = kv_bytes_per_token_per_block(spec, par);
        for (const auto& d : ops) {
            auto pts = refine_grid_against_oracle(d, profile_grid(d.op_class, grid), dev);
            for (auto& pt : pts) {
                ProfileRecord r;
                r.op = d.op;
                r.features = pt;
                r.features[kFeatTpDegree] = static_cast<double>(tp);
                r.runtime = synthetic_oracle(d, pt, dev);
                records.push_back(std::move(r));
            }
        }
    }
    return records;
}

}  // namespace servesim
