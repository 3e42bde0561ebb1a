#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "servesim/csv.hpp"
#include "servesim/error.hpp"
#include "servesim/stats.hpp"

namespace servesim {

struct Request {
    std::int64_t id = 0;
    double arrival_time = 0.0;  // seconds; NaN until assigned when the trace has no arrivals
    std::int64_t prefill_tokens = 0;
    std::int64_t decode_tokens = 0;

    bool has_arrival() const { return !std::isnan(arrival_time); }
};

inline constexpr const char* kTraceCsvHeader =
    "request_id,arrival_time_s,prefill_tokens,decode_tokens";
inline constexpr const char* kTraceCsvHeaderNoArrival = "request_id,prefill_tokens,decode_tokens";

/// Loads a trace CSV (either header variant), validates, sorts by arrival.
inline std::vector<Request> load_trace(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), "trace: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    bool with_arrival;
    if (line == kTraceCsvHeader)
        with_arrival = true;
    else if (line == kTraceCsvHeaderNoArrival)
        with_arrival = false;
    else
        throw Error(std::string("trace: bad header; expected '") + kTraceCsvHeader + "' or '" +
                    kTraceCsvHeaderNoArrival + "'");

    std::vector<Request> reqs;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto cells = split_csv_line(line);
        const std::string ctx = "trace line " + std::to_string(line_no);
        const std::size_t want = with_arrival ? 4 : 3;
        require(cells.size() == want,
                ctx + ": expected " + std::to_string(want) + " columns");
        Request r;
        std::size_t c = 0;
        r.id = parse_int(cells[c++], ctx);
        if (with_arrival) {
            r.arrival_time = parse_double(cells[c++], ctx);
            require(r.arrival_time >= 0.0, ctx + ": arrival_time_s must be >= 0");
        } else {
            r.arrival_time = std::nan("");
        }
        r.prefill_tokens = parse_int(cells[c++], ctx);
        r.decode_tokens = parse_int(cells[c++], ctx);
        require(r.prefill_tokens >= 1, ctx + ": prefill_tokens must be >= 1");
        require(r.decode_tokens >= 1, ctx + ": decode_tokens must be >= 1");
        reqs.push_back(r);
    }
    if (with_arrival)
        std::stable_sort(reqs.begin(), reqs.end(), [](const Request& a, const Request& b) {
            return a.arrival_time < b.arrival_time;
        });
    return reqs;
}

inline std::string save_trace(const std::vector<Request>& reqs) {
    std::ostringstream out;
    const bool with_arrival = reqs.empty() || reqs.front().has_arrival();
    out << (with_arrival ? kTraceCsvHeader : kTraceCsvHeaderNoArrival) << "\n";
    for (const auto& r : reqs) {
        out << r.id << ',';
        if (with_arrival) out << fmt_double(r.arrival_time) << ',';
        out << r.prefill_tokens << ',' << r.decode_tokens << "\n";
    }
    return out.str();
}

/// Replaces arrival times with a Poisson process of the given rate.
/// Strictly increasing and deterministic per seed.
inline std::vector<Request> poisson_arrivals(std::vector<Request> reqs, double rate_qps,
                                             std::uint64_t seed) {
    require(rate_qps > 0.0, "poisson_arrivals: rate must be positive");
    std::mt19937_64 rng(seed);
    std::exponential_distribution<double> gap(rate_qps);
    double t = 0.0;
    for (auto& r : reqs) {
        t += std::max(gap(rng), 1e-12);
        r.arrival_time = t;
    }
    return reqs;
}

/// Caps prefill+decode at `max_total`. The decode side absorbs the cut when
/// the prompt still fits; an over-long prompt is itself truncated and keeps
/// the decode count (capped only as far as leaving one prompt token).
inline std::vector<Request> cap_total_length(std::vector<Request> reqs, std::int64_t max_total) {
    require(max_total >= 2, "cap_total_length: max_total must be >= 2");
    for (auto& r : reqs) {
        if (r.prefill_tokens + r.decode_tokens <= max_total) continue;
        if (r.prefill_tokens < max_total) {
            r.decode_tokens = max_total - r.prefill_tokens;
        } else {
            r.decode_tokens = std::min(r.decode_tokens, max_total - 1);
            r.prefill_tokens = max_total - r.decode_tokens;
        }
    }
    return reqs;
}

struct FieldStats {
    double mean = 0.0;
    double median = 0.0;
    double p90 = 0.0;
};

struct TraceStats {
    std::size_t query_count = 0;
    FieldStats prefill;
    FieldStats decode;
    double pd_ratio_median = 0.0;
    double pd_ratio_stddev = 0.0;  // population std dev of per-request P:D ratios
};

inline TraceStats compute_stats(const std::vector<Request>& reqs) {
    require(!reqs.empty(), "compute_stats: empty trace");
    std::vector<double> prefill, decode, ratio;
    for (const auto& r : reqs) {
        prefill.push_back(static_cast<double>(r.prefill_tokens));
        decode.push_back(static_cast<double>(r.decode_tokens));
        ratio.push_back(static_cast<double>(r.prefill_tokens) /
                        static_cast<double>(r.decode_tokens));
    }
    auto field = [](const std::vector<double>& v) {
        return FieldStats{mean(v), percentile(v, 0.5), percentile(v, 0.9)};
    };
    TraceStats s;
    s.query_count = reqs.size();
    s.prefill = field(prefill);
    s.decode = field(decode);
    s.pd_ratio_median = percentile(ratio, 0.5);
    s.pd_ratio_stddev = stddev(ratio);
    return s;
}

/// Length distribution config for synthetic traces: independent lognormal
/// prefill/decode lengths (parameterized by median and log-space sigma) or an
/// empirical histogram of (prefill, decode) pairs.
struct DistConfig {
    std::string kind;  // "lognormal" | "histogram"
    double prefill_median = 0.0, prefill_sigma = 0.0;
    double decode_median = 0.0, decode_sigma = 0.0;
    struct Bin {
        std::int64_t prefill = 0;
        std::int64_t decode = 0;
        double weight = 0.0;
    };
    std::vector<Bin> bins;
    std::int64_t max_total = 0;  // 0 = uncapped
};

inline constexpr int kDistConfigSchemaVersion = 1;

inline DistConfig parse_dist_config(const nlohmann::json& j) {
    DistConfig d;
    try {
        require(j.at("schema_version").get<int>() == kDistConfigSchemaVersion,
                "dist config: unsupported schema_version");
        d.kind = j.at("kind").get<std::string>();
        if (d.kind == "lognormal") {
            d.prefill_median = j.at("prefill").at("median").get<double>();
            d.prefill_sigma = j.at("prefill").at("sigma").get<double>();
            d.decode_median = j.at("decode").at("median").get<double>();
            d.decode_sigma = j.at("decode").at("sigma").get<double>();
            require(d.prefill_median > 0 && d.decode_median > 0,
                    "dist config: medians must be positive");
            require(d.prefill_sigma >= 0 && d.decode_sigma >= 0,
                    "dist config: sigmas must be non-negative");
        } else if (d.kind == "histogram") {
            for (const auto& bj : j.at("bins")) {
                DistConfig::Bin b;
                b.prefill = bj.at("prefill").get<std::int64_t>();
                b.decode = bj.at("decode").get<std::int64_t>();
                b.weight = bj.at("weight").get<double>();
                require(b.prefill >= 1 && b.decode >= 1, "dist config: bin lengths must be >= 1");
                require(b.weight > 0, "dist config: bin weights must be positive");
                d.bins.push_back(b);
            }
            require(!d.bins.empty(), "dist config: histogram needs at least one bin");
        } else {
            throw Error("dist config: kind must be 'lognormal' or 'histogram'");
        }
        d.max_total = j.value("max_total", std::int64_t(0));
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("dist config: malformed field: ") + e.what());
    }
    return d;
}

/// Draws `n` request lengths from the distribution; arrivals left unassigned.
inline std::vector<Request> synth_trace(const DistConfig& dist, std::size_t n,
                                        std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Request> reqs;
    reqs.reserve(n);
    if (dist.kind == "lognormal") {
        std::lognormal_distribution<double> pre(std::log(dist.prefill_median), dist.prefill_sigma);
        std::lognormal_distribution<double> dec(std::log(dist.decode_median), dist.decode_sigma);
        for (std::size_t i = 0; i < n; ++i) {
            Request r;
            r.id = static_cast<std::int64_t>(i);
            r.arrival_time = std::nan("");
            r.prefill_tokens = std::max<std::int64_t>(1, std::llround(pre(rng)));
            r.decode_tokens = std::max<std::int64_t>(1, std::llround(dec(rng)));
            reqs.push_back(r);
        }
    } else if (dist.kind == "histogram") {
        std::vector<double> weights;
        for (const auto& b : dist.bins) weights.push_back(b.weight);
        std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
        for (std::size_t i = 0; i < n; ++i) {
            const auto& b = dist.bins[pick(rng)];
            Request r;
            r.id = static_cast<std::int64_t>(i);
            r.arrival_time = std::nan("");
            r.prefill_tokens = b.prefill;
            r.decode_tokens = b.decode;
            reqs.push_back(r);
        }
    } else {
        throw Error("synth_trace: unknown distribution kind '" + dist.kind + "'");
    }
    if (dist.max_total > 0) reqs = cap_total_length(std::move(reqs), dist.max_total);
    return reqs;
}

}  // namespace servesim
