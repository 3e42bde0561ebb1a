#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "servesim/csv.hpp"
#include "servesim/error.hpp"
#include "servesim/sim.hpp"
#include "servesim/stats.hpp"

namespace servesim {

struct RequestMetrics {
    std::int64_t id = 0;
    double scheduling_delay = 0.0;
    double ttft = 0.0;
    double prefill_completion = 0.0;      // same clock as ttft; kept for exports
    double e2e_latency = 0.0;
    double normalized_latency = 0.0;      // s per output token
    std::vector<double> tbt_samples;      // |samples| == decode_tokens - 1
    std::int64_t prefill_tokens = 0;
    std::int64_t decode_tokens = 0;
    std::int64_t restarts = 0;
};

/// End-to-end latency per output token. In static mode the scheduling delay
/// is excluded and the clock starts when the request is first scheduled.
inline double normalized_latency(const RequestRecord& r, bool static_mode = false) {
    require(r.completion >= 0, "normalized_latency: request not completed");
    const double start = static_mode ? r.first_scheduled : r.arrival;
    return (r.completion - start) / static_cast<double>(r.decode_tokens);
}

inline RequestMetrics request_metrics(const RequestRecord& r, bool static_mode = false) {
    RequestMetrics m;
    m.id = r.id;
    m.scheduling_delay = r.first_scheduled - r.arrival;
    m.ttft = r.first_token - r.arrival;
    m.prefill_completion = r.first_token - r.arrival;
    m.e2e_latency = r.completion - r.arrival;
    m.normalized_latency = normalized_latency(r, static_mode);
    m.prefill_tokens = r.prefill_tokens;
    m.decode_tokens = r.decode_tokens;
    m.restarts = r.restarts;
    for (std::size_t i = 1; i < r.emission_times.size(); ++i)
        m.tbt_samples.push_back(r.emission_times[i] - r.emission_times[i - 1]);
    return m;
}

struct MetricSummary {
    double mean = 0.0, p50 = 0.0, p90 = 0.0, p95 = 0.0, p99 = 0.0;
};

inline MetricSummary summarize(const std::vector<double>& samples) {
    MetricSummary s;
    if (samples.empty()) return s;
    s.mean = mean(samples);
    s.p50 = percentile(samples, 0.50);
    s.p90 = percentile(samples, 0.90);
    s.p95 = percentile(samples, 0.95);
    s.p99 = percentile(samples, 0.99);
    return s;
}

struct ClusterMetrics {
    double mfu = 0.0;
    double kv_utilization_peak = 0.0;
    double busy_fraction = 0.0;
    std::size_t preemptions = 0;
};

/// Model flops executed over elapsed wall time at peak, across all devices.
inline double mfu(const SimulationResult& result) {
    if (result.simulated_span <= 0.0) return 0.0;
    return result.total_model_flops /
           (result.simulated_span * result.peak_device_flops *
            static_cast<double>(result.num_devices));
}

inline ClusterMetrics cluster_metrics(const SimulationResult& result) {
    ClusterMetrics c;
    c.mfu = mfu(result);
    double busy = 0.0;
    for (const auto& rep : result.replicas) {
        c.kv_utilization_peak = std::max(c.kv_utilization_peak, rep.peak_kv_utilization);
        busy += rep.busy_time;
        c.preemptions += rep.preemptions;
    }
    if (result.simulated_span > 0 && !result.replicas.empty())
        c.busy_fraction = busy / (result.simulated_span *
                                  static_cast<double>(result.replicas.size()));
    return c;
}

struct MetricsReport {
    std::vector<RequestMetrics> requests;
    MetricSummary scheduling_delay, ttft, tbt, e2e, normalized;
    ClusterMetrics cluster;
    double simulated_span = 0.0;
};

inline MetricsReport build_report(const SimulationResult& result, bool static_mode = false) {
    MetricsReport rep;
    std::vector<double> delays, ttfts, tbts, e2es, norms;
    for (const auto& r : result.requests) {
        auto m = request_metrics(r, static_mode);
        delays.push_back(m.scheduling_delay);
        ttfts.push_back(m.ttft);
        e2es.push_back(m.e2e_latency);
        norms.push_back(m.normalized_latency);
        for (double t : m.tbt_samples) tbts.push_back(t);
        rep.requests.push_back(std::move(m));
    }
    rep.scheduling_delay = summarize(delays);
    rep.ttft = summarize(ttfts);
    rep.tbt = summarize(tbts);
    rep.e2e = summarize(e2es);
    rep.normalized = summarize(norms);
    rep.cluster = cluster_metrics(result);
    rep.simulated_span = result.simulated_span;
    return rep;
}

inline constexpr const char* kRequestMetricsCsvHeader =
    "request_id,prefill_tokens,decode_tokens,scheduling_delay_s,ttft_s,e2e_s,"
    "normalized_s_per_token,restarts";

inline std::string request_metrics_to_csv(const MetricsReport& rep) {
    std::ostringstream out;
    out << kRequestMetricsCsvHeader << "\n";
    for (const auto& m : rep.requests) {
        out << m.id << ',' << m.prefill_tokens << ',' << m.decode_tokens << ','
            << fmt_double(m.scheduling_delay) << ',' << fmt_double(m.ttft) << ','
            << fmt_double(m.e2e_latency) << ',' << fmt_double(m.normalized_latency) << ','
            << m.restarts << "\n";
    }
    return out.str();
}

/// Round-trip loader for the per-request metrics table.
inline std::vector<RequestMetrics> request_metrics_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), "metrics csv: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    require(line == kRequestMetricsCsvHeader, "metrics csv: bad header");
    std::vector<RequestMetrics> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto cells = split_csv_line(line);
        const std::string ctx = "metrics csv line " + std::to_string(line_no);
        require(cells.size() == 8, ctx + ": expected 8 columns");
        RequestMetrics m;
        m.id = parse_int(cells[0], ctx);
        m.prefill_tokens = parse_int(cells[1], ctx);
        m.decode_tokens = parse_int(cells[2], ctx);
        m.scheduling_delay = parse_double(cells[3], ctx);
        m.ttft = parse_double(cells[4], ctx);
        m.e2e_latency = parse_double(cells[5], ctx);
        m.normalized_latency = parse_double(cells[6], ctx);
        m.restarts = parse_int(cells[7], ctx);
        out.push_back(std::move(m));
    }
    return out;
}

inline nlohmann::ordered_json summary_to_json(const MetricsReport& rep) {
    auto metric = [](const MetricSummary& s) {
        nlohmann::ordered_json j;
        j["mean"] = s.mean;
        j["p50"] = s.p50;
        j["p90"] = s.p90;
        j["p95"] = s.p95;
        j["p99"] = s.p99;
        return j;
    };
    nlohmann::ordered_json j;
    j["num_requests"] = rep.requests.size();
    j["simulated_span_s"] = rep.simulated_span;
    j["scheduling_delay_s"] = metric(rep.scheduling_delay);
    j["ttft_s"] = metric(rep.ttft);
    j["tbt_s"] = metric(rep.tbt);
    j["e2e_s"] = metric(rep.e2e);
    j["normalized_s_per_token"] = metric(rep.normalized);
    j["cluster"] = {{"mfu", rep.cluster.mfu},
                    {"kv_utilization_peak", rep.cluster.kv_utilization_peak},
                    {"busy_fraction", rep.cluster.busy_fraction},
                    {"preemptions", rep.cluster.preemptions}};
    return j;
}

/// Writes requests.csv (or .json) plus summary.json under `out_prefix`.
/// Returns the list of files written.
inline std::vector<std::string> export_metrics(const MetricsReport& rep,
                                               const std::string& out_dir,
                                               const std::string& format) {
    require(format == "csv" || format == "json", "export: format must be csv or json");
    std::vector<std::string> written;
    if (format == "csv") {
        const std::string path = out_dir + "/requests.csv";
        write_text_file(path, request_metrics_to_csv(rep));
        written.push_back(path);
    } else {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (const auto& m : rep.requests) {
            nlohmann::ordered_json r;
            r["request_id"] = m.id;
            r["prefill_tokens"] = m.prefill_tokens;
            r["decode_tokens"] = m.decode_tokens;
            r["scheduling_delay_s"] = m.scheduling_delay;
            r["ttft_s"] = m.ttft;
            r["e2e_s"] = m.e2e_latency;
            r["normalized_s_per_token"] = m.normalized_latency;
            r["restarts"] = m.restarts;
            rows.push_back(std::move(r));
        }
        const std::string path = out_dir + "/requests.json";
        write_text_file(path, rows.dump(2) + "\n");
        written.push_back(path);
    }
    const std::string summary_path = out_dir + "/summary.json";
    write_text_file(summary_path, summary_to_json(rep).dump(2) + "\n");
    written.push_back(summary_path);
    return written;
}

}  // namespace servesim
