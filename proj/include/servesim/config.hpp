#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "servesim/csv.hpp"
#include "servesim/device.hpp"
#include "servesim/error.hpp"
#include "servesim/model_spec.hpp"
#include "servesim/search.hpp"
#include "servesim/sim.hpp"
#include "servesim/workload.hpp"

namespace servesim {

inline nlohmann::json load_json_file(const std::string& path) {
    try {
        return nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw Error(path + ": invalid JSON: " + e.what());
    }
}

/// Paths inside config files resolve relative to the config file itself,
/// never the working directory.
inline std::string resolve_path(const std::string& config_path, const std::string& ref) {
    std::filesystem::path p(ref);
    if (p.is_absolute()) return ref;
    return (std::filesystem::path(config_path).parent_path() / p).lexically_normal().string();
}

inline ModelSpec load_model_spec_file(const std::string& path) {
    try {
        return parse_model_spec(read_text_file(path));
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
}

inline DeviceProfile load_device_file(const std::string& path) {
    try {
        return parse_device_profile(read_text_file(path));
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
}

inline constexpr int kClusterConfigSchemaVersion = 1;

struct LoadedClusterConfig {
    ClusterConfig cluster;
    std::string model_spec_path;
    std::string device_path;
};

inline PolicyConfig parse_policy_config(const nlohmann::json& j) {
    PolicyConfig pol;
    pol.policy = scheduler_policy_from_string(j.at("policy").get<std::string>());
    pol.max_batch_size = j.value("max_batch_size", pol.max_batch_size);
    pol.max_tokens_per_iter = j.value("max_tokens_per_iter", pol.max_tokens_per_iter);
    pol.chunk_size = j.value("chunk_size", pol.chunk_size);
    pol.block_size = j.value("block_size", pol.block_size);
    pol.watermark_fraction = j.value("watermark_fraction", pol.watermark_fraction);
    pol.activation_reserve_fraction =
        j.value("activation_reserve_fraction", pol.activation_reserve_fraction);
    validate(pol);
    return pol;
}

inline LoadedClusterConfig load_cluster_config(const std::string& path) {
    nlohmann::json j = load_json_file(path);
    LoadedClusterConfig out;
    try {
        require(j.at("schema_version").get<int>() == kClusterConfigSchemaVersion,
                "unsupported schema_version");
        out.model_spec_path = resolve_path(path, j.at("model_spec").get<std::string>());
        out.device_path = resolve_path(path, j.at("device").get<std::string>());
        out.cluster.spec = load_model_spec_file(out.model_spec_path);
        out.cluster.dev = load_device_file(out.device_path);
        const auto& par = j.at("parallelism");
        out.cluster.par.tp_degree = par.at("tp_degree").get<std::int64_t>();
        out.cluster.par.pp_degree = par.at("pp_degree").get<std::int64_t>();
        out.cluster.par.num_replicas = par.at("num_replicas").get<std::int64_t>();
        out.cluster.policy = parse_policy_config(j.at("scheduler"));
        if (j.contains("routing")) {
            out.cluster.routing =
                routing_policy_from_string(j.at("routing").at("policy").get<std::string>());
            out.cluster.deferred_threshold =
                j.at("routing").value("deferred_threshold", std::int64_t(0));
        }
        out.cluster.cpu_overhead_per_iter = j.value("cpu_overhead_per_iter", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw Error(path + ": malformed cluster config: " + e.what());
    }
    validate(out.cluster.spec, out.cluster.par);
    return out;
}

inline constexpr int kSearchConfigSchemaVersion = 1;

struct LoadedSearchConfig {
    ModelSpec spec;
    std::vector<Request> workload;           // lengths; arrivals assigned per probe
    SearchOptions options;
    std::string model_spec_path;
    std::vector<std::string> device_paths;
    std::string trace_path;                  // empty for synthetic workloads
};

inline LoadedSearchConfig load_search_config(const std::string& path) {
    nlohmann::json j = load_json_file(path);
    LoadedSearchConfig out;
    try {
        require(j.at("schema_version").get<int>() == kSearchConfigSchemaVersion,
                "unsupported schema_version");
        out.model_spec_path = resolve_path(path, j.at("model_spec").get<std::string>());
        out.spec = load_model_spec_file(out.model_spec_path);

        const auto& w = j.at("workload");
        std::size_t n = w.value("num_requests", std::size_t(2000));
        if (w.contains("trace")) {
            out.trace_path = resolve_path(path, w.at("trace").get<std::string>());
            out.workload = load_trace(read_text_file(out.trace_path));
        } else if (w.contains("synthetic")) {
            auto dist = parse_dist_config(w.at("synthetic"));
            out.workload = synth_trace(dist, n, w.value("synth_seed", std::uint64_t(7)));
        } else {
            throw Error("workload needs either 'trace' or 'synthetic'");
        }
        require(!out.workload.empty(), "workload is empty");

        auto& space = out.options.space;
        const auto& sp = j.at("space");
        for (const auto& dev_ref : sp.at("skus")) {
            auto dev_path = resolve_path(path, dev_ref.get<std::string>());
            out.device_paths.push_back(dev_path);
            space.skus.push_back(load_device_file(dev_path));
        }
        if (sp.contains("tp_degrees"))
            space.tp_degrees = sp.at("tp_degrees").get<std::vector<std::int64_t>>();
        if (sp.contains("pp_degrees"))
            space.pp_degrees = sp.at("pp_degrees").get<std::vector<std::int64_t>>();
        for (const auto& s : sp.at("schedulers"))
            space.schedulers.push_back(scheduler_policy_from_string(s.get<std::string>()));
        if (sp.contains("batch_sizes"))
            space.batch_sizes = sp.at("batch_sizes").get<std::vector<std::int64_t>>();
        if (sp.contains("chunk_sizes"))
            space.chunk_sizes = sp.at("chunk_sizes").get<std::vector<std::int64_t>>();
        space.max_gpus_total = sp.value("max_gpus_total", std::int64_t(16));

        if (j.contains("slos")) {
            const auto& s = j.at("slos");
            out.options.slos.ttft_p90_max = s.value("ttft_p90_max", 2.0);
            out.options.slos.tbt_p99_max = s.value("tbt_p99_max", 0.2);
            out.options.slos.delay_p99_max = s.value("delay_p99_max", 5.0);
        }
        for (const auto& [sku, rate] : j.at("cost_table").items())
            out.options.cost[sku] = rate.get<double>();

        if (j.contains("capacity")) {
            const auto& c = j.at("capacity");
            out.options.capacity.tolerance = c.value("tolerance", 0.02);
            out.options.capacity.probe_requests = c.value("probe_requests", std::size_t(2000));
            out.options.evaluation_fraction = c.value("evaluation_fraction", 0.85);
        }
        // capacity is defined by the scheduling-delay SLO
        out.options.capacity.delay_p99_threshold = out.options.slos.delay_p99_max;
        out.options.objective = j.value("objective", std::string("qps_per_dollar"));
        require(out.options.objective == "qps_per_dollar" || out.options.objective == "makespan",
                "objective must be qps_per_dollar or makespan");
        if (j.contains("routing"))
            out.options.routing = routing_policy_from_string(j.at("routing").get<std::string>());
        out.options.cpu_overhead_per_iter = j.value("cpu_overhead_per_iter", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw Error(path + ": malformed search config: " + e.what());
    }
    return out;
}

}  // namespace servesim
