#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "servesim/csv.hpp"
#include "servesim/error.hpp"
#include "servesim/estimator.hpp"
#include "servesim/metrics.hpp"
#include "servesim/sim.hpp"
#include "servesim/workload.hpp"

namespace servesim {

struct SearchSpace {
    std::vector<DeviceProfile> skus;
    std::vector<std::int64_t> tp_degrees = {1, 2, 4};
    std::vector<std::int64_t> pp_degrees = {1, 2, 4};
    std::vector<SchedulerPolicy> schedulers;
    std::vector<std::int64_t> batch_sizes = {32, 64, 128, 256, 512};
    std::vector<std::int64_t> chunk_sizes = {512, 1024, 2048};  // sarathi_serve only
    std::int64_t max_gpus_total = 16;
};

struct SLOs {
    double ttft_p90_max = 2.0;
    double tbt_p99_max = 0.2;
    double delay_p99_max = 5.0;
};

/// $/hour per SKU. User-supplied config; defaults are placeholders, never
/// measurements.
using CostTable = std::map<std::string, double>;

inline double hourly_rate(const CostTable& cost, const std::string& sku) {
    auto it = cost.find(sku);
    require(it != cost.end(), "cost table: unknown SKU '" + sku + "'");
    require(it->second > 0, "cost table: rate for '" + sku + "' must be positive");
    return it->second;
}

struct CandidateConfig {
    std::string id;
    std::size_t sku_index = 0;
    ParallelismConfig par;
    PolicyConfig policy;
};

inline std::string candidate_id(const DeviceProfile& dev, const ParallelismConfig& par,
                                const PolicyConfig& pol) {
    std::ostringstream s;
    s << dev.sku_name << "_tp" << par.tp_degree << "_pp" << par.pp_degree << "_r"
      << par.num_replicas << "_" << to_string(pol.policy) << "_bs" << pol.max_batch_size;
    if (pol.policy == SchedulerPolicy::SarathiServe) s << "_cs" << pol.chunk_size;
    return s.str();
}

struct SkippedConfig {
    std::string id;
    std::string reason;
};

/// All deployment configurations of the space, lexicographic over
/// (sku, tp, pp, scheduler, batch size, chunk size). Replica count is the
/// maximum fitting the GPU budget. Invalid shardings are skipped with reasons.
inline std::vector<CandidateConfig> enumerate_configs(const ModelSpec& spec,
                                                      const SearchSpace& space,
                                                      const PolicyConfig& base_policy,
                                                      std::vector<SkippedConfig>* skipped = nullptr) {
    require(!space.skus.empty(), "search space: no SKUs");
    require(!space.schedulers.empty(), "search space: no schedulers");
    std::vector<CandidateConfig> out;
    auto skip = [&](const std::string& id, const std::string& reason) {
        if (skipped) skipped->push_back({id, reason});
    };
    for (std::size_t si = 0; si < space.skus.size(); ++si) {
        const DeviceProfile& dev = space.skus[si];
        for (auto tp : space.tp_degrees) {
            for (auto pp : space.pp_degrees) {
                ParallelismConfig par{tp, pp, 1};
                std::ostringstream base;
                base << dev.sku_name << "_tp" << tp << "_pp" << pp;
                if (tp * pp > space.max_gpus_total) {
                    skip(base.str(), "needs more GPUs than the budget");
                    continue;
                }
                par.num_replicas = space.max_gpus_total / (tp * pp);
                if (spec.num_kv_heads % tp != 0) {
                    skip(base.str(), "num_kv_heads not divisible by tp_degree");
                    continue;
                }
                if (spec.num_layers % pp != 0) {
                    skip(base.str(), "num_layers not divisible by pp_degree");
                    continue;
                }
                for (auto sched : space.schedulers) {
                    const auto& chunks = sched == SchedulerPolicy::SarathiServe
                                             ? space.chunk_sizes
                                             : std::vector<std::int64_t>{0};
                    for (auto bs : space.batch_sizes) {
                        for (auto cs : chunks) {
                            PolicyConfig pol = base_policy;
                            pol.policy = sched;
                            pol.max_batch_size = bs;
                            if (cs > 0) pol.chunk_size = cs;
                            CandidateConfig c;
                            c.sku_index = si;
                            c.par = par;
                            c.policy = pol;
                            c.id = candidate_id(dev, par, pol);
                            out.push_back(std::move(c));
                        }
                    }
                }
            }
        }
    }
    return out;
}

struct CapacitySearchOptions {
    double tolerance = 0.02;          // relative width of the final interval
    double delay_p99_threshold = 5.0; // seconds of P99 scheduling delay
    std::size_t probe_requests = 2000;
    std::uint64_t seed = 1;
    double initial_guess = 1.0;       // QPS; doubled until infeasible
    double min_qps = 1e-6;            // below this the config counts as zero-capacity
    double max_qps = 1e9;             // a feasible rate beyond this means the probe is broken
};

/// Maximum sustainable rate by binary search over a monotone feasibility
/// probe: double from the initial guess until infeasible, then bisect until
/// the interval is relatively narrower than the tolerance; the feasible (low)
/// end is returned. Returns 0 when even the minimum rate is infeasible.
inline double find_capacity(const std::function<bool(double)>& feasible_at,
                            const CapacitySearchOptions& opts) {
    require(opts.initial_guess > 0 && opts.tolerance > 0, "find_capacity: bad options");
    double lo = 0.0;
    double hi = opts.initial_guess;
    while (feasible_at(hi)) {
        lo = hi;
        hi *= 2.0;
        // a finite probe workload bounds the worst queueing delay it can
        // generate; if the delay never crosses the threshold the measured
        // "capacity" would be an artifact of the probe size
        require(hi <= opts.max_qps,
                "capacity probe never saturated (delay threshold unreachable); "
                "increase probe_requests");
    }
    if (lo == 0.0) {
        // initial guess was infeasible; make sure anything at all is feasible
        while (hi > opts.min_qps && !feasible_at(hi / 2.0)) hi /= 2.0;
        if (hi <= opts.min_qps) return 0.0;
        lo = hi / 2.0;
    }
    while (hi - lo > opts.tolerance * hi) {
        const double mid = 0.5 * (lo + hi);
        if (feasible_at(mid))
            lo = mid;
        else
            hi = mid;
    }
    return lo;
}

inline double qps_per_dollar(double capacity_qps, std::int64_t gpus_used, double rate_per_gpu_hr) {
    require(rate_per_gpu_hr > 0, "qps_per_dollar: rate must be positive");
    require(gpus_used >= 1, "qps_per_dollar: need at least one GPU");
    return capacity_qps / (static_cast<double>(gpus_used) * rate_per_gpu_hr);
}

struct ConfigResult {
    CandidateConfig config;
    std::string sku_name;
    double capacity_qps = 0.0;
    double qps_per_dollar = 0.0;
    double ttft_p90 = 0.0;
    double tbt_p99 = 0.0;
    double delay_p99 = 0.0;
    double makespan = 0.0;     // offline objective
    bool slo_pass = false;
    std::string error;         // non-empty when evaluation failed
    bool failed() const { return !error.empty(); }
};

struct ParetoPoint {
    double latency = 0.0;  // lower is better
    double value = 0.0;    // higher is better
};

/// Indices of the maximal set under (lower latency, higher value) domination,
/// in input order.
inline std::vector<std::size_t> pareto_frontier(const std::vector<ParetoPoint>& pts) {
    require(!pts.empty(), "pareto_frontier: empty point set");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        bool dominated = false;
        for (std::size_t j = 0; j < pts.size() && !dominated; ++j) {
            if (j == i) continue;
            const bool no_worse =
                pts[j].latency <= pts[i].latency && pts[j].value >= pts[i].value;
            const bool strictly_better =
                pts[j].latency < pts[i].latency || pts[j].value > pts[i].value;
            if (no_worse && strictly_better) dominated = true;
        }
        if (!dominated) out.push_back(i);
    }
    return out;
}

struct SearchOptions {
    SearchSpace space;
    SLOs slos;
    CostTable cost;
    CapacitySearchOptions capacity;
    double evaluation_fraction = 0.85;  // of capacity, for the SLO measurement run
    std::string objective = "qps_per_dollar";  // or "makespan"
    int workers = 1;
    RoutingPolicy routing = RoutingPolicy::RoundRobin;
    double cpu_overhead_per_iter = 0.0;
    TrainConfig train;
};

struct SearchOutcome {
    std::vector<ConfigResult> results;        // enumeration order
    std::vector<SkippedConfig> skipped;
    std::vector<std::size_t> ranking;         // SLO-passing indices, best first
    std::vector<std::size_t> frontier_ttft;   // over (ttft_p90, qps_per_dollar)
    std::vector<std::size_t> frontier_tbt;
    std::optional<std::size_t> best;
};

namespace detail {

/// One shared estimator per SKU, trained from the synthetic oracle over every
/// TP degree the space can use. Built serially before workers start so the
/// outcome cannot depend on thread scheduling.
inline std::map<std::size_t, std::shared_ptr<const EstimatorModel>> build_estimators(
    const ModelSpec& spec, const SearchSpace& space, const TrainConfig& train_cfg) {
    std::map<std::size_t, std::shared_ptr<const EstimatorModel>> out;
    std::vector<std::int64_t> tps;
    for (auto tp : space.tp_degrees)
        if (spec.num_kv_heads % tp == 0) tps.push_back(tp);
    require(!tps.empty(), "search: no valid tp degree for this model");
    for (std::size_t si = 0; si < space.skus.size(); ++si) {
        auto records = generate_synthetic_profile(spec, space.skus[si], tps);
        out[si] = std::make_shared<const EstimatorModel>(train(records, train_cfg));
    }
    return out;
}

inline std::vector<Request> probe_trace(const std::vector<Request>& lengths, std::size_t n) {
    require(!lengths.empty(), "search: empty workload");
    std::vector<Request> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Request r = lengths[i % lengths.size()];
        r.id = static_cast<std::int64_t>(i);
        out.push_back(r);
    }
    return out;
}

}  // namespace detail

/// Crude analytic starting point for the capacity doubling phase: the rate at
/// which single-request service time would saturate all replicas.
inline double initial_qps_guess(const ModelSpec& spec, const CandidateConfig& cand,
                                const EstimatorModel& estimator, const ClusterConfig& cluster) {
    auto ops = derive_operators(spec, cand.par);
    BatchComposition prefill;
    prefill.prefill_lengths = {std::min<std::int64_t>(512, spec.max_context)};
    prefill.prefill_prior_context = {0};
    BatchComposition decode;
    decode.decode_context_lengths = {std::min<std::int64_t>(512, spec.max_context)};
    const double service =
        predict_batch(estimator, ops, prefill) + 64.0 * predict_batch(estimator, ops, decode);
    const double per_replica = 1.0 / std::max(service, 1e-9);
    return std::max(1e-3, per_replica * static_cast<double>(cluster.par.num_replicas));
}

/// Evaluates one candidate end to end: capacity by binary search, then an
/// SLO measurement run at `evaluation_fraction` of capacity.
inline ConfigResult evaluate_config(const ModelSpec& spec, const CandidateConfig& cand,
                                    const DeviceProfile& dev, const EstimatorModel& estimator,
                                    const std::vector<Request>& workload,
                                    const SearchOptions& opts) {
    ConfigResult res;
    res.config = cand;
    res.sku_name = dev.sku_name;
    try {
        ClusterConfig cluster{spec, cand.par, dev, cand.policy, opts.routing, 0,
                              opts.cpu_overhead_per_iter};
        auto lengths = detail::probe_trace(workload, opts.capacity.probe_requests);

        if (opts.objective == "makespan") {
            auto trace = lengths;
            for (auto& r : trace) r.arrival_time = 0.0;  // offline: everything queued up front
            auto result = run_simulation(cluster, trace, estimator);
            auto rep = build_report(result, /*static_mode=*/true);
            res.makespan = result.simulated_span;
            res.ttft_p90 = rep.ttft.p90;
            res.tbt_p99 = rep.tbt.p99;
            res.delay_p99 = rep.scheduling_delay.p99;
            res.slo_pass = true;
            res.qps_per_dollar = 0.0;
            return res;
        }

        auto feasible = [&](double qps) {
            auto trace = poisson_arrivals(lengths, qps, opts.capacity.seed);
            // the nearest-rank p99 exceeds the threshold exactly when more
            // than n - ceil(0.99 n) requests do; aborting there keeps probes
            // at hopeless rates cheap
            SimOptions probe_opts;
            probe_opts.abort_delay_threshold = opts.capacity.delay_p99_threshold;
            const std::size_t n = trace.size();
            probe_opts.abort_max_late =
                n - static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(n)));
            try {
                auto result = run_simulation(cluster, trace, estimator, probe_opts);
                auto rep = build_report(result);
                return rep.scheduling_delay.p99 <= opts.capacity.delay_p99_threshold;
            } catch (const ProbeInfeasible&) {
                return false;
            }
        };
        CapacitySearchOptions copts = opts.capacity;
        copts.initial_guess = initial_qps_guess(spec, cand, estimator, cluster);
        res.capacity_qps = find_capacity(feasible, copts);
        if (res.capacity_qps <= copts.min_qps) {
            res.capacity_qps = 0.0;
            res.error = "no feasible arrival rate (scheduling delay above threshold)";
            return res;
        }

        const double eval_qps = opts.evaluation_fraction * res.capacity_qps;
        auto trace = poisson_arrivals(lengths, eval_qps, opts.capacity.seed);
        auto result = run_simulation(cluster, trace, estimator);
        auto rep = build_report(result);
        res.ttft_p90 = rep.ttft.p90;
        res.tbt_p99 = rep.tbt.p99;
        res.delay_p99 = rep.scheduling_delay.p99;
        res.slo_pass = rep.ttft.p90 <= opts.slos.ttft_p90_max &&
                       rep.tbt.p99 <= opts.slos.tbt_p99_max &&
                       rep.scheduling_delay.p99 <= opts.slos.delay_p99_max;
        res.qps_per_dollar =
            qps_per_dollar(res.capacity_qps, cluster.gpus_used(), hourly_rate(opts.cost, dev.sku_name));
    } catch (const Error& e) {
        res.error = e.what();
    }
    return res;
}


/// Runs the full configuration search. Config evaluations are independent and
/// distributed over `workers` threads; outputs are identical for any worker
/// count (results land in enumeration order, estimators are prebuilt).
inline SearchOutcome run_search(const ModelSpec& spec, const std::vector<Request>& workload,
                                const SearchOptions& opts) {
    SearchOutcome outcome;
    PolicyConfig base;  // block size, watermark etc. at defaults unless overridden upstream
    auto configs = enumerate_configs(spec, opts.space, base, &outcome.skipped);
    require(!configs.empty(), "search: empty configuration space");

    auto estimators = detail::build_estimators(spec, opts.space, opts.train);

    outcome.results.resize(configs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= configs.size()) break;
            const auto& cand = configs[i];
            outcome.results[i] = evaluate_config(spec, cand, opts.space.skus[cand.sku_index],
                                                 *estimators.at(cand.sku_index), workload, opts);
        }
    };
    const int nworkers = std::max(1, opts.workers);
    std::vector<std::thread> threads;
    for (int w = 1; w < nworkers; ++w) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();

    // rank SLO-passing configs; ties broken by config id
    for (std::size_t i = 0; i < outcome.results.size(); ++i) {
        const auto& r = outcome.results[i];
        if (!r.failed() && r.slo_pass) outcome.ranking.push_back(i);
    }
    auto better = [&](std::size_t a, std::size_t b) {
        const auto& ra = outcome.results[a];
        const auto& rb = outcome.results[b];
        if (opts.objective == "makespan") {
            if (ra.makespan != rb.makespan) return ra.makespan < rb.makespan;
        } else if (ra.qps_per_dollar != rb.qps_per_dollar) {
            return ra.qps_per_dollar > rb.qps_per_dollar;
        }
        return ra.config.id < rb.config.id;
    };
    std::sort(outcome.ranking.begin(), outcome.ranking.end(), better);
    if (!outcome.ranking.empty()) outcome.best = outcome.ranking.front();

    // Pareto frontiers over successful evaluations (SLO-passing or not)
    std::vector<ParetoPoint> ttft_pts, tbt_pts;
    std::vector<std::size_t> ok;
    for (std::size_t i = 0; i < outcome.results.size(); ++i) {
        const auto& r = outcome.results[i];
        if (r.failed() || r.capacity_qps <= 0) continue;
        ok.push_back(i);
        ttft_pts.push_back({r.ttft_p90, r.qps_per_dollar});
        tbt_pts.push_back({r.tbt_p99, r.qps_per_dollar});
    }
    if (!ok.empty()) {
        for (auto k : pareto_frontier(ttft_pts)) outcome.frontier_ttft.push_back(ok[k]);
        for (auto k : pareto_frontier(tbt_pts)) outcome.frontier_tbt.push_back(ok[k]);
    }
    return outcome;
}

inline constexpr const char* kSearchResultsCsvHeader =
    "config_id,sku,tp,pp,replicas,policy,max_batch_size,chunk_size,capacity_qps,"
    "qps_per_dollar,ttft_p90_s,tbt_p99_s,delay_p99_s,makespan_s,slo_pass,error";

inline std::string search_results_to_csv(const SearchOutcome& outcome) {
    std::ostringstream out;
    out << kSearchResultsCsvHeader << "\n";
    for (const auto& r : outcome.results) {
        out << r.config.id << ',' << r.sku_name << ',' << r.config.par.tp_degree << ','
            << r.config.par.pp_degree << ',' << r.config.par.num_replicas << ','
            << to_string(r.config.policy.policy) << ',' << r.config.policy.max_batch_size << ','
            << (r.config.policy.policy == SchedulerPolicy::SarathiServe
                    ? std::to_string(r.config.policy.chunk_size)
                    : std::string())
            << ',' << fmt_double(r.capacity_qps) << ',' << fmt_double(r.qps_per_dollar) << ','
            << fmt_double(r.ttft_p90) << ',' << fmt_double(r.tbt_p99) << ','
            << fmt_double(r.delay_p99) << ',' << fmt_double(r.makespan) << ','
            << (r.slo_pass ? "true" : "false") << ',' << r.error << "\n";
    }
    return out.str();
}

/// Frontier data for external plotting: config_id,latency_metric,qps_per_dollar,slo_pass
inline std::string frontier_to_csv(const SearchOutcome& outcome,
                                   const std::vector<std::size_t>& frontier, bool use_ttft) {
    std::ostringstream out;
    out << "config_id,latency_metric,qps_per_dollar,slo_pass\n";
    for (auto i : frontier) {
        const auto& r = outcome.results[i];
        out << r.config.id << ',' << fmt_double(use_ttft ? r.ttft_p90 : r.tbt_p99) << ','
            << fmt_double(r.qps_per_dollar) << ',' << (r.slo_pass ? "true" : "false") << "\n";
    }
    return out.str();
}

inline std::string search_summary_text(const SearchOutcome& outcome, const std::string& objective) {
    std::ostringstream out;
    std::size_t failed = 0;
    for (const auto& r : outcome.results)
        if (r.failed()) ++failed;
    out << "configs evaluated: " << outcome.results.size() << " (" << failed << " failed, "
        << outcome.skipped.size() << " skipped)\n";
    for (const auto& s : outcome.skipped)
        out << "  skipped " << s.id << ": " << s.reason << "\n";
    if (outcome.best) {
        const auto& b = outcome.results[*outcome.best];
        out << "optimum (" << objective << "): " << b.config.id;
        if (objective == "makespan")
            out << " makespan " << fmt_double(b.makespan) << " s\n";
        else
            out << " capacity " << fmt_double(b.capacity_qps) << " qps, "
                << fmt_double(b.qps_per_dollar) << " qps per dollar-hour\n";
    } else {
        out << "no configuration satisfied the SLOs\n";
    }
    return out.str();
}

}  // namespace servesim
