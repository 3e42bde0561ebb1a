#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <queue>
#include <string>
#include <vector>

#include "servesim/device.hpp"
#include "servesim/error.hpp"
#include "servesim/estimator.hpp"
#include "servesim/memory.hpp"
#include "servesim/model_spec.hpp"
#include "servesim/scheduler.hpp"
#include "servesim/workload.hpp"

namespace servesim {

struct ClusterConfig {
    ModelSpec spec;
    ParallelismConfig par;
    DeviceProfile dev;
    PolicyConfig policy;
    RoutingPolicy routing = RoutingPolicy::RoundRobin;
    std::int64_t deferred_threshold = 0;  // 0 = default (max_batch_size)
    double cpu_overhead_per_iter = 0.0;

    std::int64_t gpus_used() const { return par.tp_degree * par.pp_degree * par.num_replicas; }
};

enum class EventKind { Arrival, BatchStart, BatchComplete, RequestComplete };

struct Event {
    double time = 0.0;
    std::uint64_t seq = 0;  // push order; breaks same-time ties deterministically
    EventKind kind = EventKind::Arrival;
    std::size_t replica = 0;
    std::shared_ptr<RequestState> request;
};

struct EventAfter {
    bool operator()(const Event& a, const Event& b) const {
        if (a.time != b.time) return a.time > b.time;
        return a.seq > b.seq;
    }
};

struct RequestRecord {
    std::int64_t id = 0;
    double arrival = 0.0;
    double first_scheduled = -1.0;
    double first_token = -1.0;
    double completion = -1.0;
    std::int64_t prefill_tokens = 0;
    std::int64_t decode_tokens = 0;
    std::int64_t restarts = 0;
    std::vector<double> emission_times;
};

struct IterationRecord {
    double start = 0.0;
    double latency = 0.0;
    std::size_t replica = 0;
    std::int64_t batch_requests = 0;
    std::int64_t current_tokens = 0;
    std::int64_t prefill_entries = 0;
    std::int64_t decode_entries = 0;
    double kv_utilization = 0.0;
};

struct ReplicaAggregate {
    double busy_time = 0.0;
    std::int64_t iterations = 0;
    std::int64_t tokens_processed = 0;
    double peak_kv_utilization = 0.0;
    std::size_t preemptions = 0;
};

struct SimulationResult {
    std::vector<RequestRecord> requests;      // input-trace order
    std::vector<ReplicaAggregate> replicas;
    std::vector<IterationRecord> iterations;  // filled when record_iterations is set
    double simulated_span = 0.0;
    double total_model_flops = 0.0;
    std::int64_t num_devices = 0;
    double peak_device_flops = 0.0;
};

/// Observation hook for invariant validators and debug logs; called with each
/// scheduled batch before it executes.
class SimObserver {
public:
    virtual ~SimObserver() = default;
    virtual void on_batch(std::size_t replica, double now, const BatchPlan& plan,
                          const ReplicaScheduler& sched) = 0;
};

struct SimOptions {
    bool record_iterations = false;
    SimObserver* observer = nullptr;
    // capacity probes: stop as soon as more than `abort_max_late` requests
    // were first scheduled later than `abort_delay_threshold` after arrival
    // (that already decides the P99-delay feasibility question)
    double abort_delay_threshold = 0.0;
    std::size_t abort_max_late = 0;
};

/// Thrown when a probe simulation proves its delay threshold unattainable.
class ProbeInfeasible : public std::exception {
public:
    const char* what() const noexcept override {
        return "probe aborted: delay threshold exceeded";
    }
};

/// Round-robin split of a batch into pp microbatches (entry index mod pp).
inline std::vector<BatchComposition> split_microbatches(const BatchPlan& plan,
                                                        std::int64_t pp_degree) {
    std::vector<BatchComposition> out(static_cast<std::size_t>(pp_degree));
    std::size_t k = 0;
    for (const auto& p : plan.prefills) {
        auto& c = out[k++ % out.size()];
        c.prefill_lengths.push_back(p.chunk_tokens);
        c.prefill_prior_context.push_back(p.prior_context);
    }
    for (const auto& d : plan.decodes)
        out[k++ % out.size()].decode_context_lengths.push_back(d.context_tokens);
    return out;
}

/// Deterministic discrete-event simulation of one cluster over one trace.
/// Requests must carry arrival times. The estimator must cover the config's
/// operator set (checked up front).
inline SimulationResult run_simulation(const ClusterConfig& cluster,
                                       const std::vector<Request>& trace,
                                       const EstimatorModel& estimator,
                                       const SimOptions& opts = {}) {
    validate(cluster.spec);
    validate(cluster.spec, cluster.par);
    validate(cluster.dev);
    validate(cluster.policy);

    auto ops = derive_operators(cluster.spec, cluster.par);
    for (const auto& d : ops)
        estimator.find(d.op, d.tp_degree);  // throws if the estimator lacks an op

    MemoryPlan plan = plan_memory(cluster.spec, cluster.par, cluster.dev,
                                  cluster.policy.block_size, cluster.policy.watermark_fraction,
                                  cluster.policy.activation_reserve_fraction);

    const std::size_t num_replicas = static_cast<std::size_t>(cluster.par.num_replicas);
    std::vector<ReplicaScheduler> replicas;
    replicas.reserve(num_replicas);
    for (std::size_t i = 0; i < num_replicas; ++i) replicas.emplace_back(cluster.policy, plan);
    std::vector<bool> busy(num_replicas, false);
    std::vector<BatchPlan> inflight(num_replicas);

    const std::int64_t threshold =
        cluster.deferred_threshold > 0 ? cluster.deferred_threshold : cluster.policy.max_batch_size;
    Router router(cluster.routing, num_replicas, threshold);
    auto outstanding = [&](std::size_t i) { return replicas[i].outstanding(); };

    SimulationResult result;
    result.num_devices = cluster.gpus_used();
    result.peak_device_flops = cluster.dev.peak_flops;
    result.replicas.resize(num_replicas);

    std::priority_queue<Event, std::vector<Event>, EventAfter> queue;
    std::uint64_t seq = 0;
    auto push = [&](double time, EventKind kind, std::size_t replica,
                    std::shared_ptr<RequestState> req = nullptr) {
        queue.push(Event{time, seq++, kind, replica, std::move(req)});
    };

    std::vector<std::shared_ptr<RequestState>> states;
    states.reserve(trace.size());
    for (const auto& r : trace) {
        require(r.has_arrival(),
                "trace request " + std::to_string(r.id) +
                    " has no arrival time; assign arrivals before simulating");
        auto st = std::make_shared<RequestState>();
        st->req = r;
        states.push_back(st);
        push(r.arrival_time, EventKind::Arrival, 0, states.back());
    }

    double clock = 0.0;
    std::size_t late_schedules = 0;

    auto start_if_idle = [&](std::size_t i, double now) {
        if (busy[i] || !replicas[i].has_work()) return;
        push(now, EventKind::BatchStart, i);
        busy[i] = true;  // claimed; the BatchStart event either runs a batch or clears it
    };

    auto drain_pool = [&](double now) {
        for (auto& [idx, req] : router.drain(outstanding)) {
            replicas[idx].enqueue(std::move(req));
            start_if_idle(idx, now);
        }
    };

    while (!queue.empty()) {
        Event ev = queue.top();
        queue.pop();
        internal_check(ev.time >= clock, "event time regression");
        clock = ev.time;

        switch (ev.kind) {
            case EventKind::Arrival: {
                auto dest = router.route(ev.request, outstanding);
                if (dest.has_value()) {
                    replicas[*dest].enqueue(ev.request);
                    start_if_idle(*dest, clock);
                } else {
                    drain_pool(clock);
                }
                break;
            }
            case EventKind::BatchStart: {
                const std::size_t i = ev.replica;
                ReplicaScheduler& sched = replicas[i];
                sched.set_now(clock);
                BatchPlan plan_now = sched.schedule_iteration();
                if (plan_now.empty()) {
                    busy[i] = false;
                    break;
                }
                if (opts.observer) opts.observer->on_batch(i, clock, plan_now, sched);
                if (opts.abort_delay_threshold > 0.0) {
                    auto count_late = [&](const RequestState& r) {
                        if (r.first_scheduled_time == clock &&
                            clock - r.req.arrival_time > opts.abort_delay_threshold)
                            ++late_schedules;
                    };
                    for (const auto& pe : plan_now.prefills) count_late(*pe.request);
                    for (const auto& de : plan_now.decodes) count_late(*de.request);
                    if (late_schedules > opts.abort_max_late) throw ProbeInfeasible{};
                }

                double latency = 0.0;
                double flops = 0.0;
                if (cluster.par.pp_degree == 1) {
                    auto comp = plan_now.composition();
                    latency = predict_batch(estimator, ops, comp);
                    flops = batch_device_flops(ops, comp) *
                            static_cast<double>(cluster.par.tp_degree);
                } else {
                    auto comps = split_microbatches(plan_now, cluster.par.pp_degree);
                    std::vector<double> times;
                    for (const auto& c : comps) {
                        if (c.total_current_tokens() == 0) continue;
                        times.push_back(predict_batch(estimator, ops, c));
                        flops += batch_device_flops(ops, c) *
                                 static_cast<double>(cluster.par.tp_degree *
                                                     cluster.par.pp_degree);
                    }
                    latency = pipeline_makespan(times, cluster.par.pp_degree);
                }
                latency += cluster.cpu_overhead_per_iter;
                internal_check(latency > 0.0, "non-positive iteration latency");

                auto& agg = result.replicas[i];
                agg.busy_time += latency;
                agg.iterations += 1;
                agg.tokens_processed += plan_now.total_current_tokens();
                const double util =
                    static_cast<double>(sched.memory().allocated_units()) /
                    static_cast<double>(sched.memory().total_units());
                agg.peak_kv_utilization = std::max(agg.peak_kv_utilization, util);
                result.total_model_flops += flops;
                if (opts.record_iterations)
                    result.iterations.push_back({clock, latency, i, plan_now.batch_size(),
                                                 plan_now.total_current_tokens(),
                                                 static_cast<std::int64_t>(plan_now.prefills.size()),
                                                 static_cast<std::int64_t>(plan_now.decodes.size()),
                                                 util});

                inflight[i] = std::move(plan_now);
                push(clock + latency, EventKind::BatchComplete, i);
                break;
            }
            case EventKind::BatchComplete: {
                const std::size_t i = ev.replica;
                auto finished = replicas[i].complete_iteration(inflight[i], clock);
                inflight[i] = BatchPlan{};
                for (auto& f : finished) push(clock, EventKind::RequestComplete, i, f);
                busy[i] = false;
                start_if_idle(i, clock);
                drain_pool(clock);
                break;
            }
            case EventKind::RequestComplete:
                // bookkeeping only; state already updated by complete_iteration
                break;
        }
    }

    result.simulated_span = clock;
    for (std::size_t i = 0; i < num_replicas; ++i)
        result.replicas[i].preemptions = replicas[i].preemption_count();

    for (const auto& st : states) {
        internal_check(st->finished(), "simulation drained with unfinished request " +
                                           std::to_string(st->req.id));
        RequestRecord rec;
        rec.id = st->req.id;
        rec.arrival = st->req.arrival_time;
        rec.first_scheduled = st->first_scheduled_time;
        rec.first_token = st->first_token_time;
        rec.completion = st->completion_time;
        rec.prefill_tokens = st->req.prefill_tokens;
        rec.decode_tokens = st->req.decode_tokens;
        rec.restarts = st->restarts;
        rec.emission_times = st->emission_times;
        result.requests.push_back(std::move(rec));
    }
    return result;
}

}  // namespace servesim
