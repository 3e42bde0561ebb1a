#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "servesim/error.hpp"
#include "servesim/estimator.hpp"
#include "servesim/memory.hpp"
#include "servesim/model_spec.hpp"
#include "servesim/workload.hpp"

namespace servesim {

enum class SchedulerPolicy { FasterTransformer, OrcaPlus, VLLM, SarathiServe, LightLLM };
enum class RoutingPolicy { RoundRobin, LeastOutstanding, Deferred };

inline const char* to_string(SchedulerPolicy p) {
    switch (p) {
        case SchedulerPolicy::FasterTransformer: return "faster_transformer";
        case SchedulerPolicy::OrcaPlus: return "orca_plus";
        case SchedulerPolicy::VLLM: return "vllm";
        case SchedulerPolicy::SarathiServe: return "sarathi_serve";
        case SchedulerPolicy::LightLLM: return "lightllm";
    }
    return "?";
}

inline SchedulerPolicy scheduler_policy_from_string(const std::string& s) {
    if (s == "faster_transformer") return SchedulerPolicy::FasterTransformer;
    if (s == "orca_plus") return SchedulerPolicy::OrcaPlus;
    if (s == "vllm") return SchedulerPolicy::VLLM;
    if (s == "sarathi_serve") return SchedulerPolicy::SarathiServe;
    if (s == "lightllm") return SchedulerPolicy::LightLLM;
    throw Error("unknown scheduler policy '" + s +
                "' (expected faster_transformer|orca_plus|vllm|sarathi_serve|lightllm)");
}

inline const char* to_string(RoutingPolicy p) {
    switch (p) {
        case RoutingPolicy::RoundRobin: return "round_robin";
        case RoutingPolicy::LeastOutstanding: return "least_outstanding";
        case RoutingPolicy::Deferred: return "deferred";
    }
    return "?";
}

inline RoutingPolicy routing_policy_from_string(const std::string& s) {
    if (s == "round_robin") return RoutingPolicy::RoundRobin;
    if (s == "least_outstanding") return RoutingPolicy::LeastOutstanding;
    if (s == "deferred") return RoutingPolicy::Deferred;
    throw Error("unknown routing policy '" + s +
                "' (expected round_robin|least_outstanding|deferred)");
}

struct PolicyConfig {
    SchedulerPolicy policy = SchedulerPolicy::VLLM;
    std::int64_t max_batch_size = 128;
    std::int64_t max_tokens_per_iter = 4096;  // vllm / orca_plus / lightllm
    std::int64_t chunk_size = 512;            // sarathi_serve token budget per iteration
    std::int64_t block_size = 16;
    double watermark_fraction = 0.01;
    double activation_reserve_fraction = 0.10;
};

inline void validate(const PolicyConfig& c) {
    require(c.max_batch_size >= 1, "policy: max_batch_size must be >= 1");
    require(c.max_tokens_per_iter >= 1, "policy: max_tokens_per_iter must be >= 1");
    require(c.chunk_size >= 1, "policy: chunk_size must be >= 1");
    require(c.block_size >= 1, "policy: block_size must be >= 1");
}

/// Per-request progress while it lives inside one replica. A preempted
/// request restarts with a recompute prefill over its prompt plus everything
/// it already emitted; completing any prefill pass emits one token.
struct RequestState {
    Request req;
    std::int64_t prefill_target = 0;  // tokens to process in the current prefill pass
    std::int64_t prefill_done = 0;
    std::int64_t emitted = 0;         // output tokens produced so far
    std::int64_t kv_context = 0;      // tokens materialized in KV right now
    std::int64_t restarts = 0;

    double first_scheduled_time = -1.0;
    double first_token_time = -1.0;
    double completion_time = -1.0;
    std::vector<double> emission_times;

    bool prefill_complete() const { return prefill_done >= prefill_target; }
    bool finished() const { return emitted >= req.decode_tokens; }
};

struct PrefillEntry {
    RequestState* request;
    std::int64_t chunk_tokens;
    std::int64_t prior_context;  // KV already built from earlier chunks of this pass
};

struct DecodeEntry {
    RequestState* request;
    std::int64_t context_tokens;  // processed context incl. the token produced this step
};

struct BatchPlan {
    std::vector<PrefillEntry> prefills;
    std::vector<DecodeEntry> decodes;

    bool empty() const { return prefills.empty() && decodes.empty(); }
    std::int64_t batch_size() const {
        return static_cast<std::int64_t>(prefills.size() + decodes.size());
    }
    std::int64_t total_current_tokens() const {
        std::int64_t t = static_cast<std::int64_t>(decodes.size());
        for (const auto& p : prefills) t += p.chunk_tokens;
        return t;
    }
    BatchComposition composition() const {
        BatchComposition c;
        for (const auto& p : prefills) {
            c.prefill_lengths.push_back(p.chunk_tokens);
            c.prefill_prior_context.push_back(p.prior_context);
        }
        for (const auto& d : decodes) c.decode_context_lengths.push_back(d.context_tokens);
        return c;
    }
};

/// Replica-tier scheduler: batching policy + paged KV memory management.
/// schedule_iteration() both plans the batch and performs the allocations,
/// so every scheduled token has its block before execution starts.
class ReplicaScheduler {
public:
    ReplicaScheduler() = default;
    ReplicaScheduler(PolicyConfig cfg, MemoryPlan plan)
        : cfg_(cfg), plan_(plan), mem_(plan, cfg.policy == SchedulerPolicy::LightLLM) {}

    const BlockManager& memory() const { return mem_; }
    const MemoryPlan& memory_plan() const { return plan_; }
    const PolicyConfig& config() const { return cfg_; }

    void enqueue(std::shared_ptr<RequestState> r) {
        const std::int64_t need =
            mem_.units_for_tokens(r->req.prefill_tokens + r->req.decode_tokens);
        require(need <= mem_.total_units(),
                "request " + std::to_string(r->req.id) + " needs " + std::to_string(need) +
                    " KV units but replica capacity is " + std::to_string(mem_.total_units()) +
                    " (model/config cannot serve this request)");
        r->prefill_target = r->req.prefill_tokens + r->emitted;
        insert_sorted(waiting_, std::move(r));
    }

    std::size_t outstanding() const {
        std::size_t n = waiting_.size();
        for (const auto& r : running_)
            if (!r->finished()) ++n;
        return n;
    }
    bool has_work() const {
        if (!waiting_.empty()) return true;
        for (const auto& r : running_)
            if (!r->finished()) return true;
        return false;
    }

    std::size_t preemption_count() const { return preemptions_; }

    /// Members of the in-flight request-level batch (FasterTransformer only).
    std::vector<std::int64_t> ft_member_ids() const {
        std::vector<std::int64_t> ids;
        if (ft_inflight_)
            for (const auto& r : running_) ids.push_back(r->req.id);
        return ids;
    }

    /// The engine sets the clock before scheduling so first-schedule times
    /// land on metric records.
    void set_now(double now) { now_ = now; }

    BatchPlan schedule_iteration() {
        planned_.clear();
        switch (cfg_.policy) {
            case SchedulerPolicy::FasterTransformer: return schedule_ft();
            case SchedulerPolicy::VLLM: return schedule_vllm();
            case SchedulerPolicy::OrcaPlus:
            case SchedulerPolicy::LightLLM: return schedule_orca();
            case SchedulerPolicy::SarathiServe: return schedule_sarathi();
        }
        throw InternalError("schedule_iteration: bad policy");
    }

    /// Advances progress for a completed batch; returns requests finished now.
    std::vector<std::shared_ptr<RequestState>> complete_iteration(const BatchPlan& plan,
                                                                  double now) {
        std::vector<std::shared_ptr<RequestState>> done;
        for (const auto& pe : plan.prefills) {
            RequestState* r = pe.request;
            r->prefill_done += pe.chunk_tokens;
            r->kv_context = r->prefill_done;
            internal_check(r->prefill_done <= r->prefill_target,
                           "prefill progressed past its target");
            if (r->prefill_complete()) emit_token(*r, now);
        }
        for (const auto& de : plan.decodes) {
            RequestState* r = de.request;
            r->kv_context = de.context_tokens;
            emit_token(*r, now);
        }
        for (auto it = running_.begin(); it != running_.end();) {
            if ((*it)->finished()) {
                mem_.release((*it)->req.id);
                done.push_back(*it);
                // FT freezes membership until the whole batch drains
                it = ft_inflight_ ? std::next(it) : running_.erase(it);
            } else {
                ++it;
            }
        }
        if (ft_inflight_) {
            bool all_done = true;
            for (const auto& r : running_)
                if (!r->finished()) all_done = false;
            if (all_done) {
                running_.clear();
                ft_inflight_ = false;
            }
        }
        return done;
    }

private:
    static bool before(const std::shared_ptr<RequestState>& a,
                       const std::shared_ptr<RequestState>& b) {
        if (a->req.arrival_time != b->req.arrival_time)
            return a->req.arrival_time < b->req.arrival_time;
        return a->req.id < b->req.id;
    }

    static void insert_sorted(std::deque<std::shared_ptr<RequestState>>& q,
                              std::shared_ptr<RequestState> r) {
        auto it = std::upper_bound(q.begin(), q.end(), r, before);
        q.insert(it, std::move(r));
    }

    void insert_sorted_running(std::shared_ptr<RequestState> r) {
        auto it = std::upper_bound(running_.begin(), running_.end(), r, before);
        running_.insert(it, std::move(r));
    }

    void emit_token(RequestState& r, double now) {
        internal_check(!r.finished(), "emit_token on finished request");
        r.emitted += 1;
        r.emission_times.push_back(now);
        if (r.first_token_time < 0) r.first_token_time = now;
        if (r.finished()) r.completion_time = now;
    }

    void mark_scheduled(RequestState& r) {
        if (r.first_scheduled_time < 0) r.first_scheduled_time = now_;
        planned_.insert(&r);
    }

    /// Free-and-restart preemption of the latest-arrived running request not
    /// already planned in the batch being formed. Null if none is eligible.
    RequestState* preempt_latest() {
        for (auto it = running_.rbegin(); it != running_.rend(); ++it) {
            if (planned_.count(it->get())) continue;
            std::shared_ptr<RequestState> victim = *it;
            running_.erase(std::next(it).base());
            mem_.release(victim->req.id);
            victim->kv_context = 0;
            victim->prefill_done = 0;
            victim->prefill_target = victim->req.prefill_tokens + victim->emitted;
            victim->restarts += 1;
            ++preemptions_;
            RequestState* raw = victim.get();
            insert_sorted(waiting_, std::move(victim));
            return raw;
        }
        return nullptr;
    }

    /// Reserve KV for a decode step of `r`, preempting latest-arrived running
    /// requests as needed. False if `r` itself got preempted (or nothing can
    /// be evicted), in which case the step is skipped this iteration.
    bool ensure_decode_memory(RequestState& r) {
        while (!mem_.try_reserve(r.req.id, r.kv_context + 1)) {
            RequestState* victim = preempt_latest();
            if (victim == nullptr || victim == &r) return false;
        }
        return true;
    }

    /// Admission/chunk reservation for a prefill. With `use_watermark`, the
    /// reserve must stay intact while other requests are running; with
    /// `allow_preempt`, running requests are restarted from the back to make
    /// room (the vLLM admission rule). False leaves `r` unadmitted.
    bool admit_reserve(RequestState& r, std::int64_t target_tokens, bool allow_preempt,
                       bool use_watermark) {
        auto fits = [&] {
            const std::int64_t need = mem_.shortfall(r.req.id, target_tokens);
            const std::int64_t floor =
                (use_watermark && !running_.empty()) ? mem_.watermark_units() : 0;
            return mem_.free_units() - need >= floor;
        };
        while (!fits()) {
            if (!allow_preempt) return false;
            RequestState* victim = preempt_latest();
            if (victim == nullptr || victim == &r) return false;
        }
        return mem_.try_reserve(r.req.id, target_tokens);
    }

    // --- policies -----------------------------------------------------------

    BatchPlan schedule_ft() {
        BatchPlan plan;
        if (!ft_inflight_) {
            // form a request-level batch, reserving each member's full final
            // context up front; the batch then runs to completion unchanged
            while (!waiting_.empty() &&
                   static_cast<std::int64_t>(running_.size()) < cfg_.max_batch_size) {
                auto head = waiting_.front();
                const std::int64_t final_ctx =
                    head->prefill_target + (head->req.decode_tokens - head->emitted);
                if (!mem_.try_reserve(head->req.id, final_ctx)) break;
                waiting_.pop_front();
                insert_sorted_running(head);
            }
            if (running_.empty()) return plan;
            ft_inflight_ = true;
        }
        // prompts run one member per iteration, then decodes in lockstep
        for (auto& r : running_) {
            if (!r->finished() && !r->prefill_complete()) {
                mark_scheduled(*r);
                plan.prefills.push_back(
                    {r.get(), r->prefill_target - r->prefill_done, r->prefill_done});
                return plan;
            }
        }
        for (auto& r : running_) {
            if (r->finished()) continue;
            mark_scheduled(*r);
            plan.decodes.push_back({r.get(), r->kv_context + 1});
        }
        return plan;
    }

    BatchPlan schedule_vllm() {
        BatchPlan plan;
        // eager prefill priority: admit waiting prompts while memory pressure
        // allows, preempting latest-arrived running requests below the
        // watermark; decodes pause whenever a prefill batch forms
        std::int64_t token_budget = cfg_.max_tokens_per_iter;
        while (!waiting_.empty() &&
               static_cast<std::int64_t>(running_.size()) < cfg_.max_batch_size) {
            auto head = waiting_.front();
            const std::int64_t prompt = head->prefill_target;
            const bool alone = prompt > cfg_.max_tokens_per_iter;  // over-long prompt: own batch
            if (alone && !plan.prefills.empty()) break;
            if (!alone && prompt > token_budget) break;
            if (!admit_reserve(*head, prompt, /*allow_preempt=*/true, /*use_watermark=*/true))
                break;
            erase_from_waiting(head);
            insert_sorted_running(head);
            mark_scheduled(*head);
            plan.prefills.push_back({head.get(), prompt, 0});
            token_budget -= std::min(prompt, token_budget);
            if (alone || token_budget == 0) break;
        }
        if (!plan.prefills.empty()) return plan;

        schedule_decodes(plan, cfg_.max_batch_size, nullptr);
        return plan;
    }

    BatchPlan schedule_orca() {
        BatchPlan plan;
        std::int64_t token_budget = cfg_.max_tokens_per_iter;
        // iteration-level batching: full prompts admitted first, then ongoing
        // decodes share the same token budget
        while (!waiting_.empty() &&
               static_cast<std::int64_t>(running_.size()) < cfg_.max_batch_size) {
            auto head = waiting_.front();
            const std::int64_t prompt = head->prefill_target;
            const bool alone = prompt > cfg_.max_tokens_per_iter;
            if (alone && !plan.prefills.empty()) break;
            if (!alone && prompt > token_budget) break;
            if (!admit_reserve(*head, prompt, /*allow_preempt=*/false, /*use_watermark=*/true))
                break;
            erase_from_waiting(head);
            insert_sorted_running(head);
            mark_scheduled(*head);
            plan.prefills.push_back({head.get(), prompt, 0});
            token_budget -= std::min(prompt, token_budget);
            if (alone) return plan;  // over-long prompt gets the iteration to itself
            if (token_budget == 0) break;
        }
        schedule_decodes(plan, cfg_.max_batch_size, &token_budget);
        return plan;
    }

    BatchPlan schedule_sarathi() {
        BatchPlan plan;
        std::int64_t token_budget = cfg_.chunk_size;
        // hybrid batches: all current decodes first ...
        schedule_decodes(plan, cfg_.max_batch_size, &token_budget);
        // ... then partial prefill chunks fill the remaining budget; ongoing
        // prefills continue before new requests are admitted
        for (std::size_t i = 0; i < running_.size(); ++i) {
            if (token_budget < 1 || plan.batch_size() >= cfg_.max_batch_size) break;
            auto r = running_[i];
            if (r->finished() || r->prefill_complete()) continue;
            const std::int64_t chunk =
                std::min(token_budget, r->prefill_target - r->prefill_done);
            if (!admit_reserve(*r, r->prefill_done + chunk, /*allow_preempt=*/false,
                               /*use_watermark=*/false))
                break;
            mark_scheduled(*r);
            plan.prefills.push_back({r.get(), chunk, r->prefill_done});
            token_budget -= chunk;
        }
        while (token_budget > 0 && !waiting_.empty() &&
               static_cast<std::int64_t>(running_.size()) < cfg_.max_batch_size &&
               plan.batch_size() < cfg_.max_batch_size) {
            auto head = waiting_.front();
            const std::int64_t chunk = std::min(token_budget, head->prefill_target);
            if (!admit_reserve(*head, chunk, /*allow_preempt=*/false, /*use_watermark=*/true))
                break;
            erase_from_waiting(head);
            insert_sorted_running(head);
            mark_scheduled(*head);
            plan.prefills.push_back({head.get(), chunk, 0});
            token_budget -= chunk;
        }
        internal_check(plan.total_current_tokens() <= cfg_.chunk_size,
                       "sarathi: token budget exceeded");
        return plan;
    }

    /// Adds decode entries for running, prefill-complete requests in FCFS
    /// order, reserving a slot for each next token. Skips (or restarts)
    /// requests whose memory cannot be secured.
    void schedule_decodes(BatchPlan& plan, std::int64_t max_entries, std::int64_t* token_budget) {
        for (std::size_t i = 0; i < running_.size();) {
            auto r = running_[i];
            if (r->finished() || !r->prefill_complete() || planned_.count(r.get())) {
                ++i;
                continue;
            }
            if (plan.batch_size() >= max_entries) break;
            if (token_budget && *token_budget < 1) break;
            if (!ensure_decode_memory(*r)) {
                // r was preempted (or nothing evictable): position i now holds
                // a different request, or r is simply skipped this iteration
                if (i < running_.size() && running_[i] == r) ++i;
                continue;
            }
            mark_scheduled(*r);
            plan.decodes.push_back({r.get(), r->kv_context + 1});
            if (token_budget) *token_budget -= 1;
            // preemptions may have removed entries; continue after r
            std::size_t pos = 0;
            while (pos < running_.size() && running_[pos] != r) ++pos;
            i = pos + 1;
        }
    }

    void erase_from_waiting(const std::shared_ptr<RequestState>& r) {
        auto it = std::find(waiting_.begin(), waiting_.end(), r);
        internal_check(it != waiting_.end(), "request not in waiting queue");
        waiting_.erase(it);
    }

    PolicyConfig cfg_;
    MemoryPlan plan_;
    BlockManager mem_;
    double now_ = 0.0;
    std::size_t preemptions_ = 0;
    bool ft_inflight_ = false;
    std::deque<std::shared_ptr<RequestState>> waiting_;   // (arrival, id) order
    std::vector<std::shared_ptr<RequestState>> running_;  // (arrival, id) order
    std::unordered_set<RequestState*> planned_;           // members of the batch being formed
};

/// Global-tier request routing.
class Router {
public:
    Router(RoutingPolicy policy, std::size_t num_replicas, std::int64_t deferred_threshold)
        : policy_(policy), num_replicas_(num_replicas), threshold_(deferred_threshold) {
        require(num_replicas_ >= 1, "router: need at least one replica");
        require(threshold_ >= 1, "router: deferred threshold must be >= 1");
    }

    /// Routes one request; returns the replica index, or nullopt when the
    /// deferred policy holds it in the global pool.
    template <typename OutstandingFn>
    std::optional<std::size_t> route(std::shared_ptr<RequestState> r,
                                     OutstandingFn&& outstanding) {
        switch (policy_) {
            case RoutingPolicy::RoundRobin: {
                std::size_t idx = rr_next_;
                rr_next_ = (rr_next_ + 1) % num_replicas_;
                return idx;
            }
            case RoutingPolicy::LeastOutstanding: {
                std::size_t best = 0;
                std::size_t best_count = outstanding(std::size_t(0));
                for (std::size_t i = 1; i < num_replicas_; ++i) {
                    std::size_t c = outstanding(i);
                    if (c < best_count) {
                        best = i;
                        best_count = c;
                    }
                }
                return best;
            }
            case RoutingPolicy::Deferred:
                pool_.push_back(std::move(r));
                return std::nullopt;
        }
        throw InternalError("route: bad policy");
    }

    /// Deferred policy: assigns pooled requests to replicas whose outstanding
    /// count dropped below the threshold, least-loaded first.
    template <typename OutstandingFn>
    std::vector<std::pair<std::size_t, std::shared_ptr<RequestState>>> drain(
        OutstandingFn&& outstanding) {
        std::vector<std::pair<std::size_t, std::shared_ptr<RequestState>>> out;
        if (policy_ != RoutingPolicy::Deferred || pool_.empty()) return out;
        std::vector<std::int64_t> counts(num_replicas_);
        for (std::size_t i = 0; i < num_replicas_; ++i)
            counts[i] = static_cast<std::int64_t>(outstanding(i));
        while (!pool_.empty()) {
            std::size_t best = num_replicas_;
            for (std::size_t i = 0; i < num_replicas_; ++i)
                if (counts[i] < threshold_ && (best == num_replicas_ || counts[i] < counts[best]))
                    best = i;
            if (best == num_replicas_) break;
            out.emplace_back(best, pool_.front());
            pool_.pop_front();
            counts[best] += 1;
        }
        return out;
    }

    std::size_t pooled() const { return pool_.size(); }

private:
    RoutingPolicy policy_;
    std::size_t num_replicas_;
    std::int64_t threshold_;
    std::size_t rr_next_ = 0;
    std::deque<std::shared_ptr<RequestState>> pool_;
};

/// Makespan of a synchronous pipeline: stage s starts microbatch m only after
/// stage s-1 finished m and stage s finished m-1. Stages are homogeneous, so
/// each microbatch costs its own time on every stage.
inline double pipeline_makespan(const std::vector<double>& microbatch_times,
                                std::int64_t num_stages) {
    require(num_stages >= 1, "pipeline_makespan: need at least one stage");
    std::vector<double> finish(microbatch_times.size(), 0.0);
    for (std::int64_t s = 0; s < num_stages; ++s) {
        double prev = 0.0;  // finish of the previous microbatch on this stage
        for (std::size_t m = 0; m < microbatch_times.size(); ++m) {
            const double start = std::max(finish[m], prev);
            prev = start + microbatch_times[m];
            finish[m] = prev;
        }
    }
    return finish.empty() ? 0.0 : finish.back();
}

}  // namespace servesim
