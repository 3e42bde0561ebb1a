#include "doctest.h"
#include "servesim/scheduler.hpp"

#include <random>

using namespace servesim;

namespace {

MemoryPlan roomy_plan() {
    MemoryPlan p;
    p.block_size = 16;
    p.num_blocks = 4096;
    p.kv_capacity_tokens = p.block_size * p.num_blocks;
    p.watermark_blocks = 4;
    return p;
}

MemoryPlan tight_plan(std::int64_t blocks, std::int64_t watermark) {
    MemoryPlan p;
    p.block_size = 16;
    p.num_blocks = blocks;
    p.kv_capacity_tokens = p.block_size * blocks;
    p.watermark_blocks = watermark;
    return p;
}

std::shared_ptr<RequestState> make_request(std::int64_t id, double arrival, std::int64_t prefill,
                                           std::int64_t decode) {
    auto r = std::make_shared<RequestState>();
    r->req = Request{id, arrival, prefill, decode};
    return r;
}

// one schedule+complete cycle at the given time
BatchPlan step(ReplicaScheduler& s, double now) {
    s.set_now(now);
    auto plan = s.schedule_iteration();
    if (!plan.empty()) s.complete_iteration(plan, now + 0.01);
    return plan;
}

}  // namespace

TEST_CASE("plan_memory: toy free space of 1000 bytes at 10 B/token gives 6 blocks, 96 tokens") {
    // kv bytes/token/device = 2 * 1 layer * 1 kv head * 5 head_dim * 1 B = 10
    ModelSpec s;
    s.name = "tiny";
    s.num_layers = 1;
    s.hidden_dim = 5;
    s.num_q_heads = 1;
    s.num_kv_heads = 1;
    s.head_dim = 5;
    s.mlp_dim = 8;
    s.vocab_size = 10;
    s.max_context = 64;
    s.param_bytes_per_element = 1;
    REQUIRE(kv_bytes_per_token_per_device(s, {1, 1, 1}) == 10);

    DeviceProfile d;
    d.sku_name = "T";
    d.peak_flops = 1e12;
    d.mem_bandwidth = 1e12;
    d.link_bandwidth = 1e11;
    d.kernel_overhead = 1e-6;
    d.device_mem = static_cast<double>(param_bytes_per_device(s, {1, 1, 1})) + 1000.0;

    auto plan = plan_memory(s, {1, 1, 1}, d, 16, 0.0, 0.0);
    CHECK(plan.num_blocks == 6);
    CHECK(plan.kv_capacity_tokens == 96);
}

TEST_CASE("plan_memory: model that does not fit is an error") {
    ModelSpec s;
    s.name = "tiny";
    s.num_layers = 1;
    s.hidden_dim = 5;
    s.num_q_heads = 1;
    s.num_kv_heads = 1;
    s.head_dim = 5;
    s.mlp_dim = 8;
    s.vocab_size = 10;
    s.max_context = 64;
    s.param_bytes_per_element = 1;
    DeviceProfile d;
    d.sku_name = "T";
    d.peak_flops = 1e12;
    d.mem_bandwidth = 1e12;
    d.link_bandwidth = 1e11;
    d.kernel_overhead = 1e-6;
    d.device_mem = 100.0;  // below the parameter bytes
    CHECK_THROWS_WITH_AS(plan_memory(s, {1, 1, 1}, d, 16), doctest::Contains("insufficient"),
                         Error);
}

TEST_CASE("plan_memory: doubling tp more than doubles token capacity") {
    ModelSpec s;
    s.name = "mid";
    s.num_layers = 8;
    s.hidden_dim = 1024;
    s.num_q_heads = 16;
    s.num_kv_heads = 16;
    s.head_dim = 64;
    s.mlp_dim = 4096;
    s.vocab_size = 32000;
    s.max_context = 4096;
    s.param_bytes_per_element = 2;
    DeviceProfile d;
    d.sku_name = "T";
    d.peak_flops = 1e12;
    d.mem_bandwidth = 1e12;
    d.link_bandwidth = 1e11;
    d.kernel_overhead = 1e-6;
    d.device_mem = 1.5 * static_cast<double>(param_bytes_per_device(s, {1, 1, 1}));
    auto p1 = plan_memory(s, {1, 1, 1}, d, 16, 0.01, 0.0);
    auto p2 = plan_memory(s, {2, 1, 1}, d, 16, 0.01, 0.0);
    CHECK(p2.kv_capacity_tokens > 2 * p1.kv_capacity_tokens);
}

TEST_CASE("router: round robin cycles deterministically") {
    Router r(RoutingPolicy::RoundRobin, 3, 1);
    auto outstanding = [](std::size_t) { return std::size_t(0); };
    std::vector<std::size_t> got;
    for (int i = 0; i < 5; ++i)
        got.push_back(*r.route(make_request(i, 0.0, 1, 1), outstanding));
    CHECK(got == std::vector<std::size_t>{0, 1, 2, 0, 1});
}

TEST_CASE("router: least outstanding picks the minimum, ties to the lowest id") {
    Router r(RoutingPolicy::LeastOutstanding, 3, 1);
    std::vector<std::size_t> counts = {4, 1, 4};
    auto outstanding = [&](std::size_t i) { return counts[i]; };
    CHECK(*r.route(make_request(0, 0.0, 1, 1), outstanding) == 1);
    counts = {2, 2, 5};
    CHECK(*r.route(make_request(1, 0.0, 1, 1), outstanding) == 0);
}

TEST_CASE("router: deferred pools until a replica drops below the threshold") {
    Router r(RoutingPolicy::Deferred, 2, 3);
    std::vector<std::size_t> counts = {3, 3};
    auto outstanding = [&](std::size_t i) { return counts[i]; };
    CHECK_FALSE(r.route(make_request(0, 0.0, 1, 1), outstanding).has_value());
    CHECK(r.drain(outstanding).empty());
    CHECK(r.pooled() == 1);
    counts = {3, 2};
    auto assigned = r.drain(outstanding);
    REQUIRE(assigned.size() == 1);
    CHECK(assigned[0].first == 1);
    CHECK(r.pooled() == 0);
}

TEST_CASE("sarathi: hybrid batch is decodes first, then a chunk filling the budget") {
    PolicyConfig cfg;
    cfg.policy = SchedulerPolicy::SarathiServe;
    cfg.chunk_size = 512;
    cfg.max_batch_size = 128;
    ReplicaScheduler sched(cfg, roomy_plan());

    for (int i = 0; i < 10; ++i) sched.enqueue(make_request(i, i * 0.1, 1, 5));
    step(sched, 1.0);  // all ten prefill (10 tokens) and emit their first token

    sched.enqueue(make_request(100, 1.5, 2000, 5));
    sched.set_now(2.0);
    auto plan = sched.schedule_iteration();
    CHECK(plan.decodes.size() == 10);
    REQUIRE(plan.prefills.size() == 1);
    CHECK(plan.prefills[0].chunk_tokens == 502);
    CHECK(plan.total_current_tokens() == 512);
}

TEST_CASE("sarathi: chunked prefill carries prior context and never exceeds the budget") {
    PolicyConfig cfg;
    cfg.policy = SchedulerPolicy::SarathiServe;
    cfg.chunk_size = 512;
    cfg.max_batch_size = 8;
    ReplicaScheduler sched(cfg, roomy_plan());
    sched.enqueue(make_request(0, 0.0, 1300, 3));
    auto p1 = step(sched, 0.0);
    REQUIRE(p1.prefills.size() == 1);
    CHECK(p1.prefills[0].chunk_tokens == 512);
    CHECK(p1.prefills[0].prior_context == 0);
    auto p2 = step(sched, 0.1);
    CHECK(p2.prefills[0].chunk_tokens == 512);
    CHECK(p2.prefills[0].prior_context == 512);
    auto p3 = step(sched, 0.2);
    CHECK(p3.prefills[0].chunk_tokens == 276);
    CHECK(p3.prefills[0].prior_context == 1024);
    // prefill completion emitted the first token; two decodes remain
    auto p4 = step(sched, 0.3);
    CHECK(p4.decodes.size() == 1);
    CHECK(p4.prefills.empty());
}

TEST_CASE("vllm: waiting prefill below the watermark preempts the latest-arrived runner") {
    PolicyConfig cfg;
    cfg.policy = SchedulerPolicy::VLLM;
    cfg.max_batch_size = 8;
    cfg.max_tokens_per_iter = 4096;
    ReplicaScheduler sched(cfg, tight_plan(10, 2));  // 160 tokens, watermark 2 blocks

    sched.enqueue(make_request(0, 0.0, 100, 10));  // 7 blocks
    auto p1 = step(sched, 0.0);
    REQUIRE(p1.prefills.size() == 1);
    CHECK(sched.memory().allocated_units() == 7);

    sched.enqueue(make_request(1, 0.5, 33, 5));  // needs 3 blocks; only 3 free, floor 2
    sched.set_now(1.0);
    auto p2 = sched.schedule_iteration();
    REQUIRE(p2.prefills.size() == 1);
    CHECK(p2.prefills[0].request->req.id == 1);
    CHECK(sched.preemption_count() == 1);
    CHECK(sched.outstanding() == 2);  // victim back in the waiting queue
}

TEST_CASE("vllm: preempted request restarts with a recompute prefill over prompt plus output") {
    PolicyConfig cfg;
    cfg.policy = SchedulerPolicy::VLLM;
    cfg.max_batch_size = 8;
    cfg.max_tokens_per_iter = 4096;
    ReplicaScheduler sched(cfg, tight_plan(10, 2));

    auto a = make_request(0, 0.0, 100, 10);
    sched.enqueue(a);
    step(sched, 0.0);               // prefill, first token emitted
    step(sched, 0.1);               // one decode
    CHECK(a->emitted == 2);

    sched.enqueue(make_request(1, 0.5, 33, 5));
    step(sched, 1.0);               // admission preempts request 0
    CHECK(a->restarts == 1);
    CHECK(a->kv_context == 0);
    CHECK(a->prefill_target == 102);  // prompt plus the two tokens already emitted
}

TEST_CASE("vllm: decode-only batches resume once no prefill is waiting") {
    PolicyConfig cfg;
    cfg.policy = SchedulerPolicy::VLLM;
    cfg.max_batch_size = 8;
    ReplicaScheduler sched(cfg, roomy_plan());
    sched.enqueue(make_request(0, 0.0, 50, 5));
    sched.enqueue(make_request(1, 0.1, 60, 5));
    auto p1 = step(sched, 0.0);
    CHECK(p1.prefills.size() == 2);
    CHECK(p1.decodes.empty());
    auto p2 = step(sched, 0.2);
    CHECK(p2.prefills.empty());
    CHECK(p2.decodes.size() == 2);
}

TEST_CASE("faster_transformer: batch membership is frozen until every member finishes") {
    PolicyConfig cfg;
    cfg.policy = SchedulerPolicy::FasterTransformer;
    cfg.max_batch_size = 4;
    ReplicaScheduler sched(cfg, roomy_plan());
    sched.enqueue(make_request(0, 0.0, 10, 2));
    sched.enqueue(make_request(1, 0.1, 10, 4));

    auto p1 = step(sched, 0.0);  // member 0 prefill
    auto members = sched.ft_member_ids();
    CHECK(members == std::vector<std::int64_t>{0, 1});
    CHECK(p1.prefills.size() == 1);

    sched.enqueue(make_request(2, 0.2, 10, 2));  // arrives mid-batch
    auto p2 = step(sched, 0.2);                  // member 1 prefill
    CHECK(p2.prefills.size() == 1);
    CHECK(sched.ft_member_ids() == members);

    // decode lockstep until both finish; request 2 must never appear and the
    // membership stays frozen until the closing iteration completes the batch
    for (int i = 0; i < 3; ++i) {
        CHECK(sched.ft_member_ids() == members);
        auto p = step(sched, 0.3 + 0.1 * i);
        for (const auto& de : p.decodes) CHECK(de.request->req.id != 2);
    }
    CHECK(sched.ft_member_ids().empty());  // batch drained
    auto p_final = step(sched, 1.0);       // new batch admits request 2
    REQUIRE(p_final.prefills.size() == 1);
    CHECK(p_final.prefills[0].request->req.id == 2);
}

TEST_CASE("faster_transformer: identical decode batch while members are unfinished") {
    PolicyConfig cfg;
    cfg.policy = SchedulerPolicy::FasterTransformer;
    cfg.max_batch_size = 4;
    ReplicaScheduler sched(cfg, roomy_plan());
    sched.enqueue(make_request(0, 0.0, 4, 5));
    sched.enqueue(make_request(1, 0.1, 4, 5));
    step(sched, 0.0);
    step(sched, 0.1);  // both prefilled now
    auto p1 = step(sched, 0.2);
    auto p2 = step(sched, 0.3);
    REQUIRE(p1.decodes.size() == 2);
    REQUIRE(p2.decodes.size() == 2);
    CHECK(p1.decodes[0].request->req.id == p2.decodes[0].request->req.id);
    CHECK(p1.decodes[1].request->req.id == p2.decodes[1].request->req.id);
}

TEST_CASE("faster_transformer: admission reserves the full final context") {
    PolicyConfig cfg;
    cfg.policy = SchedulerPolicy::FasterTransformer;
    cfg.max_batch_size = 4;
    ReplicaScheduler sched(cfg, tight_plan(6, 0));  // 96 tokens
    sched.enqueue(make_request(0, 0.0, 30, 50));    // final context 80 -> 5 blocks
    sched.enqueue(make_request(1, 0.1, 30, 50));    // does not fit alongside
    auto p = step(sched, 0.0);
    CHECK(sched.ft_member_ids() == std::vector<std::int64_t>{0});
    CHECK(p.prefills.size() == 1);
}

TEST_CASE("orca_plus: prefills take the token budget first, decodes fill the rest") {
    PolicyConfig cfg;
    cfg.policy = SchedulerPolicy::OrcaPlus;
    cfg.max_batch_size = 64;
    cfg.max_tokens_per_iter = 100;
    ReplicaScheduler sched(cfg, roomy_plan());
    for (int i = 0; i < 20; ++i) sched.enqueue(make_request(i, i * 0.01, 1, 5));
    step(sched, 0.0);  // all twenty prefill in one mixed iteration (20 tokens)

    sched.enqueue(make_request(100, 0.5, 95, 5));
    sched.set_now(1.0);
    auto plan = sched.schedule_iteration();
    REQUIRE(plan.prefills.size() == 1);
    CHECK(plan.prefills[0].chunk_tokens == 95);
    CHECK(plan.decodes.size() == 5);  // 100 - 95 leaves room for five decode tokens
    CHECK(plan.total_current_tokens() == 100);
}

TEST_CASE("orca_plus: a prompt longer than the iteration limit runs alone") {
    PolicyConfig cfg;
    cfg.policy = SchedulerPolicy::OrcaPlus;
    cfg.max_batch_size = 64;
    cfg.max_tokens_per_iter = 4096;
    ReplicaScheduler sched(cfg, roomy_plan());
    for (int i = 0; i < 4; ++i) sched.enqueue(make_request(i, i * 0.01, 1, 5));
    step(sched, 0.0);
    sched.enqueue(make_request(9, 0.5, 5000, 2));
    sched.set_now(1.0);
    auto plan = sched.schedule_iteration();
    REQUIRE(plan.prefills.size() == 1);
    CHECK(plan.prefills[0].chunk_tokens == 5000);
    CHECK(plan.decodes.empty());
}

TEST_CASE("lightllm allocates token-granular while orca_plus rounds to blocks") {
    PolicyConfig orca;
    orca.policy = SchedulerPolicy::OrcaPlus;
    PolicyConfig light = orca;
    light.policy = SchedulerPolicy::LightLLM;
    ReplicaScheduler a(orca, roomy_plan()), b(light, roomy_plan());
    a.enqueue(make_request(0, 0.0, 20, 5));
    b.enqueue(make_request(0, 0.0, 20, 5));
    a.set_now(0.0);
    b.set_now(0.0);
    a.schedule_iteration();
    b.schedule_iteration();
    CHECK(a.memory().held_units(0) == 2);    // ceil(20/16) blocks
    CHECK(b.memory().held_units(0) == 20);   // exact tokens
}

TEST_CASE("memory contract: every planned token is covered by an allocation") {
    for (auto policy : {SchedulerPolicy::VLLM, SchedulerPolicy::OrcaPlus,
                        SchedulerPolicy::SarathiServe, SchedulerPolicy::LightLLM,
                        SchedulerPolicy::FasterTransformer}) {
        PolicyConfig cfg;
        cfg.policy = policy;
        cfg.max_batch_size = 16;
        ReplicaScheduler sched(cfg, tight_plan(64, 1));
        std::mt19937_64 rng(77);
        std::uniform_int_distribution<std::int64_t> plen(1, 300), dlen(1, 40);
        for (int i = 0; i < 30; ++i) sched.enqueue(make_request(i, i * 0.01, plen(rng), dlen(rng)));
        bool progressed = true;
        for (int iter = 0; iter < 2000 && sched.has_work() && progressed; ++iter) {
            sched.set_now(iter * 0.1);
            auto plan = sched.schedule_iteration();
            progressed = !plan.empty();
            for (const auto& pe : plan.prefills) {
                auto covered = sched.memory().held_units(pe.request->req.id) *
                               (policy == SchedulerPolicy::LightLLM ? 1 : cfg.block_size);
                CHECK(covered >= pe.prior_context + pe.chunk_tokens);
            }
            for (const auto& de : plan.decodes) {
                auto covered = sched.memory().held_units(de.request->req.id) *
                               (policy == SchedulerPolicy::LightLLM ? 1 : cfg.block_size);
                CHECK(covered >= de.context_tokens);
            }
            CHECK(sched.memory().allocated_units() <= sched.memory().total_units());
            if (!plan.empty()) sched.complete_iteration(plan, iter * 0.1 + 0.05);
        }
        CHECK_FALSE(sched.has_work());  // finite workload drains, nobody starves
    }
}

TEST_CASE("work conservation: room in the batch and memory admits a waiting request") {
    for (auto policy : {SchedulerPolicy::VLLM, SchedulerPolicy::OrcaPlus,
                        SchedulerPolicy::SarathiServe, SchedulerPolicy::LightLLM}) {
        PolicyConfig cfg;
        cfg.policy = policy;
        cfg.max_batch_size = 16;
        ReplicaScheduler sched(cfg, roomy_plan());
        sched.enqueue(make_request(0, 0.0, 40, 4));
        step(sched, 0.0);  // one running decode now
        sched.enqueue(make_request(1, 0.5, 64, 4));
        sched.set_now(1.0);
        auto plan = sched.schedule_iteration();
        bool admitted = false;
        for (const auto& pe : plan.prefills)
            if (pe.request->req.id == 1) admitted = true;
        CHECK(admitted);
    }
}

TEST_CASE("pipeline makespan: one stage is the plain sum, equal stages give the textbook fill") {
    CHECK(pipeline_makespan({0.5}, 1) == doctest::Approx(0.5));
    CHECK(pipeline_makespan({0.2, 0.3}, 1) == doctest::Approx(0.5));
    // two stages, two equal microbatches: fill + drain = 3 slots
    CHECK(pipeline_makespan({1.0, 1.0}, 2) == doctest::Approx(3.0));
    // hand-drawn schedule for 3 microbatches over 2 stages of 1s each: 4s
    CHECK(pipeline_makespan({1.0, 1.0, 1.0}, 2) == doctest::Approx(4.0));
}

TEST_CASE("pipeline makespan is at least the total work of one stage") {
    std::mt19937_64 rng(123);
    std::uniform_real_distribution<double> t(0.01, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> times(1 + trial % 4);
        double total = 0.0;
        for (auto& v : times) {
            v = t(rng);
            total += v;
        }
        const std::int64_t stages = 1 + trial % 3;
        CHECK(pipeline_makespan(times, stages) >= total - 1e-12);
    }
}
