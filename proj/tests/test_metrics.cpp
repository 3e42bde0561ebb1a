#include "doctest.h"
#include "servesim/metrics.hpp"

#include <filesystem>
#include <random>

using namespace servesim;

namespace {

RequestRecord record(double arrival, double scheduled, double first_token, double completion,
                     std::int64_t decode_tokens) {
    RequestRecord r;
    r.id = 0;
    r.arrival = arrival;
    r.first_scheduled = scheduled;
    r.first_token = first_token;
    r.completion = completion;
    r.prefill_tokens = 10;
    r.decode_tokens = decode_tokens;
    r.emission_times.push_back(first_token);
    for (std::int64_t i = 1; i < decode_tokens; ++i)
        r.emission_times.push_back(first_token + 0.1 * static_cast<double>(i));
    r.completion = r.emission_times.back();
    return r;
}

}  // namespace

TEST_CASE("normalized latency is end-to-end seconds per output token") {
    auto r = record(0.0, 0.5, 2.0, 10.0, 5);
    r.emission_times = {2.0, 4.0, 6.0, 8.0, 10.0};
    r.completion = 10.0;
    CHECK(normalized_latency(r) == doctest::Approx(2.0));
    // doubling both latency and output length leaves it unchanged
    auto r2 = record(0.0, 0.5, 2.0, 20.0, 10);
    r2.emission_times.assign(10, 0.0);
    for (int i = 0; i < 10; ++i) r2.emission_times[i] = 2.0 * (i + 1);
    r2.completion = 20.0;
    CHECK(normalized_latency(r2) == doctest::Approx(2.0));
}

TEST_CASE("single-token request with zero delay: normalized latency equals ttft") {
    auto r = record(0.0, 0.0, 1.5, 1.5, 1);
    auto m = request_metrics(r);
    CHECK(m.normalized_latency == doctest::Approx(m.ttft));
    CHECK(m.tbt_samples.empty());
}

TEST_CASE("static mode excludes the scheduling delay") {
    auto r = record(0.0, 3.0, 4.0, 6.0, 2);
    r.emission_times = {4.0, 6.0};
    r.completion = 6.0;
    CHECK(normalized_latency(r, false) == doctest::Approx(3.0));
    CHECK(normalized_latency(r, true) == doctest::Approx(1.5));
}

TEST_CASE("percentile is nearest-rank") {
    std::vector<double> v = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    CHECK(percentile(v, 0.5) == 5);
    CHECK(percentile(v, 0.99) == 10);
    CHECK(percentile(v, 0.90) == 9);
    CHECK(percentile({42.0}, 0.01) == 42.0);
    CHECK(percentile({42.0}, 1.0) == 42.0);
    CHECK_THROWS_AS(percentile(std::vector<double>{}, 0.5), Error);
}

TEST_CASE("percentile is monotone in q and permutation invariant") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> val(0.0, 100.0);
    std::vector<double> v(57);
    for (auto& x : v) x = val(rng);
    double prev = -1;
    for (double q : {0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 1.0}) {
        double p = percentile(v, q);
        CHECK(p >= prev);
        prev = p;
    }
    auto shuffled = v;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(percentile(v, 0.9) == percentile(shuffled, 0.9));
}

TEST_CASE("tbt sample count is decode_tokens minus one") {
    auto r = record(0.0, 0.1, 1.0, 2.0, 7);
    auto m = request_metrics(r);
    CHECK(m.tbt_samples.size() == 6);
}

TEST_CASE("mfu: idle cluster scores zero and a busy one stays within [0,1]") {
    SimulationResult idle;
    idle.simulated_span = 0.0;
    CHECK(mfu(idle) == 0.0);

    SimulationResult busy;
    busy.simulated_span = 10.0;
    busy.total_model_flops = 5e14;
    busy.peak_device_flops = 1e14;
    busy.num_devices = 1;
    CHECK(mfu(busy) == doctest::Approx(0.5));
    CHECK(mfu(busy) <= 1.0);
}

TEST_CASE("batch flops match a hand count on a toy descriptor set") {
    // one block: hidden 4, q=kv=2 heads, head_dim 2, mlp 8, 2-byte elements
    ModelSpec s;
    s.name = "toy";
    s.num_layers = 1;
    s.hidden_dim = 4;
    s.num_q_heads = 2;
    s.num_kv_heads = 2;
    s.head_dim = 2;
    s.mlp_dim = 8;
    s.vocab_size = 10;
    s.max_context = 16;
    s.param_bytes_per_element = 2;
    auto ops = derive_operators(s, {1, 1, 1});
    BatchComposition batch;
    batch.prefill_lengths = {4};
    batch.prefill_prior_context = {0};
    const double n = 4;
    // hand count: qkv 2n*4*12, out 2n*4*4, up 2n*4*8, down 2n*8*4, act n*8,
    // add_norm 8n*4, prefill attention 4*n*n*4
    const double expect = 2 * n * 4 * 12 + 2 * n * 4 * 4 + 2 * n * 4 * 8 + 2 * n * 8 * 4 +
                          n * 8 + 8 * n * 4 + 4 * n * n * 4;
    CHECK(batch_device_flops(ops, batch) == doctest::Approx(expect));
}

TEST_CASE("metrics csv round-trips losslessly") {
    MetricsReport rep;
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> t(0.0, 100.0);
    for (int i = 0; i < 50; ++i) {
        auto r = record(t(rng), t(rng), t(rng) + 100, t(rng) + 200, 1 + i % 9);
        r.id = i;
        rep.requests.push_back(request_metrics(r));
    }
    auto text = request_metrics_to_csv(rep);
    auto back = request_metrics_from_csv(text);
    REQUIRE(back.size() == rep.requests.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].id == rep.requests[i].id);
        CHECK(back[i].scheduling_delay == rep.requests[i].scheduling_delay);
        CHECK(back[i].ttft == rep.requests[i].ttft);
        CHECK(back[i].e2e_latency == rep.requests[i].e2e_latency);
        CHECK(back[i].normalized_latency == rep.requests[i].normalized_latency);
    }
}

TEST_CASE("export writes request table and summary; bad paths are errors") {
    MetricsReport rep;
    rep.requests.push_back(request_metrics(record(0.0, 0.1, 1.0, 2.0, 3)));
    rep.ttft = summarize({1.0});
    auto dir = std::filesystem::temp_directory_path() / "servesim_metrics_test";
    std::filesystem::create_directories(dir);
    auto files = export_metrics(rep, dir.string(), "csv");
    CHECK(files.size() == 2);
    for (const auto& f : files) CHECK(std::filesystem::exists(f));
    auto jfiles = export_metrics(rep, dir.string(), "json");
    CHECK(jfiles.size() == 2);
    CHECK_THROWS_AS(export_metrics(rep, "/nonexistent_dir_zzz/sub", "csv"), Error);
    CHECK_THROWS_AS(export_metrics(rep, dir.string(), "yaml"), Error);
    std::filesystem::remove_all(dir);
}
