#include "doctest.h"
#include "servesim/workload.hpp"

#include <cmath>

using namespace servesim;

TEST_CASE("load_trace parses, validates and sorts by arrival") {
    std::string text =
        "request_id,arrival_time_s,prefill_tokens,decode_tokens\n"
        "2,0.7,10,4\n"
        "0,0.1,30,2\n"
        "1,0.4,20,8\n";
    auto reqs = load_trace(text);
    REQUIRE(reqs.size() == 3);
    CHECK(reqs[0].id == 0);
    CHECK(reqs[1].id == 1);
    CHECK(reqs[2].id == 2);
    CHECK(reqs[2].arrival_time == 0.7);
}

TEST_CASE("load_trace rejects zero decode tokens with a line number") {
    std::string text =
        "request_id,arrival_time_s,prefill_tokens,decode_tokens\n"
        "0,0.0,10,1\n"
        "1,0.5,10,0\n";
    CHECK_THROWS_WITH_AS(load_trace(text), doctest::Contains("line 3"), Error);
}

TEST_CASE("load_trace without the arrival column leaves arrivals unset") {
    std::string text =
        "request_id,prefill_tokens,decode_tokens\n"
        "0,10,4\n"
        "1,20,8\n";
    auto reqs = load_trace(text);
    REQUIRE(reqs.size() == 2);
    CHECK_FALSE(reqs[0].has_arrival());
}

TEST_CASE("trace save/load round-trips") {
    std::string text =
        "request_id,arrival_time_s,prefill_tokens,decode_tokens\n"
        "0,0.125,10,4\n"
        "1,0.5,20,8\n";
    auto reqs = load_trace(text);
    CHECK(save_trace(reqs) == text);
}

TEST_CASE("poisson arrivals: mean gap near 1/rate, strictly increasing, seeded") {
    std::vector<Request> reqs(10000, Request{0, 0.0, 10, 10});
    for (std::size_t i = 0; i < reqs.size(); ++i) reqs[i].id = static_cast<std::int64_t>(i);
    auto a = poisson_arrivals(reqs, 2.0, 99);
    double prev = 0.0;
    double total = 0.0;
    for (const auto& r : a) {
        CHECK(r.arrival_time > prev);
        total += r.arrival_time - prev;
        prev = r.arrival_time;
    }
    const double mean_gap = total / static_cast<double>(a.size());
    CHECK(std::fabs(mean_gap - 0.5) / 0.5 < 0.05);

    auto b = poisson_arrivals(reqs, 2.0, 99);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].arrival_time == b[i].arrival_time);
}

TEST_CASE("cap_total_length truncates decode first, then prefill") {
    auto capped = cap_total_length({{0, 0.0, 3000, 2000}}, 4096);
    CHECK(capped[0].prefill_tokens == 3000);
    CHECK(capped[0].decode_tokens == 1096);

    capped = cap_total_length({{0, 0.0, 5000, 10}}, 4096);
    CHECK(capped[0].prefill_tokens == 4086);
    CHECK(capped[0].decode_tokens == 10);

    capped = cap_total_length({{0, 0.0, 100, 50}}, 4096);
    CHECK(capped[0].prefill_tokens == 100);
    CHECK(capped[0].decode_tokens == 50);
}

TEST_CASE("cap_total_length is idempotent") {
    std::vector<Request> reqs;
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::int64_t> len(1, 10000);
    for (int i = 0; i < 500; ++i) reqs.push_back({i, 0.0, len(rng), len(rng)});
    auto once = cap_total_length(reqs, 4096);
    auto twice = cap_total_length(once, 4096);
    for (std::size_t i = 0; i < once.size(); ++i) {
        CHECK(once[i].prefill_tokens == twice[i].prefill_tokens);
        CHECK(once[i].decode_tokens == twice[i].decode_tokens);
        CHECK(once[i].prefill_tokens + once[i].decode_tokens <= 4096);
        CHECK(once[i].prefill_tokens >= 1);
        CHECK(once[i].decode_tokens >= 1);
    }
}

TEST_CASE("compute_stats matches hand-computed values") {
    std::vector<Request> reqs = {{0, 0.0, 10, 10}, {1, 0.0, 20, 10}, {2, 0.0, 30, 10}};
    auto s = compute_stats(reqs);
    CHECK(s.query_count == 3);
    CHECK(s.prefill.mean == doctest::Approx(20.0));
    CHECK(s.prefill.median == 20.0);
    CHECK(s.decode.mean == doctest::Approx(10.0));
    CHECK(s.pd_ratio_median == doctest::Approx(2.0));  // ratios {1,2,3}
}

TEST_CASE("compute_stats: single request makes mean, median and p90 equal") {
    auto s = compute_stats({{0, 0.0, 123, 7}});
    CHECK(s.prefill.mean == 123.0);
    CHECK(s.prefill.median == 123.0);
    CHECK(s.prefill.p90 == 123.0);
}

TEST_CASE("compute_stats is permutation invariant and rejects empty traces") {
    std::vector<Request> reqs;
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<std::int64_t> len(1, 4096);
    for (int i = 0; i < 100; ++i) reqs.push_back({i, 0.0, len(rng), len(rng)});
    auto a = compute_stats(reqs);
    std::shuffle(reqs.begin(), reqs.end(), rng);
    auto b = compute_stats(reqs);
    CHECK(a.prefill.median == b.prefill.median);
    CHECK(a.decode.p90 == b.decode.p90);
    CHECK(a.pd_ratio_stddev == b.pd_ratio_stddev);
    CHECK_THROWS_AS(compute_stats({}), Error);
}

TEST_CASE("synth_trace: single-bin histogram repeats the bin") {
    DistConfig d;
    d.kind = "histogram";
    d.bins.push_back({100, 50, 1.0});
    auto reqs = synth_trace(d, 25, 1);
    REQUIRE(reqs.size() == 25);
    for (const auto& r : reqs) {
        CHECK(r.prefill_tokens == 100);
        CHECK(r.decode_tokens == 50);
    }
}

TEST_CASE("synth_trace is deterministic per seed and empty for n=0") {
    DistConfig d;
    d.kind = "lognormal";
    d.prefill_median = 400;
    d.prefill_sigma = 1.0;
    d.decode_median = 140;
    d.decode_sigma = 0.9;
    auto a = synth_trace(d, 100, 5);
    auto b = synth_trace(d, 100, 5);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].prefill_tokens == b[i].prefill_tokens);
        CHECK(a[i].decode_tokens == b[i].decode_tokens);
    }
    CHECK(synth_trace(d, 0, 5).empty());
    CHECK_THROWS_AS(compute_stats(synth_trace(d, 0, 5)), Error);
}

TEST_CASE("lognormal tuned to chat-like medians lands near its targets") {
    // medians 417/139 with sigmas fit from the p90/median ratios; capped 4k
    DistConfig d;
    d.kind = "lognormal";
    d.prefill_median = 417;
    d.prefill_sigma = 1.086;
    d.decode_median = 139;
    d.decode_sigma = 0.973;
    d.max_total = 4096;
    auto reqs = synth_trace(d, 50000, 11);
    auto s = compute_stats(reqs);
    CHECK(std::fabs(s.prefill.median - 417) / 417 < 0.15);
    CHECK(std::fabs(s.prefill.p90 - 1678) / 1678 < 0.15);
    CHECK(std::fabs(s.decode.median - 139) / 139 < 0.15);
    CHECK(std::fabs(s.decode.p90 - 484) / 484 < 0.15);
    CHECK(std::fabs(s.prefill.mean - 686) / 686 < 0.15);
    CHECK(std::fabs(s.decode.mean - 197) / 197 < 0.15);
}
