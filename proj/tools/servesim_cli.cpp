// servesim command line: profile -> train -> simulate / search pipeline.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "servesim/config.hpp"
#include "servesim/manifest.hpp"
#include "servesim/metrics.hpp"
#include "servesim/profiler.hpp"
#include "servesim/search.hpp"
#include "servesim/sim.hpp"
#include "servesim/workload.hpp"

using namespace servesim;

namespace {

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, "cannot create output directory: " + dir);
}

/// Streams one line per scheduled batch; the replica event log used for
/// debugging and golden tests.
class EventLogObserver : public SimObserver {
public:
    explicit EventLogObserver(const std::string& path) : out_(path, std::ios::binary) {
        require(out_.good(), "cannot write event log: " + path);
    }
    void on_batch(std::size_t replica, double now, const BatchPlan& plan,
                  const ReplicaScheduler& sched) override {
        out_ << "t=" << fmt_double(now) << " replica=" << replica
             << " tokens=" << plan.total_current_tokens()
             << " kv_used=" << sched.memory().allocated_units() << "/"
             << sched.memory().total_units() << " batch=[";
        bool first = true;
        for (const auto& p : plan.prefills) {
            out_ << (first ? "" : ",") << "p:" << p.request->req.id << ":" << p.chunk_tokens
                 << ":" << p.prior_context;
            first = false;
        }
        for (const auto& d : plan.decodes) {
            out_ << (first ? "" : ",") << "d:" << d.request->req.id << ":" << d.context_tokens;
            first = false;
        }
        out_ << "]\n";
    }

private:
    std::ofstream out_;
};

int cmd_profile(const std::string& model_spec_path, const std::string& device_path,
                const std::string& out, const std::vector<std::int64_t>& tp_degrees,
                std::uint64_t seed) {
    auto spec = load_model_spec_file(model_spec_path);
    auto dev = load_device_file(device_path);
    std::vector<std::int64_t> tps;
    for (auto tp : tp_degrees)
        if (spec.num_kv_heads % tp == 0 && spec.num_layers > 0) tps.push_back(tp);
    require(!tps.empty(), "no requested tp degree divides num_kv_heads");
    auto records = generate_synthetic_profile(spec, dev, tps);
    write_text_file(out, profile_records_to_csv(records));

    RunManifest m;
    m.command = "profile";
    m.inputs = {{"model_spec", model_spec_path}, {"device", device_path}};
    m.seed = seed;
    write_text_file(out + ".manifest.json", m.to_json().dump(2) + "\n");
    std::cout << records.size() << " profile records -> " << out << "\n";
    return 0;
}

int cmd_train(const std::string& profile_path, const std::string& out,
              const std::string& regressor, std::uint64_t seed) {
    auto records = ingest_profile_csv(read_text_file(profile_path));
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.regressor = regressor;
    auto model = train(records, cfg);
    write_text_file(out, model.to_json().dump() + "\n");
    write_text_file(out + ".report.txt", training_report(model));

    RunManifest m;
    m.command = "train";
    m.inputs = {{"profile", profile_path}};
    m.seed = seed;
    write_text_file(out + ".manifest.json", m.to_json().dump(2) + "\n");
    std::cout << model.models().size() << " per-op models -> " << out << "\n";
    return 0;
}

int cmd_simulate(const std::string& cluster_path, const std::string& trace_path,
                 const std::string& estimator_path, const std::string& out_dir,
                 const std::string& format, double qps, std::uint64_t seed, bool static_mode,
                 bool event_log) {
    auto loaded = load_cluster_config(cluster_path);
    auto estimator = EstimatorModel::from_json(load_json_file(estimator_path));
    auto trace = load_trace(read_text_file(trace_path));
    require(!trace.empty(), "trace is empty");
    if (qps > 0.0) {
        trace = poisson_arrivals(std::move(trace), qps, seed);
    } else if (static_mode) {
        for (auto& r : trace) r.arrival_time = 0.0;
    }
    ensure_dir(out_dir);

    SimOptions opts;
    std::unique_ptr<EventLogObserver> log;
    if (event_log) {
        log = std::make_unique<EventLogObserver>(out_dir + "/events.log");
        opts.observer = log.get();
    }
    auto result = run_simulation(loaded.cluster, trace, estimator, opts);
    auto report = build_report(result, static_mode);
    export_metrics(report, out_dir, format);

    RunManifest m;
    m.command = "simulate";
    m.inputs = {{"cluster_config", cluster_path},
                {"model_spec", loaded.model_spec_path},
                {"device", loaded.device_path},
                {"trace", trace_path},
                {"estimator", estimator_path}};
    m.seed = seed;
    m.write(out_dir);
    std::cout << result.requests.size() << " requests simulated, span "
              << fmt_double(result.simulated_span) << " s -> " << out_dir << "\n";
    return 0;
}

int cmd_search(const std::string& search_path, const std::string& out_dir, int workers,
               std::uint64_t seed, double capacity_fraction, const std::string& objective) {
    auto loaded = load_search_config(search_path);
    loaded.options.workers = workers;
    loaded.options.capacity.seed = seed;
    loaded.options.train.seed = seed;
    if (capacity_fraction > 0) loaded.options.evaluation_fraction = capacity_fraction;
    if (!objective.empty()) loaded.options.objective = objective;
    ensure_dir(out_dir);

    auto outcome = run_search(loaded.spec, loaded.workload, loaded.options);
    write_text_file(out_dir + "/results.csv", search_results_to_csv(outcome));
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& r : outcome.results) {
        nlohmann::ordered_json j;
        j["config_id"] = r.config.id;
        j["capacity_qps"] = r.capacity_qps;
        j["qps_per_dollar"] = r.qps_per_dollar;
        j["ttft_p90_s"] = r.ttft_p90;
        j["tbt_p99_s"] = r.tbt_p99;
        j["delay_p99_s"] = r.delay_p99;
        j["makespan_s"] = r.makespan;
        j["slo_pass"] = r.slo_pass;
        j["error"] = r.error;
        rows.push_back(std::move(j));
    }
    write_text_file(out_dir + "/results.json", rows.dump(2) + "\n");
    write_text_file(out_dir + "/frontier_ttft.csv", frontier_to_csv(outcome, outcome.frontier_ttft, true));
    write_text_file(out_dir + "/frontier_tbt.csv", frontier_to_csv(outcome, outcome.frontier_tbt, false));
    write_text_file(out_dir + "/summary.txt", search_summary_text(outcome, loaded.options.objective));

    RunManifest m;
    m.command = "search";
    m.inputs = {{"search_config", search_path}, {"model_spec", loaded.model_spec_path}};
    if (!loaded.trace_path.empty()) m.inputs.emplace_back("trace", loaded.trace_path);
    for (std::size_t i = 0; i < loaded.device_paths.size(); ++i)
        m.inputs.emplace_back("device_" + std::to_string(i), loaded.device_paths[i]);
    m.seed = seed;
    m.write(out_dir);
    std::cout << search_summary_text(outcome, loaded.options.objective);
    return 0;
}

int cmd_workload_stats(const std::string& trace_path, const std::string& out) {
    auto trace = load_trace(read_text_file(trace_path));
    auto s = compute_stats(trace);
    std::ostringstream t;
    t << "queries: " << s.query_count << "\n";
    t << "                  mean     median     p90\n";
    auto row = [&](const char* name, const FieldStats& f) {
        t << name << "  " << fmt_double(f.mean) << "  " << fmt_double(f.median) << "  "
          << fmt_double(f.p90) << "\n";
    };
    row("prefill tokens ", s.prefill);
    row("decode tokens  ", s.decode);
    t << "p:d ratio median " << fmt_double(s.pd_ratio_median) << "  std dev "
      << fmt_double(s.pd_ratio_stddev) << "\n";
    std::cout << t.str();
    if (!out.empty()) {
        write_text_file(out, t.str());
        RunManifest m;
        m.command = "workload-stats";
        m.inputs = {{"trace", trace_path}};
        write_text_file(out + ".manifest.json", m.to_json().dump(2) + "\n");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"servesim: discrete-event simulator and deployment search for LLM serving"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    std::string model_spec, device, cluster_config, trace, estimator, profile_csv, search_config;
    std::string out, format = "csv", regressor = "interp", objective;
    std::vector<std::int64_t> tp_degrees = {1, 2, 4};
    std::uint64_t seed = 0;
    int workers = 1;
    double qps = 0.0, capacity_fraction = 0.0;
    bool static_mode = false, event_log = false;

    auto* profile = app.add_subcommand("profile", "generate a synthetic profile CSV for a model/device");
    profile->add_option("--model-spec", model_spec, "model spec JSON")->required();
    profile->add_option("--device", device, "device profile JSON")->required();
    profile->add_option("--out", out, "output CSV path")->required();
    profile->add_option("--tp-degrees", tp_degrees, "tp degrees to profile (default 1 2 4)");
    profile->add_option("--seed", seed, "random seed (profiling itself is deterministic)");

    auto* train_cmd = app.add_subcommand("train", "train per-operator runtime predictors");
    train_cmd->add_option("--profile", profile_csv, "profile CSV")->required();
    train_cmd->add_option("--out", out, "output estimator JSON path")->required();
    train_cmd->add_option("--regressor", regressor, "interp|forest (default interp)");
    train_cmd->add_option("--seed", seed, "training seed");

    auto* simulate = app.add_subcommand("simulate", "run one cluster simulation over a trace");
    simulate->add_option("--cluster-config", cluster_config, "cluster config JSON")->required();
    simulate->add_option("--trace", trace, "trace CSV")->required();
    simulate->add_option("--estimator", estimator, "trained estimator JSON")->required();
    simulate->add_option("--out", out, "output directory")->required();
    simulate->add_option("--format", format, "csv|json (default csv)");
    simulate->add_option("--qps", qps, "assign Poisson arrivals at this rate (uses --seed)");
    simulate->add_option("--seed", seed, "seed for arrival assignment");
    simulate->add_flag("--static-mode", static_mode,
                       "treat all requests as queued at time zero; metrics exclude queueing");
    simulate->add_flag("--event-log", event_log, "write per-batch scheduler event log");

    auto* search = app.add_subcommand("search", "enumerate deployments and find the optimum");
    search->add_option("--search-config", search_config, "search config JSON")->required();
    search->add_option("--out", out, "output directory")->required();
    search->add_option("--workers", workers, "parallel config evaluations (default 1)");
    search->add_option("--seed", seed, "seed for probe arrivals and training");
    search->add_option("--capacity-fraction", capacity_fraction,
                       "fraction of capacity for the SLO run (default 0.85)");
    search->add_option("--objective", objective, "qps-per-dollar|makespan");

    auto* stats = app.add_subcommand("workload-stats", "print trace statistics");
    stats->add_option("--trace", trace, "trace CSV")->required();
    stats->add_option("--out", out, "also write the table to this path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (profile->parsed()) return cmd_profile(model_spec, device, out, tp_degrees, seed);
        if (train_cmd->parsed()) return cmd_train(profile_csv, out, regressor, seed);
        if (simulate->parsed())
            return cmd_simulate(cluster_config, trace, estimator, out, format, qps, seed,
                                static_mode, event_log);
        if (search->parsed()) {
            std::string obj = objective;
            if (obj == "qps-per-dollar") obj = "qps_per_dollar";
            return cmd_search(search_config, out, workers, seed, capacity_fraction, obj);
        }
        if (stats->parsed()) return cmd_workload_stats(trace, out);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
