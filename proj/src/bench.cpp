#include "clwf/bench.hpp"

#include <algorithm>
#include <fstream>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "clwf/log.hpp"

namespace clwf {

using nlohmann::ordered_json;

namespace {

constexpr double kImportanceThreshold = 0.25;

double group_test_error(const TrainState& state, const TaskSuite& suite, int group) {
    double acc = 0.0;
    int n = 0;
    for (const std::string& task : suite.group_task_ids(group)) {
        acc += error_rate(*state.model, suite.make_split(task, Split::Test), task);
        ++n;
    }
    return acc / n;
}

void add_eval_rows(EvalReport& report, const TrainState& state, const TaskSuite& suite,
                   const std::string& strategy, int iteration) {
    for (const TaskSpec& spec : suite.tasks()) {
        if (!state.model->has_task(spec.task_id)) {
            continue;
        }
        const auto test = suite.make_split(spec.task_id, Split::Test);
        EvalRow row;
        row.iteration = iteration;
        row.strategy = strategy;
        row.task_id = spec.task_id;
        row.group = spec.group;
        row.split = "test";
        row.error_rate = error_rate(*state.model, test, spec.task_id);
        row.n_samples = static_cast<std::int64_t>(test.size());
        report.add(std::move(row));
    }
}

void add_importance_rows(EvalReport& report, const TrainState& state,
                         const std::string& strategy, int iteration) {
    for (const bool normalize : {true, false}) {
        ImportanceRow row;
        row.iteration = iteration;
        row.strategy = strategy;
        row.threshold = kImportanceThreshold;
        row.normalize = normalize;
        row.fraction = important_fraction(state.ewc->fisher_sum, kImportanceThreshold, normalize);
        report.importance.push_back(row);
    }
}

SeedOutcome run_seed(const ExperimentConfig& base, std::uint64_t seed,
                     const std::filesystem::path& seed_dir) {
    ExperimentConfig cfg = base;
    cfg.seed = seed;
    cfg.plan.seed = seed;
    const TaskSuite suite = cfg.make_suite();
    const auto new_tasks = suite.group_task_ids(1);

    SeedOutcome outcome;
    outcome.seed = seed;

    log_info("bench seed " + std::to_string(seed) + ": initial training (shared-only)");
    TrainState init_shared = train_initial(suite, cfg.plan, cfg.model, false);
    save_checkpoint(init_shared, seed_dir / "init_shared");
    log_info("bench seed " + std::to_string(seed) + ": initial training (factorized)");
    TrainState init_wf = train_initial(suite, cfg.plan, cfg.model, true);
    save_checkpoint(init_wf, seed_dir / "init_wf");

    const double before_shared = group_test_error(init_shared, suite, 0);
    const double before_wf = group_test_error(init_wf, suite, 0);

    for (const Strategy strategy :
         {Strategy::Vanilla, Strategy::EwcOnly, Strategy::WfFrozen, Strategy::WfFinetune,
          Strategy::WfEwc}) {
        const bool wf = strategy_uses_factors(strategy);
        TrainState state = load_checkpoint(seed_dir / (wf ? "init_wf" : "init_shared"));
        StrategyOutcome so;
        so.strategy = strategy_name(strategy);
        so.old_before = wf ? before_wf : before_shared;
        so.importance_before =
            important_fraction(state.ewc->fisher_sum, kImportanceThreshold, true);
        so.importance_raw_before =
            important_fraction(state.ewc->fisher_sum, kImportanceThreshold, false);

        add_eval_rows(outcome.report, state, suite, so.strategy, 0);
        add_importance_rows(outcome.report, state, so.strategy, 0);

        log_info("bench seed " + std::to_string(seed) + ": continual " + so.strategy);
        continual_step(state, suite, new_tasks, strategy);
        save_checkpoint(state, seed_dir / so.strategy);

        so.old_after = group_test_error(state, suite, 0);
        so.new_after = group_test_error(state, suite, 1);
        so.degradation = degradation(so.old_before, so.old_after).value;
        so.importance_after =
            important_fraction(state.ewc->fisher_sum, kImportanceThreshold, true);
        so.importance_raw_after =
            important_fraction(state.ewc->fisher_sum, kImportanceThreshold, false);

        add_eval_rows(outcome.report, state, suite, so.strategy, 1);
        add_importance_rows(outcome.report, state, so.strategy, 1);
        outcome.strategies.push_back(std::move(so));
    }

    log_info("bench seed " + std::to_string(seed) + ": joint baseline");
    TrainState joint =
        train_initial(suite, cfg.plan, cfg.model, true, suite.task_ids(),
                      cfg.plan.initial_steps + cfg.plan.steps_per_iteration);
    save_checkpoint(joint, seed_dir / "joint");
    outcome.joint_new_err = group_test_error(joint, suite, 1);
    outcome.joint_old_err = group_test_error(joint, suite, 0);
    add_eval_rows(outcome.report, joint, suite, "joint", 0);

    emit_report(outcome.report, seed_dir, true, true);
    return outcome;
}

const StrategyOutcome& find_strategy(const SeedOutcome& seed, const std::string& name) {
    for (const StrategyOutcome& so : seed.strategies) {
        if (so.strategy == name) {
            return so;
        }
    }
    throw LookupError("bench: no outcome for strategy '" + name + "'");
}

} // namespace

BenchResult run_bench(const ExperimentConfig& base, int n_seeds, int jobs,
                      const std::filesystem::path& out_dir) {
    if (n_seeds < 1) {
        throw ArgumentError("bench: n_seeds must be >= 1");
    }
    if (base.groups.size() < 2) {
        throw ArgumentError("bench: the suite needs at least two groups");
    }
    std::filesystem::create_directories(out_dir);

    BenchResult result;
    result.seeds.resize(static_cast<std::size_t>(n_seeds));

    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_seeds));
    std::vector<std::thread> workers;
    const int n_jobs = std::max(1, std::min(jobs, n_seeds));
    std::size_t next = 0;
    std::mutex next_mutex;

    const auto worker = [&]() {
        while (true) {
            std::size_t index;
            {
                const std::lock_guard<std::mutex> lock(next_mutex);
                if (next >= result.seeds.size()) {
                    return;
                }
                index = next++;
            }
            const std::uint64_t seed = base.seed + index;
            const std::filesystem::path seed_dir = out_dir / ("seed" + std::to_string(seed));
            try {
                result.seeds[index] = run_seed(base, seed, seed_dir);
            } catch (...) {
                errors[index] = std::current_exception();
                return;
            }
        }
    };
    for (int j = 0; j < n_jobs; ++j) {
        workers.emplace_back(worker);
    }
    for (std::thread& t : workers) {
        t.join();
    }
    for (const std::exception_ptr& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }

    // mean-over-seeds summary
    BenchSummary& summary = result.summary;
    for (const char* name : {"vanilla", "ewc", "wf_frozen", "wf_finetune", "wf_ewc"}) {
        double acc = 0.0;
        for (const SeedOutcome& seed : result.seeds) {
            acc += find_strategy(seed, name).degradation;
        }
        summary.mean_degradation[name] = acc / n_seeds;
    }
    double wf_ewc_new = 0.0;
    double joint_new = 0.0;
    for (const SeedOutcome& seed : result.seeds) {
        wf_ewc_new += find_strategy(seed, "wf_ewc").new_after;
        joint_new += seed.joint_new_err;
    }
    summary.mean_wf_ewc_new = wf_ewc_new / n_seeds;
    summary.mean_joint_new = joint_new / n_seeds;

    const double vanilla = summary.mean_degradation.at("vanilla");
    const double ewc_only = summary.mean_degradation.at("ewc");
    const double wf_ewc = summary.mean_degradation.at("wf_ewc");
    const double wf_frozen = summary.mean_degradation.at("wf_frozen");
    summary.ordering_ok =
        vanilla >= ewc_only && ewc_only >= wf_ewc && wf_ewc >= 0.0 && wf_frozen == 0.0;
    summary.vanilla_2x_ok = vanilla >= 2.0 * wf_ewc;
    summary.transfer_ok = summary.mean_wf_ewc_new <= 1.25 * summary.mean_joint_new;

    summary.importance_up_every_seed = true;
    summary.raw_fraction_monotone = true;
    for (const SeedOutcome& seed : result.seeds) {
        const StrategyOutcome& so = find_strategy(seed, "wf_ewc");
        if (!(so.importance_after > so.importance_before)) {
            summary.importance_up_every_seed = false;
        }
        for (const StrategyOutcome& any : seed.strategies) {
            if (any.importance_raw_after < any.importance_raw_before) {
                summary.raw_fraction_monotone = false;
            }
        }
    }

    write_bench_summary(result, out_dir / "bench_summary.json");
    return result;
}

void write_bench_summary(const BenchResult& result, const std::filesystem::path& path) {
    ordered_json j;
    j["seeds"] = ordered_json::array();
    for (const SeedOutcome& seed : result.seeds) {
        ordered_json s;
        s["seed"] = seed.seed;
        s["joint_new_err"] = seed.joint_new_err;
        s["joint_old_err"] = seed.joint_old_err;
        s["strategies"] = ordered_json::array();
        for (const StrategyOutcome& so : seed.strategies) {
            ordered_json o;
            o["strategy"] = so.strategy;
            o["old_before"] = so.old_before;
            o["old_after"] = so.old_after;
            o["new_after"] = so.new_after;
            o["degradation"] = so.degradation;
            o["importance_before"] = so.importance_before;
            o["importance_after"] = so.importance_after;
            o["importance_raw_before"] = so.importance_raw_before;
            o["importance_raw_after"] = so.importance_raw_after;
            s["strategies"].push_back(std::move(o));
        }
        j["seeds"].push_back(std::move(s));
    }
    const BenchSummary& summary = result.summary;
    j["mean_degradation"] = summary.mean_degradation;
    j["mean_wf_ewc_new"] = summary.mean_wf_ewc_new;
    j["mean_joint_new"] = summary.mean_joint_new;
    j["ordering_ok"] = summary.ordering_ok;
    j["vanilla_2x_ok"] = summary.vanilla_2x_ok;
    j["transfer_ok"] = summary.transfer_ok;
    j["importance_up_every_seed"] = summary.importance_up_every_seed;
    j["raw_fraction_monotone"] = summary.raw_fraction_monotone;

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("bench: cannot open '" + path.string() + "'");
    }
    out << j.dump(2) << '\n';
    if (!out) {
        throw IoError("bench: write failed for '" + path.string() + "'");
    }
}

} // namespace clwf
