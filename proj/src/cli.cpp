#include "clwf/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "clwf/bench.hpp"
#include "clwf/config.hpp"
#include "clwf/log.hpp"
#include "clwf/metrics.hpp"
#include "clwf/trainer.hpp"

namespace clwf {

namespace {

namespace fs = std::filesystem;

struct CommonFlags {
    std::optional<std::uint64_t> seed;
    std::string config_path;
    std::string suite_dir;
    std::vector<std::string> overrides; // raw key=value pairs
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool with_suite) {
    cmd->add_option("--seed", flags.seed, "Master seed; overrides the config file");
    cmd->add_option("--config", flags.config_path, "Experiment config file (key = value)");
    if (with_suite) {
        cmd->add_option("--suite", flags.suite_dir,
                        "Task-suite directory produced by gen-tasks");
    }
    cmd->add_option("--set", flags.overrides, "Extra config overrides as key=value")
        ->expected(-1);
}

// Config resolution: explicit --config wins, then the suite directory's
// own recipe, then built-in defaults; flags override file values.
ExperimentConfig resolve_config(const CommonFlags& flags) {
    ExperimentConfig cfg;
    if (!flags.config_path.empty()) {
        cfg = load_config(flags.config_path);
    } else if (!flags.suite_dir.empty() && fs::exists(fs::path(flags.suite_dir) / "suite.config")) {
        cfg = load_config(fs::path(flags.suite_dir) / "suite.config");
    }
    for (const std::string& kv : flags.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ArgumentError("--set expects key=value, got '" + kv + "'");
        }
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (flags.seed.has_value()) {
        cfg.seed = *flags.seed;
        cfg.plan.seed = *flags.seed;
    } else {
        cfg.plan.seed = cfg.seed;
    }
    return cfg;
}

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

void eval_into_history(TrainState& state, const TaskSuite& suite, EvalReport& report,
                       const std::vector<std::string>& tasks,
                       const std::vector<std::string>& splits) {
    for (const std::string& task : tasks) {
        const TaskSpec& spec = suite.task(task);
        for (const std::string& split_name_str : splits) {
            const Split split = split_from_name(split_name_str);
            const auto samples = suite.make_split(task, split);
            EvalRow row;
            row.iteration = state.report_iteration();
            row.strategy = strategy_name(state.strategy);
            row.task_id = task;
            row.group = spec.group;
            row.split = split_name_str;
            row.error_rate = error_rate(*state.model, samples, task);
            row.n_samples = static_cast<std::int64_t>(samples.size());
            report.add(std::move(row));
        }
    }
}

void add_importance_row(TrainState& state, EvalReport& report, double threshold) {
    if (!state.ewc.has_value()) {
        return;
    }
    for (const bool normalize : {true, false}) {
        ImportanceRow row;
        row.iteration = state.report_iteration();
        row.strategy = strategy_name(state.strategy);
        row.threshold = threshold;
        row.normalize = normalize;
        row.fraction = important_fraction(state.ewc->fisher_sum, threshold, normalize);
        report.importance.push_back(row);
    }
}

int cmd_gen_tasks(const CommonFlags& flags, const std::string& out_dir) {
    ExperimentConfig cfg = resolve_config(flags);
    cfg.validate();
    const TaskSuite suite = cfg.make_suite();

    fs::create_directories(out_dir);
    save_config(cfg, fs::path(out_dir) / "suite.config");
    for (const TaskSpec& spec : suite.tasks()) {
        for (const Split split : {Split::Train, Split::Dev, Split::Test}) {
            const auto samples = suite.make_split(spec.task_id, split);
            TaskFileHeader header;
            header.task_id = spec.task_id;
            header.n = static_cast<std::int64_t>(samples.size());
            header.seq_len = cfg.gen.seq_len;
            header.d_in = cfg.gen.d_in;
            header.n_classes = cfg.gen.n_classes;
            header.seed = spec.seed;
            header.split = split_name(split);
            save_task(header, samples,
                      fs::path(out_dir) / (spec.task_id + "." + split_name(split) + ".bin"));
        }
    }
    std::printf("suite: %zu tasks in %d groups -> %s\n", suite.tasks().size(),
                suite.n_groups(), out_dir.c_str());
    return 0;
}

int cmd_train_initial(const CommonFlags& flags, const std::string& ckpt_dir,
                      const std::string& strategy_name_str) {
    ExperimentConfig cfg = resolve_config(flags);
    if (!strategy_name_str.empty()) {
        cfg.strategy = strategy_from_name(strategy_name_str);
    }
    cfg.validate();
    const TaskSuite suite = cfg.make_suite();

    TrainState state =
        train_initial(suite, cfg.plan, cfg.model, strategy_uses_factors(cfg.strategy));
    state.strategy = cfg.strategy;

    EvalReport history;
    eval_into_history(state, suite, history, state.active_tasks, {"dev", "test"});
    add_importance_row(state, history, 0.25);

    save_checkpoint(state, ckpt_dir);
    save_history(history, fs::path(ckpt_dir) / "history.json");
    for (const EvalRow& row : history.rows) {
        std::printf("iteration %d %s %s %s error %s\n", row.iteration, row.strategy.c_str(),
                    row.task_id.c_str(), row.split.c_str(),
                    format_double(row.error_rate).c_str());
    }
    return 0;
}

int cmd_continue(const CommonFlags& flags, const std::string& ckpt_dir,
                 const std::string& out_dir, const std::string& strategy_name_str,
                 const std::string& new_tasks_csv) {
    const std::vector<std::string> new_tasks = split_list(new_tasks_csv);
    if (new_tasks.empty()) {
        throw ArgumentError("continue: --new-tasks must name at least one task");
    }
    TrainState state = load_checkpoint(ckpt_dir);
    if (!flags.config_path.empty() || !flags.overrides.empty() || flags.seed.has_value()) {
        // plan overrides for the continual stage (e.g. a different lambda)
        ExperimentConfig cfg = resolve_config(flags);
        state.plan = cfg.plan;
        if (!flags.seed.has_value()) {
            state.plan.seed = cfg.seed != 0 ? cfg.seed : state.plan.seed;
        }
    }
    const Strategy strategy = strategy_from_name(strategy_name_str);
    state.plan.validate(strategy);

    CommonFlags suite_flags = flags;
    suite_flags.config_path.clear();
    suite_flags.overrides.clear();
    suite_flags.seed.reset();
    if (flags.suite_dir.empty()) {
        throw ArgumentError("continue: --suite is required");
    }
    const ExperimentConfig suite_cfg = resolve_config(suite_flags);
    const TaskSuite suite = suite_cfg.make_suite();

    EvalReport history;
    if (fs::exists(fs::path(ckpt_dir) / "history.json")) {
        history = load_history(fs::path(ckpt_dir) / "history.json");
    }

    continual_step(state, suite, new_tasks, strategy);

    eval_into_history(state, suite, history, state.model->task_ids(), {"test"});
    add_importance_row(state, history, 0.25);

    const std::string target = out_dir.empty() ? ckpt_dir : out_dir;
    save_checkpoint(state, target);
    save_history(history, fs::path(target) / "history.json");
    std::printf("iteration %d (%s) over", state.report_iteration(),
                strategy_name(strategy));
    for (const std::string& task : new_tasks) {
        std::printf(" %s", task.c_str());
    }
    std::printf(" -> %s\n", target.c_str());
    return 0;
}

int cmd_evaluate(const CommonFlags& flags, const std::string& ckpt_dir,
                 const std::string& tasks_csv, const std::string& split_str,
                 const std::string& out_dir) {
    TrainState state = load_checkpoint(ckpt_dir);
    if (flags.suite_dir.empty()) {
        throw ArgumentError("evaluate: --suite is required");
    }
    const ExperimentConfig cfg = resolve_config(flags);
    const TaskSuite suite = cfg.make_suite();

    std::vector<std::string> tasks =
        tasks_csv.empty() ? state.model->task_ids() : split_list(tasks_csv);
    std::sort(tasks.begin(), tasks.end());

    EvalReport report;
    eval_into_history(state, suite, report, tasks, {split_str});
    add_importance_row(state, report, 0.25);
    for (const EvalRow& row : report.rows) {
        std::printf("iteration %d %s %s %s error %s (n=%lld)\n", row.iteration,
                    row.strategy.c_str(), row.task_id.c_str(), row.split.c_str(),
                    format_double(row.error_rate).c_str(),
                    static_cast<long long>(row.n_samples));
    }
    if (!out_dir.empty()) {
        emit_report(report, out_dir, true, true);
    }
    return 0;
}

int cmd_report(const std::string& ckpt_dir, const std::string& out_dir,
               const std::string& formats) {
    const EvalReport report = load_history(fs::path(ckpt_dir) / "history.json");
    bool csv = false;
    bool json = false;
    for (const std::string& f : split_list(formats)) {
        if (f == "csv") {
            csv = true;
        } else if (f == "json") {
            json = true;
        } else {
            throw ArgumentError("report: unknown format '" + f + "'");
        }
    }
    emit_report(report, out_dir, csv, json);
    std::printf("%zu rows -> %s\n", report.rows.size(), out_dir.c_str());
    return 0;
}

int cmd_fisher_stats(const std::string& ckpt_dir, double threshold, const std::string& normalize) {
    const TrainState state = load_checkpoint(ckpt_dir);
    if (!state.ewc.has_value()) {
        throw ArgumentError("fisher-stats: checkpoint has no accumulated Fisher state");
    }
    const bool norm = normalize == "true";
    if (!norm && normalize != "false") {
        throw ArgumentError("fisher-stats: --normalize expects true or false");
    }
    const double fraction = important_fraction(state.ewc->fisher_sum, threshold, norm);
    std::printf("iterations %d samples %lld threshold %s normalize %s fraction %s\n",
                state.ewc->iteration_count,
                static_cast<long long>(state.ewc->fisher_sum.n_samples),
                format_double(threshold).c_str(), norm ? "true" : "false",
                format_double(fraction).c_str());
    return 0;
}

int cmd_grad_check(std::uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;

    // factorized layer, every parameter role
    for (int instance = 0; instance < 10; ++instance) {
        FactorizedLinear layer("l", 5, 4, 2, true);
        Tensor& w = layer.shared_weight_storage();
        for (std::size_t i = 0; i < w.numel(); ++i) {
            w.at(i) = rng.normal();
        }
        FactorSet& fs = layer.add_task("t", 0.0, rng);
        for (auto* group : {&fs.r_m, &fs.v_m, &fs.r_b, &fs.v_b}) {
            for (Tensor& t : *group) {
                for (std::size_t i = 0; i < t.numel(); ++i) {
                    t.at(i) = rng.normal(0.0, 0.3);
                }
            }
        }
        Tensor x({3, 5});
        Tensor weights({3, 4});
        for (std::size_t i = 0; i < x.numel(); ++i) {
            x.at(i) = rng.normal();
        }
        for (std::size_t i = 0; i < weights.numel(); ++i) {
            weights.at(i) = rng.normal();
        }
        Graph g;
        ParamContext ctx(g);
        const NodeId out = layer.apply(ctx, g.constant(x), "t");
        const NodeId loss = g.mean_pool(g.transpose(g.mean_pool(g.hadamard(out, g.constant(weights)))));
        g.backward(loss);

        std::vector<std::string> names;
        std::vector<Tensor> values;
        layer.visit_params([&](const std::string& name, Tensor& value, bool, const std::string&) {
            names.push_back(name);
            values.push_back(value);
        });
        const auto objective = [&](const std::vector<Tensor>& params) {
            FactorizedLinear probe("l", 5, 4, 2, true);
            Rng tmp(1);
            probe.add_task("t", 0.0, tmp);
            std::size_t idx = 0;
            probe.visit_params([&](const std::string&, Tensor& value, bool, const std::string&) {
                value = params[idx++];
            });
            const Tensor y = probe.forward(x, "t");
            double acc = 0.0;
            for (std::size_t i = 0; i < y.numel(); ++i) {
                acc += y.at(i) * weights.at(i);
            }
            return acc / static_cast<double>(y.numel());
        };
        const auto fd = finite_difference_grad(objective, values, 1e-5);
        for (std::size_t i = 0; i < names.size(); ++i) {
            worst = std::max(worst,
                             max_relative_error(g.grad(ctx.bound.at(names[i])).data(),
                                                fd[i].data()));
        }
    }

    // full model loss
    for (int instance = 0; instance < 3; ++instance) {
        ModelConfig cfg;
        cfg.d_in = 5;
        cfg.d_model = 16;
        cfg.n_blocks = 2;
        cfg.n_classes = 4;
        cfg.k = 2;
        ToyEncoderClassifier model(cfg);
        model.init_params(rng);
        model.add_language("t", 0.3, rng);
        std::vector<Sample> samples(2);
        for (Sample& s : samples) {
            s.x = Tensor({3, 5});
            for (std::size_t i = 0; i < s.x.numel(); ++i) {
                s.x.at(i) = rng.normal();
            }
            s.y = static_cast<int>(rng.below(4));
        }
        const std::vector<const Sample*> batch{&samples[0], &samples[1]};
        const auto lg = model.loss_and_grads(batch, "t");
        std::vector<std::string> names;
        std::vector<Tensor> values;
        model.visit_params([&](const std::string& name, Tensor& value, bool, const std::string&) {
            names.push_back(name);
            values.push_back(value);
        });
        const auto objective = [&](const std::vector<Tensor>& params) {
            ToyEncoderClassifier probe(cfg);
            Rng tmp(1);
            probe.add_language("t", 0.0, tmp);
            std::size_t idx = 0;
            probe.visit_params([&](const std::string&, Tensor& value, bool, const std::string&) {
                value = params[idx++];
            });
            return probe.loss(batch, "t");
        };
        const auto fd = finite_difference_grad(objective, values, 1e-5);
        for (std::size_t i = 0; i < names.size(); ++i) {
            worst = std::max(worst, max_relative_error(lg.grads.at(names[i]).data(),
                                                        fd[i].data()));
        }
    }

    // EWC penalty
    for (int instance = 0; instance < 10; ++instance) {
        EwcState state;
        FisherDiagonal fisher;
        fisher.n_samples = 1;
        Tensor f({12});
        Tensor anchor({12});
        Tensor theta({12});
        for (std::size_t i = 0; i < 12; ++i) {
            f.at(i) = std::abs(rng.normal());
            anchor.at(i) = rng.normal();
            theta.at(i) = rng.normal();
        }
        fisher.values.emplace("w", std::move(f));
        state.fisher_sum = std::move(fisher);
        state.anchor.emplace("w", std::move(anchor));
        const double lambda = 0.7;
        const auto pen = ewc_penalty({{"w", &theta}}, state, lambda);
        const auto objective = [&](const std::vector<Tensor>& p) {
            return ewc_penalty({{"w", &p[0]}}, state, lambda).loss;
        };
        const auto fd = finite_difference_grad(objective, {theta}, 1e-5);
        worst = std::max(worst, max_relative_error(pen.grads.at("w").data(), fd[0].data()));
    }

    std::printf("max relative gradient error: %s\n", format_double(worst).c_str());
    return worst <= 1e-4 ? 0 : 1;
}

int cmd_bench(const CommonFlags& flags, const std::string& out_dir, int n_seeds, int jobs) {
    ExperimentConfig cfg = resolve_config(flags);
    cfg.strategy = Strategy::WfEwc; // the strongest plan constraints apply
    cfg.validate();
    if (cfg.groups.size() < 2) {
        throw ArgumentError("bench: suite.groups needs at least two groups");
    }
    const BenchResult result = run_bench(cfg, n_seeds, jobs, out_dir);
    for (const auto& [name, deg] : result.summary.mean_degradation) {
        std::printf("mean old-group degradation %-12s %s\n", name.c_str(),
                    format_double(deg).c_str());
    }
    std::printf("mean new-group error wf_ewc %s vs joint %s\n",
                format_double(result.summary.mean_wf_ewc_new).c_str(),
                format_double(result.summary.mean_joint_new).c_str());
    std::printf("ordering_ok %d vanilla_2x_ok %d transfer_ok %d importance_up %d raw_monotone %d\n",
                result.summary.ordering_ok, result.summary.vanilla_2x_ok,
                result.summary.transfer_ok, result.summary.importance_up_every_seed,
                result.summary.raw_fraction_monotone);
    return 0;
}

} // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Continual-learning laboratory: weight factorization + EWC on synthetic tasks"};
    app.require_subcommand(1);

    CommonFlags gen_flags;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen-tasks", "Generate a task suite and write its containers");
    add_common(gen, gen_flags, false);
    gen->add_option("--out", gen_out, "Output directory")->required();

    CommonFlags ti_flags;
    std::string ti_ckpt;
    std::string ti_strategy;
    auto* ti = app.add_subcommand("train-initial", "Train the initial multi-task model");
    add_common(ti, ti_flags, true);
    ti->add_option("--ckpt", ti_ckpt, "Checkpoint output directory")->required();
    ti->add_option("--strategy", ti_strategy,
                   "vanilla|ewc|wf_frozen|wf_finetune|wf_ewc (controls factor use)");

    CommonFlags co_flags;
    std::string co_ckpt;
    std::string co_out;
    std::string co_strategy;
    std::string co_new_tasks;
    auto* co = app.add_subcommand("continue", "Run one continual iteration on new tasks");
    add_common(co, co_flags, true);
    co->add_option("--ckpt", co_ckpt, "Checkpoint to continue from")->required();
    co->add_option("--out", co_out, "Output checkpoint directory (default: in place)");
    co->add_option("--strategy", co_strategy, "vanilla|ewc|wf_frozen|wf_finetune|wf_ewc")
        ->required();
    co->add_option("--new-tasks", co_new_tasks, "Comma-separated new task ids")->required();

    CommonFlags ev_flags;
    std::string ev_ckpt;
    std::string ev_tasks;
    std::string ev_split = "test";
    std::string ev_out;
    auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint on task splits");
    add_common(ev, ev_flags, true);
    ev->add_option("--ckpt", ev_ckpt, "Checkpoint directory")->required();
    ev->add_option("--tasks", ev_tasks, "Comma-separated task ids (default: all registered)");
    ev->add_option("--split", ev_split, "train|dev|test");
    ev->add_option("--out", ev_out, "Optional report output directory");

    std::string rp_ckpt;
    std::string rp_out;
    std::string rp_formats = "csv,json";
    auto* rp = app.add_subcommand("report", "Emit the accumulated evaluation history");
    rp->add_option("--ckpt", rp_ckpt, "Checkpoint directory with history.json")->required();
    rp->add_option("--out", rp_out, "Report output directory")->required();
    rp->add_option("--formats", rp_formats, "Any of csv,json");

    std::string fs_ckpt;
    double fs_threshold = 0.25;
    std::string fs_normalize = "true";
    auto* fstats = app.add_subcommand("fisher-stats", "Importance fraction of the Fisher diagonal");
    fstats->add_option("--ckpt", fs_ckpt, "Checkpoint directory")->required();
    fstats->add_option("--threshold", fs_threshold, "Importance threshold");
    fstats->add_option("--normalize", fs_normalize, "true|false");

    std::uint64_t gc_seed = 0;
    auto* gc = app.add_subcommand("grad-check", "Finite-difference check of all gradients");
    gc->add_option("--seed", gc_seed, "Seed for the random instances");

    CommonFlags be_flags;
    std::string be_out;
    int be_seeds = 3;
    int be_jobs = 2;
    auto* be = app.add_subcommand("bench", "Five-strategy continual-learning comparison");
    add_common(be, be_flags, false);
    be->add_option("--out", be_out, "Output directory")->required();
    be->add_option("--seeds", be_seeds, "Number of seeds");
    be->add_option("--jobs", be_jobs, "Parallel seed workers");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fflush(stdout);
        std::fprintf(stderr, "%s\n", e.what());
        std::fprintf(stderr, "%s\n", app.help().c_str());
        return 1;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_tasks(gen_flags, gen_out);
        }
        if (ti->parsed()) {
            return cmd_train_initial(ti_flags, ti_ckpt, ti_strategy);
        }
        if (co->parsed()) {
            return cmd_continue(co_flags, co_ckpt, co_out, co_strategy, co_new_tasks);
        }
        if (ev->parsed()) {
            return cmd_evaluate(ev_flags, ev_ckpt, ev_tasks, ev_split, ev_out);
        }
        if (rp->parsed()) {
            return cmd_report(rp_ckpt, rp_out, rp_formats);
        }
        if (fstats->parsed()) {
            return cmd_fisher_stats(fs_ckpt, fs_threshold, fs_normalize);
        }
        if (gc->parsed()) {
            return cmd_grad_check(gc_seed);
        }
        if (be->parsed()) {
            return cmd_bench(be_flags, be_out, be_seeds, be_jobs);
        }
    } catch (const ArgumentError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ConflictError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const LookupError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}

} // namespace clwf
