#include "clwf/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "clwf/log.hpp"
#include "clwf/metrics.hpp"

namespace clwf {

const char* strategy_name(Strategy s) {
    switch (s) {
    case Strategy::Vanilla: return "vanilla";
    case Strategy::EwcOnly: return "ewc";
    case Strategy::WfFrozen: return "wf_frozen";
    case Strategy::WfFinetune: return "wf_finetune";
    case Strategy::WfEwc: return "wf_ewc";
    }
    return "?";
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "vanilla") return Strategy::Vanilla;
    if (name == "ewc") return Strategy::EwcOnly;
    if (name == "wf_frozen") return Strategy::WfFrozen;
    if (name == "wf_finetune") return Strategy::WfFinetune;
    if (name == "wf_ewc") return Strategy::WfEwc;
    throw ArgumentError("unknown strategy '" + name + "'");
}

bool strategy_uses_factors(Strategy s) {
    return s == Strategy::WfFrozen || s == Strategy::WfFinetune || s == Strategy::WfEwc;
}

bool strategy_uses_ewc(Strategy s) {
    return s == Strategy::EwcOnly || s == Strategy::WfEwc;
}

bool strategy_trains_shared(Strategy s) {
    return s != Strategy::WfFrozen;
}

void TrainPlan::validate(Strategy strategy) const {
    if (warmup_steps < 1) {
        throw ArgumentError("plan: warmup_steps must be >= 1");
    }
    if (!(grad_clip_norm > 0.0)) {
        throw ArgumentError("plan: grad_clip_norm must be positive");
    }
    if (batch_size < 1 || initial_steps < 1 || steps_per_iteration < 1) {
        throw ArgumentError("plan: step and batch counts must be >= 1");
    }
    if (checkpoint_every < 1 || average_last_n < 1) {
        throw ArgumentError("plan: checkpoint cadence must be >= 1");
    }
    if (!(peak_lr > 0.0)) {
        throw ArgumentError("plan: peak_lr must be positive");
    }
    if (fisher_sample_cap < 1) {
        throw ArgumentError("plan: fisher_sample_cap must be >= 1");
    }
    if (strategy_uses_ewc(strategy) && !(ewc.lambda0 > 0.0)) {
        throw ArgumentError("plan: lambda0 must be positive for EWC strategies");
    }
    if (ewc.lambda0 < 0.0 || ewc.decay_factor <= 0.0 || ewc.decay_interval_steps < 1) {
        throw ArgumentError("plan: invalid EWC schedule");
    }
}

double lr_schedule(std::int64_t step, const TrainPlan& plan) {
    if (step < 1) {
        throw ArgumentError("lr_schedule: step must be >= 1");
    }
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(plan.warmup_steps);
    return plan.peak_lr * std::min(s / w, std::sqrt(w / s));
}

double ewc_lambda(std::int64_t step, const TrainPlan& plan) {
    if (step < 0) {
        throw ArgumentError("ewc_lambda: step must be >= 0");
    }
    const auto decays = static_cast<double>(step / plan.ewc.decay_interval_steps);
    return plan.ewc.lambda0 * std::pow(plan.ewc.decay_factor, -decays);
}

double clip_gradients(std::map<std::string, Tensor>& grads, double max_norm) {
    if (!(max_norm > 0.0)) {
        throw ArgumentError("clip_gradients: max_norm must be positive");
    }
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        for (double v : g.data()) {
            if (!std::isfinite(v)) {
                throw NumericError("clip_gradients: non-finite gradient for '" + name + "'");
            }
            sq += v * v;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& [name, g] : grads) {
            for (double& v : g.data()) {
                v *= scale;
            }
        }
    }
    return norm;
}

void adam_update(ToyEncoderClassifier& model, const std::map<std::string, Tensor>& grads,
                 AdamState& adam, double lr, const TrainPlan& plan) {
    auto params = model.named_params();
    for (const auto& [name, grad] : grads) {
        auto pit = params.find(name);
        if (pit == params.end()) {
            throw ContractError("adam_update: unknown parameter '" + name + "'");
        }
        Tensor& value = *pit->second;
        if (!value.same_shape(grad)) {
            throw ContractError("adam_update: shape mismatch for '" + name + "' (" +
                                value.shape_str() + " vs " + grad.shape_str() + ")");
        }
        AdamMoments& mom = adam[name];
        if (mom.m.empty()) {
            mom.m.assign(value.numel(), 0.0);
            mom.v.assign(value.numel(), 0.0);
        }
        mom.t += 1;
        const double b1 = plan.adam_beta1;
        const double b2 = plan.adam_beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(mom.t));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(mom.t));
        for (std::size_t i = 0; i < value.numel(); ++i) {
            const double g = grad.at(i);
            mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
            mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
            const double m_hat = mom.m[i] / bc1;
            const double v_hat = mom.v[i] / bc2;
            value.at(i) -= lr * m_hat / (std::sqrt(v_hat) + plan.adam_eps);
        }
    }
}

std::map<std::string, Tensor> average_checkpoints(const std::vector<ParamSnapshot>& snapshots,
                                                  int n) {
    if (n < 1 || static_cast<std::size_t>(n) > snapshots.size()) {
        throw ArgumentError("average_checkpoints: need 1 <= n <= " +
                            std::to_string(snapshots.size()) + ", got " + std::to_string(n));
    }
    std::vector<std::size_t> order(snapshots.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (snapshots[a].dev_score != snapshots[b].dev_score) {
            return snapshots[a].dev_score > snapshots[b].dev_score;
        }
        return snapshots[a].step > snapshots[b].step;
    });

    std::map<std::string, Tensor> mean;
    for (int rank = 0; rank < n; ++rank) {
        const ParamSnapshot& snap = snapshots[order[static_cast<std::size_t>(rank)]];
        for (const auto& [name, value] : snap.params) {
            auto it = mean.find(name);
            if (it == mean.end()) {
                if (rank != 0) {
                    throw ContractError("average_checkpoints: '" + name +
                                        "' missing from an earlier snapshot");
                }
                mean.emplace(name, value);
                continue;
            }
            if (!it->second.same_shape(value)) {
                throw ContractError("average_checkpoints: shape mismatch for '" + name + "'");
            }
            for (std::size_t i = 0; i < value.numel(); ++i) {
                it->second.at(i) += value.at(i);
            }
        }
        if (rank != 0 && snap.params.size() != mean.size()) {
            throw ContractError("average_checkpoints: snapshots cover different parameters");
        }
    }
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& [name, value] : mean) {
        for (std::size_t i = 0; i < value.numel(); ++i) {
            value.at(i) *= inv;
        }
    }
    return mean;
}

namespace {

std::vector<std::string> sorted_copy(std::vector<std::string> v) {
    std::sort(v.begin(), v.end());
    return v;
}

// Dev accuracy averaged over the active tasks; the checkpoint score.
double dev_score(const TrainState& state, const TaskSuite& suite) {
    double acc = 0.0;
    for (const std::string& task : state.active_tasks) {
        const auto dev = suite.make_split(task, Split::Dev);
        acc += 1.0 - error_rate(*state.model, dev, task);
    }
    return acc / static_cast<double>(state.active_tasks.size());
}

std::map<std::string, Tensor> snapshot_trainable(const TrainState& state) {
    std::map<std::string, Tensor> out;
    state.model->visit_params(
        [&](const std::string& name, Tensor& value, bool trainable, const std::string&) {
            if (trainable) {
                out.emplace(name, value);
            }
        });
    return out;
}

void register_tasks(TrainState& state, const std::vector<std::string>& tasks,
                    bool with_factors) {
    // Factor vectors only break the zero-gradient saddle when they start
    // at random values, so factor-training iterations draw them at
    // init_scale while shared-only ones pin them at zero, which makes the
    // layer collapse to its shared weight exactly.
    const double scale = with_factors ? state.model_cfg.init_scale : 0.0;
    Rng rng(derive_seed(state.plan.seed, "add_language",
                        static_cast<std::uint64_t>(state.completed_iterations)));
    for (const std::string& task : tasks) {
        state.model->add_language(task, scale, rng);
    }
}

} // namespace

void apply_strategy_masks(TrainState& state) {
    ToyEncoderClassifier& model = *state.model;
    const bool initial = state.completed_iterations == 0 && state.iteration_open;
    if (initial) {
        model.set_shared_trainable(true);
        model.set_all_tasks_trainable(false);
        if (state.use_factors) {
            for (const std::string& task : state.active_tasks) {
                model.set_task_trainable(task, true);
            }
        }
        return;
    }
    model.set_shared_trainable(strategy_trains_shared(state.strategy));
    model.set_all_tasks_trainable(false);
    if (strategy_uses_factors(state.strategy) && state.iteration_open) {
        for (const std::string& task : state.active_tasks) {
            if (model.has_task(task)) {
                model.set_task_trainable(task, true);
            }
        }
    }
}

void begin_initial(TrainState& state, const TaskSuite& suite, bool use_factors,
                   const std::vector<std::string>& tasks, std::int64_t steps_override) {
    if (state.iteration_open || state.completed_iterations != 0) {
        throw StateError("begin_initial: training already started");
    }
    auto selected = sorted_copy(tasks.empty() ? suite.group_task_ids(0) : tasks);
    if (selected.empty()) {
        throw ArgumentError("begin_initial: group 0 is empty");
    }
    for (const std::string& task : selected) {
        suite.task(task); // unknown ids fail here
    }
    state.use_factors = use_factors;
    state.active_tasks = std::move(selected);
    state.step_in_iteration = 0;
    state.iteration_open = true;
    state.iteration_steps = steps_override > 0 ? steps_override : state.plan.initial_steps;
    state.snapshots.clear();
    register_tasks(state, state.active_tasks, use_factors);
    apply_strategy_masks(state);
}

void begin_continual(TrainState& state, const TaskSuite& suite,
                     const std::vector<std::string>& new_tasks, Strategy strategy) {
    if (state.iteration_open) {
        throw StateError("begin_continual: previous iteration still open");
    }
    if (state.completed_iterations == 0) {
        throw StateError("begin_continual: initial training has not run");
    }
    if (new_tasks.empty()) {
        throw ArgumentError("begin_continual: no new tasks");
    }
    if (strategy_uses_ewc(strategy) && !state.ewc.has_value()) {
        throw StateError("begin_continual: EWC strategy without an EWC state");
    }
    if (strategy_uses_factors(strategy) && !state.use_factors) {
        throw StateError("begin_continual: factor strategy on a model trained without factors");
    }
    for (const std::string& task : new_tasks) {
        if (state.model->has_task(task)) {
            throw ConflictError("begin_continual: task '" + task + "' already registered");
        }
        suite.task(task); // unknown ids fail here
    }
    state.strategy = strategy;
    state.active_tasks = sorted_copy(new_tasks);
    state.step_in_iteration = 0;
    state.iteration_open = true;
    state.iteration_steps = state.plan.steps_per_iteration;
    state.snapshots.clear();
    register_tasks(state, state.active_tasks, strategy_uses_factors(strategy));
    apply_strategy_masks(state);
}

void train_steps(TrainState& state, const TaskSuite& suite, std::int64_t n_steps,
                 const StepHook& hook) {
    if (!state.iteration_open) {
        throw StateError("train_steps: no open iteration");
    }
    const TrainPlan& plan = state.plan;
    const auto n_tasks = static_cast<std::int64_t>(state.active_tasks.size());
    const int iteration_index = state.completed_iterations;

    struct TaskData {
        std::vector<Sample> train;
        std::int64_t batches_per_epoch = 0;
        std::int64_t epoch = -1;
        std::vector<std::vector<const Sample*>> batches;
    };
    std::vector<TaskData> data(static_cast<std::size_t>(n_tasks));
    for (std::int64_t t = 0; t < n_tasks; ++t) {
        auto& d = data[static_cast<std::size_t>(t)];
        d.train = suite.make_split(state.active_tasks[static_cast<std::size_t>(t)], Split::Train);
        d.batches_per_epoch = static_cast<std::int64_t>(
            (d.train.size() + static_cast<std::size_t>(plan.batch_size) - 1) /
            static_cast<std::size_t>(plan.batch_size));
    }

    const bool ewc_active = strategy_uses_ewc(state.strategy) && state.completed_iterations > 0 &&
                            state.ewc.has_value();

    const std::int64_t last = std::min(state.step_in_iteration + n_steps, state.iteration_steps);
    for (std::int64_t step = state.step_in_iteration; step < last; ++step) {
        const auto task_idx = static_cast<std::size_t>(step % n_tasks);
        const std::string& task = state.active_tasks[task_idx];
        TaskData& d = data[task_idx];
        const std::int64_t counter = step / n_tasks;
        const std::int64_t epoch = counter / d.batches_per_epoch;
        const std::int64_t batch_idx = counter % d.batches_per_epoch;
        if (epoch != d.epoch) {
            d.batches = epoch_batches(
                d.train, static_cast<std::size_t>(plan.batch_size),
                derive_seed(plan.seed, "epoch/" + task,
                            static_cast<std::uint64_t>(iteration_index),
                            static_cast<std::uint64_t>(epoch)));
            d.epoch = epoch;
        }
        const auto& batch = d.batches[static_cast<std::size_t>(batch_idx)];

        Rng dropout_rng(derive_seed(plan.seed, "dropout",
                                    static_cast<std::uint64_t>(iteration_index),
                                    static_cast<std::uint64_t>(step)));
        Rng* dropout = state.model_cfg.dropout > 0.0 ? &dropout_rng : nullptr;
        auto lg = state.model->loss_and_grads(batch, task, dropout);

        StepInfo info;
        info.step = step;
        info.task = task;
        info.task_loss = lg.loss;
        info.lambda = ewc_active ? ewc_lambda(step, plan) : 0.0;
        if (ewc_active && info.lambda > 0.0) {
            std::map<std::string, const Tensor*> shared;
            for (const auto& [name, tensor] : state.model->named_params()) {
                shared.emplace(name, tensor);
            }
            const EwcPenalty pen = ewc_penalty(shared, *state.ewc, info.lambda);
            info.penalty_loss = pen.loss;
            for (const auto& [name, grad] : pen.grads) {
                auto it = lg.grads.find(name);
                if (it == lg.grads.end()) {
                    continue; // parameter frozen under this strategy
                }
                for (std::size_t i = 0; i < grad.numel(); ++i) {
                    it->second.at(i) += grad.at(i);
                }
            }
        }
        info.total_loss = info.task_loss + info.penalty_loss;
        info.grad_norm = clip_gradients(lg.grads, plan.grad_clip_norm);
        info.lr = lr_schedule(step + 1, plan);
        adam_update(*state.model, lg.grads, state.adam, info.lr, plan);

        state.step_in_iteration = step + 1;
        if ((step + 1) % plan.checkpoint_every == 0 || step + 1 == state.iteration_steps) {
            ParamSnapshot snap;
            snap.step = step + 1;
            snap.dev_score = dev_score(state, suite);
            snap.params = snapshot_trainable(state);
            state.checkpoint_log.push_back({snap.step, snap.dev_score});
            state.snapshots.push_back(std::move(snap));
            log_info("step " + std::to_string(step + 1) + "/" +
                     std::to_string(state.iteration_steps) + " loss " +
                     std::to_string(info.total_loss) + " dev " +
                     std::to_string(state.snapshots.back().dev_score));
        }
        if (hook) {
            hook(info);
        }
    }
}

FisherDiagonal estimate_task_fisher(TrainState& state, const TaskSuite& suite,
                                    const std::vector<std::string>& tasks) {
    ToyEncoderClassifier& model = *state.model;
    const auto shared_names = model.shared_param_names();

    // Gradients w.r.t. the shared parameters only, factors held fixed.
    model.set_shared_trainable(true);
    model.set_all_tasks_trainable(false);

    const auto sorted_tasks = sorted_copy(tasks);
    struct Entry {
        const std::string* task;
        const Sample* sample;
    };
    std::vector<std::vector<Sample>> splits;
    splits.reserve(sorted_tasks.size());
    for (const std::string& task : sorted_tasks) {
        splits.push_back(suite.make_split(task, Split::Train));
    }
    const std::size_t per_task = std::max<std::size_t>(
        1, static_cast<std::size_t>(state.plan.fisher_sample_cap) / sorted_tasks.size());
    std::vector<Entry> entries;
    for (std::size_t i = 0;; ++i) {
        bool any = false;
        for (std::size_t t = 0; t < sorted_tasks.size(); ++t) {
            if (i < per_task && i < splits[t].size()) {
                entries.push_back({&sorted_tasks[t], &splits[t][i]});
                any = true;
            }
        }
        if (!any) {
            break;
        }
    }

    const PerSampleGradFn grad_fn = [&](std::size_t s) {
        const Entry& e = entries[s];
        auto lg = model.loss_and_grads({e.sample}, *e.task, nullptr);
        return std::move(lg.grads);
    };
    FisherDiagonal fisher =
        estimate_fisher(grad_fn, entries.size(), shared_names, state.plan.fisher_estimator);

    apply_strategy_masks(state);
    return fisher;
}

void finalize_iteration(TrainState& state, const TaskSuite& suite) {
    if (!state.iteration_open) {
        throw StateError("finalize_iteration: no open iteration");
    }
    if (state.step_in_iteration < state.iteration_steps) {
        throw StateError("finalize_iteration: iteration has " +
                         std::to_string(state.iteration_steps - state.step_in_iteration) +
                         " steps left");
    }

    // Parameter averaging over the best checkpoints; frozen parameters are
    // never touched so bitwise isolation guarantees survive.
    if (!state.snapshots.empty()) {
        const int n = std::min<int>(state.plan.average_last_n,
                                    static_cast<int>(state.snapshots.size()));
        auto averaged = average_checkpoints(state.snapshots, n);
        auto params = state.model->named_params();
        for (const auto& [name, value] : averaged) {
            *params.at(name) = value;
        }
    }
    state.snapshots.clear();

    FisherDiagonal fresh = estimate_task_fisher(state, suite, state.active_tasks);
    if (!state.ewc.has_value()) {
        EwcState ewc;
        ewc.fisher_sum = std::move(fresh);
        ewc.schedule = state.plan.ewc;
        state.ewc = std::move(ewc);
    } else {
        state.ewc->fisher_sum = accumulate_fisher(state.ewc->fisher_sum, fresh);
    }
    state.ewc->iteration_count += 1;

    const bool refresh = state.plan.refresh_anchor || state.ewc->anchor.empty();
    if (refresh) {
        state.ewc->anchor.clear();
        for (const auto& [name, tensor] : state.model->named_params()) {
            if (state.ewc->fisher_sum.values.count(name) != 0) {
                state.ewc->anchor.emplace(name, *tensor);
            }
        }
    }

    state.completed_iterations += 1;
    state.iteration_open = false;
}

TrainState train_initial(const TaskSuite& suite, const TrainPlan& plan,
                         const ModelConfig& model_cfg, bool use_factors,
                         const std::vector<std::string>& tasks, std::int64_t steps_override) {
    TrainState state;
    state.model_cfg = model_cfg;
    state.plan = plan;
    state.model = std::make_unique<ToyEncoderClassifier>(model_cfg);
    Rng init_rng(derive_seed(plan.seed, "init_params"));
    state.model->init_params(init_rng);

    begin_initial(state, suite, use_factors, tasks, steps_override);
    train_steps(state, suite, state.iteration_steps);
    finalize_iteration(state, suite);
    return state;
}

void continual_step(TrainState& state, const TaskSuite& suite,
                    const std::vector<std::string>& new_tasks, Strategy strategy) {
    begin_continual(state, suite, new_tasks, strategy);
    train_steps(state, suite, state.iteration_steps);
    finalize_iteration(state, suite);
}

} // namespace clwf
