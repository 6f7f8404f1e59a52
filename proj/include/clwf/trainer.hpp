#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "clwf/ewc.hpp"
#include "clwf/model.hpp"
#include "clwf/task_suite.hpp"

namespace clwf {

enum class Strategy { Vanilla, EwcOnly, WfFrozen, WfFinetune, WfEwc };

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);
bool strategy_uses_factors(Strategy s);
bool strategy_uses_ewc(Strategy s);
bool strategy_trains_shared(Strategy s);

struct TrainPlan {
    std::int64_t initial_steps = 20000;       // iteration 0
    std::int64_t steps_per_iteration = 3000;  // each continual iteration
    int batch_size = 32;
    double peak_lr = 1e-3;
    std::int64_t warmup_steps = 400;
    double grad_clip_norm = 4.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    EwcSchedule ewc{0.05, 10.0, 1000};
    FisherEstimator fisher_estimator = FisherEstimator::Variance;
    std::int64_t fisher_sample_cap = 1024; // per estimation pass
    std::int64_t checkpoint_every = 500;
    int average_last_n = 10;
    bool refresh_anchor = true; // false keeps the iteration-0 anchor
    std::uint64_t seed = 0;

    // Boundary validation for configured experiments; the core training
    // functions themselves accept lambda0 == 0 (it disables the penalty).
    void validate(Strategy strategy) const;
};

struct AdamMoments {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t t = 0;
};
using AdamState = std::map<std::string, AdamMoments>;

// min(step/warmup, sqrt(warmup/step)) * peak: linear warmup, inverse-sqrt decay.
double lr_schedule(std::int64_t step, const TrainPlan& plan);

// lambda0 * decay^-(floor(step / interval))
double ewc_lambda(std::int64_t step, const TrainPlan& plan);

// Scales every gradient by max_norm/norm when the global L2 norm exceeds
// max_norm. Returns the pre-clip norm.
double clip_gradients(std::map<std::string, Tensor>& grads, double max_norm);

// Standard bias-corrected Adam over the named gradients. Moments are
// created on first use; each parameter keeps its own step count.
void adam_update(ToyEncoderClassifier& model, const std::map<std::string, Tensor>& grads,
                 AdamState& adam, double lr, const TrainPlan& plan);

struct CheckpointInfo {
    std::int64_t step = 0;
    double dev_score = 0.0;
};

struct ParamSnapshot {
    std::int64_t step = 0;
    double dev_score = 0.0;
    std::map<std::string, Tensor> params; // trainable parameters only
};

// Element-wise mean of the n snapshots with the highest dev score; ties
// break toward the later step.
std::map<std::string, Tensor> average_checkpoints(const std::vector<ParamSnapshot>& snapshots,
                                                  int n);

// Full training state: model, optimizer, EWC state and iteration progress.
struct TrainState {
    ModelConfig model_cfg;
    TrainPlan plan;
    std::unique_ptr<ToyEncoderClassifier> model;
    AdamState adam;
    std::optional<EwcState> ewc;
    Strategy strategy = Strategy::WfEwc;
    bool use_factors = true;

    int completed_iterations = 0; // 1 after the initial stage
    std::vector<std::string> active_tasks;
    std::int64_t step_in_iteration = 0;
    std::int64_t iteration_steps = 0; // target steps of the open iteration
    bool iteration_open = false;

    std::vector<ParamSnapshot> snapshots; // transient, per process
    std::vector<CheckpointInfo> checkpoint_log;

    // iteration index in reports: 0 = initial stage
    int report_iteration() const { return completed_iterations - 1; }
};

struct StepInfo {
    std::int64_t step = 0;
    std::string task;
    double task_loss = 0.0;
    double penalty_loss = 0.0;
    double total_loss = 0.0;
    double lr = 0.0;
    double lambda = 0.0;
    double grad_norm = 0.0;
};
using StepHook = std::function<void(const StepInfo&)>;

// Stage lifecycle. begin_* registers tasks and sets the trainability
// masks; train_steps advances the open iteration; finalize averages the
// checkpointed snapshots, estimates and accumulates the Fisher diagonal,
// refreshes the anchor and closes the iteration.
void begin_initial(TrainState& state, const TaskSuite& suite, bool use_factors,
                   const std::vector<std::string>& tasks = {},
                   std::int64_t steps_override = 0);
void begin_continual(TrainState& state, const TaskSuite& suite,
                     const std::vector<std::string>& new_tasks, Strategy strategy);
void train_steps(TrainState& state, const TaskSuite& suite, std::int64_t n_steps,
                 const StepHook& hook = nullptr);
void finalize_iteration(TrainState& state, const TaskSuite& suite);

// The two stage drivers: initial joint training over group 0, and one
// continual iteration over a new task group under a strategy.
TrainState train_initial(const TaskSuite& suite, const TrainPlan& plan,
                         const ModelConfig& model_cfg, bool use_factors,
                         const std::vector<std::string>& tasks = {},
                         std::int64_t steps_override = 0);
void continual_step(TrainState& state, const TaskSuite& suite,
                    const std::vector<std::string>& new_tasks, Strategy strategy);

// Fisher diagonal of the shared parameters over the given tasks' train
// splits (canonical order, round-robin interleaved, capped by the plan).
FisherDiagonal estimate_task_fisher(TrainState& state, const TaskSuite& suite,
                                    const std::vector<std::string>& tasks);

// Reapplies the trainability masks implied by (strategy, active_tasks).
void apply_strategy_masks(TrainState& state);

// Checkpoint container: manifest.json + params.bin (+ adam.bin, ewc.bin),
// float32 payloads addressed by the manifest.
void save_checkpoint(const TrainState& state, const std::filesystem::path& dir);
TrainState load_checkpoint(const std::filesystem::path& dir);
std::uint64_t checkpoint_hash(const std::filesystem::path& dir);

} // namespace clwf
