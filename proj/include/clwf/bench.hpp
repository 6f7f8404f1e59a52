#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "clwf/config.hpp"
#include "clwf/metrics.hpp"

namespace clwf {

// One strategy's outcome on one seed of the five-way comparison.
struct StrategyOutcome {
    std::string strategy;
    double old_before = 0.0;  // old-group test error at the end of iteration 0
    double old_after = 0.0;   // same tasks after the continual iteration
    double new_after = 0.0;   // new-group test error after the continual iteration
    double degradation = 0.0; // relative old-group change
    double importance_before = 0.0; // normalized fraction, tau = 0.25
    double importance_after = 0.0;
    double importance_raw_before = 0.0; // normalize = false
    double importance_raw_after = 0.0;
};

struct SeedOutcome {
    std::uint64_t seed = 0;
    std::vector<StrategyOutcome> strategies;
    double joint_new_err = 0.0; // all-groups joint training with the same budget
    double joint_old_err = 0.0;
    EvalReport report;
};

struct BenchSummary {
    std::map<std::string, double> mean_degradation;
    double mean_wf_ewc_new = 0.0;
    double mean_joint_new = 0.0;
    // mean-over-seeds orderings of old-group degradation
    bool ordering_ok = false;        // vanilla >= ewc >= wf_ewc >= 0 = wf_frozen
    bool vanilla_2x_ok = false;      // vanilla >= 2 x wf_ewc
    bool transfer_ok = false;        // wf_ewc new-group <= 1.25 x joint new-group
    bool importance_up_every_seed = false; // normalized fraction rises after iteration 1
    bool raw_fraction_monotone = false;    // unnormalized fraction never decreases
};

struct BenchResult {
    std::vector<SeedOutcome> seeds;
    BenchSummary summary;
};

// Runs the five-strategy comparison over n_seeds seeds (each seed: two
// initial trainings, five continual iterations, one joint baseline) and
// writes per-seed checkpoints and reports plus bench_summary.json under
// out_dir. Seeds run in up to `jobs` parallel workers; results are
// identical for any job count.
BenchResult run_bench(const ExperimentConfig& base, int n_seeds, int jobs,
                      const std::filesystem::path& out_dir);

void write_bench_summary(const BenchResult& result, const std::filesystem::path& path);

} // namespace clwf
