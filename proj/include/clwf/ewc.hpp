#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "clwf/tensor.hpp"

namespace clwf {

enum class FisherEstimator {
    Variance,   // population variance of per-sample gradients
    MeanSquare, // mean of squared per-sample gradients
};

const char* estimator_name(FisherEstimator e);
FisherEstimator estimator_from_name(const std::string& name);

// Diagonal importance weights, one nonnegative tensor per covered
// parameter. Covers exactly the names it was estimated over.
struct FisherDiagonal {
    std::map<std::string, Tensor> values;
    std::int64_t n_samples = 0;
    FisherEstimator estimator = FisherEstimator::Variance;

    bool empty() const { return values.empty(); }
};

struct EwcSchedule {
    double lambda0 = 1e-3;
    double decay_factor = 10.0;
    std::int64_t decay_interval_steps = 1000;
};

// Everything the quadratic penalty needs: accumulated Fisher, the anchor
// snapshot it pulls toward, and the coefficient schedule.
struct EwcState {
    FisherDiagonal fisher_sum;
    std::map<std::string, Tensor> anchor;
    EwcSchedule schedule;
    int iteration_count = 0;
};

// Evaluates per-sample gradients for the covered parameters; called once
// per sample index in [0, n_samples).
using PerSampleGradFn = std::function<std::map<std::string, Tensor>(std::size_t sample_index)>;

// Accumulates first and second gradient moments over the dataset in a fixed
// order and reduces them per the estimator. Variance is clamped at zero
// against rounding. A single sample under the variance estimator yields an
// all-zero diagonal (logged as a warning).
FisherDiagonal estimate_fisher(const PerSampleGradFn& per_sample_grads,
                               std::size_t n_samples,
                               const std::vector<std::string>& param_names,
                               FisherEstimator estimator);

// Element-wise sum; names, shapes and estimator kinds must match.
FisherDiagonal accumulate_fisher(const FisherDiagonal& total, const FisherDiagonal& fresh);

struct EwcPenalty {
    double loss = 0.0;
    std::map<std::string, Tensor> grads;
};

// loss = (lambda/2) sum_j f_j (theta_j - anchor_j)^2, with gradient
// lambda f_j (theta_j - anchor_j). Parameters absent from the state
// contribute zero and get no gradient entry.
EwcPenalty ewc_penalty(const std::map<std::string, const Tensor*>& params,
                       const EwcState& state, double lambda);

// Fraction of coordinates with importance >= tau. With normalize, values
// are scaled by the global maximum first (which must be positive).
double important_fraction(const FisherDiagonal& fisher, double tau, bool normalize);

} // namespace clwf
