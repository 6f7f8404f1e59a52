#include "clwf/ewc.hpp"

#include <algorithm>
#include <cmath>

#include "clwf/log.hpp"

namespace clwf {

const char* estimator_name(FisherEstimator e) {
    return e == FisherEstimator::Variance ? "variance" : "mean_square";
}

FisherEstimator estimator_from_name(const std::string& name) {
    if (name == "variance") {
        return FisherEstimator::Variance;
    }
    if (name == "mean_square") {
        return FisherEstimator::MeanSquare;
    }
    throw ArgumentError("unknown fisher estimator '" + name + "'");
}

FisherDiagonal estimate_fisher(const PerSampleGradFn& per_sample_grads,
                               std::size_t n_samples,
                               const std::vector<std::string>& param_names,
                               FisherEstimator estimator) {
    if (n_samples == 0) {
        throw ArgumentError("estimate_fisher: empty dataset");
    }
    if (param_names.empty()) {
        throw ArgumentError("estimate_fisher: no parameters named");
    }
    if (n_samples == 1 && estimator == FisherEstimator::Variance) {
        log_warn("estimate_fisher: variance over a single sample is identically zero");
    }

    std::map<std::string, Tensor> sum_g;
    std::map<std::string, Tensor> sum_g2;

    for (std::size_t s = 0; s < n_samples; ++s) {
        std::map<std::string, Tensor> grads = per_sample_grads(s);
        for (const std::string& name : param_names) {
            auto it = grads.find(name);
            if (it == grads.end()) {
                throw ContractError("estimate_fisher: sample " + std::to_string(s) +
                                    " is missing gradient for '" + name + "'");
            }
            const Tensor& g = it->second;
            check_finite(g, "estimate_fisher: gradient of " + name);
            if (s == 0) {
                sum_g.emplace(name, Tensor::zeros(g.shape()));
                sum_g2.emplace(name, Tensor::zeros(g.shape()));
            }
            Tensor& acc1 = sum_g.at(name);
            Tensor& acc2 = sum_g2.at(name);
            if (!acc1.same_shape(g)) {
                throw ContractError("estimate_fisher: gradient shape changed for '" + name + "'");
            }
            for (std::size_t i = 0; i < g.numel(); ++i) {
                acc1.at(i) += g.at(i);
                acc2.at(i) += g.at(i) * g.at(i);
            }
        }
    }

    FisherDiagonal fisher;
    fisher.n_samples = static_cast<std::int64_t>(n_samples);
    fisher.estimator = estimator;
    const double inv_n = 1.0 / static_cast<double>(n_samples);
    for (const std::string& name : param_names) {
        const Tensor& acc1 = sum_g.at(name);
        const Tensor& acc2 = sum_g2.at(name);
        Tensor f(acc1.shape());
        for (std::size_t i = 0; i < f.numel(); ++i) {
            const double mean_sq = acc2.at(i) * inv_n;
            if (estimator == FisherEstimator::MeanSquare) {
                f.at(i) = mean_sq;
            } else {
                const double mean = acc1.at(i) * inv_n;
                f.at(i) = std::max(0.0, mean_sq - mean * mean);
            }
        }
        fisher.values.emplace(name, std::move(f));
    }
    return fisher;
}

FisherDiagonal accumulate_fisher(const FisherDiagonal& total, const FisherDiagonal& fresh) {
    if (total.estimator != fresh.estimator) {
        throw ContractError("accumulate_fisher: estimator kinds differ (" +
                            std::string(estimator_name(total.estimator)) + " vs " +
                            estimator_name(fresh.estimator) + ")");
    }
    if (total.values.size() != fresh.values.size()) {
        throw ContractError("accumulate_fisher: parameter sets differ in size");
    }
    FisherDiagonal out;
    out.estimator = total.estimator;
    out.n_samples = total.n_samples + fresh.n_samples;
    for (const auto& [name, t] : total.values) {
        auto it = fresh.values.find(name);
        if (it == fresh.values.end()) {
            throw ContractError("accumulate_fisher: '" + name + "' missing from new diagonal");
        }
        if (!t.same_shape(it->second)) {
            throw ContractError("accumulate_fisher: shape mismatch for '" + name + "' (" +
                                t.shape_str() + " vs " + it->second.shape_str() + ")");
        }
        Tensor sum(t.shape());
        for (std::size_t i = 0; i < sum.numel(); ++i) {
            sum.at(i) = t.at(i) + it->second.at(i);
        }
        out.values.emplace(name, std::move(sum));
    }
    return out;
}

EwcPenalty ewc_penalty(const std::map<std::string, const Tensor*>& params,
                       const EwcState& state, double lambda) {
    if (lambda < 0.0) {
        throw ArgumentError("ewc_penalty: negative lambda");
    }
    EwcPenalty out;
    for (const auto& [name, fisher] : state.fisher_sum.values) {
        auto pit = params.find(name);
        if (pit == params.end()) {
            throw ContractError("ewc_penalty: parameter '" + name + "' not supplied");
        }
        const Tensor& theta = *pit->second;
        auto ait = state.anchor.find(name);
        if (ait == state.anchor.end()) {
            throw ContractError("ewc_penalty: no anchor for '" + name + "'");
        }
        const Tensor& anchor = ait->second;
        if (!theta.same_shape(fisher) || !theta.same_shape(anchor)) {
            throw ContractError("ewc_penalty: shape mismatch for '" + name + "' (param " +
                                theta.shape_str() + ", fisher " + fisher.shape_str() +
                                ", anchor " + anchor.shape_str() + ")");
        }
        Tensor grad(theta.shape());
        for (std::size_t i = 0; i < theta.numel(); ++i) {
            const double diff = theta.at(i) - anchor.at(i);
            out.loss += 0.5 * lambda * fisher.at(i) * diff * diff;
            grad.at(i) = lambda * fisher.at(i) * diff;
        }
        out.grads.emplace(name, std::move(grad));
    }
    return out;
}

double important_fraction(const FisherDiagonal& fisher, double tau, bool normalize) {
    if (fisher.empty()) {
        throw ArgumentError("important_fraction: empty fisher diagonal");
    }
    if (tau < 0.0) {
        throw ArgumentError("important_fraction: negative threshold");
    }
    double max_v = 0.0;
    std::size_t total = 0;
    for (const auto& [name, t] : fisher.values) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            max_v = std::max(max_v, t.at(i));
        }
        total += t.numel();
    }
    if (normalize && max_v <= 0.0) {
        throw ArgumentError("important_fraction: cannot normalize an all-zero diagonal");
    }
    const double scale = normalize ? 1.0 / max_v : 1.0;
    std::size_t important = 0;
    for (const auto& [name, t] : fisher.values) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            if (t.at(i) * scale >= tau) {
                ++important;
            }
        }
    }
    return static_cast<double>(important) / static_cast<double>(total);
}

} // namespace clwf
