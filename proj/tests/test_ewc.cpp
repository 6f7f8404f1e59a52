#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "clwf/ewc.hpp"
#include "clwf/graph.hpp"
#include "clwf/rng.hpp"

using namespace clwf;

namespace {

// Synthetic per-sample gradients: a deterministic function of the index.
PerSampleGradFn synthetic_grads(std::uint64_t seed, std::size_t dim) {
    return [seed, dim](std::size_t s) {
        Rng rng(derive_seed(seed, "sample", s));
        Tensor g({dim});
        for (std::size_t i = 0; i < dim; ++i) {
            g.at(i) = rng.normal();
        }
        std::map<std::string, Tensor> out;
        out.emplace("w", std::move(g));
        return out;
    };
}

// Two-pass moment oracle, independent of the streaming implementation.
FisherDiagonal brute_force_fisher(const PerSampleGradFn& fn, std::size_t n,
                                  const std::string& name, FisherEstimator est) {
    std::vector<Tensor> all;
    for (std::size_t s = 0; s < n; ++s) {
        all.push_back(fn(s).at(name));
    }
    const std::size_t dim = all.front().numel();
    Tensor f(all.front().shape());
    for (std::size_t i = 0; i < dim; ++i) {
        double mean = 0.0;
        for (const Tensor& g : all) {
            mean += g.at(i);
        }
        mean /= static_cast<double>(n);
        double acc = 0.0;
        for (const Tensor& g : all) {
            const double v = est == FisherEstimator::Variance ? g.at(i) - mean : g.at(i);
            acc += v * v;
        }
        f.at(i) = acc / static_cast<double>(n);
    }
    FisherDiagonal out;
    out.estimator = est;
    out.n_samples = static_cast<std::int64_t>(n);
    out.values.emplace(name, std::move(f));
    return out;
}

FisherDiagonal make_fisher(std::vector<double> values,
                           FisherEstimator est = FisherEstimator::Variance) {
    FisherDiagonal f;
    f.estimator = est;
    f.n_samples = 1;
    f.values.emplace("w", Tensor::row_vector(std::move(values)));
    return f;
}

} // namespace

TEST_CASE("constant gradients have zero variance") {
    const auto fn = [](std::size_t) {
        std::map<std::string, Tensor> out;
        out.emplace("w", Tensor::row_vector({0.5, -1.5}));
        return out;
    };
    const FisherDiagonal f = estimate_fisher(fn, 8, {"w"}, FisherEstimator::Variance);
    CHECK(f.values.at("w").data() == std::vector<double>{0.0, 0.0});
    CHECK(f.n_samples == 8);
}

TEST_CASE("two opposite unit gradients give unit moments") {
    const auto fn = [](std::size_t s) {
        std::map<std::string, Tensor> out;
        out.emplace("w", Tensor::row_vector({s == 0 ? 1.0 : -1.0}));
        return out;
    };
    const FisherDiagonal var = estimate_fisher(fn, 2, {"w"}, FisherEstimator::Variance);
    CHECK(var.values.at("w").at(0) == doctest::Approx(1.0).epsilon(1e-15));
    const FisherDiagonal ms = estimate_fisher(fn, 2, {"w"}, FisherEstimator::MeanSquare);
    CHECK(ms.values.at("w").at(0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("both estimators match the brute-force moment oracle within 1e-10") {
    const auto fn = synthetic_grads(2026, 7);
    for (const FisherEstimator est : {FisherEstimator::Variance, FisherEstimator::MeanSquare}) {
        const FisherDiagonal got = estimate_fisher(fn, 50, {"w"}, est);
        const FisherDiagonal want = brute_force_fisher(fn, 50, "w", est);
        for (std::size_t i = 0; i < 7; ++i) {
            CHECK(std::abs(got.values.at("w").at(i) - want.values.at("w").at(i)) < 1e-10);
        }
        for (double v : got.values.at("w").data()) {
            CHECK(v >= 0.0);
        }
    }
}

TEST_CASE("fisher is invariant to dataset ordering") {
    const auto fn = synthetic_grads(7, 5);
    std::vector<std::size_t> perm(40);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        perm[i] = i;
    }
    Rng rng(3);
    rng.shuffle(perm);
    const PerSampleGradFn shuffled = [&](std::size_t s) { return fn(perm[s]); };
    const FisherDiagonal a = estimate_fisher(fn, 40, {"w"}, FisherEstimator::Variance);
    const FisherDiagonal b = estimate_fisher(shuffled, 40, {"w"}, FisherEstimator::Variance);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(std::abs(a.values.at("w").at(i) - b.values.at("w").at(i)) < 1e-12);
    }
}

TEST_CASE("single-sample variance estimate is all zero") {
    const auto fn = synthetic_grads(9, 3);
    const FisherDiagonal f = estimate_fisher(fn, 1, {"w"}, FisherEstimator::Variance);
    CHECK(f.values.at("w").data() == std::vector<double>(3, 0.0));
}

TEST_CASE("estimate_fisher argument errors") {
    const auto fn = synthetic_grads(1, 2);
    CHECK_THROWS_AS(estimate_fisher(fn, 0, {"w"}, FisherEstimator::Variance), ArgumentError);
    CHECK_THROWS_AS(estimate_fisher(fn, 2, {"w", "missing"}, FisherEstimator::Variance),
                    ContractError);
}

TEST_CASE("accumulation is an element-wise sum") {
    const FisherDiagonal total = make_fisher({0.1});
    const FisherDiagonal fresh = make_fisher({0.2});
    const FisherDiagonal sum = accumulate_fisher(total, fresh);
    CHECK(sum.values.at("w").at(0) == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(sum.n_samples == 2);

    const FisherDiagonal same = accumulate_fisher(total, make_fisher({0.0}));
    CHECK(same.values.at("w").at(0) == doctest::Approx(0.1).epsilon(1e-15));
}

TEST_CASE("accumulation is associative and monotone") {
    Rng rng(5);
    const auto rand_fisher = [&]() {
        std::vector<double> v(6);
        for (double& x : v) {
            x = std::abs(rng.normal());
        }
        return make_fisher(std::move(v));
    };
    const FisherDiagonal a = rand_fisher();
    const FisherDiagonal b = rand_fisher();
    const FisherDiagonal c = rand_fisher();
    const FisherDiagonal left = accumulate_fisher(accumulate_fisher(a, b), c);
    const FisherDiagonal right = accumulate_fisher(a, accumulate_fisher(b, c));
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(left.values.at("w").at(i) == doctest::Approx(right.values.at("w").at(i)).epsilon(1e-12));
        CHECK(accumulate_fisher(a, b).values.at("w").at(i) >= a.values.at("w").at(i));
    }
}

TEST_CASE("accumulation contract errors") {
    const FisherDiagonal a = make_fisher({0.1, 0.2});
    CHECK_THROWS_AS(accumulate_fisher(a, make_fisher({0.1})), ContractError);
    CHECK_THROWS_AS(accumulate_fisher(a, make_fisher({0.1, 0.2}, FisherEstimator::MeanSquare)),
                    ContractError);
    FisherDiagonal renamed = make_fisher({0.1, 0.2});
    auto node = renamed.values.extract("w");
    node.key() = "other";
    renamed.values.insert(std::move(node));
    CHECK_THROWS_AS(accumulate_fisher(a, renamed), ContractError);
}

TEST_CASE("penalty vanishes exactly at the anchor") {
    EwcState state;
    state.fisher_sum = make_fisher({1.0, 2.0, 3.0});
    state.anchor.emplace("w", Tensor::row_vector({0.4, -0.2, 7.0}));
    const Tensor theta = Tensor::row_vector({0.4, -0.2, 7.0});
    const auto pen = ewc_penalty({{"w", &theta}}, state, 0.5);
    CHECK(pen.loss == 0.0);
    CHECK(pen.grads.at("w").data() == std::vector<double>(3, 0.0));
}

TEST_CASE("penalty hand arithmetic") {
    EwcState state;
    state.fisher_sum = make_fisher({1.0, 2.0});
    state.anchor.emplace("w", Tensor::row_vector({0.0, 0.0}));
    const Tensor theta = Tensor::row_vector({0.1, -0.2});
    const auto pen = ewc_penalty({{"w", &theta}}, state, 1.0);
    CHECK(pen.loss == doctest::Approx(0.045).epsilon(1e-12));
    CHECK(pen.grads.at("w").at(0) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(pen.grads.at("w").at(1) == doctest::Approx(-0.4).epsilon(1e-12));
}

TEST_CASE("penalty gradient matches finite differences at 1e-6") {
    Rng rng(77);
    EwcState state;
    std::vector<double> f(9);
    std::vector<double> anchor(9);
    for (std::size_t i = 0; i < 9; ++i) {
        f[i] = std::abs(rng.normal());
        anchor[i] = rng.normal();
    }
    state.fisher_sum = make_fisher(f);
    state.anchor.emplace("w", Tensor::row_vector(anchor));
    const double lambda = 0.37;

    Tensor theta({9});
    for (std::size_t i = 0; i < 9; ++i) {
        theta.at(i) = rng.normal();
    }
    const auto pen = ewc_penalty({{"w", &theta}}, state, lambda);

    const auto objective = [&](const std::vector<Tensor>& p) {
        return ewc_penalty({{"w", &p[0]}}, state, lambda).loss;
    };
    const std::vector<Tensor> fd = finite_difference_grad(objective, {theta}, 1e-5);
    CHECK(max_relative_error(pen.grads.at("w").data(), fd[0].data(), 1e-6) <= 1e-6);

    CHECK(pen.loss > 0.0);
}

TEST_CASE("parameters absent from the state contribute zero") {
    EwcState state;
    state.fisher_sum = make_fisher({2.0});
    state.anchor.emplace("w", Tensor::row_vector({1.0}));
    const Tensor w = Tensor::row_vector({3.0});
    const Tensor fresh = Tensor::row_vector({5.0, 5.0});
    const auto pen = ewc_penalty({{"w", &w}, {"new_factor", &fresh}}, state, 1.0);
    CHECK(pen.grads.count("new_factor") == 0);
    CHECK(pen.loss == doctest::Approx(0.5 * 2.0 * 4.0).epsilon(1e-12));
}

TEST_CASE("penalty shape mismatch is a contract error") {
    EwcState state;
    state.fisher_sum = make_fisher({1.0, 1.0});
    state.anchor.emplace("w", Tensor::row_vector({0.0, 0.0}));
    const Tensor wrong = Tensor::row_vector({1.0});
    CHECK_THROWS_AS(ewc_penalty({{"w", &wrong}}, state, 1.0), ContractError);
    const Tensor ok = Tensor::row_vector({1.0, 2.0});
    CHECK_THROWS_AS(ewc_penalty({{"other", &ok}}, state, 1.0), ContractError);
}

TEST_CASE("important fraction counting") {
    const FisherDiagonal f = make_fisher({0.2, 0.6, 1.0});
    CHECK(important_fraction(f, 0.25, true) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(important_fraction(f, 0.0, true) == 1.0);
    CHECK(important_fraction(f, 0.0, false) == 1.0);

    // raw thresholding does not rescale
    CHECK(important_fraction(f, 0.5, false) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    CHECK_THROWS_AS(important_fraction(FisherDiagonal{}, 0.25, true), ArgumentError);
    CHECK_THROWS_AS(important_fraction(make_fisher({0.0, 0.0}), 0.25, true), ArgumentError);
    CHECK_THROWS_AS(important_fraction(f, -0.1, true), ArgumentError);
}

TEST_CASE("with a fixed absolute threshold the fraction never decreases under accumulation") {
    Rng rng(13);
    FisherDiagonal total = make_fisher(std::vector<double>(16, 0.0));
    double prev = 0.0;
    for (int iter = 0; iter < 5; ++iter) {
        std::vector<double> v(16);
        for (double& x : v) {
            x = std::abs(rng.normal(0.0, 0.3));
        }
        total = accumulate_fisher(total, make_fisher(std::move(v)));
        const double frac = important_fraction(total, 0.25, false);
        CHECK(frac >= prev);
        prev = frac;
    }
}
