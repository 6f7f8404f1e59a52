#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "clwf/metrics.hpp"
#include "clwf/trainer.hpp"

using namespace clwf;
namespace fs = std::filesystem;

namespace {

GenConfig tiny_gen() {
    GenConfig cfg;
    cfg.d_in = 12;
    cfg.seq_len = 4;
    cfg.n_classes = 5;
    cfg.d_latent = 6;
    cfg.n_train = 160;
    cfg.n_dev = 50;
    cfg.n_test = 50;
    return cfg;
}

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.d_in = 12;
    cfg.d_model = 16;
    cfg.n_blocks = 2;
    cfg.n_classes = 5;
    cfg.k = 2;
    return cfg;
}

TrainPlan tiny_plan(std::uint64_t seed) {
    TrainPlan plan;
    plan.initial_steps = 240;
    plan.steps_per_iteration = 120;
    plan.batch_size = 16;
    plan.peak_lr = 3e-3;
    plan.warmup_steps = 40;
    plan.checkpoint_every = 60;
    plan.fisher_sample_cap = 64;
    plan.ewc = EwcSchedule{0.05, 10.0, 1000};
    plan.seed = seed;
    return plan;
}

std::uint64_t hash_params_matching(ToyEncoderClassifier& model,
                                   const std::function<bool(const std::string&)>& keep) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    model.visit_params([&](const std::string& name, Tensor& value, bool, const std::string&) {
        if (keep(name)) {
            h = fnv1a(name.data(), name.size(), h);
            h = fnv1a(value.data().data(), value.numel() * sizeof(double), h);
        }
    });
    return h;
}

double group_error(const TrainState& state, const TaskSuite& suite, int group) {
    double acc = 0.0;
    int n = 0;
    for (const std::string& task : suite.group_task_ids(group)) {
        acc += error_rate(*state.model, suite.make_split(task, Split::Test), task);
        ++n;
    }
    return acc / n;
}

fs::path temp_dir(const std::string& leaf) {
    const fs::path dir = fs::temp_directory_path() / "clwf_trainer_test" / leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("learning rate warms up linearly then decays as inverse square root") {
    TrainPlan plan;
    plan.peak_lr = 2e-4;
    plan.warmup_steps = 400;
    CHECK(lr_schedule(400, plan) == doctest::Approx(2e-4).epsilon(1e-12));
    CHECK(lr_schedule(1600, plan) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_schedule(1, plan) == doctest::Approx(2e-4 / 400).epsilon(1e-12));
    CHECK_THROWS_AS(lr_schedule(0, plan), ArgumentError);
}

TEST_CASE("EWC coefficient decays by steps of the decay factor") {
    TrainPlan plan;
    plan.ewc = EwcSchedule{0.001, 10.0, 10000};
    CHECK(ewc_lambda(0, plan) == doctest::Approx(0.001).epsilon(1e-12));
    CHECK(ewc_lambda(9999, plan) == doctest::Approx(0.001).epsilon(1e-12));
    CHECK(ewc_lambda(10000, plan) == doctest::Approx(0.0001).epsilon(1e-12));
    plan.ewc.decay_factor = 1.0;
    CHECK(ewc_lambda(123456, plan) == doctest::Approx(0.001).epsilon(1e-12));
    CHECK_THROWS_AS(ewc_lambda(-1, plan), ArgumentError);
}

TEST_CASE("gradient clipping rescales only above the threshold") {
    std::map<std::string, Tensor> grads;
    grads.emplace("a", Tensor::row_vector({4.0, 0.0}));
    grads.emplace("b", Tensor::row_vector({0.0, 0.0, 4.0, 4.0}));
    // global norm sqrt(48) ~ 6.93 > 4
    const double norm = clip_gradients(grads, 4.0);
    CHECK(norm == doctest::Approx(std::sqrt(48.0)).epsilon(1e-12));
    double post = 0.0;
    for (const auto& [name, g] : grads) {
        for (double v : g.data()) {
            post += v * v;
        }
    }
    CHECK(std::sqrt(post) <= 4.0 + 1e-12);
    CHECK(grads.at("a").at(0) == doctest::Approx(4.0 * 4.0 / std::sqrt(48.0)).epsilon(1e-12));

    std::map<std::string, Tensor> small;
    small.emplace("a", Tensor::row_vector({1.0, 1.0}));
    clip_gradients(small, 4.0);
    CHECK(small.at("a").data() == std::vector<double>{1.0, 1.0});

    std::map<std::string, Tensor> halved;
    halved.emplace("a", Tensor::row_vector({8.0}));
    clip_gradients(halved, 4.0);
    CHECK(halved.at("a").at(0) == doctest::Approx(4.0).epsilon(1e-12));

    std::map<std::string, Tensor> bad;
    Tensor nan_t({1});
    nan_t.at(0) = std::nan("");
    bad.emplace("layer/x", std::move(nan_t));
    try {
        clip_gradients(bad, 4.0);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("layer/x") != std::string::npos);
    }
}

TEST_CASE("adam fixed point and first-step magnitude") {
    ModelConfig mcfg = tiny_model();
    ToyEncoderClassifier model(mcfg);
    Rng rng(1);
    model.init_params(rng);
    TrainPlan plan = tiny_plan(1);
    AdamState adam;

    auto params = model.named_params();
    const std::vector<double> before = params.at("output_proj/bias")->data();
    std::map<std::string, Tensor> zero;
    zero.emplace("output_proj/bias", Tensor::zeros(params.at("output_proj/bias")->shape()));
    adam_update(model, zero, adam, 1e-3, plan);
    CHECK(params.at("output_proj/bias")->data() == before);

    // first step with gradient g moves each coordinate by ~ lr * sign(g)
    AdamState fresh;
    Tensor g = Tensor::zeros(params.at("output_proj/bias")->shape());
    g.at(0) = 0.5;
    g.at(1) = -0.25;
    std::map<std::string, Tensor> grads;
    grads.emplace("output_proj/bias", std::move(g));
    adam_update(model, grads, fresh, 1e-3, plan);
    CHECK(params.at("output_proj/bias")->at(0) ==
          doctest::Approx(before[0] - 1e-3).epsilon(1e-4));
    CHECK(params.at("output_proj/bias")->at(1) ==
          doctest::Approx(before[1] + 1e-3).epsilon(1e-4));

    std::map<std::string, Tensor> mismatched;
    mismatched.emplace("output_proj/bias", Tensor::row_vector({1.0}));
    CHECK_THROWS_AS(adam_update(model, mismatched, adam, 1e-3, plan), ContractError);
    std::map<std::string, Tensor> unknown;
    unknown.emplace("nope", Tensor::row_vector({1.0}));
    CHECK_THROWS_AS(adam_update(model, unknown, adam, 1e-3, plan), ContractError);
}

TEST_CASE("checkpoint averaging selects the best-scoring snapshots") {
    const auto snap = [](std::int64_t step, double score, double value) {
        ParamSnapshot s;
        s.step = step;
        s.dev_score = score;
        s.params.emplace("w", Tensor::row_vector({value}));
        return s;
    };
    // identical snapshots average to themselves
    const std::vector<ParamSnapshot> same{snap(1, 0.5, 1.25), snap(2, 0.5, 1.25),
                                          snap(3, 0.5, 1.25)};
    CHECK(average_checkpoints(same, 3).at("w").at(0) == doctest::Approx(1.25).epsilon(1e-15));

    const std::vector<ParamSnapshot> two{snap(1, 0.5, 1.0), snap(2, 0.5, 3.0)};
    CHECK(average_checkpoints(two, 2).at("w").at(0) == doctest::Approx(2.0).epsilon(1e-15));

    // scores 0.9, 0.8, 0.95 with n=2 pick the 0.95 and 0.9 snapshots
    const std::vector<ParamSnapshot> scored{snap(1, 0.9, 10.0), snap(2, 0.8, 999.0),
                                            snap(3, 0.95, 20.0)};
    CHECK(average_checkpoints(scored, 2).at("w").at(0) == doctest::Approx(15.0).epsilon(1e-15));

    CHECK_THROWS_AS(average_checkpoints(scored, 4), ArgumentError);
    CHECK_THROWS_AS(average_checkpoints(scored, 0), ArgumentError);
}

TEST_CASE("plan validation enforces EWC coefficients at the boundary") {
    TrainPlan plan = tiny_plan(1);
    plan.ewc.lambda0 = 0.0;
    CHECK_NOTHROW(plan.validate(Strategy::WfFinetune));
    CHECK_THROWS_AS(plan.validate(Strategy::WfEwc), ArgumentError);
    CHECK_THROWS_AS(plan.validate(Strategy::EwcOnly), ArgumentError);
    plan.ewc.lambda0 = 0.1;
    CHECK_NOTHROW(plan.validate(Strategy::WfEwc));
    plan.grad_clip_norm = 0.0;
    CHECK_THROWS_AS(plan.validate(Strategy::Vanilla), ArgumentError);
}

TEST_CASE("initial training learns group 0 and seeds the EWC state") {
    const TaskSuite suite = TaskSuite::generate(2, {2, 1}, 77, tiny_gen());
    TrainState state = train_initial(suite, tiny_plan(7), tiny_model(), true);

    CHECK(state.completed_iterations == 1);
    CHECK_FALSE(state.iteration_open);
    const double err = group_error(state, suite, 0);
    CHECK(err < 0.5); // well below the 0.8 chance floor

    REQUIRE(state.ewc.has_value());
    const auto shared = state.model->shared_param_names();
    CHECK(state.ewc->fisher_sum.values.size() == shared.size());
    for (const std::string& name : shared) {
        CHECK(state.ewc->fisher_sum.values.count(name) == 1);
        CHECK(state.ewc->anchor.count(name) == 1);
    }
    CHECK(state.ewc->iteration_count == 1);
    // anchor equals the current shared parameters
    for (const auto& [name, tensor] : state.model->named_params()) {
        if (state.ewc->anchor.count(name) != 0) {
            CHECK(state.ewc->anchor.at(name).data() == tensor->data());
        }
    }
}

TEST_CASE("same seed reproduces training bitwise; different seeds do not") {
    const TaskSuite suite = TaskSuite::generate(1, {2}, 78, tiny_gen());
    TrainPlan plan = tiny_plan(9);
    plan.initial_steps = 120;
    TrainState a = train_initial(suite, plan, tiny_model(), true);
    TrainState b = train_initial(suite, plan, tiny_model(), true);
    CHECK(a.model->param_hash() == b.model->param_hash());
    plan.seed = 10;
    TrainState c = train_initial(suite, plan, tiny_model(), true);
    CHECK(a.model->param_hash() != c.model->param_hash());
}

TEST_CASE("wf_frozen leaves shared parameters and old-task predictions bitwise intact") {
    const TaskSuite suite = TaskSuite::generate(2, {2, 1}, 79, tiny_gen());
    TrainPlan plan = tiny_plan(11);
    TrainState state = train_initial(suite, plan, tiny_model(), true);

    const auto is_shared = [](const std::string& name) {
        return name.find("/task/") == std::string::npos;
    };
    const auto old_factor = [](const std::string& name) {
        return name.find("/task/g0t") != std::string::npos;
    };
    const std::uint64_t shared_before = hash_params_matching(*state.model, is_shared);
    const std::uint64_t old_before = hash_params_matching(*state.model, old_factor);

    std::vector<int> predictions_before;
    const auto old_test = suite.make_split("g0t0", Split::Test);
    for (const Sample& s : old_test) {
        predictions_before.push_back(state.model->predict(s.x, "g0t0"));
    }

    continual_step(state, suite, {"g1t0"}, Strategy::WfFrozen);

    CHECK(hash_params_matching(*state.model, is_shared) == shared_before);
    CHECK(hash_params_matching(*state.model, old_factor) == old_before);
    for (std::size_t i = 0; i < old_test.size(); ++i) {
        CHECK(state.model->predict(old_test[i].x, "g0t0") == predictions_before[i]);
    }
    CHECK(state.completed_iterations == 2);
}

TEST_CASE("strategy trainability matrix is enforced bitwise over a whole iteration") {
    const TaskSuite suite = TaskSuite::generate(2, {2, 1}, 80, tiny_gen());
    const auto is_shared = [](const std::string& name) {
        return name.find("/task/") == std::string::npos;
    };
    const auto old_factor = [](const std::string& name) {
        return name.find("/task/g0t") != std::string::npos;
    };
    const auto new_factor = [](const std::string& name) {
        return name.find("/task/g1t") != std::string::npos;
    };

    struct Expect {
        Strategy strategy;
        bool shared_move;
        bool new_factors_move;
    };
    for (const Expect e : {Expect{Strategy::Vanilla, true, false},
                           Expect{Strategy::EwcOnly, true, false},
                           Expect{Strategy::WfFrozen, false, true},
                           Expect{Strategy::WfFinetune, true, true},
                           Expect{Strategy::WfEwc, true, true}}) {
        TrainPlan plan = tiny_plan(13);
        plan.initial_steps = 120;
        TrainState state =
            train_initial(suite, plan, tiny_model(), strategy_uses_factors(e.strategy));
        const std::uint64_t shared_before = hash_params_matching(*state.model, is_shared);
        const std::uint64_t old_before = hash_params_matching(*state.model, old_factor);

        continual_step(state, suite, {"g1t0"}, e.strategy);

        CHECK(old_before == hash_params_matching(*state.model, old_factor)); // always frozen
        CHECK((hash_params_matching(*state.model, is_shared) != shared_before) ==
              e.shared_move);
        if (strategy_uses_factors(e.strategy)) {
            // new factors moved away from their random init
            TrainState fresh =
                train_initial(suite, plan, tiny_model(), strategy_uses_factors(e.strategy));
            Rng reg(derive_seed(plan.seed, "add_language", 1));
            fresh.model->add_language("g1t0", fresh.model_cfg.init_scale, reg);
            CHECK(hash_params_matching(*state.model, new_factor) !=
                  hash_params_matching(*fresh.model, new_factor));
        }
    }
}

TEST_CASE("ewc strategies decompose the loss and bind the shared parameters") {
    const TaskSuite suite = TaskSuite::generate(2, {2, 1}, 81, tiny_gen());
    TrainPlan plan = tiny_plan(17);
    plan.ewc.lambda0 = 5.0; // strong penalty so it visibly binds
    TrainState state = train_initial(suite, plan, tiny_model(), true);

    bool saw_positive_penalty = false;
    begin_continual(state, suite, {"g1t0"}, Strategy::WfEwc);
    train_steps(state, suite, state.iteration_steps, [&](const StepInfo& info) {
        CHECK(info.total_loss == doctest::Approx(info.task_loss + info.penalty_loss).epsilon(1e-12));
        if (info.penalty_loss > 0.0) {
            saw_positive_penalty = true;
        }
        CHECK(info.lambda == doctest::Approx(ewc_lambda(info.step, plan)).epsilon(1e-12));
    });
    finalize_iteration(state, suite);
    CHECK(saw_positive_penalty);
    CHECK(state.ewc->iteration_count == 2);
    CHECK(state.ewc->fisher_sum.n_samples > 0);
}

TEST_CASE("a zero coefficient makes wf_ewc reproduce wf_finetune step for step") {
    const TaskSuite suite = TaskSuite::generate(2, {2, 1}, 82, tiny_gen());
    TrainPlan plan = tiny_plan(19);
    plan.initial_steps = 120;
    plan.ewc.lambda0 = 0.0;

    TrainState a = train_initial(suite, plan, tiny_model(), true);
    TrainState b = train_initial(suite, plan, tiny_model(), true);
    CHECK(a.model->param_hash() == b.model->param_hash());

    std::vector<double> losses_a;
    begin_continual(a, suite, {"g1t0"}, Strategy::WfEwc);
    train_steps(a, suite, a.iteration_steps,
                [&](const StepInfo& info) { losses_a.push_back(info.total_loss); });
    finalize_iteration(a, suite);

    std::size_t idx = 0;
    begin_continual(b, suite, {"g1t0"}, Strategy::WfFinetune);
    train_steps(b, suite, b.iteration_steps, [&](const StepInfo& info) {
        REQUIRE(idx < losses_a.size());
        CHECK(info.total_loss == losses_a[idx]);
        ++idx;
    });
    finalize_iteration(b, suite);
    CHECK(idx == losses_a.size());
    CHECK(a.model->param_hash() == b.model->param_hash());
}

TEST_CASE("ewc anchoring pulls updates back toward the anchor") {
    // With lambda = 0 the shared parameters drift further from the anchor
    // than with a strong penalty.
    const TaskSuite suite = TaskSuite::generate(2, {2, 1}, 83, tiny_gen());
    TrainPlan plan = tiny_plan(23);
    plan.initial_steps = 160;

    const auto drift = [&](double lambda0) {
        TrainPlan p = plan;
        p.ewc.lambda0 = lambda0;
        TrainState state = train_initial(suite, p, tiny_model(), true);
        std::map<std::string, Tensor> anchor = state.ewc->anchor;
        continual_step(state, suite, {"g1t0"}, Strategy::WfEwc);
        double sq = 0.0;
        for (const auto& [name, tensor] : state.model->named_params()) {
            auto it = anchor.find(name);
            if (it == anchor.end()) {
                continue;
            }
            for (std::size_t i = 0; i < tensor->numel(); ++i) {
                const double d = tensor->at(i) - it->second.at(i);
                sq += d * d;
            }
        }
        return std::sqrt(sq);
    };
    CHECK(drift(50.0) < drift(0.0));
}

TEST_CASE("fisher accumulates monotonically across iterations and anchors refresh") {
    const TaskSuite suite = TaskSuite::generate(3, {2, 1, 1}, 84, tiny_gen());
    TrainPlan plan = tiny_plan(29);
    plan.initial_steps = 120;
    plan.steps_per_iteration = 60;
    TrainState state = train_initial(suite, plan, tiny_model(), true);
    const FisherDiagonal after0 = state.ewc->fisher_sum;

    continual_step(state, suite, {"g1t0"}, Strategy::WfEwc);
    const FisherDiagonal after1 = state.ewc->fisher_sum;
    for (const auto& [name, t] : after0.values) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            CHECK(after1.values.at(name).at(i) >= t.at(i));
        }
    }
    CHECK(after1.n_samples > after0.n_samples);

    // anchor refreshed to the post-iteration parameters
    for (const auto& [name, tensor] : state.model->named_params()) {
        if (state.ewc->anchor.count(name) != 0) {
            CHECK(state.ewc->anchor.at(name).data() == tensor->data());
        }
    }

    // fixed-anchor mode keeps the iteration-0 anchor
    TrainPlan fixed = plan;
    fixed.refresh_anchor = false;
    TrainState fstate = train_initial(suite, fixed, tiny_model(), true);
    const auto anchor0 = fstate.ewc->anchor;
    continual_step(fstate, suite, {"g1t0"}, Strategy::WfEwc);
    for (const auto& [name, t] : anchor0) {
        CHECK(fstate.ewc->anchor.at(name).data() == t.data());
    }
}

TEST_CASE("continual_step argument and state errors") {
    const TaskSuite suite = TaskSuite::generate(2, {2, 1}, 85, tiny_gen());
    TrainPlan plan = tiny_plan(31);
    plan.initial_steps = 60;
    TrainState state = train_initial(suite, plan, tiny_model(), true);

    CHECK_THROWS_AS(continual_step(state, suite, {"g0t0"}, Strategy::WfEwc), ConflictError);
    CHECK_THROWS_AS(continual_step(state, suite, {"unknown"}, Strategy::WfEwc), LookupError);
    CHECK_THROWS_AS(continual_step(state, suite, {}, Strategy::WfEwc), ArgumentError);

    TrainState no_ewc = train_initial(suite, plan, tiny_model(), true);
    no_ewc.ewc.reset();
    CHECK_THROWS_AS(continual_step(no_ewc, suite, {"g1t0"}, Strategy::WfEwc), StateError);
    CHECK_NOTHROW(continual_step(no_ewc, suite, {"g1t0"}, Strategy::WfFinetune));

    TrainState shared_only = train_initial(suite, plan, tiny_model(), false);
    CHECK_THROWS_AS(continual_step(shared_only, suite, {"g1t0"}, Strategy::WfFrozen), StateError);
}

TEST_CASE("vanilla training on a new group forgets the old group") {
    GenConfig gen = tiny_gen();
    gen.n_train = 240;
    const TaskSuite suite = TaskSuite::generate(2, {2, 1}, 86, gen);
    TrainPlan plan = tiny_plan(37);
    plan.initial_steps = 600;
    plan.steps_per_iteration = 600;
    TrainState state = train_initial(suite, plan, tiny_model(), false);
    const double before = group_error(state, suite, 0);
    continual_step(state, suite, {"g1t0"}, Strategy::Vanilla);
    const double after = group_error(state, suite, 0);
    CHECK(after > before);
}

TEST_CASE("checkpoints round-trip and resume within float32 precision") {
    const TaskSuite suite = TaskSuite::generate(2, {2, 1}, 87, tiny_gen());
    TrainPlan plan = tiny_plan(41);
    plan.initial_steps = 120;
    TrainState state = train_initial(suite, plan, tiny_model(), true);

    const fs::path dir = temp_dir("roundtrip");
    save_checkpoint(state, dir);

    // identical state saved twice hashes identically
    const fs::path dir2 = temp_dir("roundtrip2");
    save_checkpoint(state, dir2);
    CHECK(checkpoint_hash(dir) == checkpoint_hash(dir2));

    TrainState loaded = load_checkpoint(dir);
    CHECK(loaded.completed_iterations == state.completed_iterations);
    CHECK(loaded.model->task_ids() == state.model->task_ids());
    for (const auto& [name, tensor] : state.model->named_params()) {
        const Tensor& other = *loaded.model->named_params().at(name);
        for (std::size_t i = 0; i < tensor->numel(); ++i) {
            CHECK(other.at(i) == doctest::Approx(tensor->at(i)).epsilon(1e-6));
            CHECK(static_cast<float>(other.at(i)) == static_cast<float>(tensor->at(i)));
        }
    }
    REQUIRE(loaded.ewc.has_value());
    CHECK(loaded.ewc->fisher_sum.n_samples == state.ewc->fisher_sum.n_samples);
    CHECK(loaded.ewc->iteration_count == state.ewc->iteration_count);
    CHECK(loaded.adam.size() == state.adam.size());

    // the saved checkpoint reproduces itself after a round trip
    const fs::path dir3 = temp_dir("roundtrip3");
    save_checkpoint(loaded, dir3);
    CHECK(checkpoint_hash(dir3) == checkpoint_hash(dir));
}

TEST_CASE("mid-iteration save and resume matches uninterrupted training within 1e-6") {
    const TaskSuite suite = TaskSuite::generate(2, {2, 1}, 88, tiny_gen());
    TrainPlan plan = tiny_plan(43);
    plan.initial_steps = 120;

    // uninterrupted: initial training + 30 continual steps + 1 more
    TrainState full = train_initial(suite, plan, tiny_model(), true);
    begin_continual(full, suite, {"g1t0"}, Strategy::WfEwc);
    train_steps(full, suite, 30);

    const fs::path dir = temp_dir("resume");
    save_checkpoint(full, dir);

    train_steps(full, suite, 1);

    TrainState resumed = load_checkpoint(dir);
    CHECK(resumed.iteration_open);
    CHECK(resumed.step_in_iteration == 30);
    train_steps(resumed, suite, 1);

    for (const auto& [name, tensor] : full.model->named_params()) {
        const Tensor& other = *resumed.model->named_params().at(name);
        for (std::size_t i = 0; i < tensor->numel(); ++i) {
            CHECK(std::abs(other.at(i) - tensor->at(i)) < 1e-6);
        }
    }
}

TEST_CASE("checkpoint loading rejects corrupted manifests") {
    const TaskSuite suite = TaskSuite::generate(1, {1}, 89, tiny_gen());
    TrainPlan plan = tiny_plan(47);
    plan.initial_steps = 60;
    TrainState state = train_initial(suite, plan, tiny_model(), true);
    const fs::path dir = temp_dir("corrupt");
    save_checkpoint(state, dir);

    // missing factor tensors for a registered task
    {
        auto manifest = nlohmann::ordered_json::parse(std::ifstream(dir / "manifest.json"));
        manifest["tensors"]["params.bin"].erase("input_proj/task/g0t0/r_m/0");
        std::ofstream out(dir / "manifest.json");
        out << manifest.dump(2) << '\n';
    }
    try {
        load_checkpoint(dir);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("g0t0") != std::string::npos);
    }

    // version mismatch
    save_checkpoint(state, dir);
    {
        auto manifest = nlohmann::ordered_json::parse(std::ifstream(dir / "manifest.json"));
        manifest["format_version"] = 999;
        std::ofstream out(dir / "manifest.json");
        out << manifest.dump(2) << '\n';
    }
    CHECK_THROWS_AS(load_checkpoint(dir), FormatError);

    CHECK_THROWS_AS(load_checkpoint(temp_dir("empty")), IoError);
}
