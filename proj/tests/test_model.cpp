#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "clwf/model.hpp"
#include "clwf/rng.hpp"

using namespace clwf;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d_in = 6;
    cfg.d_model = 16;
    cfg.n_blocks = 2;
    cfg.n_classes = 4;
    cfg.k = 2;
    return cfg;
}

Sample random_sample(Rng& rng, int seq_len, int d_in, int n_classes) {
    Sample s;
    s.x = Tensor({static_cast<std::size_t>(seq_len), static_cast<std::size_t>(d_in)});
    for (std::size_t i = 0; i < s.x.numel(); ++i) {
        s.x.at(i) = rng.normal();
    }
    s.y = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_classes)));
    return s;
}

ToyEncoderClassifier make_model(const ModelConfig& cfg, std::uint64_t seed,
                                const std::vector<std::string>& tasks, double factor_scale) {
    ToyEncoderClassifier model(cfg);
    Rng rng(seed);
    model.init_params(rng);
    for (const std::string& task : tasks) {
        model.add_language(task, factor_scale, rng);
    }
    return model;
}

} // namespace

TEST_CASE("zero network produces zero logits, hence a uniform softmax") {
    ModelConfig cfg = tiny_config();
    ToyEncoderClassifier model(cfg); // all weights zero
    Rng rng(1);
    model.add_language("a", 0.0, rng);
    Sample s = random_sample(rng, 3, cfg.d_in, cfg.n_classes);
    const Tensor logits = model.forward(s.x, "a");
    CHECK(logits.data() == std::vector<double>(4, 0.0));
    const double loss = model.loss({&s}, "a");
    CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("uniform logits cost log n_classes; confident logits cost nearly nothing") {
    ModelConfig cfg = tiny_config();
    cfg.n_classes = 10;
    ToyEncoderClassifier model(cfg);
    Rng rng(2);
    model.add_language("a", 0.0, rng);
    Sample s = random_sample(rng, 3, cfg.d_in, cfg.n_classes);
    CHECK(model.loss({&s}, "a") == doctest::Approx(std::log(10.0)).epsilon(1e-12));

    // a huge bias toward the true class drives the loss to zero
    auto params = model.named_params();
    params.at("output_proj/bias")->at(static_cast<std::size_t>(s.y)) = 200.0;
    CHECK(model.loss({&s}, "a") == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(model.loss({&s}, "a") >= 0.0);
}

TEST_CASE("empty batch and bad labels are rejected") {
    ModelConfig cfg = tiny_config();
    ToyEncoderClassifier model(cfg);
    Rng rng(3);
    model.add_language("a", 0.0, rng);
    CHECK_THROWS_AS(model.loss({}, "a"), ArgumentError);
    Sample s = random_sample(rng, 3, cfg.d_in, cfg.n_classes);
    s.y = cfg.n_classes;
    CHECK_THROWS_AS(model.loss({&s}, "a"), ArgumentError);
    s.y = 0;
    CHECK_THROWS_AS(model.loss({&s}, "nope"), LookupError);
    Sample bad = s;
    bad.x = Tensor({3, static_cast<std::size_t>(cfg.d_in + 1)});
    CHECK_THROWS_AS(model.loss({&bad}, "a"), ShapeError);
}

TEST_CASE("frame permutation does not move mean-pooled logits") {
    ModelConfig cfg = tiny_config();
    auto model = make_model(cfg, 11, {"a"}, 0.3);
    Rng rng(4);
    Sample s = random_sample(rng, 5, cfg.d_in, cfg.n_classes);
    const Tensor logits = model.forward(s.x, "a");

    Tensor permuted = s.x;
    const std::vector<std::size_t> order{4, 2, 0, 3, 1};
    for (std::size_t r = 0; r < order.size(); ++r) {
        for (std::size_t c = 0; c < s.x.cols(); ++c) {
            permuted.at(r, c) = s.x.at(order[r], c);
        }
    }
    const Tensor logits2 = model.forward(permuted, "a");
    for (std::size_t j = 0; j < logits.numel(); ++j) {
        CHECK(logits2.at(j) == doctest::Approx(logits.at(j)).epsilon(1e-12));
    }
}

TEST_CASE("model logits match the dense folded reference within 1e-9 on 100 inputs") {
    ModelConfig cfg = tiny_config();
    auto model = make_model(cfg, 21, {"a", "b"}, 0.4);
    Rng rng(5);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const Sample s = random_sample(rng, 4, cfg.d_in, cfg.n_classes);
        for (const char* task : {"a", "b"}) {
            const Tensor got = model.forward(s.x, task);
            const Tensor want = model.dense_reference_logits(s.x, task);
            for (std::size_t j = 0; j < got.numel(); ++j) {
                worst = std::max(worst, std::abs(got.at(j) - want.at(j)));
            }
        }
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("batched logits equal per-sample logits") {
    ModelConfig cfg = tiny_config();
    auto model = make_model(cfg, 31, {"a"}, 0.2);
    Rng rng(6);
    std::vector<Sample> samples;
    std::vector<const Sample*> batch;
    for (int i = 0; i < 7; ++i) {
        samples.push_back(random_sample(rng, 4, cfg.d_in, cfg.n_classes));
    }
    for (const Sample& s : samples) {
        batch.push_back(&s);
    }
    const Tensor batched = model.batch_logits(batch, "a");
    for (std::size_t r = 0; r < samples.size(); ++r) {
        const Tensor single = model.forward(samples[r].x, "a");
        for (std::size_t j = 0; j < single.numel(); ++j) {
            CHECK(batched.at(r, j) == doctest::Approx(single.at(j)).epsilon(1e-12));
        }
    }
}

TEST_CASE("predict takes the lowest argmax") {
    ModelConfig cfg = tiny_config();
    cfg.n_classes = 3;
    ToyEncoderClassifier model(cfg);
    Rng rng(7);
    model.add_language("a", 0.0, rng);
    // zero network: all logits equal -> tie broken toward class 0
    Sample s = random_sample(rng, 3, cfg.d_in, cfg.n_classes);
    CHECK(model.predict(s.x, "a") == 0);

    auto params = model.named_params();
    params.at("output_proj/bias")->at(1) = 0.9;
    params.at("output_proj/bias")->at(2) = 0.3;
    CHECK(model.predict(s.x, "a") == 1);
}

TEST_CASE("add_language leaves existing parameters bitwise intact") {
    ModelConfig cfg = tiny_config();
    auto model = make_model(cfg, 41, {"a"}, 0.3);
    Rng rng(8);
    const Sample s = random_sample(rng, 4, cfg.d_in, cfg.n_classes);

    const std::uint64_t hash_before = model.param_hash();
    const std::size_t count_before = model.param_count();
    const Tensor logits_before = model.forward(s.x, "a");

    Rng rng2(9);
    model.add_language("b", 0.05, rng2);

    const Tensor logits_after = model.forward(s.x, "a");
    CHECK(logits_before.data() == logits_after.data()); // bitwise

    // old parameters unchanged: hash over the original names
    std::uint64_t hash_after_old_only = 0xcbf29ce484222325ULL;
    model.visit_params([&](const std::string& name, const Tensor& value, bool,
                           const std::string& task) {
        if (task != "b") {
            hash_after_old_only = fnv1a(name.data(), name.size(), hash_after_old_only);
            hash_after_old_only =
                fnv1a(value.data().data(), value.numel() * sizeof(double), hash_after_old_only);
        }
    });
    CHECK(hash_after_old_only == hash_before);

    // parameter growth: n_factorized_layers * 2k(d_in + d_out)
    const std::size_t expected_growth =
        static_cast<std::size_t>(2 * cfg.k * (cfg.d_in + cfg.d_model)) +
        static_cast<std::size_t>(cfg.n_blocks) *
            static_cast<std::size_t>(2 * cfg.k * (cfg.d_model + cfg.d_model));
    CHECK(model.param_count() - count_before == expected_growth);
    CHECK(model.factorized_layer_count() == static_cast<std::size_t>(1 + cfg.n_blocks));

    // duplicates are rejected and leave the model untouched
    const std::uint64_t hash_all = model.param_hash();
    Rng rng3(10);
    CHECK_THROWS_AS(model.add_language("b", 0.05, rng3), ConflictError);
    CHECK(model.param_hash() == hash_all);
}

TEST_CASE("end-to-end gradients match finite differences on the acceptance config") {
    ModelConfig cfg;
    cfg.d_in = 6;
    cfg.d_model = 16;
    cfg.n_blocks = 2;
    cfg.n_classes = 4;
    cfg.k = 2;
    auto model = make_model(cfg, 51, {"a"}, 0.3);
    Rng rng(11);
    std::vector<Sample> samples;
    for (int i = 0; i < 3; ++i) {
        samples.push_back(random_sample(rng, 3, cfg.d_in, cfg.n_classes));
    }
    std::vector<const Sample*> batch{&samples[0], &samples[1], &samples[2]};

    const auto lg = model.loss_and_grads(batch, "a");

    std::vector<std::string> names;
    std::vector<Tensor> values;
    model.visit_params([&](const std::string& name, Tensor& value, bool, const std::string&) {
        names.push_back(name);
        values.push_back(value);
    });
    const auto objective = [&](const std::vector<Tensor>& params) {
        ToyEncoderClassifier probe(cfg);
        Rng tmp(1);
        probe.add_language("a", 0.0, tmp);
        std::size_t idx = 0;
        probe.visit_params([&](const std::string&, Tensor& value, bool, const std::string&) {
            value = params[idx++];
        });
        return probe.loss(batch, "a");
    };
    const std::vector<Tensor> fd = finite_difference_grad(objective, values, 1e-5);
    double worst = 0.0;
    for (std::size_t i = 0; i < names.size(); ++i) {
        worst = std::max(worst, max_relative_error(lg.grads.at(names[i]).data(), fd[i].data()));
    }
    CHECK(worst <= 1e-4);
    CHECK(lg.grads.size() == names.size()); // every parameter class received a gradient
}

TEST_CASE("attention path: forward determinism and gradient check") {
    ModelConfig cfg;
    cfg.d_in = 5;
    cfg.d_model = 8;
    cfg.n_blocks = 1;
    cfg.n_classes = 3;
    cfg.k = 2;
    cfg.use_attention = true;
    auto model = make_model(cfg, 61, {"a"}, 0.3);
    Rng rng(12);
    std::vector<Sample> samples;
    for (int i = 0; i < 2; ++i) {
        samples.push_back(random_sample(rng, 4, cfg.d_in, cfg.n_classes));
    }
    std::vector<const Sample*> batch{&samples[0], &samples[1]};

    CHECK(model.loss(batch, "a") == model.loss(batch, "a"));
    CHECK(model.factorized_layer_count() == 1u + 4u + 1u); // input + q,k,v,o + linear

    const auto lg = model.loss_and_grads(batch, "a");
    std::vector<std::string> names;
    std::vector<Tensor> values;
    model.visit_params([&](const std::string& name, Tensor& value, bool, const std::string&) {
        names.push_back(name);
        values.push_back(value);
    });
    const auto objective = [&](const std::vector<Tensor>& params) {
        ToyEncoderClassifier probe(cfg);
        Rng tmp(1);
        probe.add_language("a", 0.0, tmp);
        std::size_t idx = 0;
        probe.visit_params([&](const std::string&, Tensor& value, bool, const std::string&) {
            value = params[idx++];
        });
        return probe.loss(batch, "a");
    };
    const std::vector<Tensor> fd = finite_difference_grad(objective, values, 1e-5);
    double worst = 0.0;
    for (std::size_t i = 0; i < names.size(); ++i) {
        worst = std::max(worst, max_relative_error(lg.grads.at(names[i]).data(), fd[i].data()));
    }
    CHECK(worst <= 1e-4);

    // batched logits agree with single-sample logits on the attention path too
    const Tensor batched = model.batch_logits(batch, "a");
    const Tensor single = model.forward(samples[1].x, "a");
    for (std::size_t j = 0; j < single.numel(); ++j) {
        CHECK(batched.at(1, j) == doctest::Approx(single.at(j)).epsilon(1e-12));
    }
}

TEST_CASE("dropout masks perturb training loss but never evaluation") {
    ModelConfig cfg = tiny_config();
    cfg.dropout = 0.5;
    auto model = make_model(cfg, 71, {"a"}, 0.2);
    Rng rng(13);
    Sample s = random_sample(rng, 3, cfg.d_in, cfg.n_classes);

    CHECK(model.loss({&s}, "a") == model.loss({&s}, "a")); // eval path has no masks

    Rng d1(100);
    Rng d2(100);
    Rng d3(101);
    const double a = model.loss_and_grads({&s}, "a", &d1).loss;
    const double b = model.loss_and_grads({&s}, "a", &d2).loss;
    const double c = model.loss_and_grads({&s}, "a", &d3).loss;
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("trainability masks select the gradient set") {
    ModelConfig cfg = tiny_config();
    auto model = make_model(cfg, 81, {"a", "b"}, 0.2);
    Rng rng(14);
    Sample s = random_sample(rng, 3, cfg.d_in, cfg.n_classes);

    model.set_shared_trainable(false);
    model.set_all_tasks_trainable(false);
    model.set_task_trainable("b", true);
    const auto lg = model.loss_and_grads({&s}, "b");
    CHECK(lg.grads.size() == model.task_param_names("b").size());
    for (const auto& [name, g] : lg.grads) {
        CHECK(name.find("/task/b/") != std::string::npos);
    }

    model.set_shared_trainable(true);
    const auto lg2 = model.loss_and_grads({&s}, "b");
    CHECK(lg2.grads.size() ==
          model.task_param_names("b").size() + model.shared_param_names().size());
}
