#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include <json.hpp>

#include "clwf/log.hpp"
#include "clwf/trainer.hpp"

namespace clwf {

using nlohmann::ordered_json;

namespace {

constexpr int kFormatVersion = 1;

struct TensorEntry {
    std::string name;
    const Tensor* tensor;
};

void write_bin(const std::filesystem::path& path, const std::vector<TensorEntry>& entries,
               ordered_json& index) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("save_checkpoint: cannot open '" + path.string() + "'");
    }
    std::uint64_t offset = 0;
    std::vector<float> buf;
    for (const TensorEntry& e : entries) {
        const std::size_t n = e.tensor->numel();
        buf.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            buf[i] = static_cast<float>(e.tensor->at(i));
        }
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(n * sizeof(float)));
        ordered_json meta;
        meta["shape"] = e.tensor->shape();
        meta["dtype"] = "f32";
        meta["byte_offset"] = offset;
        meta["length"] = n * sizeof(float);
        index[e.name] = std::move(meta);
        offset += n * sizeof(float);
    }
    if (!out) {
        throw IoError("save_checkpoint: write failed for '" + path.string() + "'");
    }
}

std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("load_checkpoint: cannot open '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Tensor read_tensor(const std::vector<char>& blob, const ordered_json& meta,
                   const std::string& name) {
    std::vector<std::size_t> shape;
    for (const auto& d : meta.at("shape")) {
        shape.push_back(d.get<std::size_t>());
    }
    const auto offset = meta.at("byte_offset").get<std::uint64_t>();
    const auto length = meta.at("length").get<std::uint64_t>();
    Tensor t(shape);
    if (length != t.numel() * sizeof(float)) {
        throw FormatError("load_checkpoint: length of '" + name + "' disagrees with its shape");
    }
    if (offset + length > blob.size()) {
        throw FormatError("load_checkpoint: '" + name + "' extends past the payload");
    }
    for (std::size_t i = 0; i < t.numel(); ++i) {
        float v;
        std::memcpy(&v, blob.data() + offset + i * sizeof(float), sizeof(float));
        t.at(i) = static_cast<double>(v);
    }
    return t;
}

ordered_json plan_json(const TrainPlan& plan) {
    ordered_json j;
    j["initial_steps"] = plan.initial_steps;
    j["steps_per_iteration"] = plan.steps_per_iteration;
    j["batch_size"] = plan.batch_size;
    j["peak_lr"] = plan.peak_lr;
    j["warmup_steps"] = plan.warmup_steps;
    j["grad_clip_norm"] = plan.grad_clip_norm;
    j["adam_beta1"] = plan.adam_beta1;
    j["adam_beta2"] = plan.adam_beta2;
    j["adam_eps"] = plan.adam_eps;
    j["ewc_lambda0"] = plan.ewc.lambda0;
    j["ewc_decay_factor"] = plan.ewc.decay_factor;
    j["ewc_decay_interval_steps"] = plan.ewc.decay_interval_steps;
    j["fisher_estimator"] = estimator_name(plan.fisher_estimator);
    j["fisher_sample_cap"] = plan.fisher_sample_cap;
    j["checkpoint_every"] = plan.checkpoint_every;
    j["average_last_n"] = plan.average_last_n;
    j["refresh_anchor"] = plan.refresh_anchor;
    j["seed"] = plan.seed;
    return j;
}

TrainPlan plan_from_json(const ordered_json& j) {
    TrainPlan plan;
    plan.initial_steps = j.at("initial_steps").get<std::int64_t>();
    plan.steps_per_iteration = j.at("steps_per_iteration").get<std::int64_t>();
    plan.batch_size = j.at("batch_size").get<int>();
    plan.peak_lr = j.at("peak_lr").get<double>();
    plan.warmup_steps = j.at("warmup_steps").get<std::int64_t>();
    plan.grad_clip_norm = j.at("grad_clip_norm").get<double>();
    plan.adam_beta1 = j.at("adam_beta1").get<double>();
    plan.adam_beta2 = j.at("adam_beta2").get<double>();
    plan.adam_eps = j.at("adam_eps").get<double>();
    plan.ewc.lambda0 = j.at("ewc_lambda0").get<double>();
    plan.ewc.decay_factor = j.at("ewc_decay_factor").get<double>();
    plan.ewc.decay_interval_steps = j.at("ewc_decay_interval_steps").get<std::int64_t>();
    plan.fisher_estimator = estimator_from_name(j.at("fisher_estimator").get<std::string>());
    plan.fisher_sample_cap = j.at("fisher_sample_cap").get<std::int64_t>();
    plan.checkpoint_every = j.at("checkpoint_every").get<std::int64_t>();
    plan.average_last_n = j.at("average_last_n").get<int>();
    plan.refresh_anchor = j.at("refresh_anchor").get<bool>();
    plan.seed = j.at("seed").get<std::uint64_t>();
    return plan;
}

ordered_json model_json(const ModelConfig& cfg) {
    ordered_json j;
    j["d_in"] = cfg.d_in;
    j["d_model"] = cfg.d_model;
    j["n_blocks"] = cfg.n_blocks;
    j["n_classes"] = cfg.n_classes;
    j["k"] = cfg.k;
    j["activation"] = activation_name(cfg.activation);
    j["use_attention"] = cfg.use_attention;
    j["dropout"] = cfg.dropout;
    j["init_scale"] = cfg.init_scale;
    return j;
}

ModelConfig model_from_json(const ordered_json& j) {
    ModelConfig cfg;
    cfg.d_in = j.at("d_in").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_blocks = j.at("n_blocks").get<int>();
    cfg.n_classes = j.at("n_classes").get<int>();
    cfg.k = j.at("k").get<int>();
    cfg.activation = activation_from_name(j.at("activation").get<std::string>());
    cfg.use_attention = j.at("use_attention").get<bool>();
    cfg.dropout = j.at("dropout").get<double>();
    cfg.init_scale = j.at("init_scale").get<double>();
    return cfg;
}

} // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("save_checkpoint: cannot create '" + dir.string() + "': " + ec.message());
    }

    ordered_json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["model"] = model_json(state.model_cfg);
    manifest["plan"] = plan_json(state.plan);
    manifest["strategy"] = strategy_name(state.strategy);
    manifest["use_factors"] = state.use_factors;
    manifest["iteration"] = state.completed_iterations;
    manifest["step"] = state.step_in_iteration;
    manifest["iteration_open"] = state.iteration_open;
    manifest["iteration_steps"] = state.iteration_steps;
    manifest["active_tasks"] = state.active_tasks;
    manifest["tasks"] = state.model->task_ids();
    // Every stream is derived from (seed, purpose, iteration, step), so the
    // master seed plus the step counters above restore the RNG exactly.
    manifest["rng_state"] = {{"master_seed", state.plan.seed}};

    ordered_json tensors;

    std::vector<TensorEntry> params;
    for (const auto& [name, tensor] : state.model->named_params()) {
        params.push_back({name, tensor});
    }
    ordered_json params_index;
    write_bin(dir / "params.bin", params, params_index);
    tensors["params.bin"] = std::move(params_index);

    ordered_json adam_steps;
    if (!state.adam.empty()) {
        std::vector<TensorEntry> adam_entries;
        std::vector<std::unique_ptr<Tensor>> owned;
        for (const auto& [name, mom] : state.adam) {
            owned.push_back(std::make_unique<Tensor>(
                std::vector<std::size_t>{mom.m.size()}, mom.m));
            adam_entries.push_back({"adam/m/" + name, owned.back().get()});
            owned.push_back(std::make_unique<Tensor>(
                std::vector<std::size_t>{mom.v.size()}, mom.v));
            adam_entries.push_back({"adam/v/" + name, owned.back().get()});
            adam_steps[name] = mom.t;
        }
        ordered_json adam_index;
        write_bin(dir / "adam.bin", adam_entries, adam_index);
        tensors["adam.bin"] = std::move(adam_index);
    }
    manifest["adam_steps"] = std::move(adam_steps);

    if (state.ewc.has_value()) {
        std::vector<TensorEntry> ewc_entries;
        for (const auto& [name, tensor] : state.ewc->fisher_sum.values) {
            ewc_entries.push_back({"ewc/fisher/" + name, &tensor});
        }
        for (const auto& [name, tensor] : state.ewc->anchor) {
            ewc_entries.push_back({"ewc/anchor/" + name, &tensor});
        }
        ordered_json ewc_index;
        write_bin(dir / "ewc.bin", ewc_entries, ewc_index);
        tensors["ewc.bin"] = std::move(ewc_index);

        ordered_json meta;
        meta["n_samples"] = state.ewc->fisher_sum.n_samples;
        meta["estimator"] = estimator_name(state.ewc->fisher_sum.estimator);
        meta["iteration_count"] = state.ewc->iteration_count;
        meta["lambda0"] = state.ewc->schedule.lambda0;
        meta["decay_factor"] = state.ewc->schedule.decay_factor;
        meta["decay_interval_steps"] = state.ewc->schedule.decay_interval_steps;
        manifest["ewc"] = std::move(meta);
    }

    manifest["tensors"] = std::move(tensors);

    ordered_json log = ordered_json::array();
    for (const CheckpointInfo& info : state.checkpoint_log) {
        log.push_back({{"step", info.step}, {"dev_score", info.dev_score}});
    }
    manifest["checkpoint_log"] = std::move(log);

    const std::filesystem::path manifest_path = dir / "manifest.json";
    std::ofstream out(manifest_path, std::ios::binary);
    if (!out) {
        throw IoError("save_checkpoint: cannot open '" + manifest_path.string() + "'");
    }
    out << manifest.dump(2) << '\n';
    if (!out) {
        throw IoError("save_checkpoint: write failed for '" + manifest_path.string() + "'");
    }
}

TrainState load_checkpoint(const std::filesystem::path& dir) {
    const std::filesystem::path manifest_path = dir / "manifest.json";
    ordered_json manifest;
    try {
        manifest = ordered_json::parse(read_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_checkpoint: invalid manifest '" + manifest_path.string() +
                          "': " + e.what());
    }
    if (manifest.at("format_version").get<int>() != kFormatVersion) {
        throw FormatError("load_checkpoint: unsupported format version " +
                          manifest.at("format_version").dump());
    }

    TrainState state;
    state.model_cfg = model_from_json(manifest.at("model"));
    state.plan = plan_from_json(manifest.at("plan"));
    state.strategy = strategy_from_name(manifest.at("strategy").get<std::string>());
    state.use_factors = manifest.at("use_factors").get<bool>();
    state.completed_iterations = manifest.at("iteration").get<int>();
    state.step_in_iteration = manifest.at("step").get<std::int64_t>();
    state.iteration_open = manifest.at("iteration_open").get<bool>();
    state.iteration_steps = manifest.at("iteration_steps").get<std::int64_t>();
    state.active_tasks = manifest.at("active_tasks").get<std::vector<std::string>>();

    state.model = std::make_unique<ToyEncoderClassifier>(state.model_cfg);
    Rng dummy(0);
    for (const auto& task : manifest.at("tasks")) {
        state.model->add_language(task.get<std::string>(), 0.0, dummy);
    }

    const ordered_json& tensors = manifest.at("tensors");
    const ordered_json& params_index = tensors.at("params.bin");

    // Every registered task must have its complete factor set on disk.
    for (const auto& task_json : manifest.at("tasks")) {
        const std::string task = task_json.get<std::string>();
        for (const std::string& name : state.model->task_param_names(task)) {
            if (params_index.find(name) == params_index.end()) {
                throw FormatError("load_checkpoint: missing factor tensors for task '" + task +
                                  "' (first absent: " + name + ")");
            }
        }
    }

    const std::vector<char> params_blob = read_file(dir / "params.bin");
    auto params = state.model->named_params();
    for (const auto& [name, tensor] : params) {
        const auto it = params_index.find(name);
        if (it == params_index.end()) {
            throw FormatError("load_checkpoint: parameter '" + name + "' missing from manifest");
        }
        Tensor loaded = read_tensor(params_blob, *it, name);
        if (!loaded.same_shape(*tensor)) {
            throw FormatError("load_checkpoint: shape mismatch for '" + name + "' (" +
                              loaded.shape_str() + " vs " + tensor->shape_str() + ")");
        }
        *tensor = std::move(loaded);
    }
    for (auto it = params_index.begin(); it != params_index.end(); ++it) {
        if (params.find(it.key()) == params.end()) {
            throw FormatError("load_checkpoint: manifest lists unknown parameter '" + it.key() +
                              "'");
        }
    }

    if (tensors.find("adam.bin") != tensors.end()) {
        const ordered_json& adam_index = tensors.at("adam.bin");
        const std::vector<char> blob = read_file(dir / "adam.bin");
        const ordered_json& steps = manifest.at("adam_steps");
        for (auto it = steps.begin(); it != steps.end(); ++it) {
            const std::string& name = it.key();
            AdamMoments mom;
            mom.t = it.value().get<std::int64_t>();
            mom.m = read_tensor(blob, adam_index.at("adam/m/" + name), "adam/m/" + name).data();
            mom.v = read_tensor(blob, adam_index.at("adam/v/" + name), "adam/v/" + name).data();
            state.adam.emplace(name, std::move(mom));
        }
    }

    if (manifest.find("ewc") != manifest.end()) {
        const ordered_json& meta = manifest.at("ewc");
        const ordered_json& ewc_index = tensors.at("ewc.bin");
        const std::vector<char> blob = read_file(dir / "ewc.bin");
        EwcState ewc;
        ewc.fisher_sum.n_samples = meta.at("n_samples").get<std::int64_t>();
        ewc.fisher_sum.estimator = estimator_from_name(meta.at("estimator").get<std::string>());
        ewc.iteration_count = meta.at("iteration_count").get<int>();
        ewc.schedule.lambda0 = meta.at("lambda0").get<double>();
        ewc.schedule.decay_factor = meta.at("decay_factor").get<double>();
        ewc.schedule.decay_interval_steps = meta.at("decay_interval_steps").get<std::int64_t>();
        for (auto it = ewc_index.begin(); it != ewc_index.end(); ++it) {
            const std::string& full = it.key();
            Tensor t = read_tensor(blob, it.value(), full);
            if (full.rfind("ewc/fisher/", 0) == 0) {
                ewc.fisher_sum.values.emplace(full.substr(11), std::move(t));
            } else if (full.rfind("ewc/anchor/", 0) == 0) {
                ewc.anchor.emplace(full.substr(11), std::move(t));
            } else {
                throw FormatError("load_checkpoint: unexpected tensor '" + full + "' in ewc.bin");
            }
        }
        state.ewc = std::move(ewc);
    }

    for (const auto& entry : manifest.at("checkpoint_log")) {
        state.checkpoint_log.push_back(
            {entry.at("step").get<std::int64_t>(), entry.at("dev_score").get<double>()});
    }

    apply_strategy_masks(state);
    return state;
}

std::uint64_t checkpoint_hash(const std::filesystem::path& dir) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char* name : {"manifest.json", "params.bin", "adam.bin", "ewc.bin"}) {
        const std::filesystem::path path = dir / name;
        if (!std::filesystem::exists(path)) {
            continue;
        }
        const std::vector<char> bytes = read_file(path);
        h = fnv1a(name, std::strlen(name), h);
        h = fnv1a(bytes.data(), bytes.size(), h);
    }
    return h;
}

} // namespace clwf
