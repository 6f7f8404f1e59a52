#include "clwf/config.hpp"

#include <fstream>
#include <sstream>

#include "clwf/metrics.hpp"

namespace clwf {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) {
        return "";
    }
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") {
        return true;
    }
    if (v == "false" || v == "0") {
        return false;
    }
    throw ArgumentError("config: " + key + " expects true/false, got '" + v + "'");
}

std::int64_t parse_int(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const std::int64_t out = std::stoll(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return out;
    } catch (const std::exception&) {
        throw ArgumentError("config: " + key + " expects an integer, got '" + v + "'");
    }
}

double parse_float(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return out;
    } catch (const std::exception&) {
        throw ArgumentError("config: " + key + " expects a number, got '" + v + "'");
    }
}

std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(static_cast<int>(parse_int(trim(item), key)));
    }
    if (out.empty()) {
        throw ArgumentError("config: " + key + " expects a comma-separated list");
    }
    return out;
}

} // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    if (key == "seed") {
        seed = static_cast<std::uint64_t>(parse_int(value, key));
    } else if (key == "strategy") {
        strategy = strategy_from_name(value);
    } else if (key == "suite.groups") {
        groups = parse_int_list(value, key);
    } else if (key == "suite.d_in") {
        gen.d_in = static_cast<int>(parse_int(value, key));
    } else if (key == "suite.seq_len") {
        gen.seq_len = static_cast<int>(parse_int(value, key));
    } else if (key == "suite.n_classes") {
        gen.n_classes = static_cast<int>(parse_int(value, key));
    } else if (key == "suite.d_latent") {
        gen.d_latent = static_cast<int>(parse_int(value, key));
    } else if (key == "suite.frame_jitter") {
        gen.frame_jitter = parse_float(value, key);
    } else if (key == "suite.noise_rho") {
        gen.noise_rho = parse_float(value, key);
    } else if (key == "suite.min_margin") {
        gen.min_margin = parse_float(value, key);
    } else if (key == "suite.offset_scale") {
        gen.offset_scale = parse_float(value, key);
    } else if (key == "suite.n_train") {
        gen.n_train = static_cast<int>(parse_int(value, key));
    } else if (key == "suite.n_dev") {
        gen.n_dev = static_cast<int>(parse_int(value, key));
    } else if (key == "suite.n_test") {
        gen.n_test = static_cast<int>(parse_int(value, key));
    } else if (key == "model.d_in") {
        model.d_in = static_cast<int>(parse_int(value, key));
    } else if (key == "model.d_model") {
        model.d_model = static_cast<int>(parse_int(value, key));
    } else if (key == "model.n_blocks") {
        model.n_blocks = static_cast<int>(parse_int(value, key));
    } else if (key == "model.n_classes") {
        model.n_classes = static_cast<int>(parse_int(value, key));
    } else if (key == "model.k") {
        model.k = static_cast<int>(parse_int(value, key));
    } else if (key == "model.activation") {
        model.activation = activation_from_name(value);
    } else if (key == "model.use_attention") {
        model.use_attention = parse_bool(value, key);
    } else if (key == "model.dropout") {
        model.dropout = parse_float(value, key);
    } else if (key == "model.init_scale") {
        model.init_scale = parse_float(value, key);
    } else if (key == "plan.initial_steps") {
        plan.initial_steps = parse_int(value, key);
    } else if (key == "plan.steps_per_iteration") {
        plan.steps_per_iteration = parse_int(value, key);
    } else if (key == "plan.batch_size") {
        plan.batch_size = static_cast<int>(parse_int(value, key));
    } else if (key == "plan.peak_lr") {
        plan.peak_lr = parse_float(value, key);
    } else if (key == "plan.warmup_steps") {
        plan.warmup_steps = parse_int(value, key);
    } else if (key == "plan.grad_clip_norm") {
        plan.grad_clip_norm = parse_float(value, key);
    } else if (key == "plan.adam_beta1") {
        plan.adam_beta1 = parse_float(value, key);
    } else if (key == "plan.adam_beta2") {
        plan.adam_beta2 = parse_float(value, key);
    } else if (key == "plan.adam_eps") {
        plan.adam_eps = parse_float(value, key);
    } else if (key == "plan.ewc_lambda0") {
        plan.ewc.lambda0 = parse_float(value, key);
    } else if (key == "plan.ewc_decay_factor") {
        plan.ewc.decay_factor = parse_float(value, key);
    } else if (key == "plan.ewc_decay_interval_steps") {
        plan.ewc.decay_interval_steps = parse_int(value, key);
    } else if (key == "plan.fisher_estimator") {
        plan.fisher_estimator = estimator_from_name(value);
    } else if (key == "plan.fisher_sample_cap") {
        plan.fisher_sample_cap = parse_int(value, key);
    } else if (key == "plan.checkpoint_every") {
        plan.checkpoint_every = parse_int(value, key);
    } else if (key == "plan.average_last_n") {
        plan.average_last_n = static_cast<int>(parse_int(value, key));
    } else if (key == "plan.refresh_anchor") {
        plan.refresh_anchor = parse_bool(value, key);
    } else {
        throw ArgumentError("config: unknown key '" + key + "'");
    }
}

void ExperimentConfig::validate() const {
    model.validate();
    plan.validate(strategy);
    if (groups.empty()) {
        throw ArgumentError("config: suite.groups must not be empty");
    }
    for (int g : groups) {
        if (g < 1) {
            throw ArgumentError("config: every suite group needs at least one task");
        }
    }
    if (model.d_in != gen.d_in) {
        throw ArgumentError("config: model.d_in (" + std::to_string(model.d_in) +
                            ") must equal suite.d_in (" + std::to_string(gen.d_in) + ")");
    }
    if (model.n_classes != gen.n_classes) {
        throw ArgumentError("config: model.n_classes must equal suite.n_classes");
    }
}

TaskSuite ExperimentConfig::make_suite() const {
    return TaskSuite::generate(static_cast<int>(groups.size()), groups, seed, gen);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("config: cannot open '" + path.string() + "'");
    }
    ExperimentConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError("config: line " + std::to_string(line_no) + " of '" +
                              path.string() + "' is not 'key = value'");
        }
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("config: cannot open '" + path.string() + "' for writing");
    }
    out << "seed = " << cfg.seed << '\n';
    out << "strategy = " << strategy_name(cfg.strategy) << '\n';
    out << "suite.groups = ";
    for (std::size_t i = 0; i < cfg.groups.size(); ++i) {
        out << (i > 0 ? "," : "") << cfg.groups[i];
    }
    out << '\n';
    out << "suite.d_in = " << cfg.gen.d_in << '\n';
    out << "suite.seq_len = " << cfg.gen.seq_len << '\n';
    out << "suite.n_classes = " << cfg.gen.n_classes << '\n';
    out << "suite.d_latent = " << cfg.gen.d_latent << '\n';
    out << "suite.frame_jitter = " << format_double(cfg.gen.frame_jitter) << '\n';
    out << "suite.noise_rho = " << format_double(cfg.gen.noise_rho) << '\n';
    out << "suite.min_margin = " << format_double(cfg.gen.min_margin) << '\n';
    out << "suite.offset_scale = " << format_double(cfg.gen.offset_scale) << '\n';
    out << "suite.n_train = " << cfg.gen.n_train << '\n';
    out << "suite.n_dev = " << cfg.gen.n_dev << '\n';
    out << "suite.n_test = " << cfg.gen.n_test << '\n';
    out << "model.d_in = " << cfg.model.d_in << '\n';
    out << "model.d_model = " << cfg.model.d_model << '\n';
    out << "model.n_blocks = " << cfg.model.n_blocks << '\n';
    out << "model.n_classes = " << cfg.model.n_classes << '\n';
    out << "model.k = " << cfg.model.k << '\n';
    out << "model.activation = " << activation_name(cfg.model.activation) << '\n';
    out << "model.use_attention = " << (cfg.model.use_attention ? "true" : "false") << '\n';
    out << "model.dropout = " << format_double(cfg.model.dropout) << '\n';
    out << "model.init_scale = " << format_double(cfg.model.init_scale) << '\n';
    out << "plan.initial_steps = " << cfg.plan.initial_steps << '\n';
    out << "plan.steps_per_iteration = " << cfg.plan.steps_per_iteration << '\n';
    out << "plan.batch_size = " << cfg.plan.batch_size << '\n';
    out << "plan.peak_lr = " << format_double(cfg.plan.peak_lr) << '\n';
    out << "plan.warmup_steps = " << cfg.plan.warmup_steps << '\n';
    out << "plan.grad_clip_norm = " << format_double(cfg.plan.grad_clip_norm) << '\n';
    out << "plan.adam_beta1 = " << format_double(cfg.plan.adam_beta1) << '\n';
    out << "plan.adam_beta2 = " << format_double(cfg.plan.adam_beta2) << '\n';
    out << "plan.adam_eps = " << format_double(cfg.plan.adam_eps) << '\n';
    out << "plan.ewc_lambda0 = " << format_double(cfg.plan.ewc.lambda0) << '\n';
    out << "plan.ewc_decay_factor = " << format_double(cfg.plan.ewc.decay_factor) << '\n';
    out << "plan.ewc_decay_interval_steps = " << cfg.plan.ewc.decay_interval_steps << '\n';
    out << "plan.fisher_estimator = " << estimator_name(cfg.plan.fisher_estimator) << '\n';
    out << "plan.fisher_sample_cap = " << cfg.plan.fisher_sample_cap << '\n';
    out << "plan.checkpoint_every = " << cfg.plan.checkpoint_every << '\n';
    out << "plan.average_last_n = " << cfg.plan.average_last_n << '\n';
    out << "plan.refresh_anchor = " << (cfg.plan.refresh_anchor ? "true" : "false") << '\n';
    if (!out) {
        throw IoError("config: write failed for '" + path.string() + "'");
    }
}

} // namespace clwf
