#include "clwf/factorized_linear.hpp"

#include <cmath>

namespace clwf {

ParamOverhead param_overhead(int k, int d_in, int d_out) {
    if (k <= 0 || d_in <= 0 || d_out <= 0) {
        throw ArgumentError("param_overhead: k, d_in, d_out must be positive");
    }
    ParamOverhead result;
    result.added_per_task = 2LL * k * (static_cast<std::int64_t>(d_in) + d_out);
    result.fraction_of_dense = static_cast<double>(result.added_per_task) /
                               (static_cast<double>(d_in) * static_cast<double>(d_out));
    return result;
}

FactorizedLinear::FactorizedLinear(std::string name, int d_in, int d_out, int k,
                                   bool with_bias)
    : name_(std::move(name)), d_in_(d_in), d_out_(d_out), k_(k) {
    if (d_in <= 0 || d_out <= 0) {
        throw ArgumentError(name_ + ": dimensions must be positive");
    }
    if (k < 1 || k > 32) {
        throw ArgumentError(name_ + ": rank " + std::to_string(k) + " outside [1, 32]");
    }
    weight_t_ = Tensor::zeros({static_cast<std::size_t>(d_in), static_cast<std::size_t>(d_out)});
    if (with_bias) {
        bias_ = Tensor::zeros({static_cast<std::size_t>(d_out)});
    }
}

FactorSet& FactorizedLinear::add_task(const std::string& task, double init_scale, Rng& rng) {
    if (factors_.count(task) != 0) {
        throw ConflictError(name_ + ": task '" + task + "' already registered");
    }
    if (init_scale < 0.0) {
        throw ArgumentError(name_ + ": negative init_scale");
    }
    FactorSet fs;
    fs.task_id = task;
    const auto draw = [&](std::size_t n) {
        Tensor t({n});
        for (std::size_t i = 0; i < n; ++i) {
            t.at(i) = rng.normal(0.0, init_scale);
        }
        return t;
    };
    const auto din = static_cast<std::size_t>(d_in_);
    const auto dout = static_cast<std::size_t>(d_out_);
    for (int i = 0; i < k_; ++i) {
        fs.r_m.push_back(draw(din));
        fs.v_m.push_back(draw(dout));
        fs.r_b.push_back(draw(din));
        fs.v_b.push_back(draw(dout));
    }
    task_trainable_[task] = true;
    return factors_.emplace(task, std::move(fs)).first->second;
}

bool FactorizedLinear::has_task(const std::string& task) const {
    return factors_.count(task) != 0;
}

const FactorSet& FactorizedLinear::factors(const std::string& task) const {
    auto it = factors_.find(task);
    if (it == factors_.end()) {
        throw LookupError(name_ + ": unknown task '" + task + "'");
    }
    return it->second;
}

std::vector<std::string> FactorizedLinear::task_ids() const {
    std::vector<std::string> ids;
    ids.reserve(factors_.size());
    for (const auto& [id, fs] : factors_) {
        ids.push_back(id);
    }
    return ids;
}

std::pair<Tensor, Tensor> FactorizedLinear::materialize_task_matrices(
    const std::string& task) const {
    const FactorSet& fs = factors(task);
    const auto din = static_cast<std::size_t>(d_in_);
    const auto dout = static_cast<std::size_t>(d_out_);
    Tensor w_m = Tensor::full({dout, din}, 1.0);
    Tensor w_b = Tensor::zeros({dout, din});
    for (int i = 0; i < k_; ++i) {
        for (std::size_t o = 0; o < dout; ++o) {
            const double vm = fs.v_m[i].at(o);
            const double vb = fs.v_b[i].at(o);
            for (std::size_t in = 0; in < din; ++in) {
                w_m.at(o, in) += vm * fs.r_m[i].at(in);
                w_b.at(o, in) += vb * fs.r_b[i].at(in);
            }
        }
    }
    return {std::move(w_m), std::move(w_b)};
}

Tensor FactorizedLinear::shared_weight() const {
    const auto din = static_cast<std::size_t>(d_in_);
    const auto dout = static_cast<std::size_t>(d_out_);
    Tensor w({dout, din});
    for (std::size_t in = 0; in < din; ++in) {
        for (std::size_t o = 0; o < dout; ++o) {
            w.at(o, in) = weight_t_.at(in, o);
        }
    }
    return w;
}

Tensor FactorizedLinear::effective_weight(const std::string& task) const {
    auto [w_m, w_b] = materialize_task_matrices(task);
    Tensor w = shared_weight();
    for (std::size_t i = 0; i < w.numel(); ++i) {
        w.at(i) = w.at(i) * w_m.at(i) + w_b.at(i);
    }
    return w;
}

Tensor FactorizedLinear::forward(const Tensor& x, const std::string& task) const {
    const FactorSet& fs = factors(task);
    if (x.rank() != 2 || x.cols() != static_cast<std::size_t>(d_in_)) {
        throw ShapeError(name_ + ": input " + x.shape_str() + " does not conform to d_in=" +
                         std::to_string(d_in_));
    }
    check_finite(x, name_ + ": forward input");
    const auto din = static_cast<std::size_t>(d_in_);
    const auto dout = static_cast<std::size_t>(d_out_);

    // Transposed effective weight, assembled exactly like the graph path.
    Tensor weff_t({din, dout});
    for (std::size_t in = 0; in < din; ++in) {
        for (std::size_t o = 0; o < dout; ++o) {
            double m = 1.0;
            double b = 0.0;
            for (int i = 0; i < k_; ++i) {
                m += fs.r_m[i].at(in) * fs.v_m[i].at(o);
                b += fs.r_b[i].at(in) * fs.v_b[i].at(o);
            }
            weff_t.at(in, o) = weight_t_.at(in, o) * m + b;
        }
    }

    Tensor out = Tensor::zeros({x.rows(), dout});
    kernels::matmul_nn_acc(x.data().data(), weff_t.data().data(), out.data().data(),
                           x.rows(), din, dout);
    if (bias_) {
        for (std::size_t r = 0; r < x.rows(); ++r) {
            for (std::size_t o = 0; o < dout; ++o) {
                out.at(r, o) += bias_->at(o);
            }
        }
    }
    check_finite(out, name_ + ": forward output");
    return out;
}

NodeId FactorizedLinear::weight_node(ParamContext& ctx, const std::string& task) const {
    const std::string cache_key = name_ + "/#weff/" + task;
    auto cached = ctx.cache.find(cache_key);
    if (cached != ctx.cache.end()) {
        return cached->second;
    }
    const FactorSet& fs = factors(task);
    const bool factors_trainable = task_trainable(task);
    Graph& g = ctx.g;

    const NodeId wt = ctx.bind(name_ + "/shared/weight", weight_t_, shared_trainable_);

    const std::string ones_key = name_ + "/#ones";
    NodeId ones;
    if (auto it = ctx.cache.find(ones_key); it != ctx.cache.end()) {
        ones = it->second;
    } else {
        ones = g.constant(Tensor::full({static_cast<std::size_t>(d_in_),
                                        static_cast<std::size_t>(d_out_)}, 1.0));
        ctx.cache.emplace(ones_key, ones);
    }

    const auto factor_node = [&](const char* group, int i, const Tensor& value) {
        return ctx.bind(name_ + "/task/" + task + "/" + group + "/" + std::to_string(i),
                        value, factors_trainable);
    };

    // Stored transposed, so the outer products are r v^T rather than v r^T.
    NodeId w_mult = ones;
    for (int i = 0; i < k_; ++i) {
        w_mult = g.add(w_mult, g.outer(factor_node("r_m", i, fs.r_m[i]),
                                       factor_node("v_m", i, fs.v_m[i])));
    }
    NodeId w_bias = g.outer(factor_node("r_b", 0, fs.r_b[0]),
                            factor_node("v_b", 0, fs.v_b[0]));
    for (int i = 1; i < k_; ++i) {
        w_bias = g.add(w_bias, g.outer(factor_node("r_b", i, fs.r_b[i]),
                                       factor_node("v_b", i, fs.v_b[i])));
    }
    const NodeId weff = g.add(g.hadamard(wt, w_mult), w_bias);
    ctx.cache.emplace(cache_key, weff);
    return weff;
}

NodeId FactorizedLinear::apply(ParamContext& ctx, NodeId x, const std::string& task) const {
    const NodeId weff = weight_node(ctx, task);
    NodeId out = ctx.g.matmul(x, weff);
    if (bias_) {
        out = ctx.g.add(out, ctx.bind(name_ + "/shared/bias", *bias_, shared_trainable_));
    }
    return out;
}

void FactorizedLinear::set_task_trainable(const std::string& task, bool flag) {
    if (factors_.count(task) == 0) {
        throw LookupError(name_ + ": unknown task '" + task + "'");
    }
    task_trainable_[task] = flag;
}

bool FactorizedLinear::task_trainable(const std::string& task) const {
    auto it = task_trainable_.find(task);
    if (it == task_trainable_.end()) {
        throw LookupError(name_ + ": unknown task '" + task + "'");
    }
    return it->second;
}

void FactorizedLinear::visit_params(const ParamVisitor& visit) {
    visit(name_ + "/shared/weight", weight_t_, shared_trainable_, "");
    if (bias_) {
        visit(name_ + "/shared/bias", *bias_, shared_trainable_, "");
    }
    for (auto& [task, fs] : factors_) {
        const bool trainable = task_trainable_.at(task);
        const auto group = [&](const char* label, std::vector<Tensor>& vecs) {
            for (int i = 0; i < k_; ++i) {
                visit(name_ + "/task/" + task + "/" + label + "/" + std::to_string(i),
                      vecs[static_cast<std::size_t>(i)], trainable, task);
            }
        };
        group("r_m", fs.r_m);
        group("v_m", fs.v_m);
        group("r_b", fs.r_b);
        group("v_b", fs.v_b);
    }
}

} // namespace clwf
