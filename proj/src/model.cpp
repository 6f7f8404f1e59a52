#include "clwf/model.hpp"

#include <cmath>

namespace clwf {

const char* activation_name(Activation a) {
    return a == Activation::Tanh ? "tanh" : "relu";
}

Activation activation_from_name(const std::string& name) {
    if (name == "tanh") {
        return Activation::Tanh;
    }
    if (name == "relu") {
        return Activation::Relu;
    }
    throw ArgumentError("unknown activation '" + name + "'");
}

void ModelConfig::validate() const {
    if (d_in < 1 || d_model < 1 || n_blocks < 1) {
        throw ArgumentError("model config: dimensions must be >= 1");
    }
    if (n_classes < 2) {
        throw ArgumentError("model config: n_classes must be >= 2");
    }
    if (k < 1 || k > 32) {
        throw ArgumentError("model config: k outside [1, 32]");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw ArgumentError("model config: dropout outside [0, 1)");
    }
    if (init_scale < 0.0) {
        throw ArgumentError("model config: negative init_scale");
    }
}

ToyEncoderClassifier::ToyEncoderClassifier(const ModelConfig& cfg)
    : cfg_(cfg), input_proj_("input_proj", cfg.d_in, cfg.d_model, cfg.k, true) {
    cfg_.validate();
    for (int b = 0; b < cfg_.n_blocks; ++b) {
        const std::string base = "block" + std::to_string(b);
        Block block{nullptr, nullptr, nullptr, nullptr,
                    FactorizedLinear(base + "/linear", cfg_.d_model, cfg_.d_model, cfg_.k, true)};
        if (cfg_.use_attention) {
            for (const char* p : {"q", "k", "v", "o"}) {
                auto layer = std::make_unique<FactorizedLinear>(base + "/attn/" + p, cfg_.d_model,
                                                                cfg_.d_model, cfg_.k, false);
                if (p[0] == 'q') block.attn_q = std::move(layer);
                else if (p[0] == 'k') block.attn_k = std::move(layer);
                else if (p[0] == 'v') block.attn_v = std::move(layer);
                else block.attn_o = std::move(layer);
            }
        }
        blocks_.push_back(std::move(block));
    }
    out_weight_t_ = Tensor::zeros({static_cast<std::size_t>(cfg_.d_model),
                                   static_cast<std::size_t>(cfg_.n_classes)});
    out_bias_ = Tensor::zeros({static_cast<std::size_t>(cfg_.n_classes)});

    factorized_.push_back(&input_proj_);
    for (Block& b : blocks_) {
        if (cfg_.use_attention) {
            factorized_.push_back(b.attn_q.get());
            factorized_.push_back(b.attn_k.get());
            factorized_.push_back(b.attn_v.get());
            factorized_.push_back(b.attn_o.get());
        }
        factorized_.push_back(&b.linear);
    }
}

void ToyEncoderClassifier::init_params(Rng& rng) {
    const auto fill = [&](Tensor& t, double scale) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            t.at(i) = rng.normal(0.0, scale);
        }
    };
    for (FactorizedLinear* layer : factorized_) {
        fill(layer->shared_weight_storage(), 1.0 / std::sqrt(static_cast<double>(layer->d_in())));
    }
    fill(out_weight_t_, 1.0 / std::sqrt(static_cast<double>(cfg_.d_model)));
}

void ToyEncoderClassifier::add_language(const std::string& task, double init_scale, Rng& rng) {
    if (tasks_.count(task) != 0) {
        throw ConflictError("model: task '" + task + "' already registered");
    }
    for (FactorizedLinear* layer : factorized_) {
        layer->add_task(task, init_scale, rng);
    }
    tasks_.insert(task);
}

bool ToyEncoderClassifier::has_task(const std::string& task) const {
    return tasks_.count(task) != 0;
}

std::vector<std::string> ToyEncoderClassifier::task_ids() const {
    return {tasks_.begin(), tasks_.end()};
}

NodeId ToyEncoderClassifier::activation_node(ParamContext& ctx, NodeId a) const {
    return cfg_.activation == Activation::Tanh ? ctx.g.tanh(a) : ctx.g.relu(a);
}

NodeId ToyEncoderClassifier::attention_block(ParamContext& ctx, NodeId h,
                                             std::size_t block_index,
                                             const std::string& task) const {
    const Block& block = blocks_[block_index];
    Graph& g = ctx.g;
    const NodeId q = block.attn_q->apply(ctx, h, task);
    const NodeId k = block.attn_k->apply(ctx, h, task);
    const NodeId v = block.attn_v->apply(ctx, h, task);
    const NodeId scores = g.matmul(q, g.transpose(k));
    const Tensor& score_val = g.value(scores);
    const NodeId scaled = g.hadamard(
        scores, g.constant(Tensor::full(score_val.shape(),
                                        1.0 / std::sqrt(static_cast<double>(cfg_.d_model)))));
    const NodeId mixed = g.matmul(g.row_softmax(scaled), v);
    return g.add(h, block.attn_o->apply(ctx, mixed, task));
}

NodeId ToyEncoderClassifier::encode_rows(ParamContext& ctx, NodeId rows, const std::string& task,
                                         Rng* dropout_rng) const {
    Graph& g = ctx.g;
    NodeId h = input_proj_.apply(ctx, rows, task);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        if (cfg_.use_attention) {
            h = attention_block(ctx, h, b, task);
        }
        NodeId branch = activation_node(ctx, blocks_[b].linear.apply(ctx, h, task));
        if (cfg_.dropout > 0.0 && dropout_rng != nullptr) {
            const Tensor& shape_ref = g.value(branch);
            Tensor mask(shape_ref.shape());
            const double keep = 1.0 - cfg_.dropout;
            for (std::size_t i = 0; i < mask.numel(); ++i) {
                mask.at(i) = dropout_rng->uniform() < cfg_.dropout ? 0.0 : 1.0 / keep;
            }
            branch = g.hadamard(branch, g.constant(std::move(mask)));
        }
        h = g.add(h, branch);
    }
    return h;
}

NodeId ToyEncoderClassifier::logits_node(ParamContext& ctx,
                                         const std::vector<const Sample*>& batch,
                                         const std::string& task, Rng* dropout_rng) const {
    if (batch.empty()) {
        throw ArgumentError("model: empty batch");
    }
    if (tasks_.count(task) == 0) {
        throw LookupError("model: task '" + task + "' not registered");
    }
    Graph& g = ctx.g;
    const auto d_in = static_cast<std::size_t>(cfg_.d_in);
    const std::size_t seq_len = batch.front()->x.rows();

    for (const Sample* s : batch) {
        if (s->x.rank() != 2 || s->x.cols() != d_in || s->x.rows() != seq_len) {
            throw ShapeError("model: frame block " + s->x.shape_str() + " does not conform to [" +
                             std::to_string(seq_len) + "," + std::to_string(d_in) + "]");
        }
    }

    NodeId pooled; // [b, d_model]
    if (cfg_.use_attention) {
        // Attention mixes rows within a sequence, so sequences are encoded
        // one by one and pooled to single rows.
        std::vector<NodeId> pooled_rows;
        pooled_rows.reserve(batch.size());
        for (const Sample* s : batch) {
            const NodeId rows = g.constant(s->x);
            pooled_rows.push_back(g.mean_pool(encode_rows(ctx, rows, task, dropout_rng)));
        }
        // Stitch [1, d_model] rows back into a batch via per-row losses
        // downstream; here we only need the logits per row.
        // Compute logits per pooled row and stack values.
        NodeId logits = -1;
        std::vector<NodeId> per_row_logits;
        per_row_logits.reserve(batch.size());
        const NodeId w_out = ctx.bind("output_proj/weight", out_weight_t_, shared_trainable_);
        const NodeId b_out = ctx.bind("output_proj/bias", out_bias_, shared_trainable_);
        for (const NodeId row : pooled_rows) {
            per_row_logits.push_back(g.add(g.matmul(row, w_out), b_out));
        }
        // The caller needs one node; fold rows into a single loss later.
        // For logits extraction we return the list through ctx cache.
        for (std::size_t i = 0; i < per_row_logits.size(); ++i) {
            ctx.cache["#logit_row/" + std::to_string(i)] = per_row_logits[i];
        }
        ctx.cache["#logit_rows"] = static_cast<NodeId>(per_row_logits.size());
        logits = per_row_logits.front();
        return logits;
    }

    // Row-wise layers: the whole batch rides one [b*L, d_in] matrix.
    Tensor stacked({batch.size() * seq_len, d_in});
    std::size_t row = 0;
    for (const Sample* s : batch) {
        for (std::size_t l = 0; l < seq_len; ++l) {
            for (std::size_t j = 0; j < d_in; ++j) {
                stacked.at(row, j) = s->x.at(l, j);
            }
            ++row;
        }
    }
    const NodeId rows = g.constant(std::move(stacked));
    const NodeId encoded = encode_rows(ctx, rows, task, dropout_rng);
    pooled = g.mean_pool(encoded, seq_len);
    const NodeId w_out = ctx.bind("output_proj/weight", out_weight_t_, shared_trainable_);
    const NodeId b_out = ctx.bind("output_proj/bias", out_bias_, shared_trainable_);
    return g.add(g.matmul(pooled, w_out), b_out);
}

NodeId ToyEncoderClassifier::loss_node(ParamContext& ctx,
                                       const std::vector<const Sample*>& batch,
                                       const std::string& task, Rng* dropout_rng) const {
    for (const Sample* s : batch) {
        if (s->y < 0 || s->y >= cfg_.n_classes) {
            throw ArgumentError("model: label " + std::to_string(s->y) + " outside [0," +
                                std::to_string(cfg_.n_classes) + ")");
        }
    }
    Graph& g = ctx.g;
    const NodeId logits = logits_node(ctx, batch, task, dropout_rng);

    if (!cfg_.use_attention) {
        std::vector<int> labels;
        labels.reserve(batch.size());
        for (const Sample* s : batch) {
            labels.push_back(s->y);
        }
        return g.log_softmax_nll(logits, std::move(labels));
    }

    // Attention path: combine per-row NLLs into their mean.
    const auto n_rows = static_cast<std::size_t>(ctx.cache.at("#logit_rows"));
    NodeId total = -1;
    for (std::size_t i = 0; i < n_rows; ++i) {
        const NodeId row = ctx.cache.at("#logit_row/" + std::to_string(i));
        const NodeId nll = g.log_softmax_nll(row, {batch[i]->y});
        total = i == 0 ? nll : g.add(total, nll);
    }
    if (n_rows == 1) {
        return total;
    }
    return g.hadamard(total,
                      g.constant(Tensor::scalar(1.0 / static_cast<double>(n_rows))));
}

Tensor ToyEncoderClassifier::batch_logits(const std::vector<const Sample*>& batch,
                                          const std::string& task) const {
    Graph g;
    ParamContext ctx(g);
    const NodeId logits = logits_node(ctx, batch, task, nullptr);
    if (!cfg_.use_attention) {
        return g.value(logits);
    }
    const auto n_rows = static_cast<std::size_t>(ctx.cache.at("#logit_rows"));
    Tensor out({n_rows, static_cast<std::size_t>(cfg_.n_classes)});
    for (std::size_t i = 0; i < n_rows; ++i) {
        const Tensor& row = g.value(ctx.cache.at("#logit_row/" + std::to_string(i)));
        for (std::size_t j = 0; j < row.numel(); ++j) {
            out.at(i, j) = row.at(j);
        }
    }
    return out;
}

Tensor ToyEncoderClassifier::forward(const Tensor& x, const std::string& task) const {
    Sample s;
    s.x = x;
    const Tensor logits = batch_logits({&s}, task);
    Tensor out({static_cast<std::size_t>(cfg_.n_classes)});
    for (std::size_t j = 0; j < out.numel(); ++j) {
        out.at(j) = logits.at(0, j);
    }
    return out;
}

int ToyEncoderClassifier::predict(const Tensor& x, const std::string& task) const {
    const Tensor logits = forward(x, task);
    int best = 0;
    for (int j = 1; j < cfg_.n_classes; ++j) {
        if (logits.at(static_cast<std::size_t>(j)) > logits.at(static_cast<std::size_t>(best))) {
            best = j;
        }
    }
    return best;
}

double ToyEncoderClassifier::loss(const std::vector<const Sample*>& batch,
                                  const std::string& task) const {
    Graph g;
    ParamContext ctx(g);
    return g.value(loss_node(ctx, batch, task, nullptr)).item();
}

ToyEncoderClassifier::LossGrads ToyEncoderClassifier::loss_and_grads(
    const std::vector<const Sample*>& batch, const std::string& task, Rng* dropout_rng) const {
    Graph g;
    ParamContext ctx(g);
    const NodeId loss = loss_node(ctx, batch, task, dropout_rng);
    LossGrads out;
    out.loss = g.value(loss).item();
    g.backward(loss);
    for (const auto& [name, id] : ctx.bound) {
        if (g.value(id).requires_grad()) {
            out.grads.emplace(name, g.grad(id));
        }
    }
    return out;
}

void ToyEncoderClassifier::visit_params(const ParamVisitor& visit) {
    for (FactorizedLinear* layer : factorized_) {
        layer->visit_params(visit);
    }
    visit("output_proj/weight", out_weight_t_, shared_trainable_, "");
    visit("output_proj/bias", out_bias_, shared_trainable_, "");
}

void ToyEncoderClassifier::visit_params(
    const std::function<void(const std::string&, const Tensor&, bool, const std::string&)>& visit)
    const {
    auto* self = const_cast<ToyEncoderClassifier*>(this);
    self->visit_params([&](const std::string& name, Tensor& value, bool trainable,
                           const std::string& task) { visit(name, value, trainable, task); });
}

std::map<std::string, Tensor*> ToyEncoderClassifier::named_params() {
    std::map<std::string, Tensor*> out;
    visit_params([&](const std::string& name, Tensor& value, bool, const std::string&) {
        out.emplace(name, &value);
    });
    return out;
}

std::map<std::string, const Tensor*> ToyEncoderClassifier::named_params() const {
    std::map<std::string, const Tensor*> out;
    visit_params([&](const std::string& name, const Tensor& value, bool, const std::string&) {
        out.emplace(name, &value);
    });
    return out;
}

std::size_t ToyEncoderClassifier::param_count() const {
    std::size_t n = 0;
    visit_params([&](const std::string&, const Tensor& value, bool, const std::string&) {
        n += value.numel();
    });
    return n;
}

void ToyEncoderClassifier::set_shared_trainable(bool flag) {
    shared_trainable_ = flag;
    for (FactorizedLinear* layer : factorized_) {
        layer->set_shared_trainable(flag);
    }
}

void ToyEncoderClassifier::set_task_trainable(const std::string& task, bool flag) {
    if (tasks_.count(task) == 0) {
        throw LookupError("model: task '" + task + "' not registered");
    }
    for (FactorizedLinear* layer : factorized_) {
        layer->set_task_trainable(task, flag);
    }
}

void ToyEncoderClassifier::set_all_tasks_trainable(bool flag) {
    for (const std::string& task : tasks_) {
        set_task_trainable(task, flag);
    }
}

std::vector<std::string> ToyEncoderClassifier::shared_param_names() const {
    std::vector<std::string> names;
    visit_params([&](const std::string& name, const Tensor&, bool, const std::string& task) {
        if (task.empty()) {
            names.push_back(name);
        }
    });
    return names;
}

std::vector<std::string> ToyEncoderClassifier::task_param_names(const std::string& task) const {
    std::vector<std::string> names;
    visit_params([&](const std::string& name, const Tensor&, bool, const std::string& owner) {
        if (owner == task) {
            names.push_back(name);
        }
    });
    return names;
}

Tensor ToyEncoderClassifier::dense_reference_logits(const Tensor& x,
                                                    const std::string& task) const {
    if (tasks_.count(task) == 0) {
        throw LookupError("model: task '" + task + "' not registered");
    }
    if (cfg_.use_attention) {
        throw StateError("dense_reference_logits: attention path not supported");
    }
    const auto apply_dense = [&](const FactorizedLinear& layer, const Tensor& h) {
        const Tensor w = layer.effective_weight(task); // [d_out, d_in]
        Tensor out({h.rows(), static_cast<std::size_t>(layer.d_out())});
        for (std::size_t r = 0; r < h.rows(); ++r) {
            for (int o = 0; o < layer.d_out(); ++o) {
                double acc = 0.0;
                for (int i = 0; i < layer.d_in(); ++i) {
                    acc += w.at(static_cast<std::size_t>(o), static_cast<std::size_t>(i)) *
                           h.at(r, static_cast<std::size_t>(i));
                }
                out.at(r, static_cast<std::size_t>(o)) = acc;
            }
        }
        return out;
    };
    const auto act = [&](Tensor& t) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            t.at(i) = cfg_.activation == Activation::Tanh ? std::tanh(t.at(i))
                                                          : std::max(0.0, t.at(i));
        }
    };

    const auto add_bias = [](Tensor& t, const std::optional<Tensor>& bias) {
        if (!bias) {
            return;
        }
        for (std::size_t r = 0; r < t.rows(); ++r) {
            for (std::size_t j = 0; j < t.cols(); ++j) {
                t.at(r, j) += bias->at(j);
            }
        }
    };

    Tensor h = apply_dense(input_proj_, x);
    add_bias(h, input_proj_.bias());
    for (const Block& block : blocks_) {
        Tensor branch = apply_dense(block.linear, h);
        add_bias(branch, block.linear.bias());
        act(branch);
        for (std::size_t i = 0; i < h.numel(); ++i) {
            h.at(i) += branch.at(i);
        }
    }
    // mean pool over rows, then the classifier head
    const auto d_model = static_cast<std::size_t>(cfg_.d_model);
    std::vector<double> pooled(d_model, 0.0);
    for (std::size_t r = 0; r < h.rows(); ++r) {
        for (std::size_t j = 0; j < d_model; ++j) {
            pooled[j] += h.at(r, j);
        }
    }
    for (double& p : pooled) {
        p /= static_cast<double>(h.rows());
    }
    Tensor logits({static_cast<std::size_t>(cfg_.n_classes)});
    for (int c = 0; c < cfg_.n_classes; ++c) {
        double acc = out_bias_.at(static_cast<std::size_t>(c));
        for (std::size_t j = 0; j < d_model; ++j) {
            acc += pooled[j] * out_weight_t_.at(j, static_cast<std::size_t>(c));
        }
        logits.at(static_cast<std::size_t>(c)) = acc;
    }
    return logits;
}

std::uint64_t ToyEncoderClassifier::param_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    visit_params([&](const std::string& name, const Tensor& value, bool, const std::string&) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(value.data().data(), value.numel() * sizeof(double), h);
    });
    return h;
}

} // namespace clwf
