#include "clwf/graph.hpp"

#include <algorithm>
#include <cmath>

namespace clwf {

const char* op_name(Op op) {
    switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Hadamard: return "hadamard";
    case Op::Add: return "add";
    case Op::Outer: return "outer";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::MeanPool: return "mean_pool";
    case Op::LogSoftmaxNll: return "log_softmax_nll";
    case Op::Transpose: return "transpose";
    case Op::RowSoftmax: return "row_softmax";
    }
    return "?";
}

Graph::Node& Graph::node_at(NodeId id, const char* where) {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
        throw ArgumentError(std::string(where) + ": node id " + std::to_string(id) +
                            " out of range");
    }
    return nodes_[static_cast<std::size_t>(id)];
}

const Graph::Node& Graph::node_at(NodeId id, const char* where) const {
    return const_cast<Graph*>(this)->node_at(id, where);
}

NodeId Graph::record(Node node, const char* where) {
    if (in_backward_) {
        throw StateError(std::string(where) + ": graph mutated during backward");
    }
    if (finalized_) {
        throw StateError(std::string(where) + ": graph already ran backward");
    }
    if (!node.value.all_finite()) {
        throw NumericError(std::string(where) + ": non-finite result");
    }
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(Tensor value) {
    if (!value.all_finite()) {
        throw NumericError("leaf: non-finite input");
    }
    Node n;
    n.op = Op::Leaf;
    n.requires_grad = value.requires_grad();
    n.value = std::move(value);
    return record(std::move(n), "leaf");
}

NodeId Graph::constant(Tensor value) {
    value.set_requires_grad(false);
    return leaf(std::move(value));
}

namespace {

bool is_matrix(const Tensor& t) { return t.rank() == 2; }
bool is_vector(const Tensor& t) { return t.rank() == 1; }

[[noreturn]] void shape_fail(const char* prim, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(prim) + ": shapes " + a.shape_str() + " and " +
                     b.shape_str() + " do not conform");
}

[[noreturn]] void shape_fail(const char* prim, const Tensor& a) {
    throw ShapeError(std::string(prim) + ": shape " + a.shape_str() + " does not conform");
}

} // namespace

NodeId Graph::matmul(NodeId a, NodeId b) {
    const Tensor& ta = node_at(a, "matmul").value;
    const Tensor& tb = node_at(b, "matmul").value;
    if (!is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.rows()) {
        shape_fail("matmul", ta, tb);
    }
    Node n;
    n.op = Op::MatMul;
    n.a = a;
    n.b = b;
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    n.value = Tensor::zeros({ta.rows(), tb.cols()});
    kernels::matmul_nn_acc(ta.data().data(), tb.data().data(), n.value.data().data(),
                           ta.rows(), ta.cols(), tb.cols());
    return record(std::move(n), "matmul");
}

NodeId Graph::hadamard(NodeId a, NodeId b) {
    const Tensor& ta = node_at(a, "hadamard").value;
    const Tensor& tb = node_at(b, "hadamard").value;
    if (!ta.same_shape(tb)) {
        shape_fail("hadamard", ta, tb);
    }
    Node n;
    n.op = Op::Hadamard;
    n.a = a;
    n.b = b;
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    n.value = Tensor(ta.shape());
    const std::size_t count = ta.numel();
    for (std::size_t i = 0; i < count; ++i) {
        n.value.data()[i] = ta.at(i) * tb.at(i);
    }
    return record(std::move(n), "hadamard");
}

NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& ta = node_at(a, "add").value;
    const Tensor& tb = node_at(b, "add").value;
    const bool bias_broadcast =
        is_matrix(ta) && is_vector(tb) && ta.cols() == tb.numel();
    if (!ta.same_shape(tb) && !bias_broadcast) {
        shape_fail("add", ta, tb);
    }
    Node n;
    n.op = Op::Add;
    n.a = a;
    n.b = b;
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    n.value = Tensor(ta.shape());
    if (bias_broadcast) {
        const std::size_t rows = ta.rows();
        const std::size_t cols = ta.cols();
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                n.value.at(i, j) = ta.at(i, j) + tb.at(j);
            }
        }
    } else {
        const std::size_t count = ta.numel();
        for (std::size_t i = 0; i < count; ++i) {
            n.value.data()[i] = ta.at(i) + tb.at(i);
        }
    }
    return record(std::move(n), "add");
}

NodeId Graph::outer(NodeId a, NodeId b) {
    const Tensor& ta = node_at(a, "outer").value;
    const Tensor& tb = node_at(b, "outer").value;
    if (!is_vector(ta) || !is_vector(tb)) {
        shape_fail("outer", ta, tb);
    }
    const std::size_t m = ta.numel();
    const std::size_t k = tb.numel();
    Node n;
    n.op = Op::Outer;
    n.a = a;
    n.b = b;
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    n.value = Tensor({m, k});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            n.value.at(i, j) = ta.at(i) * tb.at(j);
        }
    }
    return record(std::move(n), "outer");
}

NodeId Graph::tanh(NodeId a) {
    const Tensor& ta = node_at(a, "tanh").value;
    Node n;
    n.op = Op::Tanh;
    n.a = a;
    n.requires_grad = nodes_[a].requires_grad;
    n.value = Tensor(ta.shape());
    const std::size_t count = ta.numel();
    for (std::size_t i = 0; i < count; ++i) {
        n.value.data()[i] = std::tanh(ta.at(i));
    }
    return record(std::move(n), "tanh");
}

NodeId Graph::relu(NodeId a) {
    const Tensor& ta = node_at(a, "relu").value;
    Node n;
    n.op = Op::Relu;
    n.a = a;
    n.requires_grad = nodes_[a].requires_grad;
    n.value = Tensor(ta.shape());
    const std::size_t count = ta.numel();
    for (std::size_t i = 0; i < count; ++i) {
        n.value.data()[i] = ta.at(i) > 0.0 ? ta.at(i) : 0.0;
    }
    return record(std::move(n), "relu");
}

NodeId Graph::mean_pool(NodeId a, std::size_t rows_per_group) {
    const Tensor& ta = node_at(a, "mean_pool").value;
    if (!is_matrix(ta) || ta.rows() == 0) {
        shape_fail("mean_pool", ta);
    }
    const std::size_t rows = ta.rows();
    const std::size_t cols = ta.cols();
    const std::size_t group = rows_per_group == 0 ? rows : rows_per_group;
    if (group == 0 || rows % group != 0) {
        throw ShapeError("mean_pool: " + std::to_string(rows) + " rows not divisible into groups of " +
                         std::to_string(group));
    }
    const std::size_t n_groups = rows / group;
    Node n;
    n.op = Op::MeanPool;
    n.a = a;
    n.requires_grad = nodes_[a].requires_grad;
    n.rows_per_group = group;
    n.value = Tensor({n_groups, cols});
    // Centered at the group's first row so a group of identical rows pools
    // to that row with no rounding, for any group length.
    for (std::size_t g = 0; g < n_groups; ++g) {
        const std::size_t base = g * group;
        for (std::size_t j = 0; j < cols; ++j) {
            const double anchor = ta.at(base, j);
            double acc = 0.0;
            for (std::size_t l = 1; l < group; ++l) {
                acc += ta.at(base + l, j) - anchor;
            }
            n.value.at(g, j) = anchor + acc / static_cast<double>(group);
        }
    }
    return record(std::move(n), "mean_pool");
}

NodeId Graph::log_softmax_nll(NodeId logits, std::vector<int> labels) {
    const Tensor& ta = node_at(logits, "log_softmax_nll").value;
    if (!is_matrix(ta)) {
        shape_fail("log_softmax_nll", ta);
    }
    const std::size_t batch = ta.rows();
    const std::size_t classes = ta.cols();
    if (labels.size() != batch) {
        throw ShapeError("log_softmax_nll: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(batch) + " rows");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw ArgumentError("log_softmax_nll: label " + std::to_string(y) +
                                " outside [0," + std::to_string(classes) + ")");
        }
    }
    double total = 0.0;
    for (std::size_t s = 0; s < batch; ++s) {
        double max_logit = ta.at(s, 0);
        for (std::size_t j = 1; j < classes; ++j) {
            max_logit = std::max(max_logit, ta.at(s, j));
        }
        double sum_exp = 0.0;
        for (std::size_t j = 0; j < classes; ++j) {
            sum_exp += std::exp(ta.at(s, j) - max_logit);
        }
        const double lse = max_logit + std::log(sum_exp);
        total += lse - ta.at(s, static_cast<std::size_t>(labels[s]));
    }
    Node n;
    n.op = Op::LogSoftmaxNll;
    n.a = logits;
    n.requires_grad = nodes_[logits].requires_grad;
    n.labels = std::move(labels);
    n.value = Tensor::scalar(total / static_cast<double>(batch));
    return record(std::move(n), "log_softmax_nll");
}

NodeId Graph::transpose(NodeId a) {
    const Tensor& ta = node_at(a, "transpose").value;
    if (!is_matrix(ta)) {
        shape_fail("transpose", ta);
    }
    Node n;
    n.op = Op::Transpose;
    n.a = a;
    n.requires_grad = nodes_[a].requires_grad;
    n.value = Tensor({ta.cols(), ta.rows()});
    for (std::size_t i = 0; i < ta.rows(); ++i) {
        for (std::size_t j = 0; j < ta.cols(); ++j) {
            n.value.at(j, i) = ta.at(i, j);
        }
    }
    return record(std::move(n), "transpose");
}

NodeId Graph::row_softmax(NodeId a) {
    const Tensor& ta = node_at(a, "row_softmax").value;
    if (!is_matrix(ta)) {
        shape_fail("row_softmax", ta);
    }
    Node n;
    n.op = Op::RowSoftmax;
    n.a = a;
    n.requires_grad = nodes_[a].requires_grad;
    n.value = Tensor(ta.shape());
    for (std::size_t i = 0; i < ta.rows(); ++i) {
        double max_v = ta.at(i, 0);
        for (std::size_t j = 1; j < ta.cols(); ++j) {
            max_v = std::max(max_v, ta.at(i, j));
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < ta.cols(); ++j) {
            const double e = std::exp(ta.at(i, j) - max_v);
            n.value.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < ta.cols(); ++j) {
            n.value.at(i, j) /= sum;
        }
    }
    return record(std::move(n), "row_softmax");
}

NodeId Graph::apply(Op kind, std::span<const NodeId> inputs) {
    const auto need = [&](std::size_t n) {
        if (inputs.size() != n) {
            throw ArgumentError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                                " inputs, got " + std::to_string(inputs.size()));
        }
    };
    switch (kind) {
    case Op::MatMul: need(2); return matmul(inputs[0], inputs[1]);
    case Op::Hadamard: need(2); return hadamard(inputs[0], inputs[1]);
    case Op::Add: need(2); return add(inputs[0], inputs[1]);
    case Op::Outer: need(2); return outer(inputs[0], inputs[1]);
    case Op::Tanh: need(1); return tanh(inputs[0]);
    case Op::Relu: need(1); return relu(inputs[0]);
    case Op::MeanPool: need(1); return mean_pool(inputs[0]);
    case Op::Transpose: need(1); return transpose(inputs[0]);
    case Op::RowSoftmax: need(1); return row_softmax(inputs[0]);
    case Op::LogSoftmaxNll:
    case Op::Leaf:
        break;
    }
    throw ArgumentError(std::string(op_name(kind)) + ": not dispatchable through apply()");
}

void Graph::backward_into(Node& node) {
    Node& in_a = node.a >= 0 ? nodes_[node.a] : node;
    const std::vector<double>& g = node.grad;

    const auto ensure_grad = [](Node& n) {
        if (n.grad.empty()) {
            n.grad.assign(n.value.numel(), 0.0);
        }
    };

    switch (node.op) {
    case Op::Leaf:
        return;
    case Op::MatMul: {
        Node& in_b = nodes_[node.b];
        const std::size_t m = in_a.value.rows();
        const std::size_t k = in_a.value.cols();
        const std::size_t n = in_b.value.cols();
        if (in_a.requires_grad) {
            ensure_grad(in_a);
            kernels::matmul_nt_acc(g.data(), in_b.value.data().data(), in_a.grad.data(), m, n, k);
        }
        if (in_b.requires_grad) {
            ensure_grad(in_b);
            kernels::matmul_tn_acc(in_a.value.data().data(), g.data(), in_b.grad.data(), m, k, n);
        }
        return;
    }
    case Op::Hadamard: {
        Node& in_b = nodes_[node.b];
        const std::size_t count = node.value.numel();
        if (in_a.requires_grad) {
            ensure_grad(in_a);
            for (std::size_t i = 0; i < count; ++i) {
                in_a.grad[i] += g[i] * in_b.value.at(i);
            }
        }
        if (in_b.requires_grad) {
            ensure_grad(in_b);
            for (std::size_t i = 0; i < count; ++i) {
                in_b.grad[i] += g[i] * in_a.value.at(i);
            }
        }
        return;
    }
    case Op::Add: {
        Node& in_b = nodes_[node.b];
        const std::size_t count = node.value.numel();
        if (in_a.requires_grad) {
            ensure_grad(in_a);
            for (std::size_t i = 0; i < count; ++i) {
                in_a.grad[i] += g[i];
            }
        }
        if (in_b.requires_grad) {
            ensure_grad(in_b);
            if (in_b.value.numel() == count) {
                for (std::size_t i = 0; i < count; ++i) {
                    in_b.grad[i] += g[i];
                }
            } else {
                // bias broadcast: sum over rows
                const std::size_t cols = in_b.value.numel();
                const std::size_t rows = count / cols;
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < cols; ++j) {
                        in_b.grad[j] += g[i * cols + j];
                    }
                }
            }
        }
        return;
    }
    case Op::Outer: {
        Node& in_b = nodes_[node.b];
        const std::size_t m = in_a.value.numel();
        const std::size_t k = in_b.value.numel();
        if (in_a.requires_grad) {
            ensure_grad(in_a);
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < k; ++j) {
                    acc += g[i * k + j] * in_b.value.at(j);
                }
                in_a.grad[i] += acc;
            }
        }
        if (in_b.requires_grad) {
            ensure_grad(in_b);
            for (std::size_t i = 0; i < m; ++i) {
                const double av = in_a.value.at(i);
                for (std::size_t j = 0; j < k; ++j) {
                    in_b.grad[j] += g[i * k + j] * av;
                }
            }
        }
        return;
    }
    case Op::Tanh: {
        if (!in_a.requires_grad) {
            return;
        }
        ensure_grad(in_a);
        const std::size_t count = node.value.numel();
        for (std::size_t i = 0; i < count; ++i) {
            const double y = node.value.at(i);
            in_a.grad[i] += g[i] * (1.0 - y * y);
        }
        return;
    }
    case Op::Relu: {
        if (!in_a.requires_grad) {
            return;
        }
        ensure_grad(in_a);
        const std::size_t count = node.value.numel();
        for (std::size_t i = 0; i < count; ++i) {
            if (in_a.value.at(i) > 0.0) {
                in_a.grad[i] += g[i];
            }
        }
        return;
    }
    case Op::MeanPool: {
        if (!in_a.requires_grad) {
            return;
        }
        ensure_grad(in_a);
        const std::size_t group = node.rows_per_group;
        const std::size_t cols = node.value.cols();
        const std::size_t n_groups = node.value.rows();
        const double inv = 1.0 / static_cast<double>(group);
        for (std::size_t gi = 0; gi < n_groups; ++gi) {
            for (std::size_t l = 0; l < group; ++l) {
                const std::size_t row = gi * group + l;
                for (std::size_t j = 0; j < cols; ++j) {
                    in_a.grad[row * cols + j] += g[gi * cols + j] * inv;
                }
            }
        }
        return;
    }
    case Op::LogSoftmaxNll: {
        if (!in_a.requires_grad) {
            return;
        }
        ensure_grad(in_a);
        const std::size_t batch = in_a.value.rows();
        const std::size_t classes = in_a.value.cols();
        const double scale = g[0] / static_cast<double>(batch);
        for (std::size_t s = 0; s < batch; ++s) {
            double max_logit = in_a.value.at(s, 0);
            for (std::size_t j = 1; j < classes; ++j) {
                max_logit = std::max(max_logit, in_a.value.at(s, j));
            }
            double sum_exp = 0.0;
            for (std::size_t j = 0; j < classes; ++j) {
                sum_exp += std::exp(in_a.value.at(s, j) - max_logit);
            }
            for (std::size_t j = 0; j < classes; ++j) {
                const double p = std::exp(in_a.value.at(s, j) - max_logit) / sum_exp;
                const double onehot = static_cast<std::size_t>(node.labels[s]) == j ? 1.0 : 0.0;
                in_a.grad[s * classes + j] += scale * (p - onehot);
            }
        }
        return;
    }
    case Op::Transpose: {
        if (!in_a.requires_grad) {
            return;
        }
        ensure_grad(in_a);
        const std::size_t rows = node.value.rows();
        const std::size_t cols = node.value.cols();
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                in_a.grad[j * rows + i] += g[i * cols + j];
            }
        }
        return;
    }
    case Op::RowSoftmax: {
        if (!in_a.requires_grad) {
            return;
        }
        ensure_grad(in_a);
        const std::size_t rows = node.value.rows();
        const std::size_t cols = node.value.cols();
        for (std::size_t i = 0; i < rows; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                dot += g[i * cols + j] * node.value.at(i, j);
            }
            for (std::size_t j = 0; j < cols; ++j) {
                in_a.grad[i * cols + j] += node.value.at(i, j) * (g[i * cols + j] - dot);
            }
        }
        return;
    }
    }
}

std::map<NodeId, Tensor> Graph::backward(NodeId loss) {
    Node& loss_node = node_at(loss, "backward");
    if (finalized_) {
        throw StateError("backward: graph already ran backward");
    }
    if (loss_node.value.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got " + loss_node.value.shape_str());
    }
    if (static_cast<std::size_t>(loss) + 1 != nodes_.size()) {
        throw ContractError("backward: loss must be the final node");
    }
    in_backward_ = true;
    // Every grad-requiring leaf gets a gradient, zero when unused.
    for (Node& n : nodes_) {
        if (n.requires_grad && n.op == Op::Leaf) {
            n.grad.assign(n.value.numel(), 0.0);
        }
    }
    loss_node.grad.assign(1, 1.0);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty() || n.op == Op::Leaf) {
            continue;
        }
        backward_into(n);
        n.grad.clear(); // interior gradients are not retained
        n.grad.shrink_to_fit();
    }
    in_backward_ = false;
    finalized_ = true;

    std::map<NodeId, Tensor> result;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.op == Op::Leaf && n.requires_grad) {
            Tensor g(n.value.shape(), n.grad);
            check_finite(g, "backward");
            n.value.set_grad(n.grad);
            result.emplace(static_cast<NodeId>(i), std::move(g));
        }
    }
    return result;
}

const Tensor& Graph::value(NodeId id) const {
    return node_at(id, "value").value;
}

Tensor Graph::grad(NodeId id) const {
    const Node& n = node_at(id, "grad");
    if (n.grad.empty()) {
        return Tensor::zeros(n.value.shape());
    }
    return Tensor(n.value.shape(), n.grad);
}

std::vector<Tensor> finite_difference_grad(
    const std::function<double(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> params, double eps) {
    if (!(eps > 0.0)) {
        throw ArgumentError("finite_difference_grad: eps must be positive");
    }
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (const Tensor& p : params) {
        grads.push_back(Tensor::zeros(p.shape()));
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::size_t i = 0; i < params[pi].numel(); ++i) {
            const double original = params[pi].at(i);
            params[pi].at(i) = original + eps;
            const double up = f(params);
            params[pi].at(i) = original - eps;
            const double down = f(params);
            params[pi].at(i) = original;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw NumericError("finite_difference_grad: objective returned non-finite value");
            }
            grads[pi].at(i) = (up - down) / (2.0 * eps);
        }
    }
    return grads;
}

double max_relative_error(const std::vector<double>& a, const std::vector<double>& b,
                          double floor) {
    if (a.size() != b.size()) {
        throw ContractError("max_relative_error: length mismatch");
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

} // namespace clwf
