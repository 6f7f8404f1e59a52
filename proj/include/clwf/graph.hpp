#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "clwf/tensor.hpp"

namespace clwf {

using NodeId = std::int32_t;

enum class Op {
    Leaf,
    MatMul,
    Hadamard,
    Add,
    Outer,
    Tanh,
    Relu,
    MeanPool,
    LogSoftmaxNll,
    Transpose,
    RowSoftmax,
};

const char* op_name(Op op);

// Reverse-mode tape. Forward results are computed eagerly when a node is
// recorded; backward walks the tape once, in reverse creation order.
// A graph is built, run backward at most once, and discarded.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    NodeId leaf(Tensor value);
    NodeId constant(Tensor value); // leaf with requires_grad forced off

    NodeId matmul(NodeId a, NodeId b);
    NodeId hadamard(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId outer(NodeId a, NodeId b);
    NodeId tanh(NodeId a);
    NodeId relu(NodeId a);
    // Means consecutive groups of `rows_per_group` rows; 0 pools all rows.
    NodeId mean_pool(NodeId a, std::size_t rows_per_group = 0);
    // Mean negative log-likelihood of `labels` under row-wise softmax.
    NodeId log_softmax_nll(NodeId logits, std::vector<int> labels);
    NodeId transpose(NodeId a);
    NodeId row_softmax(NodeId a);

    // Generic dispatch for the binary/unary primitives above.
    NodeId apply(Op kind, std::span<const NodeId> inputs);

    // Populates gradients for every grad-requiring node reachable below
    // `loss`, which must be the final node and scalar. Unused leaves keep
    // zero gradients. Returns the gradients of all grad-requiring leaves.
    std::map<NodeId, Tensor> backward(NodeId loss);

    const Tensor& value(NodeId id) const;
    // Zero tensor if backward never touched the node.
    Tensor grad(NodeId id) const;

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Op op = Op::Leaf;
        NodeId a = -1;
        NodeId b = -1;
        Tensor value;
        std::vector<double> grad; // allocated during backward
        bool requires_grad = false;
        std::size_t rows_per_group = 0; // MeanPool
        std::vector<int> labels;        // LogSoftmaxNll
    };

    NodeId record(Node node, const char* where);
    Node& node_at(NodeId id, const char* where);
    const Node& node_at(NodeId id, const char* where) const;
    void backward_into(Node& node);

    std::vector<Node> nodes_;
    bool in_backward_ = false;
    bool finalized_ = false;
};

// Central-difference gradient oracle: (f(x+eps e_j) - f(x-eps e_j)) / (2 eps)
// per coordinate of every tensor in `params`.
std::vector<Tensor> finite_difference_grad(
    const std::function<double(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> params, double eps);

// max over coordinates of |a-b| / max(|a|, |b|, floor).
double max_relative_error(const std::vector<double>& a, const std::vector<double>& b,
                          double floor = 1e-4);

} // namespace clwf
