#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "clwf/graph.hpp"
#include "clwf/rng.hpp"
#include "clwf/tensor.hpp"

namespace clwf {

// Per-graph binding of named parameters to leaf nodes. One context lives
// for exactly one Graph; layers memoize derived nodes (effective weights,
// constants) in `cache` so a batch shares them.
struct ParamContext {
    explicit ParamContext(Graph& graph) : g(graph) {}

    Graph& g;
    std::map<std::string, NodeId> bound;
    std::map<std::string, NodeId> cache;

    NodeId bind(const std::string& name, const Tensor& value, bool trainable) {
        auto it = bound.find(name);
        if (it != bound.end()) {
            return it->second;
        }
        Tensor copy = value;
        copy.set_requires_grad(trainable);
        const NodeId id = g.leaf(std::move(copy));
        bound.emplace(name, id);
        return id;
    }
};

// The rank-k task-specific factors of one layer: a multiplicative pair
// (r_m, v_m) and a bias pair (r_b, v_b), k vectors each. r vectors live in
// input space, v vectors in output space.
struct FactorSet {
    std::string task_id;
    std::vector<Tensor> r_m; // k x [d_in]
    std::vector<Tensor> v_m; // k x [d_out]
    std::vector<Tensor> r_b; // k x [d_in]
    std::vector<Tensor> v_b; // k x [d_out]

    std::size_t rank() const { return r_m.size(); }
};

struct ParamOverhead {
    std::int64_t added_per_task = 0;
    double fraction_of_dense = 0.0;
};

// added = 2k(d_in + d_out) per factorized matrix; fraction relative to the
// d_in*d_out dense weight it specializes.
ParamOverhead param_overhead(int k, int d_in, int d_out);

// Linear layer y = x @ W_eff^T + b with a per-task effective weight
//   W_eff = W_S (.) (1 + sum_i v_m[i] r_m[i]^T) + sum_i v_b[i] r_b[i]^T.
// The ones offset makes a freshly added task start within O(init_scale^2)
// of the shared-only map. The shared weight is stored transposed
// ([d_in, d_out]) so the hot path is a single row-major matmul.
class FactorizedLinear {
public:
    FactorizedLinear(std::string name, int d_in, int d_out, int k, bool with_bias);

    const std::string& name() const { return name_; }
    int d_in() const { return d_in_; }
    int d_out() const { return d_out_; }
    int rank() const { return k_; }
    bool has_bias() const { return bias_.has_value(); }
    const std::optional<Tensor>& bias() const { return bias_; }

    // Draws 4k factor vectors i.i.d. Normal(0, init_scale^2). No existing
    // parameter changes. Duplicate task ids are rejected.
    FactorSet& add_task(const std::string& task, double init_scale, Rng& rng);
    bool has_task(const std::string& task) const;
    const FactorSet& factors(const std::string& task) const;
    std::vector<std::string> task_ids() const;

    // W_M = 1 + sum outer(v_m, r_m) and W_B = sum outer(v_b, r_b), both
    // [d_out, d_in].
    std::pair<Tensor, Tensor> materialize_task_matrices(const std::string& task) const;

    // W_S (.) W_M + W_B, [d_out, d_in]; the reference the hot path must match.
    Tensor effective_weight(const std::string& task) const;
    Tensor shared_weight() const; // [d_out, d_in] view of the stored transpose

    // Dense forward: X [n, d_in] -> [n, d_out]. No tape involved.
    Tensor forward(const Tensor& x, const std::string& task) const;

    // Graph forward. weight_node builds (and caches per context) the
    // transposed effective weight [d_in, d_out].
    NodeId weight_node(ParamContext& ctx, const std::string& task) const;
    NodeId apply(ParamContext& ctx, NodeId x, const std::string& task) const;

    void set_shared_trainable(bool flag) { shared_trainable_ = flag; }
    void set_task_trainable(const std::string& task, bool flag);
    bool shared_trainable() const { return shared_trainable_; }
    bool task_trainable(const std::string& task) const;

    // Deterministic order: shared weight, shared bias, then per task
    // (sorted) r_m/0..k-1, v_m/*, r_b/*, v_b/*. `task` is empty for shared
    // parameters.
    using ParamVisitor =
        std::function<void(const std::string& name, Tensor& value, bool trainable,
                           const std::string& task)>;
    void visit_params(const ParamVisitor& visit);

    Tensor& shared_weight_storage() { return weight_t_; }
    std::optional<Tensor>& bias_storage() { return bias_; }

private:
    std::string name_;
    int d_in_;
    int d_out_;
    int k_;
    Tensor weight_t_; // [d_in, d_out]
    std::optional<Tensor> bias_;
    std::map<std::string, FactorSet> factors_;
    std::map<std::string, bool> task_trainable_;
    bool shared_trainable_ = true;
};

} // namespace clwf
