#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "clwf/factorized_linear.hpp"
#include "clwf/graph.hpp"
#include "clwf/rng.hpp"
#include "clwf/task_suite.hpp"
#include "clwf/tensor.hpp"

namespace clwf {

enum class Activation { Tanh, Relu };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);

struct ModelConfig {
    int d_in = 32;
    int d_model = 64;
    int n_blocks = 2;
    int n_classes = 10;
    int k = 4;
    Activation activation = Activation::Tanh;
    bool use_attention = false;
    double dropout = 0.0;      // applied inside residual branches during training
    double init_scale = 0.01;  // factor init stddev for new tasks

    void validate() const;
};

// Encoder over frame sequences with factorized linear layers, mean pooling
// and a plain (never factorized) classifier head. One registered FactorSet
// per task in every factorized layer.
class ToyEncoderClassifier {
public:
    explicit ToyEncoderClassifier(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }

    // Seeds all shared weights; biases stay zero. Factors are drawn when
    // tasks are registered.
    void init_params(Rng& rng);

    // Registers `task` in every factorized layer. Existing parameters are
    // untouched, bit for bit.
    void add_language(const std::string& task, double init_scale, Rng& rng);
    bool has_task(const std::string& task) const;
    std::vector<std::string> task_ids() const;

    // logits for one sequence [L, d_in] -> [n_classes]
    Tensor forward(const Tensor& x, const std::string& task) const;
    // logits for a batch of sequences -> [b, n_classes]
    Tensor batch_logits(const std::vector<const Sample*>& batch, const std::string& task) const;
    int predict(const Tensor& x, const std::string& task) const;

    // Mean NLL over the batch, as a plain number (no tape).
    double loss(const std::vector<const Sample*>& batch, const std::string& task) const;

    // Graph-building loss for training; dropout_rng enables dropout when
    // the config asks for it.
    NodeId loss_node(ParamContext& ctx, const std::vector<const Sample*>& batch,
                     const std::string& task, Rng* dropout_rng = nullptr) const;

    // Convenience: one backward pass. Returns loss value and gradients of
    // all currently-trainable parameters.
    struct LossGrads {
        double loss = 0.0;
        std::map<std::string, Tensor> grads;
    };
    LossGrads loss_and_grads(const std::vector<const Sample*>& batch, const std::string& task,
                             Rng* dropout_rng = nullptr) const;

    using ParamVisitor = FactorizedLinear::ParamVisitor;
    void visit_params(const ParamVisitor& visit);
    void visit_params(
        const std::function<void(const std::string&, const Tensor&, bool, const std::string&)>&
            visit) const;

    std::map<std::string, Tensor*> named_params();
    std::map<std::string, const Tensor*> named_params() const;
    std::size_t param_count() const;
    std::size_t factorized_layer_count() const { return factorized_.size(); }

    // Trainability switches used by the training strategies. Shared covers
    // every non-factor parameter including the classifier head.
    void set_shared_trainable(bool flag);
    void set_task_trainable(const std::string& task, bool flag);
    void set_all_tasks_trainable(bool flag);
    bool shared_trainable() const { return shared_trainable_; }

    std::vector<std::string> shared_param_names() const;
    std::vector<std::string> task_param_names(const std::string& task) const;

    // Folds every task factor into explicit dense weights and replays the
    // forward with plain matrix algebra; the graph path must match this.
    Tensor dense_reference_logits(const Tensor& x, const std::string& task) const;

    std::uint64_t param_hash() const;

private:
    NodeId encode_rows(ParamContext& ctx, NodeId rows, const std::string& task,
                       Rng* dropout_rng) const;
    NodeId attention_block(ParamContext& ctx, NodeId h, std::size_t block_index,
                           const std::string& task) const;
    NodeId activation_node(ParamContext& ctx, NodeId a) const;
    NodeId logits_node(ParamContext& ctx, const std::vector<const Sample*>& batch,
                       const std::string& task, Rng* dropout_rng) const;

    ModelConfig cfg_;
    FactorizedLinear input_proj_;
    struct Block {
        std::unique_ptr<FactorizedLinear> attn_q;
        std::unique_ptr<FactorizedLinear> attn_k;
        std::unique_ptr<FactorizedLinear> attn_v;
        std::unique_ptr<FactorizedLinear> attn_o;
        FactorizedLinear linear;
    };
    std::vector<Block> blocks_;
    Tensor out_weight_t_; // [d_model, n_classes]
    Tensor out_bias_;     // [n_classes]
    bool shared_trainable_ = true;
    std::set<std::string> tasks_;
    std::vector<FactorizedLinear*> factorized_; // all factorized layers, in order
};

} // namespace clwf
