#pragma once

#include <optional>
#include <string>
#include <vector>

#include "handrec/recognizer.hpp"
#include "handrec/writers.hpp"

namespace handrec {

enum class VariantKind { MetaHtr, Maml, MamlFo, MetaSgd, Anil, Finetune, Dg };

VariantKind variant_from_string(const std::string& s);
std::string variant_name(VariantKind v);

// 3-layer MLP with a sigmoid head that maps concatenated classifier
// gradients to a per-character weight in (0,1). The final layer starts at
// zero so initial weights sit exactly at 0.5.
struct WeightNetParams {
    std::vector<Tensor> tensors; // W1 b1 W2 b2 W3 b3

    static WeightNetParams init(int input_width, std::uint64_t seed);
    int input_width() const;
    bool bitwise_equal(const WeightNetParams& o) const;
};

int weight_net_input_width(const ModelConfig& cfg);

// Meta-learned state: recognizer weights plus the weight net and per-layer
// inner rates (alpha is one scalar per named theta layer, unconstrained).
// alpha_pp mirrors theta and is used by the metasgd variant only.
struct MetaParams {
    ParamSet theta;
    WeightNetParams gamma;
    Tensor alpha; // [num_layers]
    std::optional<ParamSet> alpha_pp;

    static MetaParams init(ParamSet theta, const ModelConfig& cfg, double alpha_init,
                           std::uint64_t seed, bool per_param_alpha = false);
};

// Meta-training hyperparameters and ablation switches.
struct MetaHyper {
    double beta = 1e-4;           // outer rate
    double fixed_inner_lr = 1e-3; // maml family and naive fine-tuning
    double dg_lambda = 0.5;
    double dg_inner_lr = 5e-4;
    bool ablate_gamma = false; // metahtr arm [i]: mean-CE inner loss
    bool ablate_alpha = false; // metahtr arm [ii]: alpha fixed at fixed_inner_lr
};

// -- per-character classifier gradients -------------------------------------

// G_t = concat(grad_phi of the t-th step loss, grad_phi of the mean loss),
// both computed in closed form from softmax outputs and decoder outputs.
// The results are plain tensors: they enter the weight net as constants.
std::vector<Tensor> classifier_step_gradients(const DecodeTrace& trace,
                                              const Tensor& decoder_outputs,
                                              const std::vector<int>& labels);

// Weight-net forward for a list of G vectors; differentiable w.r.t. gamma.
std::vector<NodeId> predict_weight_nodes(Graph& g, const std::vector<NodeId>& gamma_nodes,
                                         const std::vector<Tensor>& G);
std::vector<double> predict_weights(const std::vector<Tensor>& G,
                                    const WeightNetParams& gamma);

// Instance-weighted inner loss: sum_t gamma_t * ce_t (a sum, not a mean).
double inner_loss(const Tensor& per_char_ce, const std::vector<double>& gamma);

// -- inner / outer loops -----------------------------------------------------

// One gradient step on the support set under the variant's rules. theta'
// values only; the differentiable version lives inside outer_step.
ParamSet inner_update(const MetaParams& meta, const std::vector<WordImage>& support,
                      const ModelConfig& cfg, VariantKind variant,
                      const MetaHyper& hyper = {});

struct OuterStepResult {
    MetaParams meta;
    double mean_outer_loss = 0.0;
    int tasks_ok = 0;
    std::vector<std::string> task_errors;
};

struct TaskGradients {
    std::vector<Tensor> grads; // aligned with meta_var_ptrs order
    double outer_loss = 0.0;
};

// Meta-gradients of one task's outer loss, through the inner update.
TaskGradients meta_task_gradients(const MetaParams& meta, const WriterTask& task,
                                  VariantKind variant, const ModelConfig& cfg,
                                  const MetaHyper& hyper);

// One meta-update over a batch of writer tasks. Gradients are reduced in
// sorted writer order regardless of input order or worker count; the update
// is applied by Adam with rate beta.
OuterStepResult outer_step(const MetaParams& meta, const std::vector<WriterTask>& tasks,
                           double beta, VariantKind variant, const ModelConfig& cfg,
                           const MetaHyper& hyper, AdamState& adam, int workers = 1);

// Inference-time adaptation: n_steps repeated inner updates, no outer update.
ParamSet adapt(const MetaParams& meta, const std::vector<WordImage>& support, int n_steps,
               VariantKind variant, const ModelConfig& cfg, const MetaHyper& hyper = {});

// Plain gradient descent on the mean CE of the support set.
ParamSet finetune(const ParamSet& theta, const std::vector<WordImage>& support, int steps,
                  double lr, const ModelConfig& cfg);

// Domain-generalisation objective: one plain gradient step on
// lambda * L(theta; support) + (1 - lambda) * L(theta'; val).
ParamSet dg_step(const ParamSet& theta, const WriterTask& task, double lambda,
                 double inner_lr, double beta, const ModelConfig& cfg);

// Flat meta-variable views used by the meta-optimizer and checkpointing.
// Order: theta tensors, then gamma, then alpha, then per-parameter alpha;
// inclusion depends on the variant and ablation switches.
std::vector<Tensor*> meta_var_ptrs(MetaParams& meta, VariantKind variant,
                                   const MetaHyper& hyper);
std::vector<const Tensor*> meta_var_ptrs(const MetaParams& meta, VariantKind variant,
                                         const MetaHyper& hyper);
std::vector<std::string> meta_var_names(const MetaParams& meta, VariantKind variant,
                                        const MetaHyper& hyper);

} // namespace handrec
