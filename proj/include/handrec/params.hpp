#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "handrec/graph.hpp"
#include "handrec/tensor.hpp"

namespace handrec {

// Recognizer dimensions. hidden is the decoder state width; the two context
// cells use hidden/2 each so context vectors are hidden wide.
struct ModelConfig {
    int img_h = 16;
    int img_w = 64;
    int patch_h = 16;
    int patch_w = 8;
    int hidden = 48;
    int embed = 32;
    int attn = 48;
    int charset = 27; // a..z + EOS
    int max_len = 12;

    int patches() const { return (img_h / patch_h) * (img_w / patch_w); }
    int patch_dim() const { return patch_h * patch_w; }
    int eos() const { return charset - 1; }
    int sos_row() const { return charset; } // dedicated embedding row
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Named, ordered layers of tensors. phi (the classifier) is always the layer
// called "classifier". Updates produce new ParamSets; instances are shared
// read-only across concurrent tasks.
struct ParamSet {
    std::vector<std::pair<std::string, std::vector<Tensor>>> layers;

    static ParamSet init_recognizer(const ModelConfig& cfg, std::uint64_t seed);
    static ParamSet zeros_recognizer(const ModelConfig& cfg);

    std::size_t layer_index(const std::string& name) const;
    const std::vector<Tensor>& layer(const std::string& name) const;
    std::vector<Tensor>& layer(const std::string& name);
    std::size_t tensor_count() const;
    bool same_shapes(const ParamSet& o) const;
    bool bitwise_equal(const ParamSet& o) const;

    std::vector<Tensor*> flat();
    std::vector<const Tensor*> flat() const;
};

// Graph-bound mirror of a ParamSet.
struct ParamNodes {
    std::vector<std::pair<std::string, std::vector<NodeId>>> layers;

    std::size_t layer_index(const std::string& name) const;
    const std::vector<NodeId>& layer(const std::string& name) const;
    std::vector<NodeId> flat() const;
    std::vector<std::vector<NodeId>> grouped() const;
};

ParamNodes bind(Graph& g, const ParamSet& p, bool requires_grad);
ParamSet extract(const Graph& g, const ParamNodes& nodes);

// Layer names in fixed order.
std::vector<std::string> recognizer_layer_names();

} // namespace handrec
