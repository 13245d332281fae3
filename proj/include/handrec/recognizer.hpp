#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "handrec/optimizer.hpp"
#include "handrec/params.hpp"

namespace handrec {

// a..z are 0..25, EOS is charset-1. The start-of-sequence token is a
// dedicated embedding row, not a charset symbol.
int char_to_index(char c);
char index_to_char(int i);
std::vector<int> word_to_label(const std::string& word, const ModelConfig& cfg);
std::string label_to_word(const std::vector<int>& label, const ModelConfig& cfg);

struct WordImage {
    Eigen::MatrixXd pixels; // img_h x img_w, values in [0,1]
    std::vector<int> label; // charset indices terminated by EOS
};

struct DecodeTrace {
    Tensor logits;      // L x C
    Tensor attn;        // L x Q, rows on the simplex
    Tensor per_char_ce; // [L]
    double mean_ce = 0.0;
};

enum class DecodeMode { TeacherForced, Greedy };

struct DecodeResult {
    DecodeTrace trace;
    Tensor decoder_outputs; // L x hidden
    std::string predicted;
};

// Graph handles for one decoded word; the training paths compose losses and
// per-step classifier gradients from these.
struct DecodeNodes {
    std::vector<NodeId> ce;      // per-step cross-entropy, scalars
    std::vector<NodeId> logits;  // per-step [C]
    std::vector<NodeId> attn;    // per-step [Q]
    std::vector<NodeId> outputs; // per-step decoder output [hidden]
    NodeId mean_ce = kNoNode;
    std::vector<int> chars; // teacher: label; greedy: emitted chars incl. EOS
};

// H = context matrix (Q x hidden): patch projection + both recurrent passes.
Var encode(Graph& g, const ParamNodes& params, const ModelConfig& cfg,
           const WordImage& image);

// One attention read: probabilities over patch positions plus the glimpse.
std::pair<Var, Var> attend(Graph& g, const ParamNodes& params, Var s_prev, Var H);

DecodeNodes decode_teacher(Graph& g, const ParamNodes& params, const ModelConfig& cfg,
                           const WordImage& image);
DecodeNodes decode_greedy(Graph& g, const ParamNodes& params, const ModelConfig& cfg,
                          const WordImage& image, int max_len);

// Convenience wrapper over a scratch graph.
DecodeResult decode_word(const ParamSet& params, const ModelConfig& cfg,
                         const WordImage& image, DecodeMode mode, int max_len = 0);

struct PretrainOpts {
    int epochs = 10;
    double lr = 2e-3;
    int batch = 16;
    std::uint64_t seed = 0;
};

// Conventional supervised training on the mean character cross-entropy.
// Appends one mean-loss row per epoch to curve when given.
ParamSet pretrain(const std::vector<WordImage>& dataset, const ParamSet& start,
                  const ModelConfig& cfg, const PretrainOpts& opts,
                  std::vector<double>* curve = nullptr);

} // namespace handrec
