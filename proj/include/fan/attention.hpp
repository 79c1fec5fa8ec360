#pragma once

#include <cstdint>
#include <vector>

#include "fan/assignment.hpp"
#include "fan/geometry.hpp"
#include "fan/tensor.hpp"

namespace fan {

// Per-pyramid-level binary supervision mask at feature resolution. A ground
// truth contributes to level k's mask only if at least one level-k anchor was
// assigned positive to it.
struct AttentionTarget {
    struct LevelMask {
        int k = 0;
        int width = 0, height = 0;
        std::vector<std::uint8_t> mask;  // H_k * W_k, row-major, values in {0,1}
    };
    std::vector<LevelMask> levels;
};

// Rasterization is cell-center-inside-box, with cell centers at
// ((j+0.5)*stride, (i+0.5)*stride), the anchor-grid convention.
AttentionTarget build_attention_targets(const std::vector<Box>& gt,
                                        const AnchorAssignment& assignment,
                                        const AnchorGrid& grid);

enum class GateMode {
    sigmoid_exp,  // factor exp(sigmoid(logit)), bounded in (1, e)
    raw_exp,      // factor exp(logit), unbounded (ablation)
    bypass,       // factor 1; features pass through untouched
};

// Elementwise feature amplification: out[c,y,x] = f[c,y,x] * g(logit[0,y,x]).
// Differentiable w.r.t. both inputs.
Tensor exp_gate(const Tensor& features, const Tensor& attention_logits,
                GateMode mode = GateMode::sigmoid_exp);

}  // namespace fan
