#include "fan/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace fan {

AttentionTarget build_attention_targets(const std::vector<Box>& gt,
                                        const AnchorAssignment& assignment,
                                        const AnchorGrid& grid) {
    if (assignment.matched_gt_per_level.size() != grid.levels.size())
        throw std::invalid_argument("build_attention_targets: assignment/grid level mismatch");

    AttentionTarget out;
    for (std::size_t li = 0; li < grid.levels.size(); ++li) {
        const auto& lvl = grid.levels[li];
        AttentionTarget::LevelMask m;
        m.k = lvl.k;
        m.width = lvl.width;
        m.height = lvl.height;
        m.mask.assign(std::size_t(lvl.width) * lvl.height, 0);
        const int stride = 1 << lvl.k;
        for (int g : assignment.matched_gt_per_level[li]) {
            const Box& b = gt.at(std::size_t(g));
            for (int i = 0; i < lvl.height; ++i) {
                const double cy = (i + 0.5) * stride;
                if (cy < b.y_min || cy >= b.y_max) continue;
                for (int j = 0; j < lvl.width; ++j) {
                    const double cx = (j + 0.5) * stride;
                    if (cx >= b.x_min && cx < b.x_max)
                        m.mask[std::size_t(i) * lvl.width + j] = 1;
                }
            }
        }
        out.levels.push_back(std::move(m));
    }
    return out;
}

Tensor exp_gate(const Tensor& features, const Tensor& attention_logits, GateMode mode) {
    const auto& fs = features.shape();
    const auto& ls = attention_logits.shape();
    if (fs.size() != 3 || ls.size() != 3 || ls[0] != 1 || ls[1] != fs[1] || ls[2] != fs[2])
        throw std::invalid_argument("exp_gate: expects features [C,H,W], logits [1,H,W]");
    if (mode == GateMode::bypass) return features;

    const int C = fs[0];
    const std::size_t plane = std::size_t(fs[1]) * fs[2];
    const auto& fv = features.values();
    const auto& lv = attention_logits.values();

    // factor and its derivative w.r.t. the logit, per pixel
    std::vector<real> factor(plane), dfactor(plane);
    for (std::size_t i = 0; i < plane; ++i) {
        if (mode == GateMode::sigmoid_exp) {
            const real s = 1.0 / (1.0 + std::exp(-lv[i]));
            factor[i] = std::exp(s);
            dfactor[i] = factor[i] * s * (1.0 - s);
        } else {
            factor[i] = std::exp(lv[i]);
            dfactor[i] = factor[i];
        }
    }

    std::vector<real> out(fv.size());
    for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            out[std::size_t(c) * plane + i] = fv[std::size_t(c) * plane + i] * factor[i];

    NodePtr fp = features.node(), lp = attention_logits.node();
    auto fac = std::make_shared<std::vector<real>>(std::move(factor));
    auto dfac = std::make_shared<std::vector<real>>(std::move(dfactor));
    return make_op(fs, std::move(out), {features, attention_logits},
                   [fp, lp, fac, dfac, C, plane](Node& self) {
                       if (fp->requires_grad)
                           for (int c = 0; c < C; ++c)
                               for (std::size_t i = 0; i < plane; ++i)
                                   fp->grad[std::size_t(c) * plane + i] +=
                                       self.grad[std::size_t(c) * plane + i] * (*fac)[i];
                       if (lp->requires_grad)
                           for (int c = 0; c < C; ++c)
                               for (std::size_t i = 0; i < plane; ++i)
                                   lp->grad[i] += self.grad[std::size_t(c) * plane + i] *
                                                  fp->val[std::size_t(c) * plane + i] * (*dfac)[i];
                   });
}

}  // namespace fan
