#include "fan/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace fan {

namespace {

double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }
double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void LossConfig::validate() const {
    if (!(focal_alpha > 0.0 && focal_alpha <= 1.0))
        throw std::invalid_argument("LossConfig: focal_alpha must be in (0,1]");
    if (!(focal_gamma >= 0.0)) throw std::invalid_argument("LossConfig: focal_gamma must be >= 0");
    if (!(smooth_l1_beta > 0.0)) throw std::invalid_argument("LossConfig: beta must be > 0");
    if (!(lambda1 >= 0.0 && lambda2 >= 0.0))
        throw std::invalid_argument("LossConfig: lambdas must be >= 0");
}

LevelTargets level_targets(const AnchorAssignment& assignment, const AnchorGrid& grid,
                           std::size_t level_index) {
    const auto& lvl = grid.levels.at(level_index);
    const int A = grid.spec.anchors_per_location();
    const int H = lvl.height, W = lvl.width;
    const std::size_t plane = std::size_t(H) * W;
    std::size_t base = 0;
    for (std::size_t i = 0; i < level_index; ++i) base += grid.levels[i].anchors.size();

    LevelTargets t;
    t.labels.assign(std::size_t(A) * plane, 0);
    t.reg_targets.assign(std::size_t(4 * A) * plane, 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int a = 0; a < A; ++a) {
                const std::size_t flat = base + (std::size_t(y) * W + x) * A + a;
                const std::size_t cell = std::size_t(y) * W + x;
                switch (assignment.labels[flat]) {
                    case AnchorLabel::positive:
                        t.labels[std::size_t(a) * plane + cell] = 1;
                        for (int j = 0; j < 4; ++j)
                            t.reg_targets[std::size_t(a * 4 + j) * plane + cell] =
                                assignment.delta[flat][j];
                        break;
                    case AnchorLabel::ignore:
                        t.labels[std::size_t(a) * plane + cell] = -1;
                        break;
                    case AnchorLabel::background:
                        break;
                }
            }
    return t;
}

Tensor focal_loss(const Tensor& logits, const std::vector<std::int8_t>& labels,
                  const LossConfig& cfg, int n_classification) {
    cfg.validate();
    if (logits.numel() != labels.size())
        throw std::invalid_argument("focal_loss: logits/labels length mismatch");
    if (n_classification <= 0) return Tensor::scalar(0.0);

    const double alpha = cfg.focal_alpha, gamma = cfg.focal_gamma;
    const double inv_n = 1.0 / double(n_classification);
    const auto& xv = logits.values();
    auto dldx = std::make_shared<std::vector<real>>(xv.size(), 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const std::int8_t t = labels[i];
        if (t < 0) continue;
        const double x = xv[i];
        const double p = logistic(x), q = logistic(-x);
        if (t == 1) {
            const double nlp = softplus(-x);  // -log p
            sum += alpha * std::pow(q, gamma) * nlp;
            (*dldx)[i] = alpha * (-gamma * std::pow(q, gamma) * p * nlp - std::pow(q, gamma) * q);
        } else {
            const double nlq = softplus(x);  // -log(1-p)
            sum += (1.0 - alpha) * std::pow(p, gamma) * nlq;
            (*dldx)[i] =
                (1.0 - alpha) * (gamma * std::pow(p, gamma) * q * nlq + std::pow(p, gamma) * p);
        }
    }
    NodePtr xp = logits.node();
    return make_op({1}, {sum * inv_n}, {logits}, [xp, dldx, inv_n](Node& self) {
        for (std::size_t i = 0; i < dldx->size(); ++i)
            xp->grad[i] += self.grad[0] * (*dldx)[i] * inv_n;
    });
}

Tensor smooth_l1(const Tensor& reg_deltas, const std::vector<double>& targets,
                 const std::vector<std::int8_t>& labels, double beta, int n_positive) {
    if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be > 0");
    if (reg_deltas.numel() != targets.size())
        throw std::invalid_argument("smooth_l1: deltas/targets length mismatch");
    if (labels.size() * 4 != targets.size())
        throw std::invalid_argument("smooth_l1: labels length must be numel/4");
    if (n_positive <= 0) return Tensor::scalar(0.0);

    const std::size_t plane = labels.size() / (reg_deltas.shape()[0] / 4);
    const int A = reg_deltas.shape()[0] / 4;
    const double inv_n = 1.0 / double(n_positive);
    const auto& pv = reg_deltas.values();
    auto dldx = std::make_shared<std::vector<real>>(pv.size(), 0.0);
    double sum = 0.0;
    for (int a = 0; a < A; ++a)
        for (std::size_t c = 0; c < plane; ++c) {
            if (labels[std::size_t(a) * plane + c] != 1) continue;
            for (int j = 0; j < 4; ++j) {
                const std::size_t idx = std::size_t(a * 4 + j) * plane + c;
                const double d = pv[idx] - targets[idx];
                if (std::abs(d) < beta) {
                    sum += 0.5 * d * d / beta;
                    (*dldx)[idx] = d / beta;
                } else {
                    sum += std::abs(d) - 0.5 * beta;
                    (*dldx)[idx] = d > 0 ? 1.0 : -1.0;
                }
            }
        }
    NodePtr xp = reg_deltas.node();
    return make_op({1}, {sum * inv_n}, {reg_deltas}, [xp, dldx, inv_n](Node& self) {
        for (std::size_t i = 0; i < dldx->size(); ++i)
            xp->grad[i] += self.grad[0] * (*dldx)[i] * inv_n;
    });
}

Tensor attention_loss(const Tensor& logits, const std::vector<std::uint8_t>& mask) {
    if (logits.numel() != mask.size())
        throw std::invalid_argument("attention_loss: logits/mask length mismatch");
    const double inv_n = 1.0 / double(mask.size());
    const auto& xv = logits.values();
    auto dldx = std::make_shared<std::vector<real>>(xv.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double x = xv[i];
        const double t = mask[i] ? 1.0 : 0.0;
        sum += softplus(x) - t * x;  // == -[t log p + (1-t) log(1-p)]
        (*dldx)[i] = logistic(x) - t;
    }
    NodePtr xp = logits.node();
    return make_op({1}, {sum * inv_n}, {logits}, [xp, dldx, inv_n](Node& self) {
        for (std::size_t i = 0; i < dldx->size(); ++i)
            xp->grad[i] += self.grad[0] * (*dldx)[i] * inv_n;
    });
}

std::pair<Tensor, LossReport> total_loss(const std::vector<LevelPrediction>& preds,
                                         const AnchorGrid& grid,
                                         const AnchorAssignment& assignment,
                                         const AttentionTarget& att_targets,
                                         const LossConfig& cfg) {
    cfg.validate();
    if (preds.size() != grid.levels.size() || att_targets.levels.size() != grid.levels.size())
        throw std::invalid_argument("total_loss: per-level inputs must match grid levels");

    LossReport report;
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t li = 0; li < preds.size(); ++li) {
        const auto& counts = assignment.per_level[li];
        const LevelTargets t = level_targets(assignment, grid, li);

        Tensor cls = focal_loss(preds[li].cls_logits, t.labels, cfg, counts.n_classification);
        Tensor reg = smooth_l1(preds[li].reg_deltas, t.reg_targets, t.labels, cfg.smooth_l1_beta,
                               counts.n_positive);
        // A level with no assigned faces has no heatmap supervision at all;
        // an all-zero mask is absence of a target, not a negative target.
        Tensor att = assignment.matched_gt_per_level[li].empty()
                         ? Tensor::scalar(0.0)
                         : attention_loss(preds[li].att_logits, att_targets.levels[li].mask);

        LossReport::Level lvl;
        lvl.k = grid.levels[li].k;
        lvl.cls = cls.item();
        lvl.reg = reg.item();
        lvl.att = att.item();
        lvl.n_classification = counts.n_classification;
        lvl.n_positive = counts.n_positive;
        report.per_level.push_back(lvl);

        total = add(total, add(cls, add(scale(reg, cfg.lambda1), scale(att, cfg.lambda2))));
    }
    report.total = total.item();
    return {total, report};
}

}  // namespace fan
