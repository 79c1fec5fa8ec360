#include "fan/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

namespace fan {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::uint64_t sample_seed(std::uint64_t seed, int epoch, int step, int element) {
    std::uint64_t x = seed;
    x = splitmix64(x ^ std::uint64_t(epoch));
    x = splitmix64(x ^ (std::uint64_t(step) << 20));
    x = splitmix64(x ^ (std::uint64_t(element) << 40));
    return x;
}

// Forward/backward for one sample; loss scaled by `weight`. Accumulates into
// the given model's parameter gradients and returns the unscaled report.
LossReport accumulate_sample(const FanModel& model, const Sample& sample, const AnchorGrid& grid,
                             const LossConfig& loss_cfg, const TrainConfig& cfg, double weight) {
    const PyramidOutput out = model.forward(image_to_tensor(sample.image));
    const AnchorAssignment assignment =
        assign(grid, sample.boxes, cfg.pos_thresh, cfg.bg_thresh);
    const AttentionTarget att = build_attention_targets(sample.boxes, assignment, grid);
    auto [loss, report] = total_loss(out.levels, grid, assignment, att, loss_cfg);
    Tensor scaled = scale(loss, weight);
    scaled.backward();
    return report;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
    if (epochs < 1 || batch_size < 1 || patches_per_epoch < 1)
        throw std::invalid_argument("TrainConfig: epochs/batch/patches must be >= 1");
    if (threads < 1) throw std::invalid_argument("TrainConfig: threads must be >= 1");
    if (grad_clip_norm < 0.0)
        throw std::invalid_argument("TrainConfig: grad_clip_norm must be >= 0");
    for (std::size_t i = 0; i < lr_drop_epochs.size(); ++i) {
        if (lr_drop_epochs[i] >= epochs)
            throw std::invalid_argument("TrainConfig: drop epochs must be < epochs");
        if (i > 0 && lr_drop_epochs[i] <= lr_drop_epochs[i - 1])
            throw std::invalid_argument("TrainConfig: drop epochs must be strictly increasing");
    }
    loss.validate();
    augment.validate();
}

double TrainConfig::lr_at_epoch(int epoch) const {
    double v = lr;
    for (int d : lr_drop_epochs)
        if (epoch >= d) v *= lr_drop_factor;
    return v;
}

LossReport train_step(FanModel& model, const std::vector<Sample>& batch, const AnchorGrid& grid,
                      const TrainConfig& cfg, double lr) {
    LossConfig loss_cfg = cfg.loss;
    if (!cfg.attention_enabled) loss_cfg.lambda2 = 0.0;
    const double weight = 1.0 / double(batch.size());

    model.zero_grads();
    std::vector<LossReport> reports(batch.size());
    if (cfg.threads <= 1 || batch.size() <= 1) {
        for (std::size_t b = 0; b < batch.size(); ++b)
            reports[b] = accumulate_sample(model, batch[b], grid, loss_cfg, cfg, weight);
    } else {
        const int n_workers = std::min<int>(cfg.threads, int(batch.size()));
        std::vector<FanModel> clones;
        clones.reserve(std::size_t(n_workers));
        for (int w = 0; w < n_workers; ++w) clones.push_back(model.clone());
        std::vector<std::thread> pool;
        for (int w = 0; w < n_workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t b = std::size_t(w); b < batch.size(); b += std::size_t(n_workers))
                    reports[b] =
                        accumulate_sample(clones[std::size_t(w)], batch[b], grid, loss_cfg, cfg,
                                          weight);
            });
        for (auto& t : pool) t.join();
        // Fixed-order reduction into the master gradients.
        for (int w = 0; w < n_workers; ++w)
            for (std::size_t pi = 0; pi < model.params().size(); ++pi) {
                auto& dst = model.params()[pi].value.grad();
                const auto& src = clones[std::size_t(w)].params()[pi].value.grad();
                for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
            }
    }

    LossReport mean;
    for (const auto& r : reports) mean.total += r.total * weight;
    if (!reports.empty()) {
        mean.per_level.resize(reports[0].per_level.size());
        for (const auto& r : reports)
            for (std::size_t li = 0; li < r.per_level.size(); ++li) {
                mean.per_level[li].k = r.per_level[li].k;
                mean.per_level[li].cls += r.per_level[li].cls * weight;
                mean.per_level[li].reg += r.per_level[li].reg * weight;
                mean.per_level[li].att += r.per_level[li].att * weight;
                mean.per_level[li].n_classification += r.per_level[li].n_classification;
                mean.per_level[li].n_positive += r.per_level[li].n_positive;
            }
    }
    if (!std::isfinite(mean.total))
        throw NumericalError("train_step: non-finite loss", mean);

    if (cfg.grad_clip_norm > 0.0) {
        double sq = 0.0;
        for (auto& p : model.params())
            for (double g : p.value.grad()) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip_norm) {
            const double s = cfg.grad_clip_norm / norm;
            for (auto& p : model.params())
                for (auto& g : p.value.grad()) g *= s;
        }
    }

    for (auto& p : model.params())
        sgd_step(p.value, p.value.grad(), lr, cfg.momentum, cfg.weight_decay, p.velocity);
    return mean;
}

TrainResult train(FanModel& model, const std::string& data_dir, const TrainConfig& cfg) {
    cfg.validate();
    const std::vector<SceneAnnotation> annotations = load_annotations(data_dir);
    if (annotations.empty()) throw std::runtime_error("train: dataset is empty");

    const int size = cfg.augment.target_train_size;
    AnchorSpec spec = AnchorSpec::preset(model.config().anchor_preset);
    const AnchorGrid grid = generate_anchors(size, size, spec);

    std::vector<std::optional<Image>> cache(annotations.size());
    auto image_of = [&](std::size_t i) -> const Image& {
        if (!cache[i]) cache[i] = load_scene_image(data_dir, annotations[i]);
        return *cache[i];
    };

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path);
        if (!log) throw std::runtime_error("train: cannot open log " + cfg.log_path);
        log << "step,lr,total,cls,reg,att\n";
        log.precision(9);
    }

    TrainResult result;
    const int steps_per_epoch = std::max(1, cfg.patches_per_epoch / cfg.batch_size);
    int global_step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr_at_epoch(epoch);
        double epoch_loss = 0.0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            std::vector<Sample> batch;
            batch.reserve(std::size_t(cfg.batch_size));
            for (int b = 0; b < cfg.batch_size; ++b) {
                std::mt19937_64 rng(sample_seed(cfg.seed, epoch, step, b));
                const std::size_t idx = std::size_t(rng() % annotations.size());
                Sample s{image_of(idx), annotations[idx].boxes, annotations[idx].occlusion};
                s = random_crop(s, cfg.augment, rng);
                batch.push_back(flip_and_jitter(s, cfg.augment, rng));
            }
            LossReport report;
            try {
                report = train_step(model, batch, grid, cfg, lr);
            } catch (const NumericalError& e) {
                double cls = 0, reg = 0, att = 0;
                for (const auto& l : e.report.per_level) {
                    cls += l.cls;
                    reg += l.reg;
                    att += l.att;
                }
                std::cerr << "non-finite loss at step " << global_step << ": total="
                          << e.report.total << " cls=" << cls << " reg=" << reg << " att=" << att
                          << "\n";
                throw;
            }
            epoch_loss += report.total;
            if (log) {
                double cls = 0, reg = 0, att = 0;
                for (const auto& l : report.per_level) {
                    cls += l.cls;
                    reg += l.reg;
                    att += l.att;
                }
                log << global_step << ',' << lr << ',' << report.total << ',' << cls << ','
                    << reg << ',' << att << '\n';
            }
            ++global_step;
        }
        result.epoch_mean_loss.push_back(epoch_loss / steps_per_epoch);
        if (!cfg.checkpoint_path.empty()) model.save(cfg.checkpoint_path);
        if (cfg.verbose)
            std::cerr << "epoch " << epoch << " lr " << lr << " mean loss "
                      << result.epoch_mean_loss.back() << "\n";
    }
    result.steps_run = global_step;
    return result;
}

}  // namespace fan
