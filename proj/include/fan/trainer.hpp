#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fan/data.hpp"
#include "fan/losses.hpp"
#include "fan/model.hpp"

namespace fan {

// Raised when a training step produces a non-finite loss; carries the
// offending step's loss breakdown.
struct NumericalError : std::runtime_error {
    LossReport report;
    NumericalError(const std::string& msg, LossReport r)
        : std::runtime_error(msg), report(std::move(r)) {}
};

struct TrainConfig {
    double lr = 3e-3;
    double momentum = 0.9;
    double weight_decay = 1e-5;
    double grad_clip_norm = 0.0;  // > 0: rescale gradients to this global L2 norm
    int epochs = 30;
    std::vector<int> lr_drop_epochs = {20, 26};  // 0-based; factor applies from that epoch on
    double lr_drop_factor = 0.1;
    int batch_size = 8;
    int patches_per_epoch = 1000;
    std::uint64_t seed = 1;
    bool attention_enabled = true;  // off: lambda2 forced to 0
    int threads = 1;                // per-batch-element fan-out; 1 is bit-reproducible
    LossConfig loss;
    AugmentConfig augment;
    double pos_thresh = 0.5, bg_thresh = 0.4;
    std::string checkpoint_path;  // written every epoch when non-empty
    std::string log_path;         // per-step CSV: step,lr,total,cls,reg,att
    bool verbose = false;

    void validate() const;
    double lr_at_epoch(int epoch) const;
};

struct TrainResult {
    std::vector<double> epoch_mean_loss;
    int steps_run = 0;
};

// SGD training over a generated dataset directory. Deterministic given
// (seed, config) at threads == 1; with more threads, per-element gradients
// are still reduced in batch order.
TrainResult train(FanModel& model, const std::string& data_dir, const TrainConfig& cfg);

// One optimizer step over explicit samples; exposed for tests and reused by
// train(). Returns the batch-mean loss report.
LossReport train_step(FanModel& model, const std::vector<Sample>& batch, const AnchorGrid& grid,
                      const TrainConfig& cfg, double lr);

}  // namespace fan
