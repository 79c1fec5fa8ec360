#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fan/attention.hpp"
#include "fan/losses.hpp"
#include "fan/tensor.hpp"

namespace fan {

struct ModelConfig {
    std::vector<int> pyramid_levels = {3, 4, 5, 6, 7};
    int backbone_channels = 32;
    int subnet_channels = 32;
    int subnet_depth = 4;
    int attention_depth = 1;
    int num_classes = 1;  // sigmoid outputs; only K=1 is supported
    int anchors_per_location = 6;
    double prior_pi = 0.01;
    double init_sigma = 0.01;  // subnet and attention conv weights
    GateMode gate_mode = GateMode::sigmoid_exp;
    std::string anchor_preset = "fan";

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& j);
};

struct PyramidOutput {
    std::vector<LevelPrediction> levels;  // cls [A,H,W], reg [4A,H,W], att [1,H,W]
};

struct Param {
    std::string name;
    Tensor value;
    std::vector<real> velocity;  // SGD momentum state
};

// Micro FPN detector: strided-conv backbone, top-down pyramid P3..P7,
// per-level attention branch with exponential gating, and classification /
// regression subnets shared across levels.
class FanModel {
public:
    static FanModel build(const ModelConfig& cfg, std::uint64_t rng_seed);

    PyramidOutput forward(const Tensor& image) const;  // image [3,H,W]

    const ModelConfig& config() const { return cfg_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    Param& param(const std::string& name);

    void zero_grads();

    // Deep copy of parameters (fresh gradient buffers, no optimizer state);
    // used for per-worker graphs during parallel training.
    FanModel clone() const;

    void save(const std::string& path) const;
    static FanModel load(const std::string& path);

private:
    ModelConfig cfg_;
    std::vector<Param> params_;

    const Tensor& p(const std::string& name) const;
};

}  // namespace fan
