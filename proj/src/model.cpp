#include "fan/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

namespace fan {

namespace {

// Box-Muller over the raw 64-bit stream; keeps initialization independent of
// the standard library's distribution internals.
class Gaussian {
public:
    explicit Gaussian(std::uint64_t seed) : rng_(seed) {}
    double operator()() {
        if (have_) {
            have_ = false;
            return cached_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = double(rng_() >> 11) * 0x1.0p-53;
        const double u2 = double(rng_() >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        cached_ = r * std::sin(2.0 * M_PI * u2);
        have_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

private:
    std::mt19937_64 rng_;
    bool have_ = false;
    double cached_ = 0.0;
};

Tensor gaussian_tensor(std::vector<int> shape, double sigma, Gaussian& g) {
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    std::vector<real> v(n);
    for (auto& x : v) x = sigma * g();
    return Tensor::from_data(std::move(shape), std::move(v), true);
}

double he_sigma(int fan_in) { return std::sqrt(2.0 / double(fan_in)); }

}  // namespace

void ModelConfig::validate() const {
    if (num_classes != 1) throw std::invalid_argument("ModelConfig: only K=1 is supported");
    if (backbone_channels <= 0 || subnet_channels <= 0)
        throw std::invalid_argument("ModelConfig: channel counts must be positive");
    if (subnet_depth < 1 || attention_depth < 1)
        throw std::invalid_argument("ModelConfig: depths must be >= 1");
    if (anchors_per_location < 1)
        throw std::invalid_argument("ModelConfig: anchors_per_location must be >= 1");
    if (!(prior_pi > 0.0 && prior_pi < 1.0))
        throw std::invalid_argument("ModelConfig: prior_pi must be in (0,1)");
    if (pyramid_levels != std::vector<int>{3, 4, 5, 6, 7})
        throw std::invalid_argument("ModelConfig: pyramid levels are fixed to 3..7");
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["pyramid_levels"] = pyramid_levels;
    j["backbone_channels"] = backbone_channels;
    j["subnet_channels"] = subnet_channels;
    j["subnet_depth"] = subnet_depth;
    j["attention_depth"] = attention_depth;
    j["num_classes"] = num_classes;
    j["anchors_per_location"] = anchors_per_location;
    j["prior_pi"] = prior_pi;
    j["init_sigma"] = init_sigma;
    j["gate_mode"] = gate_mode == GateMode::sigmoid_exp ? "sigmoid_exp"
                     : gate_mode == GateMode::raw_exp   ? "raw_exp"
                                                        : "bypass";
    j["anchor_preset"] = anchor_preset;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& s) {
    const auto j = nlohmann::json::parse(s);
    ModelConfig c;
    c.pyramid_levels = j.at("pyramid_levels").get<std::vector<int>>();
    c.backbone_channels = j.at("backbone_channels").get<int>();
    c.subnet_channels = j.at("subnet_channels").get<int>();
    c.subnet_depth = j.at("subnet_depth").get<int>();
    c.attention_depth = j.at("attention_depth").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.anchors_per_location = j.at("anchors_per_location").get<int>();
    c.prior_pi = j.at("prior_pi").get<double>();
    c.init_sigma = j.at("init_sigma").get<double>();
    const std::string g = j.at("gate_mode").get<std::string>();
    c.gate_mode = g == "sigmoid_exp" ? GateMode::sigmoid_exp
                  : g == "raw_exp"   ? GateMode::raw_exp
                                     : GateMode::bypass;
    c.anchor_preset = j.value("anchor_preset", "fan");
    return c;
}

FanModel FanModel::build(const ModelConfig& cfg, std::uint64_t rng_seed) {
    cfg.validate();
    FanModel m;
    m.cfg_ = cfg;
    Gaussian g(rng_seed);
    const int B = cfg.backbone_channels;
    const int S = cfg.subnet_channels;
    const int A = cfg.anchors_per_location;

    auto add_conv = [&](const std::string& name, int cout, int cin, int k, double sigma,
                        double bias_init = 0.0) {
        m.params_.push_back({name + ".w", gaussian_tensor({cout, cin, k, k}, sigma, g), {}});
        Tensor b = Tensor::zeros({cout}, true);
        for (auto& v : b.values()) v = bias_init;
        m.params_.push_back({name + ".b", b, {}});
    };

    // Backbone: 5 stride-2 stages of 3x3 convs; stages 3..5 feed the pyramid.
    add_conv("backbone.stage1", B, 3, 3, he_sigma(3 * 9));
    for (int s = 2; s <= 5; ++s)
        add_conv("backbone.stage" + std::to_string(s), B, B, 3, he_sigma(B * 9));
    // Top-down pathway.
    for (int l = 3; l <= 5; ++l) {
        add_conv("fpn.lateral" + std::to_string(l), B, B, 1, he_sigma(B));
        add_conv("fpn.smooth" + std::to_string(l), B, B, 3, he_sigma(B * 9));
    }
    add_conv("fpn.p6", B, B, 3, he_sigma(B * 9));
    add_conv("fpn.p7", B, B, 3, he_sigma(B * 9));
    // Attention side branch (shared across levels).
    for (int d = 0; d + 1 < cfg.attention_depth; ++d)
        add_conv("attention.conv" + std::to_string(d), B, B, 3, cfg.init_sigma);
    add_conv("attention.head", 1, B, 3, cfg.init_sigma);
    // Detection subnets (shared across levels).
    for (int d = 0; d < cfg.subnet_depth; ++d) {
        add_conv("cls.conv" + std::to_string(d), S, d == 0 ? B : S, 3, cfg.init_sigma);
        add_conv("reg.conv" + std::to_string(d), S, d == 0 ? B : S, 3, cfg.init_sigma);
    }
    add_conv("cls.head", A * cfg.num_classes, S, 3, cfg.init_sigma,
             -std::log((1.0 - cfg.prior_pi) / cfg.prior_pi));
    add_conv("reg.head", 4 * A, S, 3, cfg.init_sigma);
    return m;
}

Param& FanModel::param(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return p;
    throw std::out_of_range("FanModel: no parameter named " + name);
}

const Tensor& FanModel::p(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p.value;
    throw std::out_of_range("FanModel: no parameter named " + name);
}

FanModel FanModel::clone() const {
    FanModel m;
    m.cfg_ = cfg_;
    for (const auto& pr : params_) {
        Tensor t = Tensor::from_data(pr.value.shape(), pr.value.values(), true);
        t.zero_grad();
        m.params_.push_back({pr.name, std::move(t), {}});
    }
    return m;
}

void FanModel::zero_grads() {
    for (auto& p : params_) p.value.zero_grad();
}

PyramidOutput FanModel::forward(const Tensor& image) const {
    if (image.shape().size() != 3 || image.shape()[0] != 3)
        throw std::invalid_argument("forward: expects image [3,H,W]");
    const int max_stride = 1 << cfg_.pyramid_levels.back();
    if (image.shape()[1] % max_stride || image.shape()[2] % max_stride)
        throw std::invalid_argument("forward: image dims must be multiples of " +
                                    std::to_string(max_stride));

    auto conv = [&](const Tensor& x, const std::string& name, int stride, int pad) {
        return conv2d(x, p(name + ".w"), p(name + ".b"), stride, pad);
    };

    // Backbone.
    Tensor c1 = relu(conv(image, "backbone.stage1", 2, 1));
    Tensor c2 = relu(conv(c1, "backbone.stage2", 2, 1));
    Tensor c3 = relu(conv(c2, "backbone.stage3", 2, 1));
    Tensor c4 = relu(conv(c3, "backbone.stage4", 2, 1));
    Tensor c5 = relu(conv(c4, "backbone.stage5", 2, 1));

    // Top-down pyramid.
    Tensor p5 = conv(c5, "fpn.lateral5", 1, 0);
    Tensor p4 = add(conv(c4, "fpn.lateral4", 1, 0), upsample_nearest2(p5));
    Tensor p3 = add(conv(c3, "fpn.lateral3", 1, 0), upsample_nearest2(p4));
    p3 = conv(p3, "fpn.smooth3", 1, 1);
    p4 = conv(p4, "fpn.smooth4", 1, 1);
    p5 = conv(p5, "fpn.smooth5", 1, 1);
    Tensor p6 = conv(p5, "fpn.p6", 2, 1);
    Tensor p7 = conv(relu(p6), "fpn.p7", 2, 1);

    PyramidOutput out;
    for (const Tensor& feat : {p3, p4, p5, p6, p7}) {
        Tensor att = feat;
        for (int d = 0; d + 1 < cfg_.attention_depth; ++d)
            att = relu(conv(att, "attention.conv" + std::to_string(d), 1, 1));
        att = conv(att, "attention.head", 1, 1);

        Tensor gated = exp_gate(feat, att, cfg_.gate_mode);

        Tensor c = gated, r = gated;
        for (int d = 0; d < cfg_.subnet_depth; ++d) {
            c = relu(conv(c, "cls.conv" + std::to_string(d), 1, 1));
            r = relu(conv(r, "reg.conv" + std::to_string(d), 1, 1));
        }
        LevelPrediction lp;
        lp.cls_logits = conv(c, "cls.head", 1, 1);
        lp.reg_deltas = conv(r, "reg.head", 1, 1);
        lp.att_logits = att;
        out.levels.push_back(std::move(lp));
    }
    return out;
}

void FanModel::save(const std::string& path) const {
    std::vector<CheckpointEntry> entries;
    for (const auto& pr : params_) entries.push_back({pr.name, pr.value.shape(), pr.value.values()});
    save_checkpoint(path, entries, cfg_.to_json());
}

FanModel FanModel::load(const std::string& path) {
    auto [entries, extra] = load_checkpoint(path);
    FanModel m = build(ModelConfig::from_json(extra), 0);
    std::unordered_map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    for (auto& pr : m.params_) {
        auto it = by_name.find(pr.name);
        if (it == by_name.end())
            throw std::runtime_error("checkpoint missing parameter " + pr.name);
        if (it->second->shape != pr.value.shape())
            throw std::runtime_error("checkpoint shape mismatch for " + pr.name);
        pr.value.values() = it->second->data;
    }
    return m;
}

}  // namespace fan
