#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fan/assignment.hpp"
#include "fan/config.hpp"
#include "fan/data.hpp"
#include "fan/geometry.hpp"
#include "fan/gradcheck.hpp"
#include "fan/inference.hpp"
#include "fan/model.hpp"
#include "fan/trainer.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct GradCheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::pair<int, int> parse_size(const std::string& s) {
    const std::size_t x = s.find('x');
    if (x == std::string::npos)
        throw std::invalid_argument("size must be WxH, got '" + s + "'");
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
}

std::string detections_json(const std::vector<fan::Detection>& dets) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& d : dets)
        j.push_back({{"box", {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max}},
                     {"score", d.score}});
    return j.dump(2) + "\n";
}

// Layering order: file, then flags, then environment.
fan::RunConfig make_config(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
    fan::RunConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& o : overrides) {
        const std::size_t eq = o.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("--set expects key=value, got '" + o + "'");
        cfg.set(o.substr(0, eq), o.substr(eq + 1));
    }
    cfg.apply_env();
    return cfg;
}

int cmd_gen_data(const fan::RunConfig& cfg, const std::string& out, int count,
                 std::uint64_t seed) {
    fan::SceneParams params;
    params.width = cfg.get_int("data.width");
    params.height = cfg.get_int("data.height");
    params.min_faces = cfg.get_int("data.min_faces");
    params.max_faces = cfg.get_int("data.max_faces");
    params.min_side = cfg.get_double("data.min_side");
    params.max_side = cfg.get_double("data.max_side");
    params.occluded_fraction_target = cfg.get_double("data.occluded_frac");
    params.distractor_rate = cfg.get_double("data.distractor_rate");
    fan::write_dataset(out, count, seed, params);
    std::cout << "wrote " << count << " scenes to " << out << "\n";
    return 0;
}

fan::TrainConfig train_config_from(const fan::RunConfig& cfg) {
    fan::TrainConfig t;
    t.lr = cfg.get_double("train.lr");
    t.momentum = cfg.get_double("train.momentum");
    t.weight_decay = cfg.get_double("train.weight_decay");
    t.grad_clip_norm = cfg.get_double("train.grad_clip_norm");
    t.epochs = cfg.get_int("train.epochs");
    t.lr_drop_epochs = cfg.get_int_list("train.lr_drop_epochs");
    t.lr_drop_factor = cfg.get_double("train.lr_drop_factor");
    t.batch_size = cfg.get_int("train.batch_size");
    t.patches_per_epoch = cfg.get_int("train.patches_per_epoch");
    t.seed = cfg.get_u64("train.seed");
    t.attention_enabled = cfg.get_bool("train.attention");
    t.threads = cfg.get_int("train.threads");
    t.pos_thresh = cfg.get_double("train.pos_thresh");
    t.bg_thresh = cfg.get_double("train.bg_thresh");
    t.loss.focal_alpha = cfg.get_double("loss.focal_alpha");
    t.loss.focal_gamma = cfg.get_double("loss.focal_gamma");
    t.loss.smooth_l1_beta = cfg.get_double("loss.smooth_l1_beta");
    t.loss.lambda1 = cfg.get_double("loss.lambda1");
    t.loss.lambda2 = cfg.get_double("loss.lambda2");
    t.augment.crop_min = cfg.get_double("augment.crop_min");
    t.augment.crop_max = cfg.get_double("augment.crop_max");
    t.augment.flip_prob = cfg.get_double("augment.flip_prob");
    t.augment.brightness = cfg.get_double("augment.brightness");
    t.augment.contrast = cfg.get_double("augment.contrast");
    t.augment.target_train_size = cfg.get_int("augment.train_size");
    return t;
}

fan::ModelConfig model_config_from(const fan::RunConfig& cfg) {
    fan::ModelConfig m;
    m.backbone_channels = cfg.get_int("model.backbone_channels");
    m.subnet_channels = cfg.get_int("model.subnet_channels");
    m.subnet_depth = cfg.get_int("model.subnet_depth");
    m.attention_depth = cfg.get_int("model.attention_depth");
    m.prior_pi = cfg.get_double("model.prior_pi");
    m.init_sigma = cfg.get_double("model.init_sigma");
    m.anchor_preset = cfg.get("anchors.preset");
    const std::string g = cfg.get("model.gate_mode");
    if (g == "sigmoid_exp")
        m.gate_mode = fan::GateMode::sigmoid_exp;
    else if (g == "raw_exp")
        m.gate_mode = fan::GateMode::raw_exp;
    else if (g == "bypass")
        m.gate_mode = fan::GateMode::bypass;
    else
        throw std::invalid_argument("model.gate_mode must be sigmoid_exp/raw_exp/bypass");
    m.anchors_per_location = fan::AnchorSpec::preset(m.anchor_preset).anchors_per_location();
    return m;
}

fan::DecodeConfig decode_config_from(const fan::RunConfig& cfg) {
    fan::DecodeConfig d;
    d.score_thresh = cfg.get_double("eval.score_thresh");
    d.pre_nms_topk = cfg.get_int("eval.pre_nms_topk");
    d.nms_iou = cfg.get_double("eval.nms_iou");
    d.max_det = cfg.get_int("eval.max_det");
    return d;
}

int cmd_train(const fan::RunConfig& cfg, const std::string& data, const std::string& out,
              const std::string& log_path, const std::string& resume, bool verbose) {
    fan::TrainConfig t = train_config_from(cfg);
    t.checkpoint_path = out;
    t.log_path = log_path;
    t.verbose = verbose;
    fan::FanModel model = resume.empty()
                              ? fan::FanModel::build(model_config_from(cfg), t.seed)
                              : fan::FanModel::load(resume);
    const fan::TrainResult r = fan::train(model, data, t);
    std::cout << "trained " << r.steps_run << " steps; final epoch mean loss "
              << r.epoch_mean_loss.back() << "\n";
    return 0;
}

int cmd_detect(const fan::RunConfig& cfg, const std::string& ckpt, const std::string& image_path,
               const std::vector<int>& scales, const std::string& out) {
    const fan::FanModel model = fan::FanModel::load(ckpt);
    const fan::Image img = fan::read_png(image_path);
    const fan::DecodeConfig dc = decode_config_from(cfg);
    const std::vector<fan::Detection> dets =
        scales.empty() ? fan::detect(model, img, dc)
                       : fan::multi_scale_detect(model, img, scales, dc.nms_iou, dc);
    const std::string json = detections_json(dets);
    if (out.empty())
        std::cout << json;
    else
        write_text(out, json);
    return 0;
}

int cmd_eval(const fan::RunConfig& cfg, const std::string& ckpt, const std::string& data,
             const std::vector<int>& scales, const std::string& out,
             const std::string& curve_out) {
    const fan::FanModel model = fan::FanModel::load(ckpt);
    const std::vector<fan::SceneAnnotation> anns = fan::load_annotations(data);
    const fan::DecodeConfig dc = decode_config_from(cfg);
    std::vector<std::vector<fan::Detection>> dets;
    dets.reserve(anns.size());
    for (const auto& a : anns) {
        const fan::Image img = fan::load_scene_image(data, a);
        dets.push_back(scales.empty()
                           ? fan::detect(model, img, dc)
                           : fan::multi_scale_detect(model, img, scales, dc.nms_iou, dc));
    }
    const fan::EvalReport report = fan::evaluate(dets, anns, cfg.get_double("eval.match_iou"),
                                                 cfg.get_double("eval.occluded_thresh"));
    const std::string csv = fan::eval_report_csv(report);
    if (out.empty())
        std::cout << csv;
    else
        write_text(out, csv);
    if (!curve_out.empty()) write_text(curve_out, fan::pr_curve_csv(report.subset("all")));
    return 0;
}

int cmd_coverage(const fan::RunConfig& cfg, const std::vector<double>& sides, int placements,
                 std::uint64_t seed, int image_size, const std::string& out) {
    const fan::AnchorSpec spec = fan::anchor_spec_from(cfg);
    const auto rows = fan::coverage_report(spec, sides, placements, seed, image_size);
    const std::string csv = fan::coverage_csv(rows);
    if (out.empty())
        std::cout << csv;
    else
        write_text(out, csv);
    return 0;
}

void require_pass(const fan::GradCheckResult& r, const std::string& name) {
    std::cout << name << ": " << (r.ok ? "ok" : "FAIL") << " (" << r.checked << " elements)\n";
    if (!r.ok) throw GradCheckFailure("gradient check failed: " + name + " at " + r.worst);
}

int cmd_gradcheck(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto randn = [&](std::vector<int> shape) {
        std::size_t n = 1;
        for (int d : shape) n *= std::size_t(d);
        std::vector<fan::real> v(n);
        std::normal_distribution<double> nd(0.0, 1.0);
        for (auto& x : v) x = nd(rng);
        return fan::Tensor::from_data(std::move(shape), std::move(v), true);
    };

    {
        fan::Tensor x = randn({2, 6, 6}), w = randn({3, 2, 3, 3}), b = randn({3});
        require_pass(fan::grad_check(
                         [&] {
                             return fan::reduce_sum(
                                 fan::sigmoid(fan::conv2d(x, w, b, 2, 1)));
                         },
                         {x, w, b}),
                     "conv2d+sigmoid");
    }
    {
        fan::Tensor f = randn({3, 4, 4}), l = randn({1, 4, 4});
        require_pass(fan::grad_check(
                         [&] {
                             return fan::reduce_mean(
                                 fan::exp_gate(f, l, fan::GateMode::sigmoid_exp));
                         },
                         {f, l}),
                     "exp_gate");
    }
    {
        fan::Tensor x = randn({4, 4, 4});
        require_pass(fan::grad_check(
                         [&] {
                             return fan::reduce_sum(
                                 fan::mul(fan::upsample_nearest2(fan::avgpool2(x)), x));
                         },
                         {x}),
                     "pool+upsample+mul");
    }
    {
        fan::ModelConfig mc;
        mc.backbone_channels = 4;
        mc.subnet_channels = 4;
        mc.subnet_depth = 1;
        fan::FanModel model = fan::FanModel::build(mc, seed);
        const fan::AnchorGrid grid =
            fan::generate_anchors(128, 128, fan::AnchorSpec::preset("fan"));
        const std::vector<fan::Box> gt = {{30, 30, 80, 90}};
        const fan::AnchorAssignment a = fan::assign(grid, gt);
        const fan::AttentionTarget att = fan::build_attention_targets(gt, a, grid);
        fan::Tensor img = randn({3, 128, 128});
        std::vector<fan::Tensor> params;
        for (auto& p : model.params()) params.push_back(p.value);
        auto f = [&] {
            const fan::PyramidOutput out = model.forward(img);
            return fan::total_loss(out.levels, grid, a, att, {}).first;
        };
        require_pass(fan::grad_check(f, params, 1e-3, 1e-6, 8), "model end-to-end");
    }
    return 0;
}

int cmd_bench(const std::string& ckpt, const std::vector<int>& sizes, int repeat,
              const std::string& out) {
    const fan::FanModel model = fan::FanModel::load(ckpt);
    std::ostringstream csv;
    csv << "size,median_ms\n";
    for (int s : sizes) {
        fan::Image img(s, s);
        std::mt19937_64 rng(42);
        for (auto& p : img.pixels) p = std::uint8_t(rng() & 0xff);
        std::vector<double> ms;
        for (int r = 0; r < repeat; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            (void)fan::detect(model, img);
            const auto t1 = std::chrono::steady_clock::now();
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        std::sort(ms.begin(), ms.end());
        csv << s << ',' << ms[ms.size() / 2] << '\n';
    }
    if (out.empty())
        std::cout << csv.str();
    else
        write_text(out, csv.str());
    return 0;
}

int cmd_export_attention(const std::string& ckpt, const std::string& image_path,
                         const std::string& out_prefix) {
    const fan::FanModel model = fan::FanModel::load(ckpt);
    fan::Image img = fan::read_png(image_path);
    img = fan::pad_to_multiple(img, 1 << model.config().pyramid_levels.back());
    fan::NoGradGuard ng;
    const fan::PyramidOutput out = model.forward(fan::image_to_tensor(img));
    for (std::size_t li = 0; li < out.levels.size(); ++li) {
        const fan::Tensor& att = out.levels[li].att_logits;
        const int h = att.shape()[1], w = att.shape()[2];
        std::vector<std::uint8_t> gray(std::size_t(h) * w);
        for (std::size_t i = 0; i < gray.size(); ++i) {
            const double p = 1.0 / (1.0 + std::exp(-att.values()[i]));
            gray[i] = std::uint8_t(std::lround(p * 255.0));
        }
        const int k = model.config().pyramid_levels[li];
        fan::write_pgm(out_prefix + "_p" + std::to_string(k) + ".pgm", gray, w, h);
    }
    std::cout << "wrote " << out.levels.size() << " attention maps with prefix " << out_prefix
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"face detector with occlusion-aware attention"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "key=value config file with [sections]");
    app.add_option("--set", overrides, "override a config key, e.g. --set train.lr=1e-3");
    std::int64_t global_seed = -1;
    int global_threads = 0;
    app.add_option("--seed", global_seed, "seed for whichever subcommand runs");
    app.add_option("--threads", global_threads,
                   "worker threads (0 = one; determinism guaranteed at 1)");

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    std::string gen_out, gen_size;
    int gen_count = 100;
    std::uint64_t gen_seed = 1;
    double gen_occ = -1.0, gen_distractors = -1.0;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--count", gen_count, "number of scenes");
    gen->add_option("--size", gen_size, "scene size WxH");
    gen->add_option("--seed", gen_seed, "base RNG seed");
    gen->add_option("--occluded-frac", gen_occ, "probability a face gets an occluder");
    gen->add_option("--distractor-rate", gen_distractors, "expected distractors per scene");

    auto* tr = app.add_subcommand("train", "train a detector");
    std::string tr_data, tr_out = "model.ckpt", tr_log, tr_resume;
    bool tr_verbose = false;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "checkpoint path");
    tr->add_option("--log", tr_log, "per-step CSV log path");
    tr->add_option("--resume", tr_resume, "checkpoint to continue from");
    tr->add_flag("--verbose", tr_verbose, "per-epoch progress on stderr");
    std::string tr_attention, tr_epochs, tr_lr, tr_batch, tr_lambda2;
    tr->add_option("--epochs", tr_epochs, "training epochs");
    tr->add_option("--lr", tr_lr, "initial learning rate");
    tr->add_option("--batch", tr_batch, "batch size");
    tr->add_option("--attention", tr_attention, "attention supervision: on or off");
    tr->add_option("--lambda2", tr_lambda2, "attention loss weight");

    auto* det = app.add_subcommand("detect", "run detection on one image");
    std::string det_ckpt, det_image, det_out;
    std::vector<int> det_scales;
    det->add_option("--ckpt", det_ckpt, "checkpoint path")->required();
    det->add_option("--image", det_image, "input PNG")->required();
    det->add_option("--scales", det_scales, "shortest-side test scales (multi-scale)");
    det->add_option("--out", det_out, "detections JSON path (default stdout)");

    auto* ev = app.add_subcommand("eval", "evaluate on a dataset");
    std::string ev_ckpt, ev_data, ev_out, ev_curve;
    std::vector<int> ev_scales;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--scales", ev_scales, "shortest-side test scales (multi-scale)");
    ev->add_option("--out", ev_out, "report CSV path (default stdout)");
    ev->add_option("--curve", ev_curve, "PR curve CSV path for the 'all' subset");

    auto* cov = app.add_subcommand("coverage", "anchor coverage statistics");
    std::vector<double> cov_sides;
    int cov_placements = 1000, cov_image_size = 512;
    std::uint64_t cov_seed = 1;
    std::string cov_out;
    std::string cov_spec;
    cov->add_option("--spec", cov_spec, "anchor preset name");
    cov->add_option("--sides", cov_sides, "square box sides to sweep")->required();
    cov->add_option("--placements", cov_placements, "random placements per side");
    cov->add_option("--seed", cov_seed, "RNG seed");
    cov->add_option("--image-size", cov_image_size, "canvas side in pixels");
    cov->add_option("--out", cov_out, "CSV path (default stdout)");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::uint64_t gc_seed = 7;
    gc->add_option("--seed", gc_seed, "RNG seed");

    auto* be = app.add_subcommand("bench", "single-image latency benchmark");
    std::string be_ckpt, be_out;
    std::vector<int> be_sizes = {256};
    int be_repeat = 5;
    be->add_option("--ckpt", be_ckpt, "checkpoint path")->required();
    be->add_option("--sizes", be_sizes, "square image sizes");
    be->add_option("--repeat", be_repeat, "runs per size (median reported)");
    be->add_option("--out", be_out, "CSV path (default stdout)");

    auto* ea = app.add_subcommand("export-attention", "dump per-level attention maps as PGM");
    std::string ea_ckpt, ea_image, ea_prefix = "attention";
    ea->add_option("--ckpt", ea_ckpt, "checkpoint path")->required();
    ea->add_option("--image", ea_image, "input PNG")->required();
    ea->add_option("--out-prefix", ea_prefix, "output file prefix");

    CLI11_PARSE(app, argc, argv);

    try {
        // Shorthand flags become ordinary overrides so layering stays uniform.
        if (!gen_size.empty()) {
            auto [w, h] = parse_size(gen_size);
            overrides.push_back("data.width=" + std::to_string(w));
            overrides.push_back("data.height=" + std::to_string(h));
        }
        if (gen_occ >= 0.0) overrides.push_back("data.occluded_frac=" + std::to_string(gen_occ));
        if (gen_distractors >= 0.0)
            overrides.push_back("data.distractor_rate=" + std::to_string(gen_distractors));
        if (!tr_epochs.empty()) overrides.push_back("train.epochs=" + tr_epochs);
        if (!tr_lr.empty()) overrides.push_back("train.lr=" + tr_lr);
        if (!tr_batch.empty()) overrides.push_back("train.batch_size=" + tr_batch);
        if (!tr_attention.empty()) overrides.push_back("train.attention=" + tr_attention);
        if (!tr_lambda2.empty()) overrides.push_back("loss.lambda2=" + tr_lambda2);
        if (!cov_spec.empty()) overrides.push_back("anchors.preset=" + cov_spec);
        if (global_seed >= 0) {
            overrides.push_back("train.seed=" + std::to_string(global_seed));
            gen_seed = std::uint64_t(global_seed);
            cov_seed = std::uint64_t(global_seed);
            gc_seed = std::uint64_t(global_seed);
        }
        if (global_threads > 0)
            overrides.push_back("train.threads=" + std::to_string(global_threads));

        fan::RunConfig cfg = make_config(config_path, overrides);
        std::cerr << "effective configuration:\n";
        cfg.echo(std::cerr);
        if (*gen) return cmd_gen_data(cfg, gen_out, gen_count, gen_seed);
        if (*tr) return cmd_train(cfg, tr_data, tr_out, tr_log, tr_resume, tr_verbose);
        if (*det) return cmd_detect(cfg, det_ckpt, det_image, det_scales, det_out);
        if (*ev) return cmd_eval(cfg, ev_ckpt, ev_data, ev_scales, ev_out, ev_curve);
        if (*cov)
            return cmd_coverage(cfg, cov_sides, cov_placements, cov_seed, cov_image_size,
                                cov_out);
        if (*gc) return cmd_gradcheck(gc_seed);
        if (*be) return cmd_bench(be_ckpt, be_sizes, be_repeat, be_out);
        if (*ea) return cmd_export_attention(ea_ckpt, ea_image, ea_prefix);
    } catch (const fan::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const GradCheckFailure& e) {
        std::cerr << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return 0;
}
