#include "fan/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

extern char** environ;

namespace fan {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace

RunConfig::RunConfig() {
    values_ = {
        {"anchors.preset", "fan"},
        {"anchors.levels", ""},
        {"anchors.base_sides", ""},
        {"anchors.scale_multipliers", ""},
        {"anchors.aspect_ratios", ""},
        {"model.backbone_channels", "32"},
        {"model.subnet_channels", "32"},
        {"model.subnet_depth", "4"},
        {"model.attention_depth", "1"},
        {"model.prior_pi", "0.01"},
        {"model.init_sigma", "0.01"},
        {"model.gate_mode", "sigmoid_exp"},
        {"loss.focal_alpha", "0.25"},
        {"loss.focal_gamma", "2.0"},
        {"loss.smooth_l1_beta", "1.0"},
        {"loss.lambda1", "1.0"},
        {"loss.lambda2", "1.0"},
        {"train.lr", "3e-3"},
        {"train.momentum", "0.9"},
        {"train.weight_decay", "1e-5"},
        {"train.grad_clip_norm", "0"},
        {"train.epochs", "30"},
        {"train.lr_drop_epochs", "20,26"},
        {"train.lr_drop_factor", "0.1"},
        {"train.batch_size", "8"},
        {"train.patches_per_epoch", "1000"},
        {"train.seed", "1"},
        {"train.attention", "on"},
        {"train.threads", "1"},
        {"train.pos_thresh", "0.5"},
        {"train.bg_thresh", "0.4"},
        {"augment.crop_min", "0.3"},
        {"augment.crop_max", "1.0"},
        {"augment.flip_prob", "0.5"},
        {"augment.brightness", "0.1"},
        {"augment.contrast", "0.1"},
        {"augment.train_size", "256"},
        {"data.width", "256"},
        {"data.height", "256"},
        {"data.min_faces", "1"},
        {"data.max_faces", "4"},
        {"data.min_side", "16"},
        {"data.max_side", "192"},
        {"data.occluded_frac", "0.3"},
        {"data.distractor_rate", "2.0"},
        {"eval.score_thresh", "0.05"},
        {"eval.pre_nms_topk", "1000"},
        {"eval.nms_iou", "0.5"},
        {"eval.max_det", "100"},
        {"eval.match_iou", "0.5"},
        {"eval.occluded_thresh", "0.3"},
    };
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::string line, section;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[' && t.back() == ']') {
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: bad line " + std::to_string(lineno) + " in " +
                                        path);
        const std::string key =
            (section.empty() ? "" : section + ".") + trim(t.substr(0, eq));
        set(key, trim(t.substr(eq + 1)));
    }
}

void RunConfig::apply_env() {
    for (char** e = environ; *e; ++e) {
        const std::string entry(*e);
        if (entry.rfind("FAN_", 0) != 0) continue;
        const std::size_t eq = entry.find('=');
        if (eq == std::string::npos) continue;
        std::string key = entry.substr(4, eq - 4);
        std::transform(key.begin(), key.end(), key.begin(),
                       [](unsigned char c) { return char(std::tolower(c)); });
        const std::size_t us = key.find('_');
        if (us == std::string::npos)
            throw std::invalid_argument("config: malformed env var " + entry.substr(0, eq));
        key[us] = '.';
        set(key, entry.substr(eq + 1));
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
    it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
    return it->second;
}

double RunConfig::get_double(const std::string& key) const {
    std::size_t pos = 0;
    const std::string& s = get(key);
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("config: " + key + " is not a number");
    return v;
}

int RunConfig::get_int(const std::string& key) const {
    std::size_t pos = 0;
    const std::string& s = get(key);
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("config: " + key + " is not an integer");
    return v;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
    std::size_t pos = 0;
    const std::string& s = get(key);
    const std::uint64_t v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("config: " + key + " is not an integer");
    return v;
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& s = get(key);
    if (s == "on" || s == "true" || s == "1") return true;
    if (s == "off" || s == "false" || s == "0") return false;
    throw std::invalid_argument("config: " + key + " must be on/off");
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
    std::vector<int> out;
    std::istringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ','))
        if (!trim(item).empty()) out.push_back(std::stoi(trim(item)));
    return out;
}

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
    std::vector<double> out;
    std::istringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ','))
        if (!trim(item).empty()) out.push_back(std::stod(trim(item)));
    return out;
}

AnchorSpec anchor_spec_from(const RunConfig& cfg) {
    AnchorSpec spec = AnchorSpec::preset(cfg.get("anchors.preset"));
    if (!cfg.get("anchors.levels").empty()) spec.levels = cfg.get_int_list("anchors.levels");
    if (!cfg.get("anchors.base_sides").empty())
        spec.base_sides = cfg.get_double_list("anchors.base_sides");
    if (!cfg.get("anchors.scale_multipliers").empty())
        spec.scale_multipliers = cfg.get_double_list("anchors.scale_multipliers");
    if (!cfg.get("anchors.aspect_ratios").empty())
        spec.aspect_ratios = cfg.get_double_list("anchors.aspect_ratios");
    spec.validate();
    return spec;
}

void anchor_spec_to(const AnchorSpec& spec, RunConfig& cfg) {
    auto join = [](const auto& v) {
        std::ostringstream ss;
        ss.precision(17);
        for (std::size_t i = 0; i < v.size(); ++i) ss << (i ? "," : "") << v[i];
        return ss.str();
    };
    cfg.set("anchors.levels", join(spec.levels));
    cfg.set("anchors.base_sides", join(spec.base_sides));
    cfg.set("anchors.scale_multipliers", join(spec.scale_multipliers));
    cfg.set("anchors.aspect_ratios", join(spec.aspect_ratios));
}

void RunConfig::echo(std::ostream& os) const {
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
}

}  // namespace fan
