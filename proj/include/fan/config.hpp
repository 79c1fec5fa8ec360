#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "fan/geometry.hpp"

namespace fan {

// Layered key=value configuration: file sections, overridden by command-line
// flags, overridden by FAN_* environment variables. Keys are "section.name";
// unknown keys are errors.
class RunConfig {
public:
    RunConfig();  // defaults for every known key

    void load_file(const std::string& path);
    void apply_env();  // FAN_TRAIN_LR=... -> train.lr
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    int get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    bool get_bool(const std::string& key) const;  // on/off/true/false/1/0
    std::vector<int> get_int_list(const std::string& key) const;        // comma-separated
    std::vector<double> get_double_list(const std::string& key) const;  // comma-separated

    // Every effective value, one "key = value" line per key.
    void echo(std::ostream& os) const;

private:
    std::map<std::string, std::string> values_;
};

// The anchors.* keys override the preset when non-empty.
AnchorSpec anchor_spec_from(const RunConfig& cfg);
// Writes the explicit [anchors] keys for `spec` into `cfg`.
void anchor_spec_to(const AnchorSpec& spec, RunConfig& cfg);

}  // namespace fan
