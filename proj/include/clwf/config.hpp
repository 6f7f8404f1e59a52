#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "clwf/model.hpp"
#include "clwf/task_suite.hpp"
#include "clwf/trainer.hpp"

namespace clwf {

// One experiment: suite recipe + model + plan + strategy + seed. Backed by
// a key = value file; command-line flags override file values.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    Strategy strategy = Strategy::WfEwc;
    std::vector<int> groups{4, 2};
    GenConfig gen;
    ModelConfig model;
    TrainPlan plan;

    // Applies one "key = value" assignment; unknown keys are rejected.
    void set(const std::string& key, const std::string& value);
    void validate() const;

    TaskSuite make_suite() const;
};

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

} // namespace clwf
