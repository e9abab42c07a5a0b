#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "tabgrade/losses.hpp"
#include "tabgrade/model.hpp"
#include "tabgrade/sampler.hpp"
#include "tabgrade/trainer.hpp"

namespace tabgrade {

// Carries the offending key ("section.key") when there is one.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& message)
        : std::runtime_error(key.empty() ? message : key + ": " + message), key_(std::move(key)) {}

    const std::string& key() const { return key_; }

private:
    std::string key_;
};

// Settings of a training run. Relative paths are resolved against the
// directory of the config file.
struct RunConfig {
    TrainConfig train;
    ModelConfig model;
    LossWeights weights;
    LossOptions loss;
    GenerationConfig sample;

    std::filesystem::path input;
    std::optional<std::filesystem::path> schema;
    std::optional<std::filesystem::path> fds;
    std::filesystem::path checkpoint;
    std::optional<std::filesystem::path> log;
};

// Flat TOML subset: [section] headers, key = value lines, '#' comments.
// Values are numbers, true/false, or strings (quoted or bare).
RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

// Default configuration as config-file text.
std::string default_run_config_text();

}  // namespace tabgrade
