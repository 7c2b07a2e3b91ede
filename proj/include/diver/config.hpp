#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "diver/model.hpp"

namespace diver {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Plain-text key=value configuration; '#' starts a comment, blank lines are
// ignored. Later assignments win.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config_text(const std::string& text);
ConfigMap read_config_file(const std::string& path);

// Applies "key=value" override strings (the --set flag).
void apply_overrides(ConfigMap& cfg, const std::vector<std::string>& overrides);

std::string config_to_text(const ConfigMap& cfg);  // sorted key=value lines
void write_manifest(const std::string& path, const ConfigMap& cfg);

// Typed accessors; throw ConfigError on malformed values.
double get_double(const ConfigMap& cfg, const std::string& key, double fallback);
int get_int(const ConfigMap& cfg, const std::string& key, int fallback);
bool get_bool(const ConfigMap& cfg, const std::string& key, bool fallback);
std::string get_string(const ConfigMap& cfg, const std::string& key,
                       const std::string& fallback);

// Builds a ModelConfig from "model.*" keys on top of `base`; rejects unknown
// model.* keys so typos fail fast.
ModelConfig model_config_from(const ConfigMap& cfg, ModelConfig base = {});

// Serializes every model field back to "model.*" keys (manifest contents).
void model_config_to(const ModelConfig& mc, ConfigMap& out);

}  // namespace diver
