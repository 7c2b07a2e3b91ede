#include "diver/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace diver {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

void parse_assignment(ConfigMap& cfg, const std::string& line, int lineno) {
    size_t eq = line.find('=');
    if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": expected key=value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty())
        throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    cfg[key] = val;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (part.empty()) continue;
        try {
            out.push_back(std::stoi(part));
        } catch (const std::exception&) {
            throw ConfigError("config: bad integer '" + part + "' in " + key);
        }
    }
    return out;
}

}  // namespace

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        parse_assignment(cfg, line, lineno);
    }
    return cfg;
}

ConfigMap read_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str());
}

void apply_overrides(ConfigMap& cfg, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) parse_assignment(cfg, o, 0);
}

std::string config_to_text(const ConfigMap& cfg) {
    std::ostringstream os;
    for (const auto& [k, v] : cfg) os << k << "=" << v << "\n";
    return os.str();
}

void write_manifest(const std::string& path, const ConfigMap& cfg) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write manifest: " + path);
    os << config_to_text(cfg);
}

double get_double(const ConfigMap& cfg, const std::string& key, double fallback) {
    auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    try {
        size_t pos = 0;
        double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' is not a number: " + it->second);
    }
}

int get_int(const ConfigMap& cfg, const std::string& key, int fallback) {
    auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    try {
        size_t pos = 0;
        int v = std::stoi(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' is not an integer: " + it->second);
    }
}

bool get_bool(const ConfigMap& cfg, const std::string& key, bool fallback) {
    auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    const std::string& v = it->second;
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw ConfigError("config: '" + key + "' is not a boolean: " + v);
}

std::string get_string(const ConfigMap& cfg, const std::string& key,
                       const std::string& fallback) {
    auto it = cfg.find(key);
    return it == cfg.end() ? fallback : it->second;
}

ModelConfig model_config_from(const ConfigMap& cfg, ModelConfig base) {
    static const std::set<std::string> known = {
        "model.patch_len",     "model.dim",          "model.heads",
        "model.blocks",        "model.ffn_dim",      "model.dropout",
        "model.rope_base",     "model.cnn_encoding", "model.spectral",
        "model.cnn_channels",  "model.positional",   "model.stcpe_window",
        "model.stcpe_dim",     "model.stcpe_heads",  "model.stcpe_ffn",
        "model.block_kind",    "model.rope",         "model.binary_bias",
        "model.acpe_channels", "model.acpe_kernel_c", "model.acpe_kernel_t",
        "model.abs_max_channels", "model.abs_max_patches", "model.num_classes",
    };
    for (const auto& [k, v] : cfg) {
        if (k.rfind("model.", 0) == 0 && known.find(k) == known.end())
            throw ConfigError("config: unknown key '" + k + "'");
    }

    ModelConfig m = base;
    m.patch_len = get_int(cfg, "model.patch_len", m.patch_len);
    m.dim = get_int(cfg, "model.dim", m.dim);
    m.heads = get_int(cfg, "model.heads", m.heads);
    m.blocks = get_int(cfg, "model.blocks", m.blocks);
    m.ffn_dim = get_int(cfg, "model.ffn_dim", m.ffn_dim);
    m.dropout = get_double(cfg, "model.dropout", m.dropout);
    m.rope_base = get_double(cfg, "model.rope_base", m.rope_base);
    m.cnn_encoding = get_bool(cfg, "model.cnn_encoding", m.cnn_encoding);
    m.spectral = get_bool(cfg, "model.spectral", m.spectral);
    if (cfg.count("model.cnn_channels"))
        m.cnn_channels = parse_int_list(cfg.at("model.cnn_channels"),
                                        "model.cnn_channels");
    std::string pos = get_string(cfg, "model.positional",
                                 m.positional == Positional::stcpe  ? "stcpe"
                                 : m.positional == Positional::acpe ? "acpe"
                                                                    : "none");
    if (pos == "stcpe") m.positional = Positional::stcpe;
    else if (pos == "acpe") m.positional = Positional::acpe;
    else if (pos == "none") m.positional = Positional::none;
    else throw ConfigError("config: model.positional must be stcpe|acpe|none");
    m.stcpe_window = get_int(cfg, "model.stcpe_window", m.stcpe_window);
    m.stcpe_dim = get_int(cfg, "model.stcpe_dim", m.stcpe_dim);
    m.stcpe_heads = get_int(cfg, "model.stcpe_heads", m.stcpe_heads);
    m.stcpe_ffn = get_int(cfg, "model.stcpe_ffn", m.stcpe_ffn);
    std::string kind = get_string(cfg, "model.block_kind",
                                  m.block_kind == BlockKind::diver     ? "diver"
                                  : m.block_kind == BlockKind::vanilla ? "vanilla"
                                                                       : "cbramod");
    if (kind == "diver") m.block_kind = BlockKind::diver;
    else if (kind == "vanilla") m.block_kind = BlockKind::vanilla;
    else if (kind == "cbramod") m.block_kind = BlockKind::cbramod;
    else throw ConfigError("config: model.block_kind must be diver|vanilla|cbramod");
    m.rope = get_bool(cfg, "model.rope", m.rope);
    m.binary_bias = get_bool(cfg, "model.binary_bias", m.binary_bias);
    m.acpe_channels = get_int(cfg, "model.acpe_channels", m.acpe_channels);
    m.acpe_kernel_c = get_int(cfg, "model.acpe_kernel_c", m.acpe_kernel_c);
    m.acpe_kernel_t = get_int(cfg, "model.acpe_kernel_t", m.acpe_kernel_t);
    m.abs_max_channels = get_int(cfg, "model.abs_max_channels", m.abs_max_channels);
    m.abs_max_patches = get_int(cfg, "model.abs_max_patches", m.abs_max_patches);
    m.num_classes = get_int(cfg, "model.num_classes", m.num_classes);
    m.validate();
    return m;
}

void model_config_to(const ModelConfig& m, ConfigMap& out) {
    auto b = [](bool v) { return v ? std::string("1") : std::string("0"); };
    out["model.patch_len"] = std::to_string(m.patch_len);
    out["model.dim"] = std::to_string(m.dim);
    out["model.heads"] = std::to_string(m.heads);
    out["model.blocks"] = std::to_string(m.blocks);
    out["model.ffn_dim"] = std::to_string(m.ffn_dim);
    out["model.dropout"] = std::to_string(m.dropout);
    out["model.rope_base"] = std::to_string(m.rope_base);
    out["model.cnn_encoding"] = b(m.cnn_encoding);
    out["model.spectral"] = b(m.spectral);
    std::string chans;
    for (size_t i = 0; i < m.cnn_channels.size(); ++i) {
        if (i) chans += ",";
        chans += std::to_string(m.cnn_channels[i]);
    }
    out["model.cnn_channels"] = chans;
    out["model.positional"] = m.positional == Positional::stcpe  ? "stcpe"
                              : m.positional == Positional::acpe ? "acpe"
                                                                 : "none";
    out["model.stcpe_window"] = std::to_string(m.stcpe_window);
    out["model.stcpe_dim"] = std::to_string(m.stcpe_dim);
    out["model.stcpe_heads"] = std::to_string(m.stcpe_heads);
    out["model.stcpe_ffn"] = std::to_string(m.stcpe_ffn);
    out["model.block_kind"] = m.block_kind == BlockKind::diver     ? "diver"
                              : m.block_kind == BlockKind::vanilla ? "vanilla"
                                                                   : "cbramod";
    out["model.rope"] = b(m.rope);
    out["model.binary_bias"] = b(m.binary_bias);
    out["model.acpe_channels"] = std::to_string(m.acpe_channels);
    out["model.acpe_kernel_c"] = std::to_string(m.acpe_kernel_c);
    out["model.acpe_kernel_t"] = std::to_string(m.acpe_kernel_t);
    out["model.abs_max_channels"] = std::to_string(m.abs_max_channels);
    out["model.abs_max_patches"] = std::to_string(m.abs_max_patches);
    out["model.num_classes"] = std::to_string(m.num_classes);
}

}  // namespace diver
