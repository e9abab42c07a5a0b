#include "tabgrade/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <set>

#include "tabgrade/io.hpp"

namespace tabgrade {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

struct Value {
    std::string key;
    std::string text;
};

double as_real(const Value& v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.text.data(), v.text.data() + v.text.size(), out);
    if (ec != std::errc() || p != v.text.data() + v.text.size() || v.text.empty()) {
        throw ConfigError(v.key, "expected a number, got '" + v.text + "'");
    }
    return out;
}

std::uint64_t as_unsigned(const Value& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.text.data(), v.text.data() + v.text.size(), out);
    if (ec != std::errc() || p != v.text.data() + v.text.size() || v.text.empty()) {
        throw ConfigError(v.key, "expected a non-negative integer, got '" + v.text + "'");
    }
    return out;
}

bool as_bool(const Value& v) {
    if (v.text == "true") return true;
    if (v.text == "false") return false;
    throw ConfigError(v.key, "expected true or false, got '" + v.text + "'");
}

template <typename F>
auto as_enum(const Value& v, F parse) {
    try {
        return parse(v.text);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(v.key, e.what());
    }
}

using Setter = std::function<void(RunConfig&, const Value&, const std::filesystem::path&)>;

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

const std::map<std::string, Setter>& setters() {
    using P = std::filesystem::path;
    static const std::map<std::string, Setter> table = {
        {"train.mode", [](RunConfig& c, const Value& v, const P&) { c.train.mode = as_enum(v, train_mode_from_string); }},
        {"train.learning_rate", [](RunConfig& c, const Value& v, const P&) { c.train.learning_rate = as_real(v); }},
        {"train.batch_size", [](RunConfig& c, const Value& v, const P&) { c.train.batch_size = as_unsigned(v); }},
        {"train.steps", [](RunConfig& c, const Value& v, const P&) { c.train.steps = as_unsigned(v); }},
        {"train.seed", [](RunConfig& c, const Value& v, const P&) { c.train.seed = as_unsigned(v); }},
        {"train.beta1", [](RunConfig& c, const Value& v, const P&) { c.train.adamw.beta1 = as_real(v); }},
        {"train.beta2", [](RunConfig& c, const Value& v, const P&) { c.train.adamw.beta2 = as_real(v); }},
        {"train.adam_eps", [](RunConfig& c, const Value& v, const P&) { c.train.adamw.eps = as_real(v); }},
        {"train.weight_decay", [](RunConfig& c, const Value& v, const P&) { c.train.adamw.weight_decay = as_real(v); }},
        {"train.fd_subsample", [](RunConfig& c, const Value& v, const P&) { c.train.fd_subsample = as_unsigned(v); }},
        {"train.include_empty_lhs",
         [](RunConfig& c, const Value& v, const P&) { c.train.include_empty_lhs = as_bool(v); }},
        {"train.input", [](RunConfig& c, const Value& v, const P& b) { c.input = resolve(b, v.text); }},
        {"train.schema", [](RunConfig& c, const Value& v, const P& b) { c.schema = resolve(b, v.text); }},
        {"train.fds", [](RunConfig& c, const Value& v, const P& b) { c.fds = resolve(b, v.text); }},
        {"train.checkpoint", [](RunConfig& c, const Value& v, const P& b) { c.checkpoint = resolve(b, v.text); }},
        {"train.log", [](RunConfig& c, const Value& v, const P& b) { c.log = resolve(b, v.text); }},

        {"model.n_layers", [](RunConfig& c, const Value& v, const P&) { c.model.n_layers = as_unsigned(v); }},
        {"model.n_heads", [](RunConfig& c, const Value& v, const P&) { c.model.n_heads = as_unsigned(v); }},
        {"model.model_dim", [](RunConfig& c, const Value& v, const P&) { c.model.model_dim = as_unsigned(v); }},
        {"model.ffn_dim", [](RunConfig& c, const Value& v, const P&) { c.model.ffn_dim = as_unsigned(v); }},
        {"model.max_seq_len", [](RunConfig& c, const Value& v, const P&) { c.model.max_seq_len = as_unsigned(v); }},
        {"model.graph_sharing",
         [](RunConfig& c, const Value& v, const P&) { c.model.graph_sharing = as_enum(v, graph_sharing_from_string); }},
        {"model.gating", [](RunConfig& c, const Value& v, const P&) { c.model.gating = as_enum(v, gating_from_string); }},
        {"model.epsilon", [](RunConfig& c, const Value& v, const P&) { c.model.epsilon = as_real(v); }},

        {"loss.lambda_sparse", [](RunConfig& c, const Value& v, const P&) { c.weights.lambda_sparse = as_real(v); }},
        {"loss.lambda_fd", [](RunConfig& c, const Value& v, const P&) { c.weights.lambda_fd = as_real(v); }},
        {"loss.alpha", [](RunConfig& c, const Value& v, const P&) { c.weights.alpha = as_real(v); }},
        {"loss.lm_reduction",
         [](RunConfig& c, const Value& v, const P&) {
             if (v.text == "token_mean") c.loss.lm = LmReduction::TokenMean;
             else if (v.text == "sequence_sum") c.loss.lm = LmReduction::SequenceSum;
             else throw ConfigError(v.key, "expected token_mean or sequence_sum");
         }},
        {"loss.sparsity_reduction",
         [](RunConfig& c, const Value& v, const P&) {
             if (v.text == "entry_mean") c.loss.sparsity = SparsityReduction::EntryMean;
             else if (v.text == "raw_sum") c.loss.sparsity = SparsityReduction::RawSum;
             else throw ConfigError(v.key, "expected entry_mean or raw_sum");
         }},
        {"loss.fd_scope",
         [](RunConfig& c, const Value& v, const P&) {
             if (v.text == "all_layers") c.loss.fd_scope = FdScope::AllLayers;
             else if (v.text == "last_layer") c.loss.fd_scope = FdScope::LastLayer;
             else throw ConfigError(v.key, "expected all_layers or last_layer");
         }},
        {"loss.include_name_tokens",
         [](RunConfig& c, const Value& v, const P&) { c.loss.include_name_tokens = as_bool(v); }},

        {"sample.temperature", [](RunConfig& c, const Value& v, const P&) { c.sample.temperature = as_real(v); }},
        {"sample.top_p", [](RunConfig& c, const Value& v, const P&) { c.sample.top_p = as_real(v); }},
        {"sample.max_new_tokens",
         [](RunConfig& c, const Value& v, const P&) { c.sample.max_new_tokens = as_unsigned(v); }},
        {"sample.max_retries_per_row",
         [](RunConfig& c, const Value& v, const P&) { c.sample.max_retries_per_row = as_unsigned(v); }},
    };
    return table;
}

void check_ranges(const RunConfig& c) {
    if (c.input.empty()) throw ConfigError("train.input", "required");
    if (c.checkpoint.empty()) throw ConfigError("train.checkpoint", "required");
    if (!(c.train.learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be positive");
    if (c.train.batch_size == 0) throw ConfigError("train.batch_size", "must be positive");
    if (c.train.steps == 0) throw ConfigError("train.steps", "must be positive");
    if (!(c.train.adamw.beta1 >= 0.0 && c.train.adamw.beta1 < 1.0)) throw ConfigError("train.beta1", "must be in [0, 1)");
    if (!(c.train.adamw.beta2 >= 0.0 && c.train.adamw.beta2 < 1.0)) throw ConfigError("train.beta2", "must be in [0, 1)");
    if (!(c.train.adamw.eps > 0.0)) throw ConfigError("train.adam_eps", "must be positive");
    if (!(c.train.adamw.weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be non-negative");
    if (c.model.n_layers == 0) throw ConfigError("model.n_layers", "must be positive");
    if (c.model.n_heads == 0) throw ConfigError("model.n_heads", "must be positive");
    if (c.model.model_dim == 0 || c.model.model_dim % c.model.n_heads != 0) {
        throw ConfigError("model.model_dim", "must be a positive multiple of n_heads");
    }
    if (c.model.ffn_dim == 0) throw ConfigError("model.ffn_dim", "must be positive");
    if (c.model.max_seq_len == 0) throw ConfigError("model.max_seq_len", "must be positive");
    if (!(c.model.epsilon > 0.0)) throw ConfigError("model.epsilon", "must be positive");
    if (!(c.weights.lambda_sparse >= 0.0)) throw ConfigError("loss.lambda_sparse", "must be non-negative");
    if (!(c.weights.lambda_fd >= 0.0)) throw ConfigError("loss.lambda_fd", "must be non-negative");
    if (!(c.weights.alpha > 0.0 && c.weights.alpha < 1.0)) throw ConfigError("loss.alpha", "must be in (0, 1)");
    if (!(c.sample.temperature > 0.0)) throw ConfigError("sample.temperature", "must be positive");
    if (!(c.sample.top_p > 0.0 && c.sample.top_p <= 1.0)) throw ConfigError("sample.top_p", "must be in (0, 1]");
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir) {
    RunConfig cfg;
    std::string section;
    std::set<std::string> seen;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;

        // Strip a comment unless the '#' sits inside quotes.
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') quoted = !quoted;
            if (line[i] == '#' && !quoted) {
                line.resize(i);
                break;
            }
        }
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("", "line " + std::to_string(line_no) + ": malformed section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (section != "train" && section != "model" && section != "loss" && section != "sample") {
                throw ConfigError(section, "unknown section");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("", "line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string name = trim(line.substr(0, eq));
        const std::string key = section.empty() ? name : section + "." + name;
        std::string value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
            value = value.substr(1, value.size() - 2);
        }
        const auto it = setters().find(key);
        if (it == setters().end()) {
            throw ConfigError(key, "unknown key");
        }
        if (!seen.insert(key).second) {
            throw ConfigError(key, "set twice");
        }
        it->second(cfg, Value{key, value}, base_dir);
    }
    check_ranges(cfg);
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    return parse_run_config(read_file(path), path.parent_path());
}

std::string default_run_config_text() {
    const RunConfig d;
    auto num = [](double v) { return nlohmann::json(v).dump(); };
    std::string s;
    s += "[train]\n";
    s += "input = \"train.csv\"\n";
    s += "fds = \"fds.json\"\n";
    s += "checkpoint = \"ckpt\"\n";
    s += "log = \"train_log.csv\"\n";
    s += std::string("mode = \"") + to_string(d.train.mode) + "\"\n";
    s += "learning_rate = " + num(d.train.learning_rate) + "\n";
    s += "batch_size = " + std::to_string(d.train.batch_size) + "\n";
    s += "steps = " + std::to_string(d.train.steps) + "\n";
    s += "seed = " + std::to_string(d.train.seed) + "\n";
    s += "beta1 = " + num(d.train.adamw.beta1) + "\n";
    s += "beta2 = " + num(d.train.adamw.beta2) + "\n";
    s += "adam_eps = " + num(d.train.adamw.eps) + "\n";
    s += "weight_decay = " + num(d.train.adamw.weight_decay) + "\n";
    s += "\n[model]\n";
    s += "n_layers = " + std::to_string(d.model.n_layers) + "\n";
    s += "n_heads = " + std::to_string(d.model.n_heads) + "\n";
    s += "model_dim = " + std::to_string(d.model.model_dim) + "\n";
    s += "ffn_dim = " + std::to_string(d.model.ffn_dim) + "\n";
    s += "max_seq_len = " + std::to_string(d.model.max_seq_len) + "\n";
    s += std::string("graph_sharing = \"") + to_string(d.model.graph_sharing) + "\"\n";
    s += std::string("gating = \"") + to_string(d.model.gating) + "\"\n";
    s += "epsilon = " + num(d.model.epsilon) + "\n";
    s += "\n[loss]\n";
    s += "lambda_sparse = " + num(d.weights.lambda_sparse) + "\n";
    s += "lambda_fd = " + num(d.weights.lambda_fd) + "\n";
    s += "alpha = " + num(d.weights.alpha) + "\n";
    s += "\n[sample]\n";
    s += "temperature = " + num(d.sample.temperature) + "\n";
    s += "top_p = " + num(d.sample.top_p) + "\n";
    s += "max_retries_per_row = " + std::to_string(d.sample.max_retries_per_row) + "\n";
    return s;
}

}  // namespace tabgrade
