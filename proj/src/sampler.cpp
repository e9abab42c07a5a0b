#include "tabgrade/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

namespace tabgrade {

void GenerationConfig::validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw std::invalid_argument("temperature must be positive");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
        throw std::invalid_argument("top_p must be in (0, 1]");
    }
}

Prompt parse_prompt(const std::string& text, const Schema& schema) {
    Prompt prompt;
    if (text.empty()) return prompt;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto end = text.find(',', pos);
        if (end == std::string::npos) end = text.size();
        const std::string item = text.substr(pos, end - pos);
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw DataError("prompt item '" + item + "' is not of the form FEATURE=value");
        }
        const std::string name = item.substr(0, eq);
        const std::string value = item.substr(eq + 1);
        const std::size_t col = schema.index_of(name);
        for (const auto& [seen, _] : prompt.fixed) {
            if (seen == name) throw DataError("prompt fixes feature '" + name + "' twice");
        }
        std::optional<Cell> cell = value == "None" ? Cell{} : parse_cell(value, schema[col].kind);
        if (!cell) {
            throw DataError("prompt value '" + value + "' does not fit column '" + name + "'");
        }
        prompt.fixed.emplace_back(name, std::move(*cell));
        pos = end + 1;
    }
    return prompt;
}

TokenSequence encode_prompt(const Prompt& prompt, const Schema& schema, const Vocabulary& vocab) {
    TokenSequence seq;
    seq.ids.push_back(Vocabulary::kBos);
    std::vector<bool> used(schema.size(), false);
    for (std::size_t i = 0; i < prompt.fixed.size(); ++i) {
        const auto& [name, value] = prompt.fixed[i];
        const std::size_t col = schema.index_of(name);
        if (used[col]) throw DataError("prompt fixes feature '" + name + "' twice");
        used[col] = true;
        if (!is_missing(value) && !cell_matches(value, schema[col].kind)) {
            throw DataError("prompt value for '" + name + "' has the wrong type");
        }
        const auto pair = encode_pair(col, value, vocab);
        seq.ids.insert(seq.ids.end(), pair.begin(), pair.end());
        // With every feature fixed the model is left to emit EOS.
        if (prompt.fixed.size() < schema.size()) seq.ids.push_back(Vocabulary::kSep);
    }
    return seq;
}

std::vector<double> nucleus_filter(std::span<const double> probs, double p) {
    if (!(p > 0.0 && p <= 1.0)) {
        throw std::invalid_argument("nucleus mass p must be in (0, 1]");
    }
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    std::vector<double> out(probs.size(), 0.0);
    double mass = 0.0;
    for (auto id : order) {
        if (probs[id] <= 0.0 && mass > 0.0) break;
        out[id] = probs[id];
        mass += probs[id];
        if (mass >= p) break;
    }
    if (mass > 0.0) {
        for (auto& v : out) v /= mass;
    }
    return out;
}

std::vector<double> sampling_distribution(const RowVector& logits, const GenerationConfig& config) {
    const double mx = logits.maxCoeff();
    std::vector<double> probs(static_cast<std::size_t>(logits.size()));
    double z = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        probs[static_cast<std::size_t>(i)] = std::exp((logits(i) - mx) / config.temperature);
        z += probs[static_cast<std::size_t>(i)];
    }
    for (auto& v : probs) v /= z;
    return nucleus_filter(probs, config.top_p);
}

TokenId sample_token(const RowVector& logits, const GenerationConfig& config, Rng& rng) {
    if (!logits.allFinite()) {
        throw NumericError("non-finite logits during sampling");
    }
    if (config.greedy) {
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < logits.size(); ++i) {
            if (logits(i) > logits(best)) best = i;
        }
        return static_cast<TokenId>(best);
    }
    const auto probs = sampling_distribution(logits, config);
    const double u = rng.uniform01();
    double cum = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        last = i;
        cum += probs[i];
        if (u < cum) return static_cast<TokenId>(i);
    }
    return static_cast<TokenId>(last);
}

void SamplingStats::merge(const SamplingStats& other) {
    rows += other.rows;
    attempts += other.attempts;
    failed_attempts += other.failed_attempts;
    for (std::size_t i = 0; i < failures.size(); ++i) failures[i] += other.failures[i];
}

nlohmann::json SamplingStats::to_json() const {
    nlohmann::json hist = nlohmann::json::object();
    for (std::size_t i = 0; i < failures.size(); ++i) {
        hist[to_string(static_cast<ParseFailure>(i))] = failures[i];
    }
    return {{"requested", requested},
            {"rows", rows},
            {"attempts", attempts},
            {"failed_attempts", failed_attempts},
            {"failures", hist}};
}

RetryBudgetExhausted::RetryBudgetExhausted(std::size_t row, SamplingStats stats)
    : std::runtime_error("retry budget exhausted at row " + std::to_string(row) + " (" + stats.to_json().dump() + ")"),
      row_(row),
      stats_(std::move(stats)) {}

std::optional<TokenSequence> generate_sequence(const ModelState& model, const TokenSequence& prefix,
                                               const GenerationConfig& config, Rng& rng) {
    const std::size_t limit = model.config.max_seq_len;
    if (prefix.ids.empty() || prefix.size() > limit) {
        throw DataError("prompt does not fit the model context");
    }
    const std::size_t budget = config.max_new_tokens == 0 ? limit : config.max_new_tokens;
    DecodeCache cache = DecodeCache::empty(model.config);
    RowVector logits;
    for (auto id : prefix.ids) logits = incremental_step(model, cache, id);
    TokenSequence seq = prefix;
    for (std::size_t produced = 0; produced < budget; ++produced) {
        const TokenId next = sample_token(logits, config, rng);
        seq.ids.push_back(next);
        if (next == Vocabulary::kEos) return seq;
        if (seq.size() >= limit) break;
        logits = incremental_step(model, cache, next);
    }
    return std::nullopt;
}

namespace {

struct RowOutcome {
    std::optional<Row> row;
    SamplingStats stats;
};

RowOutcome sample_one(const ModelState& model, std::size_t index, const GenerationConfig& config,
                      const Schema& schema, const Vocabulary& vocab, const TokenSequence& prefix) {
    RowOutcome out;
    Rng rng(mix_seed(config.seed, index));
    for (std::size_t attempt = 0; attempt <= config.max_retries_per_row; ++attempt) {
        ++out.stats.attempts;
        const auto seq = generate_sequence(model, prefix, config, rng);
        ParseResult parsed;
        if (seq) {
            parsed = parse_text(*seq, schema, vocab);
        } else {
            parsed.failures = {ParseFailure::MalformedStructure};
        }
        if (parsed.ok()) {
            out.row = std::move(parsed.row);
            out.stats.rows = 1;
            return out;
        }
        ++out.stats.failed_attempts;
        for (auto f : parsed.failures) ++out.stats.failures[static_cast<std::size_t>(f)];
    }
    return out;
}

}  // namespace

SampleResult sample_rows(const ModelState& model, std::size_t n, const GenerationConfig& config, const Schema& schema,
                         const Vocabulary& vocab, const std::optional<Prompt>& prompt) {
    config.validate();
    if (vocab.size() != model.config.vocab_size || vocab.num_features() != schema.size()) {
        throw DataError("model, vocabulary and schema are inconsistent");
    }
    const TokenSequence prefix = encode_prompt(prompt.value_or(Prompt{}), schema, vocab);

    std::vector<RowOutcome> outcomes(n);
    const std::size_t workers = std::max<std::size_t>(1, std::min(config.threads, n));
    if (workers == 1) {
        for (std::size_t r = 0; r < n; ++r) {
            outcomes[r] = sample_one(model, r, config, schema, vocab, prefix);
            if (!outcomes[r].row) break;
        }
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t r = w; r < n; r += workers) {
                        outcomes[r] = sample_one(model, r, config, schema, vocab, prefix);
                    }
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    SampleResult result;
    result.stats.requested = n;
    std::vector<Row> rows;
    rows.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        result.stats.merge(outcomes[r].stats);
        if (!outcomes[r].row) {
            throw RetryBudgetExhausted(r, result.stats);
        }
        rows.push_back(std::move(*outcomes[r].row));
    }
    result.table = Table(schema, std::move(rows));
    return result;
}

}  // namespace tabgrade
