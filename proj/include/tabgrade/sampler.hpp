#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tabgrade/codec.hpp"
#include "tabgrade/model.hpp"
#include "tabgrade/random.hpp"
#include "tabgrade/table.hpp"

namespace tabgrade {

struct GenerationConfig {
    double temperature = 0.7;
    double top_p = 0.95;
    // 0 means up to the model's max_seq_len.
    std::size_t max_new_tokens = 0;
    std::size_t max_retries_per_row = 10;
    std::uint64_t seed = 0;
    bool greedy = false;
    std::size_t threads = 1;

    void validate() const;
};

// Feature-value pairs emitted ahead of generation, in the given order.
struct Prompt {
    std::vector<std::pair<std::string, Cell>> fixed;
};

// "F=v,G=w"; values are typed by the schema ("None" or empty means missing).
Prompt parse_prompt(const std::string& text, const Schema& schema);
TokenSequence encode_prompt(const Prompt& prompt, const Schema& schema, const Vocabulary& vocab);

// Smallest prefix under (probability desc, id asc) whose mass reaches p,
// renormalized; everything else 0.
std::vector<double> nucleus_filter(std::span<const double> probs, double p);

// softmax(logits / temperature), nucleus filter, categorical draw. Greedy
// mode returns the argmax (lowest id on ties) without touching rng.
TokenId sample_token(const RowVector& logits, const GenerationConfig& config, Rng& rng);
std::vector<double> sampling_distribution(const RowVector& logits, const GenerationConfig& config);

struct SamplingStats {
    std::size_t requested = 0;
    std::size_t rows = 0;
    std::size_t attempts = 0;
    std::size_t failed_attempts = 0;
    // Indexed by ParseFailure; one attempt may report several reasons.
    std::array<std::size_t, 4> failures{};

    std::size_t count(ParseFailure f) const { return failures[static_cast<std::size_t>(f)]; }
    void merge(const SamplingStats& other);
    nlohmann::json to_json() const;
};

class RetryBudgetExhausted : public std::runtime_error {
public:
    RetryBudgetExhausted(std::size_t row, SamplingStats stats);

    std::size_t row() const { return row_; }
    const SamplingStats& stats() const { return stats_; }

private:
    std::size_t row_;
    SamplingStats stats_;
};

struct SampleResult {
    Table table;
    SamplingStats stats;
};

// Decodes one sequence from the prefix until EOS. Hitting the token budget
// first yields nullopt.
std::optional<TokenSequence> generate_sequence(const ModelState& model, const TokenSequence& prefix,
                                               const GenerationConfig& config, Rng& rng);

// Row r draws from mix_seed(seed, r), so the table does not depend on the
// number of worker threads.
SampleResult sample_rows(const ModelState& model, std::size_t n, const GenerationConfig& config, const Schema& schema,
                         const Vocabulary& vocab, const std::optional<Prompt>& prompt = std::nullopt);

}  // namespace tabgrade
