#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "tabgrade/fd.hpp"
#include "tabgrade/random.hpp"
#include "tabgrade/table.hpp"

namespace tabgrade {

using TokenId = std::int32_t;

// Field-aware vocabulary. Feature names and categorical values are single
// tokens; numbers are spelled with one token per character.
class Vocabulary {
public:
    static constexpr TokenId kBos = 0;
    static constexpr TokenId kEos = 1;
    static constexpr TokenId kPad = 2;
    static constexpr TokenId kSep = 3;
    static constexpr TokenId kIs = 4;
    static constexpr TokenId kNone = 5;

    static constexpr const char* kNumericChars = "0123456789.-e";

    Vocabulary() = default;

    // Order: specials, feature names, categorical values (column order, then
    // first appearance), numeric characters.
    static Vocabulary build(const Table& table);

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    std::optional<TokenId> find(const std::string& text) const;
    TokenId id_of(const std::string& text) const;

    std::size_t num_features() const { return feature_names_.size(); }
    const std::string& feature_name(std::size_t col) const { return feature_names_[col]; }
    TokenId feature_token(std::size_t col) const { return feature_tokens_[col]; }
    // Column index for a feature-name token, if it is one.
    std::optional<std::size_t> feature_of(TokenId id) const;
    bool has_category(std::size_t col, const std::string& value) const;
    const std::vector<std::string>& categories(std::size_t col) const { return categories_[col]; }
    bool is_numeric_char(TokenId id) const;

    const std::vector<std::string>& tokens() const { return tokens_; }

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& doc);
    // Digest over the token list, feature names and categories.
    std::string hash() const;

    bool operator==(const Vocabulary& other) const {
        return tokens_ == other.tokens_ && feature_names_ == other.feature_names_ &&
               categories_ == other.categories_;
    }

private:
    TokenId intern(const std::string& text);
    void rebuild_index();

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
    std::vector<std::string> feature_names_;
    std::vector<TokenId> feature_tokens_;
    std::vector<std::vector<std::string>> categories_;
    std::unordered_map<TokenId, std::size_t> feature_by_token_;
};

struct TokenSequence {
    std::vector<TokenId> ids;

    std::size_t size() const { return ids.size(); }
    bool operator==(const TokenSequence&) const = default;
};

// Token positions of one feature: its name token and the half-open range of
// its value tokens.
struct FeatureSpan {
    std::size_t name_pos = 0;
    std::size_t value_begin = 0;
    std::size_t value_end = 0;

    std::size_t length() const { return value_end - value_begin; }
    bool operator==(const FeatureSpan&) const = default;
};

// Indexed by schema column.
struct SpanMap {
    std::vector<FeatureSpan> features;
};

// Fixed-significance text of a continuous value: 6 significant digits,
// positional notation for magnitudes in [1e-4, 1e7), otherwise d.ddddde[-]x.
std::string render_continuous(double value);

// Value text of a cell as it appears in the serialized row.
std::string render_value(const Cell& cell);

std::vector<std::size_t> sample_permutation(std::size_t d, Rng& rng);

// BOS, then "NAME is VALUE" per feature in permutation order separated by
// ", ", then EOS.
std::pair<TokenSequence, SpanMap> serialize_row(const Row& row, const std::vector<std::size_t>& permutation,
                                                const Vocabulary& vocab);

// Token list for one feature-value pair: NAME IS value...
std::vector<TokenId> encode_pair(std::size_t column, const Cell& value, const Vocabulary& vocab);

enum class ParseFailure { MissingFeature, DuplicateFeature, TypeMismatch, MalformedStructure };
const char* to_string(ParseFailure reason);

struct ParseResult {
    std::optional<Row> row;
    std::vector<ParseFailure> failures;  // sorted, unique

    bool ok() const { return row.has_value(); }
};

ParseResult parse_text(const TokenSequence& tokens, const Schema& schema, const Vocabulary& vocab);

// Human-readable text of a sequence, without BOS/EOS/PAD.
std::string render_text(const TokenSequence& tokens, const Vocabulary& vocab);

// FD with column indices.
struct ResolvedFd {
    std::vector<std::size_t> lhs;
    std::size_t rhs = 0;
};

ResolvedFd resolve_fd(const FunctionalDependency& fd, const Schema& schema);
std::vector<ResolvedFd> resolve_fds(const FdSet& set, const Schema& schema);

struct FdSpans {
    std::vector<std::size_t> lhs_tokens;  // T_X
    std::vector<std::size_t> rhs_tokens;  // T_Y
};

// Value-token positions (optionally with name tokens) of the determinant and
// dependent features.
FdSpans spans_for_fd(const SpanMap& spans, const ResolvedFd& fd, bool include_name_tokens = false);
FdSpans spans_for_fd(const SpanMap& spans, const FunctionalDependency& fd, const Schema& schema,
                     bool include_name_tokens = false);

}  // namespace tabgrade
