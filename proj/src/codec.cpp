#include "tabgrade/codec.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>

#include "tabgrade/io.hpp"

namespace tabgrade {

namespace {

const char* const kSpecialTokens[] = {"<bos>", "<eos>", "<pad>", ", ", " is ", "None"};

bool is_special(const std::string& s) {
    for (const char* sp : kSpecialTokens) {
        if (s == sp) return true;
    }
    return false;
}

void push_chars(std::vector<TokenId>& out, const std::string& text, const Vocabulary& vocab) {
    for (char c : text) {
        out.push_back(vocab.id_of(std::string(1, c)));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

TokenId Vocabulary::intern(const std::string& text) {
    if (auto it = index_.find(text); it != index_.end()) {
        return it->second;
    }
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(text);
    index_.emplace(text, id);
    return id;
}

void Vocabulary::rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
            throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
        }
    }
    feature_tokens_.clear();
    feature_by_token_.clear();
    for (std::size_t c = 0; c < feature_names_.size(); ++c) {
        const TokenId id = id_of(feature_names_[c]);
        feature_tokens_.push_back(id);
        feature_by_token_.emplace(id, c);
    }
}

Vocabulary Vocabulary::build(const Table& table) {
    if (table.empty()) {
        throw DataError("cannot build a vocabulary from an empty table");
    }
    Vocabulary v;
    for (const char* sp : kSpecialTokens) {
        v.intern(sp);
    }
    const auto& schema = table.schema();
    for (const auto& col : schema.columns()) {
        if (is_special(col.name)) {
            throw DataError("feature name '" + col.name + "' collides with a reserved token");
        }
        v.feature_names_.push_back(col.name);
        v.intern(col.name);
    }
    v.categories_.resize(schema.size());
    for (std::size_t c = 0; c < schema.size(); ++c) {
        if (schema[c].kind != ColumnKind::Categorical) {
            continue;
        }
        for (const auto& cat : column_stats(table, c).categories) {
            if (is_special(cat)) {
                throw DataError("category '" + cat + "' of column '" + schema[c].name +
                                "' collides with a reserved token");
            }
            v.categories_[c].push_back(cat);
            v.intern(cat);
        }
    }
    for (const char* p = kNumericChars; *p; ++p) {
        v.intern(std::string(1, *p));
    }
    v.rebuild_index();
    return v;
}

std::optional<TokenId> Vocabulary::find(const std::string& text) const {
    if (auto it = index_.find(text); it != index_.end()) {
        return it->second;
    }
    return std::nullopt;
}

TokenId Vocabulary::id_of(const std::string& text) const {
    if (auto id = find(text)) {
        return *id;
    }
    throw DataError("value '" + text + "' is not in the vocabulary");
}

std::optional<std::size_t> Vocabulary::feature_of(TokenId id) const {
    if (auto it = feature_by_token_.find(id); it != feature_by_token_.end()) {
        return it->second;
    }
    return std::nullopt;
}

bool Vocabulary::has_category(std::size_t col, const std::string& value) const {
    const auto& cats = categories_.at(col);
    return std::find(cats.begin(), cats.end(), value) != cats.end();
}

bool Vocabulary::is_numeric_char(TokenId id) const {
    const auto& t = token(id);
    return t.size() == 1 && std::strchr(kNumericChars, t[0]) != nullptr;
}

nlohmann::json Vocabulary::to_json() const {
    return {{"tokens", tokens_},
            {"specials", {{"bos", kBos}, {"eos", kEos}, {"pad", kPad}, {"sep", kSep}, {"is", kIs}, {"none", kNone}}},
            {"features", feature_names_},
            {"categories", categories_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& doc) {
    Vocabulary v;
    try {
        v.tokens_ = doc.at("tokens").get<std::vector<std::string>>();
        v.feature_names_ = doc.at("features").get<std::vector<std::string>>();
        v.categories_ = doc.at("categories").get<std::vector<std::vector<std::string>>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("invalid vocabulary document: ") + e.what());
    }
    const std::size_t n_special = std::size(kSpecialTokens);
    if (v.tokens_.size() < n_special) {
        throw DataError("vocabulary is missing special tokens");
    }
    for (std::size_t i = 0; i < n_special; ++i) {
        if (v.tokens_[i] != kSpecialTokens[i]) {
            throw DataError("vocabulary special token mismatch at id " + std::to_string(i));
        }
    }
    if (v.categories_.size() != v.feature_names_.size()) {
        throw DataError("vocabulary categories do not match features");
    }
    v.rebuild_index();
    return v;
}

std::string Vocabulary::hash() const {
    std::string blob;
    auto add = [&](const std::string& s) {
        blob += s;
        blob.push_back('\x1f');
    };
    for (const auto& t : tokens_) add(t);
    blob.push_back('\x1e');
    for (const auto& f : feature_names_) add(f);
    for (const auto& cats : categories_) {
        blob.push_back('\x1e');
        for (const auto& c : cats) add(c);
    }
    return hex_digest(fnv1a64(blob));
}

// ---------------------------------------------------------------------------
// Serialization

std::string render_continuous(double value) {
    if (!std::isfinite(value)) {
        throw DataError("non-finite continuous value");
    }
    if (value == 0.0) {
        return "0";
    }
    const double a = std::fabs(value);
    char buf[64];
    if (a >= 1e-4 && a < 1e7) {
        const int exponent = static_cast<int>(std::floor(std::log10(a)));
        const int decimals = std::max(0, 5 - exponent);
        double v = value;
        if (exponent > 5) {
            const double scale = std::pow(10.0, exponent - 5);
            v = std::round(value / scale) * scale;
        }
        std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
        std::string s(buf);
        if (s.find('.') != std::string::npos) {
            while (s.back() == '0') s.pop_back();
            if (s.back() == '.') s.pop_back();
        }
        if (s == "-0") s = "0";
        return s;
    }
    std::snprintf(buf, sizeof(buf), "%.5e", value);
    std::string s(buf);
    const auto epos = s.find('e');
    std::string mantissa = s.substr(0, epos);
    std::string exp = s.substr(epos + 1);
    if (mantissa.find('.') != std::string::npos) {
        while (mantissa.back() == '0') mantissa.pop_back();
        if (mantissa.back() == '.') mantissa.pop_back();
    }
    const bool negative = exp[0] == '-';
    exp = exp.substr(1);
    while (exp.size() > 1 && exp[0] == '0') exp.erase(exp.begin());
    return mantissa + "e" + (negative ? "-" : "") + exp;
}

std::string render_value(const Cell& cell) {
    if (is_missing(cell)) {
        return "None";
    }
    if (const auto* i = std::get_if<std::int64_t>(&cell)) {
        return std::to_string(*i);
    }
    if (const auto* d = std::get_if<double>(&cell)) {
        return render_continuous(*d);
    }
    return std::get<std::string>(cell);
}

std::vector<std::size_t> sample_permutation(std::size_t d, Rng& rng) {
    if (d < 1) {
        throw DataError("permutation size must be at least 1");
    }
    return rng.permutation(d);
}

std::vector<TokenId> encode_pair(std::size_t column, const Cell& value, const Vocabulary& vocab) {
    std::vector<TokenId> out{vocab.feature_token(column), Vocabulary::kIs};
    if (is_missing(value)) {
        out.push_back(Vocabulary::kNone);
    } else if (const auto* s = std::get_if<std::string>(&value)) {
        if (!vocab.has_category(column, *s)) {
            throw DataError("value '" + *s + "' of column '" + vocab.feature_name(column) +
                            "' is not in the vocabulary");
        }
        out.push_back(vocab.id_of(*s));
    } else {
        push_chars(out, render_value(value), vocab);
    }
    return out;
}

std::pair<TokenSequence, SpanMap> serialize_row(const Row& row, const std::vector<std::size_t>& permutation,
                                                const Vocabulary& vocab) {
    const std::size_t d = vocab.num_features();
    if (row.size() != d || permutation.size() != d) {
        throw DataError("row or permutation does not match the vocabulary's feature count");
    }
    std::vector<bool> used(d, false);
    for (auto p : permutation) {
        if (p >= d || used[p]) {
            throw DataError("invalid feature permutation");
        }
        used[p] = true;
    }
    TokenSequence seq;
    SpanMap spans;
    spans.features.resize(d);
    seq.ids.push_back(Vocabulary::kBos);
    for (std::size_t k = 0; k < d; ++k) {
        const std::size_t col = permutation[k];
        if (k > 0) {
            seq.ids.push_back(Vocabulary::kSep);
        }
        auto pair = encode_pair(col, row[col], vocab);
        FeatureSpan& span = spans.features[col];
        span.name_pos = seq.ids.size();
        span.value_begin = span.name_pos + 2;
        span.value_end = span.name_pos + pair.size();
        seq.ids.insert(seq.ids.end(), pair.begin(), pair.end());
    }
    seq.ids.push_back(Vocabulary::kEos);
    return {std::move(seq), std::move(spans)};
}

// ---------------------------------------------------------------------------
// Parsing

const char* to_string(ParseFailure reason) {
    switch (reason) {
        case ParseFailure::MissingFeature: return "MissingFeature";
        case ParseFailure::DuplicateFeature: return "DuplicateFeature";
        case ParseFailure::TypeMismatch: return "TypeMismatch";
        case ParseFailure::MalformedStructure: return "MalformedStructure";
    }
    return "MalformedStructure";
}

namespace {

std::optional<Cell> interpret_value(const std::vector<TokenId>& value, std::size_t col, const Schema& schema,
                                    const Vocabulary& vocab) {
    if (value.size() == 1 && value[0] == Vocabulary::kNone) {
        return Cell{};
    }
    std::string text;
    for (auto id : value) {
        text += vocab.token(id);
    }
    switch (schema[col].kind) {
        case ColumnKind::Categorical:
            if (vocab.has_category(col, text)) return Cell{text};
            return std::nullopt;
        case ColumnKind::Integer: {
            for (auto id : value) {
                if (!vocab.is_numeric_char(id)) return std::nullopt;
            }
            std::int64_t v = 0;
            auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
            if (ec != std::errc() || p != text.data() + text.size()) return std::nullopt;
            return Cell{v};
        }
        case ColumnKind::Continuous: {
            for (auto id : value) {
                if (!vocab.is_numeric_char(id)) return std::nullopt;
            }
            double v = 0.0;
            auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
            if (ec != std::errc() || p != text.data() + text.size() || !std::isfinite(v)) return std::nullopt;
            return Cell{v};
        }
    }
    return std::nullopt;
}

bool is_structural(TokenId id) {
    return id == Vocabulary::kBos || id == Vocabulary::kEos || id == Vocabulary::kPad || id == Vocabulary::kIs;
}

}  // namespace

ParseResult parse_text(const TokenSequence& tokens, const Schema& schema, const Vocabulary& vocab) {
    ParseResult result;
    std::set<ParseFailure> failures;
    const auto& ids = tokens.ids;

    const auto eos = std::find(ids.begin(), ids.end(), Vocabulary::kEos);
    if (ids.empty() || ids.front() != Vocabulary::kBos || eos == ids.end()) {
        failures.insert(ParseFailure::MalformedStructure);
    }
    for (auto it = eos == ids.end() ? eos : eos + 1; it != ids.end(); ++it) {
        if (*it != Vocabulary::kPad) {
            failures.insert(ParseFailure::MalformedStructure);
            break;
        }
    }

    // Groups between separators inside BOS ... EOS.
    std::vector<std::vector<TokenId>> groups;
    if (!ids.empty()) {
        std::vector<TokenId> cur;
        for (auto it = ids.begin() + 1; it < eos; ++it) {
            if (*it == Vocabulary::kSep) {
                groups.push_back(std::move(cur));
                cur.clear();
            } else {
                cur.push_back(*it);
            }
        }
        groups.push_back(std::move(cur));
    }

    Row row(schema.size());
    std::vector<int> seen(schema.size(), 0);
    for (const auto& g : groups) {
        std::optional<std::size_t> col;
        if (!g.empty()) {
            col = vocab.feature_of(g[0]);
        }
        if (g.size() < 3 || !col || *col >= schema.size() || g[1] != Vocabulary::kIs) {
            failures.insert(ParseFailure::MalformedStructure);
            continue;
        }
        std::vector<TokenId> value(g.begin() + 2, g.end());
        if (std::any_of(value.begin(), value.end(), is_structural)) {
            failures.insert(ParseFailure::MalformedStructure);
            continue;
        }
        if (++seen[*col] > 1) {
            failures.insert(ParseFailure::DuplicateFeature);
            continue;
        }
        auto cell = interpret_value(value, *col, schema, vocab);
        if (!cell) {
            failures.insert(ParseFailure::TypeMismatch);
            continue;
        }
        row[*col] = std::move(*cell);
    }
    for (std::size_t c = 0; c < schema.size(); ++c) {
        if (seen[c] == 0) {
            failures.insert(ParseFailure::MissingFeature);
        }
    }
    result.failures.assign(failures.begin(), failures.end());
    if (result.failures.empty()) {
        result.row = std::move(row);
    }
    return result;
}

std::string render_text(const TokenSequence& tokens, const Vocabulary& vocab) {
    std::string out;
    for (auto id : tokens.ids) {
        if (id == Vocabulary::kBos || id == Vocabulary::kEos || id == Vocabulary::kPad) {
            continue;
        }
        out += vocab.token(id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// FD spans

ResolvedFd resolve_fd(const FunctionalDependency& fd, const Schema& schema) {
    ResolvedFd r;
    for (const auto& name : fd.lhs) {
        r.lhs.push_back(schema.index_of(name));
    }
    r.rhs = schema.index_of(fd.rhs);
    return r;
}

std::vector<ResolvedFd> resolve_fds(const FdSet& set, const Schema& schema) {
    std::vector<ResolvedFd> out;
    out.reserve(set.fds.size());
    for (const auto& fd : set.fds) {
        out.push_back(resolve_fd(fd, schema));
    }
    return out;
}

FdSpans spans_for_fd(const SpanMap& spans, const ResolvedFd& fd, bool include_name_tokens) {
    auto range = [&](std::size_t col, std::vector<std::size_t>& out) {
        if (col >= spans.features.size()) {
            throw DataError("FD references a feature missing from the span map");
        }
        const auto& s = spans.features[col];
        const std::size_t begin = include_name_tokens ? s.name_pos : s.value_begin;
        for (std::size_t t = begin; t < s.value_end; ++t) {
            out.push_back(t);
        }
    };
    FdSpans out;
    for (auto c : fd.lhs) {
        range(c, out.lhs_tokens);
    }
    std::sort(out.lhs_tokens.begin(), out.lhs_tokens.end());
    range(fd.rhs, out.rhs_tokens);
    return out;
}

FdSpans spans_for_fd(const SpanMap& spans, const FunctionalDependency& fd, const Schema& schema,
                     bool include_name_tokens) {
    return spans_for_fd(spans, resolve_fd(fd, schema), include_name_tokens);
}

}  // namespace tabgrade
