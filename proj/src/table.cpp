#include "tabgrade/table.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <set>
#include <unordered_set>

#include "tabgrade/io.hpp"
#include "tabgrade/random.hpp"

namespace tabgrade {

const char* to_string(ColumnKind kind) {
    switch (kind) {
        case ColumnKind::Continuous: return "continuous";
        case ColumnKind::Integer: return "integer";
        case ColumnKind::Categorical: return "categorical";
    }
    return "categorical";
}

const char* to_string(TaskKind task) {
    switch (task) {
        case TaskKind::Classification: return "classification";
        case TaskKind::Regression: return "regression";
        case TaskKind::None: return "none";
    }
    return "none";
}

ColumnKind column_kind_from_string(const std::string& s) {
    if (s == "continuous") return ColumnKind::Continuous;
    if (s == "integer") return ColumnKind::Integer;
    if (s == "categorical") return ColumnKind::Categorical;
    throw DataError("unknown column type '" + s + "'");
}

TaskKind task_from_string(const std::string& s) {
    if (s == "classification") return TaskKind::Classification;
    if (s == "regression") return TaskKind::Regression;
    if (s == "none" || s.empty()) return TaskKind::None;
    throw DataError("unknown task '" + s + "'");
}

// ---------------------------------------------------------------------------
// Schema

Schema::Schema(std::vector<Column> columns, std::optional<std::string> target, TaskKind task)
    : columns_(std::move(columns)), target_(std::move(target)), task_(task) {
    std::unordered_set<std::string> seen;
    for (const auto& c : columns_) {
        if (c.name.empty()) {
            throw DataError("empty column name");
        }
        if (!seen.insert(c.name).second) {
            throw DataError("duplicate column name '" + c.name + "'");
        }
    }
    if (target_ && !seen.contains(*target_)) {
        throw DataError("target column '" + *target_ + "' not in schema");
    }
}

std::optional<std::size_t> Schema::find(const std::string& name) const {
    for (std::size_t i = 0; i < columns_.size(); ++i) {
        if (columns_[i].name == name) {
            return i;
        }
    }
    return std::nullopt;
}

std::size_t Schema::index_of(const std::string& name) const {
    if (auto i = find(name)) {
        return *i;
    }
    throw DataError("unknown column '" + name + "'");
}

Schema Schema::with_target(std::optional<std::string> target, TaskKind task) const {
    return Schema(columns_, std::move(target), task);
}

nlohmann::json schema_to_json(const Schema& schema) {
    nlohmann::json cols = nlohmann::json::array();
    for (const auto& c : schema.columns()) {
        cols.push_back({{"name", c.name}, {"type", to_string(c.kind)}});
    }
    nlohmann::json doc = {{"columns", cols}, {"task", to_string(schema.task())}};
    doc["target"] = schema.target() ? nlohmann::json(*schema.target()) : nlohmann::json(nullptr);
    return doc;
}

Schema schema_from_json(const nlohmann::json& doc) {
    try {
        std::vector<Column> cols;
        for (const auto& c : doc.at("columns")) {
            cols.push_back({c.at("name").get<std::string>(),
                            column_kind_from_string(c.at("type").get<std::string>())});
        }
        std::optional<std::string> target;
        if (doc.contains("target") && !doc["target"].is_null()) {
            target = doc["target"].get<std::string>();
        }
        TaskKind task = TaskKind::None;
        if (doc.contains("task") && !doc["task"].is_null()) {
            task = task_from_string(doc["task"].get<std::string>());
        }
        return Schema(std::move(cols), std::move(target), task);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("invalid schema document: ") + e.what());
    }
}

Schema load_schema(const std::filesystem::path& path) {
    try {
        return schema_from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("invalid schema JSON in " + path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Cells and tables

double numeric_value(const Cell& c) {
    if (const auto* i = std::get_if<std::int64_t>(&c)) {
        return static_cast<double>(*i);
    }
    if (const auto* d = std::get_if<double>(&c)) {
        return *d;
    }
    throw DataError("cell is not numeric");
}

bool cell_matches(const Cell& c, ColumnKind kind) {
    if (is_missing(c)) {
        return true;
    }
    switch (kind) {
        case ColumnKind::Integer: return std::holds_alternative<std::int64_t>(c);
        case ColumnKind::Continuous: return std::holds_alternative<double>(c);
        case ColumnKind::Categorical: return std::holds_alternative<std::string>(c);
    }
    return false;
}

Table::Table(Schema schema, std::vector<Row> rows) : schema_(std::move(schema)), rows_(std::move(rows)) {
    for (std::size_t r = 0; r < rows_.size(); ++r) {
        if (rows_[r].size() != schema_.size()) {
            throw DataError("row " + std::to_string(r) + " has " + std::to_string(rows_[r].size()) +
                            " cells, schema has " + std::to_string(schema_.size()));
        }
        for (std::size_t c = 0; c < schema_.size(); ++c) {
            if (!cell_matches(rows_[r][c], schema_[c].kind)) {
                throw DataError("row " + std::to_string(r) + ": cell kind does not match column '" +
                                schema_[c].name + "'");
            }
        }
    }
}

Table Table::select_rows(const std::vector<std::size_t>& indices) const {
    std::vector<Row> out;
    out.reserve(indices.size());
    for (auto i : indices) {
        out.push_back(rows_.at(i));
    }
    return Table(schema_, std::move(out));
}

// ---------------------------------------------------------------------------
// CSV

namespace {

struct Record {
    std::vector<std::string> fields;
    std::size_t line = 0;
};

std::vector<Record> split_records(const std::string& text) {
    std::vector<Record> records;
    std::size_t pos = 0;
    std::size_t line = 0;
    while (pos < text.size()) {
        ++line;
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) {
            end = text.size();
        }
        std::string_view ln(text.data() + pos, end - pos);
        if (!ln.empty() && ln.back() == '\r') {
            ln.remove_suffix(1);
        }
        Record rec;
        rec.line = line;
        std::string field;
        bool quoted = false;
        for (std::size_t i = 0; i < ln.size(); ++i) {
            const char ch = ln[i];
            if (quoted) {
                if (ch == '"') {
                    if (i + 1 < ln.size() && ln[i + 1] == '"') {
                        field.push_back('"');
                        ++i;
                    } else {
                        quoted = false;
                    }
                } else {
                    field.push_back(ch);
                }
            } else if (ch == '"') {
                quoted = true;
            } else if (ch == ',') {
                rec.fields.push_back(std::move(field));
                field.clear();
            } else {
                field.push_back(ch);
            }
        }
        if (quoted) {
            throw DataError("unterminated quote at line " + std::to_string(line));
        }
        rec.fields.push_back(std::move(field));
        records.push_back(std::move(rec));
        pos = end + 1;
    }
    return records;
}

std::optional<std::int64_t> parse_int(std::string_view s) {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
        return std::nullopt;
    }
    return v;
}

std::optional<double> parse_real(std::string_view s) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty() || !std::isfinite(v)) {
        return std::nullopt;
    }
    return v;
}

}  // namespace

std::optional<Cell> parse_cell(const std::string& text, ColumnKind kind) {
    if (text.empty()) {
        return Cell{};
    }
    switch (kind) {
        case ColumnKind::Integer:
            if (auto v = parse_int(text)) return Cell{*v};
            return std::nullopt;
        case ColumnKind::Continuous:
            if (auto v = parse_real(text)) return Cell{*v};
            return std::nullopt;
        case ColumnKind::Categorical:
            return Cell{text};
    }
    return std::nullopt;
}

namespace {

ColumnKind infer_kind(const std::vector<Record>& records, std::size_t col) {
    bool all_int = true;
    bool all_real = true;
    bool any = false;
    for (std::size_t r = 1; r < records.size(); ++r) {
        const std::string& s = records[r].fields[col];
        if (s.empty()) {
            continue;
        }
        any = true;
        if (all_int && !parse_int(s)) {
            all_int = false;
        }
        if (all_real && !parse_real(s)) {
            all_real = false;
        }
        if (!all_real) {
            break;
        }
    }
    if (!any) {
        return ColumnKind::Categorical;
    }
    if (all_int) {
        return ColumnKind::Integer;
    }
    return all_real ? ColumnKind::Continuous : ColumnKind::Categorical;
}

std::string quote_field(const std::string& s) {
    if (s.find_first_of(",\"") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += "\"\"";
        } else {
            out.push_back(c);
        }
    }
    out.push_back('"');
    return out;
}

}  // namespace

Table parse_csv(const std::string& text, const std::optional<Schema>& schema) {
    auto records = split_records(text);
    if (records.empty()) {
        throw DataError("CSV input has no header");
    }
    const auto& header = records.front().fields;
    for (const auto& rec : records) {
        if (rec.fields.size() != header.size()) {
            throw DataError("ragged row at line " + std::to_string(rec.line) + ": expected " +
                            std::to_string(header.size()) + " fields, found " +
                            std::to_string(rec.fields.size()));
        }
        for (const auto& f : rec.fields) {
            if (f.find('\n') != std::string::npos) {
                throw DataError("embedded newline at line " + std::to_string(rec.line));
            }
        }
    }

    Schema resolved;
    if (schema) {
        if (schema->size() != header.size()) {
            throw DataError("header has " + std::to_string(header.size()) + " columns, schema has " +
                            std::to_string(schema->size()));
        }
        for (std::size_t c = 0; c < header.size(); ++c) {
            if ((*schema)[c].name != header[c]) {
                throw DataError("header column '" + header[c] + "' does not match schema column '" +
                                (*schema)[c].name + "'");
            }
        }
        resolved = *schema;
    } else {
        std::vector<Column> cols;
        for (std::size_t c = 0; c < header.size(); ++c) {
            cols.push_back({header[c], infer_kind(records, c)});
        }
        resolved = Schema(std::move(cols));
    }

    std::vector<Row> rows;
    rows.reserve(records.size() - 1);
    for (std::size_t r = 1; r < records.size(); ++r) {
        Row row;
        row.reserve(header.size());
        for (std::size_t c = 0; c < header.size(); ++c) {
            auto cell = parse_cell(records[r].fields[c], resolved[c].kind);
            if (!cell) {
                throw DataError("type conflict in column '" + resolved[c].name + "' at line " +
                                std::to_string(records[r].line) + ": '" + records[r].fields[c] +
                                "' is not " + to_string(resolved[c].kind));
            }
            row.push_back(std::move(*cell));
        }
        rows.push_back(std::move(row));
    }
    return Table(std::move(resolved), std::move(rows));
}

Table load_csv(const std::filesystem::path& path, const std::optional<Schema>& schema) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::runtime_error& e) {
        throw DataError(e.what());
    }
    return parse_csv(text, schema);
}

std::string format_cell(const Cell& cell) {
    if (const auto* i = std::get_if<std::int64_t>(&cell)) {
        return std::to_string(*i);
    }
    if (const auto* d = std::get_if<double>(&cell)) {
        char buf[64];
        auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), *d);
        std::string s(buf, p);
        // Keep continuous values distinguishable from integers on re-read.
        if (s.find_first_of(".e") == std::string::npos) {
            s += ".0";
        }
        return s;
    }
    if (const auto* s = std::get_if<std::string>(&cell)) {
        return *s;
    }
    return {};
}

std::string format_csv(const Table& table) {
    std::string out;
    const auto& cols = table.schema().columns();
    for (std::size_t c = 0; c < cols.size(); ++c) {
        if (c) out.push_back(',');
        out += quote_field(cols[c].name);
    }
    out.push_back('\n');
    for (const auto& row : table.rows()) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) out.push_back(',');
            out += quote_field(format_cell(row[c]));
        }
        out.push_back('\n');
    }
    return out;
}

void write_csv(const Table& table, const std::filesystem::path& path) {
    write_file_atomic(path, format_csv(table));
}

// ---------------------------------------------------------------------------
// Split and statistics

std::pair<Table, Table> split(const Table& table, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw DataError("train fraction must lie in (0, 1)");
    }
    if (table.empty()) {
        throw DataError("cannot split an empty table");
    }
    Rng rng(seed);
    auto order = rng.permutation(table.num_rows());
    const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(table.num_rows())));
    std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> test_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    return {table.select_rows(train_idx), table.select_rows(test_idx)};
}

ColumnStats column_stats(const Table& table, const std::string& column) {
    return column_stats(table, table.schema().index_of(column));
}

ColumnStats column_stats(const Table& table, std::size_t column) {
    ColumnStats stats;
    const ColumnKind kind = table.schema()[column].kind;
    std::size_t present = 0;
    if (kind == ColumnKind::Categorical) {
        std::unordered_set<std::string> seen;
        for (const auto& row : table.rows()) {
            const Cell& c = row[column];
            if (is_missing(c)) {
                ++stats.missing_count;
                continue;
            }
            ++present;
            const auto& s = std::get<std::string>(c);
            if (seen.insert(s).second) {
                stats.categories.push_back(s);
            }
        }
        stats.degenerate = present == 0;
        return stats;
    }
    stats.min = std::numeric_limits<double>::infinity();
    stats.max = -std::numeric_limits<double>::infinity();
    for (const auto& row : table.rows()) {
        const Cell& c = row[column];
        if (is_missing(c)) {
            ++stats.missing_count;
            continue;
        }
        ++present;
        const double v = numeric_value(c);
        stats.min = std::min(stats.min, v);
        stats.max = std::max(stats.max, v);
    }
    if (present == 0) {
        stats.min = stats.max = 0.0;
        stats.degenerate = true;
    }
    stats.range = stats.max - stats.min;
    if (stats.range <= 0.0) {
        stats.degenerate = true;
    }
    return stats;
}

}  // namespace tabgrade
