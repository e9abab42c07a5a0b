#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

namespace tabgrade {

// Raised for malformed input data: bad CSV, schema conflicts, unknown columns.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ColumnKind { Continuous, Integer, Categorical };
enum class TaskKind { Classification, Regression, None };

const char* to_string(ColumnKind kind);
const char* to_string(TaskKind task);
ColumnKind column_kind_from_string(const std::string& s);
TaskKind task_from_string(const std::string& s);

struct Column {
    std::string name;
    ColumnKind kind = ColumnKind::Categorical;

    bool operator==(const Column&) const = default;
};

class Schema {
public:
    Schema() = default;
    explicit Schema(std::vector<Column> columns, std::optional<std::string> target = std::nullopt,
                    TaskKind task = TaskKind::None);

    const std::vector<Column>& columns() const { return columns_; }
    std::size_t size() const { return columns_.size(); }
    const Column& operator[](std::size_t i) const { return columns_[i]; }

    const std::optional<std::string>& target() const { return target_; }
    TaskKind task() const { return task_; }

    std::optional<std::size_t> find(const std::string& name) const;
    // Throws DataError naming the column when absent.
    std::size_t index_of(const std::string& name) const;

    Schema with_target(std::optional<std::string> target, TaskKind task) const;

    bool operator==(const Schema&) const = default;

private:
    std::vector<Column> columns_;
    std::optional<std::string> target_;
    TaskKind task_ = TaskKind::None;
};

nlohmann::json schema_to_json(const Schema& schema);
Schema schema_from_json(const nlohmann::json& doc);
Schema load_schema(const std::filesystem::path& path);

// Missing | Integer | Continuous | Categorical.
using Cell = std::variant<std::monostate, std::int64_t, double, std::string>;
using Row = std::vector<Cell>;

inline bool is_missing(const Cell& c) { return std::holds_alternative<std::monostate>(c); }
// Numeric value of an Integer or Continuous cell.
double numeric_value(const Cell& c);
// Empty text is missing; nullopt when the text does not fit the kind.
std::optional<Cell> parse_cell(const std::string& text, ColumnKind kind);
bool cell_matches(const Cell& c, ColumnKind kind);

class Table {
public:
    Table() = default;
    // Validates arity and cell kinds of every row.
    Table(Schema schema, std::vector<Row> rows);

    const Schema& schema() const { return schema_; }
    const std::vector<Row>& rows() const { return rows_; }
    std::size_t num_rows() const { return rows_.size(); }
    std::size_t num_columns() const { return schema_.size(); }
    bool empty() const { return rows_.empty(); }

    const Cell& at(std::size_t row, std::size_t col) const { return rows_[row][col]; }

    Table select_rows(const std::vector<std::size_t>& indices) const;

private:
    Schema schema_;
    std::vector<Row> rows_;
};

// Reads a comma separated file with a header line. Without a schema the
// column kinds are inferred: Integer if every non-empty cell parses as an
// integer, Continuous if every one parses as a real, otherwise Categorical.
Table load_csv(const std::filesystem::path& path, const std::optional<Schema>& schema = std::nullopt);
Table parse_csv(const std::string& text, const std::optional<Schema>& schema = std::nullopt);

void write_csv(const Table& table, const std::filesystem::path& path);
std::string format_csv(const Table& table);

// Text form of a cell as written to CSV ("" for Missing).
std::string format_cell(const Cell& cell);

// Deterministic shuffle by seed, then the first floor(fraction * N) rows go
// to the training side.
std::pair<Table, Table> split(const Table& table, double train_fraction, std::uint64_t seed);

struct ColumnStats {
    double min = 0.0;
    double max = 0.0;
    double range = 0.0;
    std::vector<std::string> categories;
    std::size_t missing_count = 0;
    // Zero range, or no non-missing values at all.
    bool degenerate = false;
};

ColumnStats column_stats(const Table& table, const std::string& column);
ColumnStats column_stats(const Table& table, std::size_t column);

}  // namespace tabgrade
