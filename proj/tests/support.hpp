#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "tabgrade/fd.hpp"
#include "tabgrade/random.hpp"
#include "tabgrade/table.hpp"

namespace tabgrade::testing {

// A uniform over 8 values, B uniform over 4, C a fixed function of (A, B).
inline Table planted_table(std::size_t rows, std::uint64_t seed) {
    static const char* a_vals[] = {"a0", "a1", "a2", "a3", "a4", "a5", "a6", "a7"};
    static const char* b_vals[] = {"b0", "b1", "b2", "b3"};
    static const char* c_vals[] = {"c0", "c1", "c2", "c3", "c4"};
    Schema schema({{"A", ColumnKind::Categorical}, {"B", ColumnKind::Categorical}, {"C", ColumnKind::Categorical}});
    Rng rng(seed);
    std::vector<Row> out;
    for (std::size_t r = 0; r < rows; ++r) {
        const auto a = rng.uniform_index(8);
        const auto b = rng.uniform_index(4);
        const auto c = (a * 3 + b * 5 + (a * b) % 3) % 5;
        out.push_back({std::string(a_vals[a]), std::string(b_vals[b]), std::string(c_vals[c])});
    }
    return Table(schema, std::move(out));
}

// Mixed-kind table with small domains so that dependencies occur often.
inline Table random_table(Rng& rng, std::size_t max_cols, std::size_t max_rows) {
    const std::size_t cols = 1 + rng.uniform_index(max_cols);
    const std::size_t rows = 1 + rng.uniform_index(max_rows);
    std::vector<Column> columns;
    std::vector<std::size_t> domain;
    for (std::size_t c = 0; c < cols; ++c) {
        const auto kind = static_cast<ColumnKind>(rng.uniform_index(3));
        columns.push_back({"c" + std::to_string(c), kind});
        domain.push_back(1 + rng.uniform_index(rows < 4 ? 3 : 6));
    }
    std::vector<Row> data;
    for (std::size_t r = 0; r < rows; ++r) {
        Row row;
        for (std::size_t c = 0; c < cols; ++c) {
            const auto v = rng.uniform_index(domain[c]);
            if (rng.uniform_index(20) == 0) {
                row.emplace_back();
                continue;
            }
            switch (columns[c].kind) {
                case ColumnKind::Integer: row.emplace_back(static_cast<std::int64_t>(v) - 2); break;
                case ColumnKind::Continuous: row.emplace_back(static_cast<double>(v) * 0.25 - 0.5); break;
                case ColumnKind::Categorical: row.emplace_back("v" + std::to_string(v)); break;
            }
        }
        data.push_back(std::move(row));
    }
    return Table(Schema(columns), std::move(data));
}

// Direct double loop with its own per-cell rule.
inline double brute_dcr(const Table& real, const Table& synth) {
    const std::size_t cols = real.num_columns();
    std::vector<double> lo(cols, 0.0), hi(cols, 0.0);
    std::vector<bool> seen(cols, false);
    for (const auto& r : real.rows()) {
        for (std::size_t c = 0; c < cols; ++c) {
            if (is_missing(r[c]) || real.schema()[c].kind == ColumnKind::Categorical) continue;
            const double v = numeric_value(r[c]);
            lo[c] = seen[c] ? std::min(lo[c], v) : v;
            hi[c] = seen[c] ? std::max(hi[c], v) : v;
            seen[c] = true;
        }
    }
    double total = 0.0;
    for (const auto& s : synth.rows()) {
        double best = INFINITY;
        for (const auto& r : real.rows()) {
            double d = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                if (is_missing(s[c]) || is_missing(r[c])) {
                    d += is_missing(s[c]) && is_missing(r[c]) ? 0.0 : 1.0;
                } else if (real.schema()[c].kind == ColumnKind::Categorical) {
                    d += s[c] == r[c] ? 0.0 : 1.0;
                } else {
                    const double range = hi[c] - lo[c];
                    const double diff = std::fabs(numeric_value(s[c]) - numeric_value(r[c]));
                    d += range > 0.0 ? diff / range : (diff == 0.0 ? 0.0 : 1.0);
                }
            }
            best = std::min(best, d);
        }
        total += best;
    }
    return total / static_cast<double>(synth.num_rows());
}

inline std::vector<std::string> fd_strings(const FdSet& set) {
    std::vector<std::string> out;
    for (const auto& fd : set.fds) out.push_back(fd.to_string());
    return out;
}

}  // namespace tabgrade::testing
