#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tabgrade/table.hpp"

namespace tabgrade {

// lhs -> rhs with a single dependent column. lhs is kept sorted by name.
struct FunctionalDependency {
    std::vector<std::string> lhs;
    std::string rhs;

    FunctionalDependency() = default;
    FunctionalDependency(std::vector<std::string> lhs, std::string rhs);

    bool operator==(const FunctionalDependency&) const = default;
    // Canonical order: lhs size, then lhs lexicographically, then rhs.
    bool operator<(const FunctionalDependency& other) const;

    std::string to_string() const;
};

enum class FdAlgorithm { Tane, HyFd, BruteForce };
const char* to_string(FdAlgorithm algo);

struct FdSet {
    std::vector<FunctionalDependency> fds;  // canonically sorted
    bool minimal = true;
    FdAlgorithm algorithm = FdAlgorithm::Tane;
    std::size_t max_lhs_size = 4;
    std::uint64_t seed = 0;

    // Same dependencies, ignoring provenance fields.
    bool same_fds(const FdSet& other) const { return fds == other.fds; }
    // Drops empty-lhs (constant column) dependencies.
    FdSet without_empty_lhs() const;
};

nlohmann::json fdset_to_json(const FdSet& set);
FdSet fdset_from_json(const nlohmann::json& doc);
FdSet load_fdset(const std::filesystem::path& path);
void save_fdset(const FdSet& set, const std::filesystem::path& path);

// Equivalence classes of rows with equal values over some column set;
// singleton classes are removed. Classes are ordered by their smallest row
// index and indices inside a class are ascending, so two partitions of the
// same table compare equal iff they describe the same grouping.
struct StrippedPartition {
    std::vector<std::vector<std::size_t>> classes;
    std::size_t row_count = 0;

    // Sum of (|c| - 1): rows removable before the column set becomes a key.
    std::size_t error() const;
    bool operator==(const StrippedPartition&) const = default;
};

// Per-column dictionary codes; Missing is a value of its own.
class EncodedTable {
public:
    explicit EncodedTable(const Table& table);

    std::size_t num_rows() const { return num_rows_; }
    std::size_t num_columns() const { return codes_.size(); }
    const std::vector<std::uint32_t>& column(std::size_t c) const { return codes_[c]; }
    std::uint32_t code(std::size_t row, std::size_t col) const { return codes_[col][row]; }

private:
    std::vector<std::vector<std::uint32_t>> codes_;
    std::size_t num_rows_ = 0;
};

StrippedPartition compute_partition(const Table& table, const std::vector<std::string>& columns);
StrippedPartition compute_partition(const EncodedTable& table, const std::vector<std::size_t>& columns);

// Product partition via probe table.
StrippedPartition refine(const StrippedPartition& p, const StrippedPartition& q);

// True iff every lhs class is constant on rhs. With error_threshold > 0 the
// dependency is accepted when the fraction of rows that must be removed for
// it to hold exactly (the g3 measure) does not exceed the threshold.
bool fd_holds(const Table& table, const std::vector<std::string>& lhs, const std::string& rhs,
              double error_threshold = 0.0);

FdSet tane_discover(const Table& table, std::size_t max_lhs_size = 4);
FdSet hyfd_discover(const Table& table, std::size_t max_lhs_size = 4, std::size_t sample_pairs = 64,
                    std::uint64_t seed = 0);
// Exhaustive enumeration; guarded to at most 8 columns.
FdSet bruteforce_discover(const Table& table, std::size_t max_lhs_size = 4);

}  // namespace tabgrade
