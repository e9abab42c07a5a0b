#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "tabgrade/fd.hpp"
#include "tabgrade/model.hpp"
#include "tabgrade/table.hpp"

namespace tabgrade {

// The real and synthetic tables do not share column names and kinds.
class SchemaMismatch : public DataError {
public:
    using DataError::DataError;
};

void require_same_columns(const Schema& a, const Schema& b);

// Mixed L1 distance between two rows: |a - b| / range for numeric columns
// (0/1 for a degenerate range), 0/1 for categorical ones. Missing matches
// only missing.
double row_distance(const Row& a, const Row& b, const Schema& schema, const std::vector<ColumnStats>& stats);

// Mean over synthetic rows of the distance to the closest real row.
double dcr(const Table& real, const Table& synth, std::size_t threads = 1);

struct CorrelationResult {
    std::vector<std::string> columns;  // expanded: numeric names and "name=value" indicators
    Matrix real_corr;
    Matrix synth_corr;
    Matrix error;                      // |real - synth|
    std::vector<double> bin_edges;     // bins + 1 edges over [0, 2]
    std::vector<std::size_t> counts;   // over pairs i < j
    std::vector<std::string> zero_variance;  // flagged columns, either table

    nlohmann::json to_json() const;
};

CorrelationResult correlation_error(const Table& real, const Table& synth, std::size_t bins = 50);

struct FdRule {
    FunctionalDependency fd;
    // Rendered lhs tuple to the rhs values observed in the reference table.
    std::map<std::string, std::set<std::string>> mapping;
};

// "numeric_in_box": each bounded column must lie in [min, max].
struct PredicateRule {
    std::string name;
    nlohmann::json params;
};

struct ConstraintRule {
    std::string label;
    std::variant<FdRule, PredicateRule> rule;
};

ConstraintRule make_fd_rule(const FunctionalDependency& fd, const Table& reference);
ConstraintRule make_predicate_rule(const std::string& name, const nlohmann::json& params, const Schema& schema);
// [{"fd": {"lhs": [...], "rhs": "..."}}, {"predicate": "numeric_in_box", "params": {...}}]
std::vector<ConstraintRule> rules_from_json(const nlohmann::json& doc, const Table& reference);
std::vector<ConstraintRule> load_rules(const std::filesystem::path& path, const Table& reference);

struct ViolationResult {
    std::string rule;
    double pct = 0.0;
    std::size_t violations = 0;
    std::size_t rows = 0;
    // Rows the rule could not judge (unseen lhs tuple, missing bounded value).
    std::size_t uncovered = 0;
    std::optional<std::string> warning;

    nlohmann::json to_json() const;
};

std::vector<ViolationResult> violation_rate(const Table& synth, const std::vector<ConstraintRule>& rules);

enum class Learner { DecisionTree, LinearModel };
const char* to_string(Learner learner);

struct MleResult {
    Learner learner = Learner::DecisionTree;
    TaskKind task = TaskKind::Classification;
    std::string metric;  // "accuracy" or "mape"
    double score = 0.0;
    std::size_t excluded_rows = 0;  // zero-valued targets left out of MAPE
    bool degenerate = false;        // single-class training set

    nlohmann::json to_json() const;
};

inline constexpr std::size_t kTreeMaxDepth = 20;
inline constexpr std::size_t kLinearMaxIter = 500;

// Train on synth_train, score on real_test. The target and task come from
// the synth_train schema.
MleResult mle(const Table& synth_train, const Table& real_test, Learner learner);

struct DiscriminatorResult {
    double accuracy = 0.0;
    std::vector<double> fold_accuracy;
};

// Real rows labelled 0, synthetic rows 1, stratified k-fold, logistic model.
DiscriminatorResult discriminator(const Table& real, const Table& synth, std::size_t folds, std::uint64_t seed);
double discriminator_score(const Table& real, const Table& synth, std::size_t folds = 5, std::uint64_t seed = 0);

struct MetricReport {
    std::optional<double> dcr;
    std::optional<CorrelationResult> correlation;
    std::optional<std::vector<ViolationResult>> violations;
    std::optional<std::vector<MleResult>> mle;
    std::optional<DiscriminatorResult> discriminator;

    nlohmann::json to_json() const;
};

}  // namespace tabgrade
