#include "tabgrade/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "tabgrade/io.hpp"
#include "tabgrade/learners.hpp"
#include "tabgrade/random.hpp"

namespace tabgrade {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Equality key of a cell; -0.0 and 0.0 compare equal.
std::string cell_key(const Cell& c) {
    if (const auto* d = std::get_if<double>(&c); d && *d == 0.0) return "0.0";
    return format_cell(c);
}

std::string tuple_key(const Row& row, const std::vector<std::size_t>& cols) {
    std::string key;
    for (auto c : cols) {
        key += is_missing(row[c]) ? std::string("\x1e") : cell_key(row[c]);
        key += '\x1f';
    }
    return key;
}

bool is_numeric(ColumnKind k) {
    return k != ColumnKind::Categorical;
}

}  // namespace

void require_same_columns(const Schema& a, const Schema& b) {
    if (a.columns() != b.columns()) {
        std::string msg = "schema mismatch:";
        for (std::size_t i = 0; i < std::max(a.size(), b.size()); ++i) {
            if (i >= a.size() || i >= b.size() || !(a[i] == b[i])) {
                msg += " column " + std::to_string(i) + " differs (" +
                       (i < a.size() ? a[i].name + ":" + to_string(a[i].kind) : std::string("absent")) + " vs " +
                       (i < b.size() ? b[i].name + ":" + to_string(b[i].kind) : std::string("absent")) + ")";
                break;
            }
        }
        throw SchemaMismatch(msg);
    }
}

// ---------------------------------------------------------------------------
// DCR

double row_distance(const Row& a, const Row& b, const Schema& schema, const std::vector<ColumnStats>& stats) {
    double dist = 0.0;
    for (std::size_t c = 0; c < schema.size(); ++c) {
        const bool ma = is_missing(a[c]);
        const bool mb = is_missing(b[c]);
        if (ma || mb) {
            dist += (ma && mb) ? 0.0 : 1.0;
            continue;
        }
        if (!is_numeric(schema[c].kind)) {
            dist += std::get<std::string>(a[c]) == std::get<std::string>(b[c]) ? 0.0 : 1.0;
            continue;
        }
        const double x = numeric_value(a[c]);
        const double y = numeric_value(b[c]);
        if (stats[c].range > 0.0) {
            dist += std::fabs(x - y) / stats[c].range;
        } else {
            dist += x == y ? 0.0 : 1.0;
        }
    }
    return dist;
}

double dcr(const Table& real, const Table& synth, std::size_t threads) {
    require_same_columns(real.schema(), synth.schema());
    if (real.empty() || synth.empty()) {
        throw DataError("dcr needs non-empty tables");
    }
    const Schema& schema = real.schema();
    std::vector<ColumnStats> stats;
    for (std::size_t c = 0; c < schema.size(); ++c) stats.push_back(column_stats(real, c));

    std::vector<double> nearest(synth.num_rows());
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t s = begin; s < synth.num_rows(); s += stride) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& r : real.rows()) {
                best = std::min(best, row_distance(synth.rows()[s], r, schema, stats));
            }
            nearest[s] = best;
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, synth.num_rows()));
    if (workers == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
        for (auto& t : pool) t.join();
    }
    double sum = 0.0;
    for (double v : nearest) sum += v;
    return sum / static_cast<double>(synth.num_rows());
}

// ---------------------------------------------------------------------------
// Correlation error

namespace {

struct Expanded {
    std::vector<std::string> names;
    // Columns of values; NaN marks a missing entry.
    std::vector<std::vector<double>> values;
};

struct ExpandedLayout {
    std::vector<std::string> names;
    std::vector<std::size_t> source;     // schema column
    std::vector<std::string> category;   // empty for numeric
};

ExpandedLayout layout_for(const Table& real, const Table& synth) {
    ExpandedLayout lay;
    const Schema& schema = real.schema();
    for (std::size_t c = 0; c < schema.size(); ++c) {
        if (is_numeric(schema[c].kind)) {
            lay.names.push_back(schema[c].name);
            lay.source.push_back(c);
            lay.category.emplace_back();
            continue;
        }
        std::vector<std::string> cats = column_stats(real, c).categories;
        for (const auto& v : column_stats(synth, c).categories) {
            if (std::find(cats.begin(), cats.end(), v) == cats.end()) cats.push_back(v);
        }
        for (const auto& v : cats) {
            lay.names.push_back(schema[c].name + "=" + v);
            lay.source.push_back(c);
            lay.category.push_back(v);
        }
    }
    return lay;
}

std::vector<std::vector<double>> expand(const Table& t, const ExpandedLayout& lay) {
    std::vector<std::vector<double>> cols(lay.names.size(), std::vector<double>(t.num_rows()));
    for (std::size_t k = 0; k < lay.names.size(); ++k) {
        for (std::size_t r = 0; r < t.num_rows(); ++r) {
            const Cell& c = t.at(r, lay.source[k]);
            if (is_missing(c)) {
                cols[k][r] = kNaN;
            } else if (lay.category[k].empty() && is_numeric(t.schema()[lay.source[k]].kind)) {
                cols[k][r] = numeric_value(c);
            } else {
                cols[k][r] = std::get<std::string>(c) == lay.category[k] ? 1.0 : 0.0;
            }
        }
    }
    return cols;
}

// Pearson over pairwise-complete rows; nullopt when undefined.
std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
    double n = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::isnan(a[i]) || std::isnan(b[i])) continue;
        n += 1.0;
        sa += a[i];
        sb += b[i];
    }
    if (n < 2.0) return std::nullopt;
    const double ma = sa / n, mb = sb / n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::isnan(a[i]) || std::isnan(b[i])) continue;
        const double da = a[i] - ma, db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va <= 0.0 || vb <= 0.0) return std::nullopt;
    return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

Matrix correlation_matrix(const std::vector<std::vector<double>>& cols, std::set<std::size_t>& flagged) {
    const auto k = static_cast<Eigen::Index>(cols.size());
    Matrix m = Matrix::Zero(k, k);
    for (Eigen::Index i = 0; i < k; ++i) {
        for (Eigen::Index j = i; j < k; ++j) {
            const auto r = pearson(cols[static_cast<std::size_t>(i)], cols[static_cast<std::size_t>(j)]);
            if (!r) {
                if (i == j) flagged.insert(static_cast<std::size_t>(i));
                continue;
            }
            m(i, j) = m(j, i) = *r;
        }
    }
    return m;
}

}  // namespace

CorrelationResult correlation_error(const Table& real, const Table& synth, std::size_t bins) {
    require_same_columns(real.schema(), synth.schema());
    if (real.num_rows() < 2 || synth.num_rows() < 2) {
        throw DataError("correlation error needs at least two rows per table");
    }
    if (bins == 0) {
        throw DataError("histogram needs at least one bin");
    }
    const ExpandedLayout lay = layout_for(real, synth);
    std::set<std::size_t> flagged;
    CorrelationResult res;
    res.columns = lay.names;
    res.real_corr = correlation_matrix(expand(real, lay), flagged);
    res.synth_corr = correlation_matrix(expand(synth, lay), flagged);
    res.error = (res.real_corr - res.synth_corr).cwiseAbs();
    for (auto i : flagged) res.zero_variance.push_back(lay.names[i]);
    std::sort(res.zero_variance.begin(), res.zero_variance.end());

    res.counts.assign(bins, 0);
    const double width = 2.0 / static_cast<double>(bins);
    for (std::size_t b = 0; b <= bins; ++b) res.bin_edges.push_back(static_cast<double>(b) * width);
    for (Eigen::Index i = 0; i < res.error.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < res.error.cols(); ++j) {
            const auto b = std::min(bins - 1, static_cast<std::size_t>(res.error(i, j) / width));
            ++res.counts[b];
        }
    }
    return res;
}

nlohmann::json CorrelationResult::to_json() const {
    double mean = 0.0;
    std::size_t pairs = 0;
    for (Eigen::Index i = 0; i < error.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < error.cols(); ++j) {
            mean += error(i, j);
            ++pairs;
        }
    }
    return {{"columns", columns},
            {"bin_edges", bin_edges},
            {"counts", counts},
            {"mean_abs_error", pairs ? mean / static_cast<double>(pairs) : 0.0},
            {"zero_variance_columns", zero_variance}};
}

// ---------------------------------------------------------------------------
// Constraint rules

ConstraintRule make_fd_rule(const FunctionalDependency& fd, const Table& reference) {
    const Schema& schema = reference.schema();
    FdRule rule{fd, {}};
    std::vector<std::size_t> lhs;
    for (const auto& name : fd.lhs) lhs.push_back(schema.index_of(name));
    const std::size_t rhs = schema.index_of(fd.rhs);
    for (const auto& row : reference.rows()) {
        rule.mapping[tuple_key(row, lhs)].insert(tuple_key(row, {rhs}));
    }
    return {fd.to_string(), std::move(rule)};
}

ConstraintRule make_predicate_rule(const std::string& name, const nlohmann::json& params, const Schema& schema) {
    if (name != "numeric_in_box") {
        throw DataError("unknown predicate '" + name + "'");
    }
    nlohmann::json bounds = params.contains("bounds") ? params.at("bounds") : nlohmann::json::array({params});
    if (!bounds.is_array() || bounds.empty()) {
        throw DataError("numeric_in_box needs at least one bound");
    }
    std::string label = "numeric_in_box(";
    for (std::size_t i = 0; i < bounds.size(); ++i) {
        const auto& b = bounds[i];
        if (!b.contains("column") || !b.contains("min") || !b.contains("max")) {
            throw DataError("numeric_in_box bounds need column, min and max");
        }
        const auto col = b.at("column").get<std::string>();
        if (!is_numeric(schema[schema.index_of(col)].kind)) {
            throw DataError("numeric_in_box column '" + col + "' is not numeric");
        }
        if (b.at("min").get<double>() > b.at("max").get<double>()) {
            throw DataError("numeric_in_box bound on '" + col + "' has min above max");
        }
        if (i) label += ", ";
        label += col + " in [" + b.at("min").dump() + ", " + b.at("max").dump() + "]";
    }
    label += ")";
    return {label, PredicateRule{name, {{"bounds", bounds}}}};
}

std::vector<ConstraintRule> rules_from_json(const nlohmann::json& doc, const Table& reference) {
    const nlohmann::json& list = doc.is_object() && doc.contains("rules") ? doc.at("rules") : doc;
    if (!list.is_array()) {
        throw DataError("rules file must hold a list of rules");
    }
    std::vector<ConstraintRule> rules;
    try {
        for (const auto& r : list) {
            if (r.contains("fd")) {
                const auto& f = r.at("fd");
                std::string rhs = f.at("rhs").is_array() ? f.at("rhs").at(0).get<std::string>()
                                                         : f.at("rhs").get<std::string>();
                rules.push_back(make_fd_rule(
                    FunctionalDependency(f.at("lhs").get<std::vector<std::string>>(), std::move(rhs)), reference));
            } else if (r.contains("predicate")) {
                rules.push_back(make_predicate_rule(r.at("predicate").get<std::string>(),
                                                    r.value("params", nlohmann::json::object()), reference.schema()));
            } else {
                throw DataError("rule needs an \"fd\" or \"predicate\" entry: " + r.dump());
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("invalid rule: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("invalid rule: ") + e.what());
    }
    return rules;
}

std::vector<ConstraintRule> load_rules(const std::filesystem::path& path, const Table& reference) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("cannot parse rules file " + path.string() + ": " + e.what());
    }
    return rules_from_json(doc, reference);
}

nlohmann::json ViolationResult::to_json() const {
    nlohmann::json j = {{"rule", rule}, {"violation_pct", pct}, {"violations", violations},
                        {"rows", rows},  {"uncovered", uncovered}};
    if (warning) j["warning"] = *warning;
    return j;
}

std::vector<ViolationResult> violation_rate(const Table& synth, const std::vector<ConstraintRule>& rules) {
    const Schema& schema = synth.schema();
    std::vector<ViolationResult> out;
    for (const auto& rule : rules) {
        ViolationResult res;
        res.rule = rule.label;
        res.rows = synth.num_rows();
        if (const auto* fd = std::get_if<FdRule>(&rule.rule)) {
            std::vector<std::size_t> lhs;
            for (const auto& name : fd->fd.lhs) lhs.push_back(schema.index_of(name));
            const std::size_t rhs = schema.index_of(fd->fd.rhs);
            for (const auto& row : synth.rows()) {
                const auto it = fd->mapping.find(tuple_key(row, lhs));
                if (it == fd->mapping.end()) {
                    ++res.uncovered;
                } else if (!it->second.contains(tuple_key(row, {rhs}))) {
                    ++res.violations;
                }
            }
        } else {
            const auto& pred = std::get<PredicateRule>(rule.rule);
            for (const auto& row : synth.rows()) {
                bool missing = false;
                bool inside = true;
                for (const auto& b : pred.params.at("bounds")) {
                    const Cell& c = row[schema.index_of(b.at("column").get<std::string>())];
                    if (is_missing(c)) {
                        missing = true;
                        continue;
                    }
                    const double v = numeric_value(c);
                    if (v < b.at("min").get<double>() || v > b.at("max").get<double>()) inside = false;
                }
                if (!inside) {
                    ++res.violations;
                } else if (missing) {
                    ++res.uncovered;
                }
            }
        }
        if (res.rows == 0) {
            res.warning = "synthetic table is empty";
        } else {
            res.pct = 100.0 * static_cast<double>(res.violations) / static_cast<double>(res.rows);
        }
        out.push_back(std::move(res));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Machine learning efficiency

const char* to_string(Learner learner) {
    return learner == Learner::DecisionTree ? "decision_tree" : "linear_model";
}

nlohmann::json MleResult::to_json() const {
    return {{"learner", to_string(learner)}, {"task", tabgrade::to_string(task)}, {"metric", metric},
            {"score", score},               {"excluded_rows", excluded_rows},     {"degenerate", degenerate}};
}

MleResult mle(const Table& synth_train, const Table& real_test, Learner learner) {
    require_same_columns(synth_train.schema(), real_test.schema());
    const Schema& schema = synth_train.schema();
    if (!schema.target()) {
        throw DataError("mle needs a target column");
    }
    const std::size_t target = schema.index_of(*schema.target());
    TaskKind task = schema.task();
    if (task == TaskKind::None) {
        task = is_numeric(schema[target].kind) ? TaskKind::Regression : TaskKind::Classification;
    }
    if (task == TaskKind::Regression && !is_numeric(schema[target].kind)) {
        throw DataError("regression target '" + schema[target].name + "' is not numeric");
    }

    auto labelled = [&](const Table& t) {
        std::vector<std::size_t> keep;
        for (std::size_t r = 0; r < t.num_rows(); ++r) {
            if (!is_missing(t.at(r, target))) keep.push_back(r);
        }
        return t.select_rows(keep);
    };
    const Table train = labelled(synth_train);
    const Table test = labelled(real_test);
    if (train.empty() || test.empty()) {
        throw DataError("mle needs labelled rows in both tables");
    }

    std::vector<std::size_t> features;
    for (std::size_t c = 0; c < schema.size(); ++c) {
        if (c != target) features.push_back(c);
    }
    FeatureEncoder enc;
    enc.fit(train, features);
    const Matrix x_train = enc.transform(train);
    const Matrix x_test = enc.transform(test);

    MleResult res;
    res.learner = learner;
    res.task = task;
    if (task == TaskKind::Classification) {
        res.metric = "accuracy";
        std::vector<std::string> classes;
        auto class_of = [&](const Cell& c) -> std::optional<std::size_t> {
            const auto key = cell_key(c);
            const auto it = std::find(classes.begin(), classes.end(), key);
            if (it == classes.end()) return std::nullopt;
            return static_cast<std::size_t>(it - classes.begin());
        };
        std::vector<std::size_t> y;
        for (const auto& row : train.rows()) {
            auto k = class_of(row[target]);
            if (!k) {
                classes.push_back(cell_key(row[target]));
                k = classes.size() - 1;
            }
            y.push_back(*k);
        }
        res.degenerate = classes.size() < 2;
        std::vector<std::size_t> pred;
        if (learner == Learner::DecisionTree) {
            DecisionTree tree(true, kTreeMaxDepth);
            tree.fit(x_train, std::vector<double>(y.begin(), y.end()), classes.size());
            for (double p : tree.predict(x_test)) pred.push_back(static_cast<std::size_t>(p));
        } else {
            LogisticRegression lr(kLinearMaxIter);
            lr.fit(x_train, y, classes.size());
            pred = lr.predict(x_test);
        }
        std::size_t correct = 0;
        for (std::size_t r = 0; r < test.num_rows(); ++r) {
            const auto k = class_of(test.at(r, target));
            if (k && *k == pred[r]) ++correct;
        }
        res.score = static_cast<double>(correct) / static_cast<double>(test.num_rows());
        return res;
    }

    res.metric = "mape";
    std::vector<double> y;
    for (const auto& row : train.rows()) y.push_back(numeric_value(row[target]));
    std::vector<double> pred;
    if (learner == Learner::DecisionTree) {
        DecisionTree tree(false, kTreeMaxDepth);
        tree.fit(x_train, y);
        pred = tree.predict(x_test);
    } else {
        LinearRegression lr(kLinearMaxIter);
        lr.fit(x_train, y);
        pred = lr.predict(x_test);
    }
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t r = 0; r < test.num_rows(); ++r) {
        const double truth = numeric_value(test.at(r, target));
        if (truth == 0.0) {
            ++res.excluded_rows;
            continue;
        }
        sum += std::fabs(truth - pred[r]) / std::fabs(truth);
        ++used;
    }
    if (used == 0) {
        throw DataError("every test target is zero; MAPE is undefined");
    }
    res.score = sum / static_cast<double>(used);
    return res;
}

// ---------------------------------------------------------------------------
// Discriminator

DiscriminatorResult discriminator(const Table& real, const Table& synth, std::size_t folds, std::uint64_t seed) {
    require_same_columns(real.schema(), synth.schema());
    const std::size_t n = real.num_rows() + synth.num_rows();
    if (folds < 2 || real.empty() || synth.empty() || n < folds) {
        throw DataError("discriminator needs at least 2 folds, rows in both tables and at least one row per fold");
    }
    std::vector<Row> rows = real.rows();
    rows.insert(rows.end(), synth.rows().begin(), synth.rows().end());
    const Table pooled(Schema(real.schema().columns()), std::move(rows));
    std::vector<std::size_t> labels(n, 0);
    for (std::size_t i = real.num_rows(); i < n; ++i) labels[i] = 1;

    // Stratified assignment: each class is shuffled and dealt round-robin,
    // the counter carrying over between classes.
    Rng rng(seed);
    std::vector<std::size_t> fold_of(n);
    std::size_t counter = 0;
    for (std::size_t cls = 0; cls < 2; ++cls) {
        const std::size_t begin = cls == 0 ? 0 : real.num_rows();
        const std::size_t count = cls == 0 ? real.num_rows() : synth.num_rows();
        for (auto p : rng.permutation(count)) fold_of[begin + p] = counter++ % folds;
    }

    std::vector<std::size_t> all_columns(pooled.num_columns());
    for (std::size_t c = 0; c < all_columns.size(); ++c) all_columns[c] = c;

    DiscriminatorResult res;
    double total = 0.0;
    for (std::size_t f = 0; f < folds; ++f) {
        std::vector<std::size_t> train_idx, test_idx;
        for (std::size_t i = 0; i < n; ++i) (fold_of[i] == f ? test_idx : train_idx).push_back(i);
        if (test_idx.empty()) continue;
        const Table train = pooled.select_rows(train_idx);
        const Table test = pooled.select_rows(test_idx);
        FeatureEncoder enc;
        enc.fit(train, all_columns);
        std::vector<std::size_t> y;
        for (auto i : train_idx) y.push_back(labels[i]);
        LogisticRegression lr(kLinearMaxIter);
        lr.fit(enc.transform(train), y, 2);
        const auto pred = lr.predict(enc.transform(test));
        std::size_t correct = 0;
        for (std::size_t k = 0; k < test_idx.size(); ++k) {
            if (pred[k] == labels[test_idx[k]]) ++correct;
        }
        const double acc = static_cast<double>(correct) / static_cast<double>(test_idx.size());
        res.fold_accuracy.push_back(acc);
        total += acc;
    }
    res.accuracy = total / static_cast<double>(res.fold_accuracy.size());
    return res;
}

double discriminator_score(const Table& real, const Table& synth, std::size_t folds, std::uint64_t seed) {
    return discriminator(real, synth, folds, seed).accuracy;
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    if (dcr) j["dcr"] = *dcr;
    if (correlation) j["correlation_error"] = correlation->to_json();
    if (violations) {
        nlohmann::json v = nlohmann::json::array();
        for (const auto& r : *violations) v.push_back(r.to_json());
        j["violation_pct"] = v;
    }
    if (mle) {
        nlohmann::json v = nlohmann::json::array();
        for (const auto& r : *mle) v.push_back(r.to_json());
        j["mle"] = v;
    }
    if (discriminator) {
        j["discriminator_accuracy"] = discriminator->accuracy;
        j["discriminator_fold_accuracy"] = discriminator->fold_accuracy;
    }
    return j;
}

}  // namespace tabgrade
