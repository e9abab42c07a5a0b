#include "tabgrade/learners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tabgrade {

namespace {

Matrix with_bias(const Matrix& x) {
    Matrix out(x.rows(), x.cols() + 1);
    out.leftCols(x.cols()) = x;
    out.col(x.cols()).setOnes();
    return out;
}

}  // namespace

void FeatureEncoder::fit(const Table& table, const std::vector<std::size_t>& columns) {
    slots_.clear();
    width_ = 0;
    for (auto col : columns) {
        Slot s;
        s.column = col;
        s.offset = width_;
        if (table.schema()[col].kind == ColumnKind::Categorical) {
            s.categorical = true;
            s.categories = column_stats(table, col).categories;
            width_ += s.categories.size();
        } else {
            double sum = 0.0;
            std::size_t n = 0;
            for (const auto& row : table.rows()) {
                if (is_missing(row[col])) continue;
                sum += numeric_value(row[col]);
                ++n;
            }
            s.mean = n ? sum / static_cast<double>(n) : 0.0;
            double ss = 0.0;
            for (const auto& row : table.rows()) {
                if (is_missing(row[col])) continue;
                const double dv = numeric_value(row[col]) - s.mean;
                ss += dv * dv;
            }
            const double sd = n ? std::sqrt(ss / static_cast<double>(n)) : 0.0;
            s.scale = sd > 0.0 ? sd : 1.0;
            width_ += 1;
        }
        slots_.push_back(std::move(s));
    }
}

Matrix FeatureEncoder::transform(const Table& table) const {
    Matrix x = Matrix::Zero(static_cast<Eigen::Index>(table.num_rows()), static_cast<Eigen::Index>(width_));
    for (std::size_t r = 0; r < table.num_rows(); ++r) {
        const auto row = static_cast<Eigen::Index>(r);
        for (const auto& s : slots_) {
            const Cell& c = table.at(r, s.column);
            if (is_missing(c)) continue;
            if (s.categorical) {
                const auto& v = std::get<std::string>(c);
                const auto it = std::find(s.categories.begin(), s.categories.end(), v);
                if (it != s.categories.end()) {
                    x(row, static_cast<Eigen::Index>(s.offset + static_cast<std::size_t>(it - s.categories.begin()))) =
                        1.0;
                }
            } else {
                x(row, static_cast<Eigen::Index>(s.offset)) = (numeric_value(c) - s.mean) / s.scale;
            }
        }
    }
    return x;
}

double power_iteration(const Matrix& a, std::size_t iterations) {
    if (a.rows() == 0) return 0.0;
    Eigen::VectorXd v = Eigen::VectorXd::Ones(a.rows()).normalized();
    double lambda = 0.0;
    for (std::size_t i = 0; i < iterations; ++i) {
        Eigen::VectorXd w = a * v;
        const double norm = w.norm();
        if (norm == 0.0) return 0.0;
        lambda = norm;
        v = w / norm;
    }
    return lambda;
}

// ---------------------------------------------------------------------------
// CART

void DecisionTree::fit(const Matrix& x, const std::vector<double>& y, std::size_t n_classes) {
    if (static_cast<std::size_t>(x.rows()) != y.size() || y.empty()) {
        throw DataError("decision tree needs one target per non-empty row set");
    }
    n_classes_ = n_classes;
    nodes_.clear();
    std::vector<std::size_t> idx(y.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    build(x, y, idx, 0);
}

double DecisionTree::leaf_value(const std::vector<double>& y, const std::vector<std::size_t>& idx) const {
    if (classification_) {
        std::vector<std::size_t> counts(n_classes_, 0);
        for (auto i : idx) ++counts[static_cast<std::size_t>(y[i])];
        return static_cast<double>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
    double sum = 0.0;
    for (auto i : idx) sum += y[i];
    return sum / static_cast<double>(idx.size());
}

int DecisionTree::build(const Matrix& x, const std::vector<double>& y, std::vector<std::size_t>& idx,
                        std::size_t depth) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{});
    nodes_[static_cast<std::size_t>(id)].value = leaf_value(y, idx);
    nodes_[static_cast<std::size_t>(id)].depth = depth;
    const std::size_t n = idx.size();
    if (depth >= max_depth_ || n < 2) return id;

    // Impurity as a sum over the node (n * gini or sum of squared deviations).
    auto impurity_from = [&](const std::vector<double>& counts, double cnt, double sum, double sumsq) {
        if (cnt == 0.0) return 0.0;
        if (classification_) {
            double s = 0.0;
            for (double c : counts) s += c * c;
            return cnt - s / cnt;
        }
        return sumsq - sum * sum / cnt;
    };

    std::vector<double> total_counts(n_classes_, 0.0);
    double total_sum = 0.0, total_sq = 0.0;
    for (auto i : idx) {
        if (classification_) total_counts[static_cast<std::size_t>(y[i])] += 1.0;
        total_sum += y[i];
        total_sq += y[i] * y[i];
    }
    const double parent = impurity_from(total_counts, static_cast<double>(n), total_sum, total_sq);
    if (parent <= 1e-12) return id;

    // Zero-gain splits are allowed on impure nodes so that XOR-like
    // structure can still be separated one level further down.
    double best_gain = -1.0;
    int best_feature = -1;
    double best_threshold = 0.0;
    std::vector<std::size_t> order = idx;
    for (Eigen::Index f = 0; f < x.cols(); ++f) {
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return x(static_cast<Eigen::Index>(a), f) < x(static_cast<Eigen::Index>(b), f) ||
                   (x(static_cast<Eigen::Index>(a), f) == x(static_cast<Eigen::Index>(b), f) && a < b);
        });
        std::vector<double> left_counts(n_classes_, 0.0);
        double ls = 0.0, lsq = 0.0;
        for (std::size_t k = 0; k + 1 < n; ++k) {
            const double yk = y[order[k]];
            if (classification_) left_counts[static_cast<std::size_t>(yk)] += 1.0;
            ls += yk;
            lsq += yk * yk;
            const double a = x(static_cast<Eigen::Index>(order[k]), f);
            const double b = x(static_cast<Eigen::Index>(order[k + 1]), f);
            if (a == b) continue;
            std::vector<double> right_counts(n_classes_, 0.0);
            if (classification_) {
                for (std::size_t c = 0; c < n_classes_; ++c) right_counts[c] = total_counts[c] - left_counts[c];
            }
            const double nl = static_cast<double>(k + 1);
            const double nr = static_cast<double>(n - k - 1);
            const double child = impurity_from(left_counts, nl, ls, lsq) +
                                 impurity_from(right_counts, nr, total_sum - ls, total_sq - lsq);
            const double gain = parent - child;
            if (gain > best_gain) {
                best_gain = gain;
                best_feature = static_cast<int>(f);
                best_threshold = a + (b - a) / 2.0;
            }
        }
    }
    if (best_feature < 0) return id;

    std::vector<std::size_t> left, right;
    for (auto i : idx) {
        (x(static_cast<Eigen::Index>(i), best_feature) <= best_threshold ? left : right).push_back(i);
    }
    nodes_[static_cast<std::size_t>(id)].feature = best_feature;
    nodes_[static_cast<std::size_t>(id)].threshold = best_threshold;
    const int l = build(x, y, left, depth + 1);
    const int r = build(x, y, right, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
}

double DecisionTree::predict_row(const Eigen::Ref<const RowVector>& x) const {
    std::size_t node = 0;
    while (nodes_[node].feature >= 0) {
        const auto& nd = nodes_[node];
        node = static_cast<std::size_t>(x(nd.feature) <= nd.threshold ? nd.left : nd.right);
    }
    return nodes_[node].value;
}

std::vector<double> DecisionTree::predict(const Matrix& x) const {
    std::vector<double> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index r = 0; r < x.rows(); ++r) out[static_cast<std::size_t>(r)] = predict_row(x.row(r));
    return out;
}

std::size_t DecisionTree::depth() const {
    std::size_t d = 0;
    for (const auto& n : nodes_) d = std::max(d, n.depth);
    return d;
}

// ---------------------------------------------------------------------------
// Linear models

void LogisticRegression::fit(const Matrix& x, const std::vector<std::size_t>& labels, std::size_t n_classes) {
    const Matrix xb = with_bias(x);
    const auto n = xb.rows();
    const auto k = static_cast<Eigen::Index>(std::max<std::size_t>(n_classes, 1));
    weights_ = Matrix::Zero(xb.cols(), k);
    if (k < 2 || n == 0) return;
    Matrix y = Matrix::Zero(n, k);
    for (Eigen::Index r = 0; r < n; ++r) y(r, static_cast<Eigen::Index>(labels[static_cast<std::size_t>(r)])) = 1.0;
    const Matrix gram = xb.transpose() * xb / static_cast<double>(n);
    const double lipschitz = 0.5 * power_iteration(gram);
    if (!(lipschitz > 0.0)) return;
    const double step = 1.0 / lipschitz;
    for (std::size_t it = 0; it < max_iter_; ++it) {
        Matrix p = xb * weights_;
        for (Eigen::Index r = 0; r < n; ++r) {
            const double mx = p.row(r).maxCoeff();
            p.row(r) = (p.row(r).array() - mx).exp().matrix();
            p.row(r) /= p.row(r).sum();
        }
        weights_ -= step * (xb.transpose() * (p - y)) / static_cast<double>(n);
    }
}

Matrix LogisticRegression::probabilities(const Matrix& x) const {
    Matrix p = with_bias(x) * weights_;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp().matrix();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

std::vector<std::size_t> LogisticRegression::predict(const Matrix& x) const {
    const Matrix p = with_bias(x) * weights_;
    std::vector<std::size_t> out(static_cast<std::size_t>(p.rows()));
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < p.cols(); ++c) {
            if (p(r, c) > p(r, best)) best = c;
        }
        out[static_cast<std::size_t>(r)] = static_cast<std::size_t>(best);
    }
    return out;
}

void LinearRegression::fit(const Matrix& x, const std::vector<double>& y) {
    const Matrix xb = with_bias(x);
    const auto n = xb.rows();
    weights_ = Eigen::VectorXd::Zero(xb.cols());
    if (n == 0) return;
    Eigen::VectorXd target(n);
    for (Eigen::Index r = 0; r < n; ++r) target(r) = y[static_cast<std::size_t>(r)];
    const Matrix gram = xb.transpose() * xb / static_cast<double>(n);
    const double lipschitz = power_iteration(gram);
    if (!(lipschitz > 0.0)) return;
    const double step = 1.0 / lipschitz;
    for (std::size_t it = 0; it < max_iter_; ++it) {
        weights_ -= step * (xb.transpose() * (xb * weights_ - target)) / static_cast<double>(n);
    }
}

std::vector<double> LinearRegression::predict(const Matrix& x) const {
    const Eigen::VectorXd p = with_bias(x) * weights_;
    return std::vector<double>(p.data(), p.data() + p.size());
}

}  // namespace tabgrade
