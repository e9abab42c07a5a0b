#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "tabgrade/model.hpp"
#include "tabgrade/table.hpp"

namespace tabgrade {

// One-hot categoricals and standardized numerics, with statistics taken from
// the table passed to fit. Unseen categories encode as all zeros; missing
// numerics encode as the mean (0 after standardization).
class FeatureEncoder {
public:
    void fit(const Table& table, const std::vector<std::size_t>& columns);
    Matrix transform(const Table& table) const;
    std::size_t width() const { return width_; }

private:
    struct Slot {
        std::size_t column = 0;
        bool categorical = false;
        double mean = 0.0;
        double scale = 1.0;
        std::vector<std::string> categories;
        std::size_t offset = 0;
    };
    std::vector<Slot> slots_;
    std::size_t width_ = 0;
};

// Largest eigenvalue of a symmetric positive semidefinite matrix.
double power_iteration(const Matrix& a, std::size_t iterations = 100);

// CART with Gini impurity (classification) or variance (regression).
class DecisionTree {
public:
    DecisionTree(bool classification, std::size_t max_depth) : classification_(classification), max_depth_(max_depth) {}

    // Classification labels are class ids in [0, n_classes).
    void fit(const Matrix& x, const std::vector<double>& y, std::size_t n_classes = 0);
    double predict_row(const Eigen::Ref<const RowVector>& x) const;
    std::vector<double> predict(const Matrix& x) const;
    std::size_t depth() const;

private:
    struct Node {
        int feature = -1;
        double threshold = 0.0;
        int left = -1;
        int right = -1;
        double value = 0.0;
        std::size_t depth = 0;
    };
    int build(const Matrix& x, const std::vector<double>& y, std::vector<std::size_t>& idx, std::size_t depth);
    double leaf_value(const std::vector<double>& y, const std::vector<std::size_t>& idx) const;

    bool classification_;
    std::size_t max_depth_;
    std::size_t n_classes_ = 0;
    std::vector<Node> nodes_;
};

// Multinomial logistic regression by full-batch gradient descent with step
// 1/L, L an upper bound on the Hessian from power iteration.
class LogisticRegression {
public:
    explicit LogisticRegression(std::size_t max_iter = 500) : max_iter_(max_iter) {}

    void fit(const Matrix& x, const std::vector<std::size_t>& labels, std::size_t n_classes);
    std::vector<std::size_t> predict(const Matrix& x) const;
    Matrix probabilities(const Matrix& x) const;

private:
    std::size_t max_iter_;
    Matrix weights_;  // (features + 1) x classes, bias last
};

// Least squares by full-batch gradient descent.
class LinearRegression {
public:
    explicit LinearRegression(std::size_t max_iter = 500) : max_iter_(max_iter) {}

    void fit(const Matrix& x, const std::vector<double>& y);
    std::vector<double> predict(const Matrix& x) const;

private:
    std::size_t max_iter_;
    Eigen::VectorXd weights_;
};

}  // namespace tabgrade
