#include "tabgrade/losses.hpp"

#include <cmath>

namespace tabgrade {

namespace {

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

bool is_pad(const ForwardResult& f, Eigen::Index t) {
    return f.tokens[static_cast<std::size_t>(t)] == Vocabulary::kPad;
}

std::vector<LossSeeds> empty_seeds(std::span<const ForwardResult> rows) {
    std::vector<LossSeeds> seeds(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& f = rows[r];
        const auto n = static_cast<Eigen::Index>(f.length());
        seeds[r].d_logits = Matrix::Zero(n, f.logits.cols());
        seeds[r].d_edges.resize(f.traces.size());
        for (std::size_t l = 0; l < f.traces.size(); ++l) {
            seeds[r].d_edges[l].assign(f.traces[l].heads.size(), Matrix::Zero(n, n));
        }
    }
    return seeds;
}

// Sum of -log p(next token) for one sequence; optionally adds coef * dL/dlogits.
double sequence_nll(const ForwardResult& f, std::size_t* count, Matrix* d_logits, double coef) {
    const auto n = static_cast<Eigen::Index>(f.length());
    double total = 0.0;
    for (Eigen::Index t = 0; t + 1 < n; ++t) {
        const TokenId target = f.tokens[static_cast<std::size_t>(t + 1)];
        if (target == Vocabulary::kPad) continue;
        const auto row = f.logits.row(t);
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        total += lse - row(target);
        ++*count;
        if (d_logits) {
            d_logits->row(t) += coef * (row.array() - lse).exp().matrix();
            (*d_logits)(t, target) -= coef;
        }
    }
    return total;
}

// Per-sequence sparsity with its derivative coefficient per entry.
double sequence_sparsity(const ForwardResult& f, SparsityReduction mode, LossSeeds* seeds, double coef) {
    const auto n = static_cast<Eigen::Index>(f.length());
    const double layers = static_cast<double>(f.traces.size());
    double total = 0.0;
    for (std::size_t l = 0; l < f.traces.size(); ++l) {
        const auto& heads = f.traces[l].heads;
        const double h_count = static_cast<double>(heads.size());
        for (std::size_t h = 0; h < heads.size(); ++h) {
            const Matrix& w = heads[h].edges;
            double sum = 0.0;
            std::size_t cnt = 0;
            for (Eigen::Index i = 0; i < n; ++i) {
                if (is_pad(f, i)) continue;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    if (is_pad(f, j)) continue;
                    sum += std::abs(w(i, j));
                    ++cnt;
                }
            }
            if (cnt == 0) continue;
            const double norm = mode == SparsityReduction::EntryMean ? static_cast<double>(cnt) : 1.0;
            total += sum / norm / h_count / layers;
            if (seeds) {
                const double g = coef / norm / h_count / layers;
                Matrix& d = seeds->d_edges[l][h];
                for (Eigen::Index i = 0; i < n; ++i) {
                    if (is_pad(f, i)) continue;
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        if (is_pad(f, j)) continue;
                        d(i, j) += w(i, j) >= 0.0 ? g : -g;
                    }
                }
            }
        }
    }
    return total;
}

std::size_t first_layer(std::size_t n_layers, FdScope scope) {
    return scope == FdScope::LastLayer ? n_layers - 1 : 0;
}

}  // namespace

double fd_penalty(double mean_strength, double alpha) {
    const double x = alpha - mean_strength;
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

double lm_loss(const Matrix& logits, std::span<const TokenId> tokens) {
    // Accepts either one row per prediction (n - 1) or the full forward output (n).
    const auto rows = static_cast<std::size_t>(logits.rows());
    if (tokens.empty() || (rows + 1 != tokens.size() && rows != tokens.size())) {
        throw NumericError("lm_loss: logits rows must be the token count minus one");
    }
    ForwardResult f;
    f.logits = Matrix::Zero(static_cast<Eigen::Index>(tokens.size()), logits.cols());
    f.logits.topRows(logits.rows()) = logits;
    f.tokens.assign(tokens.begin(), tokens.end());
    std::size_t count = 0;
    const double total = sequence_nll(f, &count, nullptr, 0.0);
    return count ? total / static_cast<double>(count) : 0.0;
}

double sparsity_loss(const std::vector<LayerTrace>& traces) {
    if (traces.empty() || traces.front().heads.empty()) {
        throw NumericError("sparsity_loss: empty trace");
    }
    ForwardResult f;
    f.traces = traces;
    f.tokens.assign(static_cast<std::size_t>(traces.front().heads.front().edges.rows()), Vocabulary::kBos);
    return sequence_sparsity(f, SparsityReduction::EntryMean, nullptr, 0.0);
}

std::optional<double> mean_fd_strength(const std::vector<LayerTrace>& traces, const SpanMap& spans,
                                       const ResolvedFd& fd, const LossOptions& options) {
    const FdSpans s = spans_for_fd(spans, fd, options.include_name_tokens);
    std::size_t pairs = 0;
    double sum = 0.0;
    for (std::size_t l = first_layer(traces.size(), options.fd_scope); l < traces.size(); ++l) {
        for (const auto& head : traces[l].heads) {
            for (auto i : s.rhs_tokens) {
                for (auto j : s.lhs_tokens) {
                    if (j < i) {
                        sum += head.edges(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                        ++pairs;
                    }
                }
            }
        }
    }
    if (pairs == 0) {
        return std::nullopt;
    }
    return sum / static_cast<double>(pairs);
}

double adjacency_mean(const std::vector<LayerTrace>& traces) {
    double sum = 0.0;
    std::size_t cnt = 0;
    for (const auto& layer : traces) {
        for (const auto& head : layer.heads) {
            const auto n = head.edges.rows();
            for (Eigen::Index i = 0; i < n; ++i) {
                for (Eigen::Index j = 0; j <= i; ++j) {
                    sum += head.edges(i, j);
                    ++cnt;
                }
            }
        }
    }
    return cnt ? sum / static_cast<double>(cnt) : 0.0;
}

LossBreakdown total_loss(double lm, double sparse, double fd, const LossWeights& weights) {
    if (!std::isfinite(lm) || !std::isfinite(sparse) || !std::isfinite(fd)) {
        throw NumericError("non-finite loss component (lm=" + std::to_string(lm) + ", sparse=" +
                           std::to_string(sparse) + ", fd=" + std::to_string(fd) + ")");
    }
    return {lm, sparse, fd, lm + weights.lambda_sparse * sparse + weights.lambda_fd * fd};
}

namespace {

// FD term over a batch. When seeds are given, adds coef * dL_fd/dw.
double batch_fd(std::span<const ForwardResult> rows, std::span<const SpanMap> spans,
                const std::vector<ResolvedFd>& fds, double alpha, const LossOptions& options,
                std::vector<LossSeeds>* seeds, double coef, std::size_t* terms_out) {
    struct Term {
        std::size_t row;
        FdSpans spans;
        double mean;
        std::size_t pairs;
    };
    std::vector<Term> terms;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& traces = rows[r].traces;
        for (const auto& fd : fds) {
            FdSpans s = spans_for_fd(spans[r], fd, options.include_name_tokens);
            std::size_t pairs = 0;
            for (auto i : s.rhs_tokens) {
                for (auto j : s.lhs_tokens) {
                    if (j < i) ++pairs;
                }
            }
            if (pairs == 0) continue;
            auto m = mean_fd_strength(traces, spans[r], fd, options);
            terms.push_back({r, std::move(s), *m, pairs});
        }
    }
    if (terms_out) *terms_out = terms.size();
    if (terms.empty()) {
        return 0.0;
    }
    const double count = static_cast<double>(terms.size());
    double total = 0.0;
    for (const auto& t : terms) {
        total += fd_penalty(t.mean, alpha);
        if (!seeds) continue;
        const auto& traces = rows[t.row].traces;
        const std::size_t l0 = first_layer(traces.size(), options.fd_scope);
        std::size_t blocks = 0;
        for (std::size_t l = l0; l < traces.size(); ++l) blocks += traces[l].heads.size();
        // d phi / d mean = -sigmoid(alpha - mean)
        const double g = -sigmoid(alpha - t.mean) * coef / count / static_cast<double>(t.pairs * blocks);
        for (std::size_t l = l0; l < traces.size(); ++l) {
            for (std::size_t h = 0; h < traces[l].heads.size(); ++h) {
                Matrix& d = (*seeds)[t.row].d_edges[l][h];
                for (auto i : t.spans.rhs_tokens) {
                    for (auto j : t.spans.lhs_tokens) {
                        if (j < i) d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += g;
                    }
                }
            }
        }
    }
    return total / count;
}

}  // namespace

double fd_alignment_loss(std::span<const ForwardResult> rows, std::span<const SpanMap> spans,
                         const std::vector<ResolvedFd>& fds, double alpha, const LossOptions& options) {
    if (rows.size() != spans.size()) {
        throw NumericError("fd_alignment_loss: one span map per row required");
    }
    return batch_fd(rows, spans, fds, alpha, options, nullptr, 0.0, nullptr);
}

Objective evaluate_objective(std::span<const ForwardResult> rows, std::span<const SpanMap> spans,
                             const std::vector<ResolvedFd>& fds, const LossWeights& weights,
                             const LossOptions& options, bool with_gradients) {
    if (rows.empty()) {
        throw NumericError("empty batch");
    }
    if (rows.size() != spans.size()) {
        throw NumericError("one span map per row required");
    }
    Objective obj;
    if (with_gradients) {
        obj.seeds = empty_seeds(rows);
    }
    const double batch = static_cast<double>(rows.size());

    // Language modeling.
    std::size_t tokens = 0;
    for (const auto& f : rows) {
        for (std::size_t t = 1; t < f.length(); ++t) {
            if (f.tokens[t] != Vocabulary::kPad) ++tokens;
        }
    }
    const double lm_norm = options.lm == LmReduction::TokenMean ? static_cast<double>(std::max<std::size_t>(tokens, 1))
                                                                  : batch;
    double lm = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::size_t cnt = 0;
        lm += sequence_nll(rows[r], &cnt, with_gradients ? &obj.seeds[r].d_logits : nullptr, 1.0 / lm_norm);
    }
    lm /= lm_norm;

    // Sparsity, averaged over rows.
    double sparse = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        sparse += sequence_sparsity(rows[r], options.sparsity, with_gradients ? &obj.seeds[r] : nullptr,
                                    weights.lambda_sparse / batch);
    }
    sparse /= batch;

    const double fd = batch_fd(rows, spans, fds, weights.alpha, options, with_gradients ? &obj.seeds : nullptr,
                               weights.lambda_fd, &obj.fd_terms);

    obj.loss = total_loss(lm, sparse, fd, weights);
    double adj = 0.0;
    for (const auto& f : rows) adj += adjacency_mean(f.traces);
    obj.adjacency_mean = adj / batch;
    return obj;
}

}  // namespace tabgrade
