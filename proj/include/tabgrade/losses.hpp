#pragma once

#include <optional>
#include <span>
#include <vector>

#include "tabgrade/codec.hpp"
#include "tabgrade/model.hpp"

namespace tabgrade {

struct LossWeights {
    double lambda_sparse = 0.001;
    double lambda_fd = 0.1;
    double alpha = 0.5;  // minimum connection strength in the FD penalty
};

struct LossBreakdown {
    double lm = 0.0;
    double sparse = 0.0;
    double fd = 0.0;
    double total = 0.0;
};

enum class LmReduction { TokenMean, SequenceSum };
enum class SparsityReduction { EntryMean, RawSum };
enum class FdScope { AllLayers, LastLayer };

struct LossOptions {
    LmReduction lm = LmReduction::TokenMean;
    SparsityReduction sparsity = SparsityReduction::EntryMean;
    FdScope fd_scope = FdScope::AllLayers;
    bool include_name_tokens = false;
};

// ln(1 + exp(alpha - w)); non-increasing in w.
double fd_penalty(double mean_strength, double alpha);

// Next-token cross entropy of one sequence, averaged over predictions. Row t
// of logits predicts tokens[t + 1]; PAD targets are skipped.
double lm_loss(const Matrix& logits, std::span<const TokenId> tokens);
// Entry-normalized L1 of the edge weights of one sequence.
double sparsity_loss(const std::vector<LayerTrace>& traces);
// Mean FD penalty over (row, FD) pairs with at least one visible pair.
double fd_alignment_loss(std::span<const ForwardResult> rows, std::span<const SpanMap> spans,
                         const std::vector<ResolvedFd>& fds, double alpha, const LossOptions& options = {});

// Mean edge weight from lhs-value tokens to rhs-value tokens over causally
// visible pairs (j < i), averaged over heads and the layers in scope.
// Empty when no pair is visible.
std::optional<double> mean_fd_strength(const std::vector<LayerTrace>& traces, const SpanMap& spans,
                                       const ResolvedFd& fd, const LossOptions& options = {});

// Mean of all causally valid edge weights.
double adjacency_mean(const std::vector<LayerTrace>& traces);

// lm + lambda_sparse * sparse + lambda_fd * fd. Throws NumericError on a
// non-finite component.
LossBreakdown total_loss(double lm, double sparse, double fd, const LossWeights& weights);

struct Objective {
    LossBreakdown loss;
    double adjacency_mean = 0.0;
    std::size_t fd_terms = 0;
    std::vector<LossSeeds> seeds;  // per row, when gradients were requested
};

// Full objective over a batch, with per-row backward seeds.
Objective evaluate_objective(std::span<const ForwardResult> rows, std::span<const SpanMap> spans,
                             const std::vector<ResolvedFd>& fds, const LossWeights& weights,
                             const LossOptions& options, bool with_gradients);

}  // namespace tabgrade
