#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "tabgrade/checkpoint.hpp"
#include "tabgrade/codec.hpp"
#include "tabgrade/fd.hpp"
#include "tabgrade/losses.hpp"
#include "tabgrade/model.hpp"
#include "tabgrade/table.hpp"

namespace tabgrade {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct TrainConfig {
    TrainMode mode = TrainMode::Full;
    double learning_rate = 5e-5;
    std::size_t batch_size = 64;
    std::size_t steps = 1000;
    std::uint64_t seed = 0;
    AdamWConfig adamw;
    // Evaluate at most this many FDs per step, drawn at random (0 = all).
    std::size_t fd_subsample = 0;
    // FDs with an empty determinant have no lhs tokens and never contribute.
    bool include_empty_lhs = false;
};

// First/second moments. Entries stay empty for frozen tensors.
struct OptimizerState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::size_t step = 0;

    static OptimizerState for_model(const ModelState& model, TrainMode mode);
    bool tracks(std::size_t i) const { return m[i].size() > 0; }
};

// Decoupled weight decay; only tensors tracked by the state are touched.
void adamw_step(ModelState& model, const Gradients& grads, OptimizerState& state, const AdamWConfig& config,
                double learning_rate);

bool is_trainable(const Tensor& t, TrainMode mode);
std::size_t trainable_parameter_count(const ModelState& model, TrainMode mode);

struct TrainLogEntry {
    std::size_t step = 0;
    LossBreakdown loss;
    double adjacency_mean = 0.0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<TrainLogEntry> log;
    std::size_t trainable_parameters = 0;
};

// Upper bound on the serialized length of any row of the table.
std::size_t max_serialized_length(const Table& table, const Vocabulary& vocab);

// Called after each step; returning false stops training early.
using StepCallback = std::function<bool(const TrainLogEntry&, const ModelState&)>;

TrainResult train(const Table& train_table, const FdSet& fds, const TrainConfig& config, const LossWeights& weights,
                  const LossOptions& options, ModelConfig model_config, const StepCallback& on_step = {});

void write_training_log(const std::vector<TrainLogEntry>& log, const std::filesystem::path& path);
std::string format_training_log(const std::vector<TrainLogEntry>& log);

// Mean FD connection strength of a trained model over table rows, each under
// a permutation drawn from seed. Rows where the FD has no visible pair are
// skipped; empty when none remain.
std::optional<double> measure_fd_strength(const ModelState& model, const Vocabulary& vocab, const Table& table,
                                          const FunctionalDependency& fd, std::uint64_t seed,
                                          const LossOptions& options = {});

// Mean adjacency of a trained model over table rows.
double measure_adjacency_mean(const ModelState& model, const Vocabulary& vocab, const Table& table,
                              std::uint64_t seed);

}  // namespace tabgrade
