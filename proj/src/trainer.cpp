#include "tabgrade/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "tabgrade/io.hpp"

namespace tabgrade {

namespace {

std::string shortest(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

bool is_trainable(const Tensor& t, TrainMode mode) {
    return mode == TrainMode::Full || t.graph;
}

std::size_t trainable_parameter_count(const ModelState& model, TrainMode mode) {
    std::size_t total = 0;
    for (const auto& t : model.params) {
        if (is_trainable(t, mode)) total += static_cast<std::size_t>(t.value.size());
    }
    return total;
}

OptimizerState OptimizerState::for_model(const ModelState& model, TrainMode mode) {
    OptimizerState s;
    s.m.resize(model.params.size());
    s.v.resize(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const auto& t = model.params[i];
        if (!is_trainable(t, mode)) continue;
        s.m[i] = Matrix::Zero(t.value.rows(), t.value.cols());
        s.v[i] = Matrix::Zero(t.value.rows(), t.value.cols());
    }
    return s;
}

void adamw_step(ModelState& model, const Gradients& grads, OptimizerState& state, const AdamWConfig& config,
                double learning_rate) {
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        if (!state.tracks(i)) continue;
        Matrix& p = model.params[i].value;
        const Matrix& g = grads.grads[i];
        Matrix& m = state.m[i];
        Matrix& v = state.v[i];
        m = config.beta1 * m + (1.0 - config.beta1) * g;
        v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseAbs2();
        p *= 1.0 - learning_rate * config.weight_decay;
        p.array() -= learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config.eps);
    }
}

std::size_t max_serialized_length(const Table& table, const Vocabulary& vocab) {
    const std::size_t d = table.schema().columns().size();
    std::vector<std::size_t> identity(d);
    for (std::size_t i = 0; i < d; ++i) identity[i] = i;
    std::size_t longest = 0;
    for (const auto& row : table.rows()) {
        longest = std::max(longest, serialize_row(row, identity, vocab).first.size());
    }
    return longest;
}

TrainResult train(const Table& train_table, const FdSet& fdset, const TrainConfig& config, const LossWeights& weights,
                  const LossOptions& options, ModelConfig model_config, const StepCallback& on_step) {
    if (train_table.rows().empty()) {
        throw DataError("training table is empty");
    }
    if (config.batch_size == 0) {
        throw DataError("batch_size must be positive");
    }
    if (!(config.learning_rate > 0.0)) {
        throw DataError("learning_rate must be positive");
    }
    const Schema& schema = train_table.schema();
    Vocabulary vocab = Vocabulary::build(train_table);
    model_config.vocab_size = vocab.size();
    model_config.validate();
    const std::size_t longest = max_serialized_length(train_table, vocab);
    if (longest > model_config.max_seq_len) {
        throw DataError("rows serialize to " + std::to_string(longest) + " tokens, above max_seq_len " +
                        std::to_string(model_config.max_seq_len));
    }

    std::vector<ResolvedFd> fds;
    for (const auto& fd : fdset.fds) {
        if (fd.lhs.empty() && !config.include_empty_lhs) continue;
        fds.push_back(resolve_fd(fd, schema));
    }

    TrainResult result;
    ModelState model = init_model(model_config, mix_seed(config.seed, 1));
    OptimizerState opt = OptimizerState::for_model(model, config.mode);
    result.trainable_parameters = trainable_parameter_count(model, config.mode);

    Rng order_rng(mix_seed(config.seed, 2));
    Rng perm_rng(mix_seed(config.seed, 3));
    Rng fd_rng(mix_seed(config.seed, 4));
    const std::size_t n_rows = train_table.rows().size();
    const std::size_t d = schema.columns().size();
    const std::size_t batch = std::min(config.batch_size, n_rows);
    std::vector<std::size_t> order = order_rng.permutation(n_rows);
    std::size_t cursor = 0;

    Gradients grads = Gradients::zeros_like(model);
    std::vector<ForwardResult> forwards(batch);
    std::vector<SpanMap> spans(batch);

    for (std::size_t step = 1; step <= config.steps; ++step) {
        for (std::size_t b = 0; b < batch; ++b) {
            if (cursor == n_rows) {
                order = order_rng.permutation(n_rows);
                cursor = 0;
            }
            const Row& row = train_table.rows()[order[cursor++]];
            auto [tokens, span] = serialize_row(row, sample_permutation(d, perm_rng), vocab);
            forwards[b] = transformer_forward(model, tokens.ids);
            spans[b] = std::move(span);
        }

        const std::vector<ResolvedFd>* step_fds = &fds;
        std::vector<ResolvedFd> subset;
        if (config.fd_subsample > 0 && fds.size() > config.fd_subsample) {
            auto pick = fd_rng.permutation(fds.size());
            pick.resize(config.fd_subsample);
            std::sort(pick.begin(), pick.end());
            for (auto i : pick) subset.push_back(fds[i]);
            step_fds = &subset;
        }

        Objective obj;
        try {
            obj = evaluate_objective(forwards, spans, *step_fds, weights, options, true);
        } catch (const NumericError& e) {
            throw NumericError("step " + std::to_string(step) + ": " + e.what());
        }
        grads.set_zero();
        for (std::size_t b = 0; b < batch; ++b) {
            backward(model, forwards[b], obj.seeds[b], grads);
        }
        for (std::size_t i = 0; i < grads.grads.size(); ++i) {
            if (opt.tracks(i) && !grads.grads[i].allFinite()) {
                throw NumericError("step " + std::to_string(step) + ": non-finite gradient in " +
                                   model.params[i].name);
            }
        }
        adamw_step(model, grads, opt, config.adamw, config.learning_rate);

        TrainLogEntry entry{step, obj.loss, obj.adjacency_mean};
        result.log.push_back(entry);
        if (on_step && !on_step(entry, model)) break;
    }

    result.checkpoint.model = std::move(model);
    result.checkpoint.vocab = std::move(vocab);
    result.checkpoint.schema = schema;
    result.checkpoint.mode = config.mode;
    return result;
}

std::string format_training_log(const std::vector<TrainLogEntry>& log) {
    std::string out = "step,lm,sparse,fd,total,adjacency_mean\n";
    for (const auto& e : log) {
        out += std::to_string(e.step) + "," + shortest(e.loss.lm) + "," + shortest(e.loss.sparse) + "," +
               shortest(e.loss.fd) + "," + shortest(e.loss.total) + "," + shortest(e.adjacency_mean) + "\n";
    }
    return out;
}

void write_training_log(const std::vector<TrainLogEntry>& log, const std::filesystem::path& path) {
    write_file_atomic(path, format_training_log(log));
}

std::optional<double> measure_fd_strength(const ModelState& model, const Vocabulary& vocab, const Table& table,
                                          const FunctionalDependency& fd, std::uint64_t seed,
                                          const LossOptions& options) {
    const ResolvedFd resolved = resolve_fd(fd, table.schema());
    const std::size_t d = table.schema().columns().size();
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < table.rows().size(); ++r) {
        Rng rng(mix_seed(seed, r));
        auto [tokens, spans] = serialize_row(table.rows()[r], sample_permutation(d, rng), vocab);
        const auto fwd = transformer_forward(model, tokens.ids);
        if (auto m = mean_fd_strength(fwd.traces, spans, resolved, options)) {
            sum += *m;
            ++count;
        }
    }
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
}

double measure_adjacency_mean(const ModelState& model, const Vocabulary& vocab, const Table& table,
                              std::uint64_t seed) {
    const std::size_t d = table.schema().columns().size();
    double sum = 0.0;
    for (std::size_t r = 0; r < table.rows().size(); ++r) {
        Rng rng(mix_seed(seed, r));
        auto [tokens, spans] = serialize_row(table.rows()[r], sample_permutation(d, rng), vocab);
        sum += adjacency_mean(transformer_forward(model, tokens.ids).traces);
    }
    return table.rows().empty() ? 0.0 : sum / static_cast<double>(table.rows().size());
}

}  // namespace tabgrade
