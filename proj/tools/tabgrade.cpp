// Command line front end: discover -> train -> sample -> evaluate.

#include <cstdlib>
#include <iostream>
#include <set>
#include <thread>

#include <CLI11.hpp>

#include "tabgrade/checkpoint.hpp"
#include "tabgrade/config.hpp"
#include "tabgrade/fd.hpp"
#include "tabgrade/io.hpp"
#include "tabgrade/metrics.hpp"
#include "tabgrade/sampler.hpp"
#include "tabgrade/table.hpp"
#include "tabgrade/trainer.hpp"

namespace tg = tabgrade;

namespace {

constexpr int kUsage = 1;
constexpr int kFailure = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::size_t thread_count() {
    if (const char* env = std::getenv("TABGRADE_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1) {
            throw UsageError(std::string("TABGRADE_THREADS must be a positive integer, got '") + env + "'");
        }
        return static_cast<std::size_t>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

std::optional<tg::Schema> maybe_schema(const std::string& path) {
    if (path.empty()) return std::nullopt;
    return tg::load_schema(path);
}

// --- discover ---------------------------------------------------------------

struct DiscoverArgs {
    std::string input, schema, algo = "tane", out;
    std::size_t max_lhs = 4;
    std::size_t sample_pairs = 64;
    std::uint64_t seed = 0;
};

int run_discover(const DiscoverArgs& a) {
    const tg::Table table = tg::load_csv(a.input, maybe_schema(a.schema));
    const tg::FdSet set = a.algo == "tane" ? tg::tane_discover(table, a.max_lhs)
                                           : tg::hyfd_discover(table, a.max_lhs, a.sample_pairs, a.seed);
    tg::save_fdset(set, a.out);
    std::size_t empty_lhs = 0;
    for (const auto& fd : set.fds) empty_lhs += fd.lhs.empty();
    std::cerr << "discovered " << set.fds.size() << " minimal FDs (" << empty_lhs << " with empty lhs) over "
              << table.num_columns() << " columns, " << table.num_rows() << " rows\n";
    return 0;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
    std::string config, mode;
};

int run_train(const TrainArgs& a) {
    tg::RunConfig cfg;
    try {
        cfg = tg::load_run_config(a.config);
        if (!a.mode.empty()) cfg.train.mode = tg::train_mode_from_string(a.mode);
    } catch (const tg::ConfigError& e) {
        throw UsageError(std::string("config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (!std::filesystem::exists(cfg.input)) throw UsageError("train.input: no such file " + cfg.input.string());
    if (cfg.fds && !std::filesystem::exists(*cfg.fds)) {
        throw UsageError("train.fds: no such file " + cfg.fds->string());
    }

    const tg::Table table = tg::load_csv(cfg.input, cfg.schema ? std::optional(tg::load_schema(*cfg.schema))
                                                               : std::nullopt);
    const tg::FdSet fds = cfg.fds ? tg::load_fdset(*cfg.fds) : tg::FdSet{};
    const std::size_t report_every = std::max<std::size_t>(1, cfg.train.steps / 10);
    bool announced = false;
    auto progress = [&](const tg::TrainLogEntry& e, const tg::ModelState& model) {
        if (!announced) {
            std::cerr << "mode " << tg::to_string(cfg.train.mode) << ", trainable parameters "
                      << tg::trainable_parameter_count(model, cfg.train.mode) << " of " << model.parameter_count()
                      << " (graph modules " << model.graph_parameter_count() << ")\n";
            announced = true;
        }
        if (e.step % report_every == 0 || e.step == cfg.train.steps) {
            std::cerr << "step " << e.step << " lm " << e.loss.lm << " sparse " << e.loss.sparse << " fd "
                      << e.loss.fd << " total " << e.loss.total << "\n";
        }
        return true;
    };
    const tg::TrainResult result =
        tg::train(table, fds, cfg.train, cfg.weights, cfg.loss, cfg.model, progress);
    tg::save_checkpoint(result.checkpoint, cfg.checkpoint);
    if (cfg.log) tg::write_training_log(result.log, *cfg.log);
    std::cerr << "checkpoint written to " << cfg.checkpoint.string() << "\n";
    return 0;
}

// --- sample -----------------------------------------------------------------

struct SampleArgs {
    std::string ckpt, prompt, out, stats;
    std::size_t n = 0;
    tg::GenerationConfig gen;
};

int run_sample(SampleArgs a) {
    const tg::Checkpoint ckpt = tg::load_checkpoint(a.ckpt);
    std::optional<tg::Prompt> prompt;
    try {
        if (!a.prompt.empty()) prompt = tg::parse_prompt(a.prompt, ckpt.schema);
        if (prompt) tg::encode_prompt(*prompt, ckpt.schema, ckpt.vocab);
    } catch (const tg::DataError& e) {
        throw UsageError(std::string("--prompt: ") + e.what());
    }
    a.gen.threads = thread_count();
    const auto stats_path = a.stats.empty() ? a.out + ".stats.json" : a.stats;
    try {
        const tg::SampleResult res = tg::sample_rows(ckpt.model, a.n, a.gen, ckpt.schema, ckpt.vocab, prompt);
        tg::write_csv(res.table, a.out);
        tg::write_file_atomic(stats_path, res.stats.to_json().dump(2) + "\n");
        std::cerr << "sampled " << res.stats.rows << " rows in " << res.stats.attempts << " attempts\n";
    } catch (const tg::RetryBudgetExhausted& e) {
        tg::write_file_atomic(stats_path, e.stats().to_json().dump(2) + "\n");
        std::cerr << "error: retry budget exhausted at row " << e.row() << "; failures "
                  << e.stats().to_json().at("failures").dump() << "\n";
        return kFailure;
    }
    return 0;
}

// --- evaluate ---------------------------------------------------------------

struct EvaluateArgs {
    std::string real, synth, test, schema, rules, fds, out, target, task;
    std::vector<std::string> metrics{"all"};
    std::size_t folds = 5;
    std::size_t bins = 50;
    std::uint64_t seed = 0;
};

int run_evaluate(const EvaluateArgs& a) {
    const std::set<std::string> known{"dcr", "correlation", "violation", "mle", "discriminator", "all"};
    std::set<std::string> wanted;
    for (const auto& m : a.metrics) {
        if (!known.contains(m)) throw UsageError("unknown metric '" + m + "'");
        if (m == "all") {
            wanted.insert(known.begin(), known.end());
            wanted.erase("all");
        } else {
            wanted.insert(m);
        }
    }
    if (wanted.contains("violation") && a.rules.empty() && a.fds.empty()) {
        throw UsageError("the violation metric needs --rules or --fds");
    }
    std::optional<tg::Schema> schema = maybe_schema(a.schema);
    tg::Table real = tg::load_csv(a.real, schema);
    tg::Table synth;
    try {
        synth = tg::load_csv(a.synth, real.schema());
    } catch (const tg::DataError& e) {
        std::cerr << "error: synthetic table does not match the real schema: " << e.what() << "\n";
        return kUsage;
    }
    tg::require_same_columns(real.schema(), synth.schema());

    if (!a.target.empty()) {
        const auto task = a.task.empty() ? tg::TaskKind::None : tg::task_from_string(a.task);
        real = tg::Table(real.schema().with_target(a.target, task), real.rows());
    }
    if (wanted.contains("mle") && !real.schema().target()) {
        throw UsageError("the mle metric needs --target or a schema with a target");
    }
    synth = tg::Table(real.schema(), synth.rows());

    tg::MetricReport report;
    const std::size_t threads = thread_count();
    if (wanted.contains("dcr")) report.dcr = tg::dcr(real, synth, threads);
    if (wanted.contains("correlation")) report.correlation = tg::correlation_error(real, synth, a.bins);
    if (wanted.contains("violation")) {
        std::vector<tg::ConstraintRule> rules;
        if (!a.rules.empty()) rules = tg::load_rules(a.rules, real);
        if (!a.fds.empty()) {
            for (const auto& fd : tg::load_fdset(a.fds).fds) rules.push_back(tg::make_fd_rule(fd, real));
        }
        report.violations = tg::violation_rate(synth, rules);
    }
    if (wanted.contains("mle")) {
        const tg::Table test = a.test.empty() ? real : tg::Table(real.schema(), tg::load_csv(a.test, real.schema()).rows());
        report.mle.emplace();
        report.mle->push_back(tg::mle(synth, test, tg::Learner::DecisionTree));
        report.mle->push_back(tg::mle(synth, test, tg::Learner::LinearModel));
    }
    if (wanted.contains("discriminator")) report.discriminator = tg::discriminator(real, synth, a.folds, a.seed);

    tg::write_file_atomic(a.out, report.to_json().dump(2) + "\n");
    std::cerr << "report written to " << a.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Graph-guided tabular data synthesis"};
    app.require_subcommand(1);

    DiscoverArgs discover;
    auto* d = app.add_subcommand("discover", "Find minimal functional dependencies in a CSV table");
    d->add_option("--input", discover.input, "CSV table")->required()->check(CLI::ExistingFile);
    d->add_option("--schema", discover.schema, "schema JSON (column kinds)")->check(CLI::ExistingFile);
    d->add_option("--algo", discover.algo, "tane or hyfd")->capture_default_str()->check(CLI::IsMember({"tane", "hyfd"}));
    d->add_option("--max-lhs", discover.max_lhs, "largest determinant size")->capture_default_str()->check(
        CLI::Range(std::size_t{0}, std::size_t{64}));
    d->add_option("--sample-pairs", discover.sample_pairs, "row pairs sampled per round (hyfd)")->capture_default_str();
    d->add_option("--seed", discover.seed, "sampling seed (hyfd)")->capture_default_str();
    d->add_option("--out", discover.out, "output FD file")->required();

    TrainArgs trainargs;
    auto* t = app.add_subcommand("train", "Train a model from a config file");
    t->add_option("--config", trainargs.config, "config file ([train], [model], [loss], [sample])")
        ->required()
        ->check(CLI::ExistingFile);
    t->add_option("--mode", trainargs.mode, "override train.mode: full or light")->check(CLI::IsMember({"full", "light"}));
    auto* pc = app.add_subcommand("default-config", "Print the default training config");

    SampleArgs sample;
    auto* s = app.add_subcommand("sample", "Generate synthetic rows from a checkpoint");
    s->add_option("--ckpt", sample.ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
    s->add_option("--n", sample.n, "number of rows")->required();
    s->add_option("--temperature", sample.gen.temperature, "softmax temperature")->capture_default_str()->check(
        CLI::PositiveNumber);
    s->add_option("--top-p", sample.gen.top_p, "nucleus mass")->capture_default_str()->check(CLI::Range(1e-12, 1.0));
    s->add_option("--seed", sample.gen.seed, "sampling seed")->capture_default_str();
    s->add_option("--max-retries", sample.gen.max_retries_per_row, "retries per row")->capture_default_str();
    s->add_option("--max-new-tokens", sample.gen.max_new_tokens, "token budget per attempt (0: context length)")
        ->capture_default_str();
    s->add_flag("--greedy", sample.gen.greedy, "argmax decoding");
    s->add_option("--prompt", sample.prompt, "fixed features, e.g. \"Income=<=50K,Age=30\"");
    s->add_option("--out", sample.out, "output CSV")->required();
    s->add_option("--stats", sample.stats, "stats JSON (default: <out>.stats.json)");

    EvaluateArgs eval;
    auto* e = app.add_subcommand("evaluate", "Score a synthetic table against real data");
    e->add_option("--real", eval.real, "real CSV")->required()->check(CLI::ExistingFile);
    e->add_option("--synth", eval.synth, "synthetic CSV")->required()->check(CLI::ExistingFile);
    e->add_option("--test", eval.test, "real test CSV for mle (default: --real)")->check(CLI::ExistingFile);
    e->add_option("--schema", eval.schema, "schema JSON")->check(CLI::ExistingFile);
    e->add_option("--metrics", eval.metrics, "dcr, correlation, violation, mle, discriminator or all")
        ->delimiter(',')
        ->capture_default_str();
    e->add_option("--rules", eval.rules, "constraint rules JSON")->check(CLI::ExistingFile);
    e->add_option("--fds", eval.fds, "FD file; each FD becomes a rule")->check(CLI::ExistingFile);
    e->add_option("--target", eval.target, "target column for mle");
    e->add_option("--task", eval.task, "classification or regression")->check(
        CLI::IsMember({"classification", "regression"}));
    e->add_option("--folds", eval.folds, "discriminator folds")->capture_default_str()->check(
        CLI::Range(std::size_t{2}, std::numeric_limits<std::size_t>::max()));
    e->add_option("--bins", eval.bins, "correlation histogram bins")->capture_default_str()->check(
        CLI::Range(std::size_t{1}, std::size_t{100000}));
    e->add_option("--seed", eval.seed, "fold seed")->capture_default_str();
    e->add_option("--out", eval.out, "report JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err) == 0 ? 0 : kUsage;
    }

    try {
        if (*d) return run_discover(discover);
        if (*t) return run_train(trainargs);
        if (*pc) {
            std::cout << tg::default_run_config_text();
            return 0;
        }
        if (*s) return run_sample(sample);
        if (*e) return run_evaluate(eval);
    } catch (const UsageError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kUsage;
    } catch (const tg::SchemaMismatch& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kUsage;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kFailure;
    }
    return kUsage;
}
