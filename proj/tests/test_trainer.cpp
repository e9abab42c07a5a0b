#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "tabgrade/checkpoint.hpp"
#include "tabgrade/config.hpp"
#include "tabgrade/io.hpp"
#include "tabgrade/trainer.hpp"

using namespace tabgrade;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
    ModelConfig m;
    m.n_layers = 2;
    m.n_heads = 2;
    m.model_dim = 16;
    m.ffn_dim = 32;
    m.max_seq_len = 32;
    return m;
}

TrainConfig quick_train(TrainMode mode, std::size_t steps) {
    TrainConfig c;
    c.mode = mode;
    c.steps = steps;
    c.batch_size = 4;
    c.learning_rate = 1e-2;
    c.seed = 3;
    return c;
}

bool bytes_equal(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

TrainResult small_run(TrainMode mode, std::size_t steps) {
    const Table t = tabgrade::testing::planted_table(32, 1);
    return train(t, tane_discover(t), quick_train(mode, steps), LossWeights{}, LossOptions{}, small_model());
}

}  // namespace

TEST(Optimizer, LightTracksOnlyGraphTensors) {
    ModelConfig cfg = small_model();
    cfg.vocab_size = 20;
    const ModelState m = init_model(cfg, 1);
    const auto full = OptimizerState::for_model(m, TrainMode::Full);
    const auto light = OptimizerState::for_model(m, TrainMode::Light);
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        EXPECT_TRUE(full.tracks(i));
        EXPECT_EQ(light.tracks(i), m.params[i].graph) << m.params[i].name;
    }
    const std::size_t dk = cfg.head_dim();
    EXPECT_EQ(trainable_parameter_count(m, TrainMode::Light), cfg.n_heads * cfg.n_layers * (dk * 2 * dk + dk));
    EXPECT_EQ(trainable_parameter_count(m, TrainMode::Full), m.parameter_count());
}

TEST(Optimizer, AdamWFirstStepMovesByLearningRate) {
    ModelConfig cfg = small_model();
    cfg.vocab_size = 10;
    ModelState m = init_model(cfg, 2);
    const ModelState before = m;
    Gradients g = Gradients::zeros_like(m);
    g.grads[0](0, 0) = 3.0;
    g.grads[0](0, 1) = -0.25;
    auto state = OptimizerState::for_model(m, TrainMode::Full);
    AdamWConfig ac;
    ac.weight_decay = 0.0;
    adamw_step(m, g, state, ac, 0.1);
    // Bias-corrected first step is lr * sign(g) up to eps.
    EXPECT_NEAR(m.params[0].value(0, 0), before.params[0].value(0, 0) - 0.1, 1e-7);
    EXPECT_NEAR(m.params[0].value(0, 1), before.params[0].value(0, 1) + 0.1, 1e-6);
    EXPECT_EQ(m.params[0].value(1, 1), before.params[0].value(1, 1));
    ac.weight_decay = 0.5;
    const double w = m.params[1].value(0, 0);
    adamw_step(m, Gradients::zeros_like(m), state, ac, 0.1);
    EXPECT_NEAR(m.params[1].value(0, 0), w * (1.0 - 0.05), 1e-15);
}

TEST(Train, LightModeFreezesEverythingButGraph) {
    const auto res = small_run(TrainMode::Light, 20);
    const ModelState init = init_model(res.checkpoint.model.config, mix_seed(3, 1));
    std::size_t moved = 0;
    for (std::size_t i = 0; i < init.params.size(); ++i) {
        const bool same = bytes_equal(init.params[i].value, res.checkpoint.model.params[i].value);
        if (init.params[i].graph) {
            moved += same ? 0 : 1;
        } else {
            EXPECT_TRUE(same) << init.params[i].name;
        }
    }
    EXPECT_GT(moved, 0u);
    EXPECT_EQ(res.trainable_parameters, init.graph_parameter_count());
    EXPECT_EQ(res.checkpoint.mode, TrainMode::Light);
}

TEST(Train, SameSeedGivesIdenticalCheckpointBytes) {
    TempDir dir("tabgrade_trainer_det");
    const auto a = small_run(TrainMode::Full, 15);
    const auto b = small_run(TrainMode::Full, 15);
    save_checkpoint(a.checkpoint, dir.path / "a");
    save_checkpoint(b.checkpoint, dir.path / "b");
    EXPECT_EQ(read_file(dir.path / "a" / "tensors.bin"), read_file(dir.path / "b" / "tensors.bin"));
    EXPECT_EQ(read_file(dir.path / "a" / "manifest.json"), read_file(dir.path / "b" / "manifest.json"));
    EXPECT_EQ(format_training_log(a.log), format_training_log(b.log));
}

TEST(Train, LossDecreasesAndLogIsComplete) {
    const auto res = small_run(TrainMode::Full, 120);
    ASSERT_EQ(res.log.size(), 120u);
    for (std::size_t i = 0; i < res.log.size(); ++i) {
        const auto& e = res.log[i];
        EXPECT_EQ(e.step, i + 1);
        EXPECT_TRUE(std::isfinite(e.adjacency_mean));
        EXPECT_GT(e.adjacency_mean, 0.0);
        EXPECT_LT(e.adjacency_mean, 1.0);
        EXPECT_EQ(e.loss.total, e.loss.lm + 0.001 * e.loss.sparse + 0.1 * e.loss.fd);
    }
    EXPECT_LT(res.log.back().loss.total, res.log[9].loss.total);
}

TEST(Train, CallbackCanStopEarly) {
    const Table t = tabgrade::testing::planted_table(16, 1);
    std::size_t calls = 0;
    const auto res = train(t, FdSet{}, quick_train(TrainMode::Full, 50), LossWeights{}, LossOptions{}, small_model(),
                           [&](const TrainLogEntry&, const ModelState&) { return ++calls < 5; });
    EXPECT_EQ(calls, 5u);
    EXPECT_EQ(res.log.size(), 5u);
}

TEST(Train, InputValidation) {
    const Table empty(Schema({{"A", ColumnKind::Categorical}}), {});
    EXPECT_ANY_THROW(train(empty, FdSet{}, quick_train(TrainMode::Full, 1), LossWeights{}, LossOptions{}, small_model()));
    ModelConfig tiny = small_model();
    tiny.max_seq_len = 4;
    const Table t = tabgrade::testing::planted_table(8, 1);
    EXPECT_ANY_THROW(train(t, FdSet{}, quick_train(TrainMode::Full, 1), LossWeights{}, LossOptions{}, tiny));
    FdSet bad;
    bad.fds.push_back(FunctionalDependency({"A"}, "missing"));
    EXPECT_ANY_THROW(train(t, bad, quick_train(TrainMode::Full, 1), LossWeights{}, LossOptions{}, small_model()));
}

TEST(TrainingLog, CsvFormat) {
    std::vector<TrainLogEntry> log(2);
    log[0].step = 1;
    log[0].loss = {2.5, 0.5, 0.75, 2.5755};
    log[0].adjacency_mean = 0.5;
    log[1].step = 2;
    log[1].loss = {1.0, 0.25, 0.5, 1.05025};
    log[1].adjacency_mean = 0.25;
    EXPECT_EQ(format_training_log(log),
              "step,lm,sparse,fd,total,adjacency_mean\n1,2.5,0.5,0.75,2.5755,0.5\n2,1,0.25,0.5,1.05025,0.25\n");
}

TEST(Checkpoint, RoundTripIsBitwiseAndForwardMatches) {
    TempDir dir("tabgrade_ckpt_rt");
    const auto res = small_run(TrainMode::Full, 5);
    save_checkpoint(res.checkpoint, dir.path / "ck");
    const Checkpoint back = load_checkpoint(dir.path / "ck");
    ASSERT_EQ(back.model.params.size(), res.checkpoint.model.params.size());
    for (std::size_t i = 0; i < back.model.params.size(); ++i) {
        EXPECT_EQ(back.model.params[i].name, res.checkpoint.model.params[i].name);
        EXPECT_EQ(back.model.params[i].graph, res.checkpoint.model.params[i].graph);
        EXPECT_TRUE(bytes_equal(back.model.params[i].value, res.checkpoint.model.params[i].value));
    }
    EXPECT_EQ(back.vocab, res.checkpoint.vocab);
    EXPECT_EQ(back.schema, res.checkpoint.schema);
    EXPECT_EQ(back.model.config, res.checkpoint.model.config);
    const std::vector<TokenId> seq{0, 6, 4, 9, 3, 7, 4, 14, 1};
    const auto f1 = transformer_forward(res.checkpoint.model, seq);
    const auto f2 = transformer_forward(back.model, seq);
    EXPECT_TRUE(bytes_equal(f1.logits, f2.logits));
}

TEST(Checkpoint, CorruptionIsDetected) {
    TempDir dir("tabgrade_ckpt_bad");
    const auto res = small_run(TrainMode::Full, 1);
    const fs::path good = dir.path / "good";
    save_checkpoint(res.checkpoint, good);
    const std::string blob = read_file(good / "tensors.bin");
    const std::string manifest = read_file(good / "manifest.json");

    auto variant = [&](const std::string& name, const std::string& b, const std::string& m) {
        const fs::path p = dir.path / name;
        fs::create_directories(p);
        write_file_atomic(p / "tensors.bin", b);
        write_file_atomic(p / "manifest.json", m);
        return p;
    };
    auto expect_error = [](const fs::path& p, const std::string& needle) {
        try {
            load_checkpoint(p);
            ADD_FAILURE() << "no error for " << p;
        } catch (const CheckpointError& e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    expect_error(variant("trunc", blob.substr(0, blob.size() - 8), manifest), "trunc");
    expect_error(variant("extra", blob + "xxxxxxxx", manifest), "trailing");
    std::string flipped = blob;
    flipped[flipped.size() / 2] ^= 0x01;
    expect_error(variant("flip", flipped, manifest), "digest");

    auto doc = nlohmann::json::parse(manifest);
    doc["version"] = "tabgrade-ckpt-0";
    expect_error(variant("ver", blob, doc.dump()), "version");
    doc = nlohmann::json::parse(manifest);
    doc["vocab_hash"] = "0000000000000000";
    expect_error(variant("hash", blob, doc.dump()), "vocab");
    doc = nlohmann::json::parse(manifest);
    doc["tensors"][0]["shape"][0] = doc["tensors"][0]["shape"][0].get<int>() + 1;
    expect_error(variant("shape", blob, doc.dump()), "shape");
    EXPECT_THROW(load_checkpoint(dir.path / "missing"), CheckpointError);
}

TEST(Config, DefaultsParseAndCarryReferenceValues) {
    const RunConfig c = parse_run_config(default_run_config_text(), "/base");
    EXPECT_EQ(c.train.learning_rate, 5e-5);
    EXPECT_EQ(c.train.batch_size, 64u);
    EXPECT_EQ(c.weights.lambda_sparse, 0.001);
    EXPECT_EQ(c.weights.lambda_fd, 0.1);
    EXPECT_EQ(c.sample.temperature, 0.7);
    EXPECT_EQ(c.sample.top_p, 0.95);
    EXPECT_EQ(c.input, fs::path("/base/train.csv"));
    EXPECT_EQ(c.checkpoint, fs::path("/base/ckpt"));
}

TEST(Config, OverridesAndComments) {
    const RunConfig c = parse_run_config(
        "# run\n[train]\ninput = data.csv\ncheckpoint = \"out\"\nmode = light\nsteps = 12  # short\n"
        "[model]\nmodel_dim = 32\n[loss]\nlambda_fd = 0\n");
    EXPECT_EQ(c.train.mode, TrainMode::Light);
    EXPECT_EQ(c.train.steps, 12u);
    EXPECT_EQ(c.model.model_dim, 32u);
    EXPECT_EQ(c.weights.lambda_fd, 0.0);
    EXPECT_FALSE(c.fds.has_value());
}

TEST(Config, ErrorsNameTheKey) {
    auto key_of = [](const std::string& text) -> std::string {
        try {
            parse_run_config(text);
        } catch (const ConfigError& e) {
            return e.key();
        }
        return "<no error>";
    };
    const std::string base = "[train]\ninput = a.csv\ncheckpoint = c\n";
    EXPECT_EQ(key_of(base + "learning_rat = 1\n"), "train.learning_rat");
    EXPECT_EQ(key_of(base + "batch_size = 0\n"), "train.batch_size");
    EXPECT_EQ(key_of(base + "batch_size = -3\n"), "train.batch_size");
    EXPECT_EQ(key_of(base + "mode = medium\n"), "train.mode");
    EXPECT_EQ(key_of(base + "steps = 5\nsteps = 6\n"), "train.steps");
    EXPECT_EQ(key_of(base + "[loss]\nalpha = 1.5\n"), "loss.alpha");
    EXPECT_EQ(key_of(base + "[loss]\nlambda_fd = -1\n"), "loss.lambda_fd");
    EXPECT_EQ(key_of(base + "[model]\nn_heads = 0\n"), "model.n_heads");
    EXPECT_EQ(key_of(base + "[sample]\ntop_p = 0\n"), "sample.top_p");
    EXPECT_EQ(key_of("[train]\ncheckpoint = c\n"), "train.input");
    EXPECT_THROW(parse_run_config(base + "[optimizer]\n"), ConfigError);
    EXPECT_THROW(parse_run_config(base + "garbage line\n"), ConfigError);
}
