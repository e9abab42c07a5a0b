#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "tabgrade/sampler.hpp"
#include "tabgrade/trainer.hpp"

using namespace tabgrade;

namespace {

Table income_table() {
    const Schema schema({{"Age", ColumnKind::Integer},
                         {"Income", ColumnKind::Categorical},
                         {"Job", ColumnKind::Categorical}});
    std::vector<Row> rows;
    const char* jobs[] = {"clerk", "nurse", "smith", "pilot"};
    for (std::int64_t i = 0; i < 8; ++i) {
        rows.push_back({std::int64_t{20 + 5 * i}, std::string(i % 2 ? ">50K" : "<=50K"), std::string(jobs[i % 4])});
    }
    return Table(schema, rows);
}

// Small model trained briefly on the 8-row table; shared by the slower tests.
const Checkpoint& trained() {
    static const Checkpoint ckpt = [] {
        const Table t = income_table();
        TrainConfig c;
        c.steps = 300;
        c.batch_size = 8;
        c.learning_rate = 1e-2;
        c.seed = 1;
        ModelConfig m;
        m.model_dim = 32;
        m.ffn_dim = 64;
        m.max_seq_len = 40;
        return train(t, tane_discover(t), c, LossWeights{}, LossOptions{}, m).checkpoint;
    }();
    return ckpt;
}

}  // namespace

TEST(Nucleus, HandExample) {
    const std::vector<double> probs{0.5, 0.3, 0.2};
    const auto out = nucleus_filter(probs, 0.7);
    EXPECT_NEAR(out[0], 0.625, 1e-12);
    EXPECT_NEAR(out[1], 0.375, 1e-12);
    EXPECT_EQ(out[2], 0.0);
}

TEST(Nucleus, IdentityCasesAndTies) {
    const std::vector<double> probs{0.1, 0.4, 0.2, 0.3};
    const auto same = nucleus_filter(probs, 1.0);
    for (std::size_t i = 0; i < probs.size(); ++i) EXPECT_NEAR(same[i], probs[i], 1e-15);
    const std::vector<double> onehot{0.0, 1.0, 0.0};
    for (double p : {0.01, 0.5, 1.0}) EXPECT_EQ(nucleus_filter(onehot, p), onehot);
    // Equal mass: the lower id is kept first.
    const auto tie = nucleus_filter(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 0.5);
    EXPECT_EQ(tie, (std::vector<double>{0.5, 0.5, 0.0, 0.0}));
    EXPECT_ANY_THROW(nucleus_filter(probs, 0.0));
    EXPECT_ANY_THROW(nucleus_filter(probs, 1.5));
}

TEST(Nucleus, SupportCarriesAtLeastP) {
    Rng rng(6);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.uniform_index(30);
        std::vector<double> probs(n);
        for (auto& v : probs) v = std::pow(rng.uniform01(), 3.0);
        const double sum = std::accumulate(probs.begin(), probs.end(), 0.0);
        if (sum == 0.0) continue;
        for (auto& v : probs) v /= sum;
        const double p = 0.05 + 0.95 * rng.uniform01();
        const auto out = nucleus_filter(probs, p);
        double kept = 0.0, min_kept = 1.0, max_dropped = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (out[i] > 0.0) {
                kept += probs[i];
                min_kept = std::min(min_kept, probs[i]);
            } else {
                max_dropped = std::max(max_dropped, probs[i]);
            }
        }
        ASSERT_GE(kept, p - 1e-12);
        ASSERT_GE(min_kept, max_dropped);
        ASSERT_NEAR(std::accumulate(out.begin(), out.end(), 0.0), 1.0, 1e-12);
    }
}

TEST(SampleToken, GreedyPicksArgmax) {
    GenerationConfig g;
    g.greedy = true;
    Rng rng(1);
    RowVector logits(3);
    logits << 1.0, 3.0, 2.0;
    EXPECT_EQ(sample_token(logits, g, rng), 1);
    RowVector tied(3);
    tied << 2.0, 0.0, 2.0;
    EXPECT_EQ(sample_token(tied, g, rng), 0);
}

TEST(SampleToken, TemperatureOneFullSupportIsSoftmax) {
    GenerationConfig g;
    g.temperature = 1.0;
    g.top_p = 1.0;
    RowVector logits(3);
    logits << 0.0, std::log(2.0), std::log(5.0);
    const auto d = sampling_distribution(logits, g);
    EXPECT_NEAR(d[0], 0.125, 1e-15);
    EXPECT_NEAR(d[1], 0.25, 1e-15);
    EXPECT_NEAR(d[2], 0.625, 1e-15);
}

TEST(SampleToken, MonteCarloMatchesFilteredDistribution) {
    GenerationConfig g;
    g.temperature = 0.7;
    g.top_p = 0.9;
    RowVector logits(8);
    logits << 1.2, -0.3, 0.8, 2.0, 0.0, -1.5, 1.5, 0.4;
    const auto expect = sampling_distribution(logits, g);
    Rng rng(77);
    std::vector<double> counts(8, 0.0);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) counts[static_cast<std::size_t>(sample_token(logits, g, rng))] += 1.0;
    for (std::size_t v = 0; v < 8; ++v) EXPECT_NEAR(counts[v] / draws, expect[v], 0.01) << v;
    EXPECT_EQ(expect[5], 0.0);
    EXPECT_EQ(counts[5], 0.0);
}

TEST(Config, Validation) {
    GenerationConfig g;
    EXPECT_NO_THROW(g.validate());
    EXPECT_EQ(g.temperature, 0.7);
    EXPECT_EQ(g.top_p, 0.95);
    EXPECT_EQ(g.max_retries_per_row, 10u);
    g.temperature = 0.0;
    EXPECT_ANY_THROW(g.validate());
    g = GenerationConfig{};
    g.top_p = 1.01;
    EXPECT_ANY_THROW(g.validate());
}

TEST(Prompt, ParseAndEncode) {
    const Table t = income_table();
    const Vocabulary v = Vocabulary::build(t);
    const Prompt p = parse_prompt("Income=<=50K,Age=35", t.schema());
    ASSERT_EQ(p.fixed.size(), 2u);
    EXPECT_EQ(p.fixed[0].first, "Income");
    EXPECT_EQ(std::get<std::int64_t>(p.fixed[1].second), 35);
    EXPECT_EQ(render_text(encode_prompt(p, t.schema(), v), v), "Income is <=50K, Age is 35, ");
    EXPECT_EQ(encode_prompt(Prompt{}, t.schema(), v).ids, (std::vector<TokenId>{Vocabulary::kBos}));
    EXPECT_ANY_THROW(parse_prompt("Salary=1", t.schema()));
    EXPECT_ANY_THROW(parse_prompt("Age=old", t.schema()));
    EXPECT_ANY_THROW(parse_prompt("Age=1,Age=2", t.schema()));
    EXPECT_ANY_THROW(encode_prompt(parse_prompt("Job=astronaut", t.schema()), t.schema(), v));
}

TEST(SampleRows, UntrainedModelExhaustsRetries) {
    const Table t = income_table();
    const Vocabulary v = Vocabulary::build(t);
    ModelConfig m;
    m.model_dim = 16;
    m.ffn_dim = 32;
    m.max_seq_len = 40;
    m.vocab_size = v.size();
    const ModelState model = init_model(m, 5);
    GenerationConfig g;
    g.temperature = 1.0;
    g.top_p = 1.0;
    g.max_retries_per_row = 19;
    try {
        sample_rows(model, 1, g, t.schema(), v);
        FAIL() << "an untrained model should not produce a valid row";
    } catch (const RetryBudgetExhausted& e) {
        EXPECT_EQ(e.row(), 0u);
        EXPECT_EQ(e.stats().attempts, 20u);
        EXPECT_EQ(e.stats().failed_attempts, 20u);
        EXPECT_GT(e.stats().count(ParseFailure::MalformedStructure), 0u);
    }
}

TEST(SampleRows, ZeroRowsIsEmpty) {
    const Checkpoint& ck = trained();
    const auto res = sample_rows(ck.model, 0, GenerationConfig{}, ck.schema, ck.vocab);
    EXPECT_EQ(res.table.num_rows(), 0u);
    EXPECT_EQ(res.stats.attempts, 0u);
}

TEST(SampleRows, DeterministicAndThreadInvariant) {
    const Checkpoint& ck = trained();
    GenerationConfig g;
    g.seed = 42;
    g.max_retries_per_row = 50;
    const auto a = sample_rows(ck.model, 12, g, ck.schema, ck.vocab);
    const auto b = sample_rows(ck.model, 12, g, ck.schema, ck.vocab);
    g.threads = 3;
    const auto c = sample_rows(ck.model, 12, g, ck.schema, ck.vocab);
    EXPECT_EQ(format_csv(a.table), format_csv(b.table));
    EXPECT_EQ(format_csv(a.table), format_csv(c.table));
    EXPECT_EQ(a.stats.to_json(), c.stats.to_json());
    EXPECT_EQ(a.stats.rows, 12u);
    EXPECT_EQ(a.stats.attempts, a.stats.rows + a.stats.failed_attempts);
}

TEST(SampleRows, PromptIsAHardPrefix) {
    const Checkpoint& ck = trained();
    GenerationConfig g;
    g.seed = 3;
    g.max_retries_per_row = 100;
    const auto res = sample_rows(ck.model, 10, g, ck.schema, ck.vocab, parse_prompt("Income=<=50K", ck.schema));
    ASSERT_EQ(res.table.num_rows(), 10u);
    for (const auto& row : res.table.rows()) EXPECT_EQ(std::get<std::string>(row[1]), "<=50K");
}

TEST(SampleRows, GreedyDecodeAgreesWithFullForward) {
    const Checkpoint& ck = trained();
    GenerationConfig g;
    g.greedy = true;
    const TokenSequence bos{{Vocabulary::kBos}};
    for (std::uint64_t s = 0; s < 10; ++s) {
        // Vary the start with a one-feature prefix so the 10 rows differ.
        const Table t = income_table();
        const Prompt p = parse_prompt("Age=" + std::to_string(20 + 5 * (s % 8)), t.schema());
        Rng rng(s);
        const auto seq = generate_sequence(ck.model, encode_prompt(p, ck.schema, ck.vocab), g, rng);
        ASSERT_TRUE(seq.has_value());
        const auto f = transformer_forward(ck.model, seq->ids);
        const std::size_t start = encode_prompt(p, ck.schema, ck.vocab).size();
        for (std::size_t t2 = start; t2 < seq->size(); ++t2) {
            Eigen::Index best = 0;
            f.logits.row(static_cast<Eigen::Index>(t2 - 1)).maxCoeff(&best);
            ASSERT_EQ(static_cast<TokenId>(best), seq->ids[t2]) << "position " << t2;
        }
    }
}

TEST(Stats, MergeAndJson) {
    SamplingStats a, b;
    a.requested = 2;
    a.rows = 2;
    a.attempts = 3;
    a.failed_attempts = 1;
    a.failures[static_cast<std::size_t>(ParseFailure::TypeMismatch)] = 1;
    b.requested = 1;
    b.rows = 1;
    b.attempts = 1;
    a.merge(b);
    EXPECT_EQ(a.rows, 3u);
    EXPECT_EQ(a.attempts, 4u);
    const auto j = a.to_json();
    EXPECT_EQ(j["attempts"], 4);
    EXPECT_EQ(j["failures"]["TypeMismatch"], 1);
}
