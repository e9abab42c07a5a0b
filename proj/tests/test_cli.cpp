#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "tabgrade/checkpoint.hpp"
#include "tabgrade/fd.hpp"
#include "tabgrade/io.hpp"
#include "tabgrade/table.hpp"

using namespace tabgrade;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("tabgrade_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path path(const std::string& name) const { return dir_ / name; }

    void write(const std::string& name, const std::string& text) const { write_file_atomic(path(name), text); }

    // Runs the binary, returns its exit code; stderr is kept in err_.
    int run(const std::string& args) {
        const fs::path err = path("stderr.txt");
        const std::string cmd = std::string("TABGRADE_THREADS=2 ") + TABGRADE_CLI_PATH + " " + args + " > " +
                                path("stdout.txt").string() + " 2> " + err.string();
        const int status = std::system(cmd.c_str());
        err_ = fs::exists(err) ? read_file(err) : "";
        out_ = fs::exists(path("stdout.txt")) ? read_file(path("stdout.txt")) : "";
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    std::string train_config(std::size_t steps) const {
        return "[train]\ninput = \"train.csv\"\nfds = \"fds.json\"\ncheckpoint = \"ckpt\"\nlog = \"log.csv\"\n"
               "steps = " + std::to_string(steps) + "\nbatch_size = 8\nlearning_rate = 0.01\nseed = 4\n"
               "[model]\nmodel_dim = 16\nffn_dim = 32\nmax_seq_len = 40\n";
    }

    void write_income() const {
        write("train.csv",
              "Age,Income,Job\n20,<=50K,clerk\n25,>50K,nurse\n30,<=50K,smith\n35,>50K,pilot\n"
              "40,<=50K,clerk\n45,>50K,nurse\n50,<=50K,smith\n55,>50K,pilot\n");
    }

    fs::path dir_;
    std::string err_, out_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(run(""), 1);
    EXPECT_EQ(run("discover --input " + path("missing.csv").string() + " --out x.json"), 1);
    EXPECT_FALSE(err_.empty());
    EXPECT_EQ(run("frobnicate"), 1);
    EXPECT_EQ(run("discover --help"), 0);
    EXPECT_NE(out_.find("--max-lhs"), std::string::npos);
    EXPECT_NE(out_.find("--sample-pairs"), std::string::npos);
}

TEST_F(Cli, DiscoverTaneAndHyfdAgree) {
    write("ab.csv", "A,B\na,1\na,1\nb,2\n");
    ASSERT_EQ(run("discover --input " + path("ab.csv").string() + " --algo tane --max-lhs 1 --out " +
                  path("t.json").string()),
              0)
        << err_;
    ASSERT_EQ(run("discover --input " + path("ab.csv").string() + " --algo hyfd --seed 3 --max-lhs 1 --out " +
                  path("h.json").string()),
              0)
        << err_;
    const auto t = nlohmann::json::parse(read_file(path("t.json")));
    const auto h = nlohmann::json::parse(read_file(path("h.json")));
    EXPECT_EQ(t["fds"], h["fds"]);
    EXPECT_EQ(t["algorithm"], "tane");
    EXPECT_EQ(h["algorithm"], "hyfd");
    const FdSet set = load_fdset(path("t.json"));
    ASSERT_EQ(set.fds.size(), 2u);
    EXPECT_EQ(set.fds[0], FunctionalDependency({"A"}, "B"));
    EXPECT_EQ(set.fds[1], FunctionalDependency({"B"}, "A"));
    EXPECT_NE(err_.find("discovered 2"), std::string::npos);
}

TEST_F(Cli, DefaultConfigCarriesReferenceValues) {
    ASSERT_EQ(run("default-config"), 0);
    EXPECT_NE(out_.find("learning_rate = 5e-05"), std::string::npos) << out_;
    EXPECT_NE(out_.find("batch_size = 64"), std::string::npos);
    EXPECT_NE(out_.find("lambda_sparse = 0.001"), std::string::npos);
    EXPECT_NE(out_.find("lambda_fd = 0.1"), std::string::npos);
    EXPECT_NE(out_.find("temperature = 0.7"), std::string::npos);
    EXPECT_NE(out_.find("top_p = 0.95"), std::string::npos);
}

TEST_F(Cli, TrainSampleRoundTrip) {
    write_income();
    ASSERT_EQ(run("discover --input " + path("train.csv").string() + " --out " + path("fds.json").string()), 0);
    write("run.toml", train_config(60));
    ASSERT_EQ(run("train --config " + path("run.toml").string()), 0) << err_;
    EXPECT_TRUE(fs::exists(path("ckpt") / "manifest.json"));
    EXPECT_EQ(read_file(path("log.csv")).substr(0, 38), "step,lm,sparse,fd,total,adjacency_mean");
    const std::string blob = read_file(path("ckpt") / "tensors.bin");
    ASSERT_EQ(run("train --config " + path("run.toml").string()), 0);
    EXPECT_EQ(read_file(path("ckpt") / "tensors.bin"), blob);

    ASSERT_EQ(run("sample --ckpt " + path("ckpt").string() + " --n 0 --out " + path("empty.csv").string()), 0);
    EXPECT_EQ(read_file(path("empty.csv")), "Age,Income,Job\n");
    EXPECT_TRUE(fs::exists(path("empty.csv.stats.json")));

    const int code = run("sample --ckpt " + path("ckpt").string() + " --n 3 --max-retries 0 --temperature 5 --top-p 1 "
                         "--out " + path("hot.csv").string());
    // Seeded, so this always lands on the same failing draw.
    EXPECT_EQ(code, 2);
    const auto stats = nlohmann::json::parse(read_file(path("hot.csv.stats.json")));
    EXPECT_GT(stats["failed_attempts"].get<int>(), 0);
    EXPECT_NE(err_.find("retry budget exhausted"), std::string::npos);

    ASSERT_EQ(run("sample --ckpt " + path("ckpt").string() + " --n 4 --max-retries 200 --prompt 'Income=<=50K' --out " +
                  path("p.csv").string()),
              0)
        << err_;
    const Table prompted = load_csv(path("p.csv"));
    ASSERT_EQ(prompted.num_rows(), 4u);
    for (const auto& row : prompted.rows()) EXPECT_EQ(std::get<std::string>(row[1]), "<=50K");
    EXPECT_EQ(run("sample --ckpt " + path("ckpt").string() + " --n 2 --prompt Salary=3 --out " +
                  path("p.csv").string()),
              1);
}

TEST_F(Cli, LightModeReportsGraphParameterCount) {
    write_income();
    ASSERT_EQ(run("discover --input " + path("train.csv").string() + " --out " + path("fds.json").string()), 0);
    write("run.toml", train_config(3));
    ASSERT_EQ(run("train --config " + path("run.toml").string() + " --mode light"), 0) << err_;
    // d = 16, H = 2: d_k = 8, per head 8 * 16 + 8 = 136, times H * L = 4.
    EXPECT_NE(err_.find("mode light, trainable parameters 544 of"), std::string::npos) << err_;
    EXPECT_NE(err_.find("(graph modules 544)"), std::string::npos) << err_;
    EXPECT_EQ(load_checkpoint(path("ckpt")).mode, TrainMode::Light);
}

TEST_F(Cli, ConfigErrorNamesKey) {
    write_income();
    write("fds.json", R"({"fds": []})");
    write("run.toml", train_config(3) + "[loss]\nlambda_fdd = 0.1\n");
    EXPECT_EQ(run("train --config " + path("run.toml").string()), 1);
    EXPECT_NE(err_.find("loss.lambda_fdd"), std::string::npos) << err_;
}

TEST_F(Cli, EvaluateSectionsAndErrors) {
    write("real.csv", "education,education-num,hours\nBachelors,13,40\nHS-grad,9,35\nMasters,14,50\n"
                      "Bachelors,13,45\nHS-grad,9,30\nMasters,14,55\n");
    write("synth.csv", "education,education-num,hours\nBachelors,999,40\nHS-grad,9,35\nMasters,14,50\n"
                       "Bachelors,13,42\nHS-grad,9,31\nMasters,14,52\n");
    write("rules.json", R"([{"fd": {"lhs": ["education"], "rhs": "education-num"}}])");
    ASSERT_EQ(run("evaluate --real " + path("real.csv").string() + " --synth " + path("real.csv").string() +
                  " --metrics dcr --out " + path("self.json").string()),
              0)
        << err_;
    EXPECT_EQ(nlohmann::json::parse(read_file(path("self.json")))["dcr"], 0.0);

    ASSERT_EQ(run("evaluate --real " + path("real.csv").string() + " --synth " + path("synth.csv").string() +
                  " --metrics all --rules " + path("rules.json").string() +
                  " --target hours --task regression --folds 2 --bins 20 --out " + path("all.json").string()),
              0)
        << err_;
    const auto report = nlohmann::json::parse(read_file(path("all.json")));
    for (const char* key : {"dcr", "correlation_error", "violation_pct", "mle", "discriminator_accuracy"}) {
        EXPECT_TRUE(report.contains(key)) << key;
    }
    EXPECT_NEAR(report["violation_pct"][0]["violation_pct"].get<double>(), 100.0 / 6.0, 1e-9);
    EXPECT_EQ(report["violation_pct"][0]["violations"], 1);

    EXPECT_EQ(run("evaluate --real " + path("real.csv").string() + " --synth " + path("synth.csv").string() +
                  " --metrics dcr,sharpness --out " + path("x.json").string()),
              1);
    write("other.csv", "a,b\n1,2\n");
    EXPECT_EQ(run("evaluate --real " + path("real.csv").string() + " --synth " + path("other.csv").string() +
                  " --metrics dcr --out " + path("x.json").string()),
              1);
    EXPECT_FALSE(fs::exists(path("x.json")));
}
