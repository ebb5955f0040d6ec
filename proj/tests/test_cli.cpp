#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include "tfpca/cli.hpp"

namespace fs = std::filesystem;
using tfpca::cli::run;

namespace {

struct Result {
    int status;
    std::string out, err;
};

Result cli(std::vector<std::string> args) {
    args.insert(args.begin(), "tfpca");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int s = run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {s, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Cli : public ::testing::Test {
protected:
    fs::path dir;
    void SetUp() override {
        dir = fs::temp_directory_path() /
              ("tfpca_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
               std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }
    std::string p(const std::string& rel) const { return (dir / rel).string(); }

    void simulate(const std::string& out, int n = 40) {
        const auto r = cli({"simulate", "--case", "2", "--n", std::to_string(n), "--seed", "3", "--out", p(out)});
        ASSERT_EQ(r.status, 0) << r.err;
    }
};

}  // namespace

TEST_F(Cli, SimulateWritesDataAndManifest) {
    simulate("sim");
    for (auto f : {"data.csv", "truth.json", "responses_identity.csv", "responses_logit.csv", "config.json", "manifest.json"})
        EXPECT_TRUE(fs::exists(dir / "sim" / f)) << f;
    const auto manifest = nlohmann::json::parse(slurp(dir / "sim" / "manifest.json"));
    EXPECT_EQ(manifest["command"], "simulate");
    EXPECT_EQ(manifest["outputs"]["data.csv"], tfpca::cli::sha256_hex(slurp(dir / "sim" / "data.csv")));
    EXPECT_EQ(manifest["config"]["case"], 2);
    EXPECT_TRUE(manifest["versions"].contains("eigen"));
}

TEST_F(Cli, RerunIsByteIdentical) {
    simulate("a");
    simulate("b");
    for (auto f : {"data.csv", "truth.json", "manifest.json"})
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    ASSERT_EQ(cli({"fit-mean", "--data", p("a/data.csv"), "--lower", "-1", "--upper", "1", "--out", p("m1")}).status, 0);
    ASSERT_EQ(cli({"fit-mean", "--data", p("a/data.csv"), "--lower", "-1", "--upper", "1", "--out", p("m2")}).status, 0);
    EXPECT_EQ(slurp(dir / "m1" / "mean_variance.json"), slurp(dir / "m2" / "mean_variance.json"));
    const auto m1 = nlohmann::json::parse(slurp(dir / "m1" / "manifest.json"));
    const auto m2 = nlohmann::json::parse(slurp(dir / "m2" / "manifest.json"));
    EXPECT_EQ(m1["outputs"], m2["outputs"]);
}

TEST_F(Cli, UnknownFlagIsUsageError) {
    EXPECT_EQ(cli({"simulate", "--bogus", "1", "--out", p("x")}).status, 64);
    EXPECT_EQ(cli({"simulate", "--case", "2"}).status, 64);  // no --out
    EXPECT_EQ(cli({}).status, 64);
}

TEST_F(Cli, MissingInputLeavesNoOutputs) {
    const auto r = cli({"fit-mean", "--data", p("nope.csv"), "--out", p("fm")});
    EXPECT_EQ(r.status, 66);
    EXPECT_FALSE(fs::exists(dir / "fm"));
}

TEST_F(Cli, InvalidValueIsValidationError) {
    simulate("sim");
    EXPECT_EQ(cli({"fit-mean", "--data", p("sim/data.csv"), "--lower", "1", "--upper", "-1", "--out", p("x")}).status, 1);
    EXPECT_EQ(cli({"fit-mean", "--data", p("sim/data.csv"), "--bandwidths", "0.1,-2", "--out", p("x")}).status, 1);
    EXPECT_EQ(cli({"simulate", "--case", "7", "--out", p("x")}).status, 1);
    EXPECT_FALSE(fs::exists(dir / "x"));
}

TEST_F(Cli, FullPipeline) {
    simulate("sim", 60);
    const std::vector<std::string> data{"--data", p("sim/data.csv"), "--lower", "-1", "--upper", "1"};
    auto with = [&](std::vector<std::string> head, std::vector<std::string> tail) {
        head.insert(head.end(), data.begin(), data.end());
        head.insert(head.end(), tail.begin(), tail.end());
        return cli(head);
    };
    auto r = with({"fit-mean"}, {"--out", p("mean")});
    ASSERT_EQ(r.status, 0) << r.err;
    r = with({"fit-cov"}, {"--mean", p("mean/mean_variance.json"), "--out", p("cov")});
    ASSERT_EQ(r.status, 0) << r.err;
    for (auto f : {"covariance.json", "sigma.csv", "noise.csv", "eigenfunctions.csv", "fve.csv"})
        EXPECT_TRUE(fs::exists(dir / "cov" / f)) << f;
    r = with({"scores"}, {"--mean", p("mean/mean_variance.json"), "--cov", p("cov/covariance.json"), "--m", "20",
                          "--out", p("scores")});
    ASSERT_EQ(r.status, 0) << r.err;
    r = cli({"gflm", "--scores", p("scores/scores.csv"), "--covariates", p("sim/responses_identity.csv"), "--out",
             p("gflm")});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto fit = nlohmann::json::parse(slurp(dir / "gflm" / "fit.json"));
    EXPECT_EQ(fit["link"], "identity");
    r = cli({"gflm", "--scores", p("scores/scores.csv"), "--covariates", p("sim/responses_logit.csv"), "--link", "logit",
             "--K", "1", "--out", p("gflm_logit")});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto preds = slurp(dir / "gflm_logit" / "predictions.csv");
    EXPECT_EQ(preds.substr(0, preds.find('\n')), "unit_id,y,fitted,class");
}

TEST_F(Cli, ConfigPrecedence) {
    {
        std::ofstream cfg(dir / "cfg.json");
        cfg << R"({"simulate": {"n": 30, "seed": 9, "case": 1}})";
    }
    auto r = cli({"simulate", "--config", p("cfg.json"), "--n", "25", "--out", p("s")});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto used = nlohmann::json::parse(slurp(dir / "s" / "config.json"));
    EXPECT_EQ(used["n"], 25);     // flag beats file
    EXPECT_EQ(used["seed"], 9);   // file beats default
    EXPECT_EQ(used["case"], 1);
    EXPECT_EQ(used["lower"], -1.0);  // default
    {
        std::ofstream cfg(dir / "bad.json");
        cfg << R"({"nn": 3})";
    }
    EXPECT_EQ(cli({"simulate", "--config", p("bad.json"), "--out", p("t")}).status, 1);
    {
        std::ofstream cfg(dir / "badtype.json");
        cfg << R"({"n": "many"})";
    }
    EXPECT_EQ(cli({"simulate", "--config", p("badtype.json"), "--out", p("t")}).status, 1);
    EXPECT_EQ(cli({"simulate", "--config", p("missing.json"), "--out", p("t")}).status, 66);
}

TEST_F(Cli, ValidateReportsFailures) {
    {
        std::ofstream good(dir / "good.csv");
        good << "unit_id,time,value\na,0.1,0.5\na,0.4,1\nb,0.2,-1\n";
        std::ofstream bad(dir / "bad.csv");
        bad << "unit_id,time,value,flag\na,0.1,0.5,none\na,0.4,1,none\n";
    }
    auto r = cli({"validate", "--data", p("good.csv"), "--lower", "-1", "--upper", "1"});
    EXPECT_EQ(r.status, 0) << r.out << r.err;
    EXPECT_NE(r.out.find("PASS"), std::string::npos);
    r = cli({"validate", "--data", p("bad.csv"), "--lower", "-1", "--upper", "1", "--flag-mode", "explicit"});
    EXPECT_EQ(r.status, 1);
    EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

TEST_F(Cli, ReproduceTinyRun) {
    const auto r = cli({"reproduce", "--table", "1", "--replicates", "2", "--n", "40", "--out", p("rep")});
    ASSERT_EQ(r.status, 0) << r.err;
    for (auto f : {"table1.csv", "comparison.csv", "records.csv", "summary.csv"})
        EXPECT_TRUE(fs::exists(dir / "rep" / f)) << f;
    const auto comp = slurp(dir / "rep" / "comparison.csv");
    EXPECT_EQ(comp.substr(0, comp.find('\n')),
              "table,case,metric,method,reference,desk,ratio,within_50pct,reference_best,desk_best,best_match,"
              "proposed_vs_naive_match");
}

TEST_F(Cli, BinaryExitCodes) {
    const std::string bin = TFPCA_CLI_PATH;
    auto status = [](const std::string& cmd) {
        const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
        return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
    };
    EXPECT_EQ(status(bin + " --version"), 0);
    EXPECT_EQ(status(bin + " simulate --nope"), 64);
    EXPECT_EQ(status(bin + " fit-mean --data " + p("absent.csv") + " --out " + p("o")), 66);
    EXPECT_EQ(status(bin + " simulate --n 20 --out " + p("o")), 0);
}
