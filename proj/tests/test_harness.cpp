#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "distill/data.hpp"
#include "distill/errors.hpp"
#include "distill/harness.hpp"
#include "mock_server.hpp"

using namespace distill;

namespace {

const std::filesystem::path kCli = DISTILL_CLI_PATH;

class TempDir {
public:
    TempDir() {
        path_ = std::filesystem::temp_directory_path() / ("distill_harness_" + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// Oracle that remembers every batch of inputs it was asked about.
class CountingTeacher : public Teacher {
public:
    explicit CountingTeacher(double noise = 0.0) : inner_(TaskKind::kArithmetic, noise, 5) {}
    std::vector<ExtractionResult> extract(const std::vector<std::string>& inputs) override {
        calls.push_back(inputs);
        return inner_.extract(inputs);
    }
    std::vector<std::vector<std::string>> calls;

private:
    OracleTeacher inner_;
};

ExperimentConfig small_config(const std::filesystem::path& out) {
    ExperimentConfig c;
    c.task.train_size = 40;
    c.task.test_size = 16;
    c.task.seed = 3;
    c.methods = {Variant::kStandardDistill, Variant::kStepByStep};
    c.fractions = {0.5, 1.0};
    c.sizes = {"tiny"};
    c.seeds = {0, 1, 2};
    c.output_dir = out;
    c.training.max_steps = 3;
    c.training.batch_size = 8;
    c.training.learning_rate = 0.05;
    c.training.max_input_len = 16;
    c.training.max_output_len = 16;
    return c;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += line.empty() ? 0 : 1;
    return n;
}

int run_cli(const std::string& args) {
    const std::string cmd = kCli.string() + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Scoring

TEST(ExactMatchTest, Examples) {
    EXPECT_TRUE(exact_match(" (a) club ", "(a) club"));
    EXPECT_FALSE(exact_match("1", "1.0"));
    EXPECT_FALSE(exact_match("", "x"));
    EXPECT_TRUE(exact_match("Entailment", "entailment"));
    EXPECT_TRUE(exact_match("a   b", "a b"));
}

TEST(EvaluateTest, StubPredictors) {
    const Dataset test = gen_arithmetic(2, 50);
    std::map<std::string, std::string> gold;
    for (const auto& ex : test.examples) gold[ex.input()] = *ex.gold_label();
    EXPECT_EQ(evaluate([&](const std::string& x) { return gold.at(x); }, test), 1.0);
    EXPECT_EQ(evaluate([](const std::string&) { return std::string("wrong"); }, test), 0.0);

    std::mt19937_64 rng(8);
    std::map<std::string, std::string> answers;
    std::size_t hits = 0;
    for (const auto& ex : test.examples) {
        const bool right = rng() % 3 == 0;
        answers[ex.input()] = right ? " " + *ex.gold_label() + " " : *ex.gold_label() + "0";
        hits += right ? 1 : 0;
    }
    EXPECT_DOUBLE_EQ(evaluate([&](const std::string& x) { return answers.at(x); }, test),
                     static_cast<double>(hits) / test.size());
}

TEST(EvaluateTest, PredictorSeesOnlyInputs) {
    const Dataset test = gen_arithmetic(2, 10);
    FieldAccessRecorder rec;
    evaluate([](const std::string&) { return std::string("0"); }, test);
    EXPECT_EQ(rec.count(Field::kTeacherLabel), 0u);
    EXPECT_EQ(rec.count(Field::kTeacherRationale), 0u);
    EXPECT_EQ(rec.count(Field::kGoldRationale), 0u);
}

TEST(EvaluateTest, NeedsGoldLabels) {
    EXPECT_THROW(evaluate([](const std::string&) { return std::string(); }, Dataset{}), NoGoldLabels);
    Dataset test = gen_arithmetic(2, 3);
    test.examples[1].set_gold_label(std::nullopt);
    EXPECT_THROW(evaluate([](const std::string&) { return std::string(); }, test), NoGoldLabels);
}

// ---------------------------------------------------------------------------
// Records and summaries

TEST(FormatTest, ShortestRoundTrip) {
    EXPECT_EQ(format_double(0.0625), "0.0625");
    EXPECT_EQ(format_double(1.0), "1");
    EXPECT_EQ(format_double(0.1), "0.1");
    std::mt19937_64 rng(1);
    for (int i = 0; i < 1000; ++i) {
        const double v = std::uniform_real_distribution<double>(0, 1)(rng);
        EXPECT_EQ(std::stod(format_double(v)), v);
    }
}

TEST(RecordsTest, CsvRoundTripAndAppend) {
    TempDir dir;
    const auto path = dir / "records.csv";
    std::vector<MetricsRecord> rows{{"step_by_step", 0.125, "small", 2, 1000, 250, 0.3125, 1.5},
                                    {"standard_distill", 1.0, "base", 0, 99, 2000, 0.1, 0.25}};
    append_records_csv({rows[0]}, path);
    append_records_csv({rows[1]}, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, kRecordsHeader);
    const auto back = read_records_csv(path);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].method, "step_by_step");
    EXPECT_EQ(back[0].fraction, 0.125);
    EXPECT_EQ(back[0].test_accuracy, 0.3125);
    EXPECT_EQ(back[1].param_count, 99u);
    EXPECT_EQ(back[1].train_examples_used, 2000u);
    EXPECT_EQ(line_count(path), 3u);
}

TEST(SummaryTest, MeanAndStandardError) {
    std::vector<MetricsRecord> recs{{"step_by_step", 0.5, "small", 0, 1, 1, 0.4, 0},
                                    {"step_by_step", 0.5, "small", 1, 1, 1, 0.6, 0},
                                    {"standard_distill", 0.5, "small", 0, 1, 1, 0.3, 0}};
    const auto rows = summarize(recs);
    ASSERT_EQ(rows.size(), 2u);
    const auto& sbs = rows[0].method == "step_by_step" ? rows[0] : rows[1];
    const auto& sd = rows[0].method == "step_by_step" ? rows[1] : rows[0];
    EXPECT_DOUBLE_EQ(sbs.mean_accuracy, 0.5);
    EXPECT_NEAR(sbs.std_error, std::sqrt(0.02) / std::sqrt(2.0), 1e-15);
    EXPECT_EQ(sbs.n_seeds, 2u);
    EXPECT_EQ(sd.std_error, 0.0);
    EXPECT_EQ(sd.n_seeds, 1u);

    TempDir dir;
    write_summary_csv(rows, dir / "summary.csv");
    EXPECT_EQ(slurp(dir / "summary.csv").substr(0, kSummaryHeader.size()), kSummaryHeader);
    const auto back = read_summary_csv(dir / "summary.csv");
    ASSERT_EQ(back.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(back[i].mean_accuracy, rows[i].mean_accuracy);
        EXPECT_EQ(back[i].std_error, rows[i].std_error);
    }
}

TEST(SummaryTest, SchemaMismatchIsRejected) {
    TempDir dir;
    std::ofstream(dir / "bad.csv") << "method,fraction,size,mean_accuracy,std_error,n_seeds\n";
    EXPECT_ANY_THROW(read_summary_csv(dir / "bad.csv"));
}

TEST(CrossoverTest, MatchesExhaustiveScan) {
    std::mt19937_64 rng(17);
    const std::vector<double> grid = default_fraction_grid();
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<SummaryRow> rows;
        std::uniform_real_distribution<double> acc(0.0, 1.0);
        for (const char* m : {"step_by_step", "standard_distill", "standard_finetune"}) {
            for (double f : grid) rows.push_back({m, f, "small", std::round(acc(rng) * 8) / 8, 0.0, 4});
        }
        std::shuffle(rows.begin(), rows.end(), rng);

        double baseline = -1.0;
        for (const auto& r : rows) {
            if (r.method != "step_by_step" && r.fraction == 1.0) baseline = std::max(baseline, r.mean_accuracy);
        }
        std::optional<double> want;
        for (double f : grid) {
            for (const auto& r : rows) {
                if (!want && r.method == "step_by_step" && r.fraction == f && r.mean_accuracy >= baseline) want = f;
            }
        }
        const auto got = crossover(rows);
        ASSERT_EQ(got.size(), 1u);
        EXPECT_EQ(got[0].baseline_accuracy, baseline);
        EXPECT_EQ(got[0].fraction, want);
    }
}

// ---------------------------------------------------------------------------
// Config

TEST(ConfigTest, ParsesDocument) {
    const auto c = ExperimentConfig::from_json(R"({
        "task": {"kind": "arithmetic", "train_size": 100, "test_size": 20, "seed": 4},
        "methods": ["standard_distill", "step_by_step"],
        "fractions": [0.25, 1.0],
        "sizes": ["small"],
        "seeds": [0, 1, 2, 3],
        "teacher": {"kind": "oracle", "noise_rate": 0.2},
        "training": {"lambda": 0.5, "max_steps": 10},
        "output_dir": "out"
    })");
    EXPECT_EQ(c.task.train_size, 100u);
    EXPECT_EQ(c.methods.size(), 2u);
    EXPECT_EQ(c.teacher.noise_rate, 0.2);
    EXPECT_EQ(c.training.lambda, 0.5);
    EXPECT_EQ(c.training.max_steps, 10u);
    EXPECT_EQ(c.seeds.size(), 4u);
    EXPECT_EQ(c.supervision, SupervisionMode::kUnlabeled);
}

TEST(ConfigTest, ShippedConfigsParse) {
    const auto dir = std::filesystem::path(DISTILL_FIXTURE_DIR).parent_path().parent_path() / "configs";
    for (const char* name : {"fraction_sweep.json", "size_sweep.json", "remote_teacher.json"}) {
        std::ifstream in(dir / name);
        std::stringstream text;
        text << in.rdbuf();
        EXPECT_NO_THROW(ExperimentConfig::from_json(text.str())) << name;
    }
}

TEST(ConfigTest, RejectsBadDocuments) {
    const std::string base = R"("methods": ["step_by_step"], "fractions": [1.0], "sizes": ["tiny"], "seeds": [0])";
    EXPECT_NO_THROW(ExperimentConfig::from_json("{" + base + "}"));
    for (const std::string extra :
         {R"(, "colour": 1)", R"(, "task": {"kind": "arithmetic", "size": 3})", R"(, "training": {"lr": 0.1})",
          R"(, "teacher": {"kind": "oracle", "noise": 0.1})", R"(, "supervision": "both")"}) {
        EXPECT_THROW(ExperimentConfig::from_json("{" + base + extra + "}"), ConfigError) << extra;
    }
    EXPECT_THROW(ExperimentConfig::from_json("{not json"), ConfigError);
    EXPECT_THROW(ExperimentConfig::from_json(R"({"methods": ["step_by_step"], "fractions": [0.5, 0.25], "sizes": ["tiny"], "seeds": [0]})"),
                 ConfigError);
    EXPECT_THROW(ExperimentConfig::from_json(R"({"methods": ["step_by_step"], "fractions": [1.5], "sizes": ["tiny"], "seeds": [0]})"),
                 ConfigError);
    EXPECT_THROW(ExperimentConfig::from_json(R"({"methods": ["step_by_step"], "fractions": [1.0], "sizes": ["huge"], "seeds": [0]})"),
                 ConfigError);
    EXPECT_THROW(ExperimentConfig::from_json(R"({"methods": [], "fractions": [1.0], "sizes": ["tiny"], "seeds": [0]})"),
                 ConfigError);
    EXPECT_THROW(ExperimentConfig::from_json(R"({"methods": ["standard_finetune"], "fractions": [1.0], "sizes": ["tiny"], "seeds": [0]})"),
                 ConfigError);
    EXPECT_THROW(ExperimentConfig::from_file("/nonexistent/config.json"), IoFailure);
}

// ---------------------------------------------------------------------------
// Sweeps

TEST(SweepTest, CrossProductResumeAndSharedExtraction) {
    TempDir dir;
    auto config = small_config(dir.path());
    CountingTeacher teacher;
    const auto first = run_experiment(config, &teacher);
    EXPECT_EQ(first.records.size(), 12u);
    EXPECT_EQ(first.cells_trained, 12u);
    EXPECT_EQ(first.cells_failed, 0u);
    // one pass per (fraction, seed), shared by both methods
    EXPECT_EQ(first.extraction_calls, 6u);
    EXPECT_EQ(line_count(dir / "records.csv"), 13u);
    for (const auto& r : first.records) {
        EXPECT_GE(r.test_accuracy, 0.0);
        EXPECT_LE(r.test_accuracy, 1.0);
        EXPECT_EQ(r.train_examples_used, r.fraction == 1.0 ? 40u : 20u);
        EXPECT_GT(r.param_count, 0u);
    }

    const std::string before = slurp(dir / "records.csv");
    CountingTeacher idle;
    const auto second = run_experiment(config, &idle);
    EXPECT_EQ(second.cells_trained, 0u);
    EXPECT_EQ(second.cells_resumed, 12u);
    EXPECT_EQ(second.records.size(), 12u);
    EXPECT_TRUE(idle.calls.empty());
    EXPECT_EQ(slurp(dir / "records.csv"), before);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(second.records[i].test_accuracy, first.records[i].test_accuracy);

    config.seeds.push_back(7);
    const auto third = run_experiment(config, &teacher);
    EXPECT_EQ(third.cells_trained, 4u);
    EXPECT_EQ(third.cells_resumed, 12u);
    EXPECT_EQ(slurp(dir / "records.csv").substr(0, before.size()), before);
}

TEST(SweepTest, SubsetsAreNestedAndSeedShared) {
    TempDir dir;
    auto config = small_config(dir.path());
    config.fractions = {0.25, 0.5, 1.0};
    config.seeds = {4};
    config.methods = {Variant::kStandardDistill};
    CountingTeacher teacher;
    run_experiment(config, &teacher);
    std::vector<std::set<std::string>> seen;
    for (const auto& call : teacher.calls) {
        if (call.size() == 10 || call.size() == 20 || call.size() == 40) seen.emplace_back(call.begin(), call.end());
    }
    ASSERT_EQ(seen.size(), 3u);
    std::sort(seen.begin(), seen.end(), [](const auto& a, const auto& b) { return a.size() < b.size(); });
    EXPECT_TRUE(std::includes(seen[1].begin(), seen[1].end(), seen[0].begin(), seen[0].end()));
    EXPECT_TRUE(std::includes(seen[2].begin(), seen[2].end(), seen[1].begin(), seen[1].end()));
}

TEST(SweepTest, TestInputsNeverReachTheTeacher) {
    TempDir dir;
    auto config = small_config(dir.path());
    config.seeds = {0};
    CountingTeacher teacher;
    run_experiment(config, &teacher);
    std::set<std::string> train_inputs;
    for (const auto& ex : gen_arithmetic(config.task.seed, config.task.train_size).examples) train_inputs.insert(ex.input());
    for (const auto& call : teacher.calls) {
        for (const auto& x : call) EXPECT_TRUE(train_inputs.count(x)) << x;
    }
}

TEST(SweepTest, FailedCellsAreLoggedAndRetried) {
    TempDir dir;
    auto config = small_config(dir.path());
    config.seeds = {0};
    config.fractions = {1.0};
    config.training.learning_rate = 1e300;
    config.training.clip_norm = 0.0;
    config.training.momentum = 0.0;
    config.training.max_steps = 10;
    CountingTeacher teacher;
    const auto report = run_experiment(config, &teacher);
    EXPECT_EQ(report.cells_failed, 2u);
    EXPECT_TRUE(report.records.empty());
    EXPECT_EQ(line_count(dir / "failures.csv"), 3u);
    config.training.learning_rate = 0.05;
    config.training.clip_norm = 1.0;
    const auto retry = run_experiment(config, &teacher);
    EXPECT_EQ(retry.cells_trained, 2u);
}

TEST(SweepTest, ParallelWorkersMatchSerial) {
    TempDir a, b;
    auto serial = small_config(a.path());
    serial.seeds = {0, 1};
    auto parallel = serial;
    parallel.output_dir = b.path();
    parallel.workers = 3;
    const auto ra = run_experiment(serial);
    const auto rb = run_experiment(parallel);
    ASSERT_EQ(ra.records.size(), rb.records.size());
    for (std::size_t i = 0; i < ra.records.size(); ++i) {
        EXPECT_EQ(ra.records[i].method, rb.records[i].method);
        EXPECT_EQ(ra.records[i].test_accuracy, rb.records[i].test_accuracy);
    }
    EXPECT_EQ(line_count(b / "records.csv"), ra.records.size() + 1);
}

TEST(SweepTest, LabeledModeTrainsFinetune) {
    TempDir dir;
    auto config = small_config(dir.path());
    config.seeds = {0};
    config.fractions = {1.0};
    config.supervision = SupervisionMode::kLabeled;
    config.methods = {Variant::kStandardFinetune, Variant::kStepByStep, Variant::kRationaleInputBaseline};
    config.training.max_input_len = 16;
    CountingTeacher teacher(0.5);
    const auto report = run_experiment(config, &teacher);
    EXPECT_EQ(report.cells_trained, 3u);
    EXPECT_EQ(report.cells_failed, 0u);
}

TEST(SweepTest, AugmentationAddsExamples) {
    TempDir dir;
    auto config = small_config(dir.path());
    config.seeds = {0};
    config.fractions = {1.0};
    config.methods = {Variant::kStepByStep};
    config.augmentation = AugmentationSpec{25, 99};
    CountingTeacher teacher;
    const auto report = run_experiment(config, &teacher);
    ASSERT_EQ(report.records.size(), 1u);
    EXPECT_EQ(report.records[0].train_examples_used, 65u);
}

// ---------------------------------------------------------------------------
// Deployment tripwire

TEST(TripwireTest, EvaluationSendsNoTeacherRequests) {
    distill::testing::MockCompletionServer tripwire(
        [](const std::string&, int) { return distill::testing::MockCompletionServer::Reply{200, " x\nA: 1\n"}; });
    TempDir dir;
    Dataset train_set = gen_arithmetic(1, 30);
    OracleTeacher oracle(TaskKind::kArithmetic, 0.0, 0);
    train_set = extract_dataset(oracle, train_set);
    const Vocab vocab = Vocab::build(vocab_corpus(train_set), 100);
    SeqModel model(sized_config("tiny", vocab.size(), 16, 16), 0);
    TrainConfig tc;
    tc.max_steps = 5;
    tc.max_input_len = 16;
    tc.max_output_len = 16;
    train(model, vocab, train_set, nullptr, tc);

    ::setenv("DISTILL_TRIPWIRE_TOKEN", "t", 1);
    RemoteTeacherConfig rc;
    rc.endpoint = tripwire.endpoint();
    rc.token_env = "DISTILL_TRIPWIRE_TOKEN";
    rc.cache_dir = dir / "cache";
    PromptTemplate tmpl;
    tmpl.demonstrations = {{"1 + 1", "1 + 1 = 2", "2"}};
    RemoteTeacher armed(rc, tmpl);

    const double acc = evaluate(model, vocab, gen_arithmetic(50, 40));
    EXPECT_GE(acc, 0.0);
    EXPECT_EQ(tripwire.requests(), 0u);
    EXPECT_EQ(armed.requests_sent(), 0u);
    armed.extract({"2 + 2"});
    EXPECT_EQ(tripwire.requests(), 1u);
}

// ---------------------------------------------------------------------------
// Command line

TEST(CliTest, GenWritesRequestedLines) {
    TempDir dir;
    EXPECT_EQ(run_cli("gen --task arithmetic --n 100 --seed 7 --out " + (dir / "a.jsonl").string()), 0);
    EXPECT_EQ(line_count(dir / "a.jsonl"), 100u);
    EXPECT_EQ(load_jsonl(dir / "a.jsonl").examples, gen_arithmetic(7, 100).examples);
    EXPECT_EQ(run_cli("gen --task entailment --n 30 --out " + (dir / "e.jsonl").string()), 0);
    EXPECT_EQ(line_count(dir / "e.jsonl"), 30u);
}

TEST(CliTest, UsageErrorsExitOne) {
    EXPECT_EQ(run_cli("sweep --config missing.json"), 1);
    EXPECT_EQ(run_cli(""), 1);
    EXPECT_EQ(run_cli("frobnicate"), 1);
    EXPECT_EQ(run_cli("gen --task poetry --n 3"), 1);
    EXPECT_EQ(run_cli("gen --task arithmetic"), 1);
    TempDir dir;
    std::ofstream(dir / "bad.json") << R"({"methods": ["step_by_step"], "fractions": [1.0], "sizes": ["tiny"], "seeds": [0], "oops": 1})";
    EXPECT_EQ(run_cli("sweep --config " + (dir / "bad.json").string()), 1);
}

TEST(CliTest, RuntimeFailureExitsTwo) {
    TempDir dir;
    std::ofstream(dir / "broken.jsonl") << "{\"input\": \"1 + 1\"}\nnot json\n";
    EXPECT_EQ(run_cli("train --data " + (dir / "broken.jsonl").string() + " --variant standard_distill --out " +
                      (dir / "m").string()),
              2);
}

TEST(CliTest, ExtractTrainEvalPipeline) {
    TempDir dir;
    const auto start = std::chrono::steady_clock::now();
    ASSERT_EQ(run_cli("gen --task arithmetic --n 50 --seed 1 --out " + (dir / "train.jsonl").string()), 0);
    ASSERT_EQ(run_cli("gen --task arithmetic --n 20 --seed 2 --out " + (dir / "test.jsonl").string()), 0);
    ASSERT_EQ(run_cli("extract --in " + (dir / "train.jsonl").string() + " --out " + (dir / "teacher.jsonl").string() +
                      " --task arithmetic --noise 0.1 --seed 3"),
              0);
    const auto annotated = load_jsonl(dir / "teacher.jsonl");
    ASSERT_EQ(annotated.size(), 50u);
    for (const auto& ex : annotated.examples) {
        EXPECT_TRUE(ex.teacher_label());
        EXPECT_TRUE(ex.teacher_rationale());
    }
    ASSERT_EQ(run_cli("train --data " + (dir / "teacher.jsonl").string() +
                      " --variant step_by_step --size tiny --steps 30 --batch-size 8 --lr 0.05 --seed 1 --out " +
                      (dir / "model").string()),
              0);
    for (const char* f : {"model.ckpt", "vocab.txt", "history.csv"}) EXPECT_TRUE(std::filesystem::exists(dir / "model" / f));
    EXPECT_EQ(line_count(dir / "model" / "history.csv"), 31u);
    ASSERT_EQ(run_cli("eval --model " + (dir / "model").string() + " --data " + (dir / "test.jsonl").string() +
                      " --out " + (dir / "metrics.json").string()),
              0);
    EXPECT_NE(slurp(dir / "metrics.json").find("accuracy"), std::string::npos);
    EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::minutes(5));
}

TEST(CliTest, SweepThenSummarize) {
    TempDir dir;
    std::ofstream(dir / "sweep.json") << R"({
        "task": {"kind": "arithmetic", "train_size": 24, "test_size": 10, "seed": 2},
        "methods": ["standard_distill", "step_by_step"],
        "fractions": [0.5, 1.0],
        "sizes": ["tiny"],
        "seeds": [0],
        "training": {"max_steps": 2, "batch_size": 8, "max_input_len": 16, "max_output_len": 16}
    })";
    ASSERT_EQ(run_cli("sweep --config " + (dir / "sweep.json").string() + " --out " + (dir / "out").string()), 0);
    EXPECT_EQ(line_count(dir / "out" / "records.csv"), 5u);
    EXPECT_TRUE(std::filesystem::exists(dir / "out" / "summary.csv"));
    ASSERT_EQ(run_cli("summarize --records " + (dir / "out" / "records.csv").string() + " --out " +
                      (dir / "again.csv").string()),
              0);
    EXPECT_EQ(slurp(dir / "again.csv"), slurp(dir / "out" / "summary.csv"));
    EXPECT_EQ(read_summary_csv(dir / "again.csv").size(), 4u);
}
