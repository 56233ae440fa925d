#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "distill/harness.hpp"

using namespace distill;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

// Errors caused by what the user asked for rather than by the run itself.
class UsageError : public Error {
public:
    using Error::Error;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

TaskKind task_kind(const std::string& name) {
    if (name == "arithmetic") return TaskKind::kArithmetic;
    if (name == "entailment") return TaskKind::kEntailment;
    throw UsageError("--task must be arithmetic or entailment");
}

struct GenArgs {
    std::string task = "arithmetic";
    std::size_t n = 100;
    std::uint64_t seed = 0;
    int depth = 2;
    std::string out;
};

void run_gen(const GenArgs& a) {
    const Dataset ds = task_kind(a.task) == TaskKind::kArithmetic ? gen_arithmetic(a.seed, a.n, a.depth)
                                                                  : gen_entailment(a.seed, a.n);
    if (a.out.empty()) {
        write_jsonl(ds, std::cout);
    } else {
        write_jsonl(ds, a.out);
    }
}

struct ExtractArgs {
    std::string in, out, config, task = "arithmetic";
    double noise = 0.0;
    std::uint64_t seed = 0;
};

void run_extract(const ExtractArgs& a) {
    TeacherSpec spec;
    if (!a.config.empty()) {
        spec = TeacherSpec::from_json(read_file(a.config));
    } else {
        spec.noise_rate = a.noise;
        spec.seed = a.seed;
    }
    auto teacher = make_teacher(spec, task_kind(a.task));
    if (!teacher) throw UsageError("extract needs an oracle or remote teacher");
    std::size_t dropped = 0;
    const Dataset out = extract_dataset(*teacher, load_jsonl(a.in), &dropped);
    write_jsonl(out, a.out);
    std::cerr << "extracted " << out.size() << " examples, dropped " << dropped << '\n';
}

struct TrainArgs {
    std::string data, val, out = "run", config, variant = "step_by_step", size = "small";
    std::uint64_t seed = 0;
    std::optional<std::size_t> steps, batch_size;
    std::optional<double> lr, lambda;
    bool labeled = false;
};

void run_train(const TrainArgs& a) {
    TrainConfig tc = a.config.empty() ? TrainConfig{} : train_config_from_json(read_file(a.config));
    tc.variant = parse_variant(a.variant);
    tc.seed = a.seed;
    if (a.steps) tc.max_steps = *a.steps;
    if (a.batch_size) tc.batch_size = *a.batch_size;
    if (a.lr) tc.learning_rate = *a.lr;
    if (a.lambda) tc.lambda = *a.lambda;
    tc.validate();

    const Dataset train_set = load_jsonl(a.data);
    std::optional<Dataset> validation;
    if (!a.val.empty()) validation = load_jsonl(a.val);

    auto corpus = vocab_corpus(train_set);
    const Vocab vocab = Vocab::build(corpus, 4096);
    const ModelConfig mc = sized_config(a.size, vocab.size(), tc.max_input_len, tc.max_output_len);
    SeqModel model(mc, a.seed);

    std::filesystem::create_directories(a.out);
    const std::filesystem::path dir(a.out);
    TrainResult result;
    try {
        result = train(model, vocab, train_set, validation ? &*validation : nullptr, tc);
    } catch (const DivergenceDetected& e) {
        write_history_csv(e.history(), dir / "history.csv");
        throw;
    }
    write_history_csv(result.history, dir / "history.csv");
    save_model(model, dir / "model.ckpt");
    vocab.save(dir / "vocab.txt");
    std::cerr << "trained " << result.steps_run << " steps, " << param_count(mc) << " parameters";
    if (result.best_validation_accuracy) {
        std::cerr << ", best validation accuracy " << *result.best_validation_accuracy << " at step " << result.best_step;
    }
    std::cerr << '\n';
}

struct EvalArgs {
    std::string model, data, out;
    bool rationale_input = false;
};

void run_eval(const EvalArgs& a) {
    const std::filesystem::path dir(a.model);
    const SeqModel model = load_model(dir / "model.ckpt");
    const Vocab vocab = Vocab::load(dir / "vocab.txt");
    Dataset test = load_jsonl(a.data);
    if (a.rationale_input) {
        for (auto& ex : test.examples) {
            Example joined(rationale_input(ex.input(), ex.teacher_rationale().value_or("")));
            joined.set_gold_label(ex.gold_label());
            ex = std::move(joined);
        }
    }
    const double acc = evaluate(model, vocab, test);
    std::cout << "accuracy " << format_double(acc) << " over " << test.size() << " examples\n";
    if (!a.out.empty()) {
        nlohmann::ordered_json j;
        j["accuracy"] = acc;
        j["examples"] = test.size();
        std::ofstream out(a.out);
        out << j.dump(2) << '\n';
        if (!out) throw IoFailure("cannot write " + a.out);
    }
}

struct SweepArgs {
    std::string config, out;
    std::optional<std::size_t> workers;
    std::optional<std::uint64_t> seed;
};

void write_summary_files(const std::vector<MetricsRecord>& records, const std::filesystem::path& summary_path) {
    const auto rows = summarize(records);
    write_summary_csv(rows, summary_path);
    for (const auto& c : crossover(rows)) {
        std::cout << "crossover " << c.model_size << ": " << c.baseline_method << " at 1.0 = "
                  << format_double(c.baseline_accuracy) << ", step_by_step reaches it at "
                  << (c.fraction ? format_double(*c.fraction) : std::string("none")) << '\n';
    }
}

void run_sweep(const SweepArgs& a) {
    ExperimentConfig cfg;
    try {
        cfg = ExperimentConfig::from_file(a.config);
        if (!a.out.empty()) cfg.output_dir = a.out;
        if (a.workers) cfg.workers = *a.workers;
        if (a.seed) cfg.task.seed = *a.seed;
        cfg.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    } catch (const IoFailure& e) {
        throw UsageError(e.what());
    }
    const ExperimentReport report = run_experiment(cfg);
    std::cerr << report.cells_trained << " trained, " << report.cells_resumed << " resumed, " << report.cells_failed
              << " failed\n";
    write_summary_files(report.records, cfg.output_dir / "summary.csv");
    if (report.cells_failed > 0) throw Error(std::to_string(report.cells_failed) + " cells failed; see failures.csv");
}

struct SummarizeArgs {
    std::string records, out = "summary.csv";
};

void run_summarize(const SummarizeArgs& a) {
    const auto records = read_records_csv(a.records);
    if (records.empty()) throw UsageError(a.records + " holds no records");
    write_summary_files(records, a.out);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Train small sequence-to-sequence students from teacher labels and rationales."};
    app.require_subcommand(1);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "Write a synthetic dataset as JSONL");
    gen_cmd->add_option("--task", gen.task, "arithmetic or entailment")->check(CLI::IsMember({"arithmetic", "entailment"}));
    gen_cmd->add_option("--n", gen.n, "number of examples")->required();
    gen_cmd->add_option("--seed", gen.seed, "generator seed");
    gen_cmd->add_option("--depth", gen.depth, "arithmetic operators per expression (2-4)")->check(CLI::Range(2, 4));
    gen_cmd->add_option("--out", gen.out, "output file (default stdout)");

    ExtractArgs ex;
    auto* ex_cmd = app.add_subcommand("extract", "Annotate a JSONL file with teacher labels and rationales");
    ex_cmd->add_option("--in", ex.in, "input JSONL")->required()->check(CLI::ExistingFile);
    ex_cmd->add_option("--out", ex.out, "output JSONL")->required();
    ex_cmd->add_option("--config", ex.config, "teacher JSON (default: oracle)")->check(CLI::ExistingFile);
    ex_cmd->add_option("--task", ex.task, "task the oracle solves")->check(CLI::IsMember({"arithmetic", "entailment"}));
    ex_cmd->add_option("--noise", ex.noise, "oracle noise rate")->check(CLI::Range(0.0, 1.0));
    ex_cmd->add_option("--seed", ex.seed, "oracle noise seed");

    TrainArgs tr;
    auto* tr_cmd = app.add_subcommand("train", "Train one student");
    tr_cmd->add_option("--data", tr.data, "training JSONL")->required()->check(CLI::ExistingFile);
    tr_cmd->add_option("--val", tr.val, "validation JSONL for early stopping")->check(CLI::ExistingFile);
    tr_cmd->add_option("--variant", tr.variant, "standard_finetune, standard_distill, step_by_step or rationale_input_baseline")
        ->check(CLI::IsMember({"standard_finetune", "standard_distill", "step_by_step", "rationale_input_baseline"}));
    tr_cmd->add_option("--size", tr.size, "tiny, small, base or large")->check(CLI::IsMember({"tiny", "small", "base", "large"}));
    tr_cmd->add_option("--config", tr.config, "training hyperparameters JSON")->check(CLI::ExistingFile);
    tr_cmd->add_option("--seed", tr.seed, "initialization and shuffling seed");
    tr_cmd->add_option("--out", tr.out, "output directory (model.ckpt, vocab.txt, history.csv)");
    tr_cmd->add_option("--steps", tr.steps, "max steps");
    tr_cmd->add_option("--batch-size", tr.batch_size, "examples per batch");
    tr_cmd->add_option("--lr", tr.lr, "learning rate");
    tr_cmd->add_option("--lambda", tr.lambda, "rationale loss weight");

    EvalArgs ev;
    auto* ev_cmd = app.add_subcommand("eval", "Exact-match accuracy of a trained student");
    ev_cmd->add_option("--model", ev.model, "directory written by train")->required()->check(CLI::ExistingDirectory);
    ev_cmd->add_option("--data", ev.data, "test JSONL with gold labels")->required()->check(CLI::ExistingFile);
    ev_cmd->add_option("--out", ev.out, "optional JSON metrics file");
    ev_cmd->add_flag("--rationale-input", ev.rationale_input, "append teacher_rationale to inputs (baseline models)");

    SweepArgs sw;
    auto* sw_cmd = app.add_subcommand("sweep", "Run an experiment grid from a JSON config");
    sw_cmd->add_option("--config", sw.config, "experiment JSON")->required()->check(CLI::ExistingFile);
    sw_cmd->add_option("--out", sw.out, "output directory (overrides output_dir)");
    sw_cmd->add_option("--seed", sw.seed, "data seed (overrides task.seed)");
    sw_cmd->add_option("--workers", sw.workers, "parallel cells");

    SummarizeArgs su;
    auto* su_cmd = app.add_subcommand("summarize", "Aggregate records.csv into summary.csv");
    su_cmd->add_option("--records", su.records, "records CSV")->required()->check(CLI::ExistingFile);
    su_cmd->add_option("--out", su.out, "summary CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*gen_cmd) run_gen(gen);
        if (*ex_cmd) run_extract(ex);
        if (*tr_cmd) run_train(tr);
        if (*ev_cmd) run_eval(ev);
        if (*sw_cmd) run_sweep(sw);
        if (*su_cmd) run_summarize(su);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}
