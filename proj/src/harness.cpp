#include "distill/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "json.hpp"

#include "distill/text.hpp"

namespace distill {

using nlohmann::json;

bool exact_match(std::string_view prediction, std::string_view gold) { return normalize(prediction) == normalize(gold); }

double evaluate(const Predictor& predictor, const Dataset& test) {
    if (test.empty()) throw NoGoldLabels("test set is empty");
    for (std::size_t i = 0; i < test.size(); ++i) {
        if (!test.examples[i].gold_label()) throw NoGoldLabels("test example " + std::to_string(i) + " has no label");
    }
    std::size_t hits = 0;
    for (const auto& ex : test.examples) hits += exact_match(predictor(ex.input()), *ex.gold_label()) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

double evaluate(const SeqModel& model, const Vocab& vocab, const Dataset& test) {
    if (test.empty()) throw NoGoldLabels("test set is empty");
    std::vector<std::string> inputs;
    inputs.reserve(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
        if (!test.examples[i].gold_label()) throw NoGoldLabels("test example " + std::to_string(i) + " has no label");
        inputs.push_back(test.examples[i].input());
    }
    const auto predictions = predict_labels(model, vocab, inputs);
    std::size_t next = 0;
    return evaluate([&](const std::string&) { return predictions[next++]; }, test);
}

// ---------------------------------------------------------------------------
// Config

namespace {

const std::vector<std::string> kSizeNames = {"tiny", "small", "base", "large"};

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& item : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
            throw ConfigError("unknown key \"" + item.key() + "\" in " + where);
        }
    }
}

template <typename T>
void read_opt(const json& obj, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for \"") + key + "\": " + e.what());
    }
}

TaskKind parse_task_kind(const std::string& s) {
    if (s == "arithmetic") return TaskKind::kArithmetic;
    if (s == "entailment") return TaskKind::kEntailment;
    throw ConfigError("unknown task kind \"" + s + "\"");
}

TaskSpec parse_task(const json& j) {
    check_keys(j,
               {"kind", "train_size", "val_size", "test_size", "depth", "seed", "train_path", "val_path", "test_path",
                "oracle_task"},
               "task");
    TaskSpec t;
    std::string kind = "arithmetic";
    read_opt(j, "kind", kind);
    if (kind == "arithmetic") {
        t.source = TaskSource::kArithmetic;
    } else if (kind == "entailment") {
        t.source = TaskSource::kEntailment;
    } else if (kind == "jsonl") {
        t.source = TaskSource::kJsonl;
    } else {
        throw ConfigError("task.kind must be arithmetic, entailment or jsonl");
    }
    read_opt(j, "train_size", t.train_size);
    read_opt(j, "val_size", t.val_size);
    read_opt(j, "test_size", t.test_size);
    read_opt(j, "depth", t.depth);
    read_opt(j, "seed", t.seed);
    if (j.contains("train_path")) t.train_path = j.at("train_path").get<std::string>();
    if (j.contains("val_path")) t.val_path = j.at("val_path").get<std::string>();
    if (j.contains("test_path")) t.test_path = j.at("test_path").get<std::string>();
    if (j.contains("oracle_task")) t.oracle_task = parse_task_kind(j.at("oracle_task").get<std::string>());
    return t;
}

TeacherSpec parse_teacher(const json& j) {
    check_keys(j,
               {"kind", "noise_rate", "seed", "endpoint", "token_env", "template", "max_parallel", "timeout_ms",
                "retry_budget", "backoff_ms", "cache_dir", "max_tokens"},
               "teacher");
    TeacherSpec t;
    std::string kind = "oracle";
    read_opt(j, "kind", kind);
    if (kind == "oracle") {
        t.kind = TeacherKind::kOracle;
    } else if (kind == "remote") {
        t.kind = TeacherKind::kRemote;
    } else if (kind == "precomputed") {
        t.kind = TeacherKind::kPrecomputed;
    } else {
        throw ConfigError("teacher.kind must be oracle, remote or precomputed");
    }
    read_opt(j, "noise_rate", t.noise_rate);
    read_opt(j, "seed", t.seed);
    read_opt(j, "endpoint", t.remote.endpoint);
    read_opt(j, "token_env", t.remote.token_env);
    read_opt(j, "max_parallel", t.remote.max_parallel);
    read_opt(j, "retry_budget", t.remote.retry_budget);
    read_opt(j, "max_tokens", t.remote.max_tokens);
    if (j.contains("timeout_ms")) t.remote.timeout = std::chrono::milliseconds(j.at("timeout_ms").get<long>());
    if (j.contains("backoff_ms")) t.remote.backoff_base = std::chrono::milliseconds(j.at("backoff_ms").get<long>());
    if (j.contains("cache_dir")) t.remote.cache_dir = j.at("cache_dir").get<std::string>();
    if (j.contains("template")) t.template_path = j.at("template").get<std::string>();
    return t;
}

TrainConfig parse_training(const json& j) {
    check_keys(j,
               {"lambda", "learning_rate", "momentum", "clip_norm", "batch_size", "max_steps", "max_input_len",
                "max_output_len", "eval_every", "patience"},
               "training");
    TrainConfig c;
    read_opt(j, "lambda", c.lambda);
    read_opt(j, "learning_rate", c.learning_rate);
    read_opt(j, "momentum", c.momentum);
    read_opt(j, "clip_norm", c.clip_norm);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "max_steps", c.max_steps);
    read_opt(j, "max_input_len", c.max_input_len);
    read_opt(j, "max_output_len", c.max_output_len);
    read_opt(j, "eval_every", c.eval_every);
    read_opt(j, "patience", c.patience);
    return c;
}

}  // namespace

void ExperimentConfig::validate() const {
    if (methods.empty() || fractions.empty() || sizes.empty() || seeds.empty()) {
        throw ConfigError("methods, fractions, sizes and seeds must be non-empty");
    }
    std::set<Variant> unique_methods(methods.begin(), methods.end());
    if (unique_methods.size() != methods.size()) throw ConfigError("methods must not repeat");
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        if (!(fractions[i] > 0.0 && fractions[i] <= 1.0)) throw ConfigError("fractions must lie in (0, 1]");
        if (i > 0 && !(fractions[i] > fractions[i - 1])) throw ConfigError("fractions must be strictly increasing");
    }
    for (const auto& s : sizes) {
        if (std::find(kSizeNames.begin(), kSizeNames.end(), s) == kSizeNames.end()) {
            throw ConfigError("unknown model size \"" + s + "\"");
        }
    }
    std::set<std::uint64_t> unique_seeds(seeds.begin(), seeds.end());
    if (unique_seeds.size() != seeds.size()) throw ConfigError("seeds must not repeat");
    if (unique_methods.count(Variant::kStandardFinetune) && supervision == SupervisionMode::kUnlabeled) {
        throw ConfigError("standard_finetune needs gold labels; use supervision \"labeled\"");
    }
    if (task.source == TaskSource::kJsonl) {
        if (task.train_path.empty() || task.test_path.empty()) {
            throw ConfigError("jsonl task needs train_path and test_path");
        }
        if (teacher.kind == TeacherKind::kOracle && !task.oracle_task) {
            throw ConfigError("oracle teacher on a jsonl task needs task.oracle_task");
        }
    } else {
        if (task.train_size == 0 || task.test_size == 0) throw ConfigError("train_size and test_size must be positive");
        if (task.source == TaskSource::kArithmetic && (task.depth < 2 || task.depth > 4)) {
            throw ConfigError("arithmetic depth must be in [2, 4]");
        }
        if (teacher.kind == TeacherKind::kPrecomputed) {
            throw ConfigError("precomputed teacher outputs need a jsonl task");
        }
    }
    if (!(teacher.noise_rate >= 0.0 && teacher.noise_rate <= 1.0)) throw ConfigError("noise_rate must be in [0, 1]");
    if (teacher.kind == TeacherKind::kRemote) {
        teacher.remote.validate();
        if (teacher.template_path.empty()) throw ConfigError("remote teacher needs a prompt template");
    }
    if (augmentation) {
        if (augmentation->extra_examples == 0) throw ConfigError("augmentation.extra_examples must be positive");
        if (task.source == TaskSource::kJsonl) throw ConfigError("augmentation needs a generated task");
        if (augmentation->seed == task.seed) throw ConfigError("augmentation seed must differ from the task seed");
    }
    if (workers == 0) throw ConfigError("workers must be positive");
    if (vocab_max_size <= static_cast<std::size_t>(token::kReservedCount)) throw ConfigError("vocab_max_size too small");
    TrainConfig probe = training;
    probe.validate();
}

namespace {

json parse_document(std::string_view text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
}

}  // namespace

TeacherSpec TeacherSpec::from_json(std::string_view text) {
    try {
        return parse_teacher(parse_document(text));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad teacher value: ") + e.what());
    }
}

TrainConfig train_config_from_json(std::string_view text) {
    try {
        TrainConfig c = parse_training(parse_document(text));
        c.validate();
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad training value: ") + e.what());
    }
}

std::unique_ptr<Teacher> make_teacher(const TeacherSpec& spec, TaskKind task) {
    switch (spec.kind) {
        case TeacherKind::kOracle:
            return std::make_unique<OracleTeacher>(task, spec.noise_rate, spec.seed);
        case TeacherKind::kRemote:
            return std::make_unique<RemoteTeacher>(spec.remote, PromptTemplate::from_json_file(spec.template_path));
        case TeacherKind::kPrecomputed:
            return nullptr;
    }
    return nullptr;
}

ExperimentConfig ExperimentConfig::from_json(std::string_view text) {
    json j = parse_document(text);
    check_keys(j,
               {"task", "methods", "fractions", "sizes", "seeds", "supervision", "teacher", "augmentation",
                "output_dir", "training", "vocab_max_size", "workers"},
               "config");
    ExperimentConfig c;
    try {
        if (j.contains("task")) c.task = parse_task(j.at("task"));
        if (j.contains("methods")) {
            for (const auto& m : j.at("methods")) c.methods.push_back(parse_variant(m.get<std::string>()));
        }
        read_opt(j, "fractions", c.fractions);
        read_opt(j, "sizes", c.sizes);
        read_opt(j, "seeds", c.seeds);
        if (j.contains("supervision")) {
            const auto s = j.at("supervision").get<std::string>();
            if (s == "labeled") {
                c.supervision = SupervisionMode::kLabeled;
            } else if (s == "unlabeled") {
                c.supervision = SupervisionMode::kUnlabeled;
            } else {
                throw ConfigError("supervision must be labeled or unlabeled");
            }
        }
        if (j.contains("teacher")) c.teacher = parse_teacher(j.at("teacher"));
        if (j.contains("augmentation") && !j.at("augmentation").is_null()) {
            const auto& a = j.at("augmentation");
            check_keys(a, {"extra_examples", "seed"}, "augmentation");
            AugmentationSpec spec;
            read_opt(a, "extra_examples", spec.extra_examples);
            read_opt(a, "seed", spec.seed);
            c.augmentation = spec;
        }
        if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
        if (j.contains("training")) c.training = parse_training(j.at("training"));
        read_opt(j, "vocab_max_size", c.vocab_max_size);
        read_opt(j, "workers", c.workers);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& what) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ParseFailure("bad number in " + what + ": " + s);
    return v;
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
    std::uint64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ParseFailure("bad integer in " + what + ": " + s);
    return v;
}

std::vector<std::vector<std::string>> read_table(const std::filesystem::path& path, std::string_view header) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot read " + path.string());
    std::string line;
    std::vector<std::vector<std::string>> rows;
    if (!std::getline(in, line)) return rows;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != header) throw ParseFailure(path.string() + ": unexpected header \"" + line + "\"");
    const std::size_t width = split_csv(std::string(header)).size();
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split_csv(line);
        if (cells.size() != width) throw ParseFailure(path.string() + ": wrong column count in \"" + line + "\"");
        rows.push_back(std::move(cells));
    }
    return rows;
}

std::string record_line(const MetricsRecord& r) {
    std::ostringstream os;
    char secs[32];
    std::snprintf(secs, sizeof secs, "%.3f", r.wall_clock_seconds);
    os << r.method << ',' << format_double(r.fraction) << ',' << r.model_size << ',' << r.seed << ',' << r.param_count
       << ',' << r.train_examples_used << ',' << format_double(r.test_accuracy) << ',' << secs;
    return os.str();
}

}  // namespace

std::vector<MetricsRecord> read_records_csv(const std::filesystem::path& path) {
    std::vector<MetricsRecord> out;
    for (const auto& c : read_table(path, kRecordsHeader)) {
        MetricsRecord r;
        r.method = c[0];
        r.fraction = parse_double(c[1], "fraction");
        r.model_size = c[2];
        r.seed = parse_u64(c[3], "seed");
        r.param_count = parse_u64(c[4], "param_count");
        r.train_examples_used = parse_u64(c[5], "train_examples_used");
        r.test_accuracy = parse_double(c[6], "test_accuracy");
        r.wall_clock_seconds = parse_double(c[7], "wall_clock_seconds");
        out.push_back(std::move(r));
    }
    return out;
}

void append_records_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoFailure("cannot append to " + path.string());
    if (fresh) out << kRecordsHeader << '\n';
    for (const auto& r : records) out << record_line(r) << '\n';
    out.flush();
    if (!out) throw IoFailure("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Experiment

namespace {

using CellKey = std::tuple<std::string, std::string, std::string, std::uint64_t>;

CellKey key_of(std::string_view method, double fraction, std::string_view size, std::uint64_t seed) {
    return {std::string(method), format_double(fraction), std::string(size), seed};
}

// Drops examples whose input also appears in `seen`, then records the rest.
Dataset dedupe_against(const Dataset& ds, std::unordered_set<std::string>& seen) {
    Dataset out{ds.name, ds.split, {}};
    for (const auto& ex : ds.examples) {
        if (seen.insert(normalize(ex.input())).second) out.examples.push_back(ex);
    }
    return out;
}

Dataset generate(const TaskSpec& task, std::uint64_t seed, std::size_t n) {
    return task.source == TaskSource::kArithmetic ? gen_arithmetic(seed, n, task.depth) : gen_entailment(seed, n);
}

// Draws up to n examples from the generator whose inputs are not in `seen`.
Dataset generate_disjoint(const TaskSpec& task, std::uint64_t seed, std::size_t n,
                          std::unordered_set<std::string>& seen, const std::string& name, Split split) {
    Dataset out{name, split, {}};
    const std::size_t draw = std::max<std::size_t>(n * 4, 64);
    Dataset pool = generate(task, seed, draw);
    for (const auto& ex : pool.examples) {
        if (out.size() == n) break;
        if (seen.insert(normalize(ex.input())).second) out.examples.push_back(ex);
    }
    if (out.size() < n) {
        std::cerr << "warning: only " << out.size() << " distinct " << name << " examples available\n";
    }
    return out;
}

struct TaskData {
    Dataset train_pool;
    Dataset validation;
    Dataset test;
    Dataset augmentation;
};

TaskData load_task(const ExperimentConfig& config) {
    TaskData d;
    const TaskSpec& t = config.task;
    std::unordered_set<std::string> seen;
    if (t.source == TaskSource::kJsonl) {
        d.train_pool = load_jsonl(t.train_path);
        d.train_pool.split = Split::kTrain;
        for (const auto& ex : d.train_pool.examples) seen.insert(normalize(ex.input()));
        if (!t.val_path.empty()) {
            d.validation = dedupe_against(load_jsonl(t.val_path), seen);
            d.validation.split = Split::kValidation;
        }
        d.test = dedupe_against(load_jsonl(t.test_path), seen);
        d.test.split = Split::kTest;
    } else {
        d.train_pool = generate(t, t.seed, t.train_size);
        for (const auto& ex : d.train_pool.examples) seen.insert(normalize(ex.input()));
        std::uint64_t stream = t.seed ^ 0x5EEDF00DULL;
        if (t.val_size > 0) {
            d.validation = generate_disjoint(t, stream + 1, t.val_size, seen, "validation", Split::kValidation);
        }
        d.test = generate_disjoint(t, stream + 2, t.test_size, seen, "test", Split::kTest);
        if (config.augmentation) {
            d.augmentation = generate_disjoint(t, config.augmentation->seed, config.augmentation->extra_examples, seen,
                                               "augmentation", Split::kTrain);
            d.augmentation = mask_gold(d.augmentation);
        }
    }
    if (d.train_pool.empty()) throw ConfigError("training pool is empty");
    if (d.test.empty()) throw ConfigError("test set is empty after removing training overlap");
    return d;
}

TaskKind oracle_kind(const ExperimentConfig& config) {
    if (config.task.oracle_task) return *config.task.oracle_task;
    return config.task.source == TaskSource::kEntailment ? TaskKind::kEntailment : TaskKind::kArithmetic;
}

// Teacher fields for every example, or the examples that already carry them.
Dataset teach(Teacher* teacher, const Dataset& ds, std::size_t* calls) {
    if (teacher == nullptr) {
        Dataset out{ds.name, ds.split, {}};
        for (const auto& ex : ds.examples) {
            if (ex.teacher_label() && ex.teacher_rationale()) out.examples.push_back(ex);
        }
        return out;
    }
    if (calls != nullptr) ++*calls;
    std::size_t dropped = 0;
    Dataset out = extract_dataset(*teacher, ds, &dropped);
    if (dropped > 0) std::cerr << "teacher: dropped " << dropped << " of " << ds.size() << " " << ds.name << " examples\n";
    return out;
}

bool uses_teacher(Variant v) { return v != Variant::kStandardFinetune; }

// Training view of teacher-annotated data for one method. Gold fields are
// removed; in labeled mode the human label takes the label slot.
Dataset supervised_view(const Dataset& annotated, Variant method, SupervisionMode mode) {
    if (!uses_teacher(method)) return annotated;
    Dataset out = annotated;
    const bool gold_label_slot =
        mode == SupervisionMode::kLabeled && (method == Variant::kStepByStep || method == Variant::kRationaleInputBaseline);
    std::vector<Example> kept;
    for (auto& ex : out.examples) {
        if (gold_label_slot) {
            if (!ex.gold_label()) continue;
            ex.set_teacher_label(ex.gold_label());
        }
        ex.set_gold_label(std::nullopt);
        ex.set_gold_rationale(std::nullopt);
        kept.push_back(std::move(ex));
    }
    out.examples = std::move(kept);
    return out;
}

Dataset concat(const Dataset& a, const Dataset& b) {
    Dataset out = a;
    out.examples.insert(out.examples.end(), b.examples.begin(), b.examples.end());
    return out;
}

struct Cell {
    Variant method;
    double fraction;
    std::string size;
    std::uint64_t seed;
};

class RecordWriter {
public:
    explicit RecordWriter(std::filesystem::path path) : path_(std::move(path)) {}
    void write(const MetricsRecord& r) {
        std::lock_guard<std::mutex> lock(mu_);
        append_records_csv({r}, path_);
    }

private:
    std::filesystem::path path_;
    std::mutex mu_;
};

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config, Teacher* teacher_override) {
    config.validate();
    std::filesystem::create_directories(config.output_dir);
    const auto records_path = config.output_dir / "records.csv";
    const auto failures_path = config.output_dir / "failures.csv";

    ExperimentReport report;
    std::map<CellKey, MetricsRecord> done;
    if (std::filesystem::exists(records_path)) {
        for (auto& r : read_records_csv(records_path)) {
            auto key = key_of(r.method, r.fraction, r.model_size, r.seed);
            done.emplace(key, std::move(r));
        }
    }

    std::vector<Cell> cells, todo;
    for (Variant m : config.methods) {
        for (double f : config.fractions) {
            for (const auto& s : config.sizes) {
                for (auto seed : config.seeds) cells.push_back({m, f, s, seed});
            }
        }
    }
    for (const auto& c : cells) {
        if (done.count(key_of(variant_name(c.method), c.fraction, c.size, c.seed))) {
            ++report.cells_resumed;
        } else {
            todo.push_back(c);
        }
    }

    if (!todo.empty()) {
        const TaskData data = load_task(config);
        std::unique_ptr<Teacher> owned;
        Teacher* teacher = teacher_override;
        if (teacher == nullptr) {
            owned = make_teacher(config.teacher, oracle_kind(config));
            teacher = owned.get();
        }
        const bool any_teacher_method = std::any_of(todo.begin(), todo.end(), [](const Cell& c) { return uses_teacher(c.method); });
        const bool needs_baseline_test = std::any_of(todo.begin(), todo.end(), [](const Cell& c) {
            return c.method == Variant::kRationaleInputBaseline;
        });

        // Teacher passes, shared by every method at equal (fraction, seed).
        std::map<std::pair<std::string, std::uint64_t>, Dataset> subsets, annotated;
        for (const auto& c : todo) {
            auto k = std::make_pair(format_double(c.fraction), c.seed);
            if (!subsets.count(k)) subsets.emplace(k, subsample(data.train_pool, c.fraction, c.seed));
            if (uses_teacher(c.method) && !annotated.count(k)) {
                annotated.emplace(k, teach(teacher, subsets.at(k), &report.extraction_calls));
            }
        }
        Dataset aug_annotated, val_annotated;
        if (any_teacher_method && !data.augmentation.empty()) aug_annotated = teach(teacher, data.augmentation, nullptr);
        if (any_teacher_method && !data.validation.empty()) val_annotated = teach(teacher, data.validation, nullptr);

        // The baseline reads teacher rationales for test inputs as well.
        Dataset baseline_test;
        if (needs_baseline_test) {
            Dataset annotated_test = teacher ? extract_dataset(*teacher, data.test) : teach(nullptr, data.test, nullptr);
            std::map<std::string, std::string> rationale_of;
            for (const auto& ex : annotated_test.examples) rationale_of[ex.input()] = *ex.teacher_rationale();
            baseline_test = data.test;
            for (auto& ex : baseline_test.examples) {
                auto it = rationale_of.find(ex.input());
                Example moved(rationale_input(ex.input(), it == rationale_of.end() ? "" : it->second));
                moved.set_gold_label(ex.gold_label());
                ex = std::move(moved);
            }
        }

        // One vocabulary per task, over everything a student may be trained on.
        std::vector<std::string> corpus = vocab_corpus(data.train_pool);
        for (const Dataset* ds : {&data.validation, static_cast<const Dataset*>(&aug_annotated), static_cast<const Dataset*>(&val_annotated)}) {
            auto more = vocab_corpus(*ds);
            corpus.insert(corpus.end(), more.begin(), more.end());
        }
        for (const auto& [k, ds] : annotated) {
            auto more = vocab_corpus(ds);
            corpus.insert(corpus.end(), more.begin(), more.end());
        }
        const Vocab vocab = Vocab::build(corpus, config.vocab_max_size);

        RecordWriter writer(records_path);
        std::mutex fail_mu, report_mu;
        std::vector<std::optional<MetricsRecord>> results(todo.size());

        auto run_cell = [&](std::size_t idx) {
            const Cell& c = todo[idx];
            const auto start = std::chrono::steady_clock::now();
            try {
                const auto k = std::make_pair(format_double(c.fraction), c.seed);
                Dataset train_set;
                Dataset validation;
                if (uses_teacher(c.method)) {
                    train_set = supervised_view(annotated.at(k), c.method, config.supervision);
                    if (!aug_annotated.empty()) train_set = concat(train_set, supervised_view(aug_annotated, c.method, config.supervision));
                    if (!val_annotated.empty()) validation = supervised_view(val_annotated, c.method, config.supervision);
                } else {
                    train_set = subsets.at(k);
                    validation = data.validation;
                }
                if (train_set.empty()) throw EmptySelection("no training examples survive extraction");

                TrainConfig tc = config.training;
                tc.variant = c.method;
                tc.seed = c.seed;
                const ModelConfig mc = sized_config(c.size, vocab.size(), tc.max_input_len, tc.max_output_len);
                SeqModel model(mc, c.seed);
                train(model, vocab, train_set, validation.empty() ? nullptr : &validation, tc);

                const Dataset& test = c.method == Variant::kRationaleInputBaseline ? baseline_test : data.test;
                MetricsRecord r;
                r.method = std::string(variant_name(c.method));
                r.fraction = c.fraction;
                r.model_size = c.size;
                r.seed = c.seed;
                r.param_count = param_count(mc);
                r.train_examples_used = train_set.size();
                r.test_accuracy = evaluate(model, vocab, test);
                r.wall_clock_seconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                writer.write(r);
                std::cerr << record_line(r) << '\n';
                std::lock_guard<std::mutex> lock(report_mu);
                results[idx] = r;
                ++report.cells_trained;
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(fail_mu);
                const bool fresh = !std::filesystem::exists(failures_path);
                std::ofstream out(failures_path, std::ios::app);
                if (fresh) out << "method,fraction,model_size,seed,error\n";
                std::string msg = e.what();
                std::replace(msg.begin(), msg.end(), ',', ';');
                std::replace(msg.begin(), msg.end(), '\n', ' ');
                out << variant_name(c.method) << ',' << format_double(c.fraction) << ',' << c.size << ',' << c.seed
                    << ',' << msg << '\n';
                std::cerr << "cell failed: " << variant_name(c.method) << ' ' << format_double(c.fraction) << ' '
                          << c.size << ' ' << c.seed << ": " << msg << '\n';
                std::lock_guard<std::mutex> rlock(report_mu);
                ++report.cells_failed;
            }
        };

        const std::size_t n_workers = std::min(config.workers, todo.size());
        if (n_workers <= 1) {
            for (std::size_t i = 0; i < todo.size(); ++i) run_cell(i);
        } else {
            std::atomic<std::size_t> next{0};
            std::vector<std::thread> pool;
            for (std::size_t w = 0; w < n_workers; ++w) {
                pool.emplace_back([&] {
                    for (std::size_t i = next++; i < todo.size(); i = next++) run_cell(i);
                });
            }
            for (auto& t : pool) t.join();
        }
        for (std::size_t i = 0; i < todo.size(); ++i) {
            if (results[i]) done.emplace(key_of(results[i]->method, todo[i].fraction, todo[i].size, todo[i].seed), *results[i]);
        }
    }

    for (const auto& c : cells) {
        auto it = done.find(key_of(variant_name(c.method), c.fraction, c.size, c.seed));
        if (it != done.end()) report.records.push_back(it->second);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Summary

std::vector<SummaryRow> summarize(const std::vector<MetricsRecord>& records) {
    std::map<std::tuple<std::string, std::string, double>, std::vector<double>> groups;
    for (const auto& r : records) groups[{r.method, r.model_size, r.fraction}].push_back(r.test_accuracy);
    std::vector<SummaryRow> out;
    for (const auto& [key, accs] : groups) {
        SummaryRow row;
        row.method = std::get<0>(key);
        row.model_size = std::get<1>(key);
        row.fraction = std::get<2>(key);
        row.n_seeds = accs.size();
        double sum = 0.0;
        for (double a : accs) sum += a;
        row.mean_accuracy = sum / static_cast<double>(accs.size());
        if (accs.size() > 1) {
            double ss = 0.0;
            for (double a : accs) ss += (a - row.mean_accuracy) * (a - row.mean_accuracy);
            const double n = static_cast<double>(accs.size());
            row.std_error = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
        }
        out.push_back(std::move(row));
    }
    return out;
}

void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoFailure("cannot write " + path.string());
    out << kSummaryHeader << '\n';
    for (const auto& r : rows) {
        out << r.method << ',' << format_double(r.fraction) << ',' << r.model_size << ',' << format_double(r.mean_accuracy)
            << ',' << format_double(r.std_error) << ',' << r.n_seeds << '\n';
    }
    if (!out) throw IoFailure("write failed for " + path.string());
}

std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path) {
    std::vector<SummaryRow> out;
    for (const auto& c : read_table(path, kSummaryHeader)) {
        SummaryRow r;
        r.method = c[0];
        r.fraction = parse_double(c[1], "fraction");
        r.model_size = c[2];
        r.mean_accuracy = parse_double(c[3], "mean_accuracy");
        r.std_error = parse_double(c[4], "std_error");
        r.n_seeds = parse_u64(c[5], "n_seeds");
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<Crossover> crossover(const std::vector<SummaryRow>& rows) {
    const std::string sbs(variant_name(Variant::kStepByStep));
    std::map<std::string, std::vector<const SummaryRow*>> by_size;
    for (const auto& r : rows) by_size[r.model_size].push_back(&r);
    std::vector<Crossover> out;
    for (const auto& [size, group] : by_size) {
        const SummaryRow* best = nullptr;
        std::vector<const SummaryRow*> ours;
        for (const auto* r : group) {
            if (r->method == sbs) {
                ours.push_back(r);
            } else if (r->fraction == 1.0 && (best == nullptr || r->mean_accuracy > best->mean_accuracy)) {
                best = r;
            }
        }
        if (best == nullptr || ours.empty()) continue;
        std::sort(ours.begin(), ours.end(), [](const SummaryRow* a, const SummaryRow* b) { return a->fraction < b->fraction; });
        Crossover c{size, best->method, best->mean_accuracy, std::nullopt};
        for (const auto* r : ours) {
            if (r->mean_accuracy >= best->mean_accuracy) {
                c.fraction = r->fraction;
                break;
            }
        }
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace distill
