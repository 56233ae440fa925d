#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "distill/data.hpp"
#include "distill/model.hpp"
#include "distill/teacher.hpp"
#include "distill/tokenizer.hpp"
#include "distill/trainer.hpp"

namespace distill {

/// normalize(prediction) == normalize(gold). No numeric coercion.
bool exact_match(std::string_view prediction, std::string_view gold);

using Predictor = std::function<std::string(const std::string& input)>;

/// Fraction of test examples whose prediction exactly matches the gold
/// label. The predictor only ever sees inputs. Throws NoGoldLabels when the
/// set is empty or some example has no gold label.
double evaluate(const Predictor& predictor, const Dataset& test);
/// evaluate with batched predict_label.
double evaluate(const SeqModel& model, const Vocab& vocab, const Dataset& test);

enum class TaskSource { kArithmetic, kEntailment, kJsonl };
enum class SupervisionMode { kLabeled, kUnlabeled };
enum class TeacherKind { kOracle, kRemote, kPrecomputed };

struct TaskSpec {
    TaskSource source = TaskSource::kArithmetic;
    std::size_t train_size = 2000;
    std::size_t val_size = 0;  ///< generated tasks only; 0 disables early stopping
    std::size_t test_size = 500;
    int depth = 2;
    std::uint64_t seed = 0;
    std::filesystem::path train_path, val_path, test_path;  // jsonl only
    std::optional<TaskKind> oracle_task;                     // jsonl with oracle teacher
};

struct TeacherSpec {
    TeacherKind kind = TeacherKind::kOracle;
    double noise_rate = 0.0;
    std::uint64_t seed = 0;
    RemoteTeacherConfig remote;
    std::filesystem::path template_path;

    /// {"kind": "oracle", "noise_rate": r, "seed": s} or {"kind": "remote",
    /// "endpoint", "template", ...}; unknown keys are rejected.
    static TeacherSpec from_json(std::string_view text);
};

/// The teacher described by spec, or nullptr for precomputed outputs.
std::unique_ptr<Teacher> make_teacher(const TeacherSpec& spec, TaskKind task);

/// Training hyperparameters from a JSON object; unknown keys are rejected.
TrainConfig train_config_from_json(std::string_view text);

/// Extra unlabeled examples drawn from a disjoint generator seed and added
/// to every teacher-supervised training set.
struct AugmentationSpec {
    std::size_t extra_examples = 0;
    std::uint64_t seed = 0;
};

struct ExperimentConfig {
    TaskSpec task;
    std::vector<Variant> methods;
    std::vector<double> fractions;
    std::vector<std::string> sizes;
    std::vector<std::uint64_t> seeds;
    SupervisionMode supervision = SupervisionMode::kUnlabeled;
    TeacherSpec teacher;
    std::optional<AugmentationSpec> augmentation;
    std::filesystem::path output_dir = "results";
    TrainConfig training;  ///< variant and seed are set per cell
    std::size_t vocab_max_size = 4096;
    std::size_t workers = 1;

    /// Throws ConfigError on empty grids, fractions outside (0, 1] or not
    /// strictly increasing, unknown sizes and inconsistent task/teacher
    /// settings.
    void validate() const;

    /// JSON document with the fields above; unknown keys are rejected.
    static ExperimentConfig from_json(std::string_view text);
    static ExperimentConfig from_file(const std::filesystem::path& path);
};

struct MetricsRecord {
    std::string method;
    double fraction = 0.0;
    std::string model_size;
    std::uint64_t seed = 0;
    std::uint64_t param_count = 0;
    std::size_t train_examples_used = 0;
    double test_accuracy = 0.0;
    double wall_clock_seconds = 0.0;
};

inline constexpr std::string_view kRecordsHeader =
    "method,fraction,model_size,seed,param_count,train_examples_used,test_accuracy,wall_clock_seconds";
inline constexpr std::string_view kSummaryHeader = "method,fraction,model_size,mean_accuracy,std_error,n_seeds";

/// Shortest text that parses back to the same double.
std::string format_double(double v);

std::vector<MetricsRecord> read_records_csv(const std::filesystem::path& path);
/// Appends rows, writing the header first when the file is new or empty.
void append_records_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path);

/// What run_experiment did, for callers and tests.
struct ExperimentReport {
    std::vector<MetricsRecord> records;  ///< all records, resumed ones included
    std::size_t cells_trained = 0;
    std::size_t cells_resumed = 0;
    std::size_t cells_failed = 0;
    std::size_t extraction_calls = 0;  ///< teacher passes over training subsets
};

/// Runs the method × fraction × size × seed cross-product into
/// output_dir/records.csv. Existing records are kept and their cells
/// skipped. Failed cells go to output_dir/failures.csv and are retried on
/// the next run. `teacher_override` replaces the configured teacher.
ExperimentReport run_experiment(const ExperimentConfig& config, Teacher* teacher_override = nullptr);

struct SummaryRow {
    std::string method;
    double fraction = 0.0;
    std::string model_size;
    double mean_accuracy = 0.0;
    double std_error = 0.0;
    std::size_t n_seeds = 0;
};

/// Mean and standard error (sample deviation over sqrt(n), 0 for one seed)
/// per (method, fraction, size), ordered by method, size, fraction.
std::vector<SummaryRow> summarize(const std::vector<MetricsRecord>& records);

void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path);
std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path);

struct Crossover {
    std::string model_size;
    std::string baseline_method;  ///< best non-step-by-step method at fraction 1
    double baseline_accuracy = 0.0;
    std::optional<double> fraction;  ///< smallest fraction where step_by_step catches up
};

/// One entry per size that has step_by_step rows and a baseline at fraction 1.
std::vector<Crossover> crossover(const std::vector<SummaryRow>& rows);

}  // namespace distill
