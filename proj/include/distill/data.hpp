#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace distill {

enum class Field { kInput, kGoldLabel, kGoldRationale, kTeacherLabel, kTeacherRationale };
inline constexpr std::size_t kFieldCount = 5;

/// One task instance. Gold fields hold human (or generator) supervision,
/// teacher fields hold what a teacher extracted; the two never mix.
class Example {
public:
    /// Throws InvalidExample when input is empty.
    explicit Example(std::string input);

    const std::string& input() const;
    const std::optional<std::string>& gold_label() const;
    const std::optional<std::string>& gold_rationale() const;
    const std::optional<std::string>& teacher_label() const;
    const std::optional<std::string>& teacher_rationale() const;

    void set_gold_label(std::optional<std::string> v) { gold_label_ = std::move(v); }
    void set_gold_rationale(std::optional<std::string> v) { gold_rationale_ = std::move(v); }
    void set_teacher_label(std::optional<std::string> v) { teacher_label_ = std::move(v); }
    void set_teacher_rationale(std::optional<std::string> v) { teacher_rationale_ = std::move(v); }

    bool operator==(const Example&) const = default;

private:
    std::string input_;
    std::optional<std::string> gold_label_;
    std::optional<std::string> gold_rationale_;
    std::optional<std::string> teacher_label_;
    std::optional<std::string> teacher_rationale_;
};

/// Counts Example field reads made on the current thread while alive.
/// Lets tests prove which supervision a code path consumes.
class FieldAccessRecorder {
public:
    FieldAccessRecorder();
    ~FieldAccessRecorder();
    FieldAccessRecorder(const FieldAccessRecorder&) = delete;
    FieldAccessRecorder& operator=(const FieldAccessRecorder&) = delete;

    std::size_t count(Field f) const { return counts_[static_cast<std::size_t>(f)]; }
    void note(Field f) { ++counts_[static_cast<std::size_t>(f)]; }

private:
    FieldAccessRecorder* previous_;
    std::size_t counts_[kFieldCount] = {};
};

enum class Split { kTrain, kValidation, kTest };

struct Dataset {
    std::string name;
    Split split = Split::kTrain;
    std::vector<Example> examples;

    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }
};

/// Rule-derived answer for a synthetic task input.
struct Solution {
    std::vector<std::string> steps;  ///< rationale steps, joined by " ; "
    std::string label;

    std::string rationale() const;
};

/// Parses and solves an arithmetic input; nullopt when it is not a
/// well-formed expression of the generator's grammar.
std::optional<Solution> solve_arithmetic(std::string_view input);
/// Same for entailment inputs.
std::optional<Solution> solve_entailment(std::string_view input);

/// Infix expressions over digits 0-9 with `depth` binary operators drawn
/// from {+, −, ×}. × binds tighter; equal precedence evaluates left to
/// right. The rationale lists every reduction step, e.g.
/// "2 × 3 = 6 ; 7 − 6 = 1". Example i depends only on (seed, i).
Dataset gen_arithmetic(std::uint64_t seed, std::size_t n, int depth = 2);

/// Templated premise/hypothesis pairs over a closed world of objects with a
/// colour and a size. Labels cycle through entailment, contradiction and
/// neutral, so classes are balanced to within one example.
Dataset gen_entailment(std::uint64_t seed, std::size_t n);

/// One JSON object per line: "input" (required), "label" and "rationale"
/// (gold, optional), "teacher_label" and "teacher_rationale" (optional).
/// Other keys are ignored; blank lines are skipped.
Dataset load_jsonl(const std::filesystem::path& path);
void write_jsonl(const Dataset& dataset, const std::filesystem::path& path);
void write_jsonl(const Dataset& dataset, std::ostream& out);

/// Seeded Fisher-Yates permutation of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

/// floor(val_fraction·N) examples go to validation, the rest to train.
/// Both outputs keep the input's relative order.
std::pair<Dataset, Dataset> split_train_val(const Dataset& dataset, double val_fraction, std::uint64_t seed);

/// Keeps max(1, floor(fraction·N)) examples: the first ones of a seeded
/// permutation, so smaller fractions are subsets of larger ones.
Dataset subsample(const Dataset& dataset, double fraction, std::uint64_t seed);

/// The same examples with gold label and rationale removed.
Dataset mask_gold(const Dataset& dataset);

/// The default fraction grid of the data-efficiency sweeps.
std::vector<double> default_fraction_grid();

}  // namespace distill
