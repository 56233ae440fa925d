#pragma once

#include <chrono>
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

namespace distill {

struct Demonstration {
    std::string input;
    std::string rationale;
    std::string label;
};

/// Few-shot chain-of-thought prompt: a preamble and (input, rationale,
/// label) demonstrations rendered with three markers.
struct PromptTemplate {
    std::string preamble;
    std::vector<Demonstration> demonstrations;
    std::string input_marker = "Q:";
    std::string rationale_marker = "R:";
    std::string label_marker = "A:";

    /// Throws ConfigError unless there is at least one demonstration with
    /// nonempty fields and all markers are nonempty.
    void validate() const;
    /// Canonical byte serialization; feeds the extraction cache key.
    std::string canonical_bytes() const;

    static PromptTemplate from_json_file(const std::filesystem::path& path);
};

/// Renders the prompt for input x. Grammar (see docs/prompt_grammar.md):
///
///   [preamble "\n\n"]                       (omitted when preamble is empty)
///   { input_marker " " x^p "\n"
///     rationale_marker " " r^p "\n"
///     label_marker " " y^p "\n\n" }         (per demonstration, in order)
///   input_marker " " x "\n"
///   rationale_marker
std::string build_prompt(const PromptTemplate& tmpl, std::string_view x);

struct TeacherOutput {
    std::string rationale;
    std::string label;
    std::string raw_completion;
};

/// rationale = text before the first label marker (trimmed); label = the
/// first line after it, normalized. Throws ParseFailure when the marker is
/// absent or the label is empty.
TeacherOutput parse_completion(std::string_view text, const PromptTemplate& tmpl);

/// Inverse of parse_completion for well-formed outputs.
std::string render_completion(const TeacherOutput& output, const PromptTemplate& tmpl);

enum class TaskKind { kArithmetic, kEntailment };

/// Rule-based stand-in for a large teacher. With probability noise_rate
/// (decided per input from seed) the label is corrupted to a wrong value and
/// the rationale is cut after its first step. Throws UnparsableInput.
TeacherOutput oracle_teach(TaskKind task, std::string_view x, double noise_rate, std::uint64_t seed);

/// Whether oracle_teach(task, x, noise_rate, seed) corrupts x.
bool oracle_corrupts(std::string_view x, double noise_rate, std::uint64_t seed);

enum class ExtractionStatus { kOk, kParseFailure, kTransportError };

struct ExtractionResult {
    std::string input;
    ExtractionStatus status = ExtractionStatus::kOk;
    std::optional<TeacherOutput> output;
    std::string error;
};

/// Anything that can label inputs with (rationale, label).
class Teacher {
public:
    virtual ~Teacher() = default;
    /// One result per input, in input order.
    virtual std::vector<ExtractionResult> extract(const std::vector<std::string>& inputs) = 0;
};

class OracleTeacher : public Teacher {
public:
    OracleTeacher(TaskKind task, double noise_rate, std::uint64_t seed);
    std::vector<ExtractionResult> extract(const std::vector<std::string>& inputs) override;

private:
    TaskKind task_;
    double noise_rate_;
    std::uint64_t seed_;
};

struct RemoteTeacherConfig {
    std::string endpoint;  ///< http://host[:port]/path
    std::string token_env = "TEACHER_API_TOKEN";
    std::size_t max_parallel = 4;
    std::chrono::milliseconds timeout{30000};
    std::size_t retry_budget = 3;
    std::chrono::milliseconds backoff_base{200};
    std::filesystem::path cache_dir = "teacher_cache";
    int max_tokens = 256;

    void validate() const;
};

/// Completion client for a {"prompt","max_tokens","temperature"} →
/// {"completion"} endpoint with an on-disk cache, bounded parallelism and
/// exponential-backoff retries.
class RemoteTeacher : public Teacher {
public:
    RemoteTeacher(RemoteTeacherConfig config, PromptTemplate tmpl);
    /// Throws AuthMissing when the token variable is unset and some input is
    /// not cached. Transport failures are reported per item.
    std::vector<ExtractionResult> extract(const std::vector<std::string>& inputs) override;

    /// HTTP requests issued by this instance so far, retries included.
    std::size_t requests_sent() const;
    std::string cache_key(std::string_view input) const;

private:
    struct State;
    RemoteTeacherConfig config_;
    PromptTemplate template_;
    std::shared_ptr<State> state_;
};

/// Convenience wrapper: the prompt-template path of remote_teach.
std::vector<ExtractionResult> remote_teach(const RemoteTeacherConfig& config, const PromptTemplate& tmpl,
                                           const std::vector<std::string>& inputs);

/// Fills teacher fields of `dataset` from `teacher`. Failed items are dropped
/// (the default policy); their count is returned through `dropped`.
Dataset extract_dataset(Teacher& teacher, const Dataset& dataset, std::size_t* dropped = nullptr);

}  // namespace distill
