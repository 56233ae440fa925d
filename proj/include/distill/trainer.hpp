#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "distill/data.hpp"
#include "distill/errors.hpp"
#include "distill/model.hpp"
#include "distill/tensor.hpp"
#include "distill/tokenizer.hpp"

namespace distill {

enum class Variant { kStandardFinetune, kStandardDistill, kStepByStep, kRationaleInputBaseline };

std::string_view variant_name(Variant v);
/// Accepts the snake_case names returned by variant_name.
Variant parse_variant(std::string_view name);

/// Joins input and rationale for the rationale-as-input baseline.
inline constexpr std::string_view kRationaleSeparator = "[sep]";
std::string rationale_input(std::string_view input, std::string_view rationale);

struct TrainConfig {
    Variant variant = Variant::kStepByStep;
    double lambda = 1.0;  ///< rationale weight; read by kStepByStep only
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double clip_norm = 1.0;  ///< global gradient-norm cap, 0 disables
    std::size_t batch_size = 64;
    std::size_t max_steps = 2000;
    std::size_t max_input_len = 32;
    std::size_t max_output_len = 32;
    std::uint64_t seed = 0;
    std::size_t eval_every = 100;
    std::size_t patience = 5;

    /// Hyperparameters used for 220M/770M students: learning rate 5e-5,
    /// batch size 64, input length 1024, at most 10000 steps.
    static TrainConfig full_scale();
    void validate() const;
};

enum class StreamTag { kLabel, kRationale };

struct TrainingBatch {
    TokenBatch src;
    TokenBatch tgt;  ///< target tokens ending in EOS, PAD-filled
    std::vector<StreamTag> tags;
};

/// One epoch of batches. batch_size counts examples: every batch holds up to
/// batch_size LABEL rows and, for kStepByStep, as many RATIONALE rows drawn
/// from an independently shuffled copy of the epoch. Throws
/// MissingSupervision when an example lacks a field the variant needs.
std::vector<TrainingBatch> make_batches(const Dataset& dataset, Variant variant, const Vocab& vocab,
                                        const TrainConfig& config, std::uint64_t epoch_seed);

/// Teacher-forced mean cross-entropy over non-pad target tokens of the rows
/// tagged LABEL. Throws EmptySelection when there are none.
Tensor label_loss(const SeqModel& model, const TrainingBatch& batch);
/// The same over RATIONALE rows.
Tensor rationale_loss(const SeqModel& model, const TrainingBatch& batch);
/// label_loss + lambda · rationale_loss.
Tensor combined_loss(const SeqModel& model, const TrainingBatch& batch, double lambda);

struct HistoryRow {
    std::size_t step = 0;
    std::optional<double> label_loss;
    std::optional<double> rationale_loss;
    double combined_loss = 0.0;
    std::optional<double> validation_accuracy;
};

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path);

class DivergenceDetected : public Error {
public:
    DivergenceDetected(std::size_t step, std::vector<HistoryRow> partial)
        : Error("loss became non-finite at step " + std::to_string(step)), history_(std::move(partial)) {}
    const std::vector<HistoryRow>& history() const { return history_; }

private:
    std::vector<HistoryRow> history_;
};

struct TrainResult {
    std::vector<HistoryRow> history;
    std::size_t steps_run = 0;
    std::optional<double> best_validation_accuracy;
    std::size_t best_step = 0;
};

/// SGD with momentum for max_steps steps. With a validation set, accuracy is
/// checked every eval_every steps, training stops after `patience` checks
/// without improvement, and the model is left at its best checkpoint.
TrainResult train(SeqModel& model, const Vocab& vocab, const Dataset& train_set, const Dataset* validation,
                  const TrainConfig& config);

/// Greedy label for `input` under the [label] prefix, normalized. Never
/// consults a teacher. max_len 0 means the model's target length limit.
std::string predict_label(const SeqModel& model, const Vocab& vocab, std::string_view input,
                          std::size_t max_len = 0);
std::string predict_rationale(const SeqModel& model, const Vocab& vocab, std::string_view input,
                              std::size_t max_len = 0);
/// Batched predict_label.
std::vector<std::string> predict_labels(const SeqModel& model, const Vocab& vocab,
                                        const std::vector<std::string>& inputs, std::size_t max_len = 0);

/// Texts a vocabulary for this dataset should cover: inputs, labels and
/// rationales of both supervision kinds, plus the baseline separator.
std::vector<std::string> vocab_corpus(const Dataset& dataset);

}  // namespace distill
