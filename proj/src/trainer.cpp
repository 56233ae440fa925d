#include "distill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "distill/text.hpp"

namespace distill {

std::string_view variant_name(Variant v) {
    switch (v) {
        case Variant::kStandardFinetune:
            return "standard_finetune";
        case Variant::kStandardDistill:
            return "standard_distill";
        case Variant::kStepByStep:
            return "step_by_step";
        case Variant::kRationaleInputBaseline:
            return "rationale_input_baseline";
    }
    return "unknown";
}

Variant parse_variant(std::string_view name) {
    for (Variant v : {Variant::kStandardFinetune, Variant::kStandardDistill, Variant::kStepByStep,
                      Variant::kRationaleInputBaseline}) {
        if (variant_name(v) == name) return v;
    }
    throw ConfigError("unknown training variant \"" + std::string(name) + "\"");
}

std::string rationale_input(std::string_view input, std::string_view rationale) {
    std::string out(input);
    out += ' ';
    out += kRationaleSeparator;
    out += ' ';
    out += rationale;
    return out;
}

TrainConfig TrainConfig::full_scale() {
    TrainConfig c;
    c.learning_rate = 5e-5;
    c.batch_size = 64;
    c.max_input_len = 1024;
    c.max_steps = 10000;
    return c;
}

void TrainConfig::validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (batch_size == 0 || max_steps == 0 || max_input_len < 2 || max_output_len < 2 || eval_every == 0) {
        throw ConfigError("batch_size, max_steps and eval_every must be positive; length caps at least 2");
    }
}

// ---------------------------------------------------------------------------
// Batching

namespace {

struct RowSupervision {
    std::string source;  // encoder text
    std::string label;
    std::optional<std::string> rationale;
};

// The only place the trainer reads supervision fields of an example.
RowSupervision supervision_for(const Example& ex, Variant variant, std::size_t index) {
    auto need = [index](const std::optional<std::string>& f, const char* name) -> const std::string& {
        if (!f) throw MissingSupervision(index, name);
        return *f;
    };
    switch (variant) {
        case Variant::kStandardFinetune:
            return {ex.input(), need(ex.gold_label(), "gold_label"), std::nullopt};
        case Variant::kStandardDistill:
            return {ex.input(), need(ex.teacher_label(), "teacher_label"), std::nullopt};
        case Variant::kStepByStep: {
            const std::string& label = need(ex.teacher_label(), "teacher_label");
            return {ex.input(), label, need(ex.teacher_rationale(), "teacher_rationale")};
        }
        case Variant::kRationaleInputBaseline: {
            const std::string& label = need(ex.teacher_label(), "teacher_label");
            return {rationale_input(ex.input(), need(ex.teacher_rationale(), "teacher_rationale")), label,
                    std::nullopt};
        }
    }
    throw ConfigError("unknown variant");
}

std::vector<int> encode_source(const Vocab& vocab, std::string_view text, TaskPrefix prefix, std::size_t cap) {
    auto ids = vocab.encode(text, prefix);
    if (ids.size() > cap) ids.resize(cap);
    return ids;
}

std::vector<int> encode_target(const Vocab& vocab, std::string_view text, std::size_t cap) {
    auto ids = vocab.encode(text);
    if (ids.size() + 1 > cap) ids.resize(cap - 1);
    ids.push_back(token::kEos);
    return ids;
}

std::uint64_t epoch_stream(std::uint64_t seed, std::uint64_t epoch) {
    std::uint64_t z = seed ^ (epoch + 0x9E3779B97F4A7C15ULL + (seed << 6) + (seed >> 2));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    return z ^ (z >> 31);
}

// Rows of one stream, selected and re-padded.
struct Selection {
    TokenBatch src;
    TokenBatch tgt;
};

Selection select_rows(const TrainingBatch& batch, StreamTag tag) {
    std::vector<std::vector<int>> src, tgt;
    for (std::size_t r = 0; r < batch.tags.size(); ++r) {
        if (batch.tags[r] != tag) continue;
        auto trim_pad = [](std::span<const int> row) {
            std::vector<int> out(row.begin(), row.end());
            while (!out.empty() && out.back() == token::kPad) out.pop_back();
            return out;
        };
        src.push_back(trim_pad(batch.src.row(r)));
        tgt.push_back(trim_pad(batch.tgt.row(r)));
    }
    if (src.empty()) {
        throw EmptySelection(std::string("batch has no ") + (tag == StreamTag::kLabel ? "LABEL" : "RATIONALE") +
                             " rows");
    }
    return {TokenBatch::from_rows(src), TokenBatch::from_rows(tgt)};
}

Tensor stream_loss(const SeqModel& model, const TrainingBatch& batch, StreamTag tag) {
    Selection sel = select_rows(batch, tag);
    Tensor logits = model.forward_logits(sel.src, shift_right(sel.tgt));
    Tensor flat = reshape(logits, {sel.tgt.rows * sel.tgt.cols, model.config().vocab_size});
    return cross_entropy(flat, sel.tgt.ids, token::kPad);
}


}  // namespace

std::vector<TrainingBatch> make_batches(const Dataset& dataset, Variant variant, const Vocab& vocab,
                                        const TrainConfig& config, std::uint64_t epoch_seed) {
    const std::size_t n = dataset.size();
    std::vector<std::vector<int>> label_src(n), label_tgt(n), rat_src, rat_tgt;
    const bool with_rationale = variant == Variant::kStepByStep;
    if (with_rationale) {
        rat_src.resize(n);
        rat_tgt.resize(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const RowSupervision sup = supervision_for(dataset.examples[i], variant, i);
        label_src[i] = encode_source(vocab, sup.source, TaskPrefix::kLabel, config.max_input_len);
        label_tgt[i] = encode_target(vocab, sup.label, config.max_output_len);
        if (with_rationale) {
            rat_src[i] = encode_source(vocab, sup.source, TaskPrefix::kRationale, config.max_input_len);
            rat_tgt[i] = encode_target(vocab, *sup.rationale, config.max_output_len);
        }
    }

    const auto label_order = shuffled_indices(n, epoch_seed);
    const auto rat_order = with_rationale ? shuffled_indices(n, epoch_stream(epoch_seed, 0xA11CE)) : label_order;
    std::vector<TrainingBatch> batches;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
        const std::size_t end = std::min(n, start + config.batch_size);
        std::vector<std::vector<int>> src, tgt;
        TrainingBatch b;
        for (std::size_t k = start; k < end; ++k) {
            src.push_back(label_src[label_order[k]]);
            tgt.push_back(label_tgt[label_order[k]]);
            b.tags.push_back(StreamTag::kLabel);
        }
        if (with_rationale) {
            for (std::size_t k = start; k < end; ++k) {
                src.push_back(rat_src[rat_order[k]]);
                tgt.push_back(rat_tgt[rat_order[k]]);
                b.tags.push_back(StreamTag::kRationale);
            }
        }
        b.src = TokenBatch::from_rows(src);
        b.tgt = TokenBatch::from_rows(tgt);
        batches.push_back(std::move(b));
    }
    return batches;
}

Tensor label_loss(const SeqModel& model, const TrainingBatch& batch) {
    return stream_loss(model, batch, StreamTag::kLabel);
}

Tensor rationale_loss(const SeqModel& model, const TrainingBatch& batch) {
    return stream_loss(model, batch, StreamTag::kRationale);
}

Tensor combined_loss(const SeqModel& model, const TrainingBatch& batch, double lambda) {
    return add(label_loss(model, batch), scale(rationale_loss(model, batch), lambda));
}

// ---------------------------------------------------------------------------
// Training loop

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoFailure("cannot write " + path.string());
    out << "step,label_loss,rationale_loss,combined_loss,validation_accuracy\n";
    out << std::setprecision(17);
    auto opt = [&out](const std::optional<double>& v) {
        if (v) out << *v;
    };
    for (const auto& row : history) {
        out << row.step << ',';
        opt(row.label_loss);
        out << ',';
        opt(row.rationale_loss);
        out << ',' << row.combined_loss << ',';
        opt(row.validation_accuracy);
        out << '\n';
    }
    if (!out) throw IoFailure("write failed for " + path.string());
}

namespace {

double validation_accuracy(const SeqModel& model, const Vocab& vocab, const Dataset& validation, Variant variant,
                           std::size_t max_len) {
    std::vector<std::string> inputs;
    std::vector<std::string> targets;
    for (std::size_t i = 0; i < validation.size(); ++i) {
        const RowSupervision sup = supervision_for(validation.examples[i], variant, i);
        inputs.push_back(sup.source);
        targets.push_back(sup.label);
    }
    if (inputs.empty()) return 0.0;
    const auto predictions = predict_labels(model, vocab, inputs, max_len);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) hits += predictions[i] == normalize(targets[i]) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(inputs.size());
}

}  // namespace

TrainResult train(SeqModel& model, const Vocab& vocab, const Dataset& train_set, const Dataset* validation,
                  const TrainConfig& config) {
    config.validate();
    if (train_set.empty()) throw ConfigError("training set is empty");
    if (config.max_input_len > model.config().max_src_len || config.max_output_len > model.config().max_tgt_len) {
        throw ConfigError("length caps exceed the model's maximum sequence lengths");
    }
    if (vocab.size() != model.config().vocab_size) throw ConfigError("vocabulary size differs from the model's");
    const bool use_validation = validation != nullptr && !validation->empty();

    auto& params = model.parameters();
    std::vector<std::vector<double>> velocity;
    velocity.reserve(params.size());
    for (const auto& p : params) velocity.emplace_back(p.tensor.numel(), 0.0);

    TrainResult result;
    std::vector<std::vector<double>> best;
    std::size_t evals_without_gain = 0;

    std::uint64_t epoch = 0;
    auto batches = make_batches(train_set, config.variant, vocab, config, epoch_stream(config.seed, epoch));
    std::size_t cursor = 0;
    const bool multitask = config.variant == Variant::kStepByStep;

    for (std::size_t step = 1; step <= config.max_steps; ++step) {
        if (cursor == batches.size()) {
            ++epoch;
            batches = make_batches(train_set, config.variant, vocab, config, epoch_stream(config.seed, epoch));
            cursor = 0;
        }
        const TrainingBatch& batch = batches[cursor++];

        HistoryRow row;
        row.step = step;
        Tape tape;
        Tensor total;
        try {
            TapeGuard guard(tape);
            Tensor l_label = label_loss(model, batch);
            row.label_loss = l_label.item();
            if (multitask) {
                Tensor l_rat = rationale_loss(model, batch);
                row.rationale_loss = l_rat.item();
                total = add(l_label, scale(l_rat, config.lambda));
            } else {
                total = l_label;
            }
            row.combined_loss = total.item();
        } catch (const NonFiniteInput&) {
            row.combined_loss = std::numeric_limits<double>::quiet_NaN();
        }
        if (!std::isfinite(row.combined_loss)) {
            result.history.push_back(row);
            throw DivergenceDetected(step, std::move(result.history));
        }
        model.zero_grad();
        tape.backward(total);

        double scale_factor = 1.0;
        if (config.clip_norm > 0.0) {
            double sq = 0.0;
            for (const auto& p : params) {
                for (double g : p.tensor.grad()) sq += g * g;
            }
            const double norm = std::sqrt(sq);
            if (!std::isfinite(norm)) {
                result.history.push_back(row);
                throw DivergenceDetected(step, std::move(result.history));
            }
            if (norm > config.clip_norm) scale_factor = config.clip_norm / norm;
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto data = params[i].tensor.mutable_data();
            auto grad = params[i].tensor.grad();
            if (grad.empty()) continue;
            auto& v = velocity[i];
            for (std::size_t j = 0; j < data.size(); ++j) {
                v[j] = config.momentum * v[j] + grad[j] * scale_factor;
                data[j] -= config.learning_rate * v[j];
            }
        }
        result.steps_run = step;

        bool stop = false;
        if (use_validation && step % config.eval_every == 0) {
            const double acc = validation_accuracy(model, vocab, *validation, config.variant, config.max_output_len);
            row.validation_accuracy = acc;
            if (!result.best_validation_accuracy || acc > *result.best_validation_accuracy) {
                result.best_validation_accuracy = acc;
                result.best_step = step;
                evals_without_gain = 0;
                best.clear();
                for (const auto& p : params) best.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
            } else if (++evals_without_gain >= config.patience) {
                stop = true;
            }
        }
        result.history.push_back(row);
        if (stop) break;
    }

    if (!best.empty()) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            std::copy(best[i].begin(), best[i].end(), params[i].tensor.mutable_data().begin());
        }
    }
    model.zero_grad();
    return result;
}

// ---------------------------------------------------------------------------
// Prediction

namespace {

std::vector<std::string> predict_with_prefix(const SeqModel& model, const Vocab& vocab,
                                             const std::vector<std::string>& inputs, TaskPrefix prefix,
                                             std::size_t max_len) {
    constexpr std::size_t kChunk = 64;
    if (max_len == 0) max_len = model.config().max_tgt_len;
    std::vector<std::string> out;
    out.reserve(inputs.size());
    for (std::size_t start = 0; start < inputs.size(); start += kChunk) {
        const std::size_t end = std::min(inputs.size(), start + kChunk);
        std::vector<std::vector<int>> srcs;
        for (std::size_t i = start; i < end; ++i) {
            srcs.push_back(encode_source(vocab, inputs[i], prefix, model.config().max_src_len));
        }
        for (const auto& ids : model.greedy_decode_batch(srcs, max_len)) out.push_back(normalize(vocab.decode(ids)));
    }
    return out;
}

}  // namespace

std::string predict_label(const SeqModel& model, const Vocab& vocab, std::string_view input, std::size_t max_len) {
    return predict_with_prefix(model, vocab, {std::string(input)}, TaskPrefix::kLabel, max_len).front();
}

std::string predict_rationale(const SeqModel& model, const Vocab& vocab, std::string_view input,
                              std::size_t max_len) {
    return predict_with_prefix(model, vocab, {std::string(input)}, TaskPrefix::kRationale, max_len).front();
}

std::vector<std::string> predict_labels(const SeqModel& model, const Vocab& vocab,
                                        const std::vector<std::string>& inputs, std::size_t max_len) {
    return predict_with_prefix(model, vocab, inputs, TaskPrefix::kLabel, max_len);
}

std::vector<std::string> vocab_corpus(const Dataset& dataset) {
    std::vector<std::string> corpus{std::string(kRationaleSeparator)};
    for (const auto& ex : dataset.examples) {
        corpus.push_back(ex.input());
        for (const auto* f : {&ex.gold_label(), &ex.gold_rationale(), &ex.teacher_label(), &ex.teacher_rationale()}) {
            if (*f) corpus.push_back(**f);
        }
    }
    return corpus;
}

}  // namespace distill
