#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace distill {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define DISTILL_DEFINE_ERROR(Name)            \
    class Name : public Error {               \
    public:                                   \
        using Error::Error;                   \
    }

// tensor-core
DISTILL_DEFINE_ERROR(DimensionMismatch);
DISTILL_DEFINE_ERROR(NonFiniteInput);
DISTILL_DEFINE_ERROR(AllPositionsIgnored);
DISTILL_DEFINE_ERROR(TargetOutOfRange);
DISTILL_DEFINE_ERROR(NonScalarLoss);
DISTILL_DEFINE_ERROR(TapeConsumed);

// seq2seq-model
DISTILL_DEFINE_ERROR(SequenceTooLong);
DISTILL_DEFINE_ERROR(BatchShapeMismatch);
DISTILL_DEFINE_ERROR(CorruptCheckpoint);
DISTILL_DEFINE_ERROR(IoFailure);
DISTILL_DEFINE_ERROR(InvalidConfig);

// tokenizer
DISTILL_DEFINE_ERROR(EmptyCorpus);
DISTILL_DEFINE_ERROR(InvalidId);

// teacher
DISTILL_DEFINE_ERROR(UnparsableInput);
DISTILL_DEFINE_ERROR(ParseFailure);
DISTILL_DEFINE_ERROR(TransportError);
DISTILL_DEFINE_ERROR(AuthMissing);

// trainer / harness
DISTILL_DEFINE_ERROR(EmptySelection);
DISTILL_DEFINE_ERROR(NoGoldLabels);
DISTILL_DEFINE_ERROR(ConfigError);
DISTILL_DEFINE_ERROR(InvalidExample);

#undef DISTILL_DEFINE_ERROR

/// A JSONL line that is not a JSON object.
class MalformedLine : public Error {
public:
    MalformedLine(std::size_t line_no, const std::string& what)
        : Error("line " + std::to_string(line_no) + ": " + what), line_no_(line_no) {}
    std::size_t line_no() const noexcept { return line_no_; }

private:
    std::size_t line_no_;
};

class MissingField : public Error {
public:
    MissingField(std::size_t line_no, std::string field)
        : Error("line " + std::to_string(line_no) + ": missing field \"" + field + "\""),
          line_no_(line_no), field_(std::move(field)) {}
    std::size_t line_no() const noexcept { return line_no_; }
    const std::string& field() const noexcept { return field_; }

private:
    std::size_t line_no_;
    std::string field_;
};

/// An example lacks the supervision field a training variant needs.
class MissingSupervision : public Error {
public:
    MissingSupervision(std::size_t index, std::string field)
        : Error("example " + std::to_string(index) + " lacks " + field),
          index_(index), field_(std::move(field)) {}
    std::size_t index() const noexcept { return index_; }
    const std::string& field() const noexcept { return field_; }

private:
    std::size_t index_;
    std::string field_;
};

}  // namespace distill
