#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace distill {

/// Reserved ids. They occupy the first slots of every vocabulary and are
/// never written to vocab files.
namespace token {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kPrefixLabel = 4;
inline constexpr int kPrefixRationale = 5;
inline constexpr int kReservedCount = 6;
}  // namespace token

/// Task prefix prepended to encoder inputs.
enum class TaskPrefix { kLabel, kRationale };

class Vocab {
public:
    /// Reserved tokens only.
    Vocab();

    /// Word-level vocabulary over normalized corpus words. Ranked by
    /// descending frequency, ties broken lexicographically, truncated so that
    /// size() <= max_size.
    static Vocab build(std::span<const std::string> corpus, std::size_t max_size);

    /// One token per line; line i holds the token with id i + kReservedCount.
    static Vocab load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::size_t size() const { return id_to_token_.size(); }
    /// Id of a normalized word, or kUnk.
    int id(std::string_view word) const;
    const std::string& token_text(int id) const;

    std::vector<int> encode(std::string_view text, std::optional<TaskPrefix> prefix = std::nullopt) const;
    /// Joins surface tokens with single spaces, skipping PAD/BOS/EOS and
    /// task prefixes.
    std::string decode(std::span<const int> ids) const;

    bool operator==(const Vocab& other) const { return id_to_token_ == other.id_to_token_; }

private:
    void append(std::string token);

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

}  // namespace distill
