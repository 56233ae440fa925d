#include "distill/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "distill/errors.hpp"
#include "distill/text.hpp"

namespace distill {

namespace {
const char* const kReservedText[token::kReservedCount] = {"<pad>", "<bos>", "<eos>", "<unk>", "[label]", "[rationale]"};
}  // namespace

Vocab::Vocab() {
    for (const char* t : kReservedText) append(t);
}

void Vocab::append(std::string token) {
    token_to_id_.emplace(token, static_cast<int>(id_to_token_.size()));
    id_to_token_.push_back(std::move(token));
}

Vocab Vocab::build(std::span<const std::string> corpus, std::size_t max_size) {
    if (max_size <= static_cast<std::size_t>(token::kReservedCount)) {
        throw EmptyCorpus("max_size must exceed the reserved token count");
    }
    std::map<std::string, std::size_t> counts;
    for (const auto& line : corpus) {
        for (auto& w : split_words(line)) ++counts[std::move(w)];
    }
    if (counts.empty()) throw EmptyCorpus("corpus contains no tokens");

    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    Vocab vocab;
    for (auto& [word, count] : ranked) {
        if (vocab.size() >= max_size) break;
        // Words that spell a reserved token stay mapped to the reserved id.
        if (vocab.token_to_id_.contains(word)) continue;
        vocab.append(word);
    }
    return vocab;
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot open vocab file " + path.string());
    Vocab vocab;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || vocab.token_to_id_.contains(line)) {
            throw CorruptCheckpoint("vocab file " + path.string() + ": invalid or duplicate token \"" + line + "\"");
        }
        vocab.append(line);
    }
    return vocab;
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoFailure("cannot write vocab file " + path.string());
    for (std::size_t i = token::kReservedCount; i < id_to_token_.size(); ++i) out << id_to_token_[i] << '\n';
    if (!out) throw IoFailure("write failed for " + path.string());
}

int Vocab::id(std::string_view word) const {
    auto it = token_to_id_.find(std::string(word));
    return it == token_to_id_.end() ? token::kUnk : it->second;
}

const std::string& Vocab::token_text(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
        throw InvalidId("token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(id_to_token_.size()));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(std::string_view text, std::optional<TaskPrefix> prefix) const {
    std::vector<int> ids;
    if (prefix) ids.push_back(*prefix == TaskPrefix::kLabel ? token::kPrefixLabel : token::kPrefixRationale);
    for (const auto& w : split_words(text)) {
        const int i = id(w);
        // A word spelling a reserved marker is not the marker.
        ids.push_back(i < token::kReservedCount ? token::kUnk : i);
    }
    return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
    std::string out;
    for (int i : ids) {
        const std::string& text = token_text(i);
        if (i == token::kPad || i == token::kBos || i == token::kEos || i == token::kPrefixLabel ||
            i == token::kPrefixRationale) {
            continue;
        }
        if (!out.empty()) out.push_back(' ');
        out += text;
    }
    return out;
}

}  // namespace distill
