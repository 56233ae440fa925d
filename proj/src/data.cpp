#include "distill/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "distill/errors.hpp"
#include "distill/text.hpp"
#include "json.hpp"

namespace distill {

namespace {

thread_local FieldAccessRecorder* g_recorder = nullptr;

void note(Field f) {
    if (g_recorder != nullptr) g_recorder->note(f);
}

// splitmix64 finalizer; mixes (seed, index) into an independent stream seed.
std::uint64_t mix(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

const std::string kPlus = "+";
const std::string kMinus = "\xE2\x88\x92";  // U+2212
const std::string kTimes = "\xC3\x97";      // U+00D7

std::optional<long long> parse_int(const std::string& s) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

std::string step(long long a, const std::string& op, long long b, long long c) {
    return std::to_string(a) + " " + op + " " + std::to_string(b) + " = " + std::to_string(c);
}

// Closed world of the entailment task.
const std::vector<std::string> kEntities = {"box", "ball", "cup", "lamp", "book", "chair", "hat", "kite"};
const std::vector<std::string> kColors = {"red", "blue", "green", "yellow", "black", "white"};
const std::vector<std::string> kSizes = {"small", "large"};

enum class Kind { kColor, kSize };

std::optional<Kind> kind_of(const std::string& attr) {
    if (std::find(kColors.begin(), kColors.end(), attr) != kColors.end()) return Kind::kColor;
    if (std::find(kSizes.begin(), kSizes.end(), attr) != kSizes.end()) return Kind::kSize;
    return std::nullopt;
}

struct Fact {
    std::string entity;
    std::string attribute;
    Kind kind;
};

std::string fact_text(const Fact& f) { return "the " + f.entity + " is " + f.attribute; }

// Parses "the <entity> is <attribute>" starting at words[pos].
std::optional<Fact> parse_fact(const std::vector<std::string>& words, std::size_t& pos) {
    if (pos + 4 > words.size() || words[pos] != "the" || words[pos + 2] != "is") return std::nullopt;
    const std::string& entity = words[pos + 1];
    const std::string& attr = words[pos + 3];
    if (std::find(kEntities.begin(), kEntities.end(), entity) == kEntities.end()) return std::nullopt;
    auto kind = kind_of(attr);
    if (!kind) return std::nullopt;
    pos += 4;
    return Fact{entity, attr, *kind};
}

}  // namespace

// ---------------------------------------------------------------------------

Example::Example(std::string input) : input_(std::move(input)) {
    if (trim(input_).empty()) throw InvalidExample("example input must be nonempty");
}

const std::string& Example::input() const {
    note(Field::kInput);
    return input_;
}
const std::optional<std::string>& Example::gold_label() const {
    note(Field::kGoldLabel);
    return gold_label_;
}
const std::optional<std::string>& Example::gold_rationale() const {
    note(Field::kGoldRationale);
    return gold_rationale_;
}
const std::optional<std::string>& Example::teacher_label() const {
    note(Field::kTeacherLabel);
    return teacher_label_;
}
const std::optional<std::string>& Example::teacher_rationale() const {
    note(Field::kTeacherRationale);
    return teacher_rationale_;
}

FieldAccessRecorder::FieldAccessRecorder() : previous_(g_recorder) { g_recorder = this; }
FieldAccessRecorder::~FieldAccessRecorder() { g_recorder = previous_; }

std::string Solution::rationale() const {
    std::string out;
    for (const auto& s : steps) {
        if (!out.empty()) out += " ; ";
        out += s;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Arithmetic

std::optional<Solution> solve_arithmetic(std::string_view input) {
    const auto words = split_words(input);
    if (words.empty() || words.size() % 2 == 0) return std::nullopt;
    std::vector<long long> values;
    std::vector<std::string> ops;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i % 2 == 0) {
            auto v = parse_int(words[i]);
            if (!v) return std::nullopt;
            values.push_back(*v);
        } else {
            if (words[i] != kPlus && words[i] != kMinus && words[i] != kTimes) return std::nullopt;
            ops.push_back(words[i]);
        }
    }
    Solution sol;
    // Products first, leftmost first.
    for (std::size_t k = 0; k < ops.size();) {
        if (ops[k] != kTimes) {
            ++k;
            continue;
        }
        const long long c = values[k] * values[k + 1];
        sol.steps.push_back(step(values[k], kTimes, values[k + 1], c));
        values[k] = c;
        values.erase(values.begin() + static_cast<std::ptrdiff_t>(k) + 1);
        ops.erase(ops.begin() + static_cast<std::ptrdiff_t>(k));
    }
    long long acc = values[0];
    for (std::size_t k = 0; k < ops.size(); ++k) {
        const long long c = ops[k] == kPlus ? acc + values[k + 1] : acc - values[k + 1];
        sol.steps.push_back(step(acc, ops[k], values[k + 1], c));
        acc = c;
    }
    sol.label = std::to_string(acc);
    return sol;
}

Dataset gen_arithmetic(std::uint64_t seed, std::size_t n, int depth) {
    if (depth < 2 || depth > 4) throw ConfigError("arithmetic depth must be in 2..4");
    static const std::string* const kOps[] = {&kPlus, &kMinus, &kTimes};
    Dataset ds{"arithmetic", Split::kTrain, {}};
    ds.examples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::mt19937_64 rng(mix(seed, i));
        std::string text = std::to_string(pick(rng, 10));
        for (int k = 0; k < depth; ++k) {
            text += " " + *kOps[pick(rng, 3)] + " " + std::to_string(pick(rng, 10));
        }
        auto sol = solve_arithmetic(text);
        Example ex(text);
        ex.set_gold_label(sol->label);
        ex.set_gold_rationale(sol->rationale());
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Entailment

std::optional<Solution> solve_entailment(std::string_view input) {
    const auto words = split_words(input);
    std::size_t pos = 0;
    if (words.size() < 2 || words[0] != "premise" || words[1] != ":") return std::nullopt;
    pos = 2;
    std::vector<Fact> premise;
    while (true) {
        auto f = parse_fact(words, pos);
        if (!f) return std::nullopt;
        premise.push_back(*f);
        if (pos < words.size() && words[pos] == "and") {
            ++pos;
            continue;
        }
        break;
    }
    if (pos + 2 > words.size() || words[pos] != "hypothesis" || words[pos + 1] != ":") return std::nullopt;
    pos += 2;
    auto hyp = parse_fact(words, pos);
    if (!hyp || pos != words.size()) return std::nullopt;

    const char* kind_plural = hyp->kind == Kind::kColor ? "colors" : "sizes";
    const char* kind_single = hyp->kind == Kind::kColor ? "color" : "size";
    bool entity_seen = false;
    for (const auto& f : premise) {
        if (f.entity != hyp->entity) continue;
        entity_seen = true;
        if (f.kind != hyp->kind) continue;
        Solution sol;
        sol.steps.push_back("premise says " + fact_text(f));
        sol.steps.push_back("hypothesis says " + hyp->attribute);
        const bool same = f.attribute == hyp->attribute;
        sol.steps.push_back(std::string(kind_plural) + (same ? " match" : " conflict"));
        sol.label = same ? "entailment" : "contradiction";
        return sol;
    }
    Solution sol;
    sol.steps.push_back(entity_seen ? "premise says nothing about the " + std::string(kind_single) + " of the " +
                                          hyp->entity
                                    : "premise says nothing about the " + hyp->entity);
    sol.steps.push_back("hypothesis is unsupported");
    sol.label = "neutral";
    return sol;
}

Dataset gen_entailment(std::uint64_t seed, std::size_t n) {
    static const char* const kLabels[] = {"entailment", "contradiction", "neutral"};
    Dataset ds{"entailment", Split::kTrain, {}};
    ds.examples.reserve(n);
    auto random_fact = [](std::mt19937_64& rng, const std::string& entity) {
        const Kind kind = pick(rng, 2) == 0 ? Kind::kColor : Kind::kSize;
        const auto& values = kind == Kind::kColor ? kColors : kSizes;
        return Fact{entity, values[pick(rng, values.size())], kind};
    };
    for (std::size_t i = 0; i < n; ++i) {
        std::mt19937_64 rng(mix(seed, i));
        const std::size_t cls = static_cast<std::size_t>((i + seed) % 3);
        const std::size_t e1 = pick(rng, kEntities.size());
        std::size_t e2 = pick(rng, kEntities.size() - 1);
        if (e2 >= e1) ++e2;
        const std::vector<Fact> premise = {random_fact(rng, kEntities[e1]), random_fact(rng, kEntities[e2])};
        const Fact& anchor = premise[pick(rng, 2)];
        Fact hyp = anchor;
        if (cls == 1) {
            const auto& values = anchor.kind == Kind::kColor ? kColors : kSizes;
            std::size_t v = pick(rng, values.size() - 1);
            if (values[v] == anchor.attribute) v = values.size() - 1;
            hyp.attribute = values[v];
        } else if (cls == 2) {
            if (pick(rng, 2) == 0) {
                std::size_t e = pick(rng, kEntities.size());
                while (e == e1 || e == e2) e = (e + 1) % kEntities.size();
                hyp = random_fact(rng, kEntities[e]);
            } else {
                hyp.kind = anchor.kind == Kind::kColor ? Kind::kSize : Kind::kColor;
                const auto& values = hyp.kind == Kind::kColor ? kColors : kSizes;
                hyp.attribute = values[pick(rng, values.size())];
            }
        }
        const std::string text =
            "premise : " + fact_text(premise[0]) + " and " + fact_text(premise[1]) + " hypothesis : " + fact_text(hyp);
        auto sol = solve_entailment(text);
        if (!sol || sol->label != kLabels[cls]) throw std::logic_error("entailment template produced a wrong label");
        Example ex(text);
        ex.set_gold_label(sol->label);
        ex.set_gold_rationale(sol->rationale());
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// JSONL

Dataset load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot open dataset " + path.string());
    Dataset ds{path.stem().string(), Split::kTrain, {}};
    std::string line;
    std::size_t line_no = 0;
    auto optional_string = [&](const nlohmann::json& obj, const char* key) -> std::optional<std::string> {
        auto it = obj.find(key);
        if (it == obj.end() || it->is_null()) return std::nullopt;
        if (!it->is_string()) throw MalformedLine(line_no, std::string("field \"") + key + "\" is not a string");
        return it->get<std::string>();
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw MalformedLine(line_no, e.what());
        }
        if (!obj.is_object()) throw MalformedLine(line_no, "not a JSON object");
        auto input = optional_string(obj, "input");
        if (!input || trim(*input).empty()) throw MissingField(line_no, "input");
        Example ex(*input);
        ex.set_gold_label(optional_string(obj, "label"));
        ex.set_gold_rationale(optional_string(obj, "rationale"));
        ex.set_teacher_label(optional_string(obj, "teacher_label"));
        ex.set_teacher_rationale(optional_string(obj, "teacher_rationale"));
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

void write_jsonl(const Dataset& dataset, std::ostream& out) {
    for (const auto& ex : dataset.examples) {
        nlohmann::ordered_json obj;
        obj["input"] = ex.input();
        if (ex.gold_label()) obj["label"] = *ex.gold_label();
        if (ex.gold_rationale()) obj["rationale"] = *ex.gold_rationale();
        if (ex.teacher_label()) obj["teacher_label"] = *ex.teacher_label();
        if (ex.teacher_rationale()) obj["teacher_rationale"] = *ex.teacher_rationale();
        out << obj.dump() << '\n';
    }
}

void write_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoFailure("cannot write dataset " + path.string());
    write_jsonl(dataset, out);
    if (!out) throw IoFailure("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Splits

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 rng(mix(seed, 0x5eed));
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

namespace {
// Tolerates representation error such as 0.29·100 = 28.999999999999996.
std::size_t floor_count(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

Dataset select(const Dataset& src, std::vector<std::size_t> indices, Split split) {
    std::sort(indices.begin(), indices.end());
    Dataset out{src.name, split, {}};
    out.examples.reserve(indices.size());
    for (std::size_t i : indices) out.examples.push_back(src.examples[i]);
    return out;
}
}  // namespace

std::pair<Dataset, Dataset> split_train_val(const Dataset& dataset, double val_fraction, std::uint64_t seed) {
    if (dataset.empty()) throw ConfigError("cannot split an empty dataset");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must be in [0, 1)");
    const auto perm = shuffled_indices(dataset.size(), seed);
    const std::size_t n_val = floor_count(val_fraction, dataset.size());
    std::vector<std::size_t> val(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
    return {select(dataset, std::move(train), Split::kTrain), select(dataset, std::move(val), Split::kValidation)};
}

Dataset subsample(const Dataset& dataset, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subsample fraction must be in (0, 1]");
    if (dataset.empty()) return dataset;
    const auto perm = shuffled_indices(dataset.size(), seed);
    const std::size_t keep = std::max<std::size_t>(1, floor_count(fraction, dataset.size()));
    return select(dataset, std::vector<std::size_t>(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(keep)),
                  dataset.split);
}

Dataset mask_gold(const Dataset& dataset) {
    Dataset out = dataset;
    for (auto& ex : out.examples) {
        ex.set_gold_label(std::nullopt);
        ex.set_gold_rationale(std::nullopt);
    }
    return out;
}

std::vector<double> default_fraction_grid() { return {0.0625, 0.125, 0.25, 0.5, 1.0}; }

}  // namespace distill
