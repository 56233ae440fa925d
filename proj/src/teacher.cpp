#include "distill/teacher.hpp"

#include <openssl/evp.h>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "distill/errors.hpp"
#include "distill/text.hpp"
#include "httplib.h"
#include "json.hpp"

namespace distill {

// ---------------------------------------------------------------------------
// Prompt template

void PromptTemplate::validate() const {
    if (demonstrations.empty()) throw ConfigError("prompt template needs at least one demonstration");
    for (const auto& d : demonstrations) {
        if (d.input.empty() || d.rationale.empty() || d.label.empty()) {
            throw ConfigError("prompt demonstration fields must be nonempty");
        }
    }
    if (input_marker.empty() || rationale_marker.empty() || label_marker.empty()) {
        throw ConfigError("prompt markers must be nonempty");
    }
}

std::string PromptTemplate::canonical_bytes() const {
    // Length-prefixed fields, so distinct templates never serialize alike.
    std::string out;
    auto field = [&out](const std::string& s) {
        out += std::to_string(s.size());
        out += ':';
        out += s;
    };
    field(preamble);
    field(input_marker);
    field(rationale_marker);
    field(label_marker);
    out += std::to_string(demonstrations.size());
    out += '|';
    for (const auto& d : demonstrations) {
        field(d.input);
        field(d.rationale);
        field(d.label);
    }
    return out;
}

PromptTemplate PromptTemplate::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot open prompt template " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("prompt template " + path.string() + ": " + e.what());
    }
    PromptTemplate t;
    try {
        t.preamble = j.value("preamble", "");
        t.input_marker = j.value("input_marker", t.input_marker);
        t.rationale_marker = j.value("rationale_marker", t.rationale_marker);
        t.label_marker = j.value("label_marker", t.label_marker);
        for (const auto& d : j.at("demonstrations")) {
            t.demonstrations.push_back(
                {d.at("input").get<std::string>(), d.at("rationale").get<std::string>(), d.at("label").get<std::string>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("prompt template " + path.string() + ": " + e.what());
    }
    t.validate();
    return t;
}

std::string build_prompt(const PromptTemplate& tmpl, std::string_view x) {
    std::string out;
    if (!tmpl.preamble.empty()) {
        out += tmpl.preamble;
        out += "\n\n";
    }
    for (const auto& d : tmpl.demonstrations) {
        out += tmpl.input_marker + " " + d.input + "\n";
        out += tmpl.rationale_marker + " " + d.rationale + "\n";
        out += tmpl.label_marker + " " + d.label + "\n\n";
    }
    out += tmpl.input_marker + " ";
    out += x;
    out += "\n";
    out += tmpl.rationale_marker;
    return out;
}

TeacherOutput parse_completion(std::string_view text, const PromptTemplate& tmpl) {
    const auto at = text.find(tmpl.label_marker);
    if (at == std::string_view::npos) {
        throw ParseFailure("completion has no label marker \"" + tmpl.label_marker + "\"");
    }
    TeacherOutput out;
    out.raw_completion = std::string(text);
    out.rationale = trim(text.substr(0, at));
    std::string_view rest = text.substr(at + tmpl.label_marker.size());
    std::string label = normalize(rest.substr(0, rest.find('\n')));
    if (label.empty()) throw ParseFailure("completion has an empty label");
    out.label = std::move(label);
    return out;
}

std::string render_completion(const TeacherOutput& output, const PromptTemplate& tmpl) {
    return " " + output.rationale + "\n" + tmpl.label_marker + " " + output.label + "\n";
}

// ---------------------------------------------------------------------------
// Oracle teacher

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::mt19937_64 noise_stream(std::string_view x, std::uint64_t seed) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(fnv1a(normalize(x))),
                      static_cast<std::uint32_t>(fnv1a(normalize(x)) >> 32)};
    return std::mt19937_64(seq);
}

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

bool oracle_corrupts(std::string_view x, double noise_rate, std::uint64_t seed) {
    if (noise_rate <= 0.0) return false;
    auto rng = noise_stream(x, seed);
    return unit(rng) < noise_rate;
}

TeacherOutput oracle_teach(TaskKind task, std::string_view x, double noise_rate, std::uint64_t seed) {
    if (!(noise_rate >= 0.0 && noise_rate < 1.0)) throw ConfigError("noise_rate must be in [0, 1)");
    auto sol = task == TaskKind::kArithmetic ? solve_arithmetic(x) : solve_entailment(x);
    if (!sol) throw UnparsableInput("oracle teacher cannot parse input \"" + std::string(x) + "\"");

    auto rng = noise_stream(x, seed);
    const bool corrupt = noise_rate > 0.0 && unit(rng) < noise_rate;
    TeacherOutput out;
    if (corrupt) {
        if (task == TaskKind::kArithmetic) {
            const long long value = std::stoll(sol->label);
            long long delta = static_cast<long long>(rng() % 3) + 1;
            if (rng() % 2 == 0) delta = -delta;
            out.label = std::to_string(value + delta);
        } else {
            static const char* const kLabels[] = {"entailment", "contradiction", "neutral"};
            std::vector<std::string> wrong;
            for (const char* l : kLabels) {
                if (sol->label != l) wrong.emplace_back(l);
            }
            out.label = wrong[rng() % wrong.size()];
        }
        if (sol->steps.size() > 1) sol->steps.resize(1);
    } else {
        out.label = sol->label;
    }
    out.rationale = sol->rationale();
    out.raw_completion = " " + out.rationale + "\nA: " + out.label + "\n";
    return out;
}

OracleTeacher::OracleTeacher(TaskKind task, double noise_rate, std::uint64_t seed)
    : task_(task), noise_rate_(noise_rate), seed_(seed) {}

std::vector<ExtractionResult> OracleTeacher::extract(const std::vector<std::string>& inputs) {
    std::vector<ExtractionResult> results;
    results.reserve(inputs.size());
    for (const auto& x : inputs) {
        ExtractionResult r;
        r.input = x;
        try {
            r.output = oracle_teach(task_, x, noise_rate_, seed_);
        } catch (const UnparsableInput& e) {
            r.status = ExtractionStatus::kParseFailure;
            r.error = e.what();
        }
        results.push_back(std::move(r));
    }
    return results;
}

// ---------------------------------------------------------------------------
// Remote teacher

void RemoteTeacherConfig::validate() const {
    if (endpoint.empty()) throw ConfigError("remote teacher endpoint is empty");
    if (max_parallel < 1) throw ConfigError("max_parallel must be at least 1");
    if (token_env.empty()) throw ConfigError("token_env must name an environment variable");
}

struct RemoteTeacher::State {
    std::atomic<std::size_t> requests{0};
    std::atomic<std::uint64_t> temp_counter{0};
};

namespace {

std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 failed");
    }
    static const char* const kHex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 0xf]);
    }
    return out;
}

struct Endpoint {
    std::string origin;  // scheme://host[:port]
    std::string path;
};

Endpoint split_endpoint(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("endpoint must be an absolute URL: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

std::optional<std::string> read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

RemoteTeacher::RemoteTeacher(RemoteTeacherConfig config, PromptTemplate tmpl)
    : config_(std::move(config)), template_(std::move(tmpl)), state_(std::make_shared<State>()) {
    config_.validate();
    template_.validate();
}

std::size_t RemoteTeacher::requests_sent() const { return state_->requests.load(); }

std::string RemoteTeacher::cache_key(std::string_view input) const {
    std::string material = template_.canonical_bytes();
    material.push_back('\x1f');
    material += input;
    return sha256_hex(material);
}

std::vector<ExtractionResult> RemoteTeacher::extract(const std::vector<std::string>& inputs) {
    std::filesystem::create_directories(config_.cache_dir);
    std::vector<std::string> keys(inputs.size());
    std::vector<std::optional<std::string>> completions(inputs.size());
    std::vector<std::size_t> misses;  // first index of each uncached unique key
    {
        std::map<std::string, std::size_t> first_seen;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            keys[i] = cache_key(inputs[i]);
            completions[i] = read_file(config_.cache_dir / keys[i]);
            if (!completions[i] && first_seen.emplace(keys[i], i).second) misses.push_back(i);
        }
    }

    std::vector<std::string> errors(inputs.size());
    if (!misses.empty()) {
        const char* token = std::getenv(config_.token_env.c_str());
        if (token == nullptr || *token == '\0') {
            throw AuthMissing("environment variable " + config_.token_env + " is unset and " +
                              std::to_string(misses.size()) + " inputs are not cached");
        }
        const Endpoint ep = split_endpoint(config_.endpoint);
        const std::string bearer = token;
        std::atomic<std::size_t> next{0};
        std::mutex mu;

        auto fetch = [&](std::size_t i) -> void {
            nlohmann::json body = {{"prompt", build_prompt(template_, inputs[i])},
                                   {"max_tokens", config_.max_tokens},
                                   {"temperature", 0}};
            const std::string payload = body.dump();
            httplib::Client client(ep.origin);
            const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
            const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
            client.set_connection_timeout(secs.count(), usecs.count());
            client.set_read_timeout(secs.count(), usecs.count());
            client.set_write_timeout(secs.count(), usecs.count());
            client.set_bearer_token_auth(bearer);
            std::string last_error;
            for (std::size_t attempt = 0; attempt <= config_.retry_budget; ++attempt) {
                if (attempt > 0) std::this_thread::sleep_for(config_.backoff_base * (1LL << (attempt - 1)));
                ++state_->requests;
                auto res = client.Post(ep.path, payload, "application/json");
                if (!res) {
                    last_error = "transport: " + httplib::to_string(res.error());
                    continue;
                }
                if (res->status != 200) {
                    last_error = "HTTP status " + std::to_string(res->status);
                    continue;
                }
                std::string completion;
                try {
                    auto j = nlohmann::json::parse(res->body);
                    completion = j.at("completion").get<std::string>();
                } catch (const nlohmann::json::exception& e) {
                    last_error = std::string("bad response body: ") + e.what();
                    continue;
                }
                const auto tmp = config_.cache_dir /
                                 (keys[i] + ".tmp" + std::to_string(state_->temp_counter.fetch_add(1)));
                {
                    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
                    out << completion;
                }
                std::error_code ec;
                std::filesystem::rename(tmp, config_.cache_dir / keys[i], ec);
                std::lock_guard lock(mu);
                completions[i] = std::move(completion);
                return;
            }
            std::lock_guard lock(mu);
            errors[i] = last_error;
        };

        const std::size_t workers = std::min(config_.max_parallel, misses.size());
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t m = next++; m < misses.size(); m = next++) fetch(misses[m]);
            });
        }
        for (auto& t : pool) t.join();

        // Duplicates of a fetched key share its completion.
        std::map<std::string, std::size_t> owner;
        for (std::size_t i : misses) owner.emplace(keys[i], i);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (completions[i]) continue;
            const std::size_t o = owner.at(keys[i]);
            completions[i] = completions[o];
            errors[i] = errors[o];
        }
    }

    std::vector<ExtractionResult> results(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto& r = results[i];
        r.input = inputs[i];
        if (!completions[i]) {
            r.status = ExtractionStatus::kTransportError;
            r.error = errors[i];
            continue;
        }
        try {
            r.output = parse_completion(*completions[i], template_);
        } catch (const ParseFailure& e) {
            r.status = ExtractionStatus::kParseFailure;
            r.error = e.what();
        }
    }
    return results;
}

std::vector<ExtractionResult> remote_teach(const RemoteTeacherConfig& config, const PromptTemplate& tmpl,
                                           const std::vector<std::string>& inputs) {
    RemoteTeacher teacher(config, tmpl);
    return teacher.extract(inputs);
}

Dataset extract_dataset(Teacher& teacher, const Dataset& dataset, std::size_t* dropped) {
    std::vector<std::string> inputs;
    inputs.reserve(dataset.size());
    for (const auto& ex : dataset.examples) inputs.push_back(ex.input());
    const auto results = teacher.extract(inputs);
    Dataset out{dataset.name, dataset.split, {}};
    std::size_t failures = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (results[i].status != ExtractionStatus::kOk) {
            ++failures;
            continue;
        }
        Example ex = dataset.examples[i];
        ex.set_teacher_label(results[i].output->label);
        ex.set_teacher_rationale(results[i].output->rationale);
        out.examples.push_back(std::move(ex));
    }
    if (dropped != nullptr) *dropped = failures;
    return out;
}

}  // namespace distill
