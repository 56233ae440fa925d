#include "distill/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "distill/errors.hpp"
#include "distill/tokenizer.hpp"

namespace distill {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void ModelConfig::validate() const {
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0 || max_src_len == 0 ||
        max_tgt_len == 0) {
        throw InvalidConfig("model config fields must be positive");
    }
    if (d_model % n_heads != 0) throw InvalidConfig("n_heads must divide d_model");
    if (vocab_size < static_cast<std::size_t>(token::kReservedCount)) {
        throw InvalidConfig("vocab_size must cover the reserved tokens");
    }
}

ModelConfig sized_config(std::string_view size_name, std::size_t vocab_size, std::size_t max_src_len,
                         std::size_t max_tgt_len) {
    ModelConfig c;
    if (size_name == "tiny") {
        c.d_model = 32;
        c.n_layers = 1;
    } else if (size_name == "small") {
        c.d_model = 64;
        c.n_layers = 2;
    } else if (size_name == "base") {
        c.d_model = 128;
        c.n_layers = 4;
    } else if (size_name == "large") {
        c.d_model = 256;
        c.n_layers = 6;
    } else {
        throw InvalidConfig("unknown model size \"" + std::string(size_name) + "\"");
    }
    c.n_heads = 4;
    c.d_ff = 4 * c.d_model;
    c.vocab_size = vocab_size;
    c.max_src_len = max_src_len;
    c.max_tgt_len = max_tgt_len;
    c.validate();
    return c;
}

std::uint64_t param_count(const ModelConfig& c) {
    const std::uint64_t d = c.d_model, f = c.d_ff, L = c.n_layers;
    const std::uint64_t attn = 4 * d * d + 4 * d;
    const std::uint64_t ffn = 2 * d * f + f + d;
    const std::uint64_t norm = 2 * d;
    const std::uint64_t encoder_layer = attn + ffn + 2 * norm;
    const std::uint64_t decoder_layer = 2 * attn + ffn + 3 * norm;
    return c.vocab_size * d + (c.max_src_len + c.max_tgt_len) * d + L * (encoder_layer + decoder_layer) + 2 * norm;
}

TokenBatch TokenBatch::from_rows(const std::vector<std::vector<int>>& rows) {
    TokenBatch b;
    b.rows = rows.size();
    for (const auto& r : rows) b.cols = std::max(b.cols, r.size());
    b.ids.assign(b.rows * b.cols, token::kPad);
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), b.ids.begin() + i * b.cols);
    return b;
}

TokenBatch shift_right(const TokenBatch& targets) {
    TokenBatch out{targets.rows, targets.cols, std::vector<int>(targets.ids.size(), token::kPad)};
    for (std::size_t r = 0; r < targets.rows; ++r) {
        out.ids[r * targets.cols] = token::kBos;
        for (std::size_t c = 1; c < targets.cols; ++c) out.ids[r * targets.cols + c] = targets.ids[r * targets.cols + c - 1];
    }
    return out;
}

// ---------------------------------------------------------------------------

Tensor SeqModel::add_param(std::string name, Shape shape, double init_std, double fill, std::mt19937_64& rng) {
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n, fill);
    if (init_std > 0.0) {
        std::normal_distribution<double> dist(0.0, init_std);
        for (double& v : values) v = dist(rng);
    }
    Tensor t(std::move(shape), std::move(values), true);
    params_.push_back({std::move(name), t});
    return t;
}

SeqModel::SeqModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config_.d_model, f = config_.d_ff;
    constexpr double kStd = 0.02;
    add_param("embed", {config_.vocab_size, d}, kStd, 0.0, rng);
    add_param("enc.pos", {config_.max_src_len, d}, kStd, 0.0, rng);
    add_param("dec.pos", {config_.max_tgt_len, d}, kStd, 0.0, rng);
    auto norm = [&](const std::string& p) {
        add_param(p + ".gain", {d}, 0.0, 1.0, rng);
        add_param(p + ".bias", {d}, 0.0, 0.0, rng);
    };
    auto attn = [&](const std::string& p) {
        for (const char* w : {"q", "k", "v", "o"}) {
            add_param(p + ".w" + w, {d, d}, kStd, 0.0, rng);
            add_param(p + ".b" + w, {d}, 0.0, 0.0, rng);
        }
    };
    auto ffn = [&](const std::string& p) {
        add_param(p + ".w1", {d, f}, kStd, 0.0, rng);
        add_param(p + ".b1", {f}, 0.0, 0.0, rng);
        add_param(p + ".w2", {f, d}, kStd, 0.0, rng);
        add_param(p + ".b2", {d}, 0.0, 0.0, rng);
    };
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const std::string p = "enc." + std::to_string(l);
        norm(p + ".ln1");
        attn(p + ".self");
        norm(p + ".ln2");
        ffn(p + ".ffn");
    }
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const std::string p = "dec." + std::to_string(l);
        norm(p + ".ln1");
        attn(p + ".self");
        norm(p + ".ln2");
        attn(p + ".cross");
        norm(p + ".ln3");
        ffn(p + ".ffn");
    }
    norm("enc.final");
    norm("dec.final");
    bind();
}

void SeqModel::bind() {
    std::size_t i = 0;
    auto next = [&]() -> Tensor { return params_.at(i++).tensor; };
    auto norm = [&](Norm& n) {
        n.gain = next();
        n.bias = next();
    };
    auto attn = [&](Attn& a) {
        a.wq = next();
        a.bq = next();
        a.wk = next();
        a.bk = next();
        a.wv = next();
        a.bv = next();
        a.wo = next();
        a.bo = next();
    };
    auto ffn = [&](Ffn& f) {
        f.w1 = next();
        f.b1 = next();
        f.w2 = next();
        f.b2 = next();
    };
    embed_ = next();
    enc_pos_ = next();
    dec_pos_ = next();
    enc_.assign(config_.n_layers, {});
    dec_.assign(config_.n_layers, {});
    for (auto& layer : enc_) {
        norm(layer.ln1);
        attn(layer.self);
        norm(layer.ln2);
        ffn(layer.ffn);
    }
    for (auto& layer : dec_) {
        norm(layer.ln1);
        attn(layer.self);
        norm(layer.ln2);
        attn(layer.cross);
        norm(layer.ln3);
        ffn(layer.ffn);
    }
    norm(enc_final_);
    norm(dec_final_);
}

Tensor& SeqModel::parameter(std::string_view name) {
    for (auto& p : params_) {
        if (p.name == name) return p.tensor;
    }
    throw InvalidConfig("no parameter named \"" + std::string(name) + "\"");
}

std::uint64_t SeqModel::parameter_total() const {
    std::uint64_t total = 0;
    for (const auto& p : params_) total += p.tensor.numel();
    return total;
}

void SeqModel::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

SeqModel SeqModel::clone() const {
    SeqModel copy;
    copy.config_ = config_;
    for (const auto& p : params_) copy.params_.push_back({p.name, p.tensor.clone()});
    copy.bind();
    return copy;
}

// ---------------------------------------------------------------------------

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

std::vector<int> positions(std::size_t rows, std::size_t cols) {
    std::vector<int> pos(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) pos[r * cols + c] = static_cast<int>(c);
    return pos;
}

std::vector<std::uint8_t> non_pad(const TokenBatch& b) {
    std::vector<std::uint8_t> valid(b.ids.size());
    for (std::size_t i = 0; i < b.ids.size(); ++i) valid[i] = b.ids[i] != token::kPad ? 1 : 0;
    return valid;
}

void check_batch(const TokenBatch& b, std::size_t max_len, const char* what) {
    if (b.rows == 0 || b.cols == 0 || b.ids.size() != b.rows * b.cols) {
        throw BatchShapeMismatch(std::string(what) + " batch is empty or its ids do not fill rows x cols");
    }
    if (b.cols > max_len) {
        throw SequenceTooLong(std::string(what) + " length " + std::to_string(b.cols) + " exceeds maximum " +
                              std::to_string(max_len));
    }
}

}  // namespace

Tensor SeqModel::encode(const TokenBatch& src) const {
    const std::size_t B = src.rows, S = src.cols;
    const auto pos = positions(B, S);
    Tensor x = add(embedding_lookup(embed_, src.ids), embedding_lookup(enc_pos_, pos));
    AttentionSpec spec{B, S, S, config_.n_heads, false, non_pad(src)};
    for (const auto& layer : enc_) {
        Tensor h = layer_norm(x, layer.ln1.gain, layer.ln1.bias);
        const auto& a = layer.self;
        Tensor att = attention(linear(h, a.wq, a.bq), linear(h, a.wk, a.bk), linear(h, a.wv, a.bv), spec);
        x = add(x, linear(att, a.wo, a.bo));
        h = layer_norm(x, layer.ln2.gain, layer.ln2.bias);
        x = add(x, linear(relu(linear(h, layer.ffn.w1, layer.ffn.b1)), layer.ffn.w2, layer.ffn.b2));
    }
    return layer_norm(x, enc_final_.gain, enc_final_.bias);
}

Tensor SeqModel::decode_hidden(const Tensor& memory, const TokenBatch& src, const TokenBatch& tgt_in) const {
    const std::size_t B = tgt_in.rows, T = tgt_in.cols, S = src.cols;
    const auto pos = positions(B, T);
    Tensor y = add(embedding_lookup(embed_, tgt_in.ids), embedding_lookup(dec_pos_, pos));
    AttentionSpec self_spec{B, T, T, config_.n_heads, true, {}};
    AttentionSpec cross_spec{B, T, S, config_.n_heads, false, non_pad(src)};
    for (const auto& layer : dec_) {
        Tensor h = layer_norm(y, layer.ln1.gain, layer.ln1.bias);
        const auto& s = layer.self;
        Tensor att = attention(linear(h, s.wq, s.bq), linear(h, s.wk, s.bk), linear(h, s.wv, s.bv), self_spec);
        y = add(y, linear(att, s.wo, s.bo));
        h = layer_norm(y, layer.ln2.gain, layer.ln2.bias);
        const auto& c = layer.cross;
        att = attention(linear(h, c.wq, c.bq), linear(memory, c.wk, c.bk), linear(memory, c.wv, c.bv), cross_spec);
        y = add(y, linear(att, c.wo, c.bo));
        h = layer_norm(y, layer.ln3.gain, layer.ln3.bias);
        y = add(y, linear(relu(linear(h, layer.ffn.w1, layer.ffn.b1)), layer.ffn.w2, layer.ffn.b2));
    }
    return layer_norm(y, dec_final_.gain, dec_final_.bias);
}

Tensor SeqModel::forward_logits(const TokenBatch& src, const TokenBatch& tgt_in) const {
    check_batch(src, config_.max_src_len, "source");
    check_batch(tgt_in, config_.max_tgt_len, "target");
    if (src.rows != tgt_in.rows) {
        throw BatchShapeMismatch("source has " + std::to_string(src.rows) + " rows, target " +
                                 std::to_string(tgt_in.rows));
    }
    Tensor memory = encode(src);
    Tensor hidden = decode_hidden(memory, src, tgt_in);
    Tensor logits = matmul_transposed(hidden, embed_);
    return reshape(logits, {tgt_in.rows, tgt_in.cols, config_.vocab_size});
}

std::vector<int> SeqModel::greedy_decode(std::span<const int> src, std::size_t max_len) const {
    return greedy_decode_batch({std::vector<int>(src.begin(), src.end())}, max_len).front();
}

std::vector<std::vector<int>> SeqModel::greedy_decode_batch(const std::vector<std::vector<int>>& srcs,
                                                            std::size_t max_len) const {
    NoTapeGuard no_tape;
    const std::size_t B = srcs.size();
    std::vector<std::vector<int>> out(B);
    if (B == 0) return out;
    TokenBatch src = TokenBatch::from_rows(srcs);
    check_batch(src, config_.max_src_len, "source");
    // The decoder input holds BOS plus generated tokens, so it may not exceed
    // max_tgt_len columns.
    max_len = std::min(max_len, config_.max_tgt_len);
    Tensor memory = encode(src);

    const std::size_t d = config_.d_model, V = config_.vocab_size;
    auto emb = embed_.data();
    std::vector<std::vector<int>> prefix(B, std::vector<int>{token::kBos});
    std::vector<bool> done(B, false);
    std::size_t remaining = B;
    for (std::size_t step = 0; step < max_len && remaining > 0; ++step) {
        TokenBatch tgt = TokenBatch::from_rows(prefix);
        Tensor hidden = decode_hidden(memory, src, tgt);
        auto hd = hidden.data();
        for (std::size_t b = 0; b < B; ++b) {
            if (done[b]) {
                prefix[b].push_back(token::kPad);
                continue;
            }
            const double* h = hd.data() + (b * tgt.cols + step) * d;
            int best = 0;
            double best_logit = -INFINITY;
            for (std::size_t v = 0; v < V; ++v) {
                const double* e = emb.data() + v * d;
                double logit = 0.0;
                for (std::size_t c = 0; c < d; ++c) logit += h[c] * e[c];
                if (logit > best_logit) {
                    best_logit = logit;
                    best = static_cast<int>(v);
                }
            }
            prefix[b].push_back(best);
            if (best == token::kEos) {
                done[b] = true;
                --remaining;
            } else {
                out[b].push_back(best);
            }
        }
    }
    for (auto& o : out) {
        std::erase_if(o, [](int id) { return id == token::kBos; });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kMagic[8] = {'D', 'S', 'T', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put(std::ofstream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::string& what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) throw CorruptCheckpoint("truncated checkpoint at " + what);
    return value;
}

}  // namespace

void save_model(const SeqModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open " + path.string() + " for writing");
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kFormatVersion);
    const auto& c = model.config();
    for (std::uint64_t v : {c.d_model, c.n_layers, c.n_heads, c.d_ff, c.vocab_size, c.max_src_len, c.max_tgt_len}) {
        put<std::uint64_t>(out, v);
    }
    const auto& params = model.parameters();
    put<std::uint64_t>(out, params.size());
    for (const auto& p : params) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
        for (std::size_t dim : p.tensor.shape()) put<std::uint64_t>(out, dim);
        auto data = p.tensor.data();
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    }
    if (!out) throw IoFailure("write failed for " + path.string());
}

SeqModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (in.gcount() != sizeof(magic) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw CorruptCheckpoint(path.string() + ": bad magic bytes");
    }
    if (auto version = get<std::uint32_t>(in, "version"); version != kFormatVersion) {
        throw CorruptCheckpoint(path.string() + ": unsupported format version " + std::to_string(version));
    }
    ModelConfig c;
    c.d_model = get<std::uint64_t>(in, "config");
    c.n_layers = get<std::uint64_t>(in, "config");
    c.n_heads = get<std::uint64_t>(in, "config");
    c.d_ff = get<std::uint64_t>(in, "config");
    c.vocab_size = get<std::uint64_t>(in, "config");
    c.max_src_len = get<std::uint64_t>(in, "config");
    c.max_tgt_len = get<std::uint64_t>(in, "config");
    // Guard against absurd sizes before allocating anything.
    constexpr std::uint64_t kLimit = 1u << 24;
    for (std::uint64_t v : {c.d_model, c.n_layers, c.n_heads, c.d_ff, c.vocab_size, c.max_src_len, c.max_tgt_len}) {
        if (v > kLimit) throw CorruptCheckpoint(path.string() + ": implausible config value");
    }
    try {
        c.validate();
    } catch (const InvalidConfig& e) {
        throw CorruptCheckpoint(path.string() + ": " + e.what());
    }
    if (param_count(c) > (std::uint64_t{1} << 32)) throw CorruptCheckpoint(path.string() + ": implausible model size");
    SeqModel model(c, 0);
    auto& params = model.parameters();
    if (get<std::uint64_t>(in, "parameter count") != params.size()) {
        throw CorruptCheckpoint(path.string() + ": parameter count does not match config");
    }
    for (auto& p : params) {
        const auto name_len = get<std::uint32_t>(in, "name length");
        if (name_len != p.name.size()) throw CorruptCheckpoint(path.string() + ": expected parameter " + p.name);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (in.gcount() != static_cast<std::streamsize>(name_len) || name != p.name) {
            throw CorruptCheckpoint(path.string() + ": expected parameter " + p.name);
        }
        const auto rank = get<std::uint32_t>(in, p.name);
        if (rank != p.tensor.rank()) throw CorruptCheckpoint(path.string() + ": rank mismatch for " + p.name);
        for (std::size_t axis = 0; axis < rank; ++axis) {
            if (get<std::uint64_t>(in, p.name) != p.tensor.dim(axis)) {
                throw CorruptCheckpoint(path.string() + ": shape mismatch for " + p.name);
            }
        }
        auto data = p.tensor.mutable_data();
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (in.gcount() != static_cast<std::streamsize>(data.size() * sizeof(double))) {
            throw CorruptCheckpoint(path.string() + ": truncated data for " + p.name);
        }
    }
    if (in.peek() != std::ifstream::traits_type::eof()) throw CorruptCheckpoint(path.string() + ": trailing bytes");
    return model;
}

}  // namespace distill
