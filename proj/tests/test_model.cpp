#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "distill/errors.hpp"
#include "distill/model.hpp"
#include "distill/tokenizer.hpp"
#include "test_support.hpp"

using namespace distill;

namespace {

ModelConfig tiny_config(std::size_t vocab = 32) {
    ModelConfig c;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_ff = 16;
    c.vocab_size = vocab;
    c.max_src_len = 10;
    c.max_tgt_len = 10;
    return c;
}

TokenBatch batch(std::vector<std::vector<int>> rows) { return TokenBatch::from_rows(rows); }

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Logits of row b, position t.
std::vector<double> logits_at(const Tensor& logits, std::size_t b, std::size_t t) {
    const std::size_t T = logits.dim(1), V = logits.dim(2);
    auto d = logits.data();
    return {d.begin() + static_cast<std::ptrdiff_t>((b * T + t) * V),
            d.begin() + static_cast<std::ptrdiff_t>((b * T + t + 1) * V)};
}

class TempDir {
public:
    TempDir() {
        path_ = std::filesystem::temp_directory_path() /
                ("distill_model_" + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace

TEST(ModelConfigTest, Validation) {
    ModelConfig c = tiny_config();
    EXPECT_NO_THROW(c.validate());
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), InvalidConfig);
    c = tiny_config(5);
    EXPECT_THROW(c.validate(), InvalidConfig);
    c = tiny_config();
    c.d_ff = 0;
    EXPECT_THROW(c.validate(), InvalidConfig);
}

TEST(ModelConfigTest, SizeLadder) {
    auto small = sized_config("small", 100, 16, 16);
    auto base = sized_config("base", 100, 16, 16);
    auto large = sized_config("large", 100, 16, 16);
    EXPECT_EQ(small.d_model, 64u);
    EXPECT_EQ(small.n_layers, 2u);
    EXPECT_EQ(base.d_model, 128u);
    EXPECT_EQ(base.n_layers, 4u);
    EXPECT_EQ(large.d_model, 256u);
    EXPECT_EQ(large.n_layers, 6u);
    EXPECT_EQ(small.d_ff, 256u);
    EXPECT_LT(param_count(small), param_count(base));
    EXPECT_LT(param_count(base), param_count(large));
    EXPECT_THROW(sized_config("huge", 100, 16, 16), InvalidConfig);
}

TEST(ForwardTest, OutputShape) {
    SeqModel m(tiny_config(32), 1);
    TokenBatch src = batch({{4, 7, 8, 9, 10}, {4, 11, 12, 13, 14}});
    TokenBatch tgt = batch({{1, 7, 7, 7, 7, 7, 7}, {1, 8, 8, 8, 8, 8, 8}});
    Tensor logits = m.forward_logits(src, tgt);
    EXPECT_EQ(logits.shape(), (Shape{2, 7, 32}));
}

TEST(ForwardTest, LengthAndShapeErrors) {
    SeqModel m(tiny_config(), 1);
    std::vector<int> long_row(11, 7);
    EXPECT_THROW(m.forward_logits(batch({long_row}), batch({{1}})), SequenceTooLong);
    EXPECT_THROW(m.forward_logits(batch({{7}}), batch({long_row})), SequenceTooLong);
    EXPECT_THROW(m.forward_logits(batch({{7}, {8}}), batch({{1}})), BatchShapeMismatch);
    EXPECT_THROW(m.greedy_decode(long_row, 3), SequenceTooLong);
}

TEST(ForwardTest, PermutingBatchPermutesOutputs) {
    SeqModel m(tiny_config(), 2);
    Tensor ab = m.forward_logits(batch({{4, 7, 8}, {4, 9, 10}}), batch({{1, 11}, {1, 12}}));
    Tensor ba = m.forward_logits(batch({{4, 9, 10}, {4, 7, 8}}), batch({{1, 12}, {1, 11}}));
    for (std::size_t t = 0; t < 2; ++t) {
        const auto a0 = logits_at(ab, 0, t), a1 = logits_at(ab, 1, t);
        const auto b0 = logits_at(ba, 0, t), b1 = logits_at(ba, 1, t);
        for (std::size_t v = 0; v < a0.size(); ++v) {
            EXPECT_NEAR(a0[v], b1[v], 1e-12);
            EXPECT_NEAR(a1[v], b0[v], 1e-12);
        }
    }
}

TEST(ForwardTest, SourcePaddingDoesNotChangeLogits) {
    SeqModel m(tiny_config(), 3);
    Tensor plain = m.forward_logits(batch({{4, 7, 8, 9}}), batch({{1, 10, 11}}));
    Tensor padded = m.forward_logits(batch({{4, 7, 8, 9, token::kPad, token::kPad, token::kPad}}), batch({{1, 10, 11}}));
    auto a = values(plain), b = values(padded);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST(ForwardTest, DecoderIsCausal) {
    SeqModel m(tiny_config(), 4);
    TokenBatch src = batch({{4, 7, 8, 9}});
    std::vector<int> tgt{1, 10, 11, 12, 13};
    Tensor base = m.forward_logits(src, batch({tgt}));
    for (std::size_t t = 1; t < tgt.size(); ++t) {
        std::vector<int> changed = tgt;
        changed[t] = 20;
        Tensor other = m.forward_logits(src, batch({changed}));
        for (std::size_t p = 0; p < t; ++p) EXPECT_EQ(logits_at(base, 0, p), logits_at(other, 0, p)) << t << "," << p;
    }
}

TEST(ForwardTest, SmallStepDecreasesBatchLoss) {
    SeqModel m(tiny_config(), 5);
    TokenBatch src = batch({{4, 7, 8, 9}, {4, 10, 11, 0}});
    TokenBatch tgt = batch({{12, 13, 2}, {14, 2, 0}});
    auto loss_of = [&] {
        Tensor logits = m.forward_logits(src, shift_right(tgt));
        return cross_entropy(reshape(logits, {6, 32}), tgt.ids, token::kPad);
    };
    Tape tape;
    Tensor loss;
    {
        TapeGuard g(tape);
        loss = loss_of();
    }
    const double before = loss.item();
    tape.backward(loss);
    for (auto& p : m.parameters()) {
        auto d = p.tensor.mutable_data();
        auto g = p.tensor.grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= 1e-3 * g[i];
    }
    EXPECT_LT(loss_of().item(), before);
}

TEST(ForwardTest, ShiftRightPrependsBos) {
    TokenBatch t = batch({{5, 6, 2}, {7, 2, 0}});
    TokenBatch s = shift_right(t);
    EXPECT_EQ(s.ids, (std::vector<int>{1, 5, 6, 1, 7, 2}));
}

TEST(ForwardTest, GradientMatchesFiniteDifferences) {
    ModelConfig c = tiny_config(12);
    c.d_model = 4;
    c.d_ff = 6;
    c.max_src_len = 4;
    c.max_tgt_len = 4;
    SeqModel m(c, 6);
    TokenBatch src = batch({{4, 7, 8}, {4, 9, 0}});
    TokenBatch tgt = batch({{10, 11, 2}, {6, 2, 0}});
    std::vector<Tensor> inputs;
    for (auto& p : m.parameters()) inputs.push_back(p.tensor);
    auto f = [&] {
        return cross_entropy(reshape(m.forward_logits(src, shift_right(tgt)), {6, 12}), tgt.ids, token::kPad);
    };
    EXPECT_LT(distill::testing::gradient_check(f, inputs), 1e-4);
}

// ---------------------------------------------------------------------------
// Decoding

TEST(DecodeTest, ForcedEosGivesEmptySequence) {
    SeqModel m(tiny_config(), 7);
    // The final decoder norm emits a constant unit vector; only EOS aligns with it.
    auto gain = m.parameter("dec.final.gain").mutable_data();
    auto bias = m.parameter("dec.final.bias").mutable_data();
    std::fill(gain.begin(), gain.end(), 0.0);
    std::fill(bias.begin(), bias.end(), 0.0);
    bias[0] = 1.0;
    auto embed = m.parameter("embed").mutable_data();
    const std::size_t d = m.config().d_model;
    for (std::size_t v = 0; v < m.config().vocab_size; ++v) embed[v * d] = v == token::kEos ? 10.0 : 0.0;
    std::vector<int> src{4, 7, 8};
    EXPECT_TRUE(m.greedy_decode(src, 5).empty());
}

TEST(DecodeTest, TiesGoToLowestId) {
    SeqModel m(tiny_config(), 8);
    auto gain = m.parameter("dec.final.gain").mutable_data();
    auto bias = m.parameter("dec.final.bias").mutable_data();
    std::fill(gain.begin(), gain.end(), 0.0);
    std::fill(bias.begin(), bias.end(), 0.0);
    std::vector<int> src{4, 7};
    EXPECT_EQ(m.greedy_decode(src, 3), (std::vector<int>{0, 0, 0}));
}

TEST(DecodeTest, DeterministicAndBatchConsistent) {
    SeqModel m(tiny_config(), 9);
    std::vector<std::vector<int>> srcs{{4, 7, 8}, {5, 9}, {4, 10, 11, 12}};
    auto first = m.greedy_decode_batch(srcs, 6);
    EXPECT_EQ(first, m.greedy_decode_batch(srcs, 6));
    for (std::size_t i = 0; i < srcs.size(); ++i) {
        auto single = m.greedy_decode(srcs[i], 6);
        EXPECT_EQ(single, first[i]);
        EXPECT_LE(single.size(), 6u);
        for (int id : single) {
            EXPECT_NE(id, token::kBos);
            EXPECT_NE(id, token::kEos);
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter accounting

TEST(ParamCountTest, MatchesConstructedModelOnRandomConfigs) {
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<std::size_t> heads(1, 4), per_head(1, 6), layers(1, 3), ff(1, 40), len(1, 20),
        vocab(6, 80);
    for (int trial = 0; trial < 20; ++trial) {
        ModelConfig c;
        c.n_heads = heads(rng);
        c.d_model = c.n_heads * per_head(rng);
        c.n_layers = layers(rng);
        c.d_ff = ff(rng);
        c.vocab_size = vocab(rng);
        c.max_src_len = len(rng);
        c.max_tgt_len = len(rng);
        SeqModel m(c, static_cast<std::uint64_t>(trial));
        std::uint64_t total = 0;
        for (const auto& p : m.parameters()) total += p.tensor.numel();
        EXPECT_EQ(param_count(c), total) << "trial " << trial;
        EXPECT_EQ(m.parameter_total(), total);
    }
}

TEST(ParamCountTest, MoreLayersMeansMoreParameters) {
    ModelConfig c = tiny_config();
    const auto one = param_count(c);
    c.n_layers = 2;
    EXPECT_GT(param_count(c), one);
}

TEST(ParamCountTest, TiedEmbeddingIsVTimesD) {
    ModelConfig c = tiny_config(50);
    SeqModel m(c, 0);
    EXPECT_EQ(m.parameter("embed").numel(), 50u * c.d_model);
    ModelConfig bigger = c;
    bigger.vocab_size = 51;
    EXPECT_EQ(param_count(bigger) - param_count(c), c.d_model);
}

TEST(ParamTest, InitializationIsSeeded) {
    SeqModel a(tiny_config(), 10), b(tiny_config(), 10), c(tiny_config(), 11);
    EXPECT_EQ(values(a.parameter("embed")), values(b.parameter("embed")));
    EXPECT_NE(values(a.parameter("embed")), values(c.parameter("embed")));
    for (double g : a.parameter("enc.0.ln1.gain").data()) EXPECT_EQ(g, 1.0);
    for (double v : a.parameter("enc.0.self.bq").data()) EXPECT_EQ(v, 0.0);
    for (const auto& p : a.parameters()) EXPECT_TRUE(p.tensor.requires_grad()) << p.name;
    EXPECT_THROW(a.parameter("nope"), InvalidConfig);
}

TEST(ParamTest, CloneIsDeep) {
    SeqModel a(tiny_config(), 12);
    SeqModel b = a.clone();
    b.parameter("embed").mutable_data()[0] += 1.0;
    EXPECT_NE(a.parameter("embed").data()[0], b.parameter("embed").data()[0]);
    std::vector<int> src{4, 7};
    SeqModel c = a.clone();
    EXPECT_EQ(a.greedy_decode(src, 4), c.greedy_decode(src, 4));
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(CheckpointTest, RoundTripIsBitwise) {
    TempDir dir;
    SeqModel m(tiny_config(), 13);
    save_model(m, dir.path() / "m.ckpt");
    SeqModel loaded = load_model(dir.path() / "m.ckpt");
    EXPECT_EQ(loaded.config(), m.config());
    TokenBatch src = batch({{4, 7, 8}}), tgt = batch({{1, 9, 10}});
    EXPECT_EQ(values(m.forward_logits(src, tgt)), values(loaded.forward_logits(src, tgt)));
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
        EXPECT_EQ(m.parameters()[i].name, loaded.parameters()[i].name);
        EXPECT_EQ(values(m.parameters()[i].tensor), values(loaded.parameters()[i].tensor));
    }
}

TEST(CheckpointTest, TruncatedFileIsCorrupt) {
    TempDir dir;
    SeqModel m(tiny_config(), 14);
    const auto path = dir.path() / "m.ckpt";
    save_model(m, path);
    const auto size = std::filesystem::file_size(path);
    for (auto cut : {size - 1, size / 2, std::uintmax_t{12}, std::uintmax_t{3}}) {
        std::filesystem::resize_file(path, cut);
        EXPECT_THROW(load_model(path), CorruptCheckpoint) << cut;
        save_model(m, path);
    }
}

TEST(CheckpointTest, BadMagicOrTrailingBytesAreCorrupt) {
    TempDir dir;
    SeqModel m(tiny_config(), 15);
    const auto path = dir.path() / "m.ckpt";
    save_model(m, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.put('X');
    }
    EXPECT_THROW(load_model(path), CorruptCheckpoint);
    save_model(m, path);
    {
        std::ofstream f(path, std::ios::app | std::ios::binary);
        f.put('\0');
    }
    EXPECT_THROW(load_model(path), CorruptCheckpoint);
}

TEST(CheckpointTest, MismatchedVocabSizeIsCorrupt) {
    TempDir dir;
    SeqModel m(tiny_config(32), 16);
    const auto path = dir.path() / "m.ckpt";
    save_model(m, path);
    // The config block follows the 8-byte magic and 4-byte version; vocab_size
    // is its fifth u64 field.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8 + 4 + 4 * 8);
        const std::uint64_t v = 33;
        f.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    EXPECT_THROW(load_model(path), CorruptCheckpoint);
}

TEST(CheckpointTest, MissingFileIsIoFailure) {
    EXPECT_THROW(load_model("/nonexistent/dir/m.ckpt"), IoFailure);
    SeqModel m(tiny_config(), 17);
    EXPECT_THROW(save_model(m, "/nonexistent/dir/m.ckpt"), IoFailure);
}
