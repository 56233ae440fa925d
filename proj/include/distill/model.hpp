#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "distill/tensor.hpp"

namespace distill {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t vocab_size = 64;
    std::size_t max_src_len = 32;
    std::size_t max_tgt_len = 32;

    /// Throws InvalidConfig when a field is zero, heads do not divide
    /// d_model, or the vocabulary cannot hold the reserved tokens.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Named size ladder: "tiny" (32, 1 layer, tests only), "small" (64, 2),
/// "base" (128, 4), "large" (256, 6). Four heads and d_ff = 4·d_model.
ModelConfig sized_config(std::string_view size_name, std::size_t vocab_size, std::size_t max_src_len,
                         std::size_t max_tgt_len);

/// Exact scalar parameter count:
///
///   V·d + (S + T)·d                      tied token table, position tables
///   + L·(4d² + 4d + 2·d·f + f + d + 4d)   encoder layers (attn, ffn, 2 norms)
///   + L·(8d² + 8d + 2·d·f + f + d + 6d)   decoder layers (self, cross, ffn, 3 norms)
///   + 4d                                  final encoder and decoder norms
///
/// with d = d_model, f = d_ff, L = n_layers, S/T the maximum lengths.
std::uint64_t param_count(const ModelConfig& config);

/// Row-major batch of token ids, padded with token::kPad.
struct TokenBatch {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<int> ids;

    std::span<const int> row(std::size_t r) const { return {ids.data() + r * cols, cols}; }
    static TokenBatch from_rows(const std::vector<std::vector<int>>& rows);
};

/// Decoder input: BOS followed by the target minus its last column.
TokenBatch shift_right(const TokenBatch& targets);

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

/// Pre-norm encoder-decoder transformer with tied input/output embeddings and
/// learned absolute positions.
class SeqModel {
public:
    SeqModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    /// Parameters in canonical (checkpoint) order.
    std::vector<NamedParameter>& parameters() { return params_; }
    const std::vector<NamedParameter>& parameters() const { return params_; }
    Tensor& parameter(std::string_view name);
    std::uint64_t parameter_total() const;

    /// Logits [B×T×V]. Source padding is masked from attention; decoder
    /// self-attention is causal.
    Tensor forward_logits(const TokenBatch& src, const TokenBatch& tgt_in) const;

    /// Argmax decoding until EOS or max_len tokens; BOS/EOS stripped. Ties go
    /// to the lowest id.
    std::vector<int> greedy_decode(std::span<const int> src, std::size_t max_len) const;
    /// Batched variant of greedy_decode with identical per-row results.
    std::vector<std::vector<int>> greedy_decode_batch(const std::vector<std::vector<int>>& srcs,
                                                      std::size_t max_len) const;

    void zero_grad();
    /// Deep copy of all parameter values.
    SeqModel clone() const;

private:
    struct Attn {
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    };
    struct Norm {
        Tensor gain, bias;
    };
    struct Ffn {
        Tensor w1, b1, w2, b2;
    };
    struct EncoderLayer {
        Norm ln1;
        Attn self;
        Norm ln2;
        Ffn ffn;
    };
    struct DecoderLayer {
        Norm ln1;
        Attn self;
        Norm ln2;
        Attn cross;
        Norm ln3;
        Ffn ffn;
    };

    SeqModel() = default;
    Tensor add_param(std::string name, Shape shape, double init_std, double fill, std::mt19937_64& rng);
    void bind();

    Tensor encode(const TokenBatch& src) const;
    Tensor decode_hidden(const Tensor& memory, const TokenBatch& src, const TokenBatch& tgt_in) const;

    ModelConfig config_;
    std::vector<NamedParameter> params_;

    // Views onto params_, rebuilt by bind().
    Tensor embed_, enc_pos_, dec_pos_;
    std::vector<EncoderLayer> enc_;
    std::vector<DecoderLayer> dec_;
    Norm enc_final_, dec_final_;
};

/// Binary checkpoint; byte layout in docs/checkpoint_format.md.
void save_model(const SeqModel& model, const std::filesystem::path& path);
SeqModel load_model(const std::filesystem::path& path);

}  // namespace distill
