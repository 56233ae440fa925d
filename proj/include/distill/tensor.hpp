#pragma once

// Dense double-precision tensors with tape-based reverse-mode differentiation.
//
// Operations record onto the tape activated by a TapeGuard on the calling
// thread, but only when at least one input requires a gradient. With no
// active tape the same functions run as plain inference kernels.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace distill {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;

    std::vector<double>& ensure_grad();
};
}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    /// Writable view for parameter updates. Never call while the tensor is
    /// referenced by a live tape.
    std::span<double> mutable_data() { return impl_->data; }
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool value) { impl_->requires_grad = value; }
    bool has_grad() const { return impl_->grad.has_value(); }
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();
    void clear_grad() { impl_->grad.reset(); }

    /// Deep copy detached from any tape.
    Tensor clone() const;

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl) {
        Tensor t;
        t.impl_ = std::move(impl);
        return t;
    }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so the record is topologically sorted by construction.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Seeds d(loss)/d(loss) = 1 and runs every node's local gradient once,
    /// newest first. A tape can be consumed once; call reset() to reuse it.
    void backward(const Tensor& loss);
    void reset();

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    static Tape* active();

    struct Node {
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void()> backward;
    };
    void record(Node node);

private:
    friend class TapeGuard;
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

/// Makes `tape` the recording target for the current thread while alive.
class TapeGuard {
public:
    explicit TapeGuard(Tape& tape);
    ~TapeGuard();
    TapeGuard(const TapeGuard&) = delete;
    TapeGuard& operator=(const TapeGuard&) = delete;

private:
    Tape* previous_;
};

/// Suspends recording on the current thread while alive.
class NoTapeGuard {
public:
    NoTapeGuard();
    ~NoTapeGuard();
    NoTapeGuard(const NoTapeGuard&) = delete;
    NoTapeGuard& operator=(const NoTapeGuard&) = delete;

private:
    Tape* previous_;
};

// ---------------------------------------------------------------------------
// Operations. Shapes are checked eagerly; mismatches raise DimensionMismatch.

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// x[m×n] + bias[n] added to every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor sum(const Tensor& x);
Tensor relu(const Tensor& x);

/// a[m×k] · b[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// a[m×k] · b[n×k]ᵀ, used for the tied output projection.
Tensor matmul_transposed(const Tensor& a, const Tensor& b);

/// Per-row normalization over the last axis with learnable gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Rows of table[V×d] selected by ids; result is [ids.size() × d].
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

/// Concatenation along axis 0. Trailing dimensions must agree.
Tensor concat(std::span<const Tensor> parts);
/// Rows [begin, end) along axis 0.
Tensor slice(const Tensor& x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

/// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& x);

/// Mean of -log softmax(logits)[t, target_t] over positions whose target is
/// not ignore_index. logits is [T×V].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index);

/// Packed layout for multi-head scaled dot-product attention.
/// Queries are [batch·query_len × d], keys/values [batch·key_len × d].
struct AttentionSpec {
    std::size_t batch = 1;
    std::size_t query_len = 1;
    std::size_t key_len = 1;
    std::size_t heads = 1;
    bool causal = false;
    /// Optional batch·key_len flags; false excludes that key position.
    std::vector<std::uint8_t> key_valid;
};

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionSpec& spec);

}  // namespace distill
