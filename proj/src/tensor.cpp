#include "distill/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "distill/errors.hpp"

namespace distill {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

thread_local Tape* g_active_tape = nullptr;

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

// Builds an op result and reports whether it must be recorded.
struct Result {
    Tensor tensor;
    bool tracked = false;
};

Result make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool tracked = false;
    if (Tape::active() != nullptr) {
        for (const Tensor* in : inputs) tracked = tracked || in->requires_grad();
    }
    impl->requires_grad = tracked;
    return {Tensor::from_impl(std::move(impl)), tracked};
}

void record(const Result& r, std::initializer_list<const Tensor*> inputs, std::function<void()> fn) {
    Tape::Node node;
    for (const Tensor* in : inputs) node.inputs.push_back(in->impl());
    node.output = r.tensor.impl();
    node.backward = std::move(fn);
    Tape::active()->record(std::move(node));
}

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionMismatch(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
    }
}

void require_finite(const Tensor& t, const char* op) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) throw NonFiniteInput(std::string(op) + ": non-finite input");
    }
}

std::size_t last_dim(const Tensor& t) { return t.shape().empty() ? 1 : t.shape().back(); }

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::vector<double>& detail::TensorImpl::ensure_grad() {
    if (!grad) grad.emplace(data.size(), 0.0);
    return *grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::size_t d : shape) {
        if (d == 0) throw DimensionMismatch("tensor dimensions must be positive: " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw DimensionMismatch("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                                " elements");
    }
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

double Tensor::item() const {
    if (numel() != 1) throw DimensionMismatch("item() on tensor with shape " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionMismatch("index rank does not match tensor rank");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= impl_->shape[axis]) throw DimensionMismatch("index out of bounds");
        flat = flat * impl_->shape[axis] + i;
        ++axis;
    }
    return impl_->data[flat];
}

std::span<const double> Tensor::grad() const {
    if (!impl_->grad) return {};
    return *impl_->grad;
}

std::span<double> Tensor::mutable_grad() { return impl_->ensure_grad(); }

void Tensor::zero_grad() {
    if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

Tensor Tensor::clone() const {
    Tensor copy(impl_->shape, impl_->data, impl_->requires_grad);
    return copy;
}

// ---------------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

void Tape::record(Node node) {
    if (consumed_) throw TapeConsumed("cannot record onto a consumed tape; call reset()");
    nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw TapeConsumed("backward already ran on this tape");
    if (!loss.defined() || loss.numel() != 1) throw NonScalarLoss("backward requires a scalar loss");
    if (!loss.requires_grad()) throw NonScalarLoss("loss is not connected to any tensor requiring grad");
    consumed_ = true;
    auto& seed = loss.impl()->ensure_grad();
    seed[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output->grad) it->backward();
    }
}

void Tape::reset() {
    nodes_.clear();
    consumed_ = false;
}

TapeGuard::TapeGuard(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeGuard::~TapeGuard() { g_active_tape = previous_; }

NoTapeGuard::NoTapeGuard() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoTapeGuard::~NoTapeGuard() { g_active_tape = previous_; }

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionMismatch("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    auto r = make_result(a.shape(), std::move(out), {&a, &b});
    if (r.tracked) {
        auto* ai = a.impl().get();
        auto* bi = b.impl().get();
        auto* oi = r.tensor.impl().get();
        record(r, {&a, &b}, [ai, bi, oi] {
            const auto& g = *oi->grad;
            for (auto* in : {ai, bi}) {
                if (!in->requires_grad) continue;
                auto& gi = in->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
            }
        });
    }
    return r.tensor;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionMismatch("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.numel());
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    auto r = make_result(a.shape(), std::move(out), {&a, &b});
    if (r.tracked) {
        auto* ai = a.impl().get();
        auto* bi = b.impl().get();
        auto* oi = r.tensor.impl().get();
        record(r, {&a, &b}, [ai, bi, oi] {
            const auto& g = *oi->grad;
            if (ai->requires_grad) {
                auto& ga = ai->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                auto& gb = bi->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
            }
        });
    }
    return r.tensor;
}

Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v *= factor;
    auto r = make_result(x.shape(), std::move(out), {&x});
    if (r.tracked) {
        auto* xi = x.impl().get();
        auto* oi = r.tensor.impl().get();
        record(r, {&x}, [xi, oi, factor] {
            const auto& g = *oi->grad;
            auto& gx = xi->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
        });
    }
    return r.tensor;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_matrix(x, "add_bias");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (bias.numel() != n || bias.rank() != 1) {
        throw DimensionMismatch("add_bias: bias " + shape_str(bias.shape()) + " vs rows of width " +
                                std::to_string(n));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    auto bd = bias.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bd[j];
    auto r = make_result(x.shape(), std::move(out), {&x, &bias});
    if (r.tracked) {
        auto* xi = x.impl().get();
        auto* bi = bias.impl().get();
        auto* oi = r.tensor.impl().get();
        record(r, {&x, &bias}, [xi, bi, oi, m, n] {
            const auto& g = *oi->grad;
            if (xi->requires_grad) {
                auto& gx = xi->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bi->requires_grad) {
                auto& gb = bi->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        });
    }
    return r.tensor;
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    auto r = make_result({1}, {total}, {&x});
    if (r.tracked) {
        auto* xi = x.impl().get();
        auto* oi = r.tensor.impl().get();
        record(r, {&x}, [xi, oi] {
            const double g = (*oi->grad)[0];
            auto& gx = xi->ensure_grad();
            for (double& v : gx) v += g;
        });
    }
    return r.tensor;
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    auto r = make_result(x.shape(), std::move(out), {&x});
    if (r.tracked) {
        auto* xi = x.impl().get();
        auto* oi = r.tensor.impl().get();
        record(r, {&x}, [xi, oi] {
            const auto& g = *oi->grad;
            auto& gx = xi->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (xi->data[i] > 0.0) gx[i] += g[i];
            }
        });
    }
    return r.tensor;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionMismatch("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
    }
    std::vector<double> out(m * n);
    MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
    auto r = make_result({m, n}, std::move(out), {&a, &b});
    if (r.tracked) {
        auto* ai = a.impl().get();
        auto* bi = b.impl().get();
        auto* oi = r.tensor.impl().get();
        record(r, {&a, &b}, [ai, bi, oi, m, k, n] {
            ConstMap g(oi->grad->data(), m, n);
            if (ai->requires_grad) {
                MutMap(ai->ensure_grad().data(), m, k).noalias() += g * ConstMap(bi->data.data(), k, n).transpose();
            }
            if (bi->requires_grad) {
                MutMap(bi->ensure_grad().data(), k, n).noalias() += ConstMap(ai->data.data(), m, k).transpose() * g;
            }
        });
    }
    return r.tensor;
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_transposed");
    require_matrix(b, "matmul_transposed");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionMismatch("matmul_transposed: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + "^T");
    }
    std::vector<double> out(m * n);
    MutMap(out.data(), m, n).noalias() =
        ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), n, k).transpose();
    auto r = make_result({m, n}, std::move(out), {&a, &b});
    if (r.tracked) {
        auto* ai = a.impl().get();
        auto* bi = b.impl().get();
        auto* oi = r.tensor.impl().get();
        record(r, {&a, &b}, [ai, bi, oi, m, k, n] {
            ConstMap g(oi->grad->data(), m, n);
            if (ai->requires_grad) {
                MutMap(ai->ensure_grad().data(), m, k).noalias() += g * ConstMap(bi->data.data(), n, k);
            }
            if (bi->requires_grad) {
                MutMap(bi->ensure_grad().data(), n, k).noalias() += g.transpose() * ConstMap(ai->data.data(), m, k);
            }
        });
    }
    return r.tensor;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t n = last_dim(x);
    const std::size_t rows = x.numel() / n;
    if (gain.numel() != n || bias.numel() != n) {
        throw DimensionMismatch("layer_norm: gain/bias must have " + std::to_string(n) + " elements");
    }
    auto xd = x.data();
    auto gd = gain.data();
    auto bd = bias.data();
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (row[j] - mean) * inv;
            xhat[r * n + j] = h;
            out[r * n + j] = h * gd[j] + bd[j];
        }
    }
    auto res = make_result(x.shape(), std::move(out), {&x, &gain, &bias});
    if (res.tracked) {
        auto* xi = x.impl().get();
        auto* gi = gain.impl().get();
        auto* bi = bias.impl().get();
        auto* oi = res.tensor.impl().get();
        record(res, {&x, &gain, &bias},
               [xi, gi, bi, oi, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                   const auto& g = *oi->grad;
                   if (gi->requires_grad) {
                       auto& gg = gi->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
                   }
                   if (bi->requires_grad) {
                       auto& gb = bi->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                   }
                   if (xi->requires_grad) {
                       auto& gx = xi->ensure_grad();
                       const double inv_n = 1.0 / static_cast<double>(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                           double mean_d = 0.0, mean_dx = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                               const double d = g[r * n + j] * gi->data[j];
                               mean_d += d;
                               mean_dx += d * xhat[r * n + j];
                           }
                           mean_d *= inv_n;
                           mean_dx *= inv_n;
                           for (std::size_t j = 0; j < n; ++j) {
                               const double d = g[r * n + j] * gi->data[j];
                               gx[r * n + j] += inv_std[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
                           }
                       }
                   }
               });
    }
    return res.tensor;
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    require_matrix(table, "embedding_lookup");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    if (ids.empty()) throw DimensionMismatch("embedding_lookup: empty id list");
    std::vector<double> out(ids.size() * d);
    auto td = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw TargetOutOfRange("embedding_lookup: id " + std::to_string(ids[i]) + " outside table of " +
                                   std::to_string(vocab) + " rows");
        }
        std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    auto r = make_result({ids.size(), d}, std::move(out), {&table});
    if (r.tracked) {
        auto* ti = table.impl().get();
        auto* oi = r.tensor.impl().get();
        std::vector<int> idcopy(ids.begin(), ids.end());
        record(r, {&table}, [ti, oi, d, idcopy = std::move(idcopy)] {
            const auto& g = *oi->grad;
            auto& gt = ti->ensure_grad();
            for (std::size_t i = 0; i < idcopy.size(); ++i) {
                double* dst = gt.data() + static_cast<std::size_t>(idcopy[i]) * d;
                const double* src = g.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return r.tensor;
}

Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionMismatch("concat: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t rows = 0;
    std::vector<double> out;
    for (const Tensor& p : parts) {
        if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
            throw DimensionMismatch("concat: trailing dimensions differ, " + shape_str(parts[0].shape()) + " vs " +
                                    shape_str(p.shape()));
        }
        rows += p.dim(0);
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    Shape shape = parts[0].shape();
    shape[0] = rows;
    bool any_grad = false;
    for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(out);
    impl->requires_grad = any_grad && Tape::active() != nullptr;
    Tensor result = Tensor::from_impl(impl);
    if (impl->requires_grad) {
        Tape::Node node;
        std::vector<detail::TensorImpl*> raw;
        for (const Tensor& p : parts) {
            node.inputs.push_back(p.impl());
            raw.push_back(p.impl().get());
        }
        node.output = impl;
        auto* oi = impl.get();
        node.backward = [raw = std::move(raw), oi] {
            const auto& g = *oi->grad;
            std::size_t offset = 0;
            for (auto* in : raw) {
                const std::size_t n = in->data.size();
                if (in->requires_grad) {
                    auto& gi = in->ensure_grad();
                    for (std::size_t i = 0; i < n; ++i) gi[i] += g[offset + i];
                }
                offset += n;
            }
        };
        Tape::active()->record(std::move(node));
    }
    return result;
}

Tensor slice(const Tensor& x, std::size_t begin, std::size_t end) {
    if (x.rank() == 0 || begin >= end || end > x.dim(0)) {
        throw DimensionMismatch("slice: invalid row range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                ") of " + shape_str(x.shape()));
    }
    const std::size_t stride = x.numel() / x.dim(0);
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                            x.data().begin() + static_cast<std::ptrdiff_t>(end * stride));
    Shape shape = x.shape();
    shape[0] = end - begin;
    auto r = make_result(std::move(shape), std::move(out), {&x});
    if (r.tracked) {
        auto* xi = x.impl().get();
        auto* oi = r.tensor.impl().get();
        const std::size_t offset = begin * stride;
        record(r, {&x}, [xi, oi, offset] {
            const auto& g = *oi->grad;
            auto& gx = xi->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
        });
    }
    return r.tensor;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionMismatch("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    auto r = make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {&x});
    if (r.tracked) {
        auto* xi = x.impl().get();
        auto* oi = r.tensor.impl().get();
        record(r, {&x}, [xi, oi] {
            const auto& g = *oi->grad;
            auto& gx = xi->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return r.tensor;
}

Tensor softmax(const Tensor& x) {
    require_finite(x, "softmax");
    const std::size_t n = last_dim(x);
    const std::size_t rows = x.numel() / n;
    auto xd = x.data();
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * n;
        double* o = out.data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(row[j] - mx);
            total += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= total;
    }
    auto res = make_result(x.shape(), std::move(out), {&x});
    if (res.tracked) {
        auto* xi = x.impl().get();
        auto* oi = res.tensor.impl().get();
        record(res, {&x}, [xi, oi, n, rows] {
            const auto& g = *oi->grad;
            const auto& y = oi->data;
            auto& gx = xi->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
                for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
            }
        });
    }
    return res.tensor;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
    require_matrix(logits, "cross_entropy");
    const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != rows) {
        throw DimensionMismatch("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(rows) + " rows");
    }
    require_finite(logits, "cross_entropy");
    auto ld = logits.data();
    std::size_t count = 0;
    double total = 0.0;
    // Softmax probabilities of contributing rows, kept for the backward pass.
    std::vector<double> probs(logits.numel(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const int t = targets[r];
        if (t == ignore_index) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw TargetOutOfRange("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                                   std::to_string(vocab));
        }
        const double* row = ld.data() + r * vocab;
        const double mx = *std::max_element(row, row + vocab);
        double z = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
        const double log_z = mx + std::log(z);
        total += log_z - row[t];
        for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] = std::exp(row[j] - log_z);
        ++count;
    }
    if (count == 0) throw AllPositionsIgnored("cross_entropy: every target equals ignore_index");
    auto res = make_result({1}, {total / static_cast<double>(count)}, {&logits});
    if (res.tracked) {
        auto* li = logits.impl().get();
        auto* oi = res.tensor.impl().get();
        std::vector<int> tcopy(targets.begin(), targets.end());
        record(res, {&logits}, [li, oi, vocab, count, ignore_index, tcopy = std::move(tcopy),
                                probs = std::move(probs)] {
            const double g = (*oi->grad)[0] / static_cast<double>(count);
            auto& gl = li->ensure_grad();
            for (std::size_t r = 0; r < tcopy.size(); ++r) {
                if (tcopy[r] == ignore_index) continue;
                for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] += g * probs[r * vocab + j];
                gl[r * vocab + static_cast<std::size_t>(tcopy[r])] -= g;
            }
        });
    }
    return res.tensor;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionSpec& spec) {
    require_matrix(q, "attention");
    require_matrix(k, "attention");
    require_matrix(v, "attention");
    const std::size_t B = spec.batch, Tq = spec.query_len, Tk = spec.key_len, H = spec.heads;
    const std::size_t d = q.dim(1);
    if (H == 0 || d % H != 0) throw DimensionMismatch("attention: width not divisible by head count");
    if (q.dim(0) != B * Tq || k.dim(0) != B * Tk || v.dim(0) != B * Tk || k.dim(1) != d || v.dim(1) != d) {
        throw DimensionMismatch("attention: packed shapes do not match the spec");
    }
    if (!spec.key_valid.empty() && spec.key_valid.size() != B * Tk) {
        throw DimensionMismatch("attention: key_valid must have batch*key_len entries");
    }
    if (spec.causal && Tq > Tk) throw DimensionMismatch("attention: causal mask needs query_len <= key_len");
    const std::size_t dh = d / H;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    auto qd = q.data();
    auto kd = k.data();
    auto vd = v.data();

    std::vector<double> probs(B * H * Tq * Tk, 0.0);
    std::vector<double> out(B * Tq * d, 0.0);
    std::vector<double> scores(Tk);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < Tq; ++i) {
                const double* qi = qd.data() + (b * Tq + i) * d + h * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < Tk; ++j) {
                    const bool allowed = (!spec.causal || j <= i) &&
                                         (spec.key_valid.empty() || spec.key_valid[b * Tk + j] != 0);
                    if (!allowed) {
                        scores[j] = -std::numeric_limits<double>::infinity();
                        continue;
                    }
                    const double* kj = kd.data() + (b * Tk + j) * d + h * dh;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    scores[j] = s * inv_sqrt;
                    mx = std::max(mx, scores[j]);
                }
                double* p = probs.data() + ((b * H + h) * Tq + i) * Tk;
                if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
                double total = 0.0;
                for (std::size_t j = 0; j < Tk; ++j) {
                    p[j] = scores[j] == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(scores[j] - mx);
                    total += p[j];
                }
                double* o = out.data() + (b * Tq + i) * d + h * dh;
                for (std::size_t j = 0; j < Tk; ++j) {
                    p[j] /= total;
                    if (p[j] == 0.0) continue;
                    const double* vj = vd.data() + (b * Tk + j) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) o[c] += p[j] * vj[c];
                }
            }
        }
    }

    auto res = make_result({B * Tq, d}, std::move(out), {&q, &k, &v});
    if (res.tracked) {
        auto* qi_ = q.impl().get();
        auto* ki_ = k.impl().get();
        auto* vi_ = v.impl().get();
        auto* oi = res.tensor.impl().get();
        record(res, {&q, &k, &v}, [=, probs = std::move(probs)] {
            const auto& g = *oi->grad;
            const auto& qv = qi_->data;
            const auto& kv = ki_->data;
            const auto& vv = vi_->data;
            std::vector<double> scratch_q(B * Tq * d, 0.0), scratch_k(B * Tk * d, 0.0), scratch_v(B * Tk * d, 0.0);
            std::vector<double> dp(Tk);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t h = 0; h < H; ++h) {
                    for (std::size_t i = 0; i < Tq; ++i) {
                        const double* p = probs.data() + ((b * H + h) * Tq + i) * Tk;
                        const double* gi = g.data() + (b * Tq + i) * d + h * dh;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < Tk; ++j) {
                            if (p[j] == 0.0) {
                                dp[j] = 0.0;
                                continue;
                            }
                            const double* vj = vv.data() + (b * Tk + j) * d + h * dh;
                            double* gvj = scratch_v.data() + (b * Tk + j) * d + h * dh;
                            double s = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) {
                                s += gi[c] * vj[c];
                                gvj[c] += p[j] * gi[c];
                            }
                            dp[j] = s;
                            dot += p[j] * s;
                        }
                        const double* qrow = qv.data() + (b * Tq + i) * d + h * dh;
                        double* gq = scratch_q.data() + (b * Tq + i) * d + h * dh;
                        for (std::size_t j = 0; j < Tk; ++j) {
                            if (p[j] == 0.0) continue;
                            const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                            const double* kj = kv.data() + (b * Tk + j) * d + h * dh;
                            double* gk = scratch_k.data() + (b * Tk + j) * d + h * dh;
                            for (std::size_t c = 0; c < dh; ++c) {
                                gq[c] += ds * kj[c];
                                gk[c] += ds * qrow[c];
                            }
                        }
                    }
                }
            }
            auto accumulate = [](detail::TensorImpl* t, const std::vector<double>& s) {
                if (!t->requires_grad) return;
                auto& gt = t->ensure_grad();
                for (std::size_t i = 0; i < s.size(); ++i) gt[i] += s[i];
            };
            accumulate(qi_, scratch_q);
            accumulate(ki_, scratch_k);
            accumulate(vi_, scratch_v);
        });
    }
    return res.tensor;
}

}  // namespace distill
