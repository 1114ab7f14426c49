#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "cobalt/common.hpp"

namespace cobalt {

constexpr double kEpsProb = 1e-12; // probability clamp for logs
constexpr double kEpsNorm = 1e-12; // smallest vector norm accepted by normalization

// Dense row-major tensor of doubles with an optional gradient buffer.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad; // same length as values when requires_grad
    bool requires_grad = false;

    std::size_t size() const { return values.size(); }

    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols() + c]; }

    double& grad_at(int r, int c) { return grad[static_cast<std::size_t>(r) * cols() + c]; }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }

    void zero_grad() {
        if (requires_grad) {
            ensure_grad();
            std::fill(grad.begin(), grad.end(), 0.0);
        }
    }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline std::size_t shape_count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        require(d >= 0, "tensor: negative dimension ", d);
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline TensorPtr make_tensor(std::vector<int> shape, bool requires_grad = false) {
    auto t = std::make_shared<Tensor>();
    t->values.assign(shape_count(shape), 0.0);
    t->shape = std::move(shape);
    t->requires_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
}

inline TensorPtr make_tensor(std::vector<int> shape, std::vector<double> values,
                             bool requires_grad = false) {
    require(shape_count(shape) == values.size(), "tensor: shape/value count mismatch (",
            shape_count(shape), " vs ", values.size(), ")");
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->values = std::move(values);
    t->requires_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
}

inline TensorPtr scalar_tensor(double v) { return make_tensor({1}, std::vector<double>{v}); }

// A new constant tensor with the same values and no gradient path.
inline TensorPtr detach(const TensorPtr& x) {
    auto t = std::make_shared<Tensor>();
    t->shape = x->shape;
    t->values = x->values;
    t->requires_grad = false;
    return t;
}

// Ordered record of primitive operations. Replaying the record in reverse
// produces gradients for every tensor the tape has touched; replay order is
// fixed, so two backward passes over one tape are bitwise identical.
class Tape {
public:
    void touch(const TensorPtr& t) {
        if (t->requires_grad) touched_.push_back(t);
    }

    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

    std::size_t op_count() const { return steps_.size(); }

    void backward(const TensorPtr& loss) {
        require(loss->size() == 1, "backward: loss must be scalar, got ", loss->size(), " values");
        require(loss->requires_grad, "backward: loss does not depend on any parameter");
        for (auto& t : touched_) t->zero_grad();
        loss->grad[0] = 1.0;
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> steps_;
    std::vector<TensorPtr> touched_;
};

// ---------------------------------------------------------------------------
// Numeric kernels (no tape involvement)
// ---------------------------------------------------------------------------

// Temperature softmax with max-subtraction. Rejects non-finite input and
// non-positive temperature.
inline std::vector<double> softmax(std::span<const double> logits, double temperature) {
    require(temperature > 0.0, "softmax: temperature must be positive, got ", temperature);
    require(!logits.empty(), "softmax: empty input");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < logits.size(); ++i) {
        require(std::isfinite(logits[i]), "softmax: non-finite input at index ", i);
        mx = std::max(mx, logits[i]);
    }
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp((logits[i] - mx) / temperature);
        total += out[i];
    }
    for (double& v : out) v /= total;
    return out;
}

inline double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// Unit-normalizes v. `who` names the vector in diagnostics (e.g. "slot row 2").
inline std::vector<double> l2_normalized(std::span<const double> v, const std::string& who = "vector") {
    double n = l2_norm(v);
    require(n > kEpsNorm, "l2_normalize: ", who, " has near-zero norm ", n);
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x /= n;
    return out;
}

// -log p[target] with p clamped into [kEpsProb, 1 - kEpsProb].
inline double cross_entropy(int target_index, std::span<const double> probabilities) {
    require(target_index >= 0 && static_cast<std::size_t>(target_index) < probabilities.size(),
            "cross_entropy: target index ", target_index, " out of range for ",
            probabilities.size(), " classes");
    double p = probabilities[static_cast<std::size_t>(target_index)];
    p = std::clamp(p, kEpsProb, 1.0 - kEpsProb);
    return -std::log(p);
}

// Lowest-index argmax; the tie rule used throughout the library.
inline int argmax_lowest(std::span<const double> v) {
    require(!v.empty(), "argmax: empty input");
    int best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = static_cast<int>(i);
    }
    return best;
}

// ---------------------------------------------------------------------------
// Differentiable operations. Each computes its forward result and, when a
// tape is supplied and any input carries a gradient, records the backward
// rule. Passing tape == nullptr gives a plain forward pass (teacher branch).
// ---------------------------------------------------------------------------

namespace ops {

inline TensorPtr result_of(Tape* tape, std::vector<int> shape,
                           std::initializer_list<TensorPtr> inputs) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in->requires_grad;
    auto out = make_tensor(std::move(shape), tape != nullptr && needs);
    if (tape && out->requires_grad) {
        for (const auto& in : inputs) tape->touch(in);
        tape->touch(out);
    }
    return out;
}

// C = A(m×k) · B(k×n)
inline TensorPtr matmul(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    require(a->cols() == b->rows(), "matmul: inner dims disagree (", a->cols(), " vs ", b->rows(), ")");
    const int m = a->rows(), k = a->cols(), n = b->cols();
    auto out = result_of(tape, {m, n}, {a, b});
    const double* A = a->values.data();
    const double* B = b->values.data();
    double* C = out->values.data();
    for (int i = 0; i < m; ++i) {
        double* crow = C + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = A[static_cast<std::size_t>(i) * k + kk];
            if (av == 0.0) continue;
            const double* brow = B + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    if (out->requires_grad) {
        tape->record([a, b, out, m, k, n] {
            const double* G = out->grad.data();
            if (a->requires_grad) {
                a->ensure_grad();
                double* GA = a->grad.data();
                const double* B2 = b->values.data();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const double g = G[static_cast<std::size_t>(i) * n + j];
                        if (g == 0.0) continue;
                        for (int kk = 0; kk < k; ++kk)
                            GA[static_cast<std::size_t>(i) * k + kk] += g * B2[static_cast<std::size_t>(kk) * n + j];
                    }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                double* GB = b->grad.data();
                const double* A2 = a->values.data();
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        const double av = A2[static_cast<std::size_t>(i) * k + kk];
                        if (av == 0.0) continue;
                        const double* grow = G + static_cast<std::size_t>(i) * n;
                        for (int j = 0; j < n; ++j)
                            GB[static_cast<std::size_t>(kk) * n + j] += av * grow[j];
                    }
            }
        });
    }
    return out;
}

// C = A(m×k) · B(n×k)ᵀ
inline TensorPtr matmul_nt(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    require(a->cols() == b->cols(), "matmul_nt: inner dims disagree (", a->cols(), " vs ", b->cols(), ")");
    const int m = a->rows(), k = a->cols(), n = b->rows();
    auto out = result_of(tape, {m, n}, {a, b});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk) s += a->at(i, kk) * b->at(j, kk);
            out->at(i, j) = s;
        }
    if (out->requires_grad) {
        tape->record([a, b, out, m, k, n] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const double g = out->grad[static_cast<std::size_t>(i) * n + j];
                        if (g == 0.0) continue;
                        for (int kk = 0; kk < k; ++kk) a->grad_at(i, kk) += g * b->at(j, kk);
                    }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const double g = out->grad[static_cast<std::size_t>(i) * n + j];
                        if (g == 0.0) continue;
                        for (int kk = 0; kk < k; ++kk) b->grad_at(j, kk) += g * a->at(i, kk);
                    }
            }
        });
    }
    return out;
}

inline TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    require(a->shape == b->shape, "add: shape mismatch");
    auto out = result_of(tape, a->shape, {a, b});
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] + b->values[i];
    if (out->requires_grad) {
        tape->record([a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

inline TensorPtr sub(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    require(a->shape == b->shape, "sub: shape mismatch");
    auto out = result_of(tape, a->shape, {a, b});
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] - b->values[i];
    if (out->requires_grad) {
        tape->record([a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] -= out->grad[i];
            }
        });
    }
    return out;
}

// Adds row vector b (length n) to every row of A (m×n).
inline TensorPtr add_rowvec(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    require(static_cast<int>(b->size()) == a->cols(), "add_rowvec: bias length ", b->size(),
            " does not match columns ", a->cols());
    const int m = a->rows(), n = a->cols();
    auto out = result_of(tape, a->shape, {a, b});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->at(i, j) = a->at(i, j) + b->values[static_cast<std::size_t>(j)];
    if (out->requires_grad) {
        tape->record([a, b, out, m, n] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) b->grad[static_cast<std::size_t>(j)] += out->grad[static_cast<std::size_t>(i) * n + j];
            }
        });
    }
    return out;
}

inline TensorPtr scale(Tape* tape, const TensorPtr& a, double s) {
    auto out = result_of(tape, a->shape, {a});
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] * s;
    if (out->requires_grad) {
        tape->record([a, out, s] {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * s;
        });
    }
    return out;
}

inline TensorPtr relu(Tape* tape, const TensorPtr& a) {
    auto out = result_of(tape, a->shape, {a});
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] > 0.0 ? a->values[i] : 0.0;
    if (out->requires_grad) {
        tape->record([a, out] {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i)
                if (a->values[i] > 0.0) a->grad[i] += out->grad[i];
        });
    }
    return out;
}

// max(x, slope*x) with 0 < slope < 1. Contracts angles between inputs far
// less than plain relu, which matters for keeping randomly initialized patch
// embeddings spread out.
inline TensorPtr leaky_relu(Tape* tape, const TensorPtr& a, double slope = 0.65) {
    auto out = result_of(tape, a->shape, {a});
    for (std::size_t i = 0; i < a->size(); ++i)
        out->values[i] = a->values[i] > 0.0 ? a->values[i] : slope * a->values[i];
    if (out->requires_grad) {
        tape->record([a, out, slope] {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i)
                a->grad[i] += out->grad[i] * (a->values[i] > 0.0 ? 1.0 : slope);
        });
    }
    return out;
}

// Unit-normalizes each row of A. `who` names the rows in diagnostics.
inline TensorPtr row_l2_normalize(Tape* tape, const TensorPtr& a, const std::string& who = "row") {
    const int m = a->rows(), n = a->cols();
    auto out = result_of(tape, a->shape, {a});
    std::vector<double> norms(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        std::span<const double> row(a->values.data() + static_cast<std::size_t>(i) * n,
                                    static_cast<std::size_t>(n));
        double nr = l2_norm(row);
        require(nr > kEpsNorm, "l2_normalize: ", who, " ", i, " has near-zero norm ", nr);
        norms[static_cast<std::size_t>(i)] = nr;
        for (int j = 0; j < n; ++j) out->at(i, j) = a->at(i, j) / nr;
    }
    if (out->requires_grad) {
        tape->record([a, out, norms, m, n] {
            a->ensure_grad();
            // d/dx (x/|x|) applied to upstream g: (g - (x̂·g) x̂) / |x|
            for (int i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int j = 0; j < n; ++j)
                    dot += out->at(i, j) * out->grad[static_cast<std::size_t>(i) * n + j];
                const double nr = norms[static_cast<std::size_t>(i)];
                for (int j = 0; j < n; ++j) {
                    const double g = out->grad[static_cast<std::size_t>(i) * n + j];
                    a->grad_at(i, j) += (g - dot * out->at(i, j)) / nr;
                }
            }
        });
    }
    return out;
}

// Temperature softmax over the row axis, independently per column: every
// column of the output sums to 1. Non-finite input and tau <= 0 are rejected.
inline TensorPtr softmax_cols(Tape* tape, const TensorPtr& a, double tau) {
    const int m = a->rows(), n = a->cols();
    auto out = result_of(tape, a->shape, {a});
    std::vector<double> col(static_cast<std::size_t>(m));
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < m; ++i) col[static_cast<std::size_t>(i)] = a->at(i, j);
        auto sm = softmax(col, tau);
        for (int i = 0; i < m; ++i) out->at(i, j) = sm[static_cast<std::size_t>(i)];
    }
    if (out->requires_grad) {
        tape->record([a, out, m, n, tau] {
            a->ensure_grad();
            for (int j = 0; j < n; ++j) {
                double dot = 0.0;
                for (int i = 0; i < m; ++i)
                    dot += out->at(i, j) * out->grad[static_cast<std::size_t>(i) * n + j];
                for (int i = 0; i < m; ++i) {
                    const double g = out->grad[static_cast<std::size_t>(i) * n + j];
                    a->grad_at(i, j) += out->at(i, j) * (g - dot) / tau;
                }
            }
        });
    }
    return out;
}

// D(K×N) with D_ij = ||C_i - Z_j||². Gradient flows into both inputs.
inline TensorPtr sqdist_cols(Tape* tape, const TensorPtr& c, const TensorPtr& z) {
    require(c->cols() == z->cols(), "sqdist: dims disagree (", c->cols(), " vs ", z->cols(), ")");
    const int K = c->rows(), N = z->rows(), d = c->cols();
    auto out = result_of(tape, {K, N}, {c, z});
    for (int i = 0; i < K; ++i)
        for (int j = 0; j < N; ++j) {
            double s = 0.0;
            for (int kk = 0; kk < d; ++kk) {
                const double diff = c->at(i, kk) - z->at(j, kk);
                s += diff * diff;
            }
            out->at(i, j) = s;
        }
    if (out->requires_grad) {
        tape->record([c, z, out, K, N, d] {
            for (int i = 0; i < K; ++i)
                for (int j = 0; j < N; ++j) {
                    const double g = out->grad[static_cast<std::size_t>(i) * N + j];
                    if (g == 0.0) continue;
                    for (int kk = 0; kk < d; ++kk) {
                        const double diff = c->at(i, kk) - z->at(j, kk);
                        if (c->requires_grad) {
                            c->ensure_grad();
                            c->grad_at(i, kk) += g * 2.0 * diff;
                        }
                        if (z->requires_grad) {
                            z->ensure_grad();
                            z->grad_at(j, kk) -= g * 2.0 * diff;
                        }
                    }
                }
        });
    }
    return out;
}

// Elementwise log(max(x, eps)); zero gradient below the clamp.
inline TensorPtr log_clamped(Tape* tape, const TensorPtr& a, double eps = kEpsProb) {
    auto out = result_of(tape, a->shape, {a});
    for (std::size_t i = 0; i < a->size(); ++i)
        out->values[i] = std::log(std::max(a->values[i], eps));
    if (out->requires_grad) {
        tape->record([a, out, eps] {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i)
                if (a->values[i] > eps) a->grad[i] += out->grad[i] / a->values[i];
        });
    }
    return out;
}

// Elementwise product with a constant mask of identical shape.
inline TensorPtr mul_const(Tape* tape, const TensorPtr& a, const std::vector<double>& mask) {
    require(mask.size() == a->size(), "mul_const: mask size mismatch");
    auto out = result_of(tape, a->shape, {a});
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] * mask[i];
    if (out->requires_grad) {
        tape->record([a, out, mask] {
            a->ensure_grad();
            for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * mask[i];
        });
    }
    return out;
}

inline TensorPtr mul(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    require(a->shape == b->shape, "mul: shape mismatch");
    auto out = result_of(tape, a->shape, {a, b});
    for (std::size_t i = 0; i < a->size(); ++i) out->values[i] = a->values[i] * b->values[i];
    if (out->requires_grad) {
        tape->record([a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * b->values[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i] * a->values[i];
            }
        });
    }
    return out;
}

inline TensorPtr sum_all(Tape* tape, const TensorPtr& a) {
    auto out = result_of(tape, {1}, {a});
    double s = 0.0;
    for (double v : a->values) s += v;
    out->values[0] = s;
    if (out->requires_grad) {
        tape->record([a, out] {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[0];
        });
    }
    return out;
}

inline TensorPtr mean_all(Tape* tape, const TensorPtr& a) {
    require(a->size() > 0, "mean: empty tensor");
    auto out = result_of(tape, {1}, {a});
    double s = 0.0;
    for (double v : a->values) s += v;
    const double inv = 1.0 / static_cast<double>(a->size());
    out->values[0] = s * inv;
    if (out->requires_grad) {
        tape->record([a, out, inv] {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[0] * inv;
        });
    }
    return out;
}

// out_i = Σ_k A_ik B_ik  (per-row inner product of two m×n matrices)
inline TensorPtr rows_dot(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    require(a->shape == b->shape, "rows_dot: shape mismatch");
    const int m = a->rows(), n = a->cols();
    auto out = result_of(tape, {m}, {a, b});
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += a->at(i, j) * b->at(i, j);
        out->values[static_cast<std::size_t>(i)] = s;
    }
    if (out->requires_grad) {
        tape->record([a, b, out, m, n] {
            for (int i = 0; i < m; ++i) {
                const double g = out->grad[static_cast<std::size_t>(i)];
                if (g == 0.0) continue;
                if (a->requires_grad) {
                    a->ensure_grad();
                    for (int j = 0; j < n; ++j) a->grad_at(i, j) += g * b->at(i, j);
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    for (int j = 0; j < n; ++j) b->grad_at(i, j) += g * a->at(i, j);
                }
            }
        });
    }
    return out;
}

// Gathers v[idx[k]] into a vector of length |idx|.
inline TensorPtr select(Tape* tape, const TensorPtr& v, const std::vector<int>& idx) {
    for (int i : idx)
        require(i >= 0 && static_cast<std::size_t>(i) < v->size(), "select: index ", i, " out of range");
    auto out = result_of(tape, {static_cast<int>(idx.size())}, {v});
    for (std::size_t k = 0; k < idx.size(); ++k) out->values[k] = v->values[static_cast<std::size_t>(idx[k])];
    if (out->requires_grad) {
        tape->record([v, out, idx] {
            v->ensure_grad();
            for (std::size_t k = 0; k < idx.size(); ++k)
                v->grad[static_cast<std::size_t>(idx[k])] += out->grad[k];
        });
    }
    return out;
}

// Contiguous row slice A[r0 : r0+rows, :].
inline TensorPtr slice_rows(Tape* tape, const TensorPtr& a, int r0, int nrows) {
    require(r0 >= 0 && nrows >= 0 && r0 + nrows <= a->rows(), "slice_rows: range [", r0, ", ",
            r0 + nrows, ") out of ", a->rows(), " rows");
    const int n = a->cols();
    auto out = result_of(tape, {nrows, n}, {a});
    std::copy_n(a->values.begin() + static_cast<std::ptrdiff_t>(r0) * n,
                static_cast<std::size_t>(nrows) * n, out->values.begin());
    if (out->requires_grad) {
        tape->record([a, out, r0, nrows, n] {
            a->ensure_grad();
            for (std::size_t i = 0; i < static_cast<std::size_t>(nrows) * n; ++i)
                a->grad[static_cast<std::size_t>(r0) * n + i] += out->grad[i];
        });
    }
    return out;
}

// log Σ exp(v_i), max-subtracted.
inline TensorPtr logsumexp(Tape* tape, const TensorPtr& v) {
    require(v->size() > 0, "logsumexp: empty input");
    auto out = result_of(tape, {1}, {v});
    double mx = *std::max_element(v->values.begin(), v->values.end());
    double s = 0.0;
    for (double x : v->values) s += std::exp(x - mx);
    out->values[0] = mx + std::log(s);
    if (out->requires_grad) {
        tape->record([v, out] {
            v->ensure_grad();
            const double lse = out->values[0];
            for (std::size_t i = 0; i < v->size(); ++i)
                v->grad[i] += out->grad[0] * std::exp(v->values[i] - lse);
        });
    }
    return out;
}

// Mean softmax cross-entropy over rows of a logits matrix (B×C), fused
// forward/backward. Labels index columns.
inline TensorPtr softmax_xent_rows(Tape* tape, const TensorPtr& logits, const std::vector<int>& labels) {
    const int B = logits->rows(), C = logits->cols();
    require(static_cast<int>(labels.size()) == B, "xent: label count ", labels.size(),
            " does not match rows ", B);
    for (int y : labels) require(y >= 0 && y < C, "xent: label ", y, " out of range for ", C, " classes");
    auto out = result_of(tape, {1}, {logits});
    double total = 0.0;
    for (int i = 0; i < B; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < C; ++j) mx = std::max(mx, logits->at(i, j));
        double s = 0.0;
        for (int j = 0; j < C; ++j) s += std::exp(logits->at(i, j) - mx);
        total += mx + std::log(s) - logits->at(i, labels[static_cast<std::size_t>(i)]);
    }
    out->values[0] = total / B;
    if (out->requires_grad) {
        tape->record([logits, out, labels, B, C] {
            logits->ensure_grad();
            const double g = out->grad[0] / B;
            for (int i = 0; i < B; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < C; ++j) mx = std::max(mx, logits->at(i, j));
                double s = 0.0;
                for (int j = 0; j < C; ++j) s += std::exp(logits->at(i, j) - mx);
                for (int j = 0; j < C; ++j) {
                    double p = std::exp(logits->at(i, j) - mx) / s;
                    logits->grad_at(i, j) += g * (p - (j == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

} // namespace ops

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

// Max over parameter entries of |analytic - central_difference| /
// max(1, |analytic|, |central_difference|). The loss builder must be
// deterministic; it is evaluated twice up front and rejected if the two
// values differ bitwise.
inline double grad_check(const std::function<TensorPtr(Tape&)>& build_loss,
                         const std::vector<TensorPtr>& params, double step) {
    require(step >= 1e-7 && step <= 1e-3, "grad_check: step ", step, " outside [1e-7, 1e-3]");
    const auto eval = [&]() {
        Tape t;
        return build_loss(t)->values[0];
    };
    const double v1 = eval();
    const double v2 = eval();
    require(std::memcmp(&v1, &v2, sizeof(double)) == 0,
            "grad_check: loss is non-deterministic (", v1, " vs ", v2, ")");

    Tape tape;
    auto loss = build_loss(tape);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        p->ensure_grad();
        analytic.push_back(p->grad);
    }

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double saved = p->values[i];
            p->values[i] = saved + step;
            const double fp = eval();
            p->values[i] = saved - step;
            const double fm = eval();
            p->values[i] = saved;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[pi][i];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Plain SGD with momentum; the only optimizer in the library.
class SgdMomentum {
public:
    SgdMomentum(std::vector<TensorPtr> params, double lr, double momentum = 0.9,
                double weight_decay = 0.0)
        : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
        for (const auto& p : params_) velocity_.emplace_back(p->size(), 0.0);
    }

    void step() {
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            auto& p = params_[pi];
            p->ensure_grad();
            auto& v = velocity_[pi];
            for (std::size_t i = 0; i < p->size(); ++i) {
                const double g = p->grad[i] + weight_decay_ * p->values[i];
                v[i] = momentum_ * v[i] - lr_ * g;
                p->values[i] += v[i];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    const std::vector<TensorPtr>& params() const { return params_; }

private:
    std::vector<TensorPtr> params_;
    std::vector<std::vector<double>> velocity_;
    double lr_, momentum_, weight_decay_;
};

} // namespace cobalt
