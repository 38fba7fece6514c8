// Reverse-mode automatic differentiation on an append-only tape.
// Ops record their backward rule as a closure; backward() replays the tape
// in reverse append order, accumulating gradients additively for fan-out.
#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "distillforge/rng.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

namespace kernels {

// C(m,n) += A(m,k) * B(k,n)
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            T av = arow[p];
            const T* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(m,k) += A(m,n) * B(k,n)^T
template <typename T>
void gemm_abt_acc(const T* a, const T* b, T* c, size_t m, size_t n, size_t k) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * n;
        T* crow = c + i * k;
        for (size_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            T s = 0;
            for (size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
            crow[p] += s;
        }
    }
}

// C(k,n) += A(m,k)^T * B(m,n)
template <typename T>
void gemm_atb_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (size_t p = 0; p < k; ++p) {
            T av = arow[p];
            T* crow = c + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void softmax_row(const T* x, T* y, size_t n) {
    T mx = x[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (size_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
    }
    T inv = T(1) / sum;
    for (size_t j = 0; j < n; ++j) y[j] *= inv;
}

template <typename T>
void log_softmax_row(const T* x, T* y, size_t n) {
    T mx = x[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (size_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
    T lse = mx + std::log(sum);
    for (size_t j = 0; j < n; ++j) y[j] = x[j] - lse;
}

} // namespace kernels

template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- leaves -----------------------------------------------------------

    Var leaf(const std::string& name, Tensor<T> value) {
        Var v = push(std::move(value), true);
        nodes_[size_t(v.id)].leaf_index = int(leaves_.size());
        leaves_.push_back({name, v.id});
        return v;
    }

    Var constant(Tensor<T> value) { return push(std::move(value), false); }

    const Tensor<T>& value(Var v) const { return nodes_.at(size_t(v.id)).value; }

    // ---- primitive ops ----------------------------------------------------

    Var matmul(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
            opfail("matmul", A.shape, B.shape);
        size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
        Tensor<T> out({m, n});
        kernels::gemm_acc(A.data.data(), B.data.data(), out.data.data(), m, k, n);
        Var y = emit("matmul", std::move(out), {a, b});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            const auto& Av = t.val(a);
            const auto& Bv = t.val(b);
            if (t.wants(a))
                kernels::gemm_abt_acc(g.data.data(), Bv.data.data(), t.gbuf(a).data.data(), m, n, k);
            if (t.wants(b))
                kernels::gemm_atb_acc(Av.data.data(), g.data.data(), t.gbuf(b).data.data(), m, k, n);
        });
        return y;
    }

    // Same-shape add, or bias add of a rank-1 (n) vector over rows of (m,n).
    Var add(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        bool bias = (B.rank() == 1 && A.rank() == 2 && A.dim(1) == B.dim(0));
        if (!bias && A.shape != B.shape) opfail("add", A.shape, B.shape);
        Tensor<T> out = A;
        if (bias) {
            size_t m = A.dim(0), n = A.dim(1);
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) out.data[i * n + j] += B.data[j];
        } else {
            for (size_t i = 0; i < out.numel(); ++i) out.data[i] += B.data[i];
        }
        Var y = emit("add", std::move(out), {a, b});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            if (t.wants(a)) {
                auto& ga = t.gbuf(a);
                for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
            }
            if (t.wants(b)) {
                auto& gb = t.gbuf(b);
                if (bias) {
                    size_t m = g.dim(0), n = g.dim(1);
                    for (size_t i = 0; i < m; ++i)
                        for (size_t j = 0; j < n; ++j) gb.data[j] += g.data[i * n + j];
                } else {
                    for (size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
                }
            }
        });
        return y;
    }

    Var mul(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.shape != B.shape) opfail("mul", A.shape, B.shape);
        Tensor<T> out = A;
        for (size_t i = 0; i < out.numel(); ++i) out.data[i] *= B.data[i];
        Var y = emit("mul", std::move(out), {a, b});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            const auto& Av = t.val(a);
            const auto& Bv = t.val(b);
            if (t.wants(a)) {
                auto& ga = t.gbuf(a);
                for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * Bv.data[i];
            }
            if (t.wants(b)) {
                auto& gb = t.gbuf(b);
                for (size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * Av.data[i];
            }
        });
        return y;
    }

    // y = k*a + c, elementwise.
    Var affine(Var a, T k, T c) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = k * v + c;
        Var y = emit("affine", std::move(out), {a});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            if (t.wants(a)) {
                auto& ga = t.gbuf(a);
                for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += k * g.data[i];
            }
        });
        return y;
    }

    // Multiply each row i of a (m,n) by v[i] (rank-1, length m).
    Var mul_colvec(Var a, Var v) {
        const auto& A = val(a);
        const auto& V = val(v);
        if (A.rank() != 2 || V.rank() != 1 || V.dim(0) != A.dim(0))
            opfail("mul_colvec", A.shape, V.shape);
        size_t m = A.dim(0), n = A.dim(1);
        Tensor<T> out = A;
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) out.data[i * n + j] *= V.data[i];
        Var y = emit("mul_colvec", std::move(out), {a, v});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            const auto& Av = t.val(a);
            const auto& Vv = t.val(v);
            if (t.wants(a)) {
                auto& ga = t.gbuf(a);
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j) ga.data[i * n + j] += g.data[i * n + j] * Vv.data[i];
            }
            if (t.wants(v)) {
                auto& gv = t.gbuf(v);
                for (size_t i = 0; i < m; ++i) {
                    T s = 0;
                    for (size_t j = 0; j < n; ++j) s += g.data[i * n + j] * Av.data[i * n + j];
                    gv.data[i] += s;
                }
            }
        });
        return y;
    }

    Var concat_cols(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.dim(0) != B.dim(0))
            opfail("concat", A.shape, B.shape);
        size_t m = A.dim(0), ca = A.dim(1), cb = B.dim(1);
        Tensor<T> out({m, ca + cb});
        for (size_t i = 0; i < m; ++i) {
            std::copy_n(&A.data[i * ca], ca, &out.data[i * (ca + cb)]);
            std::copy_n(&B.data[i * cb], cb, &out.data[i * (ca + cb) + ca]);
        }
        Var y = emit("concat", std::move(out), {a, b});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            if (t.wants(a)) {
                auto& ga = t.gbuf(a);
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < ca; ++j) ga.data[i * ca + j] += g.data[i * (ca + cb) + j];
            }
            if (t.wants(b)) {
                auto& gb = t.gbuf(b);
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < cb; ++j) gb.data[i * cb + j] += g.data[i * (ca + cb) + ca + j];
            }
        });
        return y;
    }

    Var slice_cols(Var a, size_t c0, size_t c1) {
        const auto& A = val(a);
        if (A.rank() != 2 || c0 >= c1 || c1 > A.dim(1))
            throw std::runtime_error("slice: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                     ") invalid for shape " + shape_str(A.shape));
        size_t m = A.dim(0), n = A.dim(1), w = c1 - c0;
        Tensor<T> out({m, w});
        for (size_t i = 0; i < m; ++i) std::copy_n(&A.data[i * n + c0], w, &out.data[i * w]);
        Var y = emit("slice", std::move(out), {a});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            if (t.wants(a)) {
                auto& ga = t.gbuf(a);
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < w; ++j) ga.data[i * n + c0 + j] += g.data[i * w + j];
            }
        });
        return y;
    }

    Var sigmoid(Var a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
        Var y = emit("sigmoid", std::move(out), {a});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            const auto& yv = t.node(y).value;
            if (t.wants(a)) {
                auto& ga = t.gbuf(a);
                for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * yv.data[i] * (T(1) - yv.data[i]);
            }
        });
        return y;
    }

    Var tanh_(Var a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = std::tanh(v);
        Var y = emit("tanh", std::move(out), {a});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            const auto& yv = t.node(y).value;
            if (t.wants(a)) {
                auto& ga = t.gbuf(a);
                for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * (T(1) - yv.data[i] * yv.data[i]);
            }
        });
        return y;
    }

    Var relu(Var a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
        Var y = emit("relu", std::move(out), {a});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            const auto& av = t.val(a);
            if (t.wants(a)) {
                auto& ga = t.gbuf(a);
                for (size_t i = 0; i < g.numel(); ++i)
                    if (av.data[i] > T(0)) ga.data[i] += g.data[i];
            }
        });
        return y;
    }

    // Softmax along the last axis of a 1-D or 2-D tensor.
    Var softmax(Var a) {
        const auto& A = val(a);
        size_t m = A.rank() == 1 ? 1 : A.dim(0);
        size_t n = A.rank() == 1 ? A.dim(0) : A.dim(1);
        Tensor<T> out(A.shape);
        for (size_t i = 0; i < m; ++i) kernels::softmax_row(&A.data[i * n], &out.data[i * n], n);
        Var y = emit("softmax", std::move(out), {a});
        record(y, softmax_backward(y, a, m, n));
        return y;
    }

    // Softmax over unmasked entries of each row; mask entries are 0/1 and the
    // output is exactly 0 wherever mask is 0.
    Var masked_softmax(Var a, Var mask) {
        const auto& A = val(a);
        const auto& M = val(mask);
        if (A.shape != M.shape) opfail("masked_softmax", A.shape, M.shape);
        size_t m = A.rank() == 1 ? 1 : A.dim(0);
        size_t n = A.rank() == 1 ? A.dim(0) : A.dim(1);
        Tensor<T> out(A.shape);
        for (size_t i = 0; i < m; ++i) {
            const T* x = &A.data[i * n];
            const T* mk = &M.data[i * n];
            T* yrow = &out.data[i * n];
            T mx = -std::numeric_limits<T>::infinity();
            for (size_t j = 0; j < n; ++j)
                if (mk[j] != T(0)) mx = std::max(mx, x[j]);
            if (!std::isfinite(double(mx)))
                throw std::runtime_error("masked_softmax: fully masked row " + std::to_string(i));
            T sum = 0;
            for (size_t j = 0; j < n; ++j) {
                yrow[j] = mk[j] != T(0) ? std::exp(x[j] - mx) : T(0);
                sum += yrow[j];
            }
            T inv = T(1) / sum;
            for (size_t j = 0; j < n; ++j) yrow[j] *= inv;
        }
        Var y = emit("masked_softmax", std::move(out), {a, mask});
        record(y, softmax_backward(y, a, m, n));
        return y;
    }

    Var log_softmax(Var a) {
        const auto& A = val(a);
        size_t m = A.rank() == 1 ? 1 : A.dim(0);
        size_t n = A.rank() == 1 ? A.dim(0) : A.dim(1);
        Tensor<T> out(A.shape);
        for (size_t i = 0; i < m; ++i) kernels::log_softmax_row(&A.data[i * n], &out.data[i * n], n);
        Var y = emit("log_softmax", std::move(out), {a});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            const auto& yv = t.node(y).value;
            if (!t.wants(a)) return;
            auto& ga = t.gbuf(a);
            for (size_t i = 0; i < m; ++i) {
                T gsum = 0;
                for (size_t j = 0; j < n; ++j) gsum += g.data[i * n + j];
                for (size_t j = 0; j < n; ++j)
                    ga.data[i * n + j] += g.data[i * n + j] - std::exp(yv.data[i * n + j]) * gsum;
            }
        });
        return y;
    }

    // Gather rows of an embedding table: (V,E) indexed by n ids -> (n,E).
    Var embedding(Var table, const std::vector<int32_t>& ids) {
        const auto& Tb = val(table);
        if (Tb.rank() != 2) opfail("embedding", Tb.shape, {ids.size()});
        size_t V = Tb.dim(0), E = Tb.dim(1), n = ids.size();
        Tensor<T> out({n, E});
        for (size_t i = 0; i < n; ++i) {
            size_t id = size_t(ids[i]);
            if (id >= V)
                throw std::runtime_error("embedding: id " + std::to_string(ids[i]) + " out of range for table " +
                                         shape_str(Tb.shape));
            std::copy_n(&Tb.data[id * E], E, &out.data[i * E]);
        }
        Var y = emit("embedding", std::move(out), {table});
        auto ids_copy = ids;
        record(y, [=, ids2 = std::move(ids_copy)](Tape& t) {
            const auto& g = t.node(y).grad;
            if (!t.wants(table)) return;
            auto& gt = t.gbuf(table);
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < E; ++j) gt.data[size_t(ids2[i]) * E + j] += g.data[i * E + j];
        });
        return y;
    }

    // Inverted dropout: retained units are scaled by 1/(1-p). The mask is a
    // pure function of the rng stream, so replays are exact. p == 0 is a
    // true identity.
    Var dropout(Var a, double p, CounterRng rng) {
        if (p < 0.0 || p >= 1.0) throw std::runtime_error("dropout: p=" + std::to_string(p) + " outside [0,1)");
        if (p == 0.0) return a;
        const auto& A = val(a);
        Tensor<T> mask(A.shape);
        T scale = T(1.0 / (1.0 - p));
        for (size_t i = 0; i < mask.numel(); ++i)
            mask.data[i] = (double(rng.at(i) >> 11) * 0x1.0p-53 >= p) ? scale : T(0);
        Tensor<T> out = A;
        for (size_t i = 0; i < out.numel(); ++i) out.data[i] *= mask.data[i];
        Var y = emit("dropout", std::move(out), {a});
        record(y, [=, m = std::move(mask)](Tape& t) {
            const auto& g = t.node(y).grad;
            if (!t.wants(a)) return;
            auto& ga = t.gbuf(a);
            for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * m.data[i];
        });
        return y;
    }

    Var reduce_sum(Var a) {
        const auto& A = val(a);
        T s = 0;
        for (T v : A.data) s += v;
        Var y = emit("reduce_sum", Tensor<T>::scalar(s), {a});
        record(y, [=](Tape& t) {
            T g = t.node(y).grad.data[0];
            if (!t.wants(a)) return;
            auto& ga = t.gbuf(a);
            for (auto& v : ga.data) v += g;
        });
        return y;
    }

    Var reduce_mean(Var a) {
        const auto& A = val(a);
        T s = 0;
        for (T v : A.data) s += v;
        T n = T(A.numel());
        Var y = emit("reduce_mean", Tensor<T>::scalar(s / n), {a});
        record(y, [=](Tape& t) {
            T g = t.node(y).grad.data[0] / n;
            if (!t.wants(a)) return;
            auto& ga = t.gbuf(a);
            for (auto& v : ga.data) v += g;
        });
        return y;
    }

    // Sum along axis 1 of (m,n) -> (m).
    Var row_sum(Var a) {
        const auto& A = val(a);
        if (A.rank() != 2) opfail("row_sum", A.shape, {});
        size_t m = A.dim(0), n = A.dim(1);
        Tensor<T> out({m});
        for (size_t i = 0; i < m; ++i) {
            T s = 0;
            for (size_t j = 0; j < n; ++j) s += A.data[i * n + j];
            out.data[i] = s;
        }
        Var y = emit("row_sum", std::move(out), {a});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            if (!t.wants(a)) return;
            auto& ga = t.gbuf(a);
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) ga.data[i * n + j] += g.data[i];
        });
        return y;
    }

    // y[i] = a[i, ids[i]] for (m,n) input -> (m).
    Var pick(Var a, const std::vector<int32_t>& ids) {
        const auto& A = val(a);
        if (A.rank() != 2 || ids.size() != A.dim(0)) opfail("pick", A.shape, {ids.size()});
        size_t m = A.dim(0), n = A.dim(1);
        Tensor<T> out({m});
        for (size_t i = 0; i < m; ++i) {
            size_t id = size_t(ids[i]);
            if (id >= n)
                throw std::runtime_error("pick: id " + std::to_string(ids[i]) + " out of range for " +
                                         shape_str(A.shape));
            out.data[i] = A.data[i * n + id];
        }
        Var y = emit("pick", std::move(out), {a});
        auto ids_copy = ids;
        record(y, [=, ids2 = std::move(ids_copy)](Tape& t) {
            const auto& g = t.node(y).grad;
            if (!t.wants(a)) return;
            auto& ga = t.gbuf(a);
            for (size_t i = 0; i < m; ++i) ga.data[i * n + size_t(ids2[i])] += g.data[i];
        });
        return y;
    }

    // Same data, new shape; numel must match.
    Var reshape(Var a, Shape shape) {
        const auto& A = val(a);
        if (shape_numel(shape) != A.numel()) opfail("reshape", A.shape, shape);
        Tensor<T> out(std::move(shape), A.data);
        Var y = emit("reshape", std::move(out), {a});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            if (!t.wants(a)) return;
            auto& ga = t.gbuf(a);
            for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
        });
        return y;
    }

    // Stack L same-shape (B,D) steps into (L,B,D), time-major.
    Var stack_steps(const std::vector<Var>& steps) {
        if (steps.empty()) throw std::runtime_error("stack: empty step list");
        const auto& S0 = val(steps[0]);
        if (S0.rank() != 2) opfail("stack", S0.shape, {});
        size_t L = steps.size(), B = S0.dim(0), D = S0.dim(1);
        Tensor<T> out({L, B, D});
        for (size_t l = 0; l < L; ++l) {
            const auto& S = val(steps[l]);
            if (S.shape != S0.shape) opfail("stack", S0.shape, S.shape);
            std::copy_n(S.data.data(), B * D, &out.data[l * B * D]);
        }
        Var y = emit("stack", std::move(out), steps);
        auto steps_copy = steps;
        record(y, [=, st = std::move(steps_copy)](Tape& t) {
            const auto& g = t.node(y).grad;
            for (size_t l = 0; l < L; ++l) {
                if (!t.wants(st[l])) continue;
                auto& gs = t.gbuf(st[l]);
                for (size_t i = 0; i < B * D; ++i) gs.data[i] += g.data[l * B * D + i];
            }
        });
        return y;
    }

    // s[b,l] = sum_h enc[l,b,h] * q[b,h];  enc (L,B,H), q (B,H) -> (B,L).
    Var attn_scores(Var enc, Var q) {
        const auto& E = val(enc);
        const auto& Q = val(q);
        if (E.rank() != 3 || Q.rank() != 2 || E.dim(1) != Q.dim(0) || E.dim(2) != Q.dim(1))
            opfail("attn_scores", E.shape, Q.shape);
        size_t L = E.dim(0), B = E.dim(1), H = E.dim(2);
        Tensor<T> out({B, L});
        for (size_t l = 0; l < L; ++l)
            for (size_t b = 0; b < B; ++b) {
                const T* e = &E.data[(l * B + b) * H];
                const T* qq = &Q.data[b * H];
                T s = 0;
                for (size_t h = 0; h < H; ++h) s += e[h] * qq[h];
                out.data[b * L + l] = s;
            }
        Var y = emit("attn_scores", std::move(out), {enc, q});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            const auto& Ev = t.val(enc);
            const auto& Qv = t.val(q);
            if (t.wants(enc)) {
                auto& ge = t.gbuf(enc);
                for (size_t l = 0; l < L; ++l)
                    for (size_t b = 0; b < B; ++b) {
                        T gv = g.data[b * L + l];
                        T* dst = &ge.data[(l * B + b) * H];
                        const T* qq = &Qv.data[b * H];
                        for (size_t h = 0; h < H; ++h) dst[h] += gv * qq[h];
                    }
            }
            if (t.wants(q)) {
                auto& gq = t.gbuf(q);
                for (size_t l = 0; l < L; ++l)
                    for (size_t b = 0; b < B; ++b) {
                        T gv = g.data[b * L + l];
                        const T* e = &Ev.data[(l * B + b) * H];
                        T* dst = &gq.data[b * H];
                        for (size_t h = 0; h < H; ++h) dst[h] += gv * e[h];
                    }
            }
        });
        return y;
    }

    // c[b,h] = sum_l w[b,l] * enc[l,b,h];  enc (L,B,H), w (B,L) -> (B,H).
    Var attn_context(Var enc, Var w) {
        const auto& E = val(enc);
        const auto& W = val(w);
        if (E.rank() != 3 || W.rank() != 2 || E.dim(1) != W.dim(0) || E.dim(0) != W.dim(1))
            opfail("attn_context", E.shape, W.shape);
        size_t L = E.dim(0), B = E.dim(1), H = E.dim(2);
        Tensor<T> out({B, H});
        for (size_t l = 0; l < L; ++l)
            for (size_t b = 0; b < B; ++b) {
                T wv = W.data[b * L + l];
                const T* e = &E.data[(l * B + b) * H];
                T* dst = &out.data[b * H];
                for (size_t h = 0; h < H; ++h) dst[h] += wv * e[h];
            }
        Var y = emit("attn_context", std::move(out), {enc, w});
        record(y, [=](Tape& t) {
            const auto& g = t.node(y).grad;
            const auto& Ev = t.val(enc);
            const auto& Wv = t.val(w);
            if (t.wants(enc)) {
                auto& ge = t.gbuf(enc);
                for (size_t l = 0; l < L; ++l)
                    for (size_t b = 0; b < B; ++b) {
                        T wv = Wv.data[b * L + l];
                        const T* gr = &g.data[b * H];
                        T* dst = &ge.data[(l * B + b) * H];
                        for (size_t h = 0; h < H; ++h) dst[h] += wv * gr[h];
                    }
            }
            if (t.wants(w)) {
                auto& gw = t.gbuf(w);
                for (size_t l = 0; l < L; ++l)
                    for (size_t b = 0; b < B; ++b) {
                        const T* e = &Ev.data[(l * B + b) * H];
                        const T* gr = &g.data[b * H];
                        T s = 0;
                        for (size_t h = 0; h < H; ++h) s += e[h] * gr[h];
                        gw.data[b * L + l] += s;
                    }
            }
        });
        return y;
    }

    // ---- backward ----------------------------------------------------------

    void backward(Var loss) {
        auto& ln = node(loss);
        if (ln.value.numel() != 1)
            throw std::runtime_error("backward: loss must be scalar, got shape " + shape_str(ln.value.shape));
        gbuf(loss).data[0] = T(1);
        for (int32_t i = loss.id; i >= 0; --i) {
            auto& n = nodes_[size_t(i)];
            if (n.back && n.grad.numel() != 0) n.back(*this);
        }
    }

    const Tensor<T>& grad(Var v) {
        return gbuf(v); // zeros if never touched
    }

    // Gradients for every registered leaf; untouched leaves get zeros.
    std::map<std::string, Tensor<T>> gradients() {
        std::map<std::string, Tensor<T>> out;
        for (const auto& [name, id] : leaves_) out[name] = gbuf(Var{id});
        return out;
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad; // empty until needed
        std::function<void(Tape&)> back;
        bool needs_grad = false;
        int leaf_index = -1;
    };

    std::vector<Node> nodes_;
    std::vector<std::pair<std::string, int32_t>> leaves_;

    Node& node(Var v) { return nodes_.at(size_t(v.id)); }
    const Tensor<T>& val(Var v) const { return nodes_.at(size_t(v.id)).value; }
    bool wants(Var v) const { return nodes_[size_t(v.id)].needs_grad; }

    Tensor<T>& gbuf(Var v) {
        auto& n = node(v);
        if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }

    Var push(Tensor<T> value, bool needs_grad) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return Var{int32_t(nodes_.size() - 1)};
    }

    Var emit(const char* op, Tensor<T> value, const std::vector<Var>& inputs) {
        check_finite(op, value);
        bool ng = false;
        for (Var in : inputs) ng = ng || wants(in);
        return push(std::move(value), ng);
    }

    void record(Var y, std::function<void(Tape&)> back) {
        auto& n = node(y);
        if (n.needs_grad) n.back = std::move(back);
    }

    std::function<void(Tape&)> softmax_backward(Var y, Var a, size_t m, size_t n) {
        return [=](Tape& t) {
            const auto& g = t.node(y).grad;
            const auto& yv = t.node(y).value;
            if (!t.wants(a)) return;
            auto& ga = t.gbuf(a);
            for (size_t i = 0; i < m; ++i) {
                T dot = 0;
                for (size_t j = 0; j < n; ++j) dot += g.data[i * n + j] * yv.data[i * n + j];
                for (size_t j = 0; j < n; ++j)
                    ga.data[i * n + j] += yv.data[i * n + j] * (g.data[i * n + j] - dot);
            }
        };
    }

    [[noreturn]] static void opfail(const char* op, const Shape& a, const Shape& b) {
        throw std::runtime_error(std::string("op '") + op + "': incompatible shapes " + shape_str(a) + " and " +
                                 shape_str(b));
    }
};

// Central finite differences against reverse-mode gradients. f must be a
// deterministic scalar function of x built on one tape (dropout off).
// Returns the max over elements of |analytic-numeric| / max(|a|,|n|,1e-8).
template <typename F>
double grad_check(F&& f, const Tensor<double>& x, double eps = 1e-5) {
    Tensor<double> analytic;
    {
        Tape<double> tape;
        Var xv = tape.leaf("x", x);
        Var loss = f(tape, xv);
        tape.backward(loss);
        analytic = tape.grad(xv);
    }
    auto eval = [&](const Tensor<double>& xt) {
        Tape<double> tape;
        Var xv = tape.leaf("x", xt);
        return tape.value(f(tape, xv)).item();
    };
    double max_err = 0.0;
    Tensor<double> xt = x;
    for (size_t i = 0; i < x.numel(); ++i) {
        double orig = xt.data[i];
        xt.data[i] = orig + eps;
        double fp = eval(xt);
        xt.data[i] = orig - eps;
        double fm = eval(xt);
        xt.data[i] = orig;
        double numeric = (fp - fm) / (2.0 * eps);
        double a = analytic.data[i];
        double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace distillforge
