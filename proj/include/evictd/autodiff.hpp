// Copyright (C) 2026 The evictd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <vector>

#include "evictd/numerics.hpp"
#include "evictd/tensor.hpp"

// Tape-based reverse-mode differentiation over 64-bit tensors. Every op records its output value and
// a closure that scatters the output gradient into its inputs; backward() replays the closures in
// exact reverse execution order. No graph optimisation of any kind.

namespace evictd::ad {

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Tensor& grad() const;
    const Shape& shape() const {
        return value().shape();
    }
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value) {
        return push(std::move(value), false, nullptr);
    }

    Var parameter(Tensor value) {
        return push(std::move(value), true, nullptr);
    }

    /// Records an op output. The output requires grad iff any input does; fn is dropped otherwise.
    Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
        bool needs = false;
        for (const Var& in : inputs) {
            needs = needs || m_nodes[in.id].requires_grad;
        }
        return push(std::move(value), needs, needs ? std::move(fn) : Backward{});
    }

    const Tensor& value(Var v) const {
        return m_nodes[v.id].value;
    }

    bool requires_grad(Var v) const {
        return m_nodes[v.id].requires_grad;
    }

    /// Gradient of a node after backward(); zeros if nothing flowed into it.
    const Tensor& grad(Var v) {
        Node& n = m_nodes[v.id];
        if (n.grad.shape() != n.value.shape()) {
            n.grad = Tensor(n.value.shape());
        }
        return n.grad;
    }

    /// Mutable gradient buffer for accumulation, or nullptr when v does not require grad.
    Tensor* grad_slot(Var v) {
        Node& n = m_nodes[v.id];
        if (!n.requires_grad) {
            return nullptr;
        }
        if (n.grad.shape() != n.value.shape()) {
            n.grad = Tensor(n.value.shape());
        }
        return &n.grad;
    }

    void accumulate(Var v, const Tensor& g) {
        Tensor* slot = grad_slot(v);
        if (slot == nullptr) {
            return;
        }
        EVICTD_CHECK(g.size() == slot->size(), DimensionError, "gradient shape does not match value shape");
        for (std::size_t i = 0; i < g.size(); ++i) {
            (*slot)[i] += g[i];
        }
    }

    void backward(Var loss) {
        EVICTD_CHECK(m_nodes[loss.id].value.size() == 1, DimensionError, "backward() needs a scalar output");
        for (auto& n : m_nodes) {
            n.grad = Tensor();
        }
        Tensor seed(m_nodes[loss.id].value.shape());
        seed[0] = 1.0;
        m_nodes[loss.id].grad = seed;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            Node& n = m_nodes[id];
            if (!n.backward || n.grad.shape() != n.value.shape()) {
                continue;
            }
            n.backward(*this, n.grad);
        }
    }

    std::size_t size() const {
        return m_nodes.size();
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(Tensor value, bool requires_grad, Backward fn) {
        m_nodes.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(fn)});
        return Var{this, m_nodes.size() - 1};
    }

    std::deque<Node> m_nodes;
};

inline const Tensor& Var::value() const {
    return tape->value(*this);
}

inline const Tensor& Var::grad() const {
    return tape->grad(*this);
}

// ---------------------------------------------------------------------------------------------
// Elementwise and linear-algebra ops

inline Var add(Var a, Var b) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    EVICTD_CHECK(x.shape() == y.shape(), DimensionError, "add: shape mismatch");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] + y[i];
    }
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

inline Var mul(Var a, Var b) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    EVICTD_CHECK(x.shape() == y.shape(), DimensionError, "mul: shape mismatch");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * y[i];
    }
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        const Tensor& x = t.value(a);
        const Tensor& y = t.value(b);
        if (Tensor* ga = t.grad_slot(a)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*ga)[i] += g[i] * y[i];
            }
        }
        if (Tensor* gb = t.grad_slot(b)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*gb)[i] += g[i] * x[i];
            }
        }
    });
}

inline Var scale(Var a, double c) {
    Tensor out = a.value();
    for (auto& x : out.storage()) {
        x *= c;
    }
    return a.tape->record(std::move(out), {a}, [a, c](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_slot(a)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*ga)[i] += c * g[i];
            }
        }
    });
}

/// x [n x m] + bias [m] broadcast over rows.
inline Var add_bias(Var x, Var bias) {
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    const std::size_t m = xv.cols();
    EVICTD_CHECK(bv.size() == m, DimensionError, "add_bias: bias length mismatch");
    Tensor out = xv;
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            out[i * m + j] += bv[j];
        }
    }
    return x.tape->record(std::move(out), {x, bias}, [x, bias, m](Tape& t, const Tensor& g) {
        t.accumulate(x, g);
        if (Tensor* gb = t.grad_slot(bias)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*gb)[i % m] += g[i];
            }
        }
    });
}

inline Var matmul(Var a, Var b) {
    Tensor out = evictd::matmul(a.value(), b.value());
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
        if (Tensor* ga = t.grad_slot(a)) {
            // dA = G B^T
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += g[i * n + j] * bv[p * n + j];
                    }
                    (*ga)[i * k + p] += acc;
                }
            }
        }
        if (Tensor* gb = t.grad_slot(b)) {
            // dB = A^T G
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) {
                        (*gb)[p * n + j] += aip * g[i * n + j];
                    }
                }
            }
        }
    });
}

inline Var transpose(Var a) {
    Tensor out = evictd::transpose(a.value());
    return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
        t.accumulate(a, evictd::transpose(g));
    });
}

inline Var sigmoid(Var a) {
    Tensor out = activation(a.value(), ActivationKind::sigmoid);
    Tensor saved = out;
    return a.tape->record(std::move(out), {a}, [a, saved = std::move(saved)](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_slot(a)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*ga)[i] += g[i] * saved[i] * (1.0 - saved[i]);
            }
        }
    });
}

inline Var swish(Var a) {
    Tensor out = activation(a.value(), ActivationKind::swish);
    return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_slot(a)) {
            const Tensor& x = t.value(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double s = evictd::sigmoid(x[i]);
                (*ga)[i] += g[i] * (s + x[i] * s * (1.0 - s));
            }
        }
    });
}

inline Var relu(Var a) {
    Tensor out = a.value();
    for (auto& x : out.storage()) {
        x = x > 0.0 ? x : 0.0;
    }
    return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_slot(a)) {
            const Tensor& x = t.value(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*ga)[i] += x[i] > 0.0 ? g[i] : 0.0;
            }
        }
    });
}

/// Same data, new shape.
inline Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
    });
}

/// Copies rows [begin, begin+count) of x [n x m].
inline Var slice_rows(Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = x.value();
    const std::size_t m = xv.cols();
    EVICTD_CHECK(begin + count <= xv.rows(), DimensionError, "slice_rows: range out of bounds");
    Tensor out({count, m});
    std::copy_n(xv.data().data() + begin * m, count * m, out.data().data());
    return x.tape->record(std::move(out), {x}, [x, begin, count, m](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_slot(x)) {
            for (std::size_t i = 0; i < count * m; ++i) {
                (*gx)[begin * m + i] += g[i];
            }
        }
    });
}

/// Constant left factor: c [p x n] times x [n x m].
inline Var left_matmul(const Tensor& c, Var x) {
    Tensor out = evictd::matmul(c, x.value());
    return x.tape->record(std::move(out), {x}, [c, x](Tape& t, const Tensor& g) {
        if (t.requires_grad(x)) {
            t.accumulate(x, evictd::matmul(evictd::transpose(c), g));
        }
    });
}

inline Var sum(Var a) {
    double acc = 0.0;
    for (double x : a.value().storage()) {
        acc += x;
    }
    return a.tape->record(Tensor({1}, {acc}), {a}, [a](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_slot(a)) {
            for (auto& x : ga->storage()) {
                x += g[0];
            }
        }
    });
}

/// sum(a * w) for a constant weight tensor; handy for projecting outputs to a scalar in gradient checks.
inline Var weighted_sum(Var a, const Tensor& w) {
    EVICTD_CHECK(a.value().size() == w.size(), DimensionError, "weighted_sum: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        acc += a.value()[i] * w[i];
    }
    return a.tape->record(Tensor({1}, {acc}), {a}, [a, w](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_slot(a)) {
            for (std::size_t i = 0; i < w.size(); ++i) {
                (*ga)[i] += g[0] * w[i];
            }
        }
    });
}

/// Row-wise RMS normalisation with a learned gain: y = x / rms(x) * gain.
inline Var rmsnorm(Var x, Var gain, double eps = 1e-6) {
    const Tensor& xv = x.value();
    const std::size_t n = xv.rows(), m = xv.cols();
    EVICTD_CHECK(gain.value().size() == m, DimensionError, "rmsnorm: gain length mismatch");
    Tensor out(xv.shape());
    std::vector<double> inv(n);
    for (std::size_t i = 0; i < n; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            ss += xv[i * m + j] * xv[i * m + j];
        }
        inv[i] = 1.0 / std::sqrt(ss / static_cast<double>(m) + eps);
        for (std::size_t j = 0; j < m; ++j) {
            out[i * m + j] = xv[i * m + j] * inv[i] * gain.value()[j];
        }
    }
    return x.tape->record(std::move(out), {x, gain}, [x, gain, inv, n, m](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        const Tensor& gv = t.value(gain);
        Tensor* gx = t.grad_slot(x);
        Tensor* gg = t.grad_slot(gain);
        for (std::size_t i = 0; i < n; ++i) {
            double proj = 0.0;  // sum_j g_j * gain_j * x_j
            for (std::size_t j = 0; j < m; ++j) {
                proj += g[i * m + j] * gv[j] * xv[i * m + j];
                if (gg) {
                    (*gg)[j] += g[i * m + j] * xv[i * m + j] * inv[i];
                }
            }
            if (gx) {
                const double c = inv[i] * inv[i] * inv[i] * proj / static_cast<double>(m);
                for (std::size_t j = 0; j < m; ++j) {
                    (*gx)[i * m + j] += g[i * m + j] * gv[j] * inv[i] - c * xv[i * m + j];
                }
            }
        }
    });
}

/// L2-normalises each head slice of width head_dim in every row of x [T x heads*head_dim].
inline Var l2norm_heads(Var x, std::size_t head_dim, double eps = 1e-6) {
    const Tensor& xv = x.value();
    const std::size_t cols = xv.cols();
    EVICTD_CHECK(head_dim > 0 && cols % head_dim == 0, DimensionError, "l2norm_heads: width not divisible by head_dim");
    const std::size_t groups = xv.size() / head_dim;
    Tensor out(xv.shape());
    std::vector<double> inv(groups);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        double ss = 0.0;
        for (std::size_t j = 0; j < head_dim; ++j) {
            ss += xv[gi * head_dim + j] * xv[gi * head_dim + j];
        }
        inv[gi] = 1.0 / std::sqrt(ss + eps);
        for (std::size_t j = 0; j < head_dim; ++j) {
            out[gi * head_dim + j] = xv[gi * head_dim + j] * inv[gi];
        }
    }
    return x.tape->record(std::move(out), {x}, [x, inv, head_dim, groups](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_slot(x);
        const Tensor& xv = t.value(x);
        for (std::size_t gi = 0; gi < groups; ++gi) {
            double proj = 0.0;
            for (std::size_t j = 0; j < head_dim; ++j) {
                proj += g[gi * head_dim + j] * xv[gi * head_dim + j];
            }
            const double c = inv[gi] * inv[gi] * inv[gi] * proj;
            for (std::size_t j = 0; j < head_dim; ++j) {
                (*gx)[gi * head_dim + j] += g[gi * head_dim + j] * inv[gi] - c * xv[gi * head_dim + j];
            }
        }
    });
}

/// Gathers rows of table [V x D] for each id.
inline Var embedding(Var table, const std::vector<int>& ids) {
    const Tensor& tv = table.value();
    const std::size_t d = tv.cols();
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        EVICTD_CHECK(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < tv.rows(),
                     ParameterError,
                     "embedding: token id out of range");
        std::copy_n(tv.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data().data() + i * d);
    }
    return table.tape->record(std::move(out), {table}, [table, ids, d](Tape& t, const Tensor& g) {
        if (Tensor* gt = t.grad_slot(table)) {
            for (std::size_t i = 0; i < ids.size(); ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    (*gt)[static_cast<std::size_t>(ids[i]) * d + j] += g[i * d + j];
                }
            }
        }
    });
}

/**
 * Mean softmax cross-entropy over the rows of logits [n x V] whose target is >= 0. Rows with a
 * negative target are ignored.
 */
inline Var cross_entropy(Var logits, const std::vector<int>& targets) {
    const Tensor& lv = logits.value();
    const std::size_t n = lv.rows(), vocab = lv.cols();
    EVICTD_CHECK(targets.size() == n, DimensionError, "cross_entropy: one target per row required");
    Tensor probs(lv.shape());
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] < 0) {
            continue;
        }
        const double* row = lv.data().data() + i * vocab;
        const double mx = *std::max_element(row, row + vocab);
        double denom = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            probs[i * vocab + j] = std::exp(row[j] - mx);
            denom += probs[i * vocab + j];
        }
        for (std::size_t j = 0; j < vocab; ++j) {
            probs[i * vocab + j] /= denom;
        }
        total += -(row[targets[i]] - mx - std::log(denom));
        ++counted;
    }
    const double norm = counted ? 1.0 / static_cast<double>(counted) : 0.0;
    return logits.tape->record(
        Tensor({1}, {total * norm}), {logits}, [logits, targets, probs, norm, vocab](Tape& t, const Tensor& g) {
            Tensor* gl = t.grad_slot(logits);
            for (std::size_t i = 0; i < targets.size(); ++i) {
                if (targets[i] < 0) {
                    continue;
                }
                for (std::size_t j = 0; j < vocab; ++j) {
                    const double y = static_cast<int>(j) == targets[i] ? 1.0 : 0.0;
                    (*gl)[i * vocab + j] += g[0] * norm * (probs[i * vocab + j] - y);
                }
            }
        });
}

/// Differentiable grouped dilated conv over x [C_in x T].
inline Var conv1d(Var x,
                  Var weight,
                  Var bias,
                  std::size_t groups,
                  std::size_t dilation,
                  std::size_t left_pad,
                  std::size_t right_pad) {
    ConvParams p{weight.value(), bias.value(), groups};
    Tensor out = grouped_dilated_conv1d(x.value(), p, dilation, left_pad, right_pad);
    return x.tape->record(
        std::move(out), {x, weight, bias}, [=](Tape& t, const Tensor& g) {
            const Tensor& xv = t.value(x);
            const Tensor& wv = t.value(weight);
            const std::size_t length = xv.shape().back();
            const std::size_t out_ch = wv.dim(0), in_pg = wv.dim(1), k = wv.dim(2);
            const std::size_t out_len = g.shape().back();
            const std::size_t out_pg = out_ch / groups;
            Tensor* gx = t.grad_slot(x);
            Tensor* gw = t.grad_slot(weight);
            Tensor* gb = t.grad_slot(bias);
            for (std::size_t o = 0; o < out_ch; ++o) {
                const std::size_t grp = o / out_pg;
                for (std::size_t tt = 0; tt < out_len; ++tt) {
                    const double go = g[o * out_len + tt];
                    if (go == 0.0) {
                        continue;
                    }
                    if (gb) {
                        (*gb)[o] += go;
                    }
                    for (std::size_t c = 0; c < in_pg; ++c) {
                        const std::size_t ic = grp * in_pg + c;
                        for (std::size_t tap = 0; tap < k; ++tap) {
                            const long long src =
                                static_cast<long long>(tt + tap * dilation) - static_cast<long long>(left_pad);
                            if (src < 0 || src >= static_cast<long long>(length)) {
                                continue;
                            }
                            const std::size_t widx = (o * in_pg + c) * k + tap;
                            const std::size_t xidx = ic * length + static_cast<std::size_t>(src);
                            if (gw) {
                                (*gw)[widx] += go * xv[xidx];
                            }
                            if (gx) {
                                (*gx)[xidx] += go * wv[widx];
                            }
                        }
                    }
                }
            }
        });
}

/// Inverted dropout on the tape; the sampled mask is replayed in backward.
inline Var dropout(Var x, double p, Mode mode, std::uint64_t seed) {
    EVICTD_CHECK(p >= 0.0 && p < 1.0, ParameterError, "dropout: p must lie in [0, 1)");
    if (mode == Mode::eval || p == 0.0) {
        return x;
    }
    Tensor ones = Tensor::filled(x.shape(), 1.0);
    Tensor mask = evictd::dropout(ones, p, mode, seed);
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= mask[i];
    }
    return x.tape->record(std::move(out), {x}, [x, mask](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_slot(x)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                (*gx)[i] += g[i] * mask[i];
            }
        }
    });
}

/// Multiplies row i of x [n x m] by column `col` of gates [n x k].
inline Var scale_rows(Var x, Var gates, std::size_t col) {
    const Tensor& xv = x.value();
    const Tensor& gv = gates.value();
    const std::size_t n = xv.rows(), m = xv.cols(), k = gv.cols();
    EVICTD_CHECK(gv.rows() == n && col < k, DimensionError, "scale_rows: gate shape mismatch");
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            out[i * m + j] = gv[i * k + col] * xv[i * m + j];
        }
    }
    return x.tape->record(std::move(out), {x, gates}, [x, gates, col, n, m, k](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        const Tensor& gv = t.value(gates);
        Tensor* gx = t.grad_slot(x);
        Tensor* gg = t.grad_slot(gates);
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                if (gx) {
                    (*gx)[i * m + j] += g[i * m + j] * gv[i * k + col];
                }
                acc += g[i * m + j] * xv[i * m + j];
            }
            if (gg) {
                (*gg)[i * k + col] += acc;
            }
        }
    });
}

/// Copies columns [begin, begin+count) of x [n x m].
inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = x.value();
    const std::size_t n = xv.rows(), m = xv.cols();
    EVICTD_CHECK(begin + count <= m, DimensionError, "slice_cols: range out of bounds");
    Tensor out({n, count});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < count; ++j) {
            out[i * count + j] = xv[i * m + begin + j];
        }
    }
    return x.tape->record(std::move(out), {x}, [x, begin, count, n, m](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_slot(x)) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < count; ++j) {
                    (*gx)[i * m + begin + j] += g[i * count + j];
                }
            }
        }
    });
}

/// Row-wise concatenation of the columns of a [n x p] and b [n x q].
inline Var concat_cols(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t n = av.rows(), p = av.cols(), q = bv.cols();
    EVICTD_CHECK(bv.rows() == n, DimensionError, "concat_cols: row count mismatch");
    Tensor out({n, p + q});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(av.data().data() + i * p, p, out.data().data() + i * (p + q));
        std::copy_n(bv.data().data() + i * q, q, out.data().data() + i * (p + q) + p);
    }
    return a.tape->record(std::move(out), {a, b}, [a, b, n, p, q](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_slot(a);
        Tensor* gb = t.grad_slot(b);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < p; ++j) {
                if (ga) {
                    (*ga)[i * p + j] += g[i * (p + q) + j];
                }
            }
            for (std::size_t j = 0; j < q; ++j) {
                if (gb) {
                    (*gb)[i * q + j] += g[i * (p + q) + p + j];
                }
            }
        }
    });
}

}  // namespace evictd::ad
