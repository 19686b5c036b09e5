#include "forgetbench/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "forgetbench/error.hpp"

namespace forgetbench::ops {

namespace {

void expect_shape(bool ok, const char* op, const std::string& detail) {
    if (!ok) {
        throw ShapeError(std::string(op) + ": " + detail);
    }
}

void expect_matrix(const Tensor& t, const char* op, const char* name) {
    expect_shape(t.rank() == 2, op, std::string(name) + " must be a matrix, got " + shape_string(t.shape()));
}

// Rows and columns of a tensor viewed as a matrix; vectors are one row.
std::pair<std::size_t, std::size_t> as_rows(const Tensor& t, const char* op) {
    if (t.rank() == 1) {
        return {1, t.dim(0)};
    }
    expect_matrix(t, op, "input");
    return {t.dim(0), t.dim(1)};
}

void expect_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    expect_shape(a.shape() == b.shape(), op,
                 "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// Stable log-sum-exp of values[i] * inv_t.
double log_sum_exp(std::span<const double> values, double inv_t) {
    double hi = -std::numeric_limits<double>::infinity();
    for (double v : values) {
        hi = std::max(hi, v * inv_t);
    }
    double acc = 0.0;
    for (double v : values) {
        acc += std::exp(v * inv_t - hi);
    }
    return hi + std::log(acc);
}

template <typename Fn>
Tensor unary(Tape& tape, const char* name, const Tensor& x, Fn forward_fn, double (*derivative)(double x, double y)) {
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = forward_fn(in[i]);
    }
    return tape.record(name, x.shape(), std::move(out), {&x}, [x, derivative](const detail::TensorNode& o) {
        double* gx = grad_sink(x);
        if (gx == nullptr) {
            return;
        }
        const auto in = x.data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            gx[i] += o.grad[i] * derivative(in[i], o.value[i]);
        }
    });
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    expect_matrix(a, "matmul", "a");
    expect_matrix(b, "matmul", "b");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    expect_shape(b.dim(0) == k, "matmul",
                 "inner dimensions differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) {
                out[i * n + j] += aip * bv[p * n + j];
            }
        }
    }
    return tape.record("matmul", {m, n}, std::move(out), {&a, &b}, [a, b, m, k, n](const detail::TensorNode& o) {
        const auto av = a.data();
        const auto bv = b.data();
        const auto& g = o.grad;
        if (double* ga = grad_sink(a)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += g[i * n + j] * bv[p * n + j];
                    }
                    ga[i * k + p] += acc;
                }
            }
        }
        if (double* gb = grad_sink(b)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) {
                        gb[p * n + j] += aip * g[i * n + j];
                    }
                }
            }
        }
    });
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
    expect_matrix(a, "matmul_nt", "a");
    expect_matrix(b, "matmul_nt", "b");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    expect_shape(b.dim(1) == k, "matmul_nt",
                 "inner dimensions differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
    std::vector<double> out(m * n);
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += av[i * k + p] * bv[j * k + p];
            }
            out[i * n + j] = acc;
        }
    }
    return tape.record("matmul_nt", {m, n}, std::move(out), {&a, &b}, [a, b, m, k, n](const detail::TensorNode& o) {
        const auto av = a.data();
        const auto bv = b.data();
        const auto& g = o.grad;
        double* ga = grad_sink(a);
        double* gb = grad_sink(b);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double gij = g[i * n + j];
                if (gij == 0.0) {
                    continue;
                }
                for (std::size_t p = 0; p < k; ++p) {
                    if (ga != nullptr) {
                        ga[i * k + p] += gij * bv[j * k + p];
                    }
                    if (gb != nullptr) {
                        gb[j * k + p] += gij * av[i * k + p];
                    }
                }
            }
        }
    });
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
    expect_matrix(weight, "linear", "weight");
    const auto [n, in] = as_rows(x, "linear");
    const std::size_t out_dim = weight.dim(0);
    expect_shape(weight.dim(1) == in, "linear",
                 "input width " + std::to_string(in) + " vs weight " + shape_string(weight.shape()));
    if (bias.defined()) {
        expect_shape(bias.rank() == 1 && bias.dim(0) == out_dim, "linear",
                     "bias " + shape_string(bias.shape()) + " vs weight " + shape_string(weight.shape()));
    }
    std::vector<double> out(n * out_dim);
    const auto xv = x.data();
    const auto wv = weight.data();
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = xv.data() + r * in;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const double* wo = wv.data() + o * in;
            double acc = bias.defined() ? bias.data()[o] : 0.0;
            for (std::size_t p = 0; p < in; ++p) {
                acc += xr[p] * wo[p];
            }
            out[r * out_dim + o] = acc;
        }
    }
    Shape shape = x.rank() == 1 ? Shape{out_dim} : Shape{n, out_dim};
    return tape.record("linear", std::move(shape), std::move(out), {&x, &weight, &bias},
                       [x, weight, bias, n = n, in = in, out_dim](const detail::TensorNode& o) {
                           const auto xv = x.data();
                           const auto wv = weight.data();
                           const auto& g = o.grad;
                           double* gx = grad_sink(x);
                           double* gw = grad_sink(weight);
                           double* gb = bias.defined() ? grad_sink(bias) : nullptr;
                           for (std::size_t r = 0; r < n; ++r) {
                               for (std::size_t q = 0; q < out_dim; ++q) {
                                   const double gq = g[r * out_dim + q];
                                   if (gq == 0.0) {
                                       continue;
                                   }
                                   if (gb != nullptr) {
                                       gb[q] += gq;
                                   }
                                   const double* wq = wv.data() + q * in;
                                   const double* xr = xv.data() + r * in;
                                   if (gx != nullptr) {
                                       double* gxr = gx + r * in;
                                       for (std::size_t p = 0; p < in; ++p) {
                                           gxr[p] += gq * wq[p];
                                       }
                                   }
                                   if (gw != nullptr) {
                                       double* gwq = gw + q * in;
                                       for (std::size_t p = 0; p < in; ++p) {
                                           gwq[p] += gq * xr[p];
                                       }
                                   }
                               }
                           }
                       });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    expect_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] + bv[i];
    }
    return tape.record("add", a.shape(), std::move(out), {&a, &b}, [a, b](const detail::TensorNode& o) {
        for (const Tensor* t : {&a, &b}) {
            if (double* g = grad_sink(*t)) {
                for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    g[i] += o.grad[i];
                }
            }
        }
    });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    expect_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] - bv[i];
    }
    return tape.record("sub", a.shape(), std::move(out), {&a, &b}, [a, b](const detail::TensorNode& o) {
        if (double* g = grad_sink(a)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i];
            }
        }
        if (double* g = grad_sink(b)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] -= o.grad[i];
            }
        }
    });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    expect_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * bv[i];
    }
    return tape.record("mul", a.shape(), std::move(out), {&a, &b}, [a, b](const detail::TensorNode& o) {
        const auto av = a.data();
        const auto bv = b.data();
        if (double* g = grad_sink(a)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * bv[i];
            }
        }
        if (double* g = grad_sink(b)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * av[i];
            }
        }
    });
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
    std::vector<double> out(x.numel());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] * factor;
    }
    return tape.record("scale", x.shape(), std::move(out), {&x}, [x, factor](const detail::TensorNode& o) {
        if (double* g = grad_sink(x)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * factor;
            }
        }
    });
}

Tensor add_n(Tape& tape, std::span<const Tensor> terms) {
    expect_shape(!terms.empty(), "add_n", "needs at least one term");
    for (const Tensor& t : terms) {
        expect_same_shape(terms.front(), t, "add_n");
    }
    std::vector<double> out(terms.front().numel(), 0.0);
    for (const Tensor& t : terms) {
        const auto v = t.data();
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += v[i];
        }
    }
    std::vector<Tensor> kept(terms.begin(), terms.end());
    return tape.record("add_n", terms.front().shape(), std::move(out), terms,
                       [kept](const detail::TensorNode& o) {
                           for (const Tensor& t : kept) {
                               if (double* g = grad_sink(t)) {
                                   for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                       g[i] += o.grad[i];
                                   }
                               }
                           }
                       });
}

Tensor mul_rows(Tape& tape, const Tensor& x, const Tensor& gate) {
    const auto [n, m] = as_rows(x, "mul_rows");
    expect_shape(gate.rank() == 1 && gate.dim(0) == m, "mul_rows",
                 "gate " + shape_string(gate.shape()) + " vs rows of width " + std::to_string(m));
    std::vector<double> out(n * m);
    const auto xv = x.data();
    const auto gv = gate.data();
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < m; ++c) {
            out[r * m + c] = xv[r * m + c] * gv[c];
        }
    }
    return tape.record("mul_rows", x.shape(), std::move(out), {&x, &gate},
                       [x, gate, n = n, m = m](const detail::TensorNode& o) {
                           const auto xv = x.data();
                           const auto gv = gate.data();
                           double* gx = grad_sink(x);
                           double* gg = grad_sink(gate);
                           for (std::size_t r = 0; r < n; ++r) {
                               for (std::size_t c = 0; c < m; ++c) {
                                   const double g = o.grad[r * m + c];
                                   if (gx != nullptr) {
                                       gx[r * m + c] += g * gv[c];
                                   }
                                   if (gg != nullptr) {
                                       gg[c] += g * xv[r * m + c];
                                   }
                               }
                           }
                       });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
    return unary(
        tape, "sigmoid", x,
        [](double v) {
            if (v >= 0) {
                return 1.0 / (1.0 + std::exp(-v));
            }
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(Tape& tape, const Tensor& x) {
    return unary(
        tape, "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(Tape& tape, const Tensor& x) {
    return unary(
        tape, "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor dropout(Tape& tape, const Tensor& x, double p, bool training, Rng* rng) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
    }
    if (!training || p == 0.0) {
        return x;
    }
    if (rng == nullptr) {
        throw StateError("dropout in training mode needs a random source");
    }
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (double& m : mask) {
        m = rng->uniform() >= p ? keep_scale : 0.0;
    }
    std::vector<double> out(x.numel());
    const auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] * mask[i];
    }
    return tape.record("dropout", x.shape(), std::move(out), {&x},
                       [x, mask = std::move(mask)](const detail::TensorNode& o) {
                           if (double* g = grad_sink(x)) {
                               for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                   g[i] += o.grad[i] * mask[i];
                               }
                           }
                       });
}

Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const int> ids) {
    expect_matrix(table, "embedding_lookup", "table");
    expect_shape(!ids.empty(), "embedding_lookup", "needs at least one id");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    std::vector<std::size_t> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw IndexError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
        }
        rows[i] = static_cast<std::size_t>(ids[i]);
    }
    std::vector<double> out(ids.size() * d);
    const auto tv = table.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return tape.record("embedding_lookup", {ids.size(), d}, std::move(out), {&table},
                       [table, rows = std::move(rows), d](const detail::TensorNode& o) {
                           double* g = grad_sink(table);
                           if (g == nullptr) {
                               return;
                           }
                           for (std::size_t i = 0; i < rows.size(); ++i) {
                               for (std::size_t c = 0; c < d; ++c) {
                                   g[rows[i] * d + c] += o.grad[i * d + c];
                               }
                           }
                       });
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const auto [n, d] = as_rows(x, "layer_norm");
    expect_shape(gamma.rank() == 1 && gamma.dim(0) == d && beta.shape() == gamma.shape(), "layer_norm",
                 "affine parameters must be [" + std::to_string(d) + "]");
    std::vector<double> out(n * d);
    std::vector<double> xhat(n * d);
    std::vector<double> inv_std(n);
    const auto xv = x.data();
    const auto gv = gamma.data();
    const auto bv = beta.data();
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            mu += xr[c];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            var += (xr[c] - mu) * (xr[c] - mu);
        }
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat[r * d + c] = (xr[c] - mu) * inv_std[r];
            out[r * d + c] = gv[c] * xhat[r * d + c] + bv[c];
        }
    }
    return tape.record("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
                       [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n = n,
                        d = d](const detail::TensorNode& o) {
                           const auto gv = gamma.data();
                           double* gx = grad_sink(x);
                           double* gg = grad_sink(gamma);
                           double* gb = grad_sink(beta);
                           std::vector<double> dxhat(d);
                           for (std::size_t r = 0; r < n; ++r) {
                               double sum_dxhat = 0.0;
                               double sum_dxhat_xhat = 0.0;
                               for (std::size_t c = 0; c < d; ++c) {
                                   const double g = o.grad[r * d + c];
                                   if (gg != nullptr) {
                                       gg[c] += g * xhat[r * d + c];
                                   }
                                   if (gb != nullptr) {
                                       gb[c] += g;
                                   }
                                   dxhat[c] = g * gv[c];
                                   sum_dxhat += dxhat[c];
                                   sum_dxhat_xhat += dxhat[c] * xhat[r * d + c];
                               }
                               if (gx == nullptr) {
                                   continue;
                               }
                               const double k = inv_std[r] / static_cast<double>(d);
                               for (std::size_t c = 0; c < d; ++c) {
                                   gx[r * d + c] += k * (static_cast<double>(d) * dxhat[c] - sum_dxhat -
                                                         xhat[r * d + c] * sum_dxhat_xhat);
                               }
                           }
                       });
}

Tensor softmax(Tape& tape, const Tensor& x) {
    const auto [n, m] = as_rows(x, "softmax");
    std::vector<double> out(n * m);
    const auto xv = x.data();
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = xv.subspan(r * m, m);
        const double lse = log_sum_exp(row, 1.0);
        for (std::size_t c = 0; c < m; ++c) {
            out[r * m + c] = std::exp(row[c] - lse);
        }
    }
    return tape.record("softmax", x.shape(), std::move(out), {&x}, [x, n = n, m = m](const detail::TensorNode& o) {
        double* g = grad_sink(x);
        if (g == nullptr) {
            return;
        }
        for (std::size_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
                dot += o.grad[r * m + c] * o.value[r * m + c];
            }
            for (std::size_t c = 0; c < m; ++c) {
                g[r * m + c] += o.value[r * m + c] * (o.grad[r * m + c] - dot);
            }
        }
    });
}

Tensor masked_mean_pool(Tape& tape, const Tensor& h, std::span<const int> mask) {
    expect_matrix(h, "masked_mean_pool", "h");
    const std::size_t len = h.dim(0), d = h.dim(1);
    expect_shape(mask.size() == len, "masked_mean_pool",
                 "mask length " + std::to_string(mask.size()) + " vs " + std::to_string(len) + " rows");
    std::size_t count = 0;
    for (int m : mask) {
        if (m != 0 && m != 1) {
            throw ShapeError("masked_mean_pool: mask entries must be 0 or 1");
        }
        count += static_cast<std::size_t>(m);
    }
    if (count == 0) {
        throw StateError("masked_mean_pool: empty sequence (mask is all zeros)");
    }
    const double inv = 1.0 / static_cast<double>(count);
    std::vector<double> out(d, 0.0);
    const auto hv = h.data();
    for (std::size_t r = 0; r < len; ++r) {
        if (mask[r] == 0) {
            continue;
        }
        for (std::size_t c = 0; c < d; ++c) {
            out[c] += hv[r * d + c];
        }
    }
    for (double& v : out) {
        v *= inv;
    }
    std::vector<int> kept(mask.begin(), mask.end());
    return tape.record("masked_mean_pool", {d}, std::move(out), {&h},
                       [h, kept = std::move(kept), d, inv](const detail::TensorNode& o) {
                           double* g = grad_sink(h);
                           if (g == nullptr) {
                               return;
                           }
                           for (std::size_t r = 0; r < kept.size(); ++r) {
                               if (kept[r] == 0) {
                                   continue;
                               }
                               for (std::size_t c = 0; c < d; ++c) {
                                   g[r * d + c] += o.grad[c] * inv;
                               }
                           }
                       });
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::size_t label) {
    const auto [n, classes] = as_rows(logits, "softmax_cross_entropy");
    expect_shape(n == 1, "softmax_cross_entropy", "expects one row of logits, got " + shape_string(logits.shape()));
    if (label >= classes) {
        throw IndexError("label " + std::to_string(label) + " outside " + std::to_string(classes) + " classes");
    }
    const auto zv = logits.data();
    const double lse = log_sum_exp(zv, 1.0);
    const double loss = lse - zv[label];
    return tape.record("softmax_cross_entropy", {1}, {loss}, {&logits},
                       [logits, label, lse](const detail::TensorNode& o) {
                           double* g = grad_sink(logits);
                           if (g == nullptr) {
                               return;
                           }
                           const auto zv = logits.data();
                           const double up = o.grad[0];
                           for (std::size_t c = 0; c < zv.size(); ++c) {
                               const double p = std::exp(zv[c] - lse);
                               g[c] += up * (p - (c == label ? 1.0 : 0.0));
                           }
                       });
}

Tensor kl_div_temperature(Tape& tape, const Tensor& z_old, const Tensor& z_new, double temperature) {
    expect_shape(z_old.numel() == z_new.numel(), "kl_div_temperature",
                 "logit counts differ: " + shape_string(z_old.shape()) + " vs " + shape_string(z_new.shape()));
    if (!(temperature > 0.0)) {
        throw ConfigError("distillation temperature must be positive");
    }
    const double inv_t = 1.0 / temperature;
    const auto ov = z_old.data();
    const auto nv = z_new.data();
    const double lse_old = log_sum_exp(ov, inv_t);
    const double lse_new = log_sum_exp(nv, inv_t);
    double kl = 0.0;
    for (std::size_t c = 0; c < ov.size(); ++c) {
        const double log_p_old = ov[c] * inv_t - lse_old;
        const double p_old = std::exp(log_p_old);
        if (p_old == 0.0) {
            continue;
        }
        kl += p_old * (log_p_old - (nv[c] * inv_t - lse_new));
    }
    // Rounding can leave a value just below zero for near-identical inputs.
    kl = std::max(kl, 0.0);
    return tape.record("kl_div_temperature", {1}, {kl}, {&z_new},
                       [z_old, z_new, inv_t, lse_old, lse_new](const detail::TensorNode& o) {
                           double* g = grad_sink(z_new);
                           if (g == nullptr) {
                               return;
                           }
                           const auto ov = z_old.data();
                           const auto nv = z_new.data();
                           const double up = o.grad[0] * inv_t;
                           for (std::size_t c = 0; c < nv.size(); ++c) {
                               const double p_new = std::exp(nv[c] * inv_t - lse_new);
                               const double p_old = std::exp(ov[c] * inv_t - lse_old);
                               g[c] += up * (p_new - p_old);
                           }
                       });
}

Tensor index_select(Tape& tape, const Tensor& x, std::span<const std::size_t> idx) {
    expect_shape(x.rank() == 1, "index_select", "input must be a vector, got " + shape_string(x.shape()));
    expect_shape(!idx.empty(), "index_select", "needs at least one index");
    std::vector<double> out(idx.size());
    const auto xv = x.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= xv.size()) {
            throw IndexError("index_select: index " + std::to_string(idx[i]) + " outside " +
                             std::to_string(xv.size()));
        }
        out[i] = xv[idx[i]];
    }
    std::vector<std::size_t> kept(idx.begin(), idx.end());
    return tape.record("index_select", {idx.size()}, std::move(out), {&x},
                       [x, kept = std::move(kept)](const detail::TensorNode& o) {
                           if (double* g = grad_sink(x)) {
                               for (std::size_t i = 0; i < kept.size(); ++i) {
                                   g[kept[i]] += o.grad[i];
                               }
                           }
                       });
}

Tensor sum(Tape& tape, const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) {
        total += v;
    }
    return tape.record("sum", {1}, {total}, {&x}, [x](const detail::TensorNode& o) {
        if (double* g = grad_sink(x)) {
            for (std::size_t i = 0; i < x.numel(); ++i) {
                g[i] += o.grad[0];
            }
        }
    });
}

Tensor mean(Tape& tape, const Tensor& x) { return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel())); }

Tensor gru_cell(Tape& tape, const Tensor& x, const Tensor& h_prev, const Tensor& weight_x, const Tensor& weight_h,
                const Tensor& bias) {
    expect_shape(h_prev.rank() == 1, "gru_cell", "h_prev must be a vector");
    expect_shape(x.rank() == 1 || (x.rank() == 2 && x.dim(0) == 1), "gru_cell",
                 "x must be a vector or a single row, got " + shape_string(x.shape()));
    const std::size_t d = x.numel(), u = h_prev.dim(0);
    expect_matrix(weight_x, "gru_cell", "weight_x");
    expect_matrix(weight_h, "gru_cell", "weight_h");
    expect_shape(weight_x.dim(0) == 3 * u && weight_x.dim(1) == d, "gru_cell",
                 "weight_x must be [" + std::to_string(3 * u) + "x" + std::to_string(d) + "], got " +
                     shape_string(weight_x.shape()));
    expect_shape(weight_h.dim(0) == 3 * u && weight_h.dim(1) == u, "gru_cell",
                 "weight_h must be [" + std::to_string(3 * u) + "x" + std::to_string(u) + "], got " +
                     shape_string(weight_h.shape()));
    expect_shape(bias.rank() == 1 && bias.dim(0) == 3 * u, "gru_cell",
                 "bias must be [" + std::to_string(3 * u) + "], got " + shape_string(bias.shape()));

    const auto xv = x.data();
    const auto hv = h_prev.data();
    const auto wx = weight_x.data();
    const auto wh = weight_h.data();
    const auto bv = bias.data();

    // cache: z, r, c, r*h
    std::vector<double> z(u), r(u), c(u), rh(u);
    auto input_part = [&](std::size_t row) {
        double acc = bv[row];
        const double* w = wx.data() + row * d;
        for (std::size_t p = 0; p < d; ++p) {
            acc += w[p] * xv[p];
        }
        return acc;
    };
    auto hidden_part = [&](std::size_t row, std::span<const double> h) {
        double acc = 0.0;
        const double* w = wh.data() + row * u;
        for (std::size_t p = 0; p < u; ++p) {
            acc += w[p] * h[p];
        }
        return acc;
    };
    auto sigm = [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
    for (std::size_t i = 0; i < u; ++i) {
        z[i] = sigm(input_part(i) + hidden_part(i, hv));
        r[i] = sigm(input_part(u + i) + hidden_part(u + i, hv));
        rh[i] = r[i] * hv[i];
    }
    std::vector<double> out(u);
    for (std::size_t i = 0; i < u; ++i) {
        c[i] = std::tanh(input_part(2 * u + i) + hidden_part(2 * u + i, rh));
        out[i] = (1.0 - z[i]) * hv[i] + z[i] * c[i];
    }
    return tape.record(
        "gru_cell", {u}, std::move(out), {&x, &h_prev, &weight_x, &weight_h, &bias},
        [x, h_prev, weight_x, weight_h, bias, z = std::move(z), r = std::move(r), c = std::move(c),
         rh = std::move(rh), d, u](const detail::TensorNode& o) {
            const auto xv = x.data();
            const auto hv = h_prev.data();
            const auto wx = weight_x.data();
            const auto wh = weight_h.data();
            const auto& g = o.grad;
            // Gradients of the three gate pre-activations, rows (z, r, c).
            std::vector<double> dpre(3 * u);
            std::vector<double> dh(u);
            for (std::size_t i = 0; i < u; ++i) {
                dpre[i] = g[i] * (c[i] - hv[i]) * z[i] * (1.0 - z[i]);
                dpre[2 * u + i] = g[i] * z[i] * (1.0 - c[i] * c[i]);
                dh[i] = g[i] * (1.0 - z[i]);
            }
            // Through U_c (r * h).
            std::vector<double> drh(u, 0.0);
            for (std::size_t i = 0; i < u; ++i) {
                const double dc = dpre[2 * u + i];
                const double* w = wh.data() + (2 * u + i) * u;
                for (std::size_t p = 0; p < u; ++p) {
                    drh[p] += w[p] * dc;
                }
            }
            for (std::size_t i = 0; i < u; ++i) {
                dpre[u + i] = drh[i] * hv[i] * r[i] * (1.0 - r[i]);
                dh[i] += drh[i] * r[i];
            }
            for (std::size_t i = 0; i < 2 * u; ++i) {
                const double* w = wh.data() + i * u;
                for (std::size_t p = 0; p < u; ++p) {
                    dh[p] += w[p] * dpre[i];
                }
            }
            if (double* gwh = grad_sink(weight_h)) {
                for (std::size_t i = 0; i < 3 * u; ++i) {
                    const auto& src = i < 2 * u ? hv : std::span<const double>(rh);
                    double* row = gwh + i * u;
                    for (std::size_t p = 0; p < u; ++p) {
                        row[p] += dpre[i] * src[p];
                    }
                }
            }
            if (double* gwx = grad_sink(weight_x)) {
                for (std::size_t i = 0; i < 3 * u; ++i) {
                    double* row = gwx + i * d;
                    for (std::size_t p = 0; p < d; ++p) {
                        row[p] += dpre[i] * xv[p];
                    }
                }
            }
            if (double* gb = grad_sink(bias)) {
                for (std::size_t i = 0; i < 3 * u; ++i) {
                    gb[i] += dpre[i];
                }
            }
            if (double* gx = grad_sink(x)) {
                for (std::size_t i = 0; i < 3 * u; ++i) {
                    const double* w = wx.data() + i * d;
                    for (std::size_t p = 0; p < d; ++p) {
                        gx[p] += w[p] * dpre[i];
                    }
                }
            }
            if (double* gh = grad_sink(h_prev)) {
                for (std::size_t i = 0; i < u; ++i) {
                    gh[i] += dh[i];
                }
            }
        });
}

Tensor attention_core(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, std::span<const int> mask,
                      std::size_t heads) {
    expect_matrix(q, "attention_core", "q");
    expect_same_shape(q, k, "attention_core");
    expect_same_shape(q, v, "attention_core");
    const std::size_t len = q.dim(0), d = q.dim(1);
    if (heads == 0 || d % heads != 0) {
        throw ConfigError("attention: model width " + std::to_string(d) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    }
    expect_shape(mask.size() == len, "attention_core",
                 "mask length " + std::to_string(mask.size()) + " vs " + std::to_string(len) + " positions");
    if (std::none_of(mask.begin(), mask.end(), [](int m) { return m != 0; })) {
        throw StateError("attention: every key position is masked");
    }
    const std::size_t hd = d / heads;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto qv = q.data();
    const auto kv = k.data();
    const auto vv = v.data();
    // weights[h][i][j]
    std::vector<double> weights(heads * len * len, 0.0);
    std::vector<double> out(len * d, 0.0);
    std::vector<double> scores(len);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < len; ++i) {
            double hi = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) {
                if (mask[j] == 0) {
                    continue;
                }
                double acc = 0.0;
                for (std::size_t p = 0; p < hd; ++p) {
                    acc += qv[i * d + off + p] * kv[j * d + off + p];
                }
                scores[j] = acc * scale_factor;
                hi = std::max(hi, scores[j]);
            }
            double total = 0.0;
            double* w = weights.data() + (h * len + i) * len;
            for (std::size_t j = 0; j < len; ++j) {
                if (mask[j] == 0) {
                    continue;
                }
                w[j] = std::exp(scores[j] - hi);
                total += w[j];
            }
            for (std::size_t j = 0; j < len; ++j) {
                w[j] /= total;
                if (w[j] == 0.0) {
                    continue;
                }
                for (std::size_t p = 0; p < hd; ++p) {
                    out[i * d + off + p] += w[j] * vv[j * d + off + p];
                }
            }
        }
    }
    return tape.record(
        "attention_core", {len, d}, std::move(out), {&q, &k, &v},
        [q, k, v, weights = std::move(weights), heads, len, d, hd, scale_factor](const detail::TensorNode& o) {
            const auto qv = q.data();
            const auto kv = k.data();
            const auto vv = v.data();
            const auto& g = o.grad;
            double* gq = grad_sink(q);
            double* gk = grad_sink(k);
            double* gv = grad_sink(v);
            std::vector<double> dw(len);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = h * hd;
                for (std::size_t i = 0; i < len; ++i) {
                    const double* w = weights.data() + (h * len + i) * len;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j) {
                        double acc = 0.0;
                        for (std::size_t p = 0; p < hd; ++p) {
                            acc += g[i * d + off + p] * vv[j * d + off + p];
                        }
                        dw[j] = acc;
                        dot += acc * w[j];
                    }
                    for (std::size_t j = 0; j < len; ++j) {
                        if (w[j] == 0.0) {
                            continue;
                        }
                        if (gv != nullptr) {
                            for (std::size_t p = 0; p < hd; ++p) {
                                gv[j * d + off + p] += w[j] * g[i * d + off + p];
                            }
                        }
                        const double ds = w[j] * (dw[j] - dot) * scale_factor;
                        for (std::size_t p = 0; p < hd; ++p) {
                            if (gq != nullptr) {
                                gq[i * d + off + p] += ds * kv[j * d + off + p];
                            }
                            if (gk != nullptr) {
                                gk[j * d + off + p] += ds * qv[i * d + off + p];
                            }
                        }
                    }
                }
            }
        });
}

Tensor self_attention(Tape& tape, const Tensor& h, std::span<const int> mask, const AttentionWeights& w,
                      std::size_t heads) {
    expect_matrix(h, "self_attention", "h");
    const std::size_t d = h.dim(1);
    if (heads == 0 || d % heads != 0) {
        throw ConfigError("attention: model width " + std::to_string(d) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    }
    const Tensor q = linear(tape, h, w.wq, w.bq);
    const Tensor k = linear(tape, h, w.wk, w.bk);
    const Tensor v = linear(tape, h, w.wv, w.bv);
    const Tensor mixed = attention_core(tape, q, k, v, mask, heads);
    return linear(tape, mixed, w.wo, w.bo);
}

std::size_t argmax(std::span<const double> values) {
    if (values.empty()) {
        throw ShapeError("argmax of an empty range");
    }
    return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

}  // namespace forgetbench::ops
