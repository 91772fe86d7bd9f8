#pragma once

// Differentiable primitives. Each op computes its value eagerly on Tensors and
// registers a backward closure on the record of its inputs.

#include "capt/autodiff.hpp"
#include "capt/error.hpp"
#include "capt/tensor.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace capt {

namespace kernels {

inline void require_matrix(const Tensor &t, const char *op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
    }
}

/// a [m x k] * b [k x n]
inline Tensor matmul(const Tensor &a, const Tensor &b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    }
    Tensor out({m, n});
    const double *pa = a.data().data();
    const double *pb = b.data().data();
    double *po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) {
                continue;
            }
            const double *brow = pb + p * n;
            double *orow = po + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    return out;
}

/// out += a [m x k] * b^T where b is [n x k]
inline void matmul_nt_acc(const Tensor &a, const Tensor &b, Tensor &out) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    const double *pa = a.data().data();
    const double *pb = b.data().data();
    double *po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += pa[i * k + p] * pb[j * k + p];
            }
            po[i * n + j] += s;
        }
    }
}

/// out += a^T * b where a is [k x m], b is [k x n]
inline void matmul_tn_acc(const Tensor &a, const Tensor &b, Tensor &out) {
    const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    const double *pa = a.data().data();
    const double *pb = b.data().data();
    double *po = out.data().data();
    for (std::size_t p = 0; p < k; ++p) {
        for (std::size_t i = 0; i < m; ++i) {
            const double av = pa[p * m + i];
            if (av == 0.0) {
                continue;
            }
            for (std::size_t j = 0; j < n; ++j) {
                po[i * n + j] += av * pb[p * n + j];
            }
        }
    }
}

inline Tensor transpose(const Tensor &a) {
    require_matrix(a, "transpose");
    Tensor out({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i) {
        for (std::size_t j = 0; j < a.dim(1); ++j) {
            out.at(j, i) = a.at(i, j);
        }
    }
    return out;
}

/// Softmax of each row (or of the whole vector for rank 1) at temperature tau.
inline Tensor softmax_rows(const Tensor &x, double tau) {
    if (!(tau > 0.0)) {
        throw ParameterError("softmax: temperature must be positive, got " + std::to_string(tau));
    }
    Tensor out = x;
    const std::size_t r = x.rows(), c = x.cols();
    for (std::size_t i = 0; i < r; ++i) {
        auto row = out.data().subspan(i * c, c);
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : row) {
            mx = std::max(mx, v);
        }
        double s = 0.0;
        for (double &v : row) {
            v = std::exp((v - mx) / tau);
            s += v;
        }
        for (double &v : row) {
            v /= s;
        }
    }
    return out;
}

inline Tensor log_softmax_rows(const Tensor &x, double tau) {
    if (!(tau > 0.0)) {
        throw ParameterError("log_softmax: temperature must be positive, got " + std::to_string(tau));
    }
    Tensor out = x;
    const std::size_t r = x.rows(), c = x.cols();
    for (std::size_t i = 0; i < r; ++i) {
        auto row = out.data().subspan(i * c, c);
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : row) {
            mx = std::max(mx, v);
        }
        double s = 0.0;
        for (double v : row) {
            s += std::exp((v - mx) / tau);
        }
        const double lse = std::log(s);
        for (double &v : row) {
            v = (v - mx) / tau - lse;
        }
    }
    return out;
}

inline void check_conv(const Tensor &grid, const Tensor &kernel) {
    if (grid.rank() != 3 || kernel.rank() != 3) {
        throw ShapeError("depthwise_conv2d: expected rank-3 grid and kernel, got " +
                         shape_string(grid.shape()) + " and " + shape_string(kernel.shape()));
    }
    if (kernel.dim(0) != kernel.dim(1) || kernel.dim(0) % 2 == 0) {
        throw ConfigError("depthwise_conv2d: kernel must be square with odd size, got " +
                          shape_string(kernel.shape()));
    }
    if (kernel.dim(2) != grid.dim(2)) {
        throw ShapeError("depthwise_conv2d: channel mismatch " + shape_string(grid.shape()) + " vs " +
                         shape_string(kernel.shape()));
    }
}

/// Per-channel 2D cross-correlation with zero "same" padding.
inline Tensor depthwise_conv2d(const Tensor &grid, const Tensor &kernel) {
    check_conv(grid, kernel);
    const std::size_t rows = grid.dim(0), cols = grid.dim(1), ch = grid.dim(2);
    const std::size_t ks = kernel.dim(0);
    const long pad = static_cast<long>(ks / 2);
    Tensor out(grid.shape(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            double *o = &out[(r * cols + c) * ch];
            for (std::size_t i = 0; i < ks; ++i) {
                const long rr = static_cast<long>(r + i) - pad;
                if (rr < 0 || rr >= static_cast<long>(rows)) {
                    continue;
                }
                for (std::size_t j = 0; j < ks; ++j) {
                    const long cc = static_cast<long>(c + j) - pad;
                    if (cc < 0 || cc >= static_cast<long>(cols)) {
                        continue;
                    }
                    const double *in = grid.data().data() + (static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc)) * ch;
                    const double *kv = kernel.data().data() + (i * ks + j) * ch;
                    for (std::size_t d = 0; d < ch; ++d) {
                        o[d] += kv[d] * in[d];
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace kernels

namespace detail {

inline GradRecord &same_record(const Var &a, const Var &b, const char *op) {
    if (a.record() != b.record() || a.record() == nullptr) {
        throw UsageError(std::string(op) + ": operands belong to different records");
    }
    return *a.record();
}

inline void add_into(Tensor &dst, const Tensor &src, double scale = 1.0) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += scale * s[i];
    }
}

inline void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

}  // namespace detail

inline Var matmul(const Var &a, const Var &b) {
    GradRecord &rec = detail::same_record(a, b, "matmul");
    Tensor out = kernels::matmul(a.value(), b.value());
    const std::size_t ia = a.id(), ib = b.id();
    return rec.push(std::move(out), rec.needs_grad(a) || rec.needs_grad(b),
                    [ia, ib](GradRecord &r, const Tensor &g) {
                        if (r.needs_grad(ia)) {
                            kernels::matmul_nt_acc(g, r.value(ib), r.grad(ia));
                        }
                        if (r.needs_grad(ib)) {
                            kernels::matmul_tn_acc(r.value(ia), g, r.grad(ib));
                        }
                    });
}

inline Var transpose(const Var &a) {
    GradRecord &rec = *a.record();
    const std::size_t ia = a.id();
    return rec.push(kernels::transpose(a.value()), rec.needs_grad(a), [ia](GradRecord &r, const Tensor &g) {
        detail::add_into(r.grad(ia), kernels::transpose(g));
    });
}

inline Var add(const Var &a, const Var &b) {
    GradRecord &rec = detail::same_record(a, b, "add");
    detail::require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    detail::add_into(out, b.value());
    const std::size_t ia = a.id(), ib = b.id();
    return rec.push(std::move(out), rec.needs_grad(a) || rec.needs_grad(b),
                    [ia, ib](GradRecord &r, const Tensor &g) {
                        if (r.needs_grad(ia)) {
                            detail::add_into(r.grad(ia), g);
                        }
                        if (r.needs_grad(ib)) {
                            detail::add_into(r.grad(ib), g);
                        }
                    });
}

inline Var sub(const Var &a, const Var &b) {
    GradRecord &rec = detail::same_record(a, b, "sub");
    detail::require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    detail::add_into(out, b.value(), -1.0);
    const std::size_t ia = a.id(), ib = b.id();
    return rec.push(std::move(out), rec.needs_grad(a) || rec.needs_grad(b),
                    [ia, ib](GradRecord &r, const Tensor &g) {
                        if (r.needs_grad(ia)) {
                            detail::add_into(r.grad(ia), g);
                        }
                        if (r.needs_grad(ib)) {
                            detail::add_into(r.grad(ib), g, -1.0);
                        }
                    });
}

/// Elementwise product.
inline Var mul(const Var &a, const Var &b) {
    GradRecord &rec = detail::same_record(a, b, "mul");
    detail::require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= b.value()[i];
    }
    const std::size_t ia = a.id(), ib = b.id();
    return rec.push(std::move(out), rec.needs_grad(a) || rec.needs_grad(b),
                    [ia, ib](GradRecord &r, const Tensor &g) {
                        if (r.needs_grad(ia)) {
                            Tensor &ga = r.grad(ia);
                            const Tensor &bv = r.value(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                                ga[i] += g[i] * bv[i];
                            }
                        }
                        if (r.needs_grad(ib)) {
                            Tensor &gb = r.grad(ib);
                            const Tensor &av = r.value(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                                gb[i] += g[i] * av[i];
                            }
                        }
                    });
}

inline Var scale(const Var &a, double s) {
    GradRecord &rec = *a.record();
    Tensor out = a.value();
    for (auto &v : out.data()) {
        v *= s;
    }
    const std::size_t ia = a.id();
    return rec.push(std::move(out), rec.needs_grad(a),
                    [ia, s](GradRecord &r, const Tensor &g) { detail::add_into(r.grad(ia), g, s); });
}

/// Multiplies every element of `a` by the single element of `s`.
inline Var scale(const Var &a, const Var &s) {
    GradRecord &rec = detail::same_record(a, s, "scale");
    if (s.value().size() != 1) {
        throw ShapeError("scale: factor must be a scalar, got " + shape_string(s.shape()));
    }
    const double sv = s.value()[0];
    Tensor out = a.value();
    for (auto &v : out.data()) {
        v *= sv;
    }
    const std::size_t ia = a.id(), is = s.id();
    return rec.push(std::move(out), rec.needs_grad(a) || rec.needs_grad(s),
                    [ia, is](GradRecord &r, const Tensor &g) {
                        const double f = r.value(is)[0];
                        if (r.needs_grad(ia)) {
                            detail::add_into(r.grad(ia), g, f);
                        }
                        if (r.needs_grad(is)) {
                            r.grad(is)[0] += dot(g.data(), r.value(ia).data());
                        }
                    });
}

/// Adds vector `bias` ([D] or [1 x D]) to every row of `a` ([n x D]).
inline Var add_bias(const Var &a, const Var &bias) {
    GradRecord &rec = detail::same_record(a, bias, "add_bias");
    const Tensor &av = a.value();
    const Tensor &bv = bias.value();
    if (bv.size() != av.cols()) {
        throw ShapeError("add_bias: bias " + shape_string(bv.shape()) + " does not match rows of " +
                         shape_string(av.shape()));
    }
    Tensor out = av;
    const std::size_t c = av.cols();
    for (std::size_t i = 0; i < av.rows(); ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] += bv[j];
        }
    }
    const std::size_t ia = a.id(), ib = bias.id();
    return rec.push(std::move(out), rec.needs_grad(a) || rec.needs_grad(bias),
                    [ia, ib, c](GradRecord &r, const Tensor &g) {
                        if (r.needs_grad(ia)) {
                            detail::add_into(r.grad(ia), g);
                        }
                        if (r.needs_grad(ib)) {
                            Tensor &gb = r.grad(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                                gb[i % c] += g[i];
                            }
                        }
                    });
}

inline Var tanh(const Var &a) {
    GradRecord &rec = *a.record();
    Tensor out = a.value();
    for (auto &v : out.data()) {
        v = std::tanh(v);
    }
    const std::size_t ia = a.id();
    const std::size_t self = rec.size();
    return rec.push(std::move(out), rec.needs_grad(a), [ia, self](GradRecord &r, const Tensor &g) {
        const Tensor &y = r.value(self);
        Tensor &ga = r.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * (1.0 - y[i] * y[i]);
        }
    });
}

/// x * sigmoid(1.702 x), the activation of the CLIP feed-forward blocks.
inline Var quick_gelu(const Var &a) {
    constexpr double k = 1.702;
    GradRecord &rec = *a.record();
    Tensor out = a.value();
    for (auto &v : out.data()) {
        v = v / (1.0 + std::exp(-k * v));
    }
    const std::size_t ia = a.id();
    return rec.push(std::move(out), rec.needs_grad(a), [ia](GradRecord &r, const Tensor &g) {
        const Tensor &x = r.value(ia);
        Tensor &ga = r.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-k * x[i]));
            ga[i] += g[i] * (s + k * x[i] * s * (1.0 - s));
        }
    });
}

/// Natural log with the argument clamped below at `floor`; zero gradient in the clamped region.
inline Var log_clamped(const Var &a, double floor = 1e-12) {
    GradRecord &rec = *a.record();
    Tensor out = a.value();
    for (auto &v : out.data()) {
        v = std::log(std::max(v, floor));
    }
    const std::size_t ia = a.id();
    return rec.push(std::move(out), rec.needs_grad(a), [ia, floor](GradRecord &r, const Tensor &g) {
        const Tensor &x = r.value(ia);
        Tensor &ga = r.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x[i] > floor) {
                ga[i] += g[i] / x[i];
            }
        }
    });
}

inline Var softmax_rows(const Var &a, double tau = 1.0) {
    GradRecord &rec = *a.record();
    Tensor out = kernels::softmax_rows(a.value(), tau);
    const std::size_t ia = a.id();
    const std::size_t self = rec.size();
    return rec.push(std::move(out), rec.needs_grad(a), [ia, self, tau](GradRecord &r, const Tensor &g) {
        const Tensor &y = r.value(self);
        Tensor &ga = r.grad(ia);
        const std::size_t rows = y.rows(), c = y.cols();
        for (std::size_t i = 0; i < rows; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                s += g[i * c + j] * y[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
                ga[i * c + j] += y[i * c + j] * (g[i * c + j] - s) / tau;
            }
        }
    });
}

inline Var log_softmax_rows(const Var &a, double tau = 1.0) {
    GradRecord &rec = *a.record();
    Tensor out = kernels::log_softmax_rows(a.value(), tau);
    const std::size_t ia = a.id();
    const std::size_t self = rec.size();
    return rec.push(std::move(out), rec.needs_grad(a), [ia, self, tau](GradRecord &r, const Tensor &g) {
        const Tensor &y = r.value(self);
        Tensor &ga = r.grad(ia);
        const std::size_t rows = y.rows(), c = y.cols();
        for (std::size_t i = 0; i < rows; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                s += g[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
                ga[i * c + j] += (g[i * c + j] - std::exp(y[i * c + j]) * s) / tau;
            }
        }
    });
}

/// Row-wise layer normalisation followed by the affine map gain * x + bias.
inline Var layer_norm(const Var &x, const Var &gain, const Var &bias, double eps = 1e-5) {
    GradRecord &rec = detail::same_record(x, gain, "layer_norm");
    detail::same_record(x, bias, "layer_norm");
    const Tensor &xv = x.value();
    const std::size_t n = xv.rows(), d = xv.cols();
    if (gain.value().size() != d || bias.value().size() != d) {
        throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
    }
    Tensor normed(xv.shape());
    std::vector<double> inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mean += xv[i * d + j];
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xv[i * d + j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            normed[i * d + j] = (xv[i * d + j] - mean) * inv_std[i];
        }
    }
    Tensor out = normed;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            out[i * d + j] = out[i * d + j] * gain.value()[j] + bias.value()[j];
        }
    }
    const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
    const bool any = rec.needs_grad(x) || rec.needs_grad(gain) || rec.needs_grad(bias);
    return rec.push(std::move(out), any,
                    [ix, ig, ib, normed = std::move(normed), inv_std = std::move(inv_std), n,
                     d](GradRecord &r, const Tensor &g) {
                        if (r.needs_grad(ig)) {
                            Tensor &gg = r.grad(ig);
                            for (std::size_t i = 0; i < n * d; ++i) {
                                gg[i % d] += g[i] * normed[i];
                            }
                        }
                        if (r.needs_grad(ib)) {
                            Tensor &gb = r.grad(ib);
                            for (std::size_t i = 0; i < n * d; ++i) {
                                gb[i % d] += g[i];
                            }
                        }
                        if (r.needs_grad(ix)) {
                            const Tensor &gain_v = r.value(ig);
                            Tensor &gx = r.grad(ix);
                            const double dd = static_cast<double>(d);
                            for (std::size_t i = 0; i < n; ++i) {
                                double sum_g = 0.0, sum_gx = 0.0;
                                for (std::size_t j = 0; j < d; ++j) {
                                    const double gh = g[i * d + j] * gain_v[j];
                                    sum_g += gh;
                                    sum_gx += gh * normed[i * d + j];
                                }
                                for (std::size_t j = 0; j < d; ++j) {
                                    const double gh = g[i * d + j] * gain_v[j];
                                    gx[i * d + j] +=
                                        inv_std[i] * (gh - sum_g / dd - normed[i * d + j] * sum_gx / dd);
                                }
                            }
                        }
                    });
}

/// Rows [begin, end) of a matrix.
inline Var rows(const Var &a, std::size_t begin, std::size_t end) {
    const Tensor &av = a.value();
    kernels::require_matrix(av, "rows");
    if (begin >= end || end > av.dim(0)) {
        throw ShapeError("rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for " + shape_string(av.shape()));
    }
    const std::size_t c = av.dim(1);
    std::vector<double> data(av.data().begin() + static_cast<long>(begin * c),
                             av.data().begin() + static_cast<long>(end * c));
    GradRecord &rec = *a.record();
    const std::size_t ia = a.id();
    return rec.push(Tensor({end - begin, c}, std::move(data)), rec.needs_grad(a),
                    [ia, begin, c](GradRecord &r, const Tensor &g) {
                        Tensor &ga = r.grad(ia);
                        for (std::size_t i = 0; i < g.size(); ++i) {
                            ga[begin * c + i] += g[i];
                        }
                    });
}

/// Columns [begin, end) of a matrix.
inline Var cols(const Var &a, std::size_t begin, std::size_t end) {
    const Tensor &av = a.value();
    kernels::require_matrix(av, "cols");
    if (begin >= end || end > av.dim(1)) {
        throw ShapeError("cols: range out of bounds for " + shape_string(av.shape()));
    }
    const std::size_t n = av.dim(0), c = av.dim(1), w = end - begin;
    Tensor out({n, w});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            out[i * w + j] = av[i * c + begin + j];
        }
    }
    GradRecord &rec = *a.record();
    const std::size_t ia = a.id();
    return rec.push(std::move(out), rec.needs_grad(a), [ia, begin, c, n, w](GradRecord &r, const Tensor &g) {
        Tensor &ga = r.grad(ia);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                ga[i * c + begin + j] += g[i * w + j];
            }
        }
    });
}

/// Stacks matrices (or vectors, as single rows) vertically.
inline Var concat_rows(const std::vector<Var> &parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    GradRecord &rec = *parts.front().record();
    const std::size_t c = parts.front().value().cols();
    std::size_t total = 0;
    bool any = false;
    for (const auto &p : parts) {
        detail::same_record(parts.front(), p, "concat_rows");
        if (p.value().cols() != c) {
            throw ShapeError("concat_rows: column mismatch " + shape_string(p.shape()));
        }
        total += p.value().rows();
        any = any || rec.needs_grad(p);
    }
    std::vector<double> data;
    data.reserve(total * c);
    std::vector<std::size_t> ids;
    for (const auto &p : parts) {
        data.insert(data.end(), p.value().data().begin(), p.value().data().end());
        ids.push_back(p.id());
    }
    return rec.push(Tensor({total, c}, std::move(data)), any, [ids](GradRecord &r, const Tensor &g) {
        std::size_t off = 0;
        for (auto id : ids) {
            const std::size_t sz = r.value(id).size();
            if (r.needs_grad(id)) {
                Tensor &gi = r.grad(id);
                for (std::size_t i = 0; i < sz; ++i) {
                    gi[i] += g[off + i];
                }
            }
            off += sz;
        }
    });
}

inline Var concat_cols(const std::vector<Var> &parts) {
    if (parts.empty()) {
        throw ShapeError("concat_cols: no inputs");
    }
    GradRecord &rec = *parts.front().record();
    const std::size_t n = parts.front().value().rows();
    std::size_t total = 0;
    bool any = false;
    for (const auto &p : parts) {
        detail::same_record(parts.front(), p, "concat_cols");
        if (p.value().rows() != n || p.value().rank() != 2) {
            throw ShapeError("concat_cols: row mismatch " + shape_string(p.shape()));
        }
        total += p.value().cols();
        any = any || rec.needs_grad(p);
    }
    Tensor out({n, total});
    std::vector<std::size_t> ids;
    std::size_t off = 0;
    for (const auto &p : parts) {
        const std::size_t w = p.value().cols();
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                out[i * total + off + j] = p.value()[i * w + j];
            }
        }
        off += w;
        ids.push_back(p.id());
    }
    return rec.push(std::move(out), any, [ids, n, total](GradRecord &r, const Tensor &g) {
        std::size_t off = 0;
        for (auto id : ids) {
            const std::size_t w = r.value(id).cols();
            if (r.needs_grad(id)) {
                Tensor &gi = r.grad(id);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < w; ++j) {
                        gi[i * w + j] += g[i * total + off + j];
                    }
                }
            }
            off += w;
        }
    });
}

inline Var reshape(const Var &a, Shape shape) {
    GradRecord &rec = *a.record();
    const std::size_t ia = a.id();
    return rec.push(a.value().reshaped(std::move(shape)), rec.needs_grad(a),
                    [ia](GradRecord &r, const Tensor &g) { detail::add_into(r.grad(ia), g); });
}

/// Column sums of a matrix, as a [1 x cols] row.
inline Var sum_rows(const Var &a) {
    const Tensor &av = a.value();
    const std::size_t n = av.rows(), c = av.cols();
    Tensor out({1, c});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j] += av[i * c + j];
        }
    }
    GradRecord &rec = *a.record();
    const std::size_t ia = a.id();
    return rec.push(std::move(out), rec.needs_grad(a), [ia, c](GradRecord &r, const Tensor &g) {
        Tensor &ga = r.grad(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += g[i % c];
        }
    });
}

inline Var sum(const Var &a) {
    double s = 0.0;
    for (double v : a.value().data()) {
        s += v;
    }
    GradRecord &rec = *a.record();
    const std::size_t ia = a.id();
    return rec.push(Tensor::scalar(s), rec.needs_grad(a), [ia](GradRecord &r, const Tensor &g) {
        Tensor &ga = r.grad(ia);
        for (auto &v : ga.data()) {
            v += g[0];
        }
    });
}

/// Element `index` of the flattened tensor, as a scalar.
inline Var pick(const Var &a, std::size_t index) {
    if (index >= a.value().size()) {
        throw ShapeError("pick: index " + std::to_string(index) + " out of range for " +
                         shape_string(a.shape()));
    }
    GradRecord &rec = *a.record();
    const std::size_t ia = a.id();
    return rec.push(Tensor::scalar(a.value()[index]), rec.needs_grad(a),
                    [ia, index](GradRecord &r, const Tensor &g) { r.grad(ia)[index] += g[0]; });
}

/// Sum of the diagonal of a square matrix.
inline Var trace(const Var &a) {
    const Tensor &av = a.value();
    kernels::require_matrix(av, "trace");
    if (av.dim(0) != av.dim(1)) {
        throw ShapeError("trace: matrix must be square, got " + shape_string(av.shape()));
    }
    const std::size_t n = av.dim(0);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        s += av[i * n + i];
    }
    GradRecord &rec = *a.record();
    const std::size_t ia = a.id();
    return rec.push(Tensor::scalar(s), rec.needs_grad(a), [ia, n](GradRecord &r, const Tensor &g) {
        Tensor &ga = r.grad(ia);
        for (std::size_t i = 0; i < n; ++i) {
            ga[i * n + i] += g[0];
        }
    });
}

/// Scales a tensor to unit L2 norm (over all elements).
inline Var normalize(const Var &a) {
    const double nrm = l2_norm(a.value().data());
    if (nrm == 0.0) {
        throw DegenerateInputError("normalize: zero-norm input");
    }
    Tensor out = a.value();
    for (auto &v : out.data()) {
        v /= nrm;
    }
    GradRecord &rec = *a.record();
    const std::size_t ia = a.id();
    const std::size_t self = rec.size();
    return rec.push(std::move(out), rec.needs_grad(a), [ia, self, nrm](GradRecord &r, const Tensor &g) {
        const Tensor &y = r.value(self);
        const double yg = dot(y.data(), g.data());
        Tensor &ga = r.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += (g[i] - y[i] * yg) / nrm;
        }
    });
}

/// Inner product of two equally sized tensors, as a scalar.
inline Var dot(const Var &a, const Var &b) {
    GradRecord &rec = detail::same_record(a, b, "dot");
    if (a.value().size() != b.value().size()) {
        throw ShapeError("dot: size mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    const double s = capt::dot(a.value().data(), b.value().data());
    const std::size_t ia = a.id(), ib = b.id();
    return rec.push(Tensor::scalar(s), rec.needs_grad(a) || rec.needs_grad(b),
                    [ia, ib](GradRecord &r, const Tensor &g) {
                        if (r.needs_grad(ia)) {
                            detail::add_into(r.grad(ia), r.value(ib), g[0]);
                        }
                        if (r.needs_grad(ib)) {
                            detail::add_into(r.grad(ib), r.value(ia), g[0]);
                        }
                    });
}

inline Var cosine_similarity(const Var &u, const Var &v) { return dot(normalize(u), normalize(v)); }

inline Var depthwise_conv2d(const Var &grid, const Var &kernel) {
    GradRecord &rec = detail::same_record(grid, kernel, "depthwise_conv2d");
    Tensor out = kernels::depthwise_conv2d(grid.value(), kernel.value());
    const std::size_t ig = grid.id(), ik = kernel.id();
    return rec.push(std::move(out), rec.needs_grad(grid) || rec.needs_grad(kernel),
                    [ig, ik](GradRecord &r, const Tensor &g) {
                        const Tensor &in = r.value(ig);
                        const Tensor &kern = r.value(ik);
                        const std::size_t rows = in.dim(0), cols = in.dim(1), ch = in.dim(2);
                        const std::size_t ks = kern.dim(0);
                        const long pad = static_cast<long>(ks / 2);
                        const bool want_in = r.needs_grad(ig);
                        const bool want_k = r.needs_grad(ik);
                        Tensor *gin = want_in ? &r.grad(ig) : nullptr;
                        Tensor *gk = want_k ? &r.grad(ik) : nullptr;
                        for (std::size_t y = 0; y < rows; ++y) {
                            for (std::size_t x = 0; x < cols; ++x) {
                                const double *go = g.data().data() + (y * cols + x) * ch;
                                for (std::size_t i = 0; i < ks; ++i) {
                                    const long yy = static_cast<long>(y + i) - pad;
                                    if (yy < 0 || yy >= static_cast<long>(rows)) {
                                        continue;
                                    }
                                    for (std::size_t j = 0; j < ks; ++j) {
                                        const long xx = static_cast<long>(x + j) - pad;
                                        if (xx < 0 || xx >= static_cast<long>(cols)) {
                                            continue;
                                        }
                                        const std::size_t src =
                                            (static_cast<std::size_t>(yy) * cols + static_cast<std::size_t>(xx)) * ch;
                                        const std::size_t kof = (i * ks + j) * ch;
                                        for (std::size_t d = 0; d < ch; ++d) {
                                            if (gin) {
                                                (*gin)[src + d] += kern[kof + d] * go[d];
                                            }
                                            if (gk) {
                                                (*gk)[kof + d] += in[src + d] * go[d];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
}

}  // namespace capt
