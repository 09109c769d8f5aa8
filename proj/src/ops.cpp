#include "fedmer/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace fedmer {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

bool tracked(const Tensor& t) {
    return t.node()->requires_grad || static_cast<bool>(t.node()->backprop);
}

// builds the result node; records parents + backprop only when grad mode is
// on and at least one input is on a gradient path
Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               std::vector<Tensor> inputs, std::function<void(detail::Node&)> backprop) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    Tensor out = Tensor::wrap(node);
    check_finite(out, op);
    if (grad_enabled()) {
        bool any = false;
        for (const Tensor& t : inputs) {
            if (tracked(t)) {
                any = true;
                break;
            }
        }
        if (any) {
            node->parents.reserve(inputs.size());
            for (const Tensor& t : inputs) node->parents.push_back(t.node());
            node->backprop = std::move(backprop);
        }
    }
    return out;
}

std::vector<double>& acc(const NodePtr& n) {
    n->ensure_grad();
    return n->grad;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    NodePtr na = a.node(), nb = b.node();
    return make_op("add", a.shape(), std::move(v), {a, b}, [na, nb](detail::Node& out) {
        auto& ga = acc(na);
        auto& gb = acc(nb);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            ga[i] += out.grad[i];
            gb[i] += out.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
    NodePtr na = a.node(), nb = b.node();
    return make_op("sub", a.shape(), std::move(v), {a, b}, [na, nb](detail::Node& out) {
        auto& ga = acc(na);
        auto& gb = acc(nb);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            ga[i] += out.grad[i];
            gb[i] -= out.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    NodePtr na = a.node(), nb = b.node();
    return make_op("mul", a.shape(), std::move(v), {a, b}, [na, nb](detail::Node& out) {
        auto& ga = acc(na);
        auto& gb = acc(nb);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            ga[i] += out.grad[i] * nb->value[i];
            gb[i] += out.grad[i] * na->value[i];
        }
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + s;
    NodePtr na = a.node();
    return make_op("add_scalar", a.shape(), std::move(v), {a}, [na](detail::Node& out) {
        auto& ga = acc(na);
        for (std::size_t i = 0; i < out.grad.size(); ++i) ga[i] += out.grad[i];
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * s;
    NodePtr na = a.node();
    return make_op("mul_scalar", a.shape(), std::move(v), {a}, [na, s](detail::Node& out) {
        auto& ga = acc(na);
        for (std::size_t i = 0; i < out.grad.size(); ++i) ga[i] += out.grad[i] * s;
    });
}

Tensor relu(const Tensor& x) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    NodePtr nx = x.node();
    return make_op("relu", x.shape(), std::move(v), {x}, [nx](detail::Node& out) {
        auto& gx = acc(nx);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            if (nx->value[i] > 0.0) gx[i] += out.grad[i];
        }
    });
}

Tensor leaky_relu(const Tensor& x, double negative_slope) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double xi = x.data()[i];
        v[i] = xi > 0.0 ? xi : negative_slope * xi;
    }
    NodePtr nx = x.node();
    return make_op("leaky_relu", x.shape(), std::move(v), {x},
                   [nx, negative_slope](detail::Node& out) {
                       auto& gx = acc(nx);
                       for (std::size_t i = 0; i < out.grad.size(); ++i) {
                           gx[i] += out.grad[i] * (nx->value[i] > 0.0 ? 1.0 : negative_slope);
                       }
                   });
}

Tensor elu(const Tensor& x, double alpha) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double xi = x.data()[i];
        v[i] = xi > 0.0 ? xi : alpha * std::expm1(xi);
    }
    NodePtr nx = x.node();
    return make_op("elu", x.shape(), std::move(v), {x}, [nx, alpha](detail::Node& out) {
        auto& gx = acc(nx);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            // d/dx = 1 for x>0, alpha*exp(x) = out + alpha otherwise
            gx[i] += out.grad[i] * (nx->value[i] > 0.0 ? 1.0 : out.value[i] + alpha);
        }
    });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double xi = x.data()[i];
        v[i] = xi >= 0.0 ? 1.0 / (1.0 + std::exp(-xi)) : std::exp(xi) / (1.0 + std::exp(xi));
    }
    NodePtr nx = x.node();
    return make_op("sigmoid", x.shape(), std::move(v), {x}, [nx](detail::Node& out) {
        auto& gx = acc(nx);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            const double y = out.value[i];
            gx[i] += out.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<double> v(n * m);
    {
        MapConstMat ma(a.data(), n, k), mb(b.data(), k, m);
        MapMat mv(v.data(), n, m);
        mv.noalias() = ma * mb;
    }
    NodePtr na = a.node(), nb = b.node();
    return make_op("matmul", {n, m}, std::move(v), {a, b}, [na, nb, n, k, m](detail::Node& out) {
        MapConstMat g(out.grad.data(), n, m);
        MapConstMat ma(na->value.data(), n, k), mb(nb->value.data(), k, m);
        MapMat ga(acc(na).data(), n, k), gb(acc(nb).data(), k, m);
        ga.noalias() += g * mb.transpose();
        gb.noalias() += ma.transpose() * g;
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: expected 2-D, got " + shape_str(a.shape()));
    const std::size_t n = a.dim(0), m = a.dim(1);
    std::vector<double> v(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) v[j * n + i] = a.data()[i * m + j];
    NodePtr na = a.node();
    return make_op("transpose", {m, n}, std::move(v), {a}, [na, n, m](detail::Node& out) {
        auto& ga = acc(na);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += out.grad[j * n + i];
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) ||
        w.dim(1) != b.dim(0)) {
        throw DimensionError("linear: incompatible shapes x" + shape_str(x.shape()) + " w" +
                             shape_str(w.shape()) + " b" + shape_str(b.shape()));
    }
    const std::size_t n = x.dim(0), in = x.dim(1), out_w = w.dim(1);
    std::vector<double> v(n * out_w);
    {
        MapConstMat mx(x.data(), n, in), mw(w.data(), in, out_w);
        MapMat mv(v.data(), n, out_w);
        mv.noalias() = mx * mw;
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < out_w; ++c) v[r * out_w + c] += b.data()[c];
    }
    NodePtr nx = x.node(), nw = w.node(), nb = b.node();
    return make_op("linear", {n, out_w}, std::move(v), {x, w, b},
                   [nx, nw, nb, n, in, out_w](detail::Node& out) {
                       MapConstMat g(out.grad.data(), n, out_w);
                       MapConstMat mx(nx->value.data(), n, in), mw(nw->value.data(), in, out_w);
                       MapMat gx(acc(nx).data(), n, in), gw(acc(nw).data(), in, out_w);
                       gx.noalias() += g * mw.transpose();
                       gw.noalias() += mx.transpose() * g;
                       auto& gb = acc(nb);
                       for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t c = 0; c < out_w; ++c) gb[c] += out.grad[r * out_w + c];
                   });
}

namespace {

// One column matrix of shape (C*kh*kw, N*Ho*Wo) for the whole batch, so the
// convolution is a single GEMM. Stride fixed at 1.
void im2col_batch(const double* x, std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                  std::size_t kh, std::size_t kw, std::size_t pad, std::size_t ho, std::size_t wo,
                  double* col) {
    const std::size_t hw = ho * wo;
    const std::size_t row_len = n * hw;
    for (std::size_t s = 0; s < n; ++s) {
        const double* img = x + s * c * h * w;
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t ki = 0; ki < kh; ++ki) {
                for (std::size_t kj = 0; kj < kw; ++kj) {
                    double* dst = col + ((ch * kh + ki) * kw + kj) * row_len + s * hw;
                    for (std::size_t oi = 0; oi < ho; ++oi) {
                        const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi + ki) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        for (std::size_t oj = 0; oj < wo; ++oj) {
                            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj + kj) -
                                                      static_cast<std::ptrdiff_t>(pad);
                            double val = 0.0;
                            if (ii >= 0 && ii < static_cast<std::ptrdiff_t>(h) && jj >= 0 &&
                                jj < static_cast<std::ptrdiff_t>(w)) {
                                val = img[(ch * h + static_cast<std::size_t>(ii)) * w +
                                          static_cast<std::size_t>(jj)];
                            }
                            dst[oi * wo + oj] = val;
                        }
                    }
                }
            }
        }
    }
}

void col2im_batch_add(const double* col, std::size_t n, std::size_t c, std::size_t h,
                      std::size_t w, std::size_t kh, std::size_t kw, std::size_t pad,
                      std::size_t ho, std::size_t wo, double* gx) {
    const std::size_t hw = ho * wo;
    const std::size_t row_len = n * hw;
    for (std::size_t s = 0; s < n; ++s) {
        double* img = gx + s * c * h * w;
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t ki = 0; ki < kh; ++ki) {
                for (std::size_t kj = 0; kj < kw; ++kj) {
                    const double* src = col + ((ch * kh + ki) * kw + kj) * row_len + s * hw;
                    for (std::size_t oi = 0; oi < ho; ++oi) {
                        const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi + ki) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t oj = 0; oj < wo; ++oj) {
                            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj + kj) -
                                                      static_cast<std::ptrdiff_t>(pad);
                            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
                            img[(ch * h + static_cast<std::size_t>(ii)) * w +
                                static_cast<std::size_t>(jj)] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1 || x.dim(1) != w.dim(1) ||
        w.dim(0) != b.dim(0)) {
        throw DimensionError("conv2d: incompatible shapes x" + shape_str(x.shape()) + " w" +
                             shape_str(w.shape()) + " b" + shape_str(b.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wid = x.dim(3);
    const std::size_t f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (h + 2 * pad < kh || wid + 2 * pad < kw) {
        throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                             shape_str(x.shape()));
    }
    const std::size_t ho = h + 2 * pad - kh + 1, wo = wid + 2 * pad - kw + 1;
    const std::size_t ckk = c * kh * kw, hw = ho * wo;

    // columns are rebuilt in backward rather than cached on the graph
    std::vector<double> cols(ckk * n * hw);
    im2col_batch(x.data(), n, c, h, wid, kh, kw, pad, ho, wo, cols.data());
    std::vector<double> prod(f * n * hw);
    {
        MapConstMat mw(w.data(), f, ckk), mcol(cols.data(), ckk, n * hw);
        MapMat mout(prod.data(), f, n * hw);
        mout.noalias() = mw * mcol;
    }
    std::vector<double> v(n * f * hw);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t fi = 0; fi < f; ++fi) {
            const double* src = prod.data() + fi * n * hw + s * hw;
            double* dst = v.data() + (s * f + fi) * hw;
            const double bias = b.data()[fi];
            for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
        }
    }
    NodePtr nx = x.node(), nw = w.node(), nb = b.node();
    return make_op(
        "conv2d", {n, f, ho, wo}, std::move(v), {x, w, b},
        [nx, nw, nb, n, c, h, wid, f, kh, kw, pad, ho, wo, ckk, hw](detail::Node& out) {
            auto& gx = acc(nx);
            auto& gw = acc(nw);
            auto& gb = acc(nb);
            // gather the output gradient into GEMM layout (F, N*HW)
            std::vector<double> g(f * n * hw);
            for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t fi = 0; fi < f; ++fi) {
                    const double* src = out.grad.data() + (s * f + fi) * hw;
                    double* dst = g.data() + fi * n * hw + s * hw;
                    for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i];
                }
            }
            std::vector<double> cols(ckk * n * hw);
            im2col_batch(nx->value.data(), n, c, h, wid, kh, kw, pad, ho, wo, cols.data());
            {
                MapConstMat mg(g.data(), f, n * hw), mcol(cols.data(), ckk, n * hw);
                MapMat mgw(gw.data(), f, ckk);
                mgw.noalias() += mg * mcol.transpose();
            }
            std::vector<double> dcol(ckk * n * hw);
            {
                MapConstMat mg(g.data(), f, n * hw), mw(nw->value.data(), f, ckk);
                MapMat mdcol(dcol.data(), ckk, n * hw);
                mdcol.noalias() = mw.transpose() * mg;
            }
            col2im_batch_add(dcol.data(), n, c, h, wid, kh, kw, pad, ho, wo, gx.data());
            for (std::size_t fi = 0; fi < f; ++fi) {
                const double* row = g.data() + fi * n * hw;
                double sum = 0.0;
                for (std::size_t i = 0; i < n * hw; ++i) sum += row[i];
                gb[fi] += sum;
            }
        });
}

Tensor max_pool2d(const Tensor& x, std::size_t k, std::size_t stride, std::size_t pad) {
    if (x.rank() != 4) throw DimensionError("max_pool2d: expected 4-D, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h + 2 * pad < k || w + 2 * pad < k) {
        throw DimensionError("max_pool2d: window larger than padded input");
    }
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (w + 2 * pad - k) / stride + 1;
    std::vector<double> v(n * c * ho * wo);
    auto argmax = std::make_shared<std::vector<std::size_t>>(v.size());
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* plane = x.data() + (s * c + ch) * h * w;
            for (std::size_t oi = 0; oi < ho; ++oi) {
                for (std::size_t oj = 0; oj < wo; ++oj) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t best_idx = 0;
                    for (std::size_t ki = 0; ki < k; ++ki) {
                        const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t kj = 0; kj < k; ++kj) {
                            const std::ptrdiff_t jj =
                                static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
                            const std::size_t idx =
                                static_cast<std::size_t>(ii) * w + static_cast<std::size_t>(jj);
                            if (plane[idx] > best) {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    const std::size_t o = ((s * c + ch) * ho + oi) * wo + oj;
                    v[o] = best;
                    (*argmax)[o] = (s * c + ch) * h * w + best_idx;
                }
            }
        }
    }
    NodePtr nx = x.node();
    return make_op("max_pool2d", {n, c, ho, wo}, std::move(v), {x},
                   [nx, argmax](detail::Node& out) {
                       auto& gx = acc(nx);
                       for (std::size_t i = 0; i < out.grad.size(); ++i) {
                           gx[(*argmax)[i]] += out.grad[i];
                       }
                   });
}

Tensor mean_pool_spatial(const Tensor& x) {
    if (x.rank() != 4) {
        throw DimensionError("mean_pool_spatial: expected 4-D, got " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<double> v(n * c);
    for (std::size_t i = 0; i < n * c; ++i) {
        const double* p = x.data() + i * hw;
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j) s += p[j];
        v[i] = s / static_cast<double>(hw);
    }
    NodePtr nx = x.node();
    return make_op("mean_pool_spatial", {n, c}, std::move(v), {x}, [nx, hw](detail::Node& out) {
        auto& gx = acc(nx);
        const double inv = 1.0 / static_cast<double>(hw);
        for (std::size_t i = 0; i < out.grad.size(); ++i) {
            const double g = out.grad[i] * inv;
            for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += g;
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    }
    std::vector<double> v(x.value());
    NodePtr nx = x.node();
    return make_op("reshape", std::move(shape), std::move(v), {x}, [nx](detail::Node& out) {
        auto& gx = acc(nx);
        for (std::size_t i = 0; i < out.grad.size(); ++i) gx[i] += out.grad[i];
    });
}

Tensor flatten(const Tensor& x) { return reshape(x, {x.numel()}); }

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw DimensionError("concat: axis out of range");
    std::size_t axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != s0.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t d = 0; d < s0.size(); ++d) {
            if (d != axis && p.shape()[d] != s0[d]) {
                throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                     shape_str(s0) + " on axis " + std::to_string(d));
            }
        }
        axis_total += p.shape()[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = axis_total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

    std::vector<double> v(shape_numel(out_shape));
    std::size_t offset = 0;
    std::vector<std::size_t> offsets(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
        offsets[p] = offset;
        const std::size_t block = parts[p].shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(parts[p].data() + o * block, block,
                        v.data() + o * axis_total * inner + offset);
        }
        offset += block;
    }
    std::vector<NodePtr> nodes;
    nodes.reserve(parts.size());
    std::vector<std::size_t> blocks(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
        nodes.push_back(parts[p].node());
        blocks[p] = parts[p].shape()[axis] * inner;
    }
    return make_op("concat", std::move(out_shape), std::move(v), parts,
                   [nodes, offsets, blocks, outer, axis_total, inner](detail::Node& out) {
                       for (std::size_t p = 0; p < nodes.size(); ++p) {
                           auto& gp = acc(nodes[p]);
                           for (std::size_t o = 0; o < outer; ++o) {
                               const double* src =
                                   out.grad.data() + o * axis_total * inner + offsets[p];
                               double* dst = gp.data() + o * blocks[p];
                               for (std::size_t i = 0; i < blocks[p]; ++i) dst[i] += src[i];
                           }
                       }
                   });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= x.rank()) throw DimensionError("slice: axis out of range");
    if (start + len > x.shape()[axis]) {
        throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") exceeds axis size " +
                             std::to_string(x.shape()[axis]));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= x.shape()[d];
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.shape()[d];
    const std::size_t axis_size = x.shape()[axis];
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    std::vector<double> v(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(x.data() + (o * axis_size + start) * inner, len * inner,
                    v.data() + o * len * inner);
    }
    NodePtr nx = x.node();
    return make_op("slice", std::move(out_shape), std::move(v), {x},
                   [nx, outer, inner, axis_size, start, len](detail::Node& out) {
                       auto& gx = acc(nx);
                       for (std::size_t o = 0; o < outer; ++o) {
                           const double* src = out.grad.data() + o * len * inner;
                           double* dst = gx.data() + (o * axis_size + start) * inner;
                           for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                       }
                   });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
    if (x.rank() != 2) throw DimensionError("gather_rows: expected 2-D, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), width = x.dim(1);
    for (std::size_t idx : indices) {
        if (idx >= rows) {
            throw DimensionError("gather_rows: index " + std::to_string(idx) + " out of " +
                                 std::to_string(rows) + " rows");
        }
    }
    std::vector<double> v(indices.size() * width);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        std::copy_n(x.data() + indices[r] * width, width, v.data() + r * width);
    }
    NodePtr nx = x.node();
    auto idx = std::make_shared<std::vector<std::size_t>>(indices);
    return make_op("gather_rows", {indices.size(), width}, std::move(v), {x},
                   [nx, idx, width](detail::Node& out) {
                       auto& gx = acc(nx);
                       for (std::size_t r = 0; r < idx->size(); ++r) {
                           const double* src = out.grad.data() + r * width;
                           double* dst = gx.data() + (*idx)[r] * width;
                           for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
                       }
                   });
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.value()) s += v;
    NodePtr nx = x.node();
    return make_op("sum_all", {1}, {s}, {x}, [nx](detail::Node& out) {
        auto& gx = acc(nx);
        for (double& g : gx) g += out.grad[0];
    });
}

Tensor mean_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.value()) s += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    NodePtr nx = x.node();
    return make_op("mean_all", {1}, {s * inv}, {x}, [nx, inv](detail::Node& out) {
        auto& gx = acc(nx);
        for (double& g : gx) g += out.grad[0] * inv;
    });
}

Tensor sum_squares(const Tensor& x) {
    double s = 0.0;
    for (double v : x.value()) s += v * v;
    NodePtr nx = x.node();
    return make_op("sum_squares", {1}, {s}, {x}, [nx](detail::Node& out) {
        auto& gx = acc(nx);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * nx->value[i] * out.grad[0];
    });
}

Tensor outer_sum(const Tensor& u, const Tensor& v) {
    if (u.rank() != 1 || v.rank() != 1) {
        throw DimensionError("outer_sum: expected two vectors, got " + shape_str(u.shape()) +
                             " and " + shape_str(v.shape()));
    }
    const std::size_t n = u.dim(0), m = v.dim(0);
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = u.data()[i] + v.data()[j];
    NodePtr nu = u.node(), nv = v.node();
    return make_op("outer_sum", {n, m}, std::move(out), {u, v}, [nu, nv, n, m](detail::Node& o) {
        auto& gu = acc(nu);
        auto& gv = acc(nv);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                gu[i] += o.grad[i * m + j];
                gv[j] += o.grad[i * m + j];
            }
        }
    });
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
    if (x.rank() != 4 || s.rank() != 2 || s.dim(0) != x.dim(0) || s.dim(1) != x.dim(1)) {
        throw DimensionError("scale_channels: incompatible shapes x" + shape_str(x.shape()) +
                             " s" + shape_str(s.shape()));
    }
    const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < nc; ++i) {
        const double w = s.data()[i];
        for (std::size_t j = 0; j < hw; ++j) v[i * hw + j] = x.data()[i * hw + j] * w;
    }
    NodePtr nx = x.node(), ns = s.node();
    return make_op("scale_channels", x.shape(), std::move(v), {x, s},
                   [nx, ns, nc, hw](detail::Node& out) {
                       auto& gx = acc(nx);
                       auto& gs = acc(ns);
                       for (std::size_t i = 0; i < nc; ++i) {
                           const double w = ns->value[i];
                           double dot = 0.0;
                           for (std::size_t j = 0; j < hw; ++j) {
                               gx[i * hw + j] += out.grad[i * hw + j] * w;
                               dot += out.grad[i * hw + j] * nx->value[i * hw + j];
                           }
                           gs[i] += dot;
                       }
                   });
}

namespace {

// shared softmax backward: dx = y * (dy - sum(dy * y)) per row
void softmax_backward_rows(const std::vector<double>& y, const std::vector<double>& gy,
                           std::size_t rows, std::size_t cols, std::vector<double>& gx) {
    for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += gy[r * cols + c] * y[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
            gx[r * cols + c] += y[r * cols + c] * (gy[r * cols + c] - dot);
        }
    }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("softmax: expected 2-D, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<double> v(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data() + r * cols;
        double m = in[0];
        for (std::size_t c = 1; c < cols; ++c) m = std::max(m, in[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            v[r * cols + c] = std::exp(in[c] - m);
            sum += v[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] /= sum;
    }
    NodePtr nx = x.node();
    return make_op("softmax", x.shape(), std::move(v), {x}, [nx, rows, cols](detail::Node& out) {
        softmax_backward_rows(out.value, out.grad, rows, cols, acc(nx));
    });
}

Tensor masked_softmax_rows(const Tensor& logits, const Tensor& mask) {
    require_same_shape("masked_softmax", logits, mask);
    if (logits.rank() != 2) {
        throw DimensionError("masked_softmax: expected 2-D, got " + shape_str(logits.shape()));
    }
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    std::vector<double> v(logits.numel(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = logits.data() + r * cols;
        const double* mk = mask.data() + r * cols;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) {
            if (mk[c] != 0.0) m = std::max(m, in[c]);
        }
        if (!std::isfinite(m)) continue;  // row fully masked -> all zeros
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            if (mk[c] != 0.0) {
                v[r * cols + c] = std::exp(in[c] - m);
                sum += v[r * cols + c];
            }
        }
        for (std::size_t c = 0; c < cols; ++c) {
            if (mk[c] != 0.0) v[r * cols + c] /= sum;
        }
    }
    NodePtr nl = logits.node();
    return make_op("masked_softmax", logits.shape(), std::move(v), {logits},
                   [nl, rows, cols](detail::Node& out) {
                       // 0 entries contribute dx = 0, so the dense formula is exact
                       softmax_backward_rows(out.value, out.grad, rows, cols, acc(nl));
                   });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
    const std::size_t width = x.shape().back();
    if (gamma.numel() != width || beta.numel() != width) {
        throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) +
                             " do not match last dim " + std::to_string(width));
    }
    const std::size_t rows = x.numel() / width;
    std::vector<double> v(x.numel());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data() + r * width;
        double mean = 0.0;
        for (std::size_t c = 0; c < width; ++c) mean += in[c];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t c = 0; c < width; ++c) var += (in[c] - mean) * (in[c] - mean);
        var /= static_cast<double>(width);
        const double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = istd;
        for (std::size_t c = 0; c < width; ++c) {
            const double h = (in[c] - mean) * istd;
            (*xhat)[r * width + c] = h;
            v[r * width + c] = gamma.data()[c] * h + beta.data()[c];
        }
    }
    NodePtr nx = x.node(), ng = gamma.node(), nb = beta.node();
    return make_op("layer_norm", x.shape(), std::move(v), {x, gamma, beta},
                   [nx, ng, nb, xhat, inv_std, rows, width](detail::Node& out) {
                       auto& gx = acc(nx);
                       auto& gg = acc(ng);
                       auto& gb = acc(nb);
                       for (std::size_t r = 0; r < rows; ++r) {
                           double sum_dh = 0.0, sum_dh_h = 0.0;
                           for (std::size_t c = 0; c < width; ++c) {
                               const std::size_t i = r * width + c;
                               const double dh = out.grad[i] * ng->value[c];
                               sum_dh += dh;
                               sum_dh_h += dh * (*xhat)[i];
                               gg[c] += out.grad[i] * (*xhat)[i];
                               gb[c] += out.grad[i];
                           }
                           const double inv_n = 1.0 / static_cast<double>(width);
                           for (std::size_t c = 0; c < width; ++c) {
                               const std::size_t i = r * width + c;
                               const double dh = out.grad[i] * ng->value[c];
                               gx[i] += (*inv_std)[r] *
                                        (dh - inv_n * sum_dh - (*xhat)[i] * inv_n * sum_dh_h);
                           }
                       }
                   });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training, bool update_stats,
                    double momentum, double eps) {
    if (x.rank() != 4) throw DimensionError("batch_norm2d: expected 4-D, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
        running_var.numel() != c) {
        throw DimensionError("batch_norm2d: per-channel params do not match channel count " +
                             std::to_string(c));
    }
    const std::size_t count = n * hw;
    std::vector<double> v(x.numel());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(c);

    for (std::size_t ch = 0; ch < c; ++ch) {
        double mean, var;
        if (training) {
            double sum = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
                const double* p = x.data() + (s * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) sum += p[i];
            }
            mean = sum / static_cast<double>(count);
            double sq = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
                const double* p = x.data() + (s * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) sq += (p[i] - mean) * (p[i] - mean);
            }
            var = sq / static_cast<double>(count);
            if (update_stats) {
                const double unbiased =
                    count > 1 ? sq / static_cast<double>(count - 1) : var;
                running_mean.value()[ch] = (1.0 - momentum) * running_mean.value()[ch] +
                                           momentum * mean;
                running_var.value()[ch] = (1.0 - momentum) * running_var.value()[ch] +
                                          momentum * unbiased;
            }
        } else {
            mean = running_mean.value()[ch];
            var = running_var.value()[ch];
        }
        const double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[ch] = istd;
        const double g = gamma.data()[ch], b = beta.data()[ch];
        for (std::size_t s = 0; s < n; ++s) {
            const double* p = x.data() + (s * c + ch) * hw;
            double* h = xhat->data() + (s * c + ch) * hw;
            double* o = v.data() + (s * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                h[i] = (p[i] - mean) * istd;
                o[i] = g * h[i] + b;
            }
        }
    }

    NodePtr nx = x.node(), ng = gamma.node(), nb = beta.node();
    return make_op(
        "batch_norm2d", x.shape(), std::move(v), {x, gamma, beta},
        [nx, ng, nb, xhat, inv_std, n, c, hw, count, training](detail::Node& out) {
            auto& gx = acc(nx);
            auto& gg = acc(ng);
            auto& gb = acc(nb);
            for (std::size_t ch = 0; ch < c; ++ch) {
                double sum_dy = 0.0, sum_dy_h = 0.0;
                for (std::size_t s = 0; s < n; ++s) {
                    const std::size_t base = (s * c + ch) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        sum_dy += out.grad[base + i];
                        sum_dy_h += out.grad[base + i] * (*xhat)[base + i];
                    }
                }
                gg[ch] += sum_dy_h;
                gb[ch] += sum_dy;
                const double g = ng->value[ch], istd = (*inv_std)[ch];
                if (training) {
                    const double inv_count = 1.0 / static_cast<double>(count);
                    for (std::size_t s = 0; s < n; ++s) {
                        const std::size_t base = (s * c + ch) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            gx[base + i] += g * istd *
                                            (out.grad[base + i] - inv_count * sum_dy -
                                             (*xhat)[base + i] * inv_count * sum_dy_h);
                        }
                    }
                } else {
                    for (std::size_t s = 0; s < n; ++s) {
                        const std::size_t base = (s * c + ch) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            gx[base + i] += g * istd * out.grad[base + i];
                        }
                    }
                }
            }
        });
}

Tensor cross_entropy_logits(const Tensor& logits, std::size_t target) {
    if (logits.rank() != 1) {
        throw DimensionError("cross_entropy: expected logits vector, got " +
                             shape_str(logits.shape()));
    }
    const std::size_t n = logits.numel();
    if (target >= n) throw ContractError("cross_entropy: target class out of range");
    double m = logits.data()[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, logits.data()[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(logits.data()[i] - m);
    const double lse = m + std::log(sum);
    const double loss = lse - logits.data()[target];
    NodePtr nl = logits.node();
    return make_op("cross_entropy", {1}, {loss}, {logits}, [nl, target, lse](detail::Node& out) {
        auto& gl = acc(nl);
        for (std::size_t i = 0; i < gl.size(); ++i) {
            const double p = std::exp(nl->value[i] - lse);
            gl[i] += out.grad[0] * (p - (i == target ? 1.0 : 0.0));
        }
    });
}

Tensor bce_logits_mean(const Tensor& logits, const Tensor& labels) {
    require_same_shape("bce", logits, labels);
    const std::size_t m = logits.numel();
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double y = labels.data()[i];
        if (y != 0.0 && y != 1.0) {
            throw ContractError("bce: label must be 0 or 1, got " + std::to_string(y));
        }
        const double x = logits.data()[i];
        total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    const double inv = 1.0 / static_cast<double>(m);
    NodePtr nl = logits.node(), ny = labels.node();
    return make_op("bce", {1}, {total * inv}, {logits, labels}, [nl, ny, inv](detail::Node& out) {
        auto& gl = acc(nl);
        for (std::size_t i = 0; i < gl.size(); ++i) {
            const double x = nl->value[i];
            const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            gl[i] += out.grad[0] * inv * (s - ny->value[i]);
        }
    });
}

}  // namespace fedmer
