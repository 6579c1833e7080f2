// SPDX-License-Identifier: Apache-2.0
#include "peerkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace peerkd {

int64_t shape_size(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ' ';
        os << s[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

void TensorNode::accumulate(std::span<const double> g) {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

} // namespace detail

using detail::TensorNode;

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : node_(std::make_shared<TensorNode>()) {
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->values.assign(static_cast<size_t>(shape_size(node_->shape)), fill);
    node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<TensorNode>()) {
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_size(shape) != static_cast<int64_t>(values.size())) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
    return node_->values[0];
}

Tensor& Tensor::set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
}

std::span<const double> Tensor::grad() const {
    if (node_->grad.empty())
        throw ContractError("tensor has no gradient (backward not run or zero_grad cleared it)");
    return node_->grad;
}

namespace {

thread_local int g_no_grad_depth = 0;

// Attach parents and a pull-style gradient rule to `out`. No-op when
// recording is disabled or no input participates in differentiation.
void record(const Tensor& out, std::initializer_list<Tensor> inputs,
            std::function<void(const TensorNode&)> fn) {
    if (g_no_grad_depth > 0) return;
    bool need = false;
    for (const Tensor& t : inputs) need = need || t.requires_grad();
    if (!need) return;
    TensorNode* n = out.node();
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) n->parents.push_back(t.node_ptr());
    n->backprop = std::move(fn);
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

} // namespace

bool grad_enabled() { return g_no_grad_depth == 0; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    Tensor out(a.shape());
    auto& o = out.raw();
    auto av = a.values();
    auto bv = b.values();
    for (size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
    record(out, {a, b}, [pa = a.node_ptr(), pb = b.node_ptr()](const TensorNode& self) {
        if (pa->requires_grad) pa->accumulate(self.grad);
        if (pb->requires_grad) pb->accumulate(self.grad);
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    Tensor out(a.shape());
    auto& o = out.raw();
    auto av = a.values();
    auto bv = b.values();
    for (size_t i = 0; i < o.size(); ++i) o[i] = av[i] - bv[i];
    record(out, {a, b}, [pa = a.node_ptr(), pb = b.node_ptr()](const TensorNode& self) {
        if (pa->requires_grad) pa->accumulate(self.grad);
        if (pb->requires_grad) {
            std::vector<double> g(self.grad.size());
            for (size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
            pb->accumulate(g);
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    Tensor out(a.shape());
    auto& o = out.raw();
    auto av = a.values();
    auto bv = b.values();
    for (size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
    record(out, {a, b}, [pa = a.node_ptr(), pb = b.node_ptr()](const TensorNode& self) {
        std::vector<double> g(self.grad.size());
        if (pa->requires_grad) {
            for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * pb->values[i];
            pa->accumulate(g);
        }
        if (pb->requires_grad) {
            for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * pa->values[i];
            pb->accumulate(g);
        }
    });
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    auto& o = out.raw();
    auto av = a.values();
    for (size_t i = 0; i < o.size(); ++i) o[i] = av[i] * c;
    record(out, {a}, [pa = a.node_ptr(), c](const TensorNode& self) {
        std::vector<double> g(self.grad.size());
        for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * c;
        pa->accumulate(g);
    });
    return out;
}

Tensor add_row_vector(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0)) {
        throw ShapeError("add_row_vector: incompatible shapes " + shape_str(x.shape()) +
                         " and " + shape_str(bias.shape()));
    }
    const int64_t n = x.dim(0), d = x.dim(1);
    Tensor out(x.shape());
    auto& o = out.raw();
    auto xv = x.values();
    auto bv = bias.values();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) o[i * d + j] = xv[i * d + j] + bv[j];
    record(out, {x, bias}, [px = x.node_ptr(), pb = bias.node_ptr(), n, d](const TensorNode& self) {
        if (px->requires_grad) px->accumulate(self.grad);
        if (pb->requires_grad) {
            std::vector<double> g(static_cast<size_t>(d), 0.0);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
            pb->accumulate(g);
        }
    });
    return out;
}

Tensor add_channel_vector(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 4 || bias.rank() != 1 || x.dim(1) != bias.dim(0)) {
        throw ShapeError("add_channel_vector: incompatible shapes " + shape_str(x.shape()) +
                         " and " + shape_str(bias.shape()));
    }
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out(x.shape());
    auto& o = out.raw();
    auto xv = x.values();
    auto bv = bias.values();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const int64_t base = (i * c + ch) * hw;
            for (int64_t k = 0; k < hw; ++k) o[base + k] = xv[base + k] + bv[ch];
        }
    record(out, {x, bias}, [px = x.node_ptr(), pb = bias.node_ptr(), n, c, hw](const TensorNode& self) {
        if (px->requires_grad) px->accumulate(self.grad);
        if (pb->requires_grad) {
            std::vector<double> g(static_cast<size_t>(c), 0.0);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    const int64_t base = (i * c + ch) * hw;
                    for (int64_t k = 0; k < hw; ++k) g[ch] += self.grad[base + k];
                }
            pb->accumulate(g);
        }
    });
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    auto& o = out.raw();
    auto av = a.values();
    for (size_t i = 0; i < o.size(); ++i) o[i] = av[i] > 0.0 ? av[i] : 0.0;
    record(out, {a}, [pa = a.node_ptr()](const TensorNode& self) {
        std::vector<double> g(self.grad.size());
        for (size_t i = 0; i < g.size(); ++i) g[i] = pa->values[i] > 0.0 ? self.grad[i] : 0.0;
        pa->accumulate(g);
    });
    return out;
}

Tensor exp(const Tensor& a) {
    Tensor out(a.shape());
    auto& o = out.raw();
    auto av = a.values();
    for (size_t i = 0; i < o.size(); ++i) o[i] = std::exp(av[i]);
    record(out, {a}, [pa = a.node_ptr()](const TensorNode& self) {
        std::vector<double> g(self.grad.size());
        for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * self.values[i];
        pa->accumulate(g);
    });
    return out;
}

Tensor clamp_min(const Tensor& a, double lo) {
    Tensor out(a.shape());
    auto& o = out.raw();
    auto av = a.values();
    for (size_t i = 0; i < o.size(); ++i) o[i] = av[i] < lo ? lo : av[i];
    record(out, {a}, [pa = a.node_ptr(), lo](const TensorNode& self) {
        std::vector<double> g(self.grad.size());
        for (size_t i = 0; i < g.size(); ++i) g[i] = pa->values[i] < lo ? 0.0 : self.grad[i];
        pa->accumulate(g);
    });
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 tensors, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    const int64_t r = a.dim(0), k = a.dim(1), c = b.dim(1);
    Tensor out(Shape{r, c});
    auto& o = out.raw();
    auto av = a.values();
    auto bv = b.values();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            for (int64_t j = 0; j < c; ++j) o[i * c + j] += aip * bv[p * c + j];
        }
    record(out, {a, b}, [pa = a.node_ptr(), pb = b.node_ptr(), r, k, c](const TensorNode& self) {
        if (pa->requires_grad) { // dA = dC * B^T
            std::vector<double> g(static_cast<size_t>(r * k), 0.0);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) {
                    const double d = self.grad[i * c + j];
                    if (d == 0.0) continue;
                    for (int64_t p = 0; p < k; ++p) g[i * k + p] += d * pb->values[p * c + j];
                }
            pa->accumulate(g);
        }
        if (pb->requires_grad) { // dB = A^T * dC
            std::vector<double> g(static_cast<size_t>(k * c), 0.0);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t p = 0; p < k; ++p) {
                    const double aip = pa->values[i * k + p];
                    if (aip == 0.0) continue;
                    for (int64_t j = 0; j < c; ++j) g[p * c + j] += aip * self.grad[i * c + j];
                }
            pb->accumulate(g);
        }
    });
    return out;
}

namespace {

struct ConvDims {
    int64_t n, cin, h, w, cout, kh, kw, oh, ow;
    int stride, padding;
    int64_t patch() const { return cin * kh * kw; }
    int64_t rows() const { return n * oh * ow; }
};

// Patch matrix [rows, patch]: row (b, y, z) holds the receptive field of
// output pixel (y, z) of sample b, zero-filled where padding reaches outside.
std::vector<double> im2col(std::span<const double> xv, const ConvDims& d) {
    std::vector<double> cols(static_cast<size_t>(d.rows() * d.patch()), 0.0);
    for (int64_t b = 0; b < d.n; ++b)
        for (int64_t y = 0; y < d.oh; ++y)
            for (int64_t z = 0; z < d.ow; ++z) {
                double* row = cols.data() + ((b * d.oh + y) * d.ow + z) * d.patch();
                for (int64_t ci = 0; ci < d.cin; ++ci)
                    for (int64_t ky = 0; ky < d.kh; ++ky) {
                        const int64_t iy = y * d.stride + ky - d.padding;
                        if (iy < 0 || iy >= d.h) continue;
                        const double* src = &xv[((b * d.cin + ci) * d.h + iy) * d.w];
                        double* dst = row + (ci * d.kh + ky) * d.kw;
                        for (int64_t kx = 0; kx < d.kw; ++kx) {
                            const int64_t ix = z * d.stride + kx - d.padding;
                            if (ix >= 0 && ix < d.w) dst[kx] = src[ix];
                        }
                    }
            }
    return cols;
}

// Scatter-add of a patch-matrix gradient back onto the input layout.
void col2im_add(std::span<const double> cols, std::vector<double>& gx, const ConvDims& d) {
    for (int64_t b = 0; b < d.n; ++b)
        for (int64_t y = 0; y < d.oh; ++y)
            for (int64_t z = 0; z < d.ow; ++z) {
                const double* row = cols.data() + ((b * d.oh + y) * d.ow + z) * d.patch();
                for (int64_t ci = 0; ci < d.cin; ++ci)
                    for (int64_t ky = 0; ky < d.kh; ++ky) {
                        const int64_t iy = y * d.stride + ky - d.padding;
                        if (iy < 0 || iy >= d.h) continue;
                        double* dst = &gx[((b * d.cin + ci) * d.h + iy) * d.w];
                        const double* src = row + (ci * d.kh + ky) * d.kw;
                        for (int64_t kx = 0; kx < d.kw; ++kx) {
                            const int64_t ix = z * d.stride + kx - d.padding;
                            if (ix >= 0 && ix < d.w) dst[ix] += src[kx];
                        }
                    }
            }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int padding) {
    if (x.rank() != 4 || k.rank() != 4)
        throw ShapeError("conv2d: expected rank-4 input and kernel, got " + shape_str(x.shape()) +
                         " and " + shape_str(k.shape()));
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    if (padding < 0) throw ContractError("conv2d: padding must be >= 0");
    ConvDims d;
    d.n = x.dim(0), d.cin = x.dim(1), d.h = x.dim(2), d.w = x.dim(3);
    d.cout = k.dim(0), d.kh = k.dim(2), d.kw = k.dim(3);
    d.stride = stride, d.padding = padding;
    if (d.cin != k.dim(1))
        throw ShapeError("conv2d: channel mismatch: input " + shape_str(x.shape()) +
                         " vs kernel " + shape_str(k.shape()));
    if (d.kh > d.h + 2 * padding || d.kw > d.w + 2 * padding)
        throw ShapeError("conv2d: kernel " + shape_str(k.shape()) +
                         " larger than padded input " + shape_str(x.shape()) +
                         " (padding " + std::to_string(padding) + ")");
    d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
    d.ow = (d.w + 2 * padding - d.kw) / stride + 1;

    const std::vector<double> cols = im2col(x.values(), d);
    const int64_t K = d.patch();
    Tensor out(Shape{d.n, d.cout, d.oh, d.ow});
    auto& o = out.raw();
    auto kv = k.values();
    // Accumulate along the patch axis with the kernel transposed to
    // [K, cout]; the inner loop is then a contiguous axpy the compiler can
    // vectorize without reassociating a reduction.
    std::vector<double> kerT(static_cast<size_t>(K * d.cout));
    for (int64_t co = 0; co < d.cout; ++co)
        for (int64_t t = 0; t < K; ++t) kerT[t * d.cout + co] = kv[co * K + t];
    // Rows processed four at a time so each kernel column load feeds four
    // accumulator rows; the inner loops are contiguous fused multiply-adds.
    const int64_t rows = d.rows();
    const int64_t hw_out = d.oh * d.ow;
    std::vector<double> acc(static_cast<size_t>(4 * d.cout));
    auto scatter = [&](int64_t r, const double* a) {
        const int64_t b = r / hw_out;
        const int64_t yz = r % hw_out;
        for (int64_t co = 0; co < d.cout; ++co) o[(b * d.cout + co) * hw_out + yz] = a[co];
    };
    int64_t r = 0;
    for (; r + 4 <= rows; r += 4) {
        const double* r0 = cols.data() + r * K;
        const double* r1 = r0 + K;
        const double* r2 = r1 + K;
        const double* r3 = r2 + K;
        std::fill(acc.begin(), acc.end(), 0.0);
        double* a0 = acc.data();
        double* a1 = a0 + d.cout;
        double* a2 = a1 + d.cout;
        double* a3 = a2 + d.cout;
        for (int64_t t = 0; t < K; ++t) {
            const double v0 = r0[t], v1 = r1[t], v2 = r2[t], v3 = r3[t];
            if (v0 == 0.0 && v1 == 0.0 && v2 == 0.0 && v3 == 0.0) continue;
            const double* kt = kerT.data() + t * d.cout;
            for (int64_t co = 0; co < d.cout; ++co) {
                const double kc = kt[co];
                a0[co] += v0 * kc;
                a1[co] += v1 * kc;
                a2[co] += v2 * kc;
                a3[co] += v3 * kc;
            }
        }
        scatter(r, a0);
        scatter(r + 1, a1);
        scatter(r + 2, a2);
        scatter(r + 3, a3);
    }
    for (; r < rows; ++r) {
        const double* row = cols.data() + r * K;
        std::fill(acc.begin(), acc.begin() + d.cout, 0.0);
        for (int64_t t = 0; t < K; ++t) {
            const double v = row[t];
            if (v == 0.0) continue;
            const double* kt = kerT.data() + t * d.cout;
            for (int64_t co = 0; co < d.cout; ++co) acc[static_cast<size_t>(co)] += v * kt[co];
        }
        scatter(r, acc.data());
    }

    record(out, {x, k}, [px = x.node_ptr(), pk = k.node_ptr(), d, K](const TensorNode& self) {
        // Patch matrix is rebuilt here rather than captured; backward runs
        // once per step and the memory is better spent elsewhere.
        const std::vector<double> cols = im2col(px->values, d);
        // Transpose the output gradient to [rows, cout] once.
        std::vector<double> dout(static_cast<size_t>(d.rows() * d.cout));
        for (int64_t b = 0; b < d.n; ++b)
            for (int64_t co = 0; co < d.cout; ++co)
                for (int64_t y = 0; y < d.oh; ++y)
                    for (int64_t z = 0; z < d.ow; ++z)
                        dout[((b * d.oh + y) * d.ow + z) * d.cout + co] =
                            self.grad[((b * d.cout + co) * d.oh + y) * d.ow + z];
        if (pk->requires_grad) {
            std::vector<double> gk(pk->values.size(), 0.0);
            for (int64_t r = 0; r < d.rows(); ++r) {
                const double* row = cols.data() + r * K;
                const double* dr = dout.data() + r * d.cout;
                for (int64_t co = 0; co < d.cout; ++co) {
                    const double g = dr[co];
                    if (g == 0.0) continue;
                    double* dst = gk.data() + co * K;
                    for (int64_t t = 0; t < K; ++t) dst[t] += g * row[t];
                }
            }
            pk->accumulate(gk);
        }
        if (px->requires_grad) {
            std::vector<double> dcols(static_cast<size_t>(d.rows() * K), 0.0);
            for (int64_t r = 0; r < d.rows(); ++r) {
                const double* dr = dout.data() + r * d.cout;
                double* dst = dcols.data() + r * K;
                for (int64_t co = 0; co < d.cout; ++co) {
                    const double g = dr[co];
                    if (g == 0.0) continue;
                    const double* ker = &pk->values[co * K];
                    for (int64_t t = 0; t < K; ++t) dst[t] += g * ker[t];
                }
            }
            std::vector<double> gx(px->values.size(), 0.0);
            col2im_add(dcols, gx, d);
            px->accumulate(gx);
        }
    });
    return out;
}

Tensor log_softmax(const Tensor& z) {
    if (z.rank() != 2)
        throw ShapeError("log_softmax: expected [n,C] input, got " + shape_str(z.shape()));
    const int64_t n = z.dim(0), c = z.dim(1);
    if (c < 2) throw ContractError("log_softmax: needs at least 2 classes, got " + std::to_string(c));
    Tensor out(z.shape());
    auto& o = out.raw();
    auto zv = z.values();
    for (int64_t i = 0; i < n; ++i) {
        const double* row = &zv[i * c];
        double mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        for (int64_t j = 0; j < c; ++j) o[i * c + j] = row[j] - lse;
    }
    record(out, {z}, [pz = z.node_ptr(), n, c](const TensorNode& self) {
        // dz = dy - softmax(z) * rowsum(dy)
        std::vector<double> g(self.grad.size());
        for (int64_t i = 0; i < n; ++i) {
            double rowsum = 0.0;
            for (int64_t j = 0; j < c; ++j) rowsum += self.grad[i * c + j];
            for (int64_t j = 0; j < c; ++j)
                g[i * c + j] = self.grad[i * c + j] - std::exp(self.values[i * c + j]) * rowsum;
        }
        pz->accumulate(g);
    });
    return out;
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor out(Shape{}, {s});
    record(out, {a}, [pa = a.node_ptr()](const TensorNode& self) {
        std::vector<double> g(pa->values.size(), self.grad[0]);
        pa->accumulate(g);
    });
    return out;
}

Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor out(Shape{}, {s * inv});
    record(out, {a}, [pa = a.node_ptr(), inv](const TensorNode& self) {
        std::vector<double> g(pa->values.size(), self.grad[0] * inv);
        pa->accumulate(g);
    });
    return out;
}

Tensor concat_columns(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_columns: no inputs");
    const int64_t n = parts[0].dim(0);
    int64_t total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != 2 || t.dim(0) != n)
            throw ShapeError("concat_columns: expected [n,d_i] tensors with equal n, got " +
                             shape_str(t.shape()) + " vs n=" + std::to_string(n));
        total += t.dim(1);
    }
    Tensor out(Shape{n, total});
    auto& o = out.raw();
    int64_t off = 0;
    for (const Tensor& t : parts) {
        const int64_t d = t.dim(1);
        auto tv = t.values();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) o[i * total + off + j] = tv[i * d + j];
        off += d;
    }
    bool need = false;
    for (const Tensor& t : parts) need = need || t.requires_grad();
    if (grad_enabled() && need) {
        TensorNode* node = out.node();
        node->requires_grad = true;
        std::vector<int64_t> widths;
        for (const Tensor& t : parts) {
            node->parents.push_back(t.node_ptr());
            widths.push_back(t.dim(1));
        }
        node->backprop = [widths, n, total](const TensorNode& self) {
            int64_t off2 = 0;
            for (size_t p = 0; p < widths.size(); ++p) {
                const int64_t d = widths[p];
                auto& parent = self.parents[p];
                if (parent->requires_grad) {
                    std::vector<double> g(static_cast<size_t>(n * d));
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < d; ++j) g[i * d + j] = self.grad[i * total + off2 + j];
                    parent->accumulate(g);
                }
                off2 += d;
            }
        };
    }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4)
        throw ShapeError("global_avg_pool: expected [n,c,h,w] input, got " + shape_str(x.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const double inv = 1.0 / static_cast<double>(hw);
    Tensor out(Shape{n, c});
    auto& o = out.raw();
    auto xv = x.values();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            const int64_t base = (i * c + ch) * hw;
            for (int64_t k = 0; k < hw; ++k) s += xv[base + k];
            o[i * c + ch] = s * inv;
        }
    record(out, {x}, [px = x.node_ptr(), n, c, hw, inv](const TensorNode& self) {
        std::vector<double> g(px->values.size());
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                const double d = self.grad[i * c + ch] * inv;
                const int64_t base = (i * c + ch) * hw;
                for (int64_t k = 0; k < hw; ++k) g[base + k] = d;
            }
        px->accumulate(g);
    });
    return out;
}

Tensor flatten_rows(const Tensor& x) {
    if (x.rank() < 2)
        throw ShapeError("flatten_rows: expected rank >= 2, got " + shape_str(x.shape()));
    const int64_t n = x.dim(0);
    const int64_t rest = x.size() / n;
    Tensor out(Shape{n, rest}, std::vector<double>(x.values().begin(), x.values().end()));
    record(out, {x}, [px = x.node_ptr()](const TensorNode& self) { px->accumulate(self.grad); });
    return out;
}

Tensor detach(const Tensor& a) {
    return Tensor(a.shape(), std::vector<double>(a.values().begin(), a.values().end()));
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double momentum, double eps) {
    const int rank = x.rank();
    if (rank != 2 && rank != 4)
        throw ShapeError("batch_norm: expected [n,f] or [n,c,h,w] input, got " + shape_str(x.shape()));
    const int64_t n = x.dim(0);
    const int64_t c = x.dim(1);
    const int64_t hw = rank == 4 ? x.dim(2) * x.dim(3) : 1;
    const int64_t m = n * hw; // reduction count per channel
    if (gamma.size() != c || beta.size() != c || running_mean.size() != c || running_var.size() != c)
        throw ShapeError("batch_norm: parameter size must equal channel count " + std::to_string(c));

    auto at = [c, hw](int64_t i, int64_t ch, int64_t k) { return (i * c + ch) * hw + k; };

    std::vector<double> mu(static_cast<size_t>(c), 0.0);
    std::vector<double> invstd(static_cast<size_t>(c), 0.0);
    auto xv = x.values();
    if (training) {
        for (int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (int64_t i = 0; i < n; ++i)
                for (int64_t k = 0; k < hw; ++k) s += xv[at(i, ch, k)];
            mu[ch] = s / static_cast<double>(m);
            double v = 0.0;
            for (int64_t i = 0; i < n; ++i)
                for (int64_t k = 0; k < hw; ++k) {
                    const double d = xv[at(i, ch, k)] - mu[ch];
                    v += d * d;
                }
            const double var_biased = v / static_cast<double>(m);
            invstd[ch] = 1.0 / std::sqrt(var_biased + eps);
            // Running buffers track batch statistics; variance stored unbiased.
            const double var_unbiased = m > 1 ? v / static_cast<double>(m - 1) : var_biased;
            running_mean.raw()[ch] = (1.0 - momentum) * running_mean.raw()[ch] + momentum * mu[ch];
            running_var.raw()[ch] = (1.0 - momentum) * running_var.raw()[ch] + momentum * var_unbiased;
        }
    } else {
        for (int64_t ch = 0; ch < c; ++ch) {
            mu[ch] = running_mean.values()[ch];
            invstd[ch] = 1.0 / std::sqrt(running_var.values()[ch] + eps);
        }
    }

    Tensor out(x.shape());
    auto& o = out.raw();
    auto gv = gamma.values();
    auto bv = beta.values();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t k = 0; k < hw; ++k) {
                const int64_t idx = at(i, ch, k);
                o[idx] = (xv[idx] - mu[ch]) * invstd[ch] * gv[ch] + bv[ch];
            }

    record(out, {x, gamma, beta},
           [px = x.node_ptr(), pg = gamma.node_ptr(), pb = beta.node_ptr(), mu, invstd, training, n,
            c, hw, m, at](const TensorNode& self) {
               std::vector<double> dgamma(static_cast<size_t>(c), 0.0);
               std::vector<double> dbeta(static_cast<size_t>(c), 0.0);
               std::vector<double> dxhat_sum(static_cast<size_t>(c), 0.0);
               for (int64_t ch = 0; ch < c; ++ch) {
                   for (int64_t i = 0; i < n; ++i)
                       for (int64_t k = 0; k < hw; ++k) {
                           const int64_t idx = at(i, ch, k);
                           const double xhat = (px->values[idx] - mu[ch]) * invstd[ch];
                           dgamma[ch] += self.grad[idx] * xhat;
                           dbeta[ch] += self.grad[idx];
                       }
                   dxhat_sum[ch] = dgamma[ch]; // sum of dy * xhat
               }
               if (px->requires_grad) {
                   std::vector<double> gx(px->values.size());
                   const double invm = 1.0 / static_cast<double>(m);
                   for (int64_t ch = 0; ch < c; ++ch) {
                       const double gscale = pg->values[ch] * invstd[ch];
                       for (int64_t i = 0; i < n; ++i)
                           for (int64_t k = 0; k < hw; ++k) {
                               const int64_t idx = at(i, ch, k);
                               if (training) {
                                   const double xhat = (px->values[idx] - mu[ch]) * invstd[ch];
                                   gx[idx] = gscale * (self.grad[idx] - dbeta[ch] * invm -
                                                       xhat * dxhat_sum[ch] * invm);
                               } else {
                                   gx[idx] = gscale * self.grad[idx];
                               }
                           }
                   }
                   px->accumulate(gx);
               }
               if (pg->requires_grad) pg->accumulate(dgamma);
               if (pb->requires_grad) pb->accumulate(dbeta);
           });
    return out;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward requires a scalar loss" +
                            (loss.defined() ? ", got shape " + shape_str(loss.shape()) : std::string()));
    TensorNode* root = loss.node();
    if (!root->requires_grad) return; // nothing reachable requires grad

    // Post-order DFS so each node appears after all of its parents; the
    // reversed order then visits every consumer before its producers.
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next].get();
            ++next;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    root->accumulate(std::vector<double>{1.0});
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backprop && !node->grad.empty()) node->backprop(*node);
    }
    // Interior gradients are scratch space; only leaves keep theirs.
    for (TensorNode* node : topo) {
        if (node->backprop) node->grad.clear();
    }
}

} // namespace peerkd
