#include "autofed/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace autofed {

namespace {

thread_local bool t_grad_enabled = true;

std::int64_t shape_size(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream ss;
    ss << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) ss << (i ? "," : "") << shape[i];
    ss << "]";
    return ss.str();
}

void check_positive_dims(const std::vector<int>& shape, const char* what) {
    for (int d : shape) {
        if (d <= 0) throw ConfigError(std::string(what) + ": nonpositive dim in " + shape_str(shape));
    }
}

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) throw InvariantError(std::string("non-finite value after ") + op);
    }
}

TensorNodePtr new_node(std::vector<int> shape, std::vector<double> data) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

// Wires parents and the backward closure when the tape is active.
Tensor finish(TensorNodePtr node, const char* op, std::vector<TensorNodePtr> parents,
              std::function<void(TensorNode&)> fn) {
    check_finite(node->data, op);
    bool track = false;
    if (t_grad_enabled) {
        for (const auto& p : parents)
            if (p->requires_grad) track = true;
    }
    if (track) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return Tensor(std::move(node));
}

void accumulate(TensorNode& n, std::size_t i, double v) {
    n.grad[i] += v;
}

constexpr double kBceEps = 1e-7;

}  // namespace

std::int64_t TensorNode::size() const { return shape_size(shape); }

void TensorNode::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

Tensor Tensor::zeros(std::vector<int> shape) {
    check_positive_dims(shape, "zeros");
    const auto n = static_cast<std::size_t>(shape_size(shape));
    return Tensor(new_node(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    check_positive_dims(shape, "full");
    const auto n = static_cast<std::size_t>(shape_size(shape));
    return Tensor(new_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data) {
    check_positive_dims(shape, "from");
    if (shape_size(shape) != static_cast<std::int64_t>(data.size()))
        throw ConfigError("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    return Tensor(new_node(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

double Tensor::item() const {
    if (size() != 1) throw InputError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const auto& s = shape();
    if (idx.size() != s.size()) throw InputError("index arity mismatch");
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (int i : idx) {
        flat = flat * s[k] + i;
        ++k;
    }
    return node_->data[static_cast<std::size_t>(flat)];
}

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }
bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------- elementwise

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto out = new_node(a.shape(), a.data());
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] += bd[i];
    auto pa = a.ptr(), pb = b.ptr();
    return finish(out, "add", {pa, pb}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) accumulate(*pa, i, self.grad[i]);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) accumulate(*pb, i, self.grad[i]);
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto out = new_node(a.shape(), a.data());
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] -= bd[i];
    auto pa = a.ptr(), pb = b.ptr();
    return finish(out, "sub", {pa, pb}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) accumulate(*pa, i, self.grad[i]);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) accumulate(*pb, i, -self.grad[i]);
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto out = new_node(a.shape(), a.data());
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] *= bd[i];
    auto pa = a.ptr(), pb = b.ptr();
    return finish(out, "mul", {pa, pb}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                accumulate(*pa, i, self.grad[i] * pb->data[i]);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                accumulate(*pb, i, self.grad[i] * pa->data[i]);
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    auto out = new_node(a.shape(), a.data());
    for (auto& v : out->data) v *= c;
    auto pa = a.ptr();
    return finish(out, "scale", {pa}, [pa, c](TensorNode& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) accumulate(*pa, i, self.grad[i] * c);
    });
}

// ------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw ConfigError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (int i = 0; i < m; ++i) {
        double* orow = out.data() + static_cast<std::size_t>(i) * n;
        const double* arow = ad + static_cast<std::size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const double av = arow[l];
            const double* brow = bd + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    auto node = new_node({m, n}, std::move(out));
    auto pa = a.ptr(), pb = b.ptr();
    return finish(node, "matmul", {pa, pb}, [pa, pb, m, k, n](TensorNode& self) {
        const double* g = self.grad.data();
        if (pa->requires_grad) {
            pa->ensure_grad();
            // ga = g . b^T
            for (int i = 0; i < m; ++i)
                for (int l = 0; l < k; ++l) {
                    double acc = 0.0;
                    const double* grow = g + static_cast<std::size_t>(i) * n;
                    const double* brow = pb->data.data() + static_cast<std::size_t>(l) * n;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    pa->grad[static_cast<std::size_t>(i) * k + l] += acc;
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            // gb = a^T . g
            for (int l = 0; l < k; ++l) {
                double* gbrow = pb->grad.data() + static_cast<std::size_t>(l) * n;
                for (int i = 0; i < m; ++i) {
                    const double av = pa->data[static_cast<std::size_t>(i) * k + l];
                    const double* grow = g + static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
    });
}

Tensor transpose2d(const Tensor& a) {
    if (a.shape().size() != 2) throw ConfigError("transpose2d: expected 2-d tensor");
    const int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.data().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(j) * m + i] = a.data()[static_cast<std::size_t>(i) * n + j];
    auto node = new_node({n, m}, std::move(out));
    auto pa = a.ptr();
    return finish(node, "transpose2d", {pa}, [pa, m, n](TensorNode& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                pa->grad[static_cast<std::size_t>(i) * n + j] +=
                    self.grad[static_cast<std::size_t>(j) * m + i];
    });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    check_positive_dims(shape, "reshape");
    if (shape_size(shape) != a.size())
        throw ConfigError("reshape: size mismatch " + shape_str(a.shape()) + " -> " +
                          shape_str(shape));
    auto node = new_node(std::move(shape), a.data());
    auto pa = a.ptr();
    return finish(node, "reshape", {pa}, [pa](TensorNode& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(1) != b.dim(1) ||
        a.dim(2) != b.dim(2))
        throw ConfigError("concat_channels: incompatible " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    const auto na = a.data().size(), nb = b.data().size();
    std::vector<double> out;
    out.reserve(na + nb);
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    auto node = new_node({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out));
    auto pa = a.ptr(), pb = b.ptr();
    return finish(node, "concat_channels", {pa, pb}, [pa, pb, na](TensorNode& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < na; ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = na; i < self.grad.size(); ++i) pb->grad[i - na] += self.grad[i];
        }
    });
}

Tensor gather(const Tensor& a, std::vector<std::int64_t> indices) {
    const auto n = a.size();
    for (auto i : indices)
        if (i < 0 || i >= n) throw InputError("gather: index out of range");
    std::vector<double> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i)
        out[i] = a.data()[static_cast<std::size_t>(indices[i])];
    auto node = new_node({static_cast<int>(indices.size())}, std::move(out));
    auto pa = a.ptr();
    auto idx = std::make_shared<std::vector<std::int64_t>>(std::move(indices));
    return finish(node, "gather", {pa}, [pa, idx](TensorNode& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < idx->size(); ++i)
            pa->grad[static_cast<std::size_t>((*idx)[i])] += self.grad[i];
    });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    const bool vector_in = input.shape().size() == 1;
    if (weight.shape().size() != 2) throw ConfigError("linear: weight must be 2-d");
    const int dout = weight.dim(0), din = weight.dim(1);
    const int s = vector_in ? 1 : input.dim(0);
    const int in_features = vector_in ? input.dim(0) : input.dim(1);
    if ((!vector_in && input.shape().size() != 2) || in_features != din)
        throw ConfigError("linear: input " + shape_str(input.shape()) + " vs weight " +
                          shape_str(weight.shape()));
    if (bias.shape().size() != 1 || bias.dim(0) != dout)
        throw ConfigError("linear: bias " + shape_str(bias.shape()) + " vs dout " +
                          std::to_string(dout));
    std::vector<double> out(static_cast<std::size_t>(s) * dout);
    const double* x = input.data().data();
    const double* w = weight.data().data();
    const double* b = bias.data().data();
    for (int r = 0; r < s; ++r) {
        const double* xr = x + static_cast<std::size_t>(r) * din;
        double* orow = out.data() + static_cast<std::size_t>(r) * dout;
        for (int o = 0; o < dout; ++o) {
            const double* wrow = w + static_cast<std::size_t>(o) * din;
            double acc = b[o];
            for (int i = 0; i < din; ++i) acc += xr[i] * wrow[i];
            orow[o] = acc;
        }
    }
    auto node = new_node(vector_in ? std::vector<int>{dout} : std::vector<int>{s, dout},
                         std::move(out));
    auto px = input.ptr(), pw = weight.ptr(), pb = bias.ptr();
    return finish(node, "linear", {px, pw, pb}, [px, pw, pb, s, din, dout](TensorNode& self) {
        const double* g = self.grad.data();
        if (px->requires_grad) {
            px->ensure_grad();
            for (int r = 0; r < s; ++r)
                for (int i = 0; i < din; ++i) {
                    double acc = 0.0;
                    for (int o = 0; o < dout; ++o)
                        acc += g[static_cast<std::size_t>(r) * dout + o] *
                               pw->data[static_cast<std::size_t>(o) * din + i];
                    px->grad[static_cast<std::size_t>(r) * din + i] += acc;
                }
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            for (int o = 0; o < dout; ++o)
                for (int i = 0; i < din; ++i) {
                    double acc = 0.0;
                    for (int r = 0; r < s; ++r)
                        acc += g[static_cast<std::size_t>(r) * dout + o] *
                               px->data[static_cast<std::size_t>(r) * din + i];
                    pw->grad[static_cast<std::size_t>(o) * din + i] += acc;
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int o = 0; o < dout; ++o) {
                double acc = 0.0;
                for (int r = 0; r < s; ++r) acc += g[static_cast<std::size_t>(r) * dout + o];
                pb->grad[o] += acc;
            }
        }
    });
}

// ------------------------------------------------------------- nonlinearities

Tensor leaky_relu(const Tensor& a, double slope) {
    auto out = new_node(a.shape(), a.data());
    for (auto& v : out->data)
        if (v < 0.0) v *= slope;
    auto pa = a.ptr();
    return finish(out, "leaky_relu", {pa}, [pa, slope](TensorNode& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * (pa->data[i] >= 0.0 ? 1.0 : slope);
    });
}

Tensor sigmoid(const Tensor& a) {
    auto out = new_node(a.shape(), a.data());
    for (auto& v : out->data) {
        if (v >= 0.0) {
            v = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            v = e / (1.0 + e);
        }
    }
    auto pa = a.ptr();
    return finish(out, "sigmoid", {pa}, [pa](TensorNode& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double y = self.data[i];
            pa->grad[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor softmax(const Tensor& a, int axis) {
    const auto& s = a.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ConfigError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(s));
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
    const int n = s[static_cast<std::size_t>(axis)];
    auto out = new_node(a.shape(), a.data());
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            double* base = out->data.data() + o * n * inner + in;
            double mx = base[0];
            for (int i = 1; i < n; ++i) mx = std::max(mx, base[static_cast<std::size_t>(i) * inner]);
            double total = 0.0;
            for (int i = 0; i < n; ++i) {
                double& v = base[static_cast<std::size_t>(i) * inner];
                v = std::exp(v - mx);
                total += v;
            }
            for (int i = 0; i < n; ++i) base[static_cast<std::size_t>(i) * inner] /= total;
        }
    auto pa = a.ptr();
    return finish(out, "softmax", {pa}, [pa, outer, inner, n](TensorNode& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::size_t off = static_cast<std::size_t>(o * n * inner + in);
                double dot = 0.0;
                for (int i = 0; i < n; ++i) {
                    const std::size_t k = off + static_cast<std::size_t>(i) * inner;
                    dot += self.grad[k] * self.data[k];
                }
                for (int i = 0; i < n; ++i) {
                    const std::size_t k = off + static_cast<std::size_t>(i) * inner;
                    pa->grad[k] += self.data[k] * (self.grad[k] - dot);
                }
            }
    });
}

// ---------------------------------------------------------------- convolution

namespace {

int conv_out_dim(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

void check_conv_args(const Tensor& input, const Tensor& kernel, int stride, int padding,
                     bool transposed) {
    if (input.shape().size() != 3)
        throw ConfigError("conv: input must be [C,H,W], got " + shape_str(input.shape()));
    if (kernel.shape().size() != 4)
        throw ConfigError("conv: kernel must be 4-d, got " + shape_str(kernel.shape()));
    if (stride < 1 || padding < 0) throw ConfigError("conv: bad stride/padding");
    const int c_axis = transposed ? 0 : 1;
    if (kernel.dim(c_axis) != input.dim(0))
        throw ConfigError("conv: channel mismatch input " + shape_str(input.shape()) +
                          " kernel " + shape_str(kernel.shape()));
    if (!transposed) {
        if (kernel.dim(2) > input.dim(1) + 2 * padding || kernel.dim(3) > input.dim(2) + 2 * padding)
            throw ConfigError("conv: kernel " + shape_str(kernel.shape()) +
                              " larger than padded input " + shape_str(input.shape()));
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    check_conv_args(input, kernel, stride, padding, false);
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    const int O = kernel.dim(0), Kh = kernel.dim(2), Kw = kernel.dim(3);
    const int Ho = conv_out_dim(H, Kh, stride, padding);
    const int Wo = conv_out_dim(W, Kw, stride, padding);
    if (Ho <= 0 || Wo <= 0)
        throw ConfigError("conv: empty output for input " + shape_str(input.shape()));
    std::vector<double> out(static_cast<std::size_t>(O) * Ho * Wo, 0.0);
    const double* x = input.data().data();
    const double* k = kernel.data().data();
    for (int o = 0; o < O; ++o) {
        double* oplane = out.data() + static_cast<std::size_t>(o) * Ho * Wo;
        for (int c = 0; c < C; ++c) {
            const double* xplane = x + static_cast<std::size_t>(c) * H * W;
            const double* kbase = k + (static_cast<std::size_t>(o) * C + c) * Kh * Kw;
            for (int ky = 0; ky < Kh; ++ky)
                for (int kx = 0; kx < Kw; ++kx) {
                    const double w = kbase[ky * Kw + kx];
                    if (w == 0.0) continue;
                    for (int oy = 0; oy < Ho; ++oy) {
                        const int iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= H) continue;
                        const double* xrow = xplane + static_cast<std::size_t>(iy) * W;
                        double* orow = oplane + static_cast<std::size_t>(oy) * Wo;
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride - padding + kx;
                            if (ix < 0 || ix >= W) continue;
                            orow[ox] += w * xrow[ix];
                        }
                    }
                }
        }
    }
    auto node = new_node({O, Ho, Wo}, std::move(out));
    auto px = input.ptr(), pk = kernel.ptr();
    return finish(node, "conv2d", {px, pk},
                  [px, pk, C, H, W, O, Kh, Kw, Ho, Wo, stride, padding](TensorNode& self) {
        const double* g = self.grad.data();
        for (int o = 0; o < O; ++o) {
            const double* gplane = g + static_cast<std::size_t>(o) * Ho * Wo;
            for (int c = 0; c < C; ++c) {
                const std::size_t koff = (static_cast<std::size_t>(o) * C + c) * Kh * Kw;
                for (int ky = 0; ky < Kh; ++ky)
                    for (int kx = 0; kx < Kw; ++kx) {
                        const double w = pk->data[koff + ky * Kw + kx];
                        double kacc = 0.0;
                        for (int oy = 0; oy < Ho; ++oy) {
                            const int iy = oy * stride - padding + ky;
                            if (iy < 0 || iy >= H) continue;
                            const double* grow = gplane + static_cast<std::size_t>(oy) * Wo;
                            const std::size_t xoff = (static_cast<std::size_t>(c) * H + iy) * W;
                            for (int ox = 0; ox < Wo; ++ox) {
                                const int ix = ox * stride - padding + kx;
                                if (ix < 0 || ix >= W) continue;
                                const double gv = grow[ox];
                                if (px->requires_grad) px->grad[xoff + ix] += w * gv;
                                kacc += px->data[xoff + ix] * gv;
                            }
                        }
                        if (pk->requires_grad) pk->grad[koff + ky * Kw + kx] += kacc;
                    }
            }
        }
    });
}

Tensor conv_transpose2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    check_conv_args(input, kernel, stride, padding, true);
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    const int O = kernel.dim(1), Kh = kernel.dim(2), Kw = kernel.dim(3);
    const int Ho = (H - 1) * stride - 2 * padding + Kh;
    const int Wo = (W - 1) * stride - 2 * padding + Kw;
    if (Ho <= 0 || Wo <= 0)
        throw ConfigError("conv_transpose: empty output for input " + shape_str(input.shape()));
    std::vector<double> out(static_cast<std::size_t>(O) * Ho * Wo, 0.0);
    const double* x = input.data().data();
    const double* k = kernel.data().data();
    for (int c = 0; c < C; ++c) {
        const double* xplane = x + static_cast<std::size_t>(c) * H * W;
        for (int o = 0; o < O; ++o) {
            double* oplane = out.data() + static_cast<std::size_t>(o) * Ho * Wo;
            const double* kbase = k + (static_cast<std::size_t>(c) * O + o) * Kh * Kw;
            for (int ky = 0; ky < Kh; ++ky)
                for (int kx = 0; kx < Kw; ++kx) {
                    const double w = kbase[ky * Kw + kx];
                    if (w == 0.0) continue;
                    for (int iy = 0; iy < H; ++iy) {
                        const int oy = iy * stride - padding + ky;
                        if (oy < 0 || oy >= Ho) continue;
                        const double* xrow = xplane + static_cast<std::size_t>(iy) * W;
                        double* orow = oplane + static_cast<std::size_t>(oy) * Wo;
                        for (int ix = 0; ix < W; ++ix) {
                            const int ox = ix * stride - padding + kx;
                            if (ox < 0 || ox >= Wo) continue;
                            orow[ox] += w * xrow[ix];
                        }
                    }
                }
        }
    }
    auto node = new_node({O, Ho, Wo}, std::move(out));
    auto px = input.ptr(), pk = kernel.ptr();
    return finish(node, "conv_transpose2d", {px, pk},
                  [px, pk, C, H, W, O, Kh, Kw, Ho, Wo, stride, padding](TensorNode& self) {
        const double* g = self.grad.data();
        for (int c = 0; c < C; ++c) {
            for (int o = 0; o < O; ++o) {
                const double* gplane = g + static_cast<std::size_t>(o) * Ho * Wo;
                const std::size_t koff = (static_cast<std::size_t>(c) * O + o) * Kh * Kw;
                for (int ky = 0; ky < Kh; ++ky)
                    for (int kx = 0; kx < Kw; ++kx) {
                        const double w = pk->data[koff + ky * Kw + kx];
                        double kacc = 0.0;
                        for (int iy = 0; iy < H; ++iy) {
                            const int oy = iy * stride - padding + ky;
                            if (oy < 0 || oy >= Ho) continue;
                            const double* grow = gplane + static_cast<std::size_t>(oy) * Wo;
                            const std::size_t xoff = (static_cast<std::size_t>(c) * H + iy) * W;
                            for (int ix = 0; ix < W; ++ix) {
                                const int ox = ix * stride - padding + kx;
                                if (ox < 0 || ox >= Wo) continue;
                                const double gv = grow[ox];
                                if (px->requires_grad) px->grad[xoff + ix] += w * gv;
                                kacc += px->data[xoff + ix] * gv;
                            }
                        }
                        if (pk->requires_grad) pk->grad[koff + ky * Kw + kx] += kacc;
                    }
            }
        }
    });
}

Tensor add_channel_bias(const Tensor& input, const Tensor& bias) {
    if (input.shape().size() != 3 || bias.shape().size() != 1 || bias.dim(0) != input.dim(0))
        throw ConfigError("add_channel_bias: input " + shape_str(input.shape()) + " bias " +
                          shape_str(bias.shape()));
    const int C = input.dim(0);
    const std::size_t plane = static_cast<std::size_t>(input.dim(1)) * input.dim(2);
    auto out = new_node(input.shape(), input.data());
    for (int c = 0; c < C; ++c) {
        const double b = bias.data()[static_cast<std::size_t>(c)];
        double* p = out->data.data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += b;
    }
    auto px = input.ptr(), pb = bias.ptr();
    return finish(out, "add_channel_bias", {px, pb}, [px, pb, C, plane](TensorNode& self) {
        if (px->requires_grad) {
            px->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                const double* g = self.grad.data() + static_cast<std::size_t>(c) * plane;
                for (std::size_t i = 0; i < plane; ++i) acc += g[i];
                pb->grad[static_cast<std::size_t>(c)] += acc;
            }
        }
    });
}

Tensor roi_max_pool(const Tensor& input, double x0, double y0, double x1, double y1, int bins,
                    bool* degenerate) {
    if (input.shape().size() != 3) throw ConfigError("roi_max_pool: input must be [C,H,W]");
    if (bins < 1) throw ConfigError("roi_max_pool: bins must be >= 1");
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    const int cx0 = std::max(0, static_cast<int>(std::floor(x0)));
    const int cy0 = std::max(0, static_cast<int>(std::floor(y0)));
    const int cx1 = std::min(W, static_cast<int>(std::ceil(x1)));
    const int cy1 = std::min(H, static_cast<int>(std::ceil(y1)));
    const bool empty = cx0 >= cx1 || cy0 >= cy1;
    if (degenerate) *degenerate = empty;
    const std::size_t n = static_cast<std::size_t>(C) * bins * bins;
    std::vector<double> out(n, 0.0);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(n, -1);
    if (!empty) {
        const int spanx = cx1 - cx0, spany = cy1 - cy0;
        for (int c = 0; c < C; ++c) {
            const double* plane = input.data().data() + static_cast<std::size_t>(c) * H * W;
            for (int by = 0; by < bins; ++by) {
                int ys = cy0 + (by * spany) / bins;
                int ye = cy0 + ((by + 1) * spany + bins - 1) / bins;
                ye = std::max(ye, ys + 1);
                for (int bx = 0; bx < bins; ++bx) {
                    int xs = cx0 + (bx * spanx) / bins;
                    int xe = cx0 + ((bx + 1) * spanx + bins - 1) / bins;
                    xe = std::max(xe, xs + 1);
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = -1;
                    for (int y = ys; y < ye; ++y)
                        for (int x = xs; x < xe; ++x) {
                            const double v = plane[static_cast<std::size_t>(y) * W + x];
                            if (v > best) {
                                best = v;
                                best_idx = (static_cast<std::int64_t>(c) * H + y) * W + x;
                            }
                        }
                    const std::size_t k =
                        (static_cast<std::size_t>(c) * bins + by) * bins + bx;
                    out[k] = best;
                    (*argmax)[k] = best_idx;
                }
            }
        }
    }
    auto node = new_node({C, bins, bins}, std::move(out));
    auto px = input.ptr();
    return finish(node, "roi_max_pool", {px}, [px, argmax](TensorNode& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (std::size_t k = 0; k < argmax->size(); ++k) {
            const auto idx = (*argmax)[k];
            if (idx >= 0) px->grad[static_cast<std::size_t>(idx)] += self.grad[k];
        }
    });
}

// ------------------------------------------------------ reductions and losses

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    auto node = new_node({1}, {total});
    auto pa = a.ptr();
    return finish(node, "sum", {pa}, [pa](TensorNode& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        const double g = self.grad[0];
        for (auto& gv : pa->grad) gv += g;
    });
}

Tensor mean(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    const double n = static_cast<double>(a.data().size());
    auto node = new_node({1}, {total / n});
    auto pa = a.ptr();
    return finish(node, "mean", {pa}, [pa, n](TensorNode& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        const double g = self.grad[0] / n;
        for (auto& gv : pa->grad) gv += g;
    });
}

namespace {

void check_binary_targets(const Tensor& target, const char* op) {
    for (double t : target.data())
        if (t != 0.0 && t != 1.0)
            throw InputError(std::string(op) + ": target values must be exactly 0 or 1");
}

}  // namespace

Tensor bce_loss(const Tensor& p, const Tensor& target) {
    check_same_shape(p, target, "bce_loss");
    check_binary_targets(target, "bce_loss");
    const auto n = p.data().size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pc = std::clamp(p.data()[i], kBceEps, 1.0 - kBceEps);
        const double t = target.data()[i];
        total += -t * std::log(pc) - (1.0 - t) * std::log(1.0 - pc);
    }
    auto node = new_node({1}, {total / static_cast<double>(n)});
    auto pp = p.ptr(), pt = target.ptr();
    return finish(node, "bce_loss", {pp, pt}, [pp, n](TensorNode& self) {
        if (!pp->requires_grad) return;
        pp->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double raw = pp->data[i];
            if (raw < kBceEps || raw > 1.0 - kBceEps) continue;  // clamp plateau
            const double t = self.parents[1]->data[i];
            pp->grad[i] += g * (-t / raw + (1.0 - t) / (1.0 - raw));
        }
    });
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "l1_loss");
    const auto n = pred.data().size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += std::abs(pred.data()[i] - target.data()[i]);
    auto node = new_node({1}, {total / static_cast<double>(n)});
    auto pa = pred.ptr(), pb = target.ptr();
    return finish(node, "l1_loss", {pa, pb}, [pa, pb, n](TensorNode& self) {
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = pa->data[i] - pb->data[i];
            const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);  // subgradient 0 at ties
            if (pa->requires_grad) {
                pa->ensure_grad();
                pa->grad[i] += g * s;
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                pb->grad[i] -= g * s;
            }
        }
    });
}

Tensor mce_loss(const Tensor& p, const Tensor& target, double p_th) {
    if (!(p_th > 0.0 && p_th < 1.0))
        throw ConfigError("mce_loss: p_th must lie in (0,1), got " + std::to_string(p_th));
    check_same_shape(p, target, "mce_loss");
    check_binary_targets(target, "mce_loss");
    const auto n = p.data().size();
    auto masked = std::make_shared<std::vector<char>>(n, 0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = target.data()[i];
        if (t == 0.0 && p.data()[i] > p_th) {
            (*masked)[i] = 1;
            continue;
        }
        const double pc = std::clamp(p.data()[i], kBceEps, 1.0 - kBceEps);
        total += -t * std::log(pc) - (1.0 - t) * std::log(1.0 - pc);
    }
    auto node = new_node({1}, {total / static_cast<double>(n)});
    auto pp = p.ptr(), pt = target.ptr();
    return finish(node, "mce_loss", {pp, pt}, [pp, masked, n](TensorNode& self) {
        if (!pp->requires_grad) return;
        pp->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            if ((*masked)[i]) continue;
            const double raw = pp->data[i];
            if (raw < kBceEps || raw > 1.0 - kBceEps) continue;
            const double t = self.parents[1]->data[i];
            pp->grad[i] += g * (-t / raw + (1.0 - t) / (1.0 - raw));
        }
    });
}

// ------------------------------------------------------------------- backward

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw InputError("backward expects a scalar loss tensor");
    // Iterative post-order DFS gives reverse-topological replay order.
    std::vector<TensorNode*> order;
    std::unordered_set<const TensorNode*> mark;
    std::vector<std::pair<TensorNode*, std::size_t>> dfs;
    dfs.emplace_back(loss.node(), 0);
    mark.insert(loss.node());
    while (!dfs.empty()) {
        auto& [node, next] = dfs.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next].get();
            ++next;
            if (p->backward_fn && !mark.count(p)) {
                mark.insert(p);
                dfs.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            dfs.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (!n->backward_fn) continue;
        if (n->grad.empty()) continue;  // no gradient flowed here
        n->backward_fn(*n);
    }
}

// ----------------------------------------------------------------- ParamStore

Tensor ParamStore::add_param(const std::string& name, Tensor t) {
    if (has(name)) throw ConfigError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    names_.push_back(name);
    params_.push_back(t);
    return t;
}

const Tensor& ParamStore::param(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return params_[i];
    throw ConfigError("unknown parameter: " + name);
}

bool ParamStore::has(const std::string& name) const {
    return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::int64_t ParamStore::total_size() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& p : params_) p.zero_grad();
}

std::vector<double> ParamStore::flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(total_size()));
    for (const auto& p : params_) flat.insert(flat.end(), p.data().begin(), p.data().end());
    return flat;
}

void ParamStore::load_flat(const std::vector<double>& flat) {
    if (static_cast<std::int64_t>(flat.size()) != total_size())
        throw ConfigError("load_flat: expected " + std::to_string(total_size()) + " values, got " +
                          std::to_string(flat.size()));
    std::size_t off = 0;
    for (auto& p : params_) {
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                  flat.begin() + static_cast<std::ptrdiff_t>(off + p.data().size()),
                  p.raw().begin());
        off += p.data().size();
    }
}

std::vector<double> ParamStore::flatten_grads(double scale) const {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(total_size()));
    for (const auto& p : params_) {
        if (p.has_grad()) {
            for (double g : p.grad()) flat.push_back(g * scale);
        } else {
            flat.insert(flat.end(), p.data().size(), 0.0);
        }
    }
    return flat;
}

double sgd_learning_rate(const SgdConfig& config, int round) {
    if (config.learning_rate <= 0.0) throw ConfigError("sgd: learning rate must be positive");
    if (config.decay_factor < 0.0) throw ConfigError("sgd: decay factor must be nonnegative");
    return config.learning_rate / (1.0 + config.decay_factor * round);
}

void sgd_step(ParamStore& params, const SgdConfig& config, int round, double grad_scale) {
    const double lr = sgd_learning_rate(config, round);
    for (std::size_t i = 0; i < params.count(); ++i) {
        auto& p = params.at(i);
        if (!p.has_grad()) continue;
        auto& data = p.raw();
        const auto& grad = p.grad();
        for (std::size_t k = 0; k < data.size(); ++k) data[k] -= lr * grad_scale * grad[k];
    }
}

}  // namespace autofed
