#include "resq/tape.hpp"

#include <algorithm>
#include <cmath>

#include "resq/errors.hpp"

namespace resq {

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul requires rank-2 tensors, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    const std::size_t rows = a.shape()[0], inner = a.shape()[1];
    const std::size_t cols = b.shape()[1];
    if (b.shape()[0] != inner) {
        throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    Tensor out({rows, cols});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t k = 0; k < inner; ++k) {
            const double av = pa[i * inner + k];
            if (av == 0.0) continue;
            const double* brow = pb + k * cols;
            double* orow = po + i * cols;
            for (std::size_t j = 0; j < cols; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

std::array<std::size_t, 2> conv2d_output_hw(std::size_t h, std::size_t w, std::size_t kh,
                                            std::size_t kw, int stride) {
    if (stride < 1) throw ContractError("conv2d stride must be >= 1");
    if (kh > h || kw > w) {
        throw DimensionError("conv2d kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " larger than input " + std::to_string(h) + "x" + std::to_string(w));
    }
    const std::size_t s = static_cast<std::size_t>(stride);
    return {(h - kh) / s + 1, (w - kw) / s + 1};
}

namespace {

// Canonicalize conv input to [N,C,H,W]; rank-3 input is a single image.
struct ConvDims {
    bool batched;
    std::size_t n, c, h, w;
};

ConvDims conv_input_dims(const Tensor& input) {
    if (input.rank() == 3) return {false, 1, input.shape()[0], input.shape()[1], input.shape()[2]};
    if (input.rank() == 4)
        return {true, input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]};
    throw DimensionError("conv2d input must be rank 3 or 4, got " + shape_str(input.shape()));
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride) {
    const ConvDims d = conv_input_dims(input);
    if (kernels.rank() != 4) {
        throw DimensionError("conv2d kernels must be rank 4 [F,C,kh,kw], got " +
                             shape_str(kernels.shape()));
    }
    const std::size_t f = kernels.shape()[0], kc = kernels.shape()[1];
    const std::size_t kh = kernels.shape()[2], kw = kernels.shape()[3];
    if (kc != d.c) {
        throw DimensionError("conv2d channel mismatch: input has " + std::to_string(d.c) +
                             ", kernels expect " + std::to_string(kc));
    }
    const auto [oh, ow] = conv2d_output_hw(d.h, d.w, kh, kw, stride);
    const std::size_t s = static_cast<std::size_t>(stride);

    Tensor out(d.batched ? std::vector<std::size_t>{d.n, f, oh, ow}
                         : std::vector<std::size_t>{f, oh, ow});
    const double* pi = input.data();
    const double* pk = kernels.data();
    double* po = out.data();
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t fo = 0; fo < f; ++fo) {
            for (std::size_t i = 0; i < oh; ++i) {
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < d.c; ++c) {
                        const double* in_ch = pi + ((n * d.c + c) * d.h + i * s) * d.w + j * s;
                        const double* k_ch = pk + ((fo * d.c + c) * kh) * kw;
                        for (std::size_t u = 0; u < kh; ++u) {
                            for (std::size_t v = 0; v < kw; ++v) {
                                acc += in_ch[u * d.w + v] * k_ch[u * kw + v];
                            }
                        }
                    }
                    po[((n * f + fo) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("elementwise add shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor scale(const Tensor& a, double k) {
    Tensor out = a;
    for (auto& v : out.vec()) v *= k;
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1) throw DimensionError("bias must be rank 1, got " + shape_str(bias.shape()));
    Tensor out = x;
    if (x.rank() == 2) {
        const std::size_t rows = x.shape()[0], cols = x.shape()[1];
        if (bias.size() != cols) {
            throw DimensionError("bias length " + std::to_string(bias.size()) +
                                 " does not match columns " + std::to_string(cols));
        }
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += bias[j];
        return out;
    }
    if (x.rank() == 4) {
        const std::size_t n = x.shape()[0], c = x.shape()[1];
        const std::size_t hw = x.shape()[2] * x.shape()[3];
        if (bias.size() != c) {
            throw DimensionError("bias length " + std::to_string(bias.size()) +
                                 " does not match channels " + std::to_string(c));
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
                double* p = out.data() + (i * c + ch) * hw;
                for (std::size_t k = 0; k < hw; ++k) p[k] += bias[ch];
            }
        return out;
    }
    throw DimensionError("add_bias expects rank-2 or rank-4 input, got " + shape_str(x.shape()));
}

Tensor flatten(const Tensor& x) {
    if (x.rank() < 2) throw DimensionError("flatten expects rank >= 2, got " + shape_str(x.shape()));
    const std::size_t n = x.shape()[0];
    return Tensor({n, x.size() / n}, x.vec());
}

Tensor avg_pool2(const Tensor& x) {
    if (x.rank() != 4) throw DimensionError("avg_pool2 expects [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
    Tensor out({n, c, oh, ow});
    const double* pi = x.data();
    double* po = out.data();
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const double* in = pi + nc * h * w;
        double* o = po + nc * oh * ow;
        for (std::size_t i = 0; i < oh; ++i) {
            const std::size_t rows = std::min<std::size_t>(2, h - 2 * i);
            for (std::size_t j = 0; j < ow; ++j) {
                const std::size_t cols = std::min<std::size_t>(2, w - 2 * j);
                double acc = 0.0;
                for (std::size_t u = 0; u < rows; ++u)
                    for (std::size_t v = 0; v < cols; ++v) acc += in[(2 * i + u) * w + 2 * j + v];
                o[i * ow + j] = acc / static_cast<double>(rows * cols);
            }
        }
    }
    return out;
}

Tensor softmax(const Tensor& x) {
    if (x.rank() < 1) throw DimensionError("softmax needs rank >= 1");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.size() / cols;
    Tensor out = x;
    for (std::size_t i = 0; i < rows; ++i) {
        double* row = out.data() + i * cols;
        double m = row[0];
        for (std::size_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - m);
            z += row[j];
        }
        for (std::size_t j = 0; j < cols; ++j) row[j] /= z;
    }
    return out;
}

double cross_entropy(const Tensor& logits, const Tensor& targets, Tensor* softmax_out) {
    if (logits.rank() != 2 || !logits.same_shape(targets)) {
        throw DimensionError("cross_entropy expects matching [batch x classes] tensors, got " +
                             shape_str(logits.shape()) + " and " + shape_str(targets.shape()));
    }
    const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double t = targets[i * cols + j];
            if (t < 0.0) throw ContractError("cross_entropy target row " + std::to_string(i) +
                                             " has a negative weight");
            s += t;
        }
        if (std::abs(s - 1.0) > 1e-9) {
            throw ContractError("cross_entropy target row " + std::to_string(i) +
                                " is not normalized (sum " + std::to_string(s) + ")");
        }
    }
    Tensor sm = softmax(logits);
    double loss = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        // stable log-softmax: max-subtraction then log-sum-exp
        const double* lrow = logits.data() + i * cols;
        double m = lrow[0];
        for (std::size_t j = 1; j < cols; ++j) m = std::max(m, lrow[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) z += std::exp(lrow[j] - m);
        const double lse = m + std::log(z);
        for (std::size_t j = 0; j < cols; ++j) {
            const double t = targets[i * cols + j];
            if (t != 0.0) loss += t * (lse - lrow[j]);
        }
    }
    if (softmax_out) *softmax_out = std::move(sm);
    return loss / static_cast<double>(rows);
}

}  // namespace kernels

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accum(int id, const std::vector<double>& g) {
    Node& nd = node(id);
    if (!nd.needs_grad) return;
    if (nd.adjoint.empty()) nd.adjoint.assign(nd.value.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) nd.adjoint[i] += g[i];
}

Var Tape::leaf(Tensor& external) {
    Node n;
    n.value = external;
    n.needs_grad = true;
    n.bind = &external;
    return {push(std::move(n))};
}

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = false;
    return {push(std::move(n))};
}

const Tensor& Tape::value(Var v) const { return node(v.id).value; }

Var Tape::matmul(Var a, Var b) {
    Node n;
    n.value = kernels::matmul(node(a.id).value, node(b.id).value);
    n.needs_grad = tracks(a.id) || tracks(b.id);
    n.in = {a.id, b.id};
    n.pull = [](Tape& t, int self) {
        Node& nd = t.node(self);
        const int ia = nd.in[0], ib = nd.in[1];
        const Tensor& av = t.node(ia).value;
        const Tensor& bv = t.node(ib).value;
        const std::size_t rows = av.shape()[0], inner = av.shape()[1], cols = bv.shape()[1];
        if (t.tracks(ia)) {
            std::vector<double> ga(av.size(), 0.0);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) {
                    const double g = nd.adjoint[i * cols + j];
                    if (g == 0.0) continue;
                    for (std::size_t k = 0; k < inner; ++k) ga[i * inner + k] += g * bv[k * cols + j];
                }
            t.accum(ia, ga);
        }
        if (t.tracks(ib)) {
            std::vector<double> gb(bv.size(), 0.0);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) {
                    const double g = nd.adjoint[i * cols + j];
                    if (g == 0.0) continue;
                    for (std::size_t k = 0; k < inner; ++k) gb[k * cols + j] += g * av[i * inner + k];
                }
            t.accum(ib, gb);
        }
    };
    return {push(std::move(n))};
}

Var Tape::conv2d(Var input, Var kern, int stride) {
    Node n;
    n.value = kernels::conv2d(node(input.id).value, node(kern.id).value, stride);
    n.needs_grad = tracks(input.id) || tracks(kern.id);
    n.in = {input.id, kern.id};
    n.pull = [stride](Tape& t, int self) {
        Node& nd = t.node(self);
        const int ix = nd.in[0], ik = nd.in[1];
        const Tensor& xv = t.node(ix).value;
        const Tensor& kv = t.node(ik).value;
        const bool batched = xv.rank() == 4;
        const std::size_t nn = batched ? xv.shape()[0] : 1;
        const std::size_t c = xv.shape()[batched ? 1 : 0];
        const std::size_t h = xv.shape()[batched ? 2 : 1];
        const std::size_t w = xv.shape()[batched ? 3 : 2];
        const std::size_t f = kv.shape()[0], kh = kv.shape()[2], kw = kv.shape()[3];
        const std::size_t s = static_cast<std::size_t>(stride);
        const std::size_t oh = (h - kh) / s + 1, ow = (w - kw) / s + 1;
        const bool want_x = t.tracks(ix), want_k = t.tracks(ik);
        std::vector<double> gx(want_x ? xv.size() : 0, 0.0);
        std::vector<double> gk(want_k ? kv.size() : 0, 0.0);
        for (std::size_t b = 0; b < nn; ++b) {
            for (std::size_t fo = 0; fo < f; ++fo) {
                for (std::size_t i = 0; i < oh; ++i) {
                    for (std::size_t j = 0; j < ow; ++j) {
                        const double g = nd.adjoint[((b * f + fo) * oh + i) * ow + j];
                        if (g == 0.0) continue;
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            const std::size_t xoff = ((b * c + ch) * h + i * s) * w + j * s;
                            const std::size_t koff = (fo * c + ch) * kh * kw;
                            for (std::size_t u = 0; u < kh; ++u)
                                for (std::size_t v = 0; v < kw; ++v) {
                                    if (want_x) gx[xoff + u * w + v] += g * kv[koff + u * kw + v];
                                    if (want_k) gk[koff + u * kw + v] += g * xv[xoff + u * w + v];
                                }
                        }
                    }
                }
            }
        }
        if (want_x) t.accum(ix, gx);
        if (want_k) t.accum(ik, gk);
    };
    return {push(std::move(n))};
}

Var Tape::relu(Var x) {
    Node n;
    n.value = kernels::relu(node(x.id).value);
    n.needs_grad = tracks(x.id);
    n.in = {x.id, -1};
    n.pull = [](Tape& t, int self) {
        Node& nd = t.node(self);
        const int ix = nd.in[0];
        const Tensor& xv = t.node(ix).value;
        std::vector<double> g(xv.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = xv[i] > 0.0 ? nd.adjoint[i] : 0.0;
        t.accum(ix, g);
    };
    return {push(std::move(n))};
}

Var Tape::add(Var a, Var b) {
    Node n;
    n.value = kernels::add(node(a.id).value, node(b.id).value);
    n.needs_grad = tracks(a.id) || tracks(b.id);
    n.in = {a.id, b.id};
    n.pull = [](Tape& t, int self) {
        Node& nd = t.node(self);
        if (t.tracks(nd.in[0])) t.accum(nd.in[0], nd.adjoint);
        if (t.tracks(nd.in[1])) t.accum(nd.in[1], nd.adjoint);
    };
    return {push(std::move(n))};
}

Var Tape::scale(Var a, double k) {
    Node n;
    n.value = kernels::scale(node(a.id).value, k);
    n.needs_grad = tracks(a.id);
    n.in = {a.id, -1};
    n.pull = [k](Tape& t, int self) {
        Node& nd = t.node(self);
        std::vector<double> g(nd.adjoint.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = k * nd.adjoint[i];
        t.accum(nd.in[0], g);
    };
    return {push(std::move(n))};
}

Var Tape::add_bias(Var x, Var bias) {
    Node n;
    n.value = kernels::add_bias(node(x.id).value, node(bias.id).value);
    n.needs_grad = tracks(x.id) || tracks(bias.id);
    n.in = {x.id, bias.id};
    n.pull = [](Tape& t, int self) {
        Node& nd = t.node(self);
        const int ix = nd.in[0], ib = nd.in[1];
        if (t.tracks(ix)) t.accum(ix, nd.adjoint);
        if (t.tracks(ib)) {
            const Tensor& xv = t.node(ix).value;
            const Tensor& bv = t.node(ib).value;
            std::vector<double> g(bv.size(), 0.0);
            if (xv.rank() == 2) {
                const std::size_t rows = xv.shape()[0], cols = xv.shape()[1];
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) g[j] += nd.adjoint[i * cols + j];
            } else {
                const std::size_t nn = xv.shape()[0], c = xv.shape()[1];
                const std::size_t hw = xv.shape()[2] * xv.shape()[3];
                for (std::size_t i = 0; i < nn; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double* p = nd.adjoint.data() + (i * c + ch) * hw;
                        for (std::size_t k = 0; k < hw; ++k) g[ch] += p[k];
                    }
            }
            t.accum(ib, g);
        }
    };
    return {push(std::move(n))};
}

Var Tape::flatten(Var x) {
    Node n;
    n.value = kernels::flatten(node(x.id).value);
    n.needs_grad = tracks(x.id);
    n.in = {x.id, -1};
    n.pull = [](Tape& t, int self) {
        Node& nd = t.node(self);
        t.accum(nd.in[0], nd.adjoint);
    };
    return {push(std::move(n))};
}

Var Tape::avg_pool2(Var x) {
    Node n;
    n.value = kernels::avg_pool2(node(x.id).value);
    n.needs_grad = tracks(x.id);
    n.in = {x.id, -1};
    n.pull = [](Tape& t, int self) {
        Node& nd = t.node(self);
        const int ix = nd.in[0];
        const Tensor& xv = t.node(ix).value;
        const std::size_t nn = xv.shape()[0], c = xv.shape()[1];
        const std::size_t h = xv.shape()[2], w = xv.shape()[3];
        const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
        std::vector<double> g(xv.size(), 0.0);
        for (std::size_t nc = 0; nc < nn * c; ++nc) {
            double* go = g.data() + nc * h * w;
            const double* a = nd.adjoint.data() + nc * oh * ow;
            for (std::size_t i = 0; i < oh; ++i) {
                const std::size_t rows = std::min<std::size_t>(2, h - 2 * i);
                for (std::size_t j = 0; j < ow; ++j) {
                    const std::size_t cols = std::min<std::size_t>(2, w - 2 * j);
                    const double share = a[i * ow + j] / static_cast<double>(rows * cols);
                    for (std::size_t u = 0; u < rows; ++u)
                        for (std::size_t v = 0; v < cols; ++v) go[(2 * i + u) * w + 2 * j + v] += share;
                }
            }
        }
        t.accum(ix, g);
    };
    return {push(std::move(n))};
}

Var Tape::softmax(Var x) {
    Node n;
    n.value = kernels::softmax(node(x.id).value);
    n.needs_grad = tracks(x.id);
    n.in = {x.id, -1};
    n.pull = [](Tape& t, int self) {
        Node& nd = t.node(self);
        const Tensor& s = nd.value;
        const std::size_t cols = s.shape().back();
        const std::size_t rows = s.size() / cols;
        std::vector<double> g(s.size(), 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
            const double* srow = s.data() + i * cols;
            const double* arow = nd.adjoint.data() + i * cols;
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += arow[j] * srow[j];
            for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] = srow[j] * (arow[j] - dot);
        }
        t.accum(nd.in[0], g);
    };
    return {push(std::move(n))};
}

Var Tape::cross_entropy(Var logits, const Tensor& targets) {
    Tensor sm;
    const double loss = kernels::cross_entropy(node(logits.id).value, targets, &sm);
    Node n;
    n.value = Tensor::scalar(loss);
    n.needs_grad = tracks(logits.id);
    n.in = {logits.id, -1};
    n.pull = [sm = std::move(sm), targets](Tape& t, int self) {
        Node& nd = t.node(self);
        const double a = nd.adjoint[0];
        const std::size_t rows = sm.shape()[0], cols = sm.shape()[1];
        const double inv = a / static_cast<double>(rows);
        std::vector<double> g(sm.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = inv * (sm[i] - targets[i]);
        t.accum(nd.in[0], g);
    };
    return {push(std::move(n))};
}

Var Tape::sum(Var x) {
    double s = 0.0;
    for (double v : node(x.id).value.vec()) s += v;
    Node n;
    n.value = Tensor::scalar(s);
    n.needs_grad = tracks(x.id);
    n.in = {x.id, -1};
    n.pull = [](Tape& t, int self) {
        Node& nd = t.node(self);
        const Tensor& xv = t.node(nd.in[0]).value;
        t.accum(nd.in[0], std::vector<double>(xv.size(), nd.adjoint[0]));
    };
    return {push(std::move(n))};
}

Var Tape::l2_norm_sq(Var x) {
    double s = 0.0;
    for (double v : node(x.id).value.vec()) s += v * v;
    Node n;
    n.value = Tensor::scalar(s);
    n.needs_grad = tracks(x.id);
    n.in = {x.id, -1};
    n.pull = [](Tape& t, int self) {
        Node& nd = t.node(self);
        const Tensor& xv = t.node(nd.in[0]).value;
        std::vector<double> g(xv.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * xv[i] * nd.adjoint[0];
        t.accum(nd.in[0], g);
    };
    return {push(std::move(n))};
}

void Tape::backward(Var loss) {
    if (consumed_) throw ContractError("tape already consumed by a previous backward()");
    Node& root = node(loss.id);
    if (root.value.size() != 1) {
        throw ContractError("backward requires a scalar loss, got " + shape_str(root.value.shape()));
    }
    consumed_ = true;
    if (!root.needs_grad) return;
    root.adjoint.assign(1, 1.0);
    for (int id = loss.id; id >= 0; --id) {
        Node& nd = node(id);
        if (!nd.needs_grad || nd.adjoint.empty()) continue;
        if (nd.pull) nd.pull(*this, id);
        if (nd.bind) {
            nd.bind->ensure_grad();
            auto& g = nd.bind->grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.adjoint[i];
        }
    }
}

void sgd_step(const std::vector<Parameter*>& params, double lr) {
    for (Parameter* p : params) {
        if (!p->trainable) continue;
        if (!p->value.has_grad()) {
            throw ContractError("sgd_step: parameter '" + p->name + "' has no gradient");
        }
        const auto& g = p->value.grad();
        for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * g[i];
    }
    for (Parameter* p : params) p->value.clear_grad();
}

}  // namespace resq
