#include "gals/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace gals {

static_assert(std::endian::native == std::endian::little,
              "tensor container I/O assumes a little-endian host");

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("tensor: " + msg); }

void require(bool ok, const std::string& msg) {
    if (!ok) fail(msg);
}

}  // namespace

int numel_of(const Shape& s) {
    int n = 1;
    for (int e : s) {
        require(e > 0, "extents must be positive, got " + shape_str(s));
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::string r = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ", ";
        r += std::to_string(s[i]);
    }
    return r + ")";
}

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Neg: return "neg";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::Abs: return "abs";
        case Op::Sign: return "sign";
        case Op::Relu: return "relu";
        case Op::Step: return "step";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Recip: return "reciprocal";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Conv2d: return "conv2d";
        case Op::KernelFlip: return "kernel_flip";
        case Op::ConvWeightGrad: return "conv2d_weight_grad";
        case Op::PoolTake: return "pool_take";
        case Op::PoolScatter: return "pool_scatter";
        case Op::SumAxis: return "sum_axis";
        case Op::BroadcastAxis: return "broadcast_axis";
        case Op::SumAll: return "sum_all";
        case Op::BroadcastFull: return "broadcast_full";
        case Op::BilinearUp: return "bilinear_upsample";
        case Op::BilinearUpT: return "bilinear_upsample_t";
        case Op::Reshape: return "reshape";
    }
    return "?";
}

// ---- Tensor ----

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(numel_of(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    require(static_cast<int>(values.size()) == numel_of(shape_),
            "value count " + std::to_string(values.size()) + " does not match shape " +
                shape_str(shape_));
    data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
}

double Tensor::item() const {
    require(defined() && numel() == 1, "item() needs a 1-element tensor");
    return (*data_)[0];
}

Tensor Tensor::detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
}

// ---- Tape ----

Tape::Tape() = default;

int Tape::append(TapeNode nd) {
    nodes_.push_back(std::move(nd));
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::watch(const Tensor& values) {
    require(values.defined(), "watch() needs a defined tensor");
    TapeNode nd;
    nd.op = Op::Leaf;
    nd.shape = values.shape();
    nd.out = values.data_;
    int id = append(std::move(nd));
    Tensor t;
    t.shape_ = values.shape();
    t.data_ = values.data_;
    t.tape_ = this;
    t.node_ = id;
    return t;
}

Tensor Tape::tensor_for(int id) const {
    require(id >= 0 && id < size(), "node id out of range");
    const TapeNode& nd = nodes_[static_cast<size_t>(id)];
    Tensor t;
    t.shape_ = nd.shape;
    t.data_ = nd.out;
    t.tape_ = const_cast<Tape*>(this);
    t.node_ = id;
    return t;
}

// ---- kernels ----

namespace {

struct ConvDims {
    int n, c, h, w, k, kh, kw;
};

ConvDims conv_dims(const Shape& xs, const Shape& ws) {
    require(xs.size() == 4, "conv2d input must be rank 4, got " + shape_str(xs));
    require(ws.size() == 4, "conv2d kernel must be rank 4, got " + shape_str(ws));
    ConvDims d{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3]};
    require(ws[1] == d.c, "conv2d channel mismatch: input " + shape_str(xs) + " kernel " +
                              shape_str(ws));
    require(d.kh % 2 == 1 && d.kw % 2 == 1, "conv2d kernel extents must be odd, got " +
                                                 shape_str(ws));
    return d;
}

void conv2d_kernel(const double* x, const double* w, double* out, const ConvDims& d) {
    const int ph = d.kh / 2, pw = d.kw / 2;
    const int plane = d.h * d.w;
    for (int n = 0; n < d.n; ++n) {
        for (int k = 0; k < d.k; ++k) {
            double* op = out + (static_cast<size_t>(n) * d.k + k) * plane;
            std::fill(op, op + plane, 0.0);
            for (int c = 0; c < d.c; ++c) {
                const double* xp = x + (static_cast<size_t>(n) * d.c + c) * plane;
                for (int ki = 0; ki < d.kh; ++ki) {
                    const int dy = ki - ph;
                    const int y0 = std::max(0, -dy), y1 = std::min(d.h - 1, d.h - 1 - dy);
                    for (int kj = 0; kj < d.kw; ++kj) {
                        const double coef =
                            w[((static_cast<size_t>(k) * d.c + c) * d.kh + ki) * d.kw + kj];
                        const int dx = kj - pw;
                        const int x0 = std::max(0, -dx), x1 = std::min(d.w - 1, d.w - 1 - dx);
                        for (int y = y0; y <= y1; ++y) {
                            double* orow = op + y * d.w;
                            const double* xrow = xp + (y + dy) * d.w + dx;
                            for (int xx = x0; xx <= x1; ++xx) orow[xx] += coef * xrow[xx];
                        }
                    }
                }
            }
        }
    }
}

// dw[k,c,ki,kj] = sum_{n,y,x} dy[n,k,y,x] * xpad[n,c,y+ki-ph,x+kj-pw]
void conv2d_weight_grad_kernel(const double* x, const double* dy, double* out, const ConvDims& d) {
    const int ph = d.kh / 2, pw = d.kw / 2;
    const int plane = d.h * d.w;
    size_t o = 0;
    for (int k = 0; k < d.k; ++k) {
        for (int c = 0; c < d.c; ++c) {
            for (int ki = 0; ki < d.kh; ++ki) {
                const int oy = ki - ph;
                const int y0 = std::max(0, -oy), y1 = std::min(d.h - 1, d.h - 1 - oy);
                for (int kj = 0; kj < d.kw; ++kj) {
                    const int ox = kj - pw;
                    const int x0 = std::max(0, -ox), x1 = std::min(d.w - 1, d.w - 1 - ox);
                    double acc = 0.0;
                    for (int n = 0; n < d.n; ++n) {
                        const double* gp = dy + (static_cast<size_t>(n) * d.k + k) * plane;
                        const double* xp = x + (static_cast<size_t>(n) * d.c + c) * plane;
                        for (int y = y0; y <= y1; ++y) {
                            const double* grow = gp + y * d.w;
                            const double* xrow = xp + (y + oy) * d.w + ox;
                            for (int xx = x0; xx <= x1; ++xx) acc += grow[xx] * xrow[xx];
                        }
                    }
                    out[o++] = acc;
                }
            }
        }
    }
}

struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<double> t;
};

// half-pixel-center source coordinates, clamped at the edges
LerpAxis lerp_axis(int src, int dst) {
    LerpAxis a;
    a.i0.resize(static_cast<size_t>(dst));
    a.i1.resize(static_cast<size_t>(dst));
    a.t.resize(static_cast<size_t>(dst));
    const double scale = static_cast<double>(src) / dst;
    for (int o = 0; o < dst; ++o) {
        double s = (o + 0.5) * scale - 0.5;
        if (s < 0.0) s = 0.0;
        int i0 = static_cast<int>(s);
        if (i0 > src - 1) i0 = src - 1;
        a.i0[static_cast<size_t>(o)] = i0;
        a.i1[static_cast<size_t>(o)] = std::min(i0 + 1, src - 1);
        a.t[static_cast<size_t>(o)] = s - i0;
    }
    return a;
}

void bilinear_up_plane(const double* src, int h, int w, double* dst, const LerpAxis& ay,
                       const LerpAxis& ax) {
    const int oh = static_cast<int>(ay.t.size()), ow = static_cast<int>(ax.t.size());
    (void)h;
    for (int oy = 0; oy < oh; ++oy) {
        const double* r0 = src + ay.i0[static_cast<size_t>(oy)] * w;
        const double* r1 = src + ay.i1[static_cast<size_t>(oy)] * w;
        const double ty = ay.t[static_cast<size_t>(oy)];
        double* drow = dst + static_cast<size_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) {
            const int x0 = ax.i0[static_cast<size_t>(ox)], x1 = ax.i1[static_cast<size_t>(ox)];
            const double tx = ax.t[static_cast<size_t>(ox)];
            const double top = r0[x0] + tx * (r0[x1] - r0[x0]);
            const double bot = r1[x0] + tx * (r1[x1] - r1[x0]);
            drow[ox] = top + ty * (bot - top);
        }
    }
}

void bilinear_up_t_plane(const double* g, double* dst, int h, int w, const LerpAxis& ay,
                         const LerpAxis& ax) {
    const int oh = static_cast<int>(ay.t.size()), ow = static_cast<int>(ax.t.size());
    (void)h;
    for (int oy = 0; oy < oh; ++oy) {
        const int y0 = ay.i0[static_cast<size_t>(oy)], y1 = ay.i1[static_cast<size_t>(oy)];
        const double ty = ay.t[static_cast<size_t>(oy)];
        const double* grow = g + static_cast<size_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) {
            const int x0 = ax.i0[static_cast<size_t>(ox)], x1 = ax.i1[static_cast<size_t>(ox)];
            const double tx = ax.t[static_cast<size_t>(ox)];
            const double v = grow[ox];
            dst[y0 * w + x0] += (1.0 - ty) * (1.0 - tx) * v;
            dst[y0 * w + x1] += (1.0 - ty) * tx * v;
            dst[y1 * w + x0] += ty * (1.0 - tx) * v;
            dst[y1 * w + x1] += ty * tx * v;
        }
    }
}

struct AxisSplit {
    int outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
    require(axis >= 0 && axis < static_cast<int>(s.size()),
            "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisSplit sp;
    for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
    sp.n = s[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i)
        sp.inner *= s[i];
    return sp;
}

}  // namespace

namespace detail {

// Single source of truth for op semantics: run_op fills fresh outputs through
// this, and replay_max_abs_diff re-runs it against the recorded values.
void recompute_node(const TapeNode& nd, std::vector<double>& out) {
    const double* a = nd.n_in > 0 ? nd.in[0].data->data() : nullptr;
    const double* b = nd.n_in > 1 ? nd.in[1].data->data() : nullptr;
    const size_t n = out.size();
    const size_t an = nd.n_in > 0 ? nd.in[0].data->size() : 0;
    switch (nd.op) {
        case Op::Leaf:
            fail("cannot recompute a leaf");
        case Op::Add:
            for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
            break;
        case Op::Sub:
            for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
            break;
        case Op::Neg:
            for (size_t i = 0; i < n; ++i) out[i] = -a[i];
            break;
        case Op::Mul:
            for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
            break;
        case Op::Scale:
            for (size_t i = 0; i < n; ++i) out[i] = a[i] * nd.alpha;
            break;
        case Op::Abs:
            for (size_t i = 0; i < n; ++i) out[i] = std::fabs(a[i]);
            break;
        case Op::Sign:
            for (size_t i = 0; i < n; ++i) out[i] = a[i] > 0.0 ? 1.0 : (a[i] < 0.0 ? -1.0 : 0.0);
            break;
        case Op::Relu:
            for (size_t i = 0; i < n; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
            break;
        case Op::Step:
            for (size_t i = 0; i < n; ++i) out[i] = a[i] > 0.0 ? 1.0 : 0.0;
            break;
        case Op::Exp:
            for (size_t i = 0; i < n; ++i) out[i] = std::exp(a[i]);
            break;
        case Op::Log:
            for (size_t i = 0; i < n; ++i) out[i] = std::log(a[i]);
            break;
        case Op::Sqrt:
            for (size_t i = 0; i < n; ++i) out[i] = std::sqrt(a[i]);
            break;
        case Op::Recip:
            for (size_t i = 0; i < n; ++i) out[i] = 1.0 / a[i];
            break;
        case Op::MatMul: {
            const int R = nd.in[0].shape[0], K = nd.in[0].shape[1], C = nd.in[1].shape[1];
            std::fill(out.begin(), out.end(), 0.0);
            for (int r = 0; r < R; ++r) {
                double* orow = out.data() + static_cast<size_t>(r) * C;
                for (int k = 0; k < K; ++k) {
                    const double coef = a[static_cast<size_t>(r) * K + k];
                    const double* brow = b + static_cast<size_t>(k) * C;
                    for (int c = 0; c < C; ++c) orow[c] += coef * brow[c];
                }
            }
            break;
        }
        case Op::Transpose: {
            const int R = nd.in[0].shape[0], C = nd.in[0].shape[1];
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c)
                    out[static_cast<size_t>(c) * R + r] = a[static_cast<size_t>(r) * C + c];
            break;
        }
        case Op::Conv2d: {
            ConvDims d = conv_dims(nd.in[0].shape, nd.in[1].shape);
            conv2d_kernel(a, b, out.data(), d);
            break;
        }
        case Op::KernelFlip: {
            const Shape& ws = nd.in[0].shape;
            const int K = ws[0], C = ws[1], kh = ws[2], kw = ws[3];
            for (int k = 0; k < K; ++k)
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < kh; ++i)
                        for (int j = 0; j < kw; ++j)
                            out[((static_cast<size_t>(c) * K + k) * kh + i) * kw + j] =
                                a[((static_cast<size_t>(k) * C + c) * kh + (kh - 1 - i)) * kw +
                                  (kw - 1 - j)];
            break;
        }
        case Op::ConvWeightGrad: {
            const Shape& xs = nd.in[0].shape;
            const Shape& gs = nd.in[1].shape;
            ConvDims d{xs[0], xs[1], xs[2], xs[3], gs[1], nd.p0, nd.p1};
            conv2d_weight_grad_kernel(a, b, out.data(), d);
            break;
        }
        case Op::PoolTake: {
            const auto& idx = *nd.indices;
            for (size_t i = 0; i < n; ++i) out[i] = a[static_cast<size_t>(idx[i])];
            break;
        }
        case Op::PoolScatter: {
            const auto& idx = *nd.indices;
            std::fill(out.begin(), out.end(), 0.0);
            for (size_t i = 0; i < an; ++i) out[static_cast<size_t>(idx[i])] += a[i];
            break;
        }
        case Op::SumAxis: {
            AxisSplit sp = split_axis(nd.in[0].shape, nd.p0);
            std::fill(out.begin(), out.end(), 0.0);
            for (int o = 0; o < sp.outer; ++o) {
                double* op = out.data() + static_cast<size_t>(o) * sp.inner;
                for (int j = 0; j < sp.n; ++j) {
                    const double* ip =
                        a + (static_cast<size_t>(o) * sp.n + j) * sp.inner;
                    for (int i = 0; i < sp.inner; ++i) op[i] += ip[i];
                }
            }
            break;
        }
        case Op::BroadcastAxis: {
            AxisSplit sp = split_axis(nd.shape, nd.p0);
            for (int o = 0; o < sp.outer; ++o) {
                const double* ip = a + static_cast<size_t>(o) * sp.inner;
                for (int j = 0; j < sp.n; ++j) {
                    double* op = out.data() + (static_cast<size_t>(o) * sp.n + j) * sp.inner;
                    std::copy(ip, ip + sp.inner, op);
                }
            }
            break;
        }
        case Op::SumAll: {
            double acc = 0.0;
            for (size_t i = 0; i < an; ++i) acc += a[i];
            out[0] = acc;
            break;
        }
        case Op::BroadcastFull:
            std::fill(out.begin(), out.end(), a[0]);
            break;
        case Op::BilinearUp: {
            const Shape& xs = nd.in[0].shape;
            const int planes = xs[0] * xs[1], h = xs[2], w = xs[3], f = nd.p0;
            LerpAxis ay = lerp_axis(h, h * f), ax = lerp_axis(w, w * f);
            for (int p = 0; p < planes; ++p)
                bilinear_up_plane(a + static_cast<size_t>(p) * h * w, h, w,
                                  out.data() + static_cast<size_t>(p) * h * f * w * f, ay, ax);
            break;
        }
        case Op::BilinearUpT: {
            const Shape& os = nd.shape;
            const int planes = os[0] * os[1], h = os[2], w = os[3], f = nd.p0;
            LerpAxis ay = lerp_axis(h, h * f), ax = lerp_axis(w, w * f);
            std::fill(out.begin(), out.end(), 0.0);
            for (int p = 0; p < planes; ++p)
                bilinear_up_t_plane(a + static_cast<size_t>(p) * h * f * w * f,
                                    out.data() + static_cast<size_t>(p) * h * w, h, w, ay, ax);
            break;
        }
        case Op::Reshape:
            std::copy(a, a + n, out.begin());
            break;
    }
}

}  // namespace detail

double Tape::replay_max_abs_diff() const {
    double worst = 0.0;
    std::vector<double> scratch;
    for (const TapeNode& nd : nodes_) {
        if (nd.op == Op::Leaf) continue;
        scratch.assign(nd.out->size(), 0.0);
        detail::recompute_node(nd, scratch);
        for (size_t i = 0; i < scratch.size(); ++i)
            worst = std::max(worst, std::fabs(scratch[i] - (*nd.out)[i]));
    }
    return worst;
}

// ---- op construction ----

class OpRunner {
public:
    static Tensor run(Op op, std::initializer_list<const Tensor*> inputs, Shape out_shape,
                      double alpha = 0.0, int p0 = 0, int p1 = 0, int p2 = 0,
                      std::shared_ptr<std::vector<int32_t>> indices = nullptr) {
        TapeNode nd;
        nd.op = op;
        nd.alpha = alpha;
        nd.p0 = p0;
        nd.p1 = p1;
        nd.p2 = p2;
        nd.indices = std::move(indices);
        nd.shape = std::move(out_shape);
        Tape* tape = nullptr;
        for (const Tensor* t : inputs) {
            require(t->defined(), std::string(op_name(op)) + ": undefined input");
            require(nd.n_in < 2, "too many inputs");
            NodeInput& in = nd.in[nd.n_in++];
            in.shape = t->shape();
            in.data = t->data_;
            if (t->on_tape()) {
                require(tape == nullptr || tape == t->tape(),
                        std::string(op_name(op)) + ": inputs from different tapes");
                tape = t->tape();
                in.node = t->node();
            }
        }
        nd.out = std::make_shared<std::vector<double>>(
            static_cast<size_t>(numel_of(nd.shape)), 0.0);
        detail::recompute_node(nd, *nd.out);
        if (tape && tape->debug_checks()) {
            for (double v : *nd.out)
                if (!std::isfinite(v))
                    fail(std::string("non-finite value produced by ") + op_name(op));
        }
        Tensor t;
        t.shape_ = nd.shape;
        t.data_ = nd.out;
        if (tape && tape->recording()) {
            t.tape_ = tape;
            t.node_ = tape->append(std::move(nd));
        }
        return t;
    }
};

namespace {

Tensor run1(Op op, const Tensor& a, Shape out_shape, double alpha = 0.0, int p0 = 0, int p1 = 0) {
    return OpRunner::run(op, {&a}, std::move(out_shape), alpha, p0, p1);
}

Tensor run2(Op op, const Tensor& a, const Tensor& b, Shape out_shape, int p0 = 0, int p1 = 0) {
    return OpRunner::run(op, {&a, &b}, std::move(out_shape), 0.0, p0, p1);
}

void same_shape(const Tensor& a, const Tensor& b, const char* what) {
    require(a.shape() == b.shape(), std::string(what) + ": shape mismatch " +
                                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "add");
    return run2(Op::Add, a, b, a.shape());
}

Tensor sub(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "sub");
    return run2(Op::Sub, a, b, a.shape());
}

Tensor neg(const Tensor& a) { return run1(Op::Neg, a, a.shape()); }

Tensor mul(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "mul");
    return run2(Op::Mul, a, b, a.shape());
}

Tensor scale(const Tensor& a, double c) { return run1(Op::Scale, a, a.shape(), c); }
Tensor abs(const Tensor& a) { return run1(Op::Abs, a, a.shape()); }
Tensor sign(const Tensor& a) { return run1(Op::Sign, a, a.shape()); }
Tensor relu(const Tensor& a) { return run1(Op::Relu, a, a.shape()); }
Tensor step(const Tensor& a) { return run1(Op::Step, a, a.shape()); }
Tensor exp(const Tensor& a) { return run1(Op::Exp, a, a.shape()); }
Tensor log(const Tensor& a) { return run1(Op::Log, a, a.shape()); }
Tensor sqrt(const Tensor& a) { return run1(Op::Sqrt, a, a.shape()); }
Tensor reciprocal(const Tensor& a) { return run1(Op::Recip, a, a.shape()); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul needs rank-2 operands");
    require(a.dim(1) == b.dim(0), "matmul inner extents differ: " + shape_str(a.shape()) +
                                      " x " + shape_str(b.shape()));
    return run2(Op::MatMul, a, b, Shape{a.dim(0), b.dim(1)});
}

Tensor transpose(const Tensor& a) {
    require(a.rank() == 2, "transpose needs a rank-2 tensor");
    return run1(Op::Transpose, a, Shape{a.dim(1), a.dim(0)});
}

Tensor conv2d(const Tensor& x, const Tensor& w) {
    ConvDims d = conv_dims(x.shape(), w.shape());
    return run2(Op::Conv2d, x, w, Shape{d.n, d.k, d.h, d.w});
}

Tensor kernel_flip(const Tensor& w) {
    require(w.rank() == 4, "kernel_flip needs a rank-4 tensor");
    return run1(Op::KernelFlip, w, Shape{w.dim(1), w.dim(0), w.dim(2), w.dim(3)});
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& dy, int kh, int kw) {
    require(x.rank() == 4 && dy.rank() == 4, "conv2d_weight_grad needs rank-4 tensors");
    require(x.dim(0) == dy.dim(0) && x.dim(2) == dy.dim(2) && x.dim(3) == dy.dim(3),
            "conv2d_weight_grad batch/spatial mismatch");
    require(kh % 2 == 1 && kw % 2 == 1, "conv2d_weight_grad kernel extents must be odd");
    return run2(Op::ConvWeightGrad, x, dy, Shape{dy.dim(1), x.dim(1), kh, kw}, kh, kw);
}

Tensor maxpool2(const Tensor& x) {
    require(x.rank() == 4, "maxpool2 needs a rank-4 tensor");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(H % 2 == 0 && W % 2 == 0, "maxpool2 needs even spatial extents, got " +
                                          shape_str(x.shape()));
    const int oh = H / 2, ow = W / 2;
    auto idx = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(N * C * oh * ow));
    const double* v = x.data();
    size_t o = 0;
    for (int p = 0; p < N * C; ++p) {
        const size_t base = static_cast<size_t>(p) * H * W;
        for (int y = 0; y < oh; ++y) {
            for (int xx = 0; xx < ow; ++xx) {
                size_t best = base + static_cast<size_t>(2 * y) * W + 2 * xx;
                const size_t cand[3] = {best + 1, best + W, best + W + 1};
                for (size_t c : cand)
                    if (v[c] > v[best]) best = c;
                (*idx)[o++] = static_cast<int32_t>(best);
            }
        }
    }
    return OpRunner::run(Op::PoolTake, {&x}, Shape{N, C, oh, ow}, 0.0, 0, 0, 0, std::move(idx));
}

Tensor sum_axis(const Tensor& a, int axis) {
    Shape s = a.shape();
    require(axis >= 0 && axis < a.rank(), "sum_axis axis out of range");
    s[static_cast<size_t>(axis)] = 1;
    return run1(Op::SumAxis, a, std::move(s), 0.0, axis);
}

Tensor broadcast_axis(const Tensor& a, int axis, int n) {
    Shape s = a.shape();
    require(axis >= 0 && axis < a.rank(), "broadcast_axis axis out of range");
    require(s[static_cast<size_t>(axis)] == 1, "broadcast_axis needs extent 1 at the axis");
    require(n >= 1, "broadcast_axis needs n >= 1");
    s[static_cast<size_t>(axis)] = n;
    return run1(Op::BroadcastAxis, a, std::move(s), 0.0, axis, n);
}

Tensor sum_all(const Tensor& a) { return run1(Op::SumAll, a, Shape{}); }

Tensor broadcast_full(const Tensor& a, Shape shape) {
    require(a.numel() == 1, "broadcast_full needs a 1-element tensor");
    return run1(Op::BroadcastFull, a, std::move(shape));
}

Tensor bilinear_upsample(const Tensor& a, int factor) {
    require(a.rank() == 4, "bilinear_upsample needs a rank-4 tensor");
    require(factor >= 1, "bilinear_upsample factor must be >= 1");
    return run1(Op::BilinearUp, a, Shape{a.dim(0), a.dim(1), a.dim(2) * factor, a.dim(3) * factor},
                0.0, factor);
}

Tensor reshape(const Tensor& a, Shape shape) {
    require(numel_of(shape) == a.numel(), "reshape to " + shape_str(shape) +
                                              " does not preserve element count from " +
                                              shape_str(a.shape()));
    return run1(Op::Reshape, a, std::move(shape));
}

// ---- composites ----

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / a.numel()); }

namespace {

// per-row max as a constant; subtracting it leaves softmax values and
// gradients mathematically unchanged while keeping exp() in range
Tensor rowmax_const(const Tensor& z) {
    const int N = z.dim(0), C = z.dim(1);
    std::vector<double> m(static_cast<size_t>(N) * C);
    const double* v = z.data();
    for (int r = 0; r < N; ++r) {
        double mx = v[static_cast<size_t>(r) * C];
        for (int c = 1; c < C; ++c) mx = std::max(mx, v[static_cast<size_t>(r) * C + c]);
        for (int c = 0; c < C; ++c) m[static_cast<size_t>(r) * C + c] = mx;
    }
    return Tensor(Shape{N, C}, std::move(m));
}

}  // namespace

Tensor softmax(const Tensor& z) {
    require(z.rank() == 2, "softmax needs a rank-2 tensor");
    Tensor e = exp(sub(z, rowmax_const(z)));
    Tensor s = broadcast_axis(sum_axis(e, 1), 1, z.dim(1));
    return mul(e, reciprocal(s));
}

Tensor log_softmax(const Tensor& z) {
    require(z.rank() == 2, "log_softmax needs a rank-2 tensor");
    Tensor shifted = sub(z, rowmax_const(z));
    Tensor s = sum_axis(exp(shifted), 1);
    return sub(shifted, broadcast_axis(log(s), 1, z.dim(1)));
}

Tensor global_avg_pool(const Tensor& x) {
    require(x.rank() == 4, "global_avg_pool needs a rank-4 tensor");
    Tensor s = sum_axis(sum_axis(x, 3), 2);
    return scale(reshape(s, Shape{x.dim(0), x.dim(1)}), 1.0 / (x.dim(2) * x.dim(3)));
}

// ---- differentiation ----

namespace {

Tensor input_tensor(Tape* tape, const NodeInput& in) {
    if (in.node >= 0) return tape->tensor_for(in.node);
    Tensor t(in.shape);
    std::copy(in.data->begin(), in.data->end(), t.data());
    return t;
}

}  // namespace

std::vector<Tensor> backward(const Tensor& output, const std::vector<Tensor>& wrt,
                             bool create_higher_order) {
    require(output.defined() && output.numel() == 1, "backward needs a scalar output");
    std::vector<Tensor> results;
    results.reserve(wrt.size());
    if (!output.on_tape()) {
        for (const Tensor& w : wrt) results.emplace_back(Tensor(w.shape()));
        return results;
    }
    Tape* tape = output.tape();
    for (const Tensor& w : wrt)
        require(w.on_tape() && w.tape() == tape, "backward: wrt tensor is not on this tape");

    const int root = output.node();
    std::vector<Tensor> grads(static_cast<size_t>(root) + 1);
    grads[static_cast<size_t>(root)] = Tensor::full(output.shape(), 1.0);

    std::unique_ptr<Tape::PauseGuard> pause;
    if (!create_higher_order) pause = std::make_unique<Tape::PauseGuard>(*tape);

    auto accumulate = [&](int node, const Tensor& g) {
        Tensor& slot = grads[static_cast<size_t>(node)];
        slot = slot.defined() ? add(slot, g) : g;
    };

    for (int id = root; id >= 0; --id) {
        const Tensor& g = grads[static_cast<size_t>(id)];
        if (!g.defined()) continue;
        const TapeNode& nd = tape->node(id);
        if (nd.op == Op::Leaf || nd.op == Op::Sign || nd.op == Op::Step) continue;
        auto in0 = [&] { return input_tensor(tape, nd.in[0]); };
        auto in1 = [&] { return input_tensor(tape, nd.in[1]); };
        auto out_t = [&] { return tape->tensor_for(id); };
        const int t0 = nd.in[0].node, t1 = nd.n_in > 1 ? nd.in[1].node : -1;
        switch (nd.op) {
            case Op::Add:
                if (t0 >= 0) accumulate(t0, g);
                if (t1 >= 0) accumulate(t1, g);
                break;
            case Op::Sub:
                if (t0 >= 0) accumulate(t0, g);
                if (t1 >= 0) accumulate(t1, neg(g));
                break;
            case Op::Neg:
                if (t0 >= 0) accumulate(t0, neg(g));
                break;
            case Op::Mul:
                if (t0 >= 0) accumulate(t0, mul(g, in1()));
                if (t1 >= 0) accumulate(t1, mul(g, in0()));
                break;
            case Op::Scale:
                if (t0 >= 0) accumulate(t0, scale(g, nd.alpha));
                break;
            case Op::Abs:
                if (t0 >= 0) accumulate(t0, mul(g, sign(in0())));
                break;
            case Op::Relu:
                if (t0 >= 0) accumulate(t0, mul(g, step(in0())));
                break;
            case Op::Exp:
                if (t0 >= 0) accumulate(t0, mul(g, out_t()));
                break;
            case Op::Log:
                if (t0 >= 0) accumulate(t0, mul(g, reciprocal(in0())));
                break;
            case Op::Sqrt:
                if (t0 >= 0) accumulate(t0, scale(mul(g, reciprocal(out_t())), 0.5));
                break;
            case Op::Recip: {
                if (t0 >= 0) {
                    Tensor o = out_t();
                    accumulate(t0, neg(mul(g, mul(o, o))));
                }
                break;
            }
            case Op::MatMul:
                if (t0 >= 0) accumulate(t0, matmul(g, transpose(in1())));
                if (t1 >= 0) accumulate(t1, matmul(transpose(in0()), g));
                break;
            case Op::Transpose:
                if (t0 >= 0) accumulate(t0, transpose(g));
                break;
            case Op::Conv2d:
                if (t0 >= 0) accumulate(t0, conv2d(g, kernel_flip(in1())));
                if (t1 >= 0)
                    accumulate(t1, conv2d_weight_grad(in0(), g, nd.in[1].shape[2],
                                                      nd.in[1].shape[3]));
                break;
            case Op::KernelFlip:
                if (t0 >= 0) accumulate(t0, kernel_flip(g));
                break;
            case Op::ConvWeightGrad:
                // output is bilinear in (x, dy): d/dx pairs dy with the flipped
                // grad kernel, d/d(dy) is a plain convolution of x with it
                if (t0 >= 0) accumulate(t0, conv2d(in1(), kernel_flip(g)));
                if (t1 >= 0) accumulate(t1, conv2d(in0(), g));
                break;
            case Op::PoolTake:
                if (t0 >= 0)
                    accumulate(t0, OpRunner::run(Op::PoolScatter, {&g}, nd.in[0].shape, 0.0, 0, 0,
                                                 0, nd.indices));
                break;
            case Op::PoolScatter:
                if (t0 >= 0)
                    accumulate(t0, OpRunner::run(Op::PoolTake, {&g}, nd.in[0].shape, 0.0, 0, 0, 0,
                                                 nd.indices));
                break;
            case Op::SumAxis:
                if (t0 >= 0)
                    accumulate(t0,
                               broadcast_axis(g, nd.p0, nd.in[0].shape[static_cast<size_t>(nd.p0)]));
                break;
            case Op::BroadcastAxis:
                if (t0 >= 0) accumulate(t0, sum_axis(g, nd.p0));
                break;
            case Op::SumAll:
                if (t0 >= 0) accumulate(t0, broadcast_full(g, nd.in[0].shape));
                break;
            case Op::BroadcastFull:
                if (t0 >= 0) accumulate(t0, reshape(sum_all(g), nd.in[0].shape));
                break;
            case Op::BilinearUp:
                if (t0 >= 0)
                    accumulate(t0, OpRunner::run(Op::BilinearUpT, {&g}, nd.in[0].shape, 0.0,
                                                 nd.p0));
                break;
            case Op::BilinearUpT:
                if (t0 >= 0)
                    accumulate(t0, OpRunner::run(Op::BilinearUp, {&g}, nd.in[0].shape, 0.0,
                                                 nd.p0));
                break;
            case Op::Reshape:
                if (t0 >= 0) accumulate(t0, reshape(g, nd.in[0].shape));
                break;
            default:
                fail(std::string("no gradient rule for ") + op_name(nd.op));
        }
    }

    for (const Tensor& w : wrt) {
        const int id = w.node();
        if (id <= root && grads[static_cast<size_t>(id)].defined())
            results.push_back(grads[static_cast<size_t>(id)]);
        else
            results.emplace_back(Tensor(w.shape()));
    }
    return results;
}

Tensor input_gradient(const Tensor& score, const Tensor& image) {
    return backward(score, {image}, true)[0];
}

// ---- value helpers ----

std::vector<double> bilinear_resize_grid(const std::vector<double>& src, int h, int w, int out_h,
                                         int out_w) {
    require(h >= 1 && w >= 1 && out_h >= 1 && out_w >= 1, "resize extents must be positive");
    require(static_cast<int>(src.size()) == h * w, "resize source size mismatch");
    LerpAxis ay = lerp_axis(h, out_h), ax = lerp_axis(w, out_w);
    std::vector<double> dst(static_cast<size_t>(out_h) * out_w);
    bilinear_up_plane(src.data(), h, w, dst.data(), ay, ax);
    return dst;
}

std::vector<double> area_downsample_grid(const std::vector<double>& src, int h, int w, int out_h,
                                         int out_w) {
    require(out_h >= 1 && out_w >= 1 && h % out_h == 0 && w % out_w == 0,
            "area_downsample needs target extents that divide the source");
    require(static_cast<int>(src.size()) == h * w, "area_downsample source size mismatch");
    const int fy = h / out_h, fx = w / out_w;
    std::vector<double> dst(static_cast<size_t>(out_h) * out_w, 0.0);
    for (int oy = 0; oy < out_h; ++oy)
        for (int ox = 0; ox < out_w; ++ox) {
            double acc = 0.0;
            for (int dy = 0; dy < fy; ++dy)
                for (int dx = 0; dx < fx; ++dx)
                    acc += src[static_cast<size_t>(oy * fy + dy) * w + (ox * fx + dx)];
            dst[static_cast<size_t>(oy) * out_w + ox] = acc / (fy * fx);
        }
    return dst;
}

// ---- serialization ----

namespace {

constexpr char kMagic[8] = {'G', 'A', 'L', 'S', 'T', 'E', 'N', '1'};

template <typename T>
void write_raw(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    require(static_cast<bool>(is), "truncated tensor stream");
    return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    require(t.defined(), "cannot write an undefined tensor");
    os.write(kMagic, 8);
    write_raw<uint32_t>(os, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_raw<uint64_t>(os, static_cast<uint64_t>(t.dim(i)));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(sizeof(double)) * t.numel());
    require(static_cast<bool>(os), "tensor write failed");
}

Tensor read_tensor(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    require(static_cast<bool>(is) && std::memcmp(magic, kMagic, 8) == 0,
            "bad tensor container magic");
    const uint32_t rank = read_raw<uint32_t>(is);
    require(rank <= 8, "tensor rank " + std::to_string(rank) + " out of range");
    Shape shape;
    uint64_t count = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        const uint64_t e = read_raw<uint64_t>(is);
        require(e >= 1 && e <= (1u << 30), "tensor extent out of range");
        count *= e;
        require(count <= (1u << 30), "tensor too large");
        shape.push_back(static_cast<int>(e));
    }
    std::vector<double> values(static_cast<size_t>(count));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(sizeof(double) * count));
    require(static_cast<bool>(is), "truncated tensor stream");
    return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), "cannot open " + path + " for writing");
    write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "cannot open " + path);
    return read_tensor(is);
}

}  // namespace gals
