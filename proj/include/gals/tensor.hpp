#pragma once
// Dense double-precision tensors on a reverse-mode differentiation tape.
//
// The backward pass is itself built from the tape's primitive ops: every
// vector-Jacobian product is an expression over primitives that have VJPs of
// their own. Calling backward() with create_higher_order=true therefore
// yields gradient tensors that live on the tape and can be differentiated
// again — this is what makes a penalty on input gradients trainable.
//
// All reductions run in a fixed row-major order, so repeated runs with the
// same inputs produce bit-identical values and gradients.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace gals {

using Shape = std::vector<int>;

int numel_of(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);  // zero-filled constant
    Tensor(Shape shape, std::vector<double> values);
    static Tensor scalar(double v);
    static Tensor full(Shape shape, double v);

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int numel() const { return data_ ? static_cast<int>(data_->size()) : 0; }
    bool defined() const { return data_ != nullptr; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    const std::vector<double>& values() const { return *data_; }
    double item() const;  // requires numel()==1

    bool on_tape() const { return node_ >= 0; }
    bool requires_grad() const { return on_tape(); }
    int node() const { return node_; }
    Tape* tape() const { return tape_; }

    // Same storage, no tape association.
    Tensor detach() const;
    // Deep copy of the values, no tape association.
    Tensor clone() const;

private:
    Tensor(Shape shape, std::shared_ptr<std::vector<double>> data, Tape* tape, int node)
        : shape_(std::move(shape)), data_(std::move(data)), tape_(tape), node_(node) {}

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;

    friend class Tape;
    friend class OpRunner;
};

enum class Op : uint8_t {
    Leaf,
    Add, Sub, Neg, Mul, Scale,
    Abs, Sign, Relu, Step,
    Exp, Log, Sqrt, Recip,
    MatMul, Transpose,
    Conv2d, KernelFlip, ConvWeightGrad,
    PoolTake, PoolScatter,
    SumAxis, BroadcastAxis,
    SumAll, BroadcastFull,
    BilinearUp, BilinearUpT,
    Reshape,
};

const char* op_name(Op op);

struct NodeInput {
    int node = -1;  // -1: constant input, value saved here
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
};

struct TapeNode {
    Op op = Op::Leaf;
    NodeInput in[2];
    int n_in = 0;
    Shape shape;
    std::shared_ptr<std::vector<double>> out;
    double alpha = 0.0;       // Scale factor
    int p0 = 0, p1 = 0, p2 = 0;  // axis / extents / upsample factor / kernel dims
    std::shared_ptr<std::vector<int32_t>> indices;  // pooling source offsets
};

// Op records in topological order; node inputs always precede their consumers.
class Tape {
public:
    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Register values as a differentiable leaf. The storage is shared, not
    // copied; do not mutate it while the tape is still in use.
    Tensor watch(const Tensor& values);

    int size() const { return static_cast<int>(nodes_.size()); }
    const TapeNode& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    Tensor tensor_for(int id) const;

    bool recording() const { return pause_depth_ == 0; }
    bool debug_checks() const { return debug_; }
    void set_debug_checks(bool on) { debug_ = on; }

    // Recomputes every non-leaf node from its recorded inputs and returns the
    // max absolute deviation from the stored outputs (0.0 for a healthy tape).
    double replay_max_abs_diff() const;

    class PauseGuard {
    public:
        explicit PauseGuard(Tape& t) : tape_(t) { ++tape_.pause_depth_; }
        ~PauseGuard() { --tape_.pause_depth_; }
        PauseGuard(const PauseGuard&) = delete;
        PauseGuard& operator=(const PauseGuard&) = delete;

    private:
        Tape& tape_;
    };

private:
    int append(TapeNode nd);

    std::vector<TapeNode> nodes_;
    int pause_depth_ = 0;
    bool debug_ = false;

    friend class OpRunner;
};

// ---- primitives ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor mul(const Tensor& a, const Tensor& b);   // elementwise
Tensor scale(const Tensor& a, double c);
Tensor abs(const Tensor& a);                    // d|x|/dx at 0 is 0
Tensor sign(const Tensor& a);                   // zero derivative everywhere
Tensor relu(const Tensor& a);                   // drelu/dx at 0 is 0
Tensor step(const Tensor& a);                   // 1 if x>0 else 0; zero derivative
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor reciprocal(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // (R,K)x(K,C)
Tensor transpose(const Tensor& a);                // 2-D

// stride 1, zero "same" padding, odd kernel extents
// x: (N,C,H,W), w: (K,C,kh,kw) -> (N,K,H,W)
Tensor conv2d(const Tensor& x, const Tensor& w);
// (K,C,kh,kw) -> (C,K,kh,kw) with both spatial axes reversed
Tensor kernel_flip(const Tensor& w);
// gradient of <conv2d(x,w), dy> w.r.t. w; bilinear in (x, dy)
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& dy, int kh, int kw);

// 2x2 max pooling, stride 2, even spatial extents; ties resolve to the
// first element in row-major order
Tensor maxpool2(const Tensor& x);

Tensor sum_axis(const Tensor& a, int axis);              // keeps the axis as extent 1
Tensor broadcast_axis(const Tensor& a, int axis, int n); // expands an extent-1 axis
Tensor sum_all(const Tensor& a);                         // rank-0 result
Tensor broadcast_full(const Tensor& a, Shape shape);     // from a 1-element tensor

// half-pixel-center convention, integer factor
Tensor bilinear_upsample(const Tensor& a, int factor);   // (N,C,h,w) -> (N,C,h*f,w*f)

Tensor reshape(const Tensor& a, Shape shape);

// ---- composites ----
Tensor mean_all(const Tensor& a);
Tensor softmax(const Tensor& z);      // (N,C), rows
Tensor log_softmax(const Tensor& z);  // (N,C), rows
Tensor global_avg_pool(const Tensor& x);  // (N,C,H,W) -> (N,C)

// ---- differentiation ----
// Reverse-mode gradients of a scalar w.r.t. tensors on the tape. With
// create_higher_order the returned gradients carry tape nodes and can be
// differentiated again. A constant (off-tape) output yields zero gradients.
std::vector<Tensor> backward(const Tensor& output, const std::vector<Tensor>& wrt,
                             bool create_higher_order);

// dy/dX recorded on the tape, same shape as the image.
Tensor input_gradient(const Tensor& score, const Tensor& image);

// ---- value helpers (no tape) ----
// Bilinear resize of a single h x w grid to (out_h, out_w), half-pixel centers.
std::vector<double> bilinear_resize_grid(const std::vector<double>& src, int h, int w,
                                         int out_h, int out_w);
// Area-average pooling of a single grid down to (out_h, out_w); extents must divide.
std::vector<double> area_downsample_grid(const std::vector<double>& src, int h, int w,
                                         int out_h, int out_w);

// ---- serialization ----
// Flat container: magic "GALSTEN1", u32 rank, u64 extents, row-major
// little-endian IEEE doubles.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace gals
