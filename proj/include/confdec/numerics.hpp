#pragma once

// Dense tensors and a tape-based reverse-mode autodiff graph.
//
// Every value is an Eigen matrix of doubles. Vectors are n x 1 columns and
// scalars are 1 x 1. Nodes are appended to a Graph in creation order, which is
// also a valid topological order, so backward() is a single reverse sweep.

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace confdec {

template <typename Scalar>
using TensorT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Tensor = TensorT<double>;
using Vector = VectorT<double>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

std::string shape_string(const Tensor& t);

enum class Op : std::uint8_t {
    Leaf,
    Constant,
    StopGradient,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Concat,
    Slice,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    LogSigmoid,
    Softmax,
    SoftmaxPlusOne,
    LogSoftmax,
    Norm,
    GatherRow,
    Blend,
    Sum,
    Pick,
    ScatterAdd,
    Mask,
    Transpose,
    StackColumns,
    ClampMin,
};

const char* op_name(Op op);

class Graph;

/// Handle to a node in a Graph. Cheap to copy; only valid while the graph lives.
class Var {
public:
    Var() = default;
    Var(Graph* graph, int id) : graph_(graph), id_(id) {}

    [[nodiscard]] int id() const { return id_; }
    [[nodiscard]] Graph& graph() const { return *graph_; }
    [[nodiscard]] bool valid() const { return graph_ != nullptr && id_ >= 0; }

    [[nodiscard]] const Tensor& value() const;
    [[nodiscard]] double scalar() const;
    [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
    [[nodiscard]] Eigen::Index cols() const { return value().cols(); }

private:
    Graph* graph_ = nullptr;
    int id_ = -1;
};

class Graph {
public:
    Graph() { nodes_.reserve(4096); }
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Trainable input. Gradients accumulate into it on backward().
    Var leaf(Tensor value);
    /// Non-trainable input.
    Var constant(Tensor value);
    Var scalar(double v);

    [[nodiscard]] const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    [[nodiscard]] bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    /// Gradient of the last backward() target. Zero tensor when the node was not reached.
    [[nodiscard]] Tensor grad(Var v) const;
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a 1 x 1 loss. Throws ShapeError for non-scalar losses.
    void backward(Var loss);

    // Stop-gradient freezing. While recording, every stop_gradient() output is
    // appended to the sink; while replaying, the n-th stop_gradient() call
    // returns the n-th recorded tensor instead of its input value.
    void record_stop_gradients(std::vector<Tensor>* sink) { sg_sink_ = sink; }
    void replay_stop_gradients(const std::vector<Tensor>* source) {
        sg_source_ = source;
        sg_cursor_ = 0;
    }

    struct Node {
        Tensor value;
        Tensor grad;
        Tensor aux;  // op-specific cache (mask, softmax output of LogSoftmax)
        std::vector<int> index;  // scatter targets or variadic inputs
        std::array<int, 3> in{-1, -1, -1};
        double scale = 0.0;
        Eigen::Index start = 0;
        Op op = Op::Constant;
        bool requires_grad = false;
    };

    Var push(Op op, Tensor value, std::array<int, 3> in, const char* name);
    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Tensor& stop_gradient_value(const Tensor& live);

private:
    Tensor& grad_slot(int id);
    void propagate(int id);

    std::vector<Node> nodes_;
    std::vector<Tensor>* sg_sink_ = nullptr;
    const std::vector<Tensor>* sg_source_ = nullptr;
    std::size_t sg_cursor_ = 0;
};

// ---- forward ops ----------------------------------------------------------

Var stop_gradient(Var x);
Var matmul(Var a, Var b);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
/// Elementwise product; either side may be 1 x 1 and is then broadcast.
Var operator*(Var a, Var b);
/// Elementwise quotient; the divisor may be 1 x 1.
Var operator/(Var a, Var b);
Var operator*(double s, Var x);
Var operator*(Var x, double s);
Var operator+(Var x, double c);
Var operator+(double c, Var x);
Var operator-(double c, Var x);
Var operator-(Var x);
Var scale(Var x, double s);
Var add_scalar(Var x, double c);
/// Stacks column vectors (or matrices with equal column counts) vertically.
Var concat(std::span<const Var> parts);
Var concat(Var a, Var b);
Var slice_rows(Var x, Eigen::Index start, Eigen::Index count);
Var sigmoid(Var x);
Var tanh(Var x);
Var exp(Var x);
/// Natural log with inputs floored at kLogFloor so log-probabilities stay finite.
Var log(Var x);
Var log_sigmoid(Var x);
Var softmax(Var x);
/// exp(x_i) / (1 + sum_j exp(x_j)): entries sum to strictly less than one.
Var softmax_plus_one(Var x);
Var log_softmax(Var x);
/// Euclidean norm. The subgradient at the zero vector is zero.
Var euclidean_norm(Var x);
/// Row `row` of a matrix, returned as a column vector.
Var embedding_gather(Var table, Eigen::Index row);
/// (1 - w) a + w b for a scalar weight w.
Var blend(Var a, Var b, Var w);
Var sum(Var x);
Var dot(Var a, Var b);
Var pick(Var x, Eigen::Index i);
/// out[index[s]] += src[s] for a length-`size` output vector.
Var scatter_add(Var src, std::span<const int> index, Eigen::Index size);
Var transpose(Var x);
/// max(x, floor) elementwise; no gradient where the floor is active.
Var clamp_min(Var x, double floor);
/// Places column vectors side by side: n vectors of length d give a d x n matrix.
Var stack_columns(std::span<const Var> columns);
/// Elementwise product with a constant mask (dropout).
Var apply_mask(Var x, Tensor mask);

inline constexpr double kLogFloor = 1e-300;

// ---- gradient checking ----------------------------------------------------

struct GradCheckOptions {
    /// Hold stop-gradient outputs at their unperturbed values in the finite-difference oracle.
    bool freeze_stop_gradients = true;
    /// Skip elements whose analytic and numeric gradients are both below this magnitude.
    double zero_tolerance = 0.0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    Eigen::Index worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
};

/// Builds a scalar loss from leaves that grad_check registers, one per parameter, in order.
using GraphFunction = std::function<Var(Graph&, std::span<const Var>)>;

/// Compares autodiff against central differences for every element of every parameter.
/// Relative error is |autodiff - numeric| / (|numeric| + 1e-8).
GradCheckResult grad_check(const GraphFunction& f, std::span<Tensor* const> params, double h,
                           GradCheckOptions options = {});

}  // namespace confdec
