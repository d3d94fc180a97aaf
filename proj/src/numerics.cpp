#include "confdec/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace confdec {

std::string shape_string(const Tensor& t) {
    std::ostringstream out;
    out << '[' << t.rows() << 'x' << t.cols() << ']';
    return out.str();
}

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Constant: return "constant";
        case Op::StopGradient: return "stop_gradient";
        case Op::MatMul: return "matmul";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Scale: return "scale";
        case Op::AddScalar: return "add_scalar";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Sigmoid: return "sigmoid";
        case Op::Tanh: return "tanh";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::LogSigmoid: return "log_sigmoid";
        case Op::Softmax: return "softmax";
        case Op::SoftmaxPlusOne: return "softmax_plus_one";
        case Op::LogSoftmax: return "log_softmax";
        case Op::Norm: return "euclidean_norm";
        case Op::GatherRow: return "embedding_gather";
        case Op::Blend: return "blend";
        case Op::Sum: return "sum";
        case Op::Pick: return "pick";
        case Op::ScatterAdd: return "scatter_add";
        case Op::Mask: return "mask";
        case Op::Transpose: return "transpose";
        case Op::StackColumns: return "stack_columns";
        case Op::ClampMin: return "clamp_min";
    }
    return "?";
}

namespace {

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                     shape_string(b));
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const std::string& what) {
    throw ShapeError(std::string(op) + ": " + what + ", got " + shape_string(a));
}

bool is_scalar(const Tensor& t) { return t.rows() == 1 && t.cols() == 1; }

void require_vector(const char* op, const Tensor& t) {
    if (t.cols() != 1 || t.rows() < 1) shape_fail(op, t, "expected a non-empty column vector");
}

void require_finite(const char* op, const Tensor& t) {
    if (!t.allFinite()) throw NumericError(std::string(op) + ": non-finite value in " + shape_string(t));
}

// Elementwise binary op with 1x1 broadcasting on either side.
enum class Broadcast { None, Left, Right };

Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::None;
    if (is_scalar(a)) return Broadcast::Left;
    if (is_scalar(b)) return Broadcast::Right;
    shape_fail(op, a, b);
}

double sigmoid_scalar(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
double softplus_scalar(double x) {
    if (x > 0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

void accumulate(Tensor& slot, const Tensor& delta) { slot += delta; }

double reduce(const Tensor& t) { return t.sum(); }

}  // namespace

const Tensor& Var::value() const { return graph_->value(id_); }

double Var::scalar() const {
    const Tensor& v = value();
    if (!is_scalar(v)) throw ShapeError("scalar(): expected [1x1], got " + shape_string(v));
    return v(0, 0);
}

Var Graph::push(Op op, Tensor value, std::array<int, 3> in, const char* name) {
    require_finite(name, value);
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.in = in;
    if (op == Op::Leaf) {
        n.requires_grad = true;
    } else if (op != Op::Constant && op != Op::StopGradient) {
        for (int i : in) {
            if (i >= 0 && nodes_[static_cast<std::size_t>(i)].requires_grad) n.requires_grad = true;
        }
    }
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::leaf(Tensor value) { return push(Op::Leaf, std::move(value), {-1, -1, -1}, "leaf"); }

Var Graph::constant(Tensor value) { return push(Op::Constant, std::move(value), {-1, -1, -1}, "constant"); }

Var Graph::scalar(double v) { return constant(Tensor::Constant(1, 1, v)); }

const Tensor& Graph::stop_gradient_value(const Tensor& live) {
    if (sg_source_ != nullptr) {
        if (sg_cursor_ >= sg_source_->size())
            throw std::logic_error("stop_gradient replay: more stop-gradient nodes than recorded");
        return (*sg_source_)[sg_cursor_++];
    }
    if (sg_sink_ != nullptr) sg_sink_->push_back(live);
    return live;
}

Tensor Graph::grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.grad.size() == 0) return Tensor::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

Tensor& Graph::grad_slot(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Tensor::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

void Graph::backward(Var loss) {
    if (&loss.graph() != this) throw std::logic_error("backward: loss belongs to another graph");
    const Tensor& lv = value(loss.id());
    if (!is_scalar(lv)) throw ShapeError("backward: loss must be [1x1], got " + shape_string(lv));
    for (Node& n : nodes_) n.grad.resize(0, 0);
    grad_slot(loss.id()).setConstant(1.0);
    for (int id = loss.id(); id >= 0; --id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || n.grad.size() == 0) continue;
        propagate(id);
    }
}

void Graph::propagate(int id) {
    // Copy the handful of fields needed; grad_slot() may touch other nodes but
    // never reallocates the node vector.
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const Tensor& g = n.grad;
    const int a = n.in[0];
    const int b = n.in[1];
    const int c = n.in[2];
    auto wants = [&](int i) { return i >= 0 && nodes_[static_cast<std::size_t>(i)].requires_grad; };
    auto val = [&](int i) -> const Tensor& { return nodes_[static_cast<std::size_t>(i)].value; };

    switch (n.op) {
        case Op::Leaf:
        case Op::Constant:
        case Op::StopGradient:
            break;
        case Op::MatMul:
            if (wants(a)) accumulate(grad_slot(a), g * val(b).transpose());
            if (wants(b)) accumulate(grad_slot(b), val(a).transpose() * g);
            break;
        case Op::Add:
        case Op::Sub: {
            const double sign = n.op == Op::Add ? 1.0 : -1.0;
            if (wants(a)) {
                if (is_scalar(val(a)) && !is_scalar(g)) grad_slot(a)(0, 0) += reduce(g);
                else accumulate(grad_slot(a), g);
            }
            if (wants(b)) {
                if (is_scalar(val(b)) && !is_scalar(g)) grad_slot(b)(0, 0) += sign * reduce(g);
                else accumulate(grad_slot(b), sign * g);
            }
            break;
        }
        case Op::Mul: {
            const Tensor& va = val(a);
            const Tensor& vb = val(b);
            if (wants(a)) {
                if (is_scalar(va) && !is_scalar(g)) grad_slot(a)(0, 0) += g.cwiseProduct(vb).sum();
                else if (is_scalar(vb)) accumulate(grad_slot(a), g * vb(0, 0));
                else accumulate(grad_slot(a), g.cwiseProduct(vb));
            }
            if (wants(b)) {
                if (is_scalar(vb) && !is_scalar(g)) grad_slot(b)(0, 0) += g.cwiseProduct(va).sum();
                else if (is_scalar(va)) accumulate(grad_slot(b), g * va(0, 0));
                else accumulate(grad_slot(b), g.cwiseProduct(va));
            }
            break;
        }
        case Op::Div: {
            const Tensor& va = val(a);
            const Tensor& vb = val(b);
            if (is_scalar(vb)) {
                const double d = vb(0, 0);
                if (wants(a)) {
                    if (is_scalar(va) && !is_scalar(g)) grad_slot(a)(0, 0) += reduce(g) / d;
                    else accumulate(grad_slot(a), g / d);
                }
                if (wants(b)) grad_slot(b)(0, 0) += -(g.cwiseProduct(n.value)).sum() / d;
            } else {
                if (wants(a)) {
                    if (is_scalar(va)) grad_slot(a)(0, 0) += g.cwiseQuotient(vb).sum();
                    else accumulate(grad_slot(a), g.cwiseQuotient(vb));
                }
                if (wants(b)) accumulate(grad_slot(b), -(g.cwiseProduct(n.value)).cwiseQuotient(vb));
            }
            break;
        }
        case Op::Scale:
            if (wants(a)) accumulate(grad_slot(a), n.scale * g);
            break;
        case Op::AddScalar:
            if (wants(a)) accumulate(grad_slot(a), g);
            break;
        case Op::Concat: {
            // Inputs are stored in index (variable length).
            Eigen::Index offset = 0;
            for (int part : n.index) {
                const Eigen::Index r = val(part).rows();
                if (wants(part)) accumulate(grad_slot(part), g.middleRows(offset, r));
                offset += r;
            }
            break;
        }
        case Op::Slice:
            if (wants(a)) grad_slot(a).middleRows(n.start, g.rows()) += g;
            break;
        case Op::Sigmoid:
            if (wants(a)) {
                const Tensor& y = n.value;
                accumulate(grad_slot(a), g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
            }
            break;
        case Op::Tanh:
            if (wants(a)) {
                const Tensor& y = n.value;
                accumulate(grad_slot(a), g.cwiseProduct((1.0 - y.array().square()).matrix()));
            }
            break;
        case Op::Exp:
            if (wants(a)) accumulate(grad_slot(a), g.cwiseProduct(n.value));
            break;
        case Op::Log:
            if (wants(a)) {
                const Tensor& x = val(a);
                Tensor d = (x.array() > kLogFloor).select(g.array() / x.array(), 0.0);
                accumulate(grad_slot(a), d);
            }
            break;
        case Op::LogSigmoid:
            if (wants(a)) {
                const Tensor& x = val(a);
                Tensor d = x.unaryExpr([](double v) { return sigmoid_scalar(-v); });
                accumulate(grad_slot(a), g.cwiseProduct(d));
            }
            break;
        case Op::Softmax:
        case Op::SoftmaxPlusOne:
            // Both share the Jacobian diag(y) - y y^T.
            if (wants(a)) {
                const Tensor& y = n.value;
                const double inner = g.cwiseProduct(y).sum();
                accumulate(grad_slot(a), y.cwiseProduct((g.array() - inner).matrix()));
            }
            break;
        case Op::LogSoftmax:
            if (wants(a)) {
                const Tensor& p = n.aux;
                accumulate(grad_slot(a), g - p * g.sum());
            }
            break;
        case Op::Norm:
            if (wants(a)) {
                const double r = n.value(0, 0);
                if (r > 0.0) accumulate(grad_slot(a), val(a) * (g(0, 0) / r));
            }
            break;
        case Op::GatherRow:
            if (wants(a)) grad_slot(a).row(n.start) += g.transpose();
            break;
        case Op::Blend: {
            const double w = val(c)(0, 0);
            if (wants(a)) accumulate(grad_slot(a), (1.0 - w) * g);
            if (wants(b)) accumulate(grad_slot(b), w * g);
            if (wants(c)) grad_slot(c)(0, 0) += g.cwiseProduct(val(b) - val(a)).sum();
            break;
        }
        case Op::Sum:
            if (wants(a)) grad_slot(a).array() += g(0, 0);
            break;
        case Op::Pick:
            if (wants(a)) grad_slot(a)(n.start, 0) += g(0, 0);
            break;
        case Op::ScatterAdd:
            if (wants(a)) {
                Tensor& slot = grad_slot(a);
                for (std::size_t s = 0; s < n.index.size(); ++s)
                    slot(static_cast<Eigen::Index>(s), 0) += g(n.index[s], 0);
            }
            break;
        case Op::Mask:
            if (wants(a)) accumulate(grad_slot(a), g.cwiseProduct(n.aux));
            break;
        case Op::ClampMin:
            if (wants(a)) {
                const double floor = n.scale;
                accumulate(grad_slot(a), (val(a).array() > floor).select(g.array(), 0.0).matrix());
            }
            break;
        case Op::Transpose:
            if (wants(a)) accumulate(grad_slot(a), g.transpose());
            break;
        case Op::StackColumns:
            for (std::size_t k = 0; k < n.index.size(); ++k) {
                const int part = n.index[k];
                if (wants(part)) accumulate(grad_slot(part), g.col(static_cast<Eigen::Index>(k)));
            }
            break;
    }
}

// ---- forward ops ----------------------------------------------------------

Var stop_gradient(Var x) {
    Graph& g = x.graph();
    Tensor v = g.stop_gradient_value(x.value());
    return g.push(Op::StopGradient, std::move(v), {x.id(), -1, -1}, "stop_gradient");
}

Var matmul(Var a, Var b) {
    const Tensor& va = a.value();
    const Tensor& vb = b.value();
    if (va.cols() != vb.rows()) shape_fail("matmul", va, vb);
    return a.graph().push(Op::MatMul, va * vb, {a.id(), b.id(), -1}, "matmul");
}

namespace {

template <typename F>
Tensor broadcast_apply(const char* op, const Tensor& a, const Tensor& b, F f) {
    switch (broadcast_kind(op, a, b)) {
        case Broadcast::None: return a.binaryExpr(b, f);
        case Broadcast::Left: {
            const double s = a(0, 0);
            return b.unaryExpr([&](double v) { return f(s, v); });
        }
        case Broadcast::Right: {
            const double s = b(0, 0);
            return a.unaryExpr([&](double v) { return f(v, s); });
        }
    }
    return {};
}

}  // namespace

Var operator+(Var a, Var b) {
    Tensor v = broadcast_apply("add", a.value(), b.value(), [](double x, double y) { return x + y; });
    return a.graph().push(Op::Add, std::move(v), {a.id(), b.id(), -1}, "add");
}

Var operator-(Var a, Var b) {
    Tensor v = broadcast_apply("sub", a.value(), b.value(), [](double x, double y) { return x - y; });
    return a.graph().push(Op::Sub, std::move(v), {a.id(), b.id(), -1}, "sub");
}

Var operator*(Var a, Var b) {
    Tensor v = broadcast_apply("mul", a.value(), b.value(), [](double x, double y) { return x * y; });
    return a.graph().push(Op::Mul, std::move(v), {a.id(), b.id(), -1}, "mul");
}

Var operator/(Var a, Var b) {
    const Tensor& va = a.value();
    const Tensor& vb = b.value();
    if (broadcast_kind("div", va, vb) == Broadcast::Left && !is_scalar(vb))
        shape_fail("div", va, vb);  // scalar / vector is not needed anywhere
    Tensor v = broadcast_apply("div", va, vb, [](double x, double y) { return x / y; });
    return a.graph().push(Op::Div, std::move(v), {a.id(), b.id(), -1}, "div");
}

Var scale(Var x, double s) {
    Var out = x.graph().push(Op::Scale, x.value() * s, {x.id(), -1, -1}, "scale");
    x.graph().node(out.id()).scale = s;
    return out;
}

Var add_scalar(Var x, double c) {
    Tensor v = x.value().array() + c;
    return x.graph().push(Op::AddScalar, std::move(v), {x.id(), -1, -1}, "add_scalar");
}

Var operator*(double s, Var x) { return scale(x, s); }
Var operator*(Var x, double s) { return scale(x, s); }
Var operator+(Var x, double c) { return add_scalar(x, c); }
Var operator+(double c, Var x) { return add_scalar(x, c); }
Var operator-(double c, Var x) { return add_scalar(scale(x, -1.0), c); }
Var operator-(Var x) { return scale(x, -1.0); }

Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Graph& g = parts.front().graph();
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    for (const Var& p : parts) {
        if (p.cols() != cols) shape_fail("concat", parts.front().value(), p.value());
        rows += p.rows();
    }
    Tensor v(rows, cols);
    Eigen::Index offset = 0;
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (const Var& p : parts) {
        v.middleRows(offset, p.rows()) = p.value();
        offset += p.rows();
        ids.push_back(p.id());
    }
    // requires_grad is derived from in[], so route up to three inputs there and
    // recompute for longer lists below.
    Var out = g.push(Op::Concat, std::move(v), {ids[0], ids.size() > 1 ? ids[1] : -1, ids.size() > 2 ? ids[2] : -1},
                     "concat");
    Graph::Node& n = g.node(out.id());
    for (int id : ids) n.requires_grad = n.requires_grad || g.requires_grad(id);
    n.index = std::move(ids);
    return out;
}

Var concat(Var a, Var b) {
    const std::array<Var, 2> parts{a, b};
    return concat(parts);
}

Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
    const Tensor& v = x.value();
    if (start < 0 || count < 0 || start + count > v.rows())
        shape_fail("slice", v, "row range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                                   ") out of bounds");
    Var out = x.graph().push(Op::Slice, v.middleRows(start, count), {x.id(), -1, -1}, "slice");
    x.graph().node(out.id()).start = start;
    return out;
}

Var sigmoid(Var x) {
    return x.graph().push(Op::Sigmoid, x.value().unaryExpr(&sigmoid_scalar), {x.id(), -1, -1}, "sigmoid");
}

Var tanh(Var x) {
    return x.graph().push(Op::Tanh, x.value().array().tanh().matrix(), {x.id(), -1, -1}, "tanh");
}

Var exp(Var x) { return x.graph().push(Op::Exp, x.value().array().exp().matrix(), {x.id(), -1, -1}, "exp"); }

Var log(Var x) {
    Tensor v = x.value().array().max(kLogFloor).log().matrix();
    return x.graph().push(Op::Log, std::move(v), {x.id(), -1, -1}, "log");
}

Var log_sigmoid(Var x) {
    Tensor v = x.value().unaryExpr([](double t) { return -softplus_scalar(-t); });
    return x.graph().push(Op::LogSigmoid, std::move(v), {x.id(), -1, -1}, "log_sigmoid");
}

Var softmax(Var x) {
    const Tensor& v = x.value();
    require_vector("softmax", v);
    require_finite("softmax", v);
    Tensor e = (v.array() - v.maxCoeff()).exp().matrix();
    e /= e.sum();
    return x.graph().push(Op::Softmax, std::move(e), {x.id(), -1, -1}, "softmax");
}

Var softmax_plus_one(Var x) {
    const Tensor& v = x.value();
    require_vector("softmax_plus_one", v);
    require_finite("softmax_plus_one", v);
    // The implicit extra logit is 0, so shift by max(0, max x).
    const double m = std::max(0.0, v.maxCoeff());
    Tensor e = (v.array() - m).exp().matrix();
    const double denom = std::exp(-m) + e.sum();
    e /= denom;
    return x.graph().push(Op::SoftmaxPlusOne, std::move(e), {x.id(), -1, -1}, "softmax_plus_one");
}

Var log_softmax(Var x) {
    const Tensor& v = x.value();
    require_vector("log_softmax", v);
    require_finite("log_softmax", v);
    const double m = v.maxCoeff();
    Tensor shifted = (v.array() - m).matrix();
    const double lse = std::log(shifted.array().exp().sum());
    Tensor out = (shifted.array() - lse).matrix();
    Tensor p = out.array().exp().matrix();
    Var r = x.graph().push(Op::LogSoftmax, std::move(out), {x.id(), -1, -1}, "log_softmax");
    x.graph().node(r.id()).aux = std::move(p);
    return r;
}

Var euclidean_norm(Var x) {
    return x.graph().push(Op::Norm, Tensor::Constant(1, 1, x.value().norm()), {x.id(), -1, -1}, "euclidean_norm");
}

Var embedding_gather(Var table, Eigen::Index row) {
    const Tensor& t = table.value();
    if (row < 0 || row >= t.rows())
        shape_fail("embedding_gather", t, "row " + std::to_string(row) + " out of range");
    Var out = table.graph().push(Op::GatherRow, t.row(row).transpose(), {table.id(), -1, -1}, "embedding_gather");
    table.graph().node(out.id()).start = row;
    return out;
}

Var blend(Var a, Var b, Var w) {
    const Tensor& va = a.value();
    const Tensor& vb = b.value();
    if (va.rows() != vb.rows() || va.cols() != vb.cols()) shape_fail("blend", va, vb);
    if (!is_scalar(w.value())) shape_fail("blend", w.value(), "weight must be [1x1]");
    const double wv = w.scalar();
    return a.graph().push(Op::Blend, (1.0 - wv) * va + wv * vb, {a.id(), b.id(), w.id()}, "blend");
}

Var sum(Var x) { return x.graph().push(Op::Sum, Tensor::Constant(1, 1, x.value().sum()), {x.id(), -1, -1}, "sum"); }

Var dot(Var a, Var b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("dot", a.value(), b.value());
    return sum(a * b);
}

Var pick(Var x, Eigen::Index i) {
    const Tensor& v = x.value();
    require_vector("pick", v);
    if (i < 0 || i >= v.rows()) shape_fail("pick", v, "index " + std::to_string(i) + " out of range");
    Var out = x.graph().push(Op::Pick, Tensor::Constant(1, 1, v(i, 0)), {x.id(), -1, -1}, "pick");
    x.graph().node(out.id()).start = i;
    return out;
}

Var scatter_add(Var src, std::span<const int> index, Eigen::Index size) {
    const Tensor& v = src.value();
    require_vector("scatter_add", v);
    if (static_cast<std::size_t>(v.rows()) != index.size())
        shape_fail("scatter_add", v, "index length " + std::to_string(index.size()) + " differs");
    Tensor out = Tensor::Zero(size, 1);
    for (std::size_t s = 0; s < index.size(); ++s) {
        if (index[s] < 0 || index[s] >= size)
            shape_fail("scatter_add", out, "target " + std::to_string(index[s]) + " out of range");
        out(index[s], 0) += v(static_cast<Eigen::Index>(s), 0);
    }
    Var r = src.graph().push(Op::ScatterAdd, std::move(out), {src.id(), -1, -1}, "scatter_add");
    src.graph().node(r.id()).index.assign(index.begin(), index.end());
    return r;
}

Var apply_mask(Var x, Tensor mask) {
    if (mask.rows() != x.rows() || mask.cols() != x.cols()) shape_fail("mask", x.value(), mask);
    Var r = x.graph().push(Op::Mask, x.value().cwiseProduct(mask), {x.id(), -1, -1}, "mask");
    x.graph().node(r.id()).aux = std::move(mask);
    return r;
}

Var clamp_min(Var x, double floor) {
    Var out = x.graph().push(Op::ClampMin, x.value().cwiseMax(floor), {x.id(), -1, -1}, "clamp_min");
    x.graph().node(out.id()).scale = floor;
    return out;
}

Var transpose(Var x) {
    return x.graph().push(Op::Transpose, x.value().transpose(), {x.id(), -1, -1}, "transpose");
}

Var stack_columns(std::span<const Var> columns) {
    if (columns.empty()) throw ShapeError("stack_columns: no inputs");
    Graph& g = columns.front().graph();
    const Eigen::Index d = columns.front().rows();
    Tensor v(d, static_cast<Eigen::Index>(columns.size()));
    std::vector<int> ids;
    ids.reserve(columns.size());
    for (std::size_t k = 0; k < columns.size(); ++k) {
        const Tensor& c = columns[k].value();
        if (c.cols() != 1 || c.rows() != d) shape_fail("stack_columns", columns.front().value(), c);
        v.col(static_cast<Eigen::Index>(k)) = c;
        ids.push_back(columns[k].id());
    }
    Var out = g.push(Op::StackColumns, std::move(v), {-1, -1, -1}, "stack_columns");
    Graph::Node& n = g.node(out.id());
    for (int id : ids) n.requires_grad = n.requires_grad || g.requires_grad(id);
    n.index = std::move(ids);
    return out;
}

// ---- gradient checking ----------------------------------------------------

GradCheckResult grad_check(const GraphFunction& f, std::span<Tensor* const> params, double h,
                           GradCheckOptions options) {
    std::vector<Tensor> frozen;
    std::vector<Tensor> analytic;
    {
        Graph g;
        if (options.freeze_stop_gradients) g.record_stop_gradients(&frozen);
        std::vector<Var> leaves;
        leaves.reserve(params.size());
        for (Tensor* p : params) leaves.push_back(g.leaf(*p));
        Var loss = f(g, leaves);
        g.backward(loss);
        for (const Var& l : leaves) analytic.push_back(g.grad(l));
    }

    auto evaluate = [&]() {
        Graph g;
        if (options.freeze_stop_gradients) g.replay_stop_gradients(&frozen);
        std::vector<Var> leaves;
        leaves.reserve(params.size());
        for (Tensor* p : params) leaves.push_back(g.leaf(*p));
        return f(g, leaves).scalar();
    };

    GradCheckResult result;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const double saved = p(i);
            p(i) = saved + h;
            const double up = evaluate();
            p(i) = saved - h;
            const double down = evaluate();
            p(i) = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double auto_g = analytic[k](i);
            if (std::abs(numeric) <= options.zero_tolerance && std::abs(auto_g) <= options.zero_tolerance) continue;
            const double rel = std::abs(auto_g - numeric) / (std::abs(numeric) + 1e-8);
            ++result.checked;
            if (rel >= result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_param = k;
                result.worst_index = i;
                result.worst_analytic = auto_g;
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

}  // namespace confdec
