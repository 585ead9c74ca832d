#include "cryoar/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>
#include <unordered_set>

#include "cryoar/error.hpp"

namespace cryoar::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local std::uint64_t g_flops = 0;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                                shape_string(b));
}

Array& grad_of(Node& n) {
    if (n.grad.size() != n.value.size()) n.grad = Array::Zero(n.value.size());
    return n.grad;
}

// Builds a result node; the backward record is kept only when some parent needs gradients.
Tensor make(const char* op, Shape shape, Array value, std::vector<NodePtr> parents,
            std::function<void(const Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    const bool track = std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (track) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

Index trailing(const Shape& s) { return s.empty() ? 1 : s.back(); }

int norm_axis(int axis, int rank) {
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) throw std::invalid_argument("axis " + std::to_string(axis) + " out of range");
    return a;
}

}  // namespace

Index shape_size(const Shape& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
}

std::string shape_string(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) { return constant(shape, 0.0, requires_grad); }

Tensor Tensor::constant(const Shape& shape, double value, bool requires_grad) {
    return from(shape, Array::Constant(shape_size(shape), value), requires_grad);
}

Tensor Tensor::from(const Shape& shape, Array values, bool requires_grad) {
    if (values.size() != shape_size(shape))
        throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                                    shape_string(shape));
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Index Tensor::dim(int i) const { return node_->shape[static_cast<std::size_t>(norm_axis(i, rank()))]; }

double Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("item: tensor has shape " + shape_string(shape()));
    return node_->value[0];
}

void Tensor::backward() const {
    if (size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_string(shape()));
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    grad_of(*node_) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
    }
}

std::uint64_t flop_count() { return g_flops; }
void reset_flop_count() { g_flops = 0; }

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
    g_flops += static_cast<std::uint64_t>(a.size());
    NodePtr pa = a.node(), pb = b.node();
    return make("add", a.shape(), a.values() + b.values(), {pa, pb}, [pa, pb](const Node& self) {
        if (pa->requires_grad) grad_of(*pa) += self.grad;
        if (pb->requires_grad) grad_of(*pb) += self.grad;
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
    g_flops += static_cast<std::uint64_t>(a.size());
    NodePtr pa = a.node(), pb = b.node();
    return make("sub", a.shape(), a.values() - b.values(), {pa, pb}, [pa, pb](const Node& self) {
        if (pa->requires_grad) grad_of(*pa) += self.grad;
        if (pb->requires_grad) grad_of(*pb) -= self.grad;
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
    g_flops += static_cast<std::uint64_t>(a.size());
    NodePtr pa = a.node(), pb = b.node();
    return make("mul", a.shape(), a.values() * b.values(), {pa, pb}, [pa, pb](const Node& self) {
        if (pa->requires_grad) grad_of(*pa) += self.grad * pb->value;
        if (pb->requires_grad) grad_of(*pb) += self.grad * pa->value;
    });
}

Tensor scale(const Tensor& a, double s) {
    g_flops += static_cast<std::uint64_t>(a.size());
    NodePtr pa = a.node();
    return make("scale", a.shape(), a.values() * s, {pa}, [pa, s](const Node& self) { grad_of(*pa) += self.grad * s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    g_flops += static_cast<std::uint64_t>(a.size());
    NodePtr pa = a.node();
    return make("add_scalar", a.shape(), a.values() + s, {pa}, [pa](const Node& self) { grad_of(*pa) += self.grad; });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    if (a.rank() < 1 || v.rank() != 1 || trailing(a.shape()) != v.size()) shape_error("add_rowvec", a.shape(), v.shape());
    g_flops += static_cast<std::uint64_t>(a.size());
    const Index c = v.size(), r = a.size() / c;
    Array out = a.values();
    MatMap(out.data(), r, c).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(v.values().data(), c);
    NodePtr pa = a.node(), pv = v.node();
    return make("add_rowvec", a.shape(), std::move(out), {pa, pv}, [pa, pv, r, c](const Node& self) {
        if (pa->requires_grad) grad_of(*pa) += self.grad;
        if (pv->requires_grad)
            MatMap(grad_of(*pv).data(), 1, c) += ConstMatMap(self.grad.data(), r, c).colwise().sum();
    });
}

Tensor mul_const(const Tensor& a, const Array& c) {
    const Index k = c.size();
    if (k == 0 || a.size() % k != 0)
        throw std::invalid_argument("mul_const: constant of " + std::to_string(k) + " values does not tile " +
                                    shape_string(a.shape()));
    g_flops += static_cast<std::uint64_t>(a.size());
    const Index r = a.size() / k;
    Array out(a.size());
    MatMap(out.data(), r, k) = ConstMatMap(a.values().data(), r, k).array().rowwise() * c.transpose();
    NodePtr pa = a.node();
    return make("mul_const", a.shape(), std::move(out), {pa}, [pa, c, r, k](const Node& self) {
        MatMap(grad_of(*pa).data(), r, k).array() += ConstMatMap(self.grad.data(), r, k).array().rowwise() * c.transpose();
    });
}

Tensor pair_swap(const Tensor& a) {
    if (a.rank() < 1 || trailing(a.shape()) % 2 != 0)
        throw std::invalid_argument("pair_swap: last dim must be even, got " + shape_string(a.shape()));
    const Index n = a.size() / 2;
    const Array& x = a.values();
    Array out(a.size());
    for (Index i = 0; i < n; ++i) {
        out[2 * i] = -x[2 * i + 1];
        out[2 * i + 1] = x[2 * i];
    }
    NodePtr pa = a.node();
    return make("pair_swap", a.shape(), std::move(out), {pa}, [pa, n](const Node& self) {
        Array& g = grad_of(*pa);
        for (Index i = 0; i < n; ++i) {
            g[2 * i] += self.grad[2 * i + 1];
            g[2 * i + 1] -= self.grad[2 * i];
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() != 2 || a.dim(-1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
    const Index k = b.dim(0), n = b.dim(1), m = a.size() / k;
    Shape shape = a.shape();
    shape.back() = n;
    Array out(m * n);
    MatMap(out.data(), m, n).noalias() = ConstMatMap(a.values().data(), m, k) * ConstMatMap(b.values().data(), k, n);
    g_flops += static_cast<std::uint64_t>(2 * m * k * n);
    NodePtr pa = a.node(), pb = b.node();
    return make("matmul", std::move(shape), std::move(out), {pa, pb}, [pa, pb, m, k, n](const Node& self) {
        const ConstMatMap g(self.grad.data(), m, n);
        if (pa->requires_grad)
            MatMap(grad_of(*pa).data(), m, k).noalias() += g * ConstMatMap(pb->value.data(), k, n).transpose();
        if (pb->requires_grad)
            MatMap(grad_of(*pb).data(), k, n).noalias() += ConstMatMap(pa->value.data(), m, k).transpose() * g;
    });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) shape_error("bmm", a.shape(), b.shape());
    const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2);
    const Index n = transpose_b ? b.dim(1) : b.dim(2);
    if ((transpose_b ? b.dim(2) : b.dim(1)) != k) shape_error("bmm", a.shape(), b.shape());
    Array out(batch * m * n);
    for (Index i = 0; i < batch; ++i) {
        const ConstMatMap am(a.values().data() + i * m * k, m, k);
        MatMap om(out.data() + i * m * n, m, n);
        if (transpose_b)
            om.noalias() = am * ConstMatMap(b.values().data() + i * n * k, n, k).transpose();
        else
            om.noalias() = am * ConstMatMap(b.values().data() + i * k * n, k, n);
    }
    g_flops += static_cast<std::uint64_t>(2 * batch * m * k * n);
    NodePtr pa = a.node(), pb = b.node();
    return make("bmm", {batch, m, n}, std::move(out), {pa, pb}, [pa, pb, batch, m, k, n, transpose_b](const Node& self) {
        for (Index i = 0; i < batch; ++i) {
            const ConstMatMap g(self.grad.data() + i * m * n, m, n);
            const ConstMatMap am(pa->value.data() + i * m * k, m, k);
            if (transpose_b) {
                const ConstMatMap bm(pb->value.data() + i * n * k, n, k);
                if (pa->requires_grad) MatMap(grad_of(*pa).data() + i * m * k, m, k).noalias() += g * bm;
                if (pb->requires_grad) MatMap(grad_of(*pb).data() + i * n * k, n, k).noalias() += g.transpose() * am;
            } else {
                const ConstMatMap bm(pb->value.data() + i * k * n, k, n);
                if (pa->requires_grad) MatMap(grad_of(*pa).data() + i * m * k, m, k).noalias() += g * bm.transpose();
                if (pb->requires_grad) MatMap(grad_of(*pb).data() + i * k * n, k, n).noalias() += am.transpose() * g;
            }
        }
    });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_size(shape) != a.size()) shape_error("reshape", a.shape(), shape);
    NodePtr pa = a.node();
    return make("reshape", shape, a.values(), {pa}, [pa](const Node& self) { grad_of(*pa) += self.grad; });
}

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    const int r = a.rank();
    if (static_cast<int>(axes.size()) != r) throw std::invalid_argument("permute: axes do not match rank of " + shape_string(a.shape()));
    std::vector<bool> used(static_cast<std::size_t>(r), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= r || used[static_cast<std::size_t>(ax)]) throw std::invalid_argument("permute: invalid axes");
        used[static_cast<std::size_t>(ax)] = true;
    }
    const Shape& in = a.shape();
    Shape out_shape(static_cast<std::size_t>(r));
    std::vector<Index> in_stride(static_cast<std::size_t>(r), 1);
    for (int d = r - 2; d >= 0; --d)
        in_stride[static_cast<std::size_t>(d)] = in_stride[static_cast<std::size_t>(d + 1)] * in[static_cast<std::size_t>(d + 1)];
    for (int d = 0; d < r; ++d) out_shape[static_cast<std::size_t>(d)] = in[static_cast<std::size_t>(axes[static_cast<std::size_t>(d)])];

    const Index total = a.size();
    auto map = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(total));
    std::vector<Index> idx(static_cast<std::size_t>(r), 0);
    for (Index o = 0; o < total; ++o) {
        Index src = 0;
        for (int d = 0; d < r; ++d) src += idx[static_cast<std::size_t>(d)] * in_stride[static_cast<std::size_t>(axes[static_cast<std::size_t>(d)])];
        (*map)[static_cast<std::size_t>(o)] = src;
        for (int d = r - 1; d >= 0; --d) {
            if (++idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
            idx[static_cast<std::size_t>(d)] = 0;
        }
    }
    Array out(total);
    const Array& x = a.values();
    for (Index o = 0; o < total; ++o) out[o] = x[(*map)[static_cast<std::size_t>(o)]];
    NodePtr pa = a.node();
    return make("permute", std::move(out_shape), std::move(out), {pa}, [pa, map](const Node& self) {
        Array& g = grad_of(*pa);
        for (std::size_t o = 0; o < map->size(); ++o) g[(*map)[o]] += self.grad[static_cast<Index>(o)];
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() < 2) throw std::invalid_argument("transpose: need rank >= 2, got " + shape_string(a.shape()));
    std::vector<int> axes(static_cast<std::size_t>(a.rank()));
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(a, axes);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const int r = parts[0].rank();
    const int ax = norm_axis(axis, r);
    Shape shape = parts[0].shape();
    Index along = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (p.rank() != r) shape_error("concat", parts[0].shape(), s);
        s[static_cast<std::size_t>(ax)] = shape[static_cast<std::size_t>(ax)];
        if (s != shape) shape_error("concat", parts[0].shape(), p.shape());
        along += p.dim(ax);
    }
    shape[static_cast<std::size_t>(ax)] = along;
    Index outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= shape[static_cast<std::size_t>(d)];
    for (int d = ax + 1; d < r; ++d) inner *= shape[static_cast<std::size_t>(d)];

    Array out(shape_size(shape));
    std::vector<NodePtr> nodes;
    std::vector<Index> widths;
    Index offset = 0;
    for (const auto& p : parts) {
        const Index w = p.dim(ax) * inner;
        for (Index o = 0; o < outer; ++o)
            out.segment(o * along * inner + offset, w) = p.values().segment(o * w, w);
        offset += w;
        nodes.push_back(p.node());
        widths.push_back(w);
    }
    const Index row = along * inner;
    return make("concat", std::move(shape), std::move(out), nodes, [nodes, widths, outer, row](const Node& self) {
        Index off = 0;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const Index w = widths[i];
            if (nodes[i]->requires_grad) {
                Array& g = grad_of(*nodes[i]);
                for (Index o = 0; o < outer; ++o) g.segment(o * w, w) += self.grad.segment(o * row + off, w);
            }
            off += w;
        }
    });
}

Tensor slice(const Tensor& a, int axis, Index begin, Index end) {
    const int r = a.rank();
    const int ax = norm_axis(axis, r);
    const Index len = a.dim(ax);
    if (begin < 0 || end > len || begin > end)
        throw std::invalid_argument("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                    ") outside " + shape_string(a.shape()));
    Index outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= a.shape()[static_cast<std::size_t>(d)];
    for (int d = ax + 1; d < r; ++d) inner *= a.shape()[static_cast<std::size_t>(d)];
    Shape shape = a.shape();
    shape[static_cast<std::size_t>(ax)] = end - begin;
    const Index w = (end - begin) * inner, row = len * inner, off = begin * inner;
    Array out(outer * w);
    for (Index o = 0; o < outer; ++o) out.segment(o * w, w) = a.values().segment(o * row + off, w);
    NodePtr pa = a.node();
    return make("slice", std::move(shape), std::move(out), {pa}, [pa, outer, w, row, off](const Node& self) {
        Array& g = grad_of(*pa);
        for (Index o = 0; o < outer; ++o) g.segment(o * row + off, w) += self.grad.segment(o * w, w);
    });
}

std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<Index>& sizes) {
    const int ax = norm_axis(axis, a.rank());
    if (std::accumulate(sizes.begin(), sizes.end(), Index{0}) != a.dim(ax))
        throw std::invalid_argument("split: sizes do not add up to dim " + std::to_string(a.dim(ax)));
    std::vector<Tensor> out;
    Index begin = 0;
    for (Index s : sizes) {
        out.push_back(slice(a, ax, begin, begin + s));
        begin += s;
    }
    return out;
}

Tensor gather(const Tensor& a, const std::vector<Index>& index) {
    if (a.rank() < 1) throw std::invalid_argument("gather: scalar input");
    const Index rows = a.dim(0), w = a.size() / std::max<Index>(rows, 1);
    for (Index i : index)
        if (i < 0 || i >= rows) throw std::invalid_argument("gather: index " + std::to_string(i) + " out of range");
    Shape shape = a.shape();
    shape[0] = static_cast<Index>(index.size());
    Array out(shape_size(shape));
    for (std::size_t i = 0; i < index.size(); ++i)
        out.segment(static_cast<Index>(i) * w, w) = a.values().segment(index[i] * w, w);
    NodePtr pa = a.node();
    return make("gather", std::move(shape), std::move(out), {pa}, [pa, index, w](const Node& self) {
        Array& g = grad_of(*pa);
        for (std::size_t i = 0; i < index.size(); ++i) g.segment(index[i] * w, w) += self.grad.segment(static_cast<Index>(i) * w, w);
    });
}

Tensor softmax(const Tensor& a) {
    if (a.rank() < 1) throw std::invalid_argument("softmax: scalar input");
    const Index c = a.dim(-1), r = a.size() / c;
    Array out(a.size());
    MatMap y(out.data(), r, c);
    const ConstMatMap x(a.values().data(), r, c);
    y = (x.colwise() - x.rowwise().maxCoeff()).array().exp().matrix();
    y.array().colwise() /= y.rowwise().sum().array();
    g_flops += static_cast<std::uint64_t>(3 * a.size());
    NodePtr pa = a.node();
    return make("softmax", a.shape(), std::move(out), {pa}, [pa, r, c](const Node& self) {
        const ConstMatMap yv(self.value.data(), r, c), g(self.grad.data(), r, c);
        const Eigen::VectorXd dot = (g.array() * yv.array()).rowwise().sum();
        MatMap(grad_of(*pa).data(), r, c).array() += yv.array() * (g.colwise() - dot).array();
    });
}

Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    const Index c = a.rank() >= 1 ? a.dim(-1) : 0;
    if (c == 0 || gain.shape() != Shape{c} || bias.shape() != Shape{c}) shape_error("layernorm", a.shape(), gain.shape());
    if (!(eps >= 0.0)) throw std::invalid_argument("layernorm: eps must be >= 0");
    const Index r = a.size() / c;
    const ConstMatMap x(a.values().data(), r, c);
    const Eigen::VectorXd mu = x.rowwise().mean();
    RowMat xc = x.colwise() - mu;
    const Eigen::VectorXd inv = ((xc.array().square().rowwise().sum() / static_cast<double>(c)) + eps).rsqrt();
    auto xhat = std::make_shared<RowMat>(xc.array().colwise() * inv.array());
    Array out(a.size());
    MatMap(out.data(), r, c) =
        (xhat->array().rowwise() * gain.values().transpose()).rowwise() + bias.values().transpose();
    g_flops += static_cast<std::uint64_t>(6 * a.size());
    NodePtr pa = a.node(), pg = gain.node(), pb = bias.node();
    return make("layernorm", a.shape(), std::move(out), {pa, pg, pb},
                [pa, pg, pb, xhat, inv, r, c](const Node& self) {
                    const ConstMatMap g(self.grad.data(), r, c);
                    if (pg->requires_grad)
                        MatMap(grad_of(*pg).data(), 1, c) += (g.array() * xhat->array()).colwise().sum().matrix();
                    if (pb->requires_grad) MatMap(grad_of(*pb).data(), 1, c) += g.colwise().sum();
                    if (pa->requires_grad) {
                        const RowMat gx = g.array().rowwise() * pg->value.transpose();
                        const Eigen::VectorXd m1 = gx.rowwise().mean();
                        const Eigen::VectorXd m2 = (gx.array() * xhat->array()).rowwise().mean();
                        RowMat d = gx.colwise() - m1;
                        d -= (xhat->array().colwise() * m2.array()).matrix();
                        MatMap(grad_of(*pa).data(), r, c) += (d.array().colwise() * inv.array()).matrix();
                    }
                });
}

Tensor gelu(const Tensor& a) {
    const Array& x = a.values();
    const Array cdf = 0.5 * (1.0 + (x * (0.5 * std::numbers::sqrt2)).unaryExpr([](double v) { return std::erf(v); }));
    g_flops += static_cast<std::uint64_t>(4 * a.size());
    NodePtr pa = a.node();
    return make("gelu", a.shape(), x * cdf, {pa}, [pa, cdf](const Node& self) {
        const Array& xv = pa->value;
        const Array pdf = (-0.5 * xv.square()).exp() * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
        grad_of(*pa) += self.grad * (cdf + xv * pdf);
    });
}

Tensor exp(const Tensor& a) {
    g_flops += static_cast<std::uint64_t>(a.size());
    NodePtr pa = a.node();
    return make("exp", a.shape(), a.values().exp(), {pa}, [pa](const Node& self) { grad_of(*pa) += self.grad * self.value; });
}

Tensor log(const Tensor& a) {
    g_flops += static_cast<std::uint64_t>(a.size());
    NodePtr pa = a.node();
    return make("log", a.shape(), a.values().log(), {pa}, [pa](const Node& self) { grad_of(*pa) += self.grad / pa->value; });
}

Tensor clamp_max(const Tensor& a, double hi) {
    g_flops += static_cast<std::uint64_t>(a.size());
    NodePtr pa = a.node();
    return make("clamp_max", a.shape(), a.values().min(hi), {pa}, [pa, hi](const Node& self) {
        grad_of(*pa) += (pa->value < hi).select(self.grad, 0.0);
    });
}

Tensor sum(const Tensor& a) {
    g_flops += static_cast<std::uint64_t>(a.size());
    NodePtr pa = a.node();
    return make("sum", {}, Array::Constant(1, a.values().sum()), {pa}, [pa](const Node& self) { grad_of(*pa) += self.grad[0]; });
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_last(const Tensor& a) {
    if (a.rank() < 1) throw std::invalid_argument("sum_last: scalar input");
    const Index c = a.dim(-1), r = a.size() / c;
    Shape shape(a.shape().begin(), a.shape().end() - 1);
    Array out = ConstMatMap(a.values().data(), r, c).rowwise().sum().array();
    g_flops += static_cast<std::uint64_t>(a.size());
    NodePtr pa = a.node();
    return make("sum_last", std::move(shape), std::move(out), {pa}, [pa, r, c](const Node& self) {
        MatMap(grad_of(*pa).data(), r, c).colwise() += ConstMatMap(self.grad.data(), r, 1).col(0);
    });
}

double gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double eps,
                      std::size_t max_coords, std::uint64_t seed) {
    for (auto& x : inputs) {
        x.node()->requires_grad = true;
        x.zero_grad();
    }
    const Tensor loss = f();
    if (!std::isfinite(loss.item())) throw NumericalError("gradient_check: non-finite loss");
    loss.backward();

    std::vector<std::pair<std::size_t, Index>> coords;
    for (std::size_t t = 0; t < inputs.size(); ++t)
        for (Index i = 0; i < inputs[t].size(); ++i) coords.emplace_back(t, i);
    if (max_coords > 0 && coords.size() > max_coords) {
        std::mt19937_64 rng(seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(max_coords);
    }

    double worst = 0.0;
    for (const auto& [t, i] : coords) {
        Tensor& x = inputs[t];
        const double analytic = x.has_grad() ? x.grad()[i] : 0.0;
        const double orig = x.values()[i];
        x.mutable_values()[i] = orig + eps;
        const double fp = f().item();
        x.mutable_values()[i] = orig - eps;
        const double fm = f().item();
        x.mutable_values()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic))
            throw NumericalError("gradient_check: non-finite value");
        const double numeric = (fp - fm) / (2.0 * eps);
        const double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        worst = std::max(worst, err);
    }
    return worst;
}

double gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps,
                      std::size_t max_coords, std::uint64_t seed) {
    return gradient_check([&] { return f(x); }, {x}, eps, max_coords, seed);
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::ifstream& in, const std::filesystem::path& path) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw IoError(path.string() + ": truncated checkpoint");
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (Index d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
        out.write(reinterpret_cast<const char*>(t.values().data()), static_cast<std::streamsize>(t.size() * 8));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, NamedTensors& tensors) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const std::uint32_t n = get_u32(in, path);
    if (n != tensors.size())
        throw IoError(path.string() + ": checkpoint holds " + std::to_string(n) + " tensors, model expects " +
                      std::to_string(tensors.size()));
    for (auto& [name, t] : tensors) {
        const std::uint32_t len = get_u32(in, path);
        if (len > 4096) throw IoError(path.string() + ": implausible tensor name length");
        std::string got(len, '\0');
        if (!in.read(got.data(), len)) throw IoError(path.string() + ": truncated checkpoint");
        if (got != name) throw IoError(path.string() + ": expected tensor '" + name + "', found '" + got + "'");
        const std::uint32_t rank = get_u32(in, path);
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(get_u32(in, path));
        if (shape != t.shape())
            throw IoError(path.string() + ": tensor '" + name + "' has shape " + shape_string(shape) + ", model expects " +
                          shape_string(t.shape()));
        if (!in.read(reinterpret_cast<char*>(t.mutable_values().data()), static_cast<std::streamsize>(t.size() * 8)))
            throw IoError(path.string() + ": truncated checkpoint");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes in checkpoint");
}

}  // namespace cryoar::ad
