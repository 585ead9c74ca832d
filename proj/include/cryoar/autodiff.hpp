#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cryoar::ad {

using Eigen::Index;
using Shape = std::vector<Index>;
using Array = Eigen::ArrayXd;

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Graph node: row-major values, lazily allocated gradient, backward record.
struct Node {
    Shape shape;
    Array value;
    Array grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<NodePtr> parents;
    std::function<void(const Node&)> backward;
};

Index shape_size(const Shape& s);
std::string shape_string(const Shape& s);

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor constant(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from(const Shape& shape, Array values, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    /// Size of dimension i; negative i counts from the back.
    Index dim(int i) const;
    Index size() const { return node_->value.size(); }

    const Array& values() const { return node_->value; }
    Array& mutable_values() { return node_->value; }
    const Array& grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    void zero_grad() { node_->grad = Array(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }
    double item() const;

    /// Reverse-mode sweep from a scalar; gradients accumulate into every reachable node.
    void backward() const;

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

// Forward op counter (multiply-adds count as 2 flops for matmul; 1 per element otherwise).
std::uint64_t flop_count();
void reset_flop_count();

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
/// a[..., C] + v[C]
Tensor add_rowvec(const Tensor& a, const Tensor& v);
/// a * c, where c is a constant covering the trailing dims of a and repeats over the leading ones.
Tensor mul_const(const Tensor& a, const Array& c);
/// (x0, x1, x2, x3, ...) -> (-x1, x0, -x3, x2, ...) along the last dim.
Tensor pair_swap(const Tensor& a);

/// a[..., m, k] x b[k, n] -> [..., m, n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// a[B, m, k] x b[B, k, n] (or b[B, n, k] with transpose_b) -> [B, m, n]
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor transpose(const Tensor& a);  // swap the last two dims
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, Index begin, Index end);
std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<Index>& sizes);
/// Rows of a along axis 0: out[i] = a[index[i]].
Tensor gather(const Tensor& a, const std::vector<Index>& index);

Tensor softmax(const Tensor& a);  // over the last dim
Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-6);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp_max(const Tensor& a, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Reduces the last dim.
Tensor sum_last(const Tensor& a);

/// Central-difference check of backward() for a scalar function of `inputs`.
/// Checks at most `max_coords` coordinates (all if fewer), sampled with `seed`.
/// Returns max |a - n| / max(|a|, |n|, 1e-8).
double gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double eps = 1e-5,
                      std::size_t max_coords = 0, std::uint64_t seed = 0);
double gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5,
                      std::size_t max_coords = 0, std::uint64_t seed = 0);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Checkpoint: u32 n_tensors, then per tensor u32 name length, name, u32 rank, u32 dims, f64 values.
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
/// Loads into `tensors`, requiring identical names, order and shapes.
void load_checkpoint(const std::filesystem::path& path, NamedTensors& tensors);

}  // namespace cryoar::ad
