#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tetra/common.hpp"

namespace tetra {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until a backward pass touches it
};

/// Dense row-major f64 tensor. A Tensor is a handle to shared storage; all
/// operators allocate fresh outputs and never mutate inputs. mutable_data()
/// exists for parameter initialization and optimizer updates between steps.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
    std::int64_t dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(impl_->shape.size()); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }
    double item() const;  // scalar tensors only

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }

    /// Accumulated gradient; empty span if no backward pass has reached this
    /// tensor yet.
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad();
    void accumulate_grad(std::span<const double> g);

    TensorImpl* impl() const { return impl_.get(); }

  private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

/// Transient per-backward adjoint buffers, keyed by tensor identity. Leaf
/// gradients are folded into Tensor::grad only at the end of the pass, which
/// makes a second backward call add the same contribution again (the
/// documented accumulation contract).
class Adjoints {
  public:
    std::vector<double>& of(const Tensor& t);
    const std::vector<double>* find(const TensorImpl* impl) const;
    const std::unordered_map<const TensorImpl*, std::vector<double>>& all() const { return bufs_; }

  private:
    std::unordered_map<const TensorImpl*, std::vector<double>> bufs_;
};

using BackwardFn = std::function<void(std::span<const double> out_grad, Adjoints& adj)>;

struct TapeNode {
    const char* op;
    Tensor output;
    BackwardFn pull;
};

/// Append-only record of one forward pass. Recording order is topological by
/// construction (an op's inputs always exist before its output), so backward
/// is a reverse sweep. Create one per training step and discard it after
/// backward.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(const char* op, Tensor output, BackwardFn pull);
    bool tracks(const TensorImpl* impl) const { return tracked_.count(impl) > 0; }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<TapeNode>& nodes() const { return nodes_; }

    /// Reverse sweep from a scalar root. Populates grad on every
    /// requires_grad ancestor; calling twice without zero_grad doubles them.
    void backward(const Tensor& root);

    static Tape* active();

  private:
    friend struct TapeScope;
    std::vector<TapeNode> nodes_;
    std::unordered_set<const TensorImpl*> tracked_;
};

/// Activates a tape on this thread for the enclosing scope.
struct TapeScope {
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape* prev_;
};

/// backward() on whatever tape is active; UsageError if none or root is not
/// scalar.
void backward(const Tensor& root);

// True when an op involving t must be recorded.
bool grad_tracked(const Tensor& t);

// ---- elementwise and reduction ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& inputs, int axis = 1);

// ---- spatial ops; tensors are [N, C, D, H, W] ----

/// Direct 3D convolution with zero padding. weight is [Cout, Cin, kd, kh, kw].
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding);
/// Per-axis padding overload (used for separable window sums).
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              std::array<int, 3> padding);

/// Transposed convolution, the adjoint of conv3d for matching configurations.
/// weight is [Cin, Cout, kd, kh, kw]; output extent is (in-1)*stride + k.
Tensor conv_transpose3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride);

/// Max pooling; backward routes to the first argmax in row-major scan order.
Tensor maxpool3d(const Tensor& input, int window = 2, int stride = 2);

}  // namespace tetra
