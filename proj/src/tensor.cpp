#include "tetra/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tetra {

// ---------------------------------------------------------------------------
// threading / deterministic reductions
// ---------------------------------------------------------------------------

namespace {

int g_thread_override = 0;
bool g_deterministic = true;

int env_threads() {
    if (const char* s = std::getenv("TETRA_THREADS")) {
        int n = std::atoi(s);
        if (n > 0) return n;
    }
    return 0;
}

constexpr std::int64_t kChunk = 4096;

}  // namespace

int max_threads() {
    if (g_thread_override > 0) return g_thread_override;
    if (int n = env_threads(); n > 0) return n;
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_max_threads(int n) { g_thread_override = n; }
void set_deterministic(bool on) { g_deterministic = on; }
bool deterministic() { return g_deterministic; }

double chunked_sum(const double* p, std::int64_t n) {
    const std::int64_t chunks = (n + kChunk - 1) / kChunk;
    std::vector<double> partial(static_cast<std::size_t>(chunks), 0.0);
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t c = 0; c < chunks; ++c) {
        const std::int64_t lo = c * kChunk;
        const std::int64_t hi = std::min(n, lo + kChunk);
        double acc = 0.0;
        for (std::int64_t i = lo; i < hi; ++i) acc += p[i];
        partial[static_cast<std::size_t>(c)] = acc;
    }
    double total = 0.0;
    for (double v : partial) total += v;
    return total;
}

double chunked_dot(const double* a, const double* b, std::int64_t n) {
    const std::int64_t chunks = (n + kChunk - 1) / kChunk;
    std::vector<double> partial(static_cast<std::size_t>(chunks), 0.0);
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t c = 0; c < chunks; ++c) {
        const std::int64_t lo = c * kChunk;
        const std::int64_t hi = std::min(n, lo + kChunk);
        double acc = 0.0;
        for (std::int64_t i = lo; i < hi; ++i) acc += a[i] * b[i];
        partial[static_cast<std::size_t>(c)] = acc;
    }
    double total = 0.0;
    for (double v : partial) total += v;
    return total;
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    for (auto d : shape)
        if (d <= 0) throw ConfigError("tensor dims must be positive, got " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw ConfigError("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

double Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.clear();
}

void Tensor::accumulate_grad(std::span<const double> g) {
    if (g.size() != impl_->data.size())
        throw UsageError("gradient size mismatch for tensor " + shape_str(shape()));
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) impl_->grad[i] += g[i];
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
thread_local Tape* t_active_tape = nullptr;
}

Tape* Tape::active() { return t_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = prev_; }

bool grad_tracked(const Tensor& t) {
    if (t.requires_grad()) return true;
    Tape* tape = Tape::active();
    return tape && tape->tracks(t.impl());
}

void Tape::record(const char* op, Tensor output, BackwardFn pull) {
    tracked_.insert(output.impl());
    nodes_.push_back(TapeNode{op, std::move(output), std::move(pull)});
}

std::vector<double>& Adjoints::of(const Tensor& t) {
    auto [it, inserted] = bufs_.try_emplace(t.impl());
    if (inserted) it->second.assign(t.impl()->data.size(), 0.0);
    return it->second;
}

const std::vector<double>* Adjoints::find(const TensorImpl* impl) const {
    auto it = bufs_.find(impl);
    return it == bufs_.end() ? nullptr : &it->second;
}

void Tape::backward(const Tensor& root) {
    if (!root.defined() || root.numel() != 1)
        throw UsageError("backward requires a scalar root");
    // Intermediate adjoints live only for this sweep; persistent grads on
    // requires_grad tensors are folded in at the end. Running the sweep again
    // therefore adds the same contribution again.
    Adjoints adj;
    adj.of(root)[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        const std::vector<double>* g = adj.find(it->output.impl());
        if (g == nullptr) continue;
        it->pull(std::span<const double>(*g), adj);
    }
    for (const auto& [impl, buf] : adj.all()) {
        if (!impl->requires_grad) continue;
        auto* m = const_cast<TensorImpl*>(impl);
        if (m->grad.empty()) m->grad.assign(m->data.size(), 0.0);
        for (std::size_t i = 0; i < buf.size(); ++i) m->grad[i] += buf[i];
    }
}

void backward(const Tensor& root) {
    Tape* tape = Tape::active();
    if (tape == nullptr) throw UsageError("backward called with no active tape");
    tape->backward(root);
}

// ---------------------------------------------------------------------------
// elementwise / reduction ops
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

// Tracking status of every tensor is fixed at creation, so capturing it at
// record time keeps backward correct even if the tape is no longer active.
void record_if(bool any_tracked, const char* op, const Tensor& out, BackwardFn pull) {
    Tape* tape = Tape::active();
    if (tape && any_tracked) tape->record(op, out, std::move(pull));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    const std::int64_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data().data();
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    const bool ta = grad_tracked(a), tb = grad_tracked(b);
    record_if(ta || tb, "add", out, [a, b, ta, tb](std::span<const double> g, Adjoints& adj) {
        if (ta) {
            auto& ga = adj.of(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tb) {
            auto& gb = adj.of(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    const std::int64_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data().data();
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    const bool ta = grad_tracked(a), tb = grad_tracked(b);
    record_if(ta || tb, "sub", out, [a, b, ta, tb](std::span<const double> g, Adjoints& adj) {
        if (ta) {
            auto& ga = adj.of(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tb) {
            auto& gb = adj.of(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    const std::int64_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data().data();
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    const bool ta = grad_tracked(a), tb = grad_tracked(b);
    record_if(ta || tb, "mul", out, [a, b, ta, tb](std::span<const double> g, Adjoints& adj) {
        if (ta) {
            const double* pb = b.data().data();
            auto& ga = adj.of(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb[i];
        }
        if (tb) {
            const double* pa = a.data().data();
            auto& gb = adj.of(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa[i];
        }
    });
    return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape("div", a, b);
    const std::int64_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data().data();
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
    const bool ta = grad_tracked(a), tb = grad_tracked(b);
    record_if(ta || tb, "div", out, [a, b, ta, tb](std::span<const double> g, Adjoints& adj) {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        if (ta) {
            auto& ga = adj.of(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / pb[i];
        }
        if (tb) {
            auto& gb = adj.of(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * pa[i] / (pb[i] * pb[i]);
        }
    });
    return out;
}

Tensor scale(const Tensor& a, double c) {
    const std::int64_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    record_if(grad_tracked(a), "scale", out, [a, c](std::span<const double> g, Adjoints& adj) {
        auto& ga = adj.of(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
    return out;
}

Tensor add_scalar(const Tensor& a, double c) {
    const std::int64_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + c;
    record_if(grad_tracked(a), "add_scalar", out, [a](std::span<const double> g, Adjoints& adj) {
        auto& ga = adj.of(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return out;
}

Tensor relu(const Tensor& a) {
    const std::int64_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;
    record_if(grad_tracked(a), "relu", out, [a](std::span<const double> g, Adjoints& adj) {
        const double* pa = a.data().data();
        auto& ga = adj.of(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (pa[i] > 0.0) ga[i] += g[i];
    });
    return out;
}

Tensor sum(const Tensor& a) {
    Tensor out = Tensor::from_data({1}, {chunked_sum(a.data().data(), a.numel())});
    record_if(grad_tracked(a), "sum", out, [a](std::span<const double> g, Adjoints& adj) {
        auto& ga = adj.of(a);
        for (auto& v : ga) v += g[0];
    });
    return out;
}

Tensor mean(const Tensor& a) {
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    Tensor out = Tensor::from_data({1}, {chunked_sum(a.data().data(), a.numel()) * inv_n});
    record_if(grad_tracked(a), "mean", out, [a, inv_n](std::span<const double> g, Adjoints& adj) {
        auto& ga = adj.of(a);
        const double gv = g[0] * inv_n;
        for (auto& v : ga) v += gv;
    });
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ConfigError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                          shape_str(shape));
    Tensor out = Tensor::from_data(std::move(shape),
                                   std::vector<double>(a.data().begin(), a.data().end()));
    record_if(grad_tracked(a), "reshape", out, [a](std::span<const double> g, Adjoints& adj) {
        auto& ga = adj.of(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return out;
}

Tensor concat(const std::vector<Tensor>& inputs, int axis) {
    if (inputs.empty()) throw ConfigError("concat: no inputs");
    const int rank = inputs[0].rank();
    if (axis < 0 || axis >= rank) throw ConfigError("concat: bad axis");
    Shape out_shape = inputs[0].shape();
    std::int64_t axis_total = 0;
    for (const auto& t : inputs) {
        if (t.rank() != rank) throw ConfigError("concat: rank mismatch");
        for (int d = 0; d < rank; ++d) {
            if (d == axis) continue;
            if (t.dim(d) != out_shape[static_cast<std::size_t>(d)])
                throw ConfigError("concat: non-axis dim mismatch " + shape_str(t.shape()) +
                                  " vs " + shape_str(inputs[0].shape()));
        }
        axis_total += t.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = axis_total;

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

    Tensor out = Tensor::zeros(out_shape);
    double* po = out.mutable_data().data();
    const std::int64_t out_row = axis_total * inner;
    std::int64_t offset = 0;
    for (const auto& t : inputs) {
        const std::int64_t len = t.dim(axis) * inner;
        const double* pt = t.data().data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(pt + o * len, pt + (o + 1) * len, po + o * out_row + offset);
        offset += len;
    }

    std::vector<char> tracked;
    bool any = false;
    for (const auto& t : inputs) {
        tracked.push_back(grad_tracked(t) ? 1 : 0);
        any = any || tracked.back();
    }
    record_if(any, "concat", out,
              [inputs, tracked, axis, outer, inner, out_row](std::span<const double> g,
                                                             Adjoints& adj) {
                  std::int64_t offset = 0;
                  for (std::size_t idx = 0; idx < inputs.size(); ++idx) {
                      const Tensor& t = inputs[idx];
                      const std::int64_t len = t.dim(axis) * inner;
                      if (tracked[idx]) {
                          auto& gt = adj.of(t);
                          for (std::int64_t o = 0; o < outer; ++o) {
                              const double* src = g.data() + o * out_row + offset;
                              double* dst = gt.data() + o * len;
                              for (std::int64_t i = 0; i < len; ++i) dst[i] += src[i];
                          }
                      }
                      offset += len;
                  }
              });
    return out;
}

}  // namespace tetra
