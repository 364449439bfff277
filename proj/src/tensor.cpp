#include "goldfinch/tensor.hpp"

#include "goldfinch/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>

namespace goldfinch {

namespace {

thread_local int64_t g_flops = 0;
thread_local int64_t g_live_bytes = 0;
thread_local int64_t g_peak_bytes = 0;
thread_local Tape* g_tape = nullptr;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

} // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

int64_t Counters::flops() { return g_flops; }
void Counters::reset_flops() { g_flops = 0; }
void Counters::add_flops(int64_t n) { g_flops += n; }
int64_t Counters::live_bytes() { return g_live_bytes; }
int64_t Counters::peak_bytes() { return g_peak_bytes; }
void Counters::reset_peak() { g_peak_bytes = g_live_bytes; }

// ----- Impl -----

struct Tensor::Impl {
    Shape shape;
    Dtype dt;
    bool requires_grad = false;
    std::vector<float> f32;
    std::vector<double> f64;
    Tensor grad;
    size_t bytes = 0;

    Impl(Shape s, Dtype d) : shape(std::move(s)), dt(d) {
        const int64_t n = shape_numel(shape);
        check(n >= 0, "tensor: negative extent in shape " + shape_str(shape));
        if (dt == Dtype::f32) f32.resize(static_cast<size_t>(n));
        else f64.resize(static_cast<size_t>(n));
        bytes = static_cast<size_t>(n) * dtype_size(dt);
        g_live_bytes += static_cast<int64_t>(bytes);
        g_peak_bytes = std::max(g_peak_bytes, g_live_bytes);
    }
    ~Impl() { g_live_bytes -= static_cast<int64_t>(bytes); }
};

Tensor Tensor::empty(Shape shape, Dtype dt, bool requires_grad) {
    Tensor t(std::make_shared<Impl>(std::move(shape), dt));
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::zeros(Shape shape, Dtype dt, bool requires_grad) {
    return empty(std::move(shape), dt, requires_grad); // vectors are zero-initialized
}

Tensor Tensor::full(Shape shape, Dtype dt, double value, bool requires_grad) {
    Tensor t = empty(std::move(shape), dt, requires_grad);
    if (dt == Dtype::f32) std::fill(t.impl_->f32.begin(), t.impl_->f32.end(), static_cast<float>(value));
    else std::fill(t.impl_->f64.begin(), t.impl_->f64.end(), value);
    return t;
}

Tensor Tensor::from(std::span<const double> values, Shape shape, Dtype dt, bool requires_grad) {
    check(static_cast<int64_t>(values.size()) == shape_numel(shape),
          "tensor from: value count does not match shape " + shape_str(shape));
    Tensor t = empty(std::move(shape), dt, requires_grad);
    for (size_t i = 0; i < values.size(); ++i) t.set(static_cast<int64_t>(i), values[i]);
    return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return full({1}, dt, value); }

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
int64_t Tensor::dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }
int64_t Tensor::numel() const { return shape_numel(impl_->shape); }
Dtype Tensor::dtype() const { return impl_->dt; }
size_t Tensor::byte_size() const { return impl_->bytes; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

template <> float* Tensor::data<float>() {
    check(impl_->dt == Dtype::f32, "tensor: f32 access on f64 tensor");
    return impl_->f32.data();
}
template <> double* Tensor::data<double>() {
    check(impl_->dt == Dtype::f64, "tensor: f64 access on f32 tensor");
    return impl_->f64.data();
}
template <> const float* Tensor::data<float>() const {
    check(impl_->dt == Dtype::f32, "tensor: f32 access on f64 tensor");
    return impl_->f32.data();
}
template <> const double* Tensor::data<double>() const {
    check(impl_->dt == Dtype::f64, "tensor: f64 access on f32 tensor");
    return impl_->f64.data();
}
void* Tensor::raw() { return impl_->dt == Dtype::f32 ? static_cast<void*>(impl_->f32.data()) : static_cast<void*>(impl_->f64.data()); }
const void* Tensor::raw() const { return impl_->dt == Dtype::f32 ? static_cast<const void*>(impl_->f32.data()) : static_cast<const void*>(impl_->f64.data()); }

double Tensor::get(int64_t i) const {
    return impl_->dt == Dtype::f32 ? static_cast<double>(impl_->f32[static_cast<size_t>(i)])
                                   : impl_->f64[static_cast<size_t>(i)];
}
void Tensor::set(int64_t i, double v) {
    if (impl_->dt == Dtype::f32) impl_->f32[static_cast<size_t>(i)] = static_cast<float>(v);
    else impl_->f64[static_cast<size_t>(i)] = v;
}
double Tensor::item() const {
    check(numel() == 1, "item: tensor is not scalar, shape " + shape_str(shape()));
    return get(0);
}

Tensor& Tensor::grad() {
    if (!impl_->grad.defined()) impl_->grad = Tensor::zeros(impl_->shape, impl_->dt);
    return impl_->grad;
}
const Tensor* Tensor::grad_if_present() const {
    return impl_->grad.defined() ? &impl_->grad : nullptr;
}
bool Tensor::has_grad() const { return impl_ && impl_->grad.defined(); }
void Tensor::zero_grad() {
    if (!impl_->grad.defined()) return;
    if (impl_->dt == Dtype::f32) std::fill(impl_->grad.impl_->f32.begin(), impl_->grad.impl_->f32.end(), 0.f);
    else std::fill(impl_->grad.impl_->f64.begin(), impl_->grad.impl_->f64.end(), 0.0);
}
void Tensor::drop_grad() { impl_->grad = Tensor(); }

Tensor Tensor::clone() const {
    Tensor t = Tensor::empty(impl_->shape, impl_->dt);
    t.impl_->f32 = impl_->f32;
    t.impl_->f64 = impl_->f64;
    return t;
}

Tensor Tensor::to(Dtype dt) const {
    if (dt == impl_->dt) return clone();
    Tensor t = Tensor::empty(impl_->shape, dt);
    const int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, get(i));
    return t;
}

void Tensor::copy_from(const Tensor& src) {
    check(src.shape() == shape() && src.dtype() == dtype(),
          "copy_from: shape/dtype mismatch " + shape_str(src.shape()) + " vs " + shape_str(shape()));
    impl_->f32 = src.impl_->f32;
    impl_->f64 = src.impl_->f64;
}

// ----- Tape -----

Tape::Scope::Scope(Tape& t) : prev_(g_tape) { g_tape = &t; }
Tape::Scope::~Scope() { g_tape = prev_; }
Tape* Tape::current() { return g_tape; }

void Tape::record(const char* name, std::function<void()> backward) {
    nodes_.push_back({name, std::move(backward)});
}

size_t Tape::backward(Tensor& root) {
    check(root.numel() == 1, "backward: root must be scalar, shape " + shape_str(root.shape()));
    root.grad();
    root.set_requires_grad(true);
    if (root.dtype() == Dtype::f32) root.grad().data<float>()[0] = 1.f;
    else root.grad().data<double>()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        it->fn();
    }
    return nodes_.size();
}

void Tape::clear() { nodes_.clear(); }

// ----- op helpers -----

namespace {

template <typename F>
void dispatch(Dtype dt, F&& f) {
    if (dt == Dtype::f32) f(float{});
    else f(double{});
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (size_t i = 0; i < small.size(); ++i) {
        if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    }
    return true;
}

struct BinPlan {
    Shape out_shape;
    int64_t inner;   // numel of the smaller operand (broadcast period)
    int64_t outer;   // repetitions
    bool a_small;
    bool b_small;
};

BinPlan bin_plan(const char* op, const Tensor& a, const Tensor& b) {
    check(a.dtype() == b.dtype(), std::string(op) + ": dtype mismatch");
    BinPlan p;
    if (a.shape() == b.shape()) {
        p = {a.shape(), a.numel(), 1, false, false};
    } else if (b.numel() == 1) {
        p = {a.shape(), 1, a.numel(), false, true};
    } else if (a.numel() == 1) {
        p = {b.shape(), 1, b.numel(), true, false};
    } else if (is_suffix(b.shape(), a.shape())) {
        p = {a.shape(), b.numel(), a.numel() / b.numel(), false, true};
    } else if (is_suffix(a.shape(), b.shape())) {
        p = {b.shape(), a.numel(), b.numel() / a.numel(), true, false};
    } else {
        fail(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
             shape_str(b.shape()) + " are not broadcastable");
    }
    return p;
}

bool should_record(std::initializer_list<const Tensor*> ins) {
    if (!Tape::current()) return false;
    for (const Tensor* t : ins) {
        if (t->requires_grad()) return true;
    }
    return false;
}

bool any_requires(std::initializer_list<const Tensor*> ins) {
    for (const Tensor* t : ins) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// g has out_numel entries; adds into x.grad() (which may be the broadcast-small
// operand, reducing over the leading repetitions)
template <typename T>
void accum_grad(Tensor& x, const T* g, int64_t out_numel) {
    if (!x.requires_grad()) return;
    T* gx = x.grad().data<T>();
    const int64_t n = x.numel();
    if (n == out_numel) {
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    } else {
        const int64_t outer = out_numel / n;
        for (int64_t o = 0; o < outer; ++o) {
            const T* go = g + o * n;
            for (int64_t i = 0; i < n; ++i) gx[i] += go[i];
        }
    }
}

template <typename T, typename F>
void zip(const T* a, const T* b, T* o, const BinPlan& p, F&& f) {
    if (!p.a_small && !p.b_small) {
        const int64_t n = p.inner;
#pragma omp simd
        for (int64_t i = 0; i < n; ++i) o[i] = f(a[i], b[i]);
    } else if (p.b_small) {
        for (int64_t ou = 0; ou < p.outer; ++ou) {
            const T* ao = a + ou * p.inner;
            T* oo = o + ou * p.inner;
#pragma omp simd
            for (int64_t i = 0; i < p.inner; ++i) oo[i] = f(ao[i], b[i]);
        }
    } else {
        for (int64_t ou = 0; ou < p.outer; ++ou) {
            const T* bo = b + ou * p.inner;
            T* oo = o + ou * p.inner;
#pragma omp simd
            for (int64_t i = 0; i < p.inner; ++i) oo[i] = f(a[i], bo[i]);
        }
    }
}

// expands (possibly broadcast) operand element for backward loops
template <typename T>
struct BcastView {
    const T* p;
    int64_t n;
    T operator[](int64_t i) const { return p[i % n]; }
};

template <typename FwdF>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdF&& fwd,
                 std::function<void(Tensor, Tensor, Tensor)> make_backward_unused = nullptr) {
    (void)make_backward_unused;
    BinPlan p = bin_plan(name, a, b);
    Tensor out = Tensor::empty(p.out_shape, a.dtype(), any_requires({&a, &b}));
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        zip<T>(a.data<T>(), b.data<T>(), out.data<T>(), p, fwd);
    });
    return out;
}

} // namespace

// ----- elementwise binary -----

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = binary_op("add", a, b, [](auto x, auto y) { return x + y; });
    if (should_record({&a, &b})) {
        Tape::current()->record("add", [a = a, b = b, out = out]() mutable {
            if (!out.has_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                accum_grad<T>(a, g, out.numel());
                accum_grad<T>(b, g, out.numel());
            });
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    Tensor out = binary_op("sub", a, b, [](auto x, auto y) { return x - y; });
    if (should_record({&a, &b})) {
        Tape::current()->record("sub", [a = a, b = b, out = out]() mutable {
            if (!out.has_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                const int64_t n = out.numel();
                accum_grad<T>(a, g, n);
                if (b.requires_grad()) {
                    std::vector<T> neg(static_cast<size_t>(n));
                    for (int64_t i = 0; i < n; ++i) neg[static_cast<size_t>(i)] = -g[i];
                    accum_grad<T>(b, neg.data(), n);
                }
            });
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Tensor out = binary_op("mul", a, b, [](auto x, auto y) { return x * y; });
    if (should_record({&a, &b})) {
        Tape::current()->record("mul", [a = a, b = b, out = out]() mutable {
            if (!out.has_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                const int64_t n = out.numel();
                BcastView<T> av{a.data<T>(), a.numel()};
                BcastView<T> bv{b.data<T>(), b.numel()};
                if (a.requires_grad()) {
                    std::vector<T> tmp(static_cast<size_t>(n));
                    for (int64_t i = 0; i < n; ++i) tmp[static_cast<size_t>(i)] = g[i] * bv[i];
                    accum_grad<T>(a, tmp.data(), n);
                }
                if (b.requires_grad()) {
                    std::vector<T> tmp(static_cast<size_t>(n));
                    for (int64_t i = 0; i < n; ++i) tmp[static_cast<size_t>(i)] = g[i] * av[i];
                    accum_grad<T>(b, tmp.data(), n);
                }
            });
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double s) { return scale_add(a, s, 0.0); }

Tensor scale_add(const Tensor& a, double s, double c) {
    Tensor out = Tensor::empty(a.shape(), a.dtype(), a.requires_grad());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* x = a.data<T>();
        T* o = out.data<T>();
        const T ts = static_cast<T>(s), tc = static_cast<T>(c);
        const int64_t n = a.numel();
#pragma omp simd
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] * ts + tc;
    });
    if (should_record({&a})) {
        Tape::current()->record("scale_add", [a = a, out = out, s]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                T* gx = a.grad().data<T>();
                const T ts = static_cast<T>(s);
                const int64_t n = out.numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * ts;
            });
        });
    }
    return out;
}

// ----- elementwise unary -----

namespace {

template <typename FwdF, typename BwdF>
Tensor unary_op(const char* name, const Tensor& a, FwdF&& fwd, BwdF&& bwd) {
    Tensor out = Tensor::empty(a.shape(), a.dtype(), a.requires_grad());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* x = a.data<T>();
        T* o = out.data<T>();
        const int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) o[i] = fwd(x[i]);
    });
    if (should_record({&a})) {
        Tape::current()->record(name, [a = a, out = out, bwd]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                const T* x = a.data<T>();
                const T* y = out.data<T>();
                T* gx = a.grad().data<T>();
                const int64_t n = out.numel();
                for (int64_t i = 0; i < n; ++i) {
                    gx[i] += g[i] * static_cast<T>(bwd(static_cast<double>(x[i]), static_cast<double>(y[i])));
                }
            });
        });
    }
    return out;
}

} // namespace

Tensor exp(const Tensor& a) {
    return unary_op("exp", a, [](auto x) { return std::exp(x); },
                    [](double, double y) { return y; });
}
Tensor tanh(const Tensor& a) {
    return unary_op("tanh", a, [](auto x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}
Tensor sigmoid(const Tensor& a) {
    return unary_op("sigmoid", a, [](auto x) { return decltype(x)(1) / (decltype(x)(1) + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}
Tensor relu(const Tensor& a) {
    return unary_op("relu", a, [](auto x) { return x > decltype(x)(0) ? x : decltype(x)(0); },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
Tensor square(const Tensor& a) {
    return unary_op("square", a, [](auto x) { return x * x; },
                    [](double x, double) { return 2.0 * x; });
}

// ----- matmul -----

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2,
          "matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    check(a.dim(1) == b.dim(0),
          "matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    check(a.dtype() == b.dtype(), "matmul: dtype mismatch");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::empty({m, n}, a.dtype(), any_requires({&a, &b}));
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::gemm_nn<T>(a.data<T>(), b.data<T>(), out.data<T>(), m, k, n, false);
    });
    Counters::add_flops(m * k * n);
    if (should_record({&a, &b})) {
        Tape::current()->record("matmul", [a = a, b = b, out = out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                if (a.requires_grad()) {
                    kernels::gemm_nt<T>(g, b.data<T>(), a.grad().data<T>(), m, n, k, true);
                }
                if (b.requires_grad()) {
                    kernels::gemm_tn<T>(a.data<T>(), g, b.grad().data<T>(), m, k, n, true);
                }
            });
        });
    }
    return out;
}

// ----- lerp -----

Tensor lerp(const Tensor& a, const Tensor& b, const Tensor& t) {
    check(a.shape() == b.shape(),
          "lerp: endpoint shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    BinPlan p = bin_plan("lerp", a, t);
    check(!p.a_small, "lerp: t larger than endpoints, " + shape_str(t.shape()));
    Tensor out = Tensor::empty(a.shape(), a.dtype(), any_requires({&a, &b, &t}));
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = a.data<T>();
        const T* bp = b.data<T>();
        const T* tp = t.data<T>();
        T* o = out.data<T>();
        const int64_t n = a.numel();
        const int64_t inner = t.numel();
        for (int64_t i = 0; i < n; ++i) {
            const T tv = tp[i % inner];
            o[i] = ap[i] + (bp[i] - ap[i]) * tv;
        }
    });
    if (should_record({&a, &b, &t})) {
        Tape::current()->record("lerp", [a = a, b = b, t = t, out = out]() mutable {
            if (!out.has_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                const T* ap = a.data<T>();
                const T* bp = b.data<T>();
                const T* tp = t.data<T>();
                const int64_t n = out.numel();
                const int64_t inner = t.numel();
                if (a.requires_grad()) {
                    T* ga = a.grad().data<T>();
                    for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * (T(1) - tp[i % inner]);
                }
                if (b.requires_grad()) {
                    T* gb = b.grad().data<T>();
                    for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * tp[i % inner];
                }
                if (t.requires_grad()) {
                    T* gt = t.grad().data<T>();
                    for (int64_t i = 0; i < n; ++i) gt[i % inner] += g[i] * (bp[i] - ap[i]);
                }
            });
        });
    }
    return out;
}

// ----- norms -----

namespace {

int64_t last_dim(const Tensor& x) { return x.dim(x.rank() - 1); }

} // namespace

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const int64_t d = last_dim(x);
    check(gamma.numel() == d && beta.numel() == d,
          "layernorm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
              " do not match width " + std::to_string(d));
    const int64_t rows = x.numel() / d;
    Tensor out = Tensor::empty(x.shape(), x.dtype(), any_requires({&x, &gamma, &beta}));
    Tensor mean = Tensor::empty({rows}, x.dtype());
    Tensor rstd = Tensor::empty({rows}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::layernorm_rows<T>(x.data<T>(), gamma.data<T>(), beta.data<T>(), out.data<T>(),
                                   rows, d, static_cast<T>(eps), mean.data<T>(), rstd.data<T>());
    });
    Counters::add_flops(rows * d * 3);
    if (should_record({&x, &gamma, &beta})) {
        Tape::current()->record("layernorm", [x = x, gamma = gamma, beta = beta, out = out,
                                              mean = mean, rstd = rstd, rows, d]() mutable {
            if (!out.has_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                const T* xp = x.data<T>();
                const T* gm = gamma.data<T>();
                const T* mp = mean.data<T>();
                const T* rp = rstd.data<T>();
                T* gx = x.requires_grad() ? x.grad().data<T>() : nullptr;
                T* gg = gamma.requires_grad() ? gamma.grad().data<T>() : nullptr;
                T* gb = beta.requires_grad() ? beta.grad().data<T>() : nullptr;
                std::vector<T> xhat(static_cast<size_t>(d));
                for (int64_t r = 0; r < rows; ++r) {
                    const T* xr = xp + r * d;
                    const T* gr = g + r * d;
                    for (int64_t j = 0; j < d; ++j) xhat[static_cast<size_t>(j)] = (xr[j] - mp[r]) * rp[r];
                    if (gg) {
                        for (int64_t j = 0; j < d; ++j) gg[j] += gr[j] * xhat[static_cast<size_t>(j)];
                    }
                    if (gb) {
                        for (int64_t j = 0; j < d; ++j) gb[j] += gr[j];
                    }
                    if (gx) {
                        T sum_dh = 0, sum_dh_x = 0;
                        for (int64_t j = 0; j < d; ++j) {
                            const T dh = gr[j] * gm[j];
                            sum_dh += dh;
                            sum_dh_x += dh * xhat[static_cast<size_t>(j)];
                        }
                        const T inv_d = T(1) / T(d);
                        T* gxr = gx + r * d;
                        for (int64_t j = 0; j < d; ++j) {
                            const T dh = gr[j] * gm[j];
                            gxr[j] += rp[r] * (dh - sum_dh * inv_d - xhat[static_cast<size_t>(j)] * sum_dh_x * inv_d);
                        }
                    }
                }
            });
        });
    }
    return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    const int64_t d = last_dim(x);
    check(gain.numel() == d, "rmsnorm: gain " + shape_str(gain.shape()) + " does not match width " + std::to_string(d));
    const int64_t rows = x.numel() / d;
    Tensor out = Tensor::empty(x.shape(), x.dtype(), any_requires({&x, &gain}));
    Tensor rrms = Tensor::empty({rows}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::rmsnorm_rows<T>(x.data<T>(), gain.data<T>(), out.data<T>(), rows, d,
                                 static_cast<T>(eps), rrms.data<T>());
    });
    Counters::add_flops(rows * d * 2);
    if (should_record({&x, &gain})) {
        Tape::current()->record("rmsnorm", [x = x, gain = gain, out = out, rrms = rrms, rows, d]() mutable {
            if (!out.has_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                const T* xp = x.data<T>();
                const T* gn = gain.data<T>();
                const T* rp = rrms.data<T>();
                T* gx = x.requires_grad() ? x.grad().data<T>() : nullptr;
                T* gg = gain.requires_grad() ? gain.grad().data<T>() : nullptr;
                for (int64_t r = 0; r < rows; ++r) {
                    const T* xr = xp + r * d;
                    const T* gr = g + r * d;
                    if (gg) {
                        for (int64_t j = 0; j < d; ++j) gg[j] += gr[j] * xr[j] * rp[r];
                    }
                    if (gx) {
                        T dot = 0;
                        for (int64_t j = 0; j < d; ++j) dot += gr[j] * gn[j] * xr[j];
                        const T coef = dot * rp[r] * rp[r] / T(d);
                        T* gxr = gx + r * d;
                        for (int64_t j = 0; j < d; ++j) {
                            gxr[j] += rp[r] * (gr[j] * gn[j] - xr[j] * coef);
                        }
                    }
                }
            });
        });
    }
    return out;
}

// ----- token shift -----

Tensor token_shift(const Tensor& x, const Tensor& initial, int64_t n_seq) {
    check(x.rank() == 2, "token_shift: x must be rank 2, got " + shape_str(x.shape()));
    const int64_t rows = x.dim(0), d = x.dim(1);
    check(rows % n_seq == 0, "token_shift: rows not divisible by n_seq");
    check(initial.numel() == n_seq * d,
          "token_shift: initial " + shape_str(initial.shape()) + " does not match n_seq*d");
    check(!initial.requires_grad(), "token_shift: gradient into initial state is unsupported");
    const int64_t t = rows / n_seq;
    Tensor out = Tensor::empty(x.shape(), x.dtype(), x.requires_grad());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xp = x.data<T>();
        const T* ip = initial.data<T>();
        T* o = out.data<T>();
        for (int64_t s = 0; s < n_seq; ++s) {
            std::memcpy(o + s * t * d, ip + s * d, static_cast<size_t>(d) * sizeof(T));
            if (t > 1) {
                std::memcpy(o + (s * t + 1) * d, xp + s * t * d, static_cast<size_t>((t - 1) * d) * sizeof(T));
            }
        }
    });
    if (should_record({&x})) {
        Tape::current()->record("token_shift", [x = x, out = out, n_seq, t, d]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                T* gx = x.grad().data<T>();
                for (int64_t s = 0; s < n_seq; ++s) {
                    for (int64_t i = 0; i + 1 < t; ++i) {
                        const T* gr = g + (s * t + i + 1) * d;
                        T* gxr = gx + (s * t + i) * d;
                        for (int64_t j = 0; j < d; ++j) gxr[j] += gr[j];
                    }
                }
            });
        });
    }
    return out;
}

// ----- concat / slice -----

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0),
          "concat_cols: row counts differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    Tensor out = Tensor::empty({rows, ca + cb}, a.dtype(), any_requires({&a, &b}));
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = a.data<T>();
        const T* bp = b.data<T>();
        T* o = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            std::memcpy(o + r * (ca + cb), ap + r * ca, static_cast<size_t>(ca) * sizeof(T));
            std::memcpy(o + r * (ca + cb) + ca, bp + r * cb, static_cast<size_t>(cb) * sizeof(T));
        }
    });
    if (should_record({&a, &b})) {
        Tape::current()->record("concat_cols", [a = a, b = b, out = out, rows, ca, cb]() mutable {
            if (!out.has_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                if (a.requires_grad()) {
                    T* ga = a.grad().data<T>();
                    for (int64_t r = 0; r < rows; ++r) {
                        for (int64_t j = 0; j < ca; ++j) ga[r * ca + j] += g[r * (ca + cb) + j];
                    }
                }
                if (b.requires_grad()) {
                    T* gb = b.grad().data<T>();
                    for (int64_t r = 0; r < rows; ++r) {
                        for (int64_t j = 0; j < cb; ++j) gb[r * cb + j] += g[r * (ca + cb) + ca + j];
                    }
                }
            });
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end) {
    check(x.rank() == 2, "slice_rows: x must be rank 2");
    check(begin >= 0 && end <= x.dim(0) && begin < end,
          "slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
              ") invalid for " + shape_str(x.shape()));
    const int64_t d = x.dim(1);
    Tensor out = Tensor::empty({end - begin, d}, x.dtype(), x.requires_grad());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::memcpy(out.data<T>(), x.data<T>() + begin * d,
                    static_cast<size_t>((end - begin) * d) * sizeof(T));
    });
    if (should_record({&x})) {
        Tape::current()->record("slice_rows", [x = x, out = out, begin, d]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                T* gx = x.grad().data<T>() + begin * d;
                const int64_t n = out.numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
            });
        });
    }
    return out;
}

// ----- embedding -----

Tensor embedding(std::span<const int32_t> ids, const Tensor& table) {
    check(table.rank() == 2, "embedding: table must be rank 2");
    const int64_t v = table.dim(0), d = table.dim(1);
    Tensor out = Tensor::empty({static_cast<int64_t>(ids.size()), d}, table.dtype(), table.requires_grad());
    for (size_t i = 0; i < ids.size(); ++i) {
        check(ids[i] >= 0 && ids[i] < v,
              "embedding: token id " + std::to_string(ids[i]) + " out of range [0," + std::to_string(v) + ")");
    }
    dispatch(table.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* tp = table.data<T>();
        T* o = out.data<T>();
        for (size_t i = 0; i < ids.size(); ++i) {
            std::memcpy(o + static_cast<int64_t>(i) * d, tp + static_cast<int64_t>(ids[i]) * d,
                        static_cast<size_t>(d) * sizeof(T));
        }
    });
    if (should_record({&table})) {
        std::vector<int32_t> ids_copy(ids.begin(), ids.end());
        Tape::current()->record("embedding", [table = table, out = out, ids = std::move(ids_copy), d]() mutable {
            if (!out.has_grad() || !table.requires_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                T* gt = table.grad().data<T>();
                for (size_t i = 0; i < ids.size(); ++i) {
                    const T* gr = g + static_cast<int64_t>(i) * d;
                    T* tr = gt + static_cast<int64_t>(ids[i]) * d;
                    for (int64_t j = 0; j < d; ++j) tr[j] += gr[j];
                }
            });
        });
    }
    return out;
}

// ----- reductions -----

Tensor sum(const Tensor& a) {
    Tensor out = Tensor::empty({1}, a.dtype(), a.requires_grad());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* x = a.data<T>();
        T acc = 0;
        const int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) acc += x[i];
        out.data<T>()[0] = acc;
    });
    if (should_record({&a})) {
        Tape::current()->record("sum", [a = a, out = out]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T g = out.grad().data<T>()[0];
                T* gx = a.grad().data<T>();
                const int64_t n = a.numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += g;
            });
        });
    }
    return out;
}

// ----- softmax -----

Tensor softmax_rows(const Tensor& x) {
    const int64_t d = last_dim(x);
    const int64_t rows = x.numel() / d;
    Tensor out = Tensor::empty(x.shape(), x.dtype(), x.requires_grad());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xp = x.data<T>();
        T* o = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = xp + r * d;
            T* orow = o + r * d;
            T mx = xr[0];
            for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
            T denom = 0;
            for (int64_t j = 0; j < d; ++j) {
                orow[j] = std::exp(xr[j] - mx);
                denom += orow[j];
            }
            const T inv = T(1) / denom;
            for (int64_t j = 0; j < d; ++j) orow[j] *= inv;
        }
    });
    if (should_record({&x})) {
        Tape::current()->record("softmax_rows", [x = x, out = out, rows, d]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                const T* y = out.data<T>();
                T* gx = x.grad().data<T>();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gr = g + r * d;
                    const T* yr = y + r * d;
                    T dot = 0;
                    for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
                    T* gxr = gx + r * d;
                    for (int64_t j = 0; j < d; ++j) gxr[j] += yr[j] * (gr[j] - dot);
                }
            });
        });
    }
    return out;
}

// ----- attention -----

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionOpts& opts) {
    check(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: operands must be rank 2");
    check(k.shape() == v.shape(),
          "attention: k/v shapes differ, " + shape_str(k.shape()) + " vs " + shape_str(v.shape()));
    check(q.dim(1) == k.dim(1), "attention: widths differ, " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
    const int64_t d = q.dim(1);
    check(d % opts.n_head == 0,
          "attention: width " + std::to_string(d) + " not divisible by " + std::to_string(opts.n_head) + " heads");
    check(q.dim(0) % opts.n_seq == 0 && k.dim(0) % opts.n_seq == 0, "attention: rows not divisible by n_seq");
    const int64_t h = d / opts.n_head;
    const int64_t tq = q.dim(0) / opts.n_seq;
    const int64_t tk = k.dim(0) / opts.n_seq;
    const bool want_grad = any_requires({&q, &k, &v});
    const bool recording = should_record({&q, &k, &v});
    Tensor out = Tensor::empty(q.shape(), q.dtype(), want_grad);
    Tensor probs;
    if (recording || opts.probs_out) {
        probs = Tensor::empty({opts.n_seq * opts.n_head * tq, tk}, q.dtype());
    }
    const double scl = 1.0 / std::sqrt(static_cast<double>(h));
    dispatch(q.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::attn_fwd<T>(q.data<T>(), k.data<T>(), v.data<T>(), out.data<T>(),
                             probs.defined() ? probs.data<T>() : nullptr,
                             opts.n_seq, tq, tk, opts.n_head, h, opts.pos_offset, static_cast<T>(scl));
    });
    {
        int64_t macs = 0;
        for (int64_t i = 0; i < tq; ++i) macs += 2 * std::min(tk, i + opts.pos_offset + 1) * h;
        Counters::add_flops(macs * opts.n_seq * opts.n_head);
    }
    if (opts.probs_out) *opts.probs_out = probs;
    if (recording) {
        const int64_t n_seq = opts.n_seq, n_head = opts.n_head, offset = opts.pos_offset;
        Tape::current()->record("attention", [q = q, k = k, v = v, out = out, probs = probs,
                                              n_seq, n_head, offset, tq, tk, h, d, scl]() mutable {
            if (!out.has_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = out.grad().data<T>();
                const T* qp = q.data<T>();
                const T* kp = k.data<T>();
                const T* vp = v.data<T>();
                const T* pp = probs.data<T>();
                T* gq = q.requires_grad() ? q.grad().data<T>() : nullptr;
                T* gk = k.requires_grad() ? k.grad().data<T>() : nullptr;
                T* gv = v.requires_grad() ? v.grad().data<T>() : nullptr;
                std::vector<T> dp(static_cast<size_t>(tk));
                for (int64_t s = 0; s < n_seq; ++s) {
                    for (int64_t hd = 0; hd < n_head; ++hd) {
                        const T* qh = qp + s * tq * d + hd * h;
                        const T* kh = kp + s * tk * d + hd * h;
                        const T* vh = vp + s * tk * d + hd * h;
                        const T* gh = g + s * tq * d + hd * h;
                        const T* ph = pp + (s * n_head + hd) * tq * tk;
                        for (int64_t i = 0; i < tq; ++i) {
                            const int64_t lim = std::min<int64_t>(tk, i + offset + 1);
                            const T* gi = gh + i * d;
                            const T* pi = ph + i * tk;
                            // dp_j = dO_i . v_j ; ds_j = p_j (dp_j - sum_l p_l dp_l)
                            T dot = 0;
                            for (int64_t j = 0; j < lim; ++j) {
                                const T* vj = vh + j * d;
                                T acc = 0;
                                for (int64_t c = 0; c < h; ++c) acc += gi[c] * vj[c];
                                dp[static_cast<size_t>(j)] = acc;
                                dot += acc * pi[j];
                            }
                            for (int64_t j = 0; j < lim; ++j) {
                                const T ds = pi[j] * (dp[static_cast<size_t>(j)] - dot) * static_cast<T>(scl);
                                if (gq) {
                                    T* gqi = gq + (s * tq + i) * d + hd * h;
                                    const T* kj = kh + j * d;
                                    for (int64_t c = 0; c < h; ++c) gqi[c] += ds * kj[c];
                                }
                                if (gk) {
                                    T* gkj = gk + (s * tk + j) * d + hd * h;
                                    const T* qi = qh + i * d;
                                    for (int64_t c = 0; c < h; ++c) gkj[c] += ds * qi[c];
                                }
                                if (gv) {
                                    T* gvj = gv + (s * tk + j) * d + hd * h;
                                    const T p = pi[j];
                                    for (int64_t c = 0; c < h; ++c) gvj[c] += p * gi[c];
                                }
                            }
                        }
                    }
                }
            });
        });
    }
    return out;
}

// ----- rope -----

Tensor rope(const Tensor& x, int64_t n_head, int64_t n_seq, int64_t pos_begin,
            double base, double interp_scale) {
    check(x.rank() == 2, "rope: x must be rank 2");
    const int64_t d = x.dim(1);
    check(d % n_head == 0, "rope: width not divisible by heads");
    const int64_t h = d / n_head;
    check(h % 2 == 0, "rope: head size " + std::to_string(h) + " must be even");
    const int64_t rows = x.dim(0);
    const int64_t t = rows / n_seq;
    Tensor out = Tensor::empty(x.shape(), x.dtype(), x.requires_grad());
    auto apply = [&](auto tag, const auto* src, auto* dst, bool inverse) {
        using T = decltype(tag);
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t pos = pos_begin + (r % t);
            const double ang_base = static_cast<double>(pos) * interp_scale;
            for (int64_t hd = 0; hd < n_head; ++hd) {
                const T* xr = src + r * d + hd * h;
                T* orow = dst + r * d + hd * h;
                for (int64_t c = 0; c < h / 2; ++c) {
                    const double theta = ang_base * std::pow(base, -2.0 * static_cast<double>(c) / static_cast<double>(h));
                    const T cs = static_cast<T>(std::cos(theta));
                    const T sn = static_cast<T>(inverse ? -std::sin(theta) : std::sin(theta));
                    const T x0 = xr[c], x1 = xr[c + h / 2];
                    orow[c] = x0 * cs - x1 * sn;
                    orow[c + h / 2] = x0 * sn + x1 * cs;
                }
            }
        }
    };
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        apply(tag, x.data<T>(), out.data<T>(), false);
    });
    if (should_record({&x})) {
        Tape::current()->record("rope", [x = x, out = out, apply]() mutable {
            if (!out.has_grad() || !x.requires_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                Tensor tmp = Tensor::empty(out.shape(), out.dtype());
                apply(tag, out.grad().data<T>(), tmp.data<T>(), true);
                T* gx = x.grad().data<T>();
                const T* tp = tmp.data<T>();
                const int64_t n = out.numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += tp[i];
            });
        });
    }
    return out;
}

// ----- wkv -----

Tensor wkv(const Tensor& r, const Tensor& w, const Tensor& k, const Tensor& v,
           int64_t n_head, int64_t n_seq, Tensor* state) {
    check(r.shape() == w.shape() && r.shape() == k.shape() && r.shape() == v.shape(),
          "wkv: operand shapes differ");
    check(r.rank() == 2, "wkv: operands must be rank 2");
    const int64_t d = r.dim(1);
    check(d % n_head == 0, "wkv: width not divisible by heads");
    const int64_t h = d / n_head;
    const int64_t t = r.dim(0) / n_seq;
    Tensor local_state;
    if (!state) {
        local_state = Tensor::zeros({n_seq * n_head, h, h}, r.dtype());
        state = &local_state;
    }
    check(state->numel() == n_seq * n_head * h * h, "wkv: state shape mismatch " + shape_str(state->shape()));
    const bool recording = should_record({&r, &w, &k, &v});
    Tensor state0;
    if (recording) state0 = state->clone();
    Tensor out = Tensor::empty(r.shape(), r.dtype(), any_requires({&r, &w, &k, &v}));
    dispatch(r.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::wkv_fwd<T>(r.data<T>(), w.data<T>(), k.data<T>(), v.data<T>(), out.data<T>(),
                            state->data<T>(), n_seq, t, n_head, h, nullptr);
    });
    Counters::add_flops(n_seq * t * n_head * h * h * 3);
    if (recording) {
        Tape::current()->record("wkv", [r = r, w = w, k = k, v = v, out = out, state0 = state0,
                                        n_seq, n_head, t, h, d]() mutable {
            if (!out.has_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const int64_t ckpt = 32; // recompute window for the backward scan
                const T* rp = r.data<T>();
                const T* wp = w.data<T>();
                const T* kp = k.data<T>();
                const T* vp = v.data<T>();
                const T* g = out.grad().data<T>();
                T* gr = r.requires_grad() ? r.grad().data<T>() : nullptr;
                T* gw = w.requires_grad() ? w.grad().data<T>() : nullptr;
                T* gk = k.requires_grad() ? k.grad().data<T>() : nullptr;
                T* gv = v.requires_grad() ? v.grad().data<T>() : nullptr;
                const int64_t n_ckpt = (t + ckpt - 1) / ckpt;
                std::vector<T> boundaries(static_cast<size_t>(n_ckpt * h * h));
                std::vector<T> seg(static_cast<size_t>(ckpt * h * h));
                std::vector<T> G(static_cast<size_t>(h * h));
                std::vector<T> S(static_cast<size_t>(h * h));
                std::vector<T> dummy(static_cast<size_t>(h));
                for (int64_t s = 0; s < n_seq; ++s) {
                    for (int64_t hd = 0; hd < n_head; ++hd) {
                        const int64_t base = s * t * d + hd * h;
                        const T* s0 = state0.data<T>() + (s * n_head + hd) * h * h;
                        // forward once more, stashing states at checkpoint boundaries
                        std::copy(s0, s0 + h * h, S.begin());
                        for (int64_t i = 0; i < t; ++i) {
                            if (i % ckpt == 0) {
                                std::copy(S.begin(), S.end(), boundaries.begin() + (i / ckpt) * h * h);
                            }
                            const T* wi = wp + base + i * d;
                            const T* ki = kp + base + i * d;
                            const T* vi = vp + base + i * d;
                            for (int64_t l = 0; l < h; ++l) {
                                T* Sl = S.data() + l * h;
                                const T wl = wi[l], kl = ki[l];
                                for (int64_t j = 0; j < h; ++j) Sl[j] = wl * Sl[j] + kl * vi[j];
                            }
                        }
                        std::fill(G.begin(), G.end(), T(0));
                        for (int64_t cb = n_ckpt - 1; cb >= 0; --cb) {
                            const int64_t lo = cb * ckpt;
                            const int64_t hi_excl = std::min(t, lo + ckpt);
                            // recompute S_t for the window
                            std::copy(boundaries.begin() + cb * h * h,
                                      boundaries.begin() + (cb + 1) * h * h, S.begin());
                            for (int64_t i = lo; i < hi_excl; ++i) {
                                std::copy(S.begin(), S.end(), seg.begin() + (i - lo) * h * h);
                                const T* wi = wp + base + i * d;
                                const T* ki = kp + base + i * d;
                                const T* vi = vp + base + i * d;
                                for (int64_t l = 0; l < h; ++l) {
                                    T* Sl = S.data() + l * h;
                                    const T wl = wi[l], kl = ki[l];
                                    for (int64_t j = 0; j < h; ++j) Sl[j] = wl * Sl[j] + kl * vi[j];
                                }
                            }
                            for (int64_t i = hi_excl - 1; i >= lo; --i) {
                                const T* St = seg.data() + (i - lo) * h * h;
                                const T* wi = wp + base + i * d;
                                const T* ki = kp + base + i * d;
                                const T* vi = vp + base + i * d;
                                const T* ri = rp + base + i * d;
                                const T* gi = g + base + i * d;
                                // undo the state update S_{t+1} = diag(w) S_t + k^T v
                                for (int64_t l = 0; l < h; ++l) {
                                    T* Gl = G.data() + l * h;
                                    const T* Sl = St + l * h;
                                    T dwl = 0, dkl = 0;
                                    for (int64_t j = 0; j < h; ++j) {
                                        dwl += Sl[j] * Gl[j];
                                        dkl += vi[j] * Gl[j];
                                    }
                                    if (gw) gw[base + i * d + l] += dwl;
                                    if (gk) gk[base + i * d + l] += dkl;
                                    if (gv) {
                                        T* gvi = gv + base + i * d;
                                        const T kl = ki[l];
                                        for (int64_t j = 0; j < h; ++j) gvi[j] += kl * Gl[j];
                                    }
                                    const T wl = wi[l];
                                    for (int64_t j = 0; j < h; ++j) Gl[j] *= wl;
                                }
                                // undo the read out_t = r_t S_t
                                for (int64_t l = 0; l < h; ++l) {
                                    const T* Sl = St + l * h;
                                    T* Gl = G.data() + l * h;
                                    T drl = 0;
                                    const T rl = ri[l];
                                    for (int64_t j = 0; j < h; ++j) {
                                        drl += Sl[j] * gi[j];
                                        Gl[j] += rl * gi[j];
                                    }
                                    if (gr) gr[base + i * d + l] += drl;
                                }
                            }
                        }
                    }
                }
                (void)dummy;
            });
        });
    }
    return out;
}

// ----- masked cross entropy -----

Tensor masked_ce_sum(const Tensor& logits, std::span<const int32_t> targets,
                     std::span<const uint8_t> mask) {
    check(logits.rank() == 2, "masked_ce_sum: logits must be rank 2");
    const int64_t rows = logits.dim(0), v = logits.dim(1);
    check(static_cast<int64_t>(targets.size()) == rows && static_cast<int64_t>(mask.size()) == rows,
          "masked_ce_sum: targets/mask length must match logits rows");
    Tensor out = Tensor::empty({1}, logits.dtype(), logits.requires_grad());
    Tensor lse = Tensor::empty({rows}, logits.dtype());
    dispatch(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* lp = logits.data<T>();
        T* lsep = lse.data<T>();
        T acc = 0;
        for (int64_t r = 0; r < rows; ++r) {
            if (!mask[static_cast<size_t>(r)]) {
                lsep[r] = 0;
                continue;
            }
            const int32_t tgt = targets[static_cast<size_t>(r)];
            check(tgt >= 0 && tgt < v, "masked_ce_sum: target out of range");
            const T* row = lp + r * v;
            T mx = row[0];
            for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            T denom = 0;
            for (int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
            const T l = mx + std::log(denom);
            lsep[r] = l;
            acc += l - row[tgt];
        }
        out.data<T>()[0] = acc;
    });
    if (should_record({&logits})) {
        std::vector<int32_t> tcopy(targets.begin(), targets.end());
        std::vector<uint8_t> mcopy(mask.begin(), mask.end());
        Tape::current()->record("masked_ce_sum",
                                [logits = logits, out = out, lse = lse,
                                 targets = std::move(tcopy), mask = std::move(mcopy), rows, v]() mutable {
            if (!out.has_grad() || !logits.requires_grad()) return;
            dispatch(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T g = out.grad().data<T>()[0];
                const T* lp = logits.data<T>();
                const T* lsep = lse.data<T>();
                T* gl = logits.grad().data<T>();
                for (int64_t r = 0; r < rows; ++r) {
                    if (!mask[static_cast<size_t>(r)]) continue;
                    const T* row = lp + r * v;
                    T* grow = gl + r * v;
                    for (int64_t j = 0; j < v; ++j) {
                        grow[j] += g * std::exp(row[j] - lsep[r]);
                    }
                    grow[targets[static_cast<size_t>(r)]] -= g;
                }
            });
        });
    }
    return out;
}

int64_t masked_count(std::span<const uint8_t> mask) {
    int64_t n = 0;
    for (uint8_t m : mask) n += m ? 1 : 0;
    return n;
}

// ----- helpers -----

void fill_uniform(Tensor& t, double lo, double hi, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, dist(rng));
}

Tensor last_rows(const Tensor& x, int64_t n_seq) {
    const int64_t rows = x.dim(0), d = x.dim(1);
    const int64_t t = rows / n_seq;
    Tensor out = Tensor::empty({n_seq, d}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        for (int64_t s = 0; s < n_seq; ++s) {
            std::memcpy(out.data<T>() + s * d, x.data<T>() + (s * t + t - 1) * d,
                        static_cast<size_t>(d) * sizeof(T));
        }
    });
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    check(a.numel() == b.numel(), "max_abs_diff: numel mismatch");
    double mx = 0;
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) mx = std::max(mx, std::abs(a.get(i) - b.get(i)));
    return mx;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
    return std::memcmp(a.raw(), b.raw(), a.byte_size()) == 0;
}

} // namespace goldfinch
