#pragma once

// Dense real tensors with tape-based reverse-mode autodiff.
//
// Tensors are handles to row-major buffers in f32 or f64. Ops allocate
// fresh outputs (slices copy, no views cross the autodiff boundary) and,
// when a Tape is active and an input requires grad, record an adjoint
// closure. Tape::backward replays the closures in reverse execution order.
// A Tape is confined to one thread; tensors move freely between threads.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace goldfinch {

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

inline size_t dtype_size(Dtype dt) { return dt == Dtype::f32 ? 4 : 8; }
inline const char* dtype_name(Dtype dt) { return dt == Dtype::f32 ? "f32" : "f64"; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Thread-local counters: multiply-accumulate count for the big kernels and
// live/peak tensor bytes (cache payloads live outside tensors on purpose).
struct Counters {
    static int64_t flops();
    static void reset_flops();
    static void add_flops(int64_t n);
    static int64_t live_bytes();
    static int64_t peak_bytes();
    static void reset_peak();
};

class Tensor {
public:
    Tensor() = default;

    static Tensor empty(Shape shape, Dtype dt, bool requires_grad = false);
    static Tensor zeros(Shape shape, Dtype dt, bool requires_grad = false);
    static Tensor full(Shape shape, Dtype dt, double value, bool requires_grad = false);
    static Tensor from(std::span<const double> values, Shape shape, Dtype dt,
                       bool requires_grad = false);
    static Tensor scalar(double value, Dtype dt);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const;
    int64_t dim(int i) const;
    int64_t numel() const;
    Dtype dtype() const;
    size_t byte_size() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);

    template <typename T> T* data();
    template <typename T> const T* data() const;
    void* raw();
    const void* raw() const;

    // element accessors for tests and IO, flat index
    double get(int64_t i) const;
    void set(int64_t i, double v);
    double item() const; // scalar tensors

    // gradient buffer, same shape/dtype, allocated zeroed on first touch
    Tensor& grad();
    const Tensor* grad_if_present() const;
    bool has_grad() const;
    void zero_grad();
    void drop_grad();

    Tensor clone() const;          // deep copy of data only
    Tensor to(Dtype dt) const;     // converting deep copy
    void copy_from(const Tensor& src); // in-place data copy, shapes must match

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
    friend class Tape;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // activates this tape on the current thread for its lifetime
    struct Scope {
        explicit Scope(Tape& t);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;
    private:
        Tape* prev_;
    };

    static Tape* current();

    void record(const char* name, std::function<void()> backward);
    size_t size() const { return nodes_.size(); }

    // seeds root's grad with 1 and replays adjoints in reverse order;
    // returns the number of adjoint steps executed
    size_t backward(Tensor& root);
    void clear();

private:
    struct Node {
        const char* name;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
};

// ----- differentiable ops -----
// Binary ops accept equal shapes, a scalar operand, or an operand whose
// shape is a trailing suffix of the other (broadcast over leading rows).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// elementwise a*s + c
Tensor scale_add(const Tensor& a, double s, double c);

Tensor exp(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);

// a + (b - a) ⊙ t, fused
Tensor lerp(const Tensor& a, const Tensor& b, const Tensor& t);

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps);

// x is [(n_seq*t) x d]; row t of each sequence becomes row t-1, row 0 comes
// from initial [n_seq x d] (or [d] when n_seq == 1). initial takes no grad.
Tensor token_shift(const Tensor& x, const Tensor& initial, int64_t n_seq);

Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end);

Tensor embedding(std::span<const int32_t> ids, const Tensor& table);

Tensor sum(const Tensor& a); // scalar

Tensor softmax_rows(const Tensor& x);

struct AttentionOpts {
    int64_t n_head = 1;
    int64_t n_seq = 1;
    int64_t pos_offset = 0;       // query row i attends to key rows <= i + pos_offset
    Tensor* probs_out = nullptr;  // optional softmax weights [n_seq*n_head*tq x tk]
};
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionOpts& opts);

// rotary embedding, half-split pairs per head; positions pos_begin.. per sequence
Tensor rope(const Tensor& x, int64_t n_head, int64_t n_seq, int64_t pos_begin,
            double base, double interp_scale);

// fused r_t · S_t scan per head; state [n_seq*n_head x h x h] optional in/out
// (zeros when absent); gradient does not flow into the incoming state.
Tensor wkv(const Tensor& r, const Tensor& w, const Tensor& k, const Tensor& v,
           int64_t n_head, int64_t n_seq, Tensor* state);

// sum over masked rows of -log softmax(logits_row)[target]; pair with
// masked_count for means. mask entries are 0/1 per row.
Tensor masked_ce_sum(const Tensor& logits, std::span<const int32_t> targets,
                     std::span<const uint8_t> mask);
int64_t masked_count(std::span<const uint8_t> mask);

// ----- non-differentiable helpers -----

void fill_uniform(Tensor& t, double lo, double hi, uint64_t seed);
Tensor last_rows(const Tensor& x, int64_t n_seq); // detached [n_seq x d] copy of each sequence's last row
double max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);

} // namespace goldfinch
