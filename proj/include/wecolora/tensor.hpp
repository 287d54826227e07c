#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace wecolora {

// Error taxonomy. The CLI maps these onto exit codes (config 2, data 3,
// numeric 4); dimension/contract errors indicate misuse of an API.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

struct TensorData {
    std::vector<int> shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::unique_ptr<std::vector<float>> grad;  // allocated lazily by backward
};

inline void ensure_grad(TensorData& td) {
    if (!td.grad) td.grad = std::make_unique<std::vector<float>>(td.data.size(), 0.0f);
}

}  // namespace detail

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major float32 tensor. Value-semantics handle over shared storage:
// copying a Tensor aliases the same buffer, clone() deep-copies.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) {
        impl = std::make_shared<detail::TensorData>();
        impl->shape = std::move(shape);
        impl->data.assign(checked_size(impl->shape), 0.0f);
    }

    Tensor(std::vector<int> shape, std::vector<float> values) {
        impl = std::make_shared<detail::TensorData>();
        impl->shape = std::move(shape);
        if (values.size() != checked_size(impl->shape))
            throw DimensionError("tensor init: " + std::to_string(values.size()) +
                                 " values for shape " + shape_str(impl->shape));
        impl->data = std::move(values);
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<int> shape, float v) {
        Tensor t(std::move(shape));
        std::fill(t.impl->data.begin(), t.impl->data.end(), v);
        return t;
    }

    static Tensor ones(std::vector<int> shape) { return full(std::move(shape), 1.0f); }

    static Tensor identity(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) t.impl->data[static_cast<std::size_t>(i) * n + i] = 1.0f;
        return t;
    }

    bool defined() const { return static_cast<bool>(impl); }

    const std::vector<int>& shape() const { return impl->shape; }
    int ndim() const { return static_cast<int>(impl->shape.size()); }
    int extent(int i) const { return impl->shape[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return impl->data.size(); }

    int rows() const {
        require_2d("rows");
        return impl->shape[0];
    }
    int cols() const {
        require_2d("cols");
        return impl->shape[1];
    }

    float* data() { return impl->data.data(); }
    const float* data() const { return impl->data.data(); }
    std::vector<float>& values() { return impl->data; }
    const std::vector<float>& values() const { return impl->data; }

    float& at(int i) { return impl->data[static_cast<std::size_t>(i)]; }
    float at(int i) const { return impl->data[static_cast<std::size_t>(i)]; }
    float& at(int i, int j) { return impl->data[static_cast<std::size_t>(i) * cols() + j]; }
    float at(int i, int j) const { return impl->data[static_cast<std::size_t>(i) * cols() + j]; }

    bool requires_grad() const { return impl->requires_grad; }
    void set_requires_grad(bool b) { impl->requires_grad = b; }

    bool has_grad() const { return impl && impl->grad != nullptr; }
    float* grad_data() { return impl->grad ? impl->grad->data() : nullptr; }
    const float* grad_data() const { return impl->grad ? impl->grad->data() : nullptr; }
    const std::vector<float>& grad() const {
        if (!impl->grad) throw ContractError("grad(): no gradient present");
        return *impl->grad;
    }

    void zero_grad() {
        if (impl->grad) std::fill(impl->grad->begin(), impl->grad->end(), 0.0f);
    }
    void drop_grad() { impl->grad.reset(); }

    float item() const {
        if (size() != 1) throw ContractError("item(): tensor is not a scalar, shape " + shape_str(impl->shape));
        return impl->data[0];
    }

    // Deep copy of values and flags; gradient buffer is not copied.
    Tensor clone() const {
        Tensor t(impl->shape);
        t.impl->data = impl->data;
        t.impl->requires_grad = impl->requires_grad;
        return t;
    }

    bool same_storage(const Tensor& o) const { return impl == o.impl; }

    std::shared_ptr<detail::TensorData> impl;

private:
    static std::size_t checked_size(const std::vector<int>& shape) {
        if (shape.empty()) throw DimensionError("tensor init: empty shape");
        std::size_t n = 1;
        for (int e : shape) {
            if (e <= 0) throw DimensionError("tensor init: non-positive extent in " + shape_str(shape));
            n *= static_cast<std::size_t>(e);
        }
        return n;
    }

    void require_2d(const char* what) const {
        if (impl->shape.size() != 2)
            throw DimensionError(std::string(what) + ": tensor is not 2-D, shape " + shape_str(impl->shape));
    }
};

// Reverse-mode tape: an ordered record of backward closures. One
// forward/backward pass owns a tape at a time; replay visits every recorded
// op exactly once, in reverse, accumulating (summing) into input grads.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void replay_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    static Tape* active() { return active_; }

private:
    std::vector<std::function<void()>> nodes_;
    friend class TapeScope;
    friend class NoTapeScope;
    inline static thread_local Tape* active_ = nullptr;
};

// Activates a tape for the current thread while in scope.
class TapeScope {
public:
    explicit TapeScope(Tape& t) : prev_(Tape::active_) { Tape::active_ = &t; }
    ~TapeScope() { Tape::active_ = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// Suppresses recording while in scope (inference inside a training step).
class NoTapeScope {
public:
    NoTapeScope() : prev_(Tape::active_) { Tape::active_ = nullptr; }
    ~NoTapeScope() { Tape::active_ = prev_; }

private:
    Tape* prev_;
};

namespace detail {

inline Tape* recording_for(std::initializer_list<const Tensor*> inputs) {
    Tape* tp = Tape::active();
    if (!tp) return nullptr;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return tp;
    return nullptr;
}

}  // namespace detail

// Seeds d(loss)/d(loss) = 1 and replays the active tape in reverse. Every
// requires_grad tensor reachable from the loss ends up with a populated
// grad; frozen tensors never get one.
inline void backward(const Tensor& loss) {
    Tape* tp = Tape::active();
    if (!tp) throw ContractError("backward: no active tape");
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, shape " + shape_str(loss.shape()));
    detail::ensure_grad(*loss.impl);
    (*loss.impl->grad)[0] = 1.0f;
    tp->replay_backward();
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const int m = a.rows(), p = a.cols(), n = b.cols();
    Tensor out({m, n});
    const float* A = a.data();
    const float* B = b.data();
    float* O = out.data();
    for (int i = 0; i < m; ++i) {
        float* orow = O + static_cast<std::size_t>(i) * n;
        for (int k = 0; k < p; ++k) {
            const float aik = A[static_cast<std::size_t>(i) * p + k];
            const float* brow = B + static_cast<std::size_t>(k) * n;
            for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    if (Tape* tp = detail::recording_for({&a, &b})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, bi = b.impl, oi = out.impl, m, p, n] {
            if (!oi->grad) return;
            const float* G = oi->grad->data();
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                float* dA = ai->grad->data();
                const float* B = bi->data.data();
                // dA = G * B^T
                for (int i = 0; i < m; ++i)
                    for (int k = 0; k < p; ++k) {
                        float acc = 0.0f;
                        const float* grow = G + static_cast<std::size_t>(i) * n;
                        const float* brow = B + static_cast<std::size_t>(k) * n;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        dA[static_cast<std::size_t>(i) * p + k] += acc;
                    }
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                float* dB = bi->grad->data();
                const float* A = ai->data.data();
                // dB = A^T * G
                for (int i = 0; i < m; ++i)
                    for (int k = 0; k < p; ++k) {
                        const float aik = A[static_cast<std::size_t>(i) * p + k];
                        const float* grow = G + static_cast<std::size_t>(i) * n;
                        float* drow = dB + static_cast<std::size_t>(k) * n;
                        for (int j = 0; j < n; ++j) drow[j] += aik * grow[j];
                    }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2)
        throw DimensionError("transpose: tensor is not 2-D, shape " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols();
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out.at(j, i) = a.at(i, j);
    if (Tape* tp = detail::recording_for({&a})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, oi = out.impl, m, n] {
            if (!oi->grad || !ai->requires_grad) return;
            detail::ensure_grad(*ai);
            const float* G = oi->grad->data();
            float* dA = ai->grad->data();
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i)
                    dA[static_cast<std::size_t>(i) * n + j] += G[static_cast<std::size_t>(j) * m + i];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
    Tensor out(std::move(new_shape), a.values());
    if (out.size() != a.size())
        throw DimensionError("reshape: size mismatch " + shape_str(a.shape()) + " -> " +
                             shape_str(out.shape()));
    if (Tape* tp = detail::recording_for({&a})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, oi = out.impl] {
            if (!oi->grad || !ai->requires_grad) return;
            detail::ensure_grad(*ai);
            const float* G = oi->grad->data();
            float* dA = ai->grad->data();
            for (std::size_t i = 0; i < ai->data.size(); ++i) dA[i] += G[i];
        });
    }
    return out;
}

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const float* A = a.data();
    const float* B = b.data();
    float* O = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) O[i] = A[i] + B[i];
    if (Tape* tp = detail::recording_for({&a, &b})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, bi = b.impl, oi = out.impl] {
            if (!oi->grad) return;
            const float* G = oi->grad->data();
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                float* dA = ai->grad->data();
                for (std::size_t i = 0; i < ai->data.size(); ++i) dA[i] += G[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                float* dB = bi->grad->data();
                for (std::size_t i = 0; i < bi->data.size(); ++i) dB[i] += G[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const float* A = a.data();
    const float* B = b.data();
    float* O = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) O[i] = A[i] - B[i];
    if (Tape* tp = detail::recording_for({&a, &b})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, bi = b.impl, oi = out.impl] {
            if (!oi->grad) return;
            const float* G = oi->grad->data();
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                float* dA = ai->grad->data();
                for (std::size_t i = 0; i < ai->data.size(); ++i) dA[i] += G[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                float* dB = bi->grad->data();
                for (std::size_t i = 0; i < bi->data.size(); ++i) dB[i] -= G[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const float* A = a.data();
    const float* B = b.data();
    float* O = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) O[i] = A[i] * B[i];
    if (Tape* tp = detail::recording_for({&a, &b})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, bi = b.impl, oi = out.impl] {
            if (!oi->grad) return;
            const float* G = oi->grad->data();
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                float* dA = ai->grad->data();
                const float* B = bi->data.data();
                for (std::size_t i = 0; i < ai->data.size(); ++i) dA[i] += G[i] * B[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                float* dB = bi->grad->data();
                const float* A = ai->data.data();
                for (std::size_t i = 0; i < bi->data.size(); ++i) dB[i] += G[i] * A[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, float s) {
    Tensor out(a.shape());
    const float* A = a.data();
    float* O = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) O[i] = A[i] * s;
    if (Tape* tp = detail::recording_for({&a})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, oi = out.impl, s] {
            if (!oi->grad || !ai->requires_grad) return;
            detail::ensure_grad(*ai);
            const float* G = oi->grad->data();
            float* dA = ai->grad->data();
            for (std::size_t i = 0; i < ai->data.size(); ++i) dA[i] += s * G[i];
        });
    }
    return out;
}

// m[t x d] + v[d], broadcast over the leading token axis (bias add)
inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    if (m.ndim() != 2 || v.ndim() != 1 || m.cols() != v.extent(0))
        throw DimensionError("add_rowvec: shapes " + shape_str(m.shape()) + " and " +
                             shape_str(v.shape()));
    const int t = m.rows(), d = m.cols();
    Tensor out({t, d});
    const float* M = m.data();
    const float* V = v.data();
    float* O = out.data();
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j)
            O[static_cast<std::size_t>(i) * d + j] = M[static_cast<std::size_t>(i) * d + j] + V[j];
    if (Tape* tp = detail::recording_for({&m, &v})) {
        out.set_requires_grad(true);
        tp->record([mi = m.impl, vi = v.impl, oi = out.impl, t, d] {
            if (!oi->grad) return;
            const float* G = oi->grad->data();
            if (mi->requires_grad) {
                detail::ensure_grad(*mi);
                float* dM = mi->grad->data();
                for (std::size_t i = 0; i < mi->data.size(); ++i) dM[i] += G[i];
            }
            if (vi->requires_grad) {
                detail::ensure_grad(*vi);
                float* dV = vi->grad->data();
                for (int i = 0; i < t; ++i)
                    for (int j = 0; j < d; ++j)
                        dV[j] += G[static_cast<std::size_t>(i) * d + j];
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& a, int r0, int nrows) {
    if (a.ndim() != 2 || r0 < 0 || nrows < 1 || r0 + nrows > a.rows())
        throw DimensionError("slice_rows: rows [" + std::to_string(r0) + "," +
                             std::to_string(r0 + nrows) + ") of " + shape_str(a.shape()));
    const int n = a.cols();
    Tensor out({nrows, n});
    std::memcpy(out.data(), a.data() + static_cast<std::size_t>(r0) * n,
                static_cast<std::size_t>(nrows) * n * sizeof(float));
    if (Tape* tp = detail::recording_for({&a})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, oi = out.impl, r0, nrows, n] {
            if (!oi->grad || !ai->requires_grad) return;
            detail::ensure_grad(*ai);
            const float* G = oi->grad->data();
            float* dA = ai->grad->data() + static_cast<std::size_t>(r0) * n;
            for (std::size_t i = 0; i < static_cast<std::size_t>(nrows) * n; ++i) dA[i] += G[i];
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int ncols) {
    if (a.ndim() != 2 || c0 < 0 || ncols < 1 || c0 + ncols > a.cols())
        throw DimensionError("slice_cols: cols [" + std::to_string(c0) + "," +
                             std::to_string(c0 + ncols) + ") of " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols();
    Tensor out({m, ncols});
    for (int i = 0; i < m; ++i)
        std::memcpy(out.data() + static_cast<std::size_t>(i) * ncols,
                    a.data() + static_cast<std::size_t>(i) * n + c0,
                    static_cast<std::size_t>(ncols) * sizeof(float));
    if (Tape* tp = detail::recording_for({&a})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, oi = out.impl, c0, ncols, m, n] {
            if (!oi->grad || !ai->requires_grad) return;
            detail::ensure_grad(*ai);
            const float* G = oi->grad->data();
            float* dA = ai->grad->data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < ncols; ++j)
                    dA[static_cast<std::size_t>(i) * n + c0 + j] +=
                        G[static_cast<std::size_t>(i) * ncols + j];
        });
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no parts");
    const int n = parts[0].cols();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != 2 || p.cols() != n)
            throw DimensionError("concat_rows: column mismatch " + shape_str(p.shape()));
        total += p.rows();
    }
    Tensor out({total, n});
    std::size_t off = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        std::memcpy(out.data() + off, p.data(), p.size() * sizeof(float));
        off += p.size();
        any_grad = any_grad || p.requires_grad();
    }
    if (Tape* tp = Tape::active(); tp && any_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<detail::TensorData>> srcs;
        for (const Tensor& p : parts) srcs.push_back(p.impl);
        tp->record([srcs, oi = out.impl] {
            if (!oi->grad) return;
            const float* G = oi->grad->data();
            std::size_t off = 0;
            for (const auto& s : srcs) {
                if (s->requires_grad) {
                    detail::ensure_grad(*s);
                    float* dS = s->grad->data();
                    for (std::size_t i = 0; i < s->data.size(); ++i) dS[i] += G[off + i];
                }
                off += s->data.size();
            }
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const int m = parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != 2 || p.rows() != m)
            throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
        total += p.cols();
    }
    Tensor out({m, total});
    bool any_grad = false;
    int c0 = 0;
    for (const Tensor& p : parts) {
        const int w = p.cols();
        for (int i = 0; i < m; ++i)
            std::memcpy(out.data() + static_cast<std::size_t>(i) * total + c0,
                        p.data() + static_cast<std::size_t>(i) * w,
                        static_cast<std::size_t>(w) * sizeof(float));
        c0 += w;
        any_grad = any_grad || p.requires_grad();
    }
    if (Tape* tp = Tape::active(); tp && any_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<detail::TensorData>> srcs;
        for (const Tensor& p : parts) srcs.push_back(p.impl);
        tp->record([srcs, oi = out.impl, m, total] {
            if (!oi->grad) return;
            const float* G = oi->grad->data();
            int c0 = 0;
            for (const auto& s : srcs) {
                const int w = static_cast<int>(s->data.size()) / m;
                if (s->requires_grad) {
                    detail::ensure_grad(*s);
                    float* dS = s->grad->data();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            dS[static_cast<std::size_t>(i) * w + j] +=
                                G[static_cast<std::size_t>(i) * total + c0 + j];
                }
                c0 += w;
            }
        });
    }
    return out;
}

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    if (Tape* tp = detail::recording_for({&a})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, oi = out.impl] {
            if (!oi->grad || !ai->requires_grad) return;
            detail::ensure_grad(*ai);
            const float g = (*oi->grad)[0];
            float* dA = ai->grad->data();
            for (std::size_t i = 0; i < ai->data.size(); ++i) dA[i] += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    const float inv_n = 1.0f / static_cast<float>(a.size());
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(a.size())));
    if (Tape* tp = detail::recording_for({&a})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, oi = out.impl, inv_n] {
            if (!oi->grad || !ai->requires_grad) return;
            detail::ensure_grad(*ai);
            const float g = (*oi->grad)[0] * inv_n;
            float* dA = ai->grad->data();
            for (std::size_t i = 0; i < ai->data.size(); ++i) dA[i] += g;
        });
    }
    return out;
}

// Row-wise softmax over the last dimension, stabilized by max subtraction.
inline Tensor softmax_lastdim(const Tensor& a) {
    const int n = a.extent(a.ndim() - 1);
    const std::size_t rows = a.size() / static_cast<std::size_t>(n);
    Tensor out(a.shape());
    const float* A = a.data();
    float* O = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* x = A + r * n;
        float* y = O + r * n;
        float mx = x[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            denom += y[j];
        }
        const float inv = static_cast<float>(1.0 / denom);
        for (int j = 0; j < n; ++j) y[j] *= inv;
    }
    if (Tape* tp = detail::recording_for({&a})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, oi = out.impl, rows, n] {
            if (!oi->grad || !ai->requires_grad) return;
            detail::ensure_grad(*ai);
            const float* G = oi->grad->data();
            const float* Y = oi->data.data();
            float* dA = ai->grad->data();
            // dx_j = (g_j - sum_k g_k y_k) * y_j per row
            for (std::size_t r = 0; r < rows; ++r) {
                const float* g = G + r * n;
                const float* y = Y + r * n;
                float* dx = dA + r * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += static_cast<double>(g[j]) * y[j];
                const float s = static_cast<float>(dot);
                for (int j = 0; j < n; ++j) dx[j] += (g[j] - s) * y[j];
            }
        });
    }
    return out;
}

inline constexpr float kLayerNormEps = 1e-6f;

// Per-vector normalization over the last dimension with biased variance,
// then affine gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         float eps = kLayerNormEps) {
    const int d = x.extent(x.ndim() - 1);
    if (gamma.ndim() != 1 || gamma.extent(0) != d || beta.ndim() != 1 || beta.extent(0) != d)
        throw DimensionError("layer_norm: params " + shape_str(gamma.shape()) + "/" +
                             shape_str(beta.shape()) + " for input " + shape_str(x.shape()));
    const std::size_t rows = x.size() / static_cast<std::size_t>(d);
    Tensor out(x.shape());
    const float* X = x.data();
    const float* Gm = gamma.data();
    const float* Bt = beta.data();
    float* O = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = X + r * d;
        float* yr = O + r * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xr[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xr[j] - mu;
            var += c * c;
        }
        var /= d;
        const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
        const float mu_f = static_cast<float>(mu);
        for (int j = 0; j < d; ++j) yr[j] = (xr[j] - mu_f) * inv * Gm[j] + Bt[j];
    }
    if (Tape* tp = detail::recording_for({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        tp->record([xi = x.impl, gi = gamma.impl, bi = beta.impl, oi = out.impl, rows, d, eps] {
            if (!oi->grad) return;
            const float* G = oi->grad->data();
            const float* X = xi->data.data();
            const float* Gm = gi->data.data();
            float* dX = nullptr;
            float* dG = nullptr;
            float* dB = nullptr;
            if (xi->requires_grad) {
                detail::ensure_grad(*xi);
                dX = xi->grad->data();
            }
            if (gi->requires_grad) {
                detail::ensure_grad(*gi);
                dG = gi->grad->data();
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                dB = bi->grad->data();
            }
            std::vector<float> xhat(static_cast<std::size_t>(d));
            for (std::size_t r = 0; r < rows; ++r) {
                const float* xr = X + r * d;
                const float* g = G + r * d;
                double mu = 0.0;
                for (int j = 0; j < d; ++j) mu += xr[j];
                mu /= d;
                double var = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double c = xr[j] - mu;
                    var += c * c;
                }
                var /= d;
                const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
                for (int j = 0; j < d; ++j)
                    xhat[static_cast<std::size_t>(j)] = (xr[j] - static_cast<float>(mu)) * inv;
                if (dB)
                    for (int j = 0; j < d; ++j) dB[j] += g[j];
                if (dG)
                    for (int j = 0; j < d; ++j) dG[j] += g[j] * xhat[static_cast<std::size_t>(j)];
                if (dX) {
                    // dx = (gy - mean(gy) - xhat * mean(gy*xhat)) * inv
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double gy = static_cast<double>(g[j]) * Gm[j];
                        m1 += gy;
                        m2 += gy * xhat[static_cast<std::size_t>(j)];
                    }
                    m1 /= d;
                    m2 /= d;
                    float* dx = dX + r * d;
                    for (int j = 0; j < d; ++j) {
                        const float gy = g[j] * Gm[j];
                        dx[j] += (gy - static_cast<float>(m1) -
                                  xhat[static_cast<std::size_t>(j)] * static_cast<float>(m2)) *
                                 inv;
                    }
                }
            }
        });
    }
    return out;
}

namespace detail {

inline constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
inline constexpr float kGeluA = 0.044715f;

inline float gelu_value(float x) {
    const float u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

inline float gelu_derivative(float x) {
    const float u = kGeluC * (x + kGeluA * x * x * x);
    const float th = std::tanh(u);
    const float sech2 = 1.0f - th * th;
    return 0.5f * (1.0f + th) + 0.5f * x * sech2 * kGeluC * (1.0f + 3.0f * kGeluA * x * x);
}

}  // namespace detail

// tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
inline Tensor gelu(const Tensor& a) {
    Tensor out(a.shape());
    const float* A = a.data();
    float* O = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) O[i] = detail::gelu_value(A[i]);
    if (Tape* tp = detail::recording_for({&a})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, oi = out.impl] {
            if (!oi->grad || !ai->requires_grad) return;
            detail::ensure_grad(*ai);
            const float* G = oi->grad->data();
            const float* A = ai->data.data();
            float* dA = ai->grad->data();
            for (std::size_t i = 0; i < ai->data.size(); ++i)
                dA[i] += G[i] * detail::gelu_derivative(A[i]);
        });
    }
    return out;
}

// Mean absolute difference over all elements; subgradient of |.| at 0 is 0.
inline Tensor l1_mean_loss(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "l1_mean_loss");
    const float* A = a.data();
    const float* B = b.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::fabs(static_cast<double>(A[i]) - B[i]);
    const float inv_n = 1.0f / static_cast<float>(a.size());
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(a.size())));
    if (Tape* tp = detail::recording_for({&a, &b})) {
        out.set_requires_grad(true);
        tp->record([ai = a.impl, bi = b.impl, oi = out.impl, inv_n] {
            if (!oi->grad) return;
            const float g = (*oi->grad)[0] * inv_n;
            const float* A = ai->data.data();
            const float* B = bi->data.data();
            float* dA = nullptr;
            float* dB = nullptr;
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                dA = ai->grad->data();
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                dB = bi->grad->data();
            }
            for (std::size_t i = 0; i < ai->data.size(); ++i) {
                const float diff = A[i] - B[i];
                const float s = (diff > 0.0f) ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f);
                if (dA) dA[i] += g * s;
                if (dB) dB[i] -= g * s;
            }
        });
    }
    return out;
}

// Numerically fused softmax cross-entropy on a logits row; backward is
// softmax(z) - onehot(label).
inline Tensor cross_entropy_with_logits(const Tensor& logits, int label) {
    const std::size_t n = logits.size();
    if (label < 0 || static_cast<std::size_t>(label) >= n)
        throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range");
    const float* Z = logits.data();
    float mx = Z[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, Z[j]);
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += std::exp(static_cast<double>(Z[j]) - mx);
    const double lse = mx + std::log(acc);
    Tensor out = Tensor::scalar(static_cast<float>(lse - Z[static_cast<std::size_t>(label)]));
    if (Tape* tp = detail::recording_for({&logits})) {
        out.set_requires_grad(true);
        tp->record([zi = logits.impl, oi = out.impl, label, lse] {
            if (!oi->grad || !zi->requires_grad) return;
            detail::ensure_grad(*zi);
            const float g = (*oi->grad)[0];
            const float* Z = zi->data.data();
            float* dZ = zi->grad->data();
            for (std::size_t j = 0; j < zi->data.size(); ++j) {
                float p = static_cast<float>(std::exp(static_cast<double>(Z[j]) - lse));
                if (j == static_cast<std::size_t>(label)) p -= 1.0f;
                dZ[j] += g * p;
            }
        });
    }
    return out;
}

}  // namespace wecolora
