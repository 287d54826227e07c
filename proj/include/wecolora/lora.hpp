#pragma once

#include <optional>

#include "wecolora/rng.hpp"
#include "wecolora/tensor.hpp"

namespace wecolora {

// Trainable rank-k factor pair added to a frozen weight. The effective
// weight is W + B*A; only A and B ever receive gradients.
struct LoRAPair {
    Tensor a;  // [k x in], N(0, 0.02^2) at creation
    Tensor b;  // [out x k], exactly zero at creation
    int rank = 0;

    static LoRAPair create(int out_dim, int in_dim, int k, Rng& rng) {
        if (k < 1 || k > std::min(in_dim, out_dim))
            throw ConfigError("lora rank " + std::to_string(k) + " exceeds min(" +
                              std::to_string(in_dim) + "," + std::to_string(out_dim) + ")");
        LoRAPair p;
        p.rank = k;
        p.a = Tensor({k, in_dim});
        for (std::size_t i = 0; i < p.a.size(); ++i)
            p.a.data()[i] = static_cast<float>(rng.normal(0.02));
        p.b = Tensor({out_dim, k});
        p.a.set_requires_grad(true);
        p.b.set_requires_grad(true);
        return p;
    }
};

// Linear layer y = x*W^T + bias with an optional low-rank adapter path
// (x*A^T)*B^T. W and bias are frozen whenever an adapter is present; the
// low-rank product B*A is never materialized during training.
struct AdaptedLinear {
    Tensor w;     // [out x in]
    Tensor bias;  // [out]
    std::optional<LoRAPair> adapter;

    int out_dim() const { return w.rows(); }
    int in_dim() const { return w.cols(); }

    // x: [t x in] -> [t x out]
    Tensor forward(const Tensor& x) const {
        if (x.ndim() != 2 || x.cols() != in_dim())
            throw DimensionError("linear: input " + shape_str(x.shape()) + " for weight " +
                                 shape_str(w.shape()));
        Tensor y = add_rowvec(matmul(x, transpose(w)), bias);
        if (adapter)
            y = add(y, matmul(matmul(x, transpose(adapter->a)), transpose(adapter->b)));
        return y;
    }
};

}  // namespace wecolora
