#pragma once

#include <functional>

#include "wecolora/tensor.hpp"

namespace wecolora {

// Central-difference gradient oracle: (f(x + eps*e_i) - f(x - eps*e_i)) / 2eps
// per element. f receives a perturbed copy of x and must evaluate the scalar
// from it; nothing here touches the tape, so the estimate is independent of
// the reverse-mode path it is used to check.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double eps) {
    if (eps <= 0.0) throw ContractError("finite_diff_grad: eps must be positive");
    NoTapeScope no_tape;
    Tensor g(x.shape());
    Tensor work = x.clone();
    work.set_requires_grad(false);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float orig = x.data()[i];
        work.data()[i] = static_cast<float>(orig + eps);
        const double fp = f(work);
        work.data()[i] = static_cast<float>(orig - eps);
        const double fm = f(work);
        work.data()[i] = orig;
        g.data()[i] = static_cast<float>((fp - fm) / (2.0 * eps));
    }
    return g;
}

}  // namespace wecolora
