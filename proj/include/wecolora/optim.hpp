#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "wecolora/tensor.hpp"

namespace wecolora {

// Adam with bias correction, no weight decay. Moment buffers parallel the
// fixed parameter list; the micro-batch counter supports gradient
// accumulation (mean-of-means: summed grads are divided by the number of
// accumulated micro-batches before the update).
struct AdamState {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    std::int64_t step = 0;
    int accumulated = 0;

    std::vector<Tensor> params;
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;

    explicit AdamState(std::vector<Tensor> parameters) : params(std::move(parameters)) {
        m.reserve(params.size());
        v.reserve(params.size());
        for (const Tensor& p : params) {
            m.emplace_back(p.size(), 0.0f);
            v.emplace_back(p.size(), 0.0f);
        }
    }
};

inline void adam_update(AdamState& st, float eta) {
    st.step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(st.beta1), static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(st.beta2), static_cast<double>(st.step));
    for (std::size_t p = 0; p < st.params.size(); ++p) {
        Tensor& param = st.params[p];
        const float* g = param.grad_data();  // missing grad == zero gradient
        float* w = param.data();
        float* mp = st.m[p].data();
        float* vp = st.v[p].data();
        for (std::size_t i = 0; i < param.size(); ++i) {
            const float gi = g ? g[i] : 0.0f;
            mp[i] = st.beta1 * mp[i] + (1.0f - st.beta1) * gi;
            vp[i] = st.beta2 * vp[i] + (1.0f - st.beta2) * gi * gi;
            const float mhat = mp[i] / static_cast<float>(bc1);
            const float vhat = vp[i] / static_cast<float>(bc2);
            w[i] -= eta * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

inline void zero_grads(std::vector<Tensor>& params) {
    for (Tensor& p : params) p.zero_grad();
}

inline void scale_grads(std::vector<Tensor>& params, float s) {
    for (Tensor& p : params)
        if (float* g = p.grad_data())
            for (std::size_t i = 0; i < p.size(); ++i) g[i] *= s;
}

}  // namespace wecolora
