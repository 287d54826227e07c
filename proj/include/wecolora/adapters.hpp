#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wecolora/vit.hpp"

namespace wecolora {

// Partition of a model's parameters into frozen (theta_S) and trainable
// (theta_S+), by checkpoint name.
struct ParamSet {
    std::vector<std::pair<std::string, Tensor>> frozen;
    std::vector<std::pair<std::string, Tensor>> trainable;

    std::vector<Tensor> trainable_tensors() const {
        std::vector<Tensor> out;
        out.reserve(trainable.size());
        for (const auto& [name, t] : trainable) out.push_back(t);
        return out;
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : trainable) n += t.size();
        return n;
    }
};

namespace detail {

// Rebuilds the frozen/trainable split from requires_grad flags, in
// canonical parameter order.
inline ParamSet partition_params(ViTModel& m) {
    ParamSet ps;
    for_each_param(m, [&](const std::string& name, Tensor& t) {
        (t.requires_grad() ? ps.trainable : ps.frozen).emplace_back(name, t);
    });
    return ps;
}

inline void attach_to(ViTModel& m, int k, std::uint64_t seed, bool enhanced) {
    if (m.has_adapters()) throw ContractError("attach: adapters already present");
    Rng rng(seed);
    set_requires_grad_all(m, false);
    for (BlockWeights& b : m.blocks) {
        auto attach_one = [&](AdaptedLinear& l) {
            l.adapter = LoRAPair::create(l.out_dim(), l.in_dim(), k, rng);
            l.w.set_requires_grad(false);
        };
        attach_one(b.wq);
        if (enhanced) {
            attach_one(b.wk);
        }
        attach_one(b.wv);
        if (enhanced) {
            attach_one(b.wo);
            attach_one(b.wf1);
            attach_one(b.wf2);
        }
    }
}

}  // namespace detail

// Attaches one LoRA pair to every linear component of every block (Wq, Wk,
// Wv, Wo, Wf1, Wf2); base weights, embeddings and norms stay frozen.
inline ParamSet attach_enhanced(ViTModel& m, int k, std::uint64_t seed) {
    detail::attach_to(m, k, seed, /*enhanced=*/true);
    return detail::partition_params(m);
}

// Ablation baseline: adapters on the query and value projections only.
inline ParamSet attach_qv_only(ViTModel& m, int k, std::uint64_t seed) {
    detail::attach_to(m, k, seed, /*enhanced=*/false);
    return detail::partition_params(m);
}

// Folds every adapter into its base weight (W <- W + B*A) and removes it,
// returning inference cost to the base model's.
inline void merge_adapters(ViTModel& m) {
    if (!m.has_adapters()) throw ContractError("merge_adapters: no adapters present");
    for (BlockWeights& blk : m.blocks) {
        auto merge_one = [](AdaptedLinear& l) {
            if (!l.adapter) return;
            const Tensor& a = l.adapter->a;  // [k x in]
            const Tensor& b = l.adapter->b;  // [out x k]
            const int out_dim = l.w.rows(), in_dim = l.w.cols(), k = l.adapter->rank;
            float* W = l.w.data();
            for (int o = 0; o < out_dim; ++o)
                for (int kk = 0; kk < k; ++kk) {
                    const float bok = b.at(o, kk);
                    for (int i = 0; i < in_dim; ++i)
                        W[static_cast<std::size_t>(o) * in_dim + i] += bok * a.at(kk, i);
                }
            l.adapter.reset();
        };
        merge_one(blk.wq);
        merge_one(blk.wk);
        merge_one(blk.wv);
        merge_one(blk.wo);
        merge_one(blk.wf1);
        merge_one(blk.wf2);
    }
    set_requires_grad_all(m, false);
}

// Closed-form trainable-parameter counts. Enhanced attachment adds
// k*d*(10+2m) parameters per block: 2kd for each of the four attention
// projections plus kd(1+m) for each FFN matrix.
inline std::int64_t count_trainable_enhanced(int d, int mlp_ratio, int k, int depth) {
    return static_cast<std::int64_t>(depth) * k * d * (10 + 2 * mlp_ratio);
}

inline std::int64_t count_trainable_qv(int d, int k, int depth) {
    return static_cast<std::int64_t>(depth) * 2 * 2 * k * d;
}

// Same counts by enumerating the adapted matrices and summing k*in + out*k,
// without building a model.
inline std::int64_t enumerate_trainable(int d, int mlp_ratio, int k, int depth, bool enhanced) {
    std::vector<std::pair<int, int>> mats;  // (out, in)
    if (enhanced) {
        mats = {{d, d}, {d, d}, {d, d}, {d, d}, {mlp_ratio * d, d}, {d, mlp_ratio * d}};
    } else {
        mats = {{d, d}, {d, d}};  // Wq, Wv
    }
    std::int64_t per_block = 0;
    for (auto [out, in] : mats)
        per_block += static_cast<std::int64_t>(k) * in + static_cast<std::int64_t>(out) * k;
    return per_block * depth;
}

}  // namespace wecolora
