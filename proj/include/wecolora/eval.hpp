#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "wecolora/distill.hpp"
#include "wecolora/optim.hpp"
#include "wecolora/rng.hpp"
#include "wecolora/vit.hpp"

namespace wecolora {

// Linear classifier over frozen CLS features.
struct ProbeHead {
    Tensor w;  // [num_classes x d]
    Tensor b;  // [num_classes]
};

// Softmax-regression training on fixed feature vectors (also the pixel-space
// oracle used in tests).
inline ProbeHead train_linear_softmax(const std::vector<std::vector<float>>& features,
                                      const std::vector<int>& labels, int num_classes,
                                      int epochs, float lr, std::uint64_t seed) {
    if (features.empty()) throw ConfigError("linear probe: empty dataset");
    if (labels.size() != features.size())
        throw ConfigError("linear probe: label/feature count mismatch");
    const int d = static_cast<int>(features[0].size());
    ProbeHead head;
    head.w = Tensor({num_classes, d});
    head.b = Tensor({num_classes});
    head.w.set_requires_grad(true);
    head.b.set_requires_grad(true);
    std::vector<Tensor> params = {head.w, head.b};
    AdamState opt(params);
    Rng order_rng(seed);

    std::vector<Tensor> rows;
    rows.reserve(features.size());
    for (const auto& f : features) rows.emplace_back(std::vector<int>{1, d}, std::vector<float>(f));

    const std::size_t n = rows.size();
    const std::size_t batch = std::min<std::size_t>(32, n);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (int epoch = 0; epoch < epochs; ++epoch) {
        order_rng.shuffle(idx);
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t end = std::min(n, start + batch);
            Tape tape;
            TapeScope scope(tape);
            Tensor total;
            for (std::size_t s = start; s < end; ++s) {
                Tensor logits = add_rowvec(matmul(rows[idx[s]], transpose(head.w)), head.b);
                Tensor li = cross_entropy_with_logits(logits, labels[idx[s]]);
                total = total.defined() ? add(total, li) : li;
            }
            Tensor loss = scale(total, 1.0f / static_cast<float>(end - start));
            if (!std::isfinite(loss.item())) throw NumericError("linear probe: non-finite loss");
            backward(loss);
            adam_update(opt, lr);
            zero_grads(params);
        }
    }
    head.w.drop_grad();
    head.b.drop_grad();
    head.w.set_requires_grad(false);
    head.b.set_requires_grad(false);
    return head;
}

inline std::vector<float> cls_feature(const ViTModel& m, const Tensor& image) {
    NoTapeScope inference;
    Tensor E = forward_features(m, image);
    return {E.data(), E.data() + E.cols()};
}

// Trains a ProbeHead on CLS features of the frozen backbone; the backbone is
// never touched (features are extracted once, up front).
inline ProbeHead linear_probe(const ViTModel& model, const std::vector<Tensor>& images,
                              const std::vector<int>& labels, int num_classes, int epochs,
                              float lr, std::uint64_t seed) {
    if (images.empty()) throw ConfigError("linear_probe: empty dataset");
    std::vector<std::vector<float>> feats;
    feats.reserve(images.size());
    for (const Tensor& img : images) feats.push_back(cls_feature(model, img));
    return train_linear_softmax(feats, labels, num_classes, epochs, lr, seed);
}

// Fraction of samples whose argmax logit matches the label; ties break to
// the lowest class index.
inline double top1_accuracy(const ProbeHead& head, const ViTModel& model,
                            const std::vector<Tensor>& images, const std::vector<int>& labels) {
    if (images.empty()) throw ConfigError("top1_accuracy: empty evaluation set");
    if (labels.size() != images.size())
        throw ConfigError("top1_accuracy: label/image count mismatch");
    if (head.w.cols() != model.config.dim)
        throw DimensionError("top1_accuracy: head " + shape_str(head.w.shape()) +
                             " for feature dim " + std::to_string(model.config.dim));
    const int C = head.w.rows(), d = head.w.cols();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        std::vector<float> f = cls_feature(model, images[i]);
        std::vector<float> logits(static_cast<std::size_t>(C));
        for (int c = 0; c < C; ++c) {
            double acc = head.b.at(c);
            for (int j = 0; j < d; ++j) acc += static_cast<double>(head.w.at(c, j)) * f[static_cast<std::size_t>(j)];
            logits[static_cast<std::size_t>(c)] = static_cast<float>(acc);
        }
        if (argmax_lowest(logits.data(), C) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(images.size());
}

// Mean over token rows of the cosine between matching rows of a and b.
inline double mean_token_cosine(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.ndim() != 2)
        throw ContractError("mean_token_cosine: shapes " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    const int t = a.rows(), d = a.cols();
    double total = 0.0;
    for (int i = 0; i < t; ++i) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int j = 0; j < d; ++j) {
            const double u = a.at(i, j), v = b.at(i, j);
            dot += u * v;
            na += u * u;
            nb += v * v;
        }
        if (na > 0.0 && nb > 0.0) total += dot / (std::sqrt(na) * std::sqrt(nb));
    }
    return total / t;
}

// Layer-wise feature similarity between student layer l and the teacher
// layer it was copied from (l*r), averaged over tokens and images.
inline std::vector<double> cosine_layer_similarity(const ViTModel& teacher,
                                                   const ViTModel& student, int r,
                                                   const std::vector<Tensor>& images) {
    if (r < 1 || teacher.config.depth / r != student.config.depth)
        throw ContractError("cosine_layer_similarity: student depth " +
                            std::to_string(student.config.depth) + " does not match teacher " +
                            std::to_string(teacher.config.depth) + " at r=" + std::to_string(r));
    if (images.empty()) throw ConfigError("cosine_layer_similarity: no images");
    const int M = student.config.depth;
    std::vector<double> sims(static_cast<std::size_t>(M), 0.0);
    for (const Tensor& img : images) {
        std::vector<Tensor> t_outs = forward_collect_blocks(teacher, img);
        std::vector<Tensor> s_outs = forward_collect_blocks(student, img);
        for (int l = 0; l < M; ++l)
            sims[static_cast<std::size_t>(l)] +=
                mean_token_cosine(s_outs[static_cast<std::size_t>(l)],
                                  t_outs[static_cast<std::size_t>((l + 1) * r - 1)]);
    }
    for (double& s : sims) s /= static_cast<double>(images.size());
    return sims;
}

struct RolloutResult {
    Tensor rolled;                  // [t x t]
    Tensor heatmap;                 // [grid x grid], defined when t > 1
    std::vector<Tensor> per_layer;  // row-stochastic mixed matrix per block
};

// Rollout core over captured per-block attention stacks [H x t x t]: fuse
// heads by elementwise max, zero entries below the top_fraction quantile,
// mix 0.5*A + 0.5*I, row-normalize, then left-multiply across layers.
inline RolloutResult rollout_from_attentions(const std::vector<Tensor>& per_block_attn, int t,
                                             double top_fraction) {
    if (top_fraction <= 0.0 || top_fraction > 1.0)
        throw ConfigError("attention_rollout: top fraction must be in (0, 1]");
    RolloutResult res;
    res.rolled = Tensor::identity(t);
    const std::size_t tt = static_cast<std::size_t>(t) * t;
    for (const Tensor& attn : per_block_attn) {
        const int heads = attn.extent(0);
        Tensor fused({t, t});
        for (int h = 0; h < heads; ++h) {
            const float* src = attn.data() + static_cast<std::size_t>(h) * tt;
            float* dst = fused.data();
            if (h == 0)
                std::copy(src, src + tt, dst);
            else
                for (std::size_t i = 0; i < tt; ++i) dst[i] = std::max(dst[i], src[i]);
        }
        // keep the top ceil(top_fraction * t^2) responses
        const std::size_t keep =
            std::max<std::size_t>(1, static_cast<std::size_t>(
                                         std::ceil(top_fraction * static_cast<double>(tt))));
        std::vector<float> sorted(fused.data(), fused.data() + tt);
        std::nth_element(sorted.begin(), sorted.begin() + (tt - keep), sorted.end());
        const float threshold = sorted[tt - keep];
        for (std::size_t i = 0; i < tt; ++i)
            if (fused.data()[i] < threshold) fused.data()[i] = 0.0f;

        Tensor mixed({t, t});
        for (int i = 0; i < t; ++i) {
            double row_sum = 0.0;
            for (int j = 0; j < t; ++j) {
                const float v = 0.5f * fused.at(i, j) + (i == j ? 0.5f : 0.0f);
                mixed.at(i, j) = v;
                row_sum += v;
            }
            const float inv = static_cast<float>(1.0 / row_sum);
            for (int j = 0; j < t; ++j) mixed.at(i, j) *= inv;
        }
        res.per_layer.push_back(mixed);

        Tensor next({t, t});
        for (int i = 0; i < t; ++i)
            for (int k = 0; k < t; ++k) {
                const float mik = mixed.at(i, k);
                for (int j = 0; j < t; ++j) next.at(i, j) += mik * res.rolled.at(k, j);
            }
        res.rolled = next;
    }
    return res;
}

// Attention Rollout for one image: the rolled CLS row, reshaped onto the
// patch grid, attributes model focus to input patches.
inline RolloutResult attention_rollout(const ViTModel& model, const Tensor& image,
                                       double top_fraction) {
    if (top_fraction <= 0.0 || top_fraction > 1.0)
        throw ConfigError("attention_rollout: top fraction must be in (0, 1]");
    NoTapeScope inference;
    std::vector<Tensor> attn;
    forward_features(model, image, &attn);
    const int t = model.config.tokens();
    RolloutResult res = rollout_from_attentions(attn, t, top_fraction);
    if (t > 1) {
        const int g = model.config.grid();
        res.heatmap = Tensor({g, g});
        for (int i = 0; i < g * g; ++i) res.heatmap.data()[i] = res.rolled.at(0, 1 + i);
    }
    return res;
}

// CSV export of labeled CLS features: header row then one row per image at
// full float precision.
inline void export_embeddings(const ViTModel& model, const std::vector<Tensor>& images,
                              const std::vector<int>& labels, const std::string& path) {
    if (labels.size() != images.size())
        throw ConfigError("export_embeddings: label/image count mismatch");
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw DataError("export_embeddings: cannot open " + path);
    const int d = model.config.dim;
    std::fputs("label", f);
    for (int j = 0; j < d; ++j) std::fprintf(f, ",f%d", j);
    std::fputc('\n', f);
    for (std::size_t i = 0; i < images.size(); ++i) {
        std::vector<float> feat = cls_feature(model, images[i]);
        std::fprintf(f, "%d", labels[i]);
        for (int j = 0; j < d; ++j) std::fprintf(f, ",%.9g", static_cast<double>(feat[static_cast<std::size_t>(j)]));
        std::fputc('\n', f);
    }
    if (std::fclose(f) != 0) throw DataError("export_embeddings: write failed for " + path);
}

}  // namespace wecolora
