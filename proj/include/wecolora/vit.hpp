#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "wecolora/lora.hpp"
#include "wecolora/optim.hpp"
#include "wecolora/rng.hpp"
#include "wecolora/tensor.hpp"

namespace wecolora {

struct ViTConfig {
    int image_size = 32;
    int patch_size = 8;
    int channels = 1;
    int dim = 32;        // embedding width d
    int depth = 4;       // block count (L for a teacher, M for a student)
    int heads = 4;
    int mlp_ratio = 4;   // FFN hidden = mlp_ratio * dim
    int num_classes = 0; // 0 = no classifier head

    int grid() const { return image_size / patch_size; }
    int tokens() const { return grid() * grid() + 1; }  // + CLS
    int head_dim() const { return dim / heads; }
    int patch_dim() const { return channels * patch_size * patch_size; }

    void validate() const {
        if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0)
            throw ConfigError("image_size " + std::to_string(image_size) +
                              " not divisible by patch_size " + std::to_string(patch_size));
        if (channels < 1) throw ConfigError("channels must be positive");
        if (dim < 1 || heads < 1 || dim % heads != 0)
            throw ConfigError("dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(heads));
        if (depth < 0) throw ConfigError("negative depth");
        if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be positive");
        if (num_classes < 0) throw ConfigError("negative num_classes");
    }

    bool operator==(const ViTConfig&) const = default;
};

struct BlockWeights {
    Tensor ln1_gamma, ln1_beta;
    AdaptedLinear wq, wk, wv, wo;
    Tensor ln2_gamma, ln2_beta;
    AdaptedLinear wf1, wf2;
};

struct ViTModel {
    ViTConfig config;
    Tensor patch_w;   // [d x channels*patch^2]
    Tensor patch_b;   // [d]
    Tensor cls_token; // [1 x d]
    Tensor pos_embed; // [tokens x d]
    std::vector<BlockWeights> blocks;
    Tensor final_gamma, final_beta;
    Tensor head_w, head_b;  // defined only when num_classes > 0

    bool has_head() const { return head_w.defined(); }

    bool has_adapters() const {
        for (const BlockWeights& b : blocks)
            if (b.wq.adapter || b.wk.adapter || b.wv.adapter || b.wo.adapter ||
                b.wf1.adapter || b.wf2.adapter)
                return true;
        return false;
    }

    ViTModel clone() const {
        ViTModel m;
        m.config = config;
        m.patch_w = patch_w.clone();
        m.patch_b = patch_b.clone();
        m.cls_token = cls_token.clone();
        m.pos_embed = pos_embed.clone();
        for (const BlockWeights& b : blocks) {
            BlockWeights c;
            c.ln1_gamma = b.ln1_gamma.clone();
            c.ln1_beta = b.ln1_beta.clone();
            auto copy_linear = [](const AdaptedLinear& l) {
                AdaptedLinear out;
                out.w = l.w.clone();
                out.bias = l.bias.clone();
                if (l.adapter) {
                    LoRAPair p;
                    p.a = l.adapter->a.clone();
                    p.b = l.adapter->b.clone();
                    p.rank = l.adapter->rank;
                    out.adapter = std::move(p);
                }
                return out;
            };
            c.wq = copy_linear(b.wq);
            c.wk = copy_linear(b.wk);
            c.wv = copy_linear(b.wv);
            c.wo = copy_linear(b.wo);
            c.ln2_gamma = b.ln2_gamma.clone();
            c.ln2_beta = b.ln2_beta.clone();
            c.wf1 = copy_linear(b.wf1);
            c.wf2 = copy_linear(b.wf2);
            m.blocks.push_back(std::move(c));
        }
        m.final_gamma = final_gamma.clone();
        m.final_beta = final_beta.clone();
        if (head_w.defined()) {
            m.head_w = head_w.clone();
            m.head_b = head_b.clone();
        }
        return m;
    }
};

// Visits every parameter in canonical checkpoint order. Adapter tensors are
// visited right after the layer they extend, as <layer>.lora_a / .lora_b.
inline void for_each_param(ViTModel& m,
                           const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("patch_embed.w", m.patch_w);
    fn("patch_embed.b", m.patch_b);
    fn("cls_token", m.cls_token);
    fn("pos_embed", m.pos_embed);
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        BlockWeights& b = m.blocks[i];
        const std::string p = "block." + std::to_string(i) + ".";
        fn(p + "ln1.gamma", b.ln1_gamma);
        fn(p + "ln1.beta", b.ln1_beta);
        auto visit_linear = [&](const std::string& name, AdaptedLinear& l) {
            fn(name, l.w);
            fn(name + ".b", l.bias);
            if (l.adapter) {
                fn(name + ".lora_a", l.adapter->a);
                fn(name + ".lora_b", l.adapter->b);
            }
        };
        visit_linear(p + "attn.wq", b.wq);
        visit_linear(p + "attn.wk", b.wk);
        visit_linear(p + "attn.wv", b.wv);
        visit_linear(p + "attn.wo", b.wo);
        fn(p + "ln2.gamma", b.ln2_gamma);
        fn(p + "ln2.beta", b.ln2_beta);
        visit_linear(p + "ffn.wf1", b.wf1);
        visit_linear(p + "ffn.wf2", b.wf2);
    }
    fn("final_norm.gamma", m.final_gamma);
    fn("final_norm.beta", m.final_beta);
    if (m.head_w.defined()) {
        fn("head.w", m.head_w);
        fn("head.b", m.head_b);
    }
}

inline void set_requires_grad_all(ViTModel& m, bool value) {
    for_each_param(m, [value](const std::string&, Tensor& t) { t.set_requires_grad(value); });
}

// Weights ~ N(0, 0.02^2) truncated at +-2 sigma, biases zero, norm scales
// one. Deterministic in the seed.
inline ViTModel init_random(const ViTConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    auto fill_trunc = [&rng](Tensor& t) {
        for (std::size_t i = 0; i < t.size(); ++i)
            t.data()[i] = static_cast<float>(rng.truncated_normal(0.02));
    };
    ViTModel m;
    m.config = config;
    const int d = config.dim;
    m.patch_w = Tensor({d, config.patch_dim()});
    fill_trunc(m.patch_w);
    m.patch_b = Tensor({d});
    m.cls_token = Tensor({1, d});
    fill_trunc(m.cls_token);
    m.pos_embed = Tensor({config.tokens(), d});
    fill_trunc(m.pos_embed);
    auto make_linear = [&](int out_dim, int in_dim) {
        AdaptedLinear l;
        l.w = Tensor({out_dim, in_dim});
        fill_trunc(l.w);
        l.bias = Tensor({out_dim});
        return l;
    };
    for (int i = 0; i < config.depth; ++i) {
        BlockWeights b;
        b.ln1_gamma = Tensor::ones({d});
        b.ln1_beta = Tensor({d});
        b.wq = make_linear(d, d);
        b.wk = make_linear(d, d);
        b.wv = make_linear(d, d);
        b.wo = make_linear(d, d);
        b.ln2_gamma = Tensor::ones({d});
        b.ln2_beta = Tensor({d});
        b.wf1 = make_linear(config.mlp_ratio * d, d);
        b.wf2 = make_linear(d, config.mlp_ratio * d);
        m.blocks.push_back(std::move(b));
    }
    m.final_gamma = Tensor::ones({d});
    m.final_beta = Tensor({d});
    if (config.num_classes > 0) {
        m.head_w = Tensor({config.num_classes, d});
        fill_trunc(m.head_w);
        m.head_b = Tensor({config.num_classes});
    }
    return m;
}

// Flattens non-overlapping patches of image [channels x H x W] into the
// rows of a [num_patches x channels*patch^2] matrix.
inline Tensor extract_patches(const ViTConfig& config, const Tensor& image) {
    if (image.ndim() != 3 || image.extent(0) != config.channels ||
        image.extent(1) != config.image_size || image.extent(2) != config.image_size)
        throw DimensionError("patch_embed: image " + shape_str(image.shape()) +
                             ", expected [" + std::to_string(config.channels) + "x" +
                             std::to_string(config.image_size) + "x" +
                             std::to_string(config.image_size) + "]");
    const int g = config.grid(), ps = config.patch_size, s = config.image_size;
    const std::size_t pd = static_cast<std::size_t>(config.patch_dim());
    Tensor x({g * g, config.patch_dim()});
    float* X = x.data();
    const float* I = image.data();
    std::size_t row = 0;
    for (int py = 0; py < g; ++py)
        for (int px = 0; px < g; ++px) {
            std::size_t col = 0;
            for (int c = 0; c < config.channels; ++c)
                for (int y = 0; y < ps; ++y)
                    for (int xx = 0; xx < ps; ++xx)
                        X[row * pd + col++] =
                            I[(static_cast<std::size_t>(c) * s + (py * ps + y)) * s + (px * ps + xx)];
            ++row;
        }
    return x;
}

// Patch projection, CLS prepend, positional add: image -> [tokens x d].
inline Tensor patch_embed(const ViTModel& m, const Tensor& image) {
    Tensor x = extract_patches(m.config, image);
    Tensor tokens = add_rowvec(matmul(x, transpose(m.patch_w)), m.patch_b);
    Tensor full = concat_rows({m.cls_token, tokens});
    return add(full, m.pos_embed);
}

struct BlockResult {
    Tensor out;   // [t x d]
    Tensor attn;  // [heads x t x t], defined only when captured
};

// Pre-norm block: x + MSA(LN1(x)), then x + FFN(LN2(x)). Attention is
// softmax(Q K^T / sqrt(d_k)) V per head with d_k = d/heads, heads
// concatenated and projected through Wo.
inline BlockResult block_forward(const BlockWeights& b, const Tensor& x, int heads,
                                 bool capture_attention = false) {
    const int t = x.rows(), d = x.cols();
    const int dh = d / heads;
    Tensor h = layer_norm(x, b.ln1_gamma, b.ln1_beta);
    Tensor q = b.wq.forward(h);
    Tensor k = b.wk.forward(h);
    Tensor v = b.wv.forward(h);
    const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    Tensor captured;
    if (capture_attention) captured = Tensor({heads, t, t});
    for (int i = 0; i < heads; ++i) {
        Tensor qi = slice_cols(q, i * dh, dh);
        Tensor ki = slice_cols(k, i * dh, dh);
        Tensor vi = slice_cols(v, i * dh, dh);
        Tensor scores = scale(matmul(qi, transpose(ki)), inv_sqrt_dk);
        Tensor attn = softmax_lastdim(scores);
        if (capture_attention)
            std::memcpy(captured.data() + static_cast<std::size_t>(i) * t * t, attn.data(),
                        static_cast<std::size_t>(t) * t * sizeof(float));
        head_outs.push_back(matmul(attn, vi));
    }
    Tensor o = b.wo.forward(concat_cols(head_outs));
    Tensor x1 = add(x, o);
    Tensor h2 = layer_norm(x1, b.ln2_gamma, b.ln2_beta);
    Tensor f = b.wf2.forward(gelu(b.wf1.forward(h2)));
    BlockResult res;
    res.out = add(x1, f);
    res.attn = captured;
    return res;
}

// Runs the block stack and final norm on prepared tokens.
inline Tensor forward_tokens(const ViTModel& m, Tensor x,
                             std::vector<Tensor>* attention_out = nullptr) {
    for (const BlockWeights& b : m.blocks) {
        BlockResult r = block_forward(b, x, m.config.heads, attention_out != nullptr);
        x = r.out;
        if (attention_out) attention_out->push_back(r.attn);
    }
    return layer_norm(x, m.final_gamma, m.final_beta);
}

// Token feature map E in R^{t x d}: patch embedding, every block, final norm.
inline Tensor forward_features(const ViTModel& m, const Tensor& image,
                               std::vector<Tensor>* attention_out = nullptr) {
    return forward_tokens(m, patch_embed(m, image), attention_out);
}

// Per-block outputs (after each residual, before the final norm); used by
// the layer-similarity diagnostic.
inline std::vector<Tensor> forward_collect_blocks(const ViTModel& m, const Tensor& image) {
    NoTapeScope no_tape;
    Tensor x = patch_embed(m, image);
    std::vector<Tensor> outs;
    outs.reserve(m.blocks.size());
    for (const BlockWeights& b : m.blocks) {
        x = block_forward(b, x, m.config.heads).out;
        outs.push_back(x);
    }
    return outs;
}

// CLS-token logits through the classifier head (tape-aware).
inline Tensor head_logits(const ViTModel& m, const Tensor& features) {
    if (!m.has_head()) throw ContractError("head_logits: model has no classifier head");
    Tensor cls = slice_rows(features, 0, 1);
    return add_rowvec(matmul(cls, transpose(m.head_w)), m.head_b);
}

inline int argmax_lowest(const float* v, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (v[j] > v[best]) best = j;  // ties keep the lowest class index
    return best;
}

inline double teacher_accuracy(const ViTModel& m, const std::vector<Tensor>& images,
                               const std::vector<int>& labels) {
    NoTapeScope no_tape;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        Tensor logits = head_logits(m, forward_features(m, images[i]));
        if (argmax_lowest(logits.data(), static_cast<int>(logits.size())) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(images.size());
}

// Supervised teacher training: cross-entropy on CLS logits, Adam over all
// weights. Deterministic in the seed at a fixed thread count.
inline ViTModel train_teacher(const ViTConfig& config, const std::vector<Tensor>& images,
                              const std::vector<int>& labels, int epochs, float lr,
                              std::uint64_t seed) {
    if (images.empty()) throw ConfigError("train_teacher: empty dataset");
    if (config.num_classes < 2) throw ConfigError("train_teacher: num_classes must be >= 2");
    if (labels.size() != images.size())
        throw ConfigError("train_teacher: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(images.size()) + " images");
    for (int l : labels)
        if (l < 0 || l >= config.num_classes)
            throw ConfigError("train_teacher: label " + std::to_string(l) + " out of range");

    ViTModel model = init_random(config, seed);
    set_requires_grad_all(model, true);
    std::vector<Tensor> params;
    for_each_param(model, [&](const std::string&, Tensor& t) { params.push_back(t); });
    AdamState opt(params);
    Rng order_rng(seed ^ 0xD1B54A32D192ED03ULL);

    const std::size_t n = images.size();
    const std::size_t batch = std::min<std::size_t>(16, n);
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
                Tensor logits = head_logits(model, forward_features(model, images[idx[s]]));
                Tensor li = cross_entropy_with_logits(logits, labels[idx[s]]);
                total = total.defined() ? add(total, li) : li;
            }
            Tensor loss = scale(total, 1.0f / static_cast<float>(end - start));
            if (!std::isfinite(loss.item()))
                throw NumericError("train_teacher: non-finite loss");
            backward(loss);
            adam_update(opt, lr);
            zero_grads(params);
        }
    }
    for (Tensor& p : params) p.drop_grad();
    set_requires_grad_all(model, false);
    return model;
}

}  // namespace wecolora
