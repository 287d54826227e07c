#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "wecolora/adapters.hpp"
#include "wecolora/optim.hpp"
#include "wecolora/rng.hpp"
#include "wecolora/vit.hpp"

namespace wecolora {

enum class DistillMode { wecolora, weco_kd, qv_lora, scratch_kd };
enum class SelectStrategy { random, kmeanspp };

inline const char* mode_name(DistillMode m) {
    switch (m) {
        case DistillMode::wecolora: return "wecolora";
        case DistillMode::weco_kd: return "weco_kd";
        case DistillMode::qv_lora: return "qv_lora";
        case DistillMode::scratch_kd: return "scratch_kd";
    }
    return "?";
}

struct DistillConfig {
    int r = 2;             // depth reduction factor
    int rank = 128;        // adapter rank k
    float eta = 1e-3f;     // learning rate
    int epochs = 10;
    int batch_size = 16;
    int accum = 8;         // gradient-accumulation factor
    double alpha = 1.0;    // subset fraction in (0, 1]
    SelectStrategy selection = SelectStrategy::random;
    std::uint64_t seed = 0;
    DistillMode mode = DistillMode::wecolora;
    bool augment = false;
    int max_steps = 0;     // optional micro-batch budget; 0 = run all epochs

    void validate(int teacher_depth, std::size_t dataset_size) const {
        if (r < 1) throw ConfigError("reduction factor r must be >= 1");
        if (teacher_depth / r < 1)
            throw ConfigError("r=" + std::to_string(r) + " exceeds teacher depth " +
                              std::to_string(teacher_depth));
        if (alpha <= 0.0 || alpha > 1.0)
            throw ConfigError("alpha must be in (0, 1], got " + std::to_string(alpha));
        if (dataset_size == 0 || static_cast<std::size_t>(std::ceil(alpha * dataset_size)) < 1)
            throw ConfigError("alpha * dataset size must be at least 1");
        if (batch_size < 1) throw ConfigError("batch_size must be positive");
        if (accum < 1) throw ConfigError("accum must be positive");
        if (epochs < 0) throw ConfigError("negative epochs");
        if (rank < 1 && (mode == DistillMode::wecolora || mode == DistillMode::qv_lora))
            throw ConfigError("rank must be positive");
    }
};

struct StudentBuild {
    ViTModel model;
    ParamSet params;
};

// Student construction: depth M = floor(L/r), block l of the student is a
// bit-exact copy of teacher block l*r (1-indexed), embeddings and final norm
// copied, adapters attached per mode. scratch_kd skips the copy and
// initializes randomly instead.
inline StudentBuild build_student(const ViTModel& teacher, const DistillConfig& cfg) {
    const int L = teacher.config.depth;
    if (cfg.r < 1 || L < cfg.r)
        throw ConfigError("build_student: r=" + std::to_string(cfg.r) + " with teacher depth " +
                          std::to_string(L));
    const int M = L / cfg.r;

    StudentBuild out;
    ViTConfig scfg = teacher.config;
    scfg.depth = M;
    scfg.num_classes = 0;

    if (cfg.mode == DistillMode::scratch_kd) {
        // mixed stream: a teacher trained from the same seed must not share
        // its initialization draws with the from-scratch baseline
        out.model = init_random(scfg, cfg.seed ^ 0x8F0C99B2D1E64A35ULL);
    } else {
        ViTModel copied = teacher.clone();
        out.model.config = scfg;
        out.model.patch_w = copied.patch_w;
        out.model.patch_b = copied.patch_b;
        out.model.cls_token = copied.cls_token;
        out.model.pos_embed = copied.pos_embed;
        for (int l = 1; l <= M; ++l)
            out.model.blocks.push_back(std::move(copied.blocks[static_cast<std::size_t>(l * cfg.r - 1)]));
        out.model.final_gamma = copied.final_gamma;
        out.model.final_beta = copied.final_beta;
    }
    set_requires_grad_all(out.model, false);

    switch (cfg.mode) {
        case DistillMode::wecolora:
            out.params = attach_enhanced(out.model, cfg.rank, cfg.seed);
            break;
        case DistillMode::qv_lora:
            out.params = attach_qv_only(out.model, cfg.rank, cfg.seed);
            break;
        case DistillMode::weco_kd:
        case DistillMode::scratch_kd:
            set_requires_grad_all(out.model, true);
            out.params = detail::partition_params(out.model);
            break;
    }
    return out;
}

// ceil(alpha*n) distinct indices. random = uniform without replacement;
// kmeans++ seeds one uniform index then repeatedly samples proportional to
// the squared distance to the nearest already-selected sample in the given
// feature space.
inline std::vector<std::size_t> select_subset(std::size_t n, double alpha,
                                              SelectStrategy strategy, std::uint64_t seed,
                                              const std::vector<std::vector<float>>& features = {}) {
    if (n == 0) throw ConfigError("select_subset: empty dataset");
    if (alpha <= 0.0 || alpha > 1.0)
        throw ConfigError("select_subset: alpha out of (0, 1]");
    const std::size_t m = std::min<std::size_t>(
        n, static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(n))));
    Rng rng(seed);

    if (strategy == SelectStrategy::random) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        rng.shuffle(idx);
        idx.resize(m);
        return idx;
    }

    if (features.size() != n)
        throw ContractError("select_subset: kmeans++ needs one feature vector per sample");
    auto sq_dist = [&](std::size_t a, std::size_t b) {
        const std::vector<float>& u = features[a];
        const std::vector<float>& v = features[b];
        double acc = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            const double diff = static_cast<double>(u[i]) - v[i];
            acc += diff * diff;
        }
        return acc;
    };

    std::vector<std::size_t> picked;
    picked.reserve(m);
    std::vector<bool> taken(n, false);
    std::vector<double> d2(n, 0.0);
    const std::size_t first = rng.index(n);
    picked.push_back(first);
    taken[first] = true;
    for (std::size_t j = 0; j < n; ++j)
        if (!taken[j]) d2[j] = sq_dist(j, first);

    while (picked.size() < m) {
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (!taken[j]) total += d2[j];
        std::size_t chosen = n;
        if (total > 0.0) {
            const double u = rng.uniform() * total;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (taken[j]) continue;
                acc += d2[j];
                if (acc > u) {
                    chosen = j;
                    break;
                }
            }
        }
        if (chosen == n) {
            // all remaining distances zero (duplicate points): uniform pick
            std::size_t skip = rng.index(n - picked.size());
            for (std::size_t j = 0; j < n; ++j) {
                if (taken[j]) continue;
                if (skip == 0) {
                    chosen = j;
                    break;
                }
                --skip;
            }
        }
        picked.push_back(chosen);
        taken[chosen] = true;
        for (std::size_t j = 0; j < n; ++j) {
            if (taken[j]) {
                d2[j] = 0.0;
                continue;
            }
            d2[j] = std::min(d2[j], sq_dist(j, chosen));
        }
    }
    return picked;
}

// Feature-distillation loss: mean absolute difference over tokens and
// channels of the two embeddings.
inline Tensor distill_loss(const Tensor& teacher_E, const Tensor& student_E) {
    if (teacher_E.shape() != student_E.shape())
        throw ContractError("distill_loss: embeddings " + shape_str(teacher_E.shape()) +
                            " vs " + shape_str(student_E.shape()));
    return l1_mean_loss(teacher_E, student_E);
}

// Applies any accumulated gradients as a final (partial) update.
inline void flush_accumulation(AdamState& opt, float eta) {
    if (opt.accumulated == 0) return;
    scale_grads(opt.params, 1.0f / static_cast<float>(opt.accumulated));
    adam_update(opt, eta);
    zero_grads(opt.params);
    opt.accumulated = 0;
}

// One micro-batch: teacher and student embeddings per image, mean feature
// loss, backward into the trainable set, and an optimizer update once every
// `accum` micro-batches. Returns the micro-batch loss.
inline float distill_step(const ViTModel& teacher, const ViTModel& student,
                          const std::vector<Tensor>& batch, AdamState& opt, int accum,
                          float eta) {
    if (batch.empty()) throw ContractError("distill_step: empty batch");
    Tape tape;
    float loss_value = 0.0f;
    {
        TapeScope scope(tape);
        Tensor total;
        for (const Tensor& image : batch) {
            Tensor teacher_E;
            {
                NoTapeScope inference;
                teacher_E = forward_features(teacher, image);
            }
            Tensor student_E = forward_features(student, image);
            Tensor li = distill_loss(teacher_E, student_E);
            total = total.defined() ? add(total, li) : li;
        }
        Tensor loss = scale(total, 1.0f / static_cast<float>(batch.size()));
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NumericError("distill_step: non-finite loss");
        backward(loss);
    }
    opt.accumulated += 1;
    if (opt.accumulated >= accum) {
        scale_grads(opt.params, 1.0f / static_cast<float>(opt.accumulated));
        adam_update(opt, eta);
        zero_grads(opt.params);
        opt.accumulated = 0;
    }
    return loss_value;
}

// Random horizontal flip + random resized square crop (nearest neighbor),
// the weak-augmentation option for distillation.
inline Tensor augment_image(const Tensor& image, Rng& rng) {
    const int c = image.extent(0), h = image.extent(1), w = image.extent(2);
    const bool flip = rng.uniform() < 0.5;
    const double frac = rng.uniform(0.5, 1.0);
    const int side = std::max(1, static_cast<int>(std::lround(frac * std::min(h, w))));
    const int y0 = static_cast<int>(rng.index(static_cast<std::size_t>(h - side + 1)));
    const int x0 = static_cast<int>(rng.index(static_cast<std::size_t>(w - side + 1)));
    Tensor out(image.shape());
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int sy = y0 + std::min(side - 1, y * side / h);
                int sx = x0 + std::min(side - 1, x * side / w);
                if (flip) sx = x0 + side - 1 - (sx - x0);
                out.data()[(static_cast<std::size_t>(ch) * h + y) * w + x] =
                    image.data()[(static_cast<std::size_t>(ch) * h + sy) * w + sx];
            }
    return out;
}

struct MetricsRecord {
    std::int64_t step = 0;
    int epoch = 0;
    float loss = 0.0f;
    float lr = 0.0f;
};

struct DistillResult {
    ViTModel student;                 // merged in adapter modes
    std::vector<MetricsRecord> log;   // one record per micro-batch
};

// The full pipeline: build the student, select the few-shot subset, sweep
// epochs of micro-batches updating only the trainable set, then merge
// adapters. The loop consumes images only; labels never enter this path.
inline DistillResult run_distillation(const ViTModel& teacher, const std::vector<Tensor>& images,
                                      const DistillConfig& cfg) {
    cfg.validate(teacher.config.depth, images.size());

    StudentBuild build = build_student(teacher, cfg);

    std::vector<std::vector<float>> features;
    if (cfg.selection == SelectStrategy::kmeanspp) {
        NoTapeScope inference;
        features.reserve(images.size());
        for (const Tensor& img : images) {
            Tensor E = forward_features(teacher, img);
            const float* cls = E.data();
            features.emplace_back(cls, cls + E.cols());
        }
    }
    std::vector<std::size_t> subset =
        select_subset(images.size(), cfg.alpha, cfg.selection, cfg.seed, features);

    std::vector<Tensor> trainable = build.params.trainable_tensors();
    AdamState opt(trainable);
    Rng order_rng(cfg.seed ^ 0xA24BAED4963EE407ULL);
    Rng aug_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);

    DistillResult result;
    std::int64_t step = 0;
    bool budget_hit = false;
    for (int epoch = 0; epoch < cfg.epochs && !budget_hit; ++epoch) {
        order_rng.shuffle(subset);
        for (std::size_t start = 0; start < subset.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            if (cfg.max_steps > 0 && step >= cfg.max_steps) {
                budget_hit = true;
                break;
            }
            const std::size_t end =
                std::min(subset.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<Tensor> batch;
            batch.reserve(end - start);
            for (std::size_t s = start; s < end; ++s) {
                const Tensor& img = images[subset[s]];
                batch.push_back(cfg.augment ? augment_image(img, aug_rng) : img);
            }
            const float loss = distill_step(teacher, build.model, batch, opt, cfg.accum, cfg.eta);
            result.log.push_back({step, epoch, loss, cfg.eta});
            ++step;
        }
    }
    flush_accumulation(opt, cfg.eta);

    if (cfg.mode == DistillMode::wecolora || cfg.mode == DistillMode::qv_lora)
        merge_adapters(build.model);
    set_requires_grad_all(build.model, false);
    result.student = std::move(build.model);
    return result;
}

}  // namespace wecolora
