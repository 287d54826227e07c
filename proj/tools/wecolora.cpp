// wecolora: train a small ViT teacher, compress it by intermittent weight
// copy + low-rank adapters distilled on unlabeled images, then probe and
// analyze the result.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "wecolora/adapters.hpp"
#include "wecolora/checkpoint.hpp"
#include "wecolora/dataset.hpp"
#include "wecolora/distill.hpp"
#include "wecolora/eval.hpp"
#include "wecolora/vit.hpp"

namespace {

using nlohmann::json;
using namespace wecolora;

// --data accepts either a directory of PGM/PPM files or synthetic:N,C
struct DataSpec {
    bool synthetic = false;
    int n = 0;
    int num_classes = 0;
    std::string dir;
};

DataSpec parse_data_spec(const std::string& spec) {
    DataSpec out;
    if (spec.rfind("synthetic:", 0) == 0) {
        out.synthetic = true;
        const std::string args = spec.substr(10);
        const std::size_t comma = args.find(',');
        if (comma == std::string::npos)
            throw ConfigError("--data synthetic:N,C: missing class count in '" + spec + "'");
        try {
            out.n = std::stoi(args.substr(0, comma));
            out.num_classes = std::stoi(args.substr(comma + 1));
        } catch (const std::exception&) {
            throw ConfigError("--data synthetic:N,C: bad counts in '" + spec + "'");
        }
    } else {
        out.dir = spec;
    }
    return out;
}

Dataset load_data(const DataSpec& spec, int image_size, int channels, bool want_labels,
                  std::uint64_t seed) {
    if (spec.synthetic) {
        Dataset ds = generate_synthetic(spec.n, spec.num_classes, seed, 0.25, image_size);
        if (!want_labels) ds.labels.clear();
        return ds;
    }
    return load_image_dir(spec.dir, image_size, channels, want_labels);
}

int infer_num_classes(const Dataset& ds) {
    int mx = 0;
    for (int l : ds.labels) {
        if (l < 0) throw ConfigError("negative label in dataset");
        mx = std::max(mx, l);
    }
    return mx + 1;
}

void print_resolved(const std::string& command, const json& settings) {
    json line = settings;
    line["command"] = command;
    std::cout << "config " << line.dump() << std::endl;
}

json config_json_of(const ViTConfig& c) { return config_to_json(c); }

void write_metrics(const std::string& path, const std::vector<MetricsRecord>& log) {
    if (path.empty()) return;
    std::ofstream out(path);
    if (!out) throw DataError("cannot open metrics log " + path);
    for (const MetricsRecord& r : log) {
        json j = {{"step", r.step}, {"epoch", r.epoch}, {"loss", r.loss}, {"lr", r.lr}};
        out << j.dump() << "\n";
    }
}

DistillMode parse_mode(const std::string& s) {
    if (s == "wecolora") return DistillMode::wecolora;
    if (s == "weco_kd") return DistillMode::weco_kd;
    if (s == "qv_lora") return DistillMode::qv_lora;
    if (s == "scratch_kd") return DistillMode::scratch_kd;
    throw ConfigError("unknown mode '" + s + "'");
}

SelectStrategy parse_select(const std::string& s) {
    if (s == "random") return SelectStrategy::random;
    if (s == "kmeanspp") return SelectStrategy::kmeanspp;
    throw ConfigError("unknown selection strategy '" + s + "'");
}

float default_lr_for(int r) { return r <= 2 ? 1e-3f : 1e-4f; }

struct DistillFlags {
    std::string teacher, data, mode = "wecolora", select = "random", out, log;
    int r = 2, rank = 128, epochs = 10, batch = 16, accum = 8;
    double alpha = 1.0, lr = -1.0;
    std::uint64_t seed = 0;
    bool augment = false;
};

void add_distill_flags(CLI::App* cmd, DistillFlags& f, bool with_rank) {
    cmd->add_option("--teacher", f.teacher, "teacher checkpoint")->required();
    cmd->add_option("--data", f.data, "image dir or synthetic:N,C")->required();
    cmd->add_option("--mode", f.mode, "wecolora|weco_kd|qv_lora|scratch_kd");
    cmd->add_option("--r", f.r, "depth reduction factor");
    if (with_rank) cmd->add_option("--rank", f.rank, "adapter rank k");
    cmd->add_option("--alpha", f.alpha, "subset fraction in (0,1]");
    cmd->add_option("--select", f.select, "random|kmeanspp");
    cmd->add_option("--epochs", f.epochs, "distillation epochs");
    cmd->add_option("--lr", f.lr, "learning rate (default 1e-3 for r<=2, 1e-4 above)");
    cmd->add_option("--batch", f.batch, "micro-batch size");
    cmd->add_option("--accum", f.accum, "gradient accumulation factor");
    cmd->add_option("--seed", f.seed, "random seed");
    cmd->add_option("--log", f.log, "metrics JSONL path");
    cmd->add_flag("--augment", f.augment, "random flip + resized crop");
}

DistillConfig to_distill_config(const DistillFlags& f) {
    DistillConfig cfg;
    cfg.r = f.r;
    cfg.rank = f.rank;
    cfg.eta = f.lr < 0.0 ? default_lr_for(f.r) : static_cast<float>(f.lr);
    cfg.epochs = f.epochs;
    cfg.batch_size = f.batch;
    cfg.accum = f.accum;
    cfg.alpha = f.alpha;
    cfg.selection = parse_select(f.select);
    cfg.seed = f.seed;
    cfg.mode = parse_mode(f.mode);
    cfg.augment = f.augment;
    return cfg;
}

json distill_settings_json(const DistillFlags& f, const DistillConfig& cfg) {
    return {{"teacher", f.teacher}, {"data", f.data},       {"mode", f.mode},
            {"r", cfg.r},           {"rank", cfg.rank},     {"alpha", cfg.alpha},
            {"select", f.select},   {"epochs", cfg.epochs}, {"lr", cfg.eta},
            {"batch", cfg.batch_size}, {"accum", cfg.accum}, {"seed", cfg.seed},
            {"augment", cfg.augment}, {"out", f.out},       {"log", f.log}};
}

int run_cli(int argc, char** argv) {
    CLI::App app{"few-shot ViT feature distillation via weight copy + low-rank adapters"};
    app.require_subcommand(1);

    // --- train-teacher ---
    auto* train_cmd = app.add_subcommand("train-teacher", "supervised teacher training");
    std::string tt_config, tt_data, tt_out;
    std::uint64_t tt_seed = 0;
    train_cmd->add_option("--config", tt_config, "model/training config JSON");
    train_cmd->add_option("--data", tt_data, "image dir or synthetic:N,C")->required();
    train_cmd->add_option("--seed", tt_seed, "random seed");
    train_cmd->add_option("--out", tt_out, "output checkpoint")->required();
    train_cmd->callback([&] {
        ViTConfig cfg;
        int epochs = 30;
        float lr = 1e-3f;
        if (!tt_config.empty()) {
            std::ifstream in(tt_config);
            if (!in) throw ConfigError("cannot open config file " + tt_config);
            json j;
            try {
                in >> j;
            } catch (const json::exception& e) {
                throw DataError("config file " + tt_config + ": " + e.what());
            }
            if (j.contains("image_size")) cfg.image_size = j["image_size"];
            if (j.contains("patch_size")) cfg.patch_size = j["patch_size"];
            if (j.contains("channels")) cfg.channels = j["channels"];
            if (j.contains("dim")) cfg.dim = j["dim"];
            if (j.contains("depth")) cfg.depth = j["depth"];
            if (j.contains("heads")) cfg.heads = j["heads"];
            if (j.contains("mlp_ratio")) cfg.mlp_ratio = j["mlp_ratio"];
            if (j.contains("num_classes")) cfg.num_classes = j["num_classes"];
            if (j.contains("epochs")) epochs = j["epochs"];
            if (j.contains("lr")) lr = j["lr"];
        }
        DataSpec spec = parse_data_spec(tt_data);
        Dataset ds = load_data(spec, cfg.image_size, cfg.channels, true, tt_seed);
        if (cfg.num_classes == 0) cfg.num_classes = infer_num_classes(ds);
        cfg.validate();
        json settings = config_json_of(cfg);
        settings["epochs"] = epochs;
        settings["lr"] = lr;
        settings["seed"] = tt_seed;
        settings["data"] = tt_data;
        settings["out"] = tt_out;
        print_resolved("train-teacher", settings);

        ViTModel teacher = train_teacher(cfg, ds.images, ds.labels, epochs, lr, tt_seed);
        save_checkpoint(teacher, tt_out, {"teacher"});
        std::cout << "teacher accuracy " << teacher_accuracy(teacher, ds.images, ds.labels)
                  << std::endl;
    });

    // --- distill ---
    auto* distill_cmd = app.add_subcommand("distill", "label-free feature distillation");
    DistillFlags df;
    add_distill_flags(distill_cmd, df, true);
    distill_cmd->add_option("--out", df.out, "output student checkpoint")->required();
    distill_cmd->callback([&] {
        DistillConfig cfg = to_distill_config(df);
        print_resolved("distill", distill_settings_json(df, cfg));
        LoadedCheckpoint teacher = load_checkpoint(df.teacher);
        DataSpec spec = parse_data_spec(df.data);
        Dataset ds = load_data(spec, teacher.model.config.image_size,
                               teacher.model.config.channels, false, cfg.seed);
        DistillResult res = run_distillation(teacher.model, ds.images, cfg);
        write_metrics(df.log, res.log);
        std::vector<std::string> tags = {"student", df.mode};
        if (cfg.mode == DistillMode::wecolora || cfg.mode == DistillMode::qv_lora)
            tags.push_back("merged");
        save_checkpoint(res.student, df.out, tags);
        if (!res.log.empty())
            std::cout << "final loss " << res.log.back().loss << " over " << res.log.size()
                      << " steps" << std::endl;
    });

    // --- probe ---
    auto* probe_cmd = app.add_subcommand("probe", "train a linear probe on frozen features");
    std::string pr_model, pr_data, pr_out;
    int pr_epochs = 50;
    double pr_lr = 1e-2;
    std::uint64_t pr_seed = 0;
    probe_cmd->add_option("--model", pr_model, "backbone checkpoint")->required();
    probe_cmd->add_option("--data", pr_data, "labeled data")->required();
    probe_cmd->add_option("--epochs", pr_epochs, "probe epochs");
    probe_cmd->add_option("--lr", pr_lr, "probe learning rate");
    probe_cmd->add_option("--seed", pr_seed, "random seed");
    probe_cmd->add_option("--out", pr_out, "output head checkpoint")->required();
    probe_cmd->callback([&] {
        print_resolved("probe", {{"model", pr_model},
                                 {"data", pr_data},
                                 {"epochs", pr_epochs},
                                 {"lr", pr_lr},
                                 {"seed", pr_seed},
                                 {"out", pr_out}});
        LoadedCheckpoint model = load_checkpoint(pr_model);
        DataSpec spec = parse_data_spec(pr_data);
        Dataset ds = load_data(spec, model.model.config.image_size, model.model.config.channels,
                               true, pr_seed);
        const int num_classes = infer_num_classes(ds);
        ProbeHead head = linear_probe(model.model, ds.images, ds.labels, num_classes, pr_epochs,
                                      static_cast<float>(pr_lr), pr_seed);
        save_probe(head, model.model.config, pr_out);
        std::cout << "train accuracy " << top1_accuracy(head, model.model, ds.images, ds.labels)
                  << std::endl;
    });

    // --- eval ---
    auto* eval_cmd = app.add_subcommand("eval", "top-1 accuracy of model + head");
    std::string ev_model, ev_head, ev_data;
    std::uint64_t ev_seed = 0;
    eval_cmd->add_option("--model", ev_model, "backbone checkpoint")->required();
    eval_cmd->add_option("--head", ev_head, "probe head checkpoint")->required();
    eval_cmd->add_option("--data", ev_data, "labeled data")->required();
    eval_cmd->add_option("--seed", ev_seed, "seed for synthetic data");
    eval_cmd->callback([&] {
        print_resolved("eval", {{"model", ev_model}, {"head", ev_head}, {"data", ev_data},
                                {"seed", ev_seed}});
        LoadedCheckpoint model = load_checkpoint(ev_model);
        ProbeHead head = load_probe(ev_head);
        DataSpec spec = parse_data_spec(ev_data);
        Dataset ds = load_data(spec, model.model.config.image_size, model.model.config.channels,
                               true, ev_seed);
        std::printf("top1_accuracy %.6f\n", top1_accuracy(head, model.model, ds.images, ds.labels));
    });

    // --- analyze ---
    auto* analyze_cmd = app.add_subcommand("analyze", "feature diagnostics");
    analyze_cmd->require_subcommand(1);

    auto* cos_cmd = analyze_cmd->add_subcommand("cosine", "layer-wise teacher/student similarity");
    std::string cs_teacher, cs_student, cs_data, cs_out;
    int cs_r = 2;
    std::uint64_t cs_seed = 0;
    cos_cmd->add_option("--teacher", cs_teacher)->required();
    cos_cmd->add_option("--student", cs_student)->required();
    cos_cmd->add_option("--r", cs_r, "depth reduction factor")->required();
    cos_cmd->add_option("--data", cs_data)->required();
    cos_cmd->add_option("--seed", cs_seed, "seed for synthetic data");
    cos_cmd->add_option("--out", cs_out, "report JSONL path")->required();
    cos_cmd->callback([&] {
        print_resolved("analyze cosine", {{"teacher", cs_teacher}, {"student", cs_student},
                                          {"r", cs_r}, {"data", cs_data}, {"out", cs_out},
                                          {"seed", cs_seed}});
        LoadedCheckpoint teacher = load_checkpoint(cs_teacher);
        LoadedCheckpoint student = load_checkpoint(cs_student);
        DataSpec spec = parse_data_spec(cs_data);
        Dataset ds = load_data(spec, teacher.model.config.image_size,
                               teacher.model.config.channels, false, cs_seed);
        std::vector<double> sims =
            cosine_layer_similarity(teacher.model, student.model, cs_r, ds.images);
        std::ofstream out(cs_out);
        if (!out) throw DataError("cannot open report " + cs_out);
        for (std::size_t l = 0; l < sims.size(); ++l) {
            json j = {{"layer", l + 1}, {"mean_cosine", sims[l]}};
            out << j.dump() << "\n";
            std::cout << j.dump() << std::endl;
        }
    });

    auto* roll_cmd = analyze_cmd->add_subcommand("rollout", "attention rollout heatmap");
    std::string rl_model, rl_image, rl_out;
    double rl_top = 0.1;
    roll_cmd->add_option("--model", rl_model)->required();
    roll_cmd->add_option("--image", rl_image, "PGM/PPM image")->required();
    roll_cmd->add_option("--top", rl_top, "kept response fraction");
    roll_cmd->add_option("--out", rl_out, "heatmap PGM path")->required();
    roll_cmd->callback([&] {
        print_resolved("analyze rollout", {{"model", rl_model}, {"image", rl_image},
                                           {"top", rl_top}, {"out", rl_out}});
        LoadedCheckpoint model = load_checkpoint(rl_model);
        Tensor img = pnm_to_tensor(read_pnm(rl_image), model.model.config.image_size,
                                   model.model.config.channels);
        RolloutResult res = attention_rollout(model.model, img, rl_top);
        if (!res.heatmap.defined()) throw ConfigError("model has no patch grid to visualize");
        write_pgm(rl_out, res.heatmap);
        std::cout << "wrote " << rl_out << std::endl;
    });

    auto* exp_cmd = analyze_cmd->add_subcommand("export", "CLS embedding CSV export");
    std::string ex_model, ex_data, ex_out;
    std::uint64_t ex_seed = 0;
    exp_cmd->add_option("--model", ex_model)->required();
    exp_cmd->add_option("--data", ex_data)->required();
    exp_cmd->add_option("--seed", ex_seed, "seed for synthetic data");
    exp_cmd->add_option("--out", ex_out, "CSV path")->required();
    exp_cmd->callback([&] {
        print_resolved("analyze export", {{"model", ex_model}, {"data", ex_data},
                                          {"out", ex_out}, {"seed", ex_seed}});
        LoadedCheckpoint model = load_checkpoint(ex_model);
        DataSpec spec = parse_data_spec(ex_data);
        Dataset ds = load_data(spec, model.model.config.image_size, model.model.config.channels,
                               true, ex_seed);
        export_embeddings(model.model, ds.images, ds.labels, ex_out);
        std::cout << "wrote " << ex_out << std::endl;
    });

    // --- sweep rank ---
    auto* sweep_cmd = app.add_subcommand("sweep", "hyperparameter sweeps");
    sweep_cmd->require_subcommand(1);
    auto* rank_cmd = sweep_cmd->add_subcommand("rank", "distill once per adapter rank");
    DistillFlags sf;
    std::string ranks_arg;
    rank_cmd->add_option("--ranks", ranks_arg, "comma-separated rank list")->required();
    add_distill_flags(rank_cmd, sf, false);
    rank_cmd->add_option("--out", sf.out, "checkpoint path prefix (rank appended)");
    rank_cmd->callback([&] {
        std::vector<int> ranks;
        std::stringstream ss(ranks_arg);
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                ranks.push_back(std::stoi(item));
            } catch (const std::exception&) {
                throw ConfigError("bad rank '" + item + "' in --ranks");
            }
        }
        if (ranks.empty()) throw ConfigError("--ranks list is empty");
        DistillConfig base = to_distill_config(sf);
        if (base.mode != DistillMode::wecolora && base.mode != DistillMode::qv_lora)
            throw ConfigError("sweep rank needs an adapter mode (wecolora or qv_lora)");
        json settings = distill_settings_json(sf, base);
        settings["ranks"] = ranks;
        print_resolved("sweep rank", settings);

        LoadedCheckpoint teacher = load_checkpoint(sf.teacher);
        DataSpec spec = parse_data_spec(sf.data);
        Dataset ds = load_data(spec, teacher.model.config.image_size,
                               teacher.model.config.channels, false, base.seed);
        std::ofstream log;
        if (!sf.log.empty()) {
            log.open(sf.log);
            if (!log) throw DataError("cannot open metrics log " + sf.log);
        }
        for (int k : ranks) {
            DistillConfig cfg = base;
            cfg.rank = k;
            DistillResult res = run_distillation(teacher.model, ds.images, cfg);
            double final_epoch_loss = 0.0;
            int count = 0;
            const int last_epoch = res.log.empty() ? 0 : res.log.back().epoch;
            for (const MetricsRecord& r : res.log)
                if (r.epoch == last_epoch) {
                    final_epoch_loss += r.loss;
                    ++count;
                }
            if (count > 0) final_epoch_loss /= count;
            const std::int64_t params =
                cfg.mode == DistillMode::qv_lora
                    ? count_trainable_qv(teacher.model.config.dim, k, res.student.config.depth)
                    : count_trainable_enhanced(teacher.model.config.dim,
                                               teacher.model.config.mlp_ratio, k,
                                               res.student.config.depth);
            json line = {{"rank", k},
                         {"trainable_params", params},
                         {"final_epoch_mean_loss", final_epoch_loss}};
            std::cout << line.dump() << std::endl;
            if (log.is_open()) log << line.dump() << "\n";
            if (!sf.out.empty())
                save_checkpoint(res.student, sf.out + ".rank" + std::to_string(k) + ".wcl",
                                {"student", sf.mode, "merged"});
        }
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // bad flags are configuration errors
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << std::endl;
        return 2;
    } catch (const DimensionError& e) {
        // mismatched artifacts on the command line (wrong head for a model)
        std::cerr << "configuration error: " << e.what() << std::endl;
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << std::endl;
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << std::endl;
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
}
