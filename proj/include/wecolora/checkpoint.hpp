#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "wecolora/eval.hpp"
#include "wecolora/vit.hpp"

namespace wecolora {

// CRC-32 (IEEE, reflected) over the payload, stored in the header for
// corruption detection.
inline std::uint32_t crc32(const unsigned char* data, std::size_t n) {
    static const auto table = [] {
        std::vector<std::uint32_t> t(256);
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace detail {

inline constexpr char kMagic[4] = {'W', 'C', 'L', '1'};

inline void push_u64_le(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline void push_f32_le(std::vector<unsigned char>& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t read_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline float read_f32_le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

}  // namespace detail

inline nlohmann::json config_to_json(const ViTConfig& c) {
    return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
            {"dim", c.dim},               {"depth", c.depth},           {"heads", c.heads},
            {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}};
}

inline ViTConfig config_from_json(const nlohmann::json& j) {
    ViTConfig c;
    try {
        c.image_size = j.at("image_size").get<int>();
        c.patch_size = j.at("patch_size").get<int>();
        c.channels = j.at("channels").get<int>();
        c.dim = j.at("dim").get<int>();
        c.depth = j.at("depth").get<int>();
        c.heads = j.at("heads").get<int>();
        c.mlp_ratio = j.at("mlp_ratio").get<int>();
        c.num_classes = j.at("num_classes").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: malformed config: ") + e.what());
    }
    return c;
}

// Container writer: magic, u64 LE header length, UTF-8 JSON header, then
// float32 LE payload in the listed tensor order.
inline void write_named_tensors(const std::string& path, const nlohmann::json& config_json,
                                const std::vector<std::string>& mode_tags,
                                const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::vector<unsigned char> payload;
    nlohmann::json tensor_list = nlohmann::json::array();
    for (const auto& [name, t] : tensors) {
        tensor_list.push_back({{"name", name}, {"shape", t.shape()}});
        for (std::size_t i = 0; i < t.size(); ++i) detail::push_f32_le(payload, t.data()[i]);
    }
    nlohmann::json header = {{"format_version", 1},
                             {"config", config_json},
                             {"mode_tags", mode_tags},
                             {"tensors", tensor_list},
                             {"payload_crc32", crc32(payload.data(), payload.size())}};
    const std::string header_str = header.dump();

    std::vector<unsigned char> out;
    out.insert(out.end(), detail::kMagic, detail::kMagic + 4);
    detail::push_u64_le(out, header_str.size());
    out.insert(out.end(), header_str.begin(), header_str.end());
    out.insert(out.end(), payload.begin(), payload.end());

    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw DataError("checkpoint: cannot open " + path + " for writing");
    const bool ok = std::fwrite(out.data(), 1, out.size(), f) == out.size();
    if (std::fclose(f) != 0 || !ok) throw DataError("checkpoint: write failed for " + path);
}

struct RawCheckpoint {
    nlohmann::json header;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

inline RawCheckpoint read_named_tensors(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw DataError("checkpoint: cannot open " + path);
    std::fseek(f, 0, SEEK_END);
    const long len = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<unsigned char> bytes(static_cast<std::size_t>(len > 0 ? len : 0));
    const bool ok = bytes.empty() || std::fread(bytes.data(), 1, bytes.size(), f) == bytes.size();
    std::fclose(f);
    if (!ok) throw DataError("checkpoint: read failed for " + path);

    if (bytes.size() < 12 || std::memcmp(bytes.data(), detail::kMagic, 4) != 0)
        throw DataError("checkpoint: bad magic in " + path);
    const std::uint64_t header_len = detail::read_u64_le(bytes.data() + 4);
    if (header_len > bytes.size() - 12)
        throw DataError("checkpoint: truncated header in " + path);

    RawCheckpoint raw;
    try {
        raw.header = nlohmann::json::parse(bytes.begin() + 12,
                                           bytes.begin() + 12 + static_cast<long>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint: unparseable header in " + path + ": " + e.what());
    }
    if (!raw.header.contains("format_version") || raw.header["format_version"].get<int>() != 1)
        throw DataError("checkpoint: unsupported format version in " + path);

    const unsigned char* payload = bytes.data() + 12 + header_len;
    const std::size_t payload_len = bytes.size() - 12 - header_len;
    std::size_t expected = 0;
    for (const auto& entry : raw.header.at("tensors")) {
        std::size_t n = 1;
        for (int e : entry.at("shape").get<std::vector<int>>()) n *= static_cast<std::size_t>(e);
        expected += n * 4;
    }
    if (expected != payload_len)
        throw DataError("checkpoint: truncated payload in " + path + ": expected " +
                        std::to_string(expected) + " bytes, got " + std::to_string(payload_len));
    if (raw.header.contains("payload_crc32") &&
        raw.header["payload_crc32"].get<std::uint32_t>() != crc32(payload, payload_len))
        throw DataError("checkpoint: payload checksum mismatch in " + path);

    std::size_t off = 0;
    for (const auto& entry : raw.header.at("tensors")) {
        const auto shape = entry.at("shape").get<std::vector<int>>();
        Tensor t(shape);
        for (std::size_t i = 0; i < t.size(); ++i) {
            t.data()[i] = detail::read_f32_le(payload + off);
            off += 4;
        }
        raw.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
    return raw;
}

inline void save_checkpoint(const ViTModel& model, const std::string& path,
                            const std::vector<std::string>& mode_tags = {}) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    for_each_param(const_cast<ViTModel&>(model),
                   [&](const std::string& name, Tensor& t) { tensors.emplace_back(name, t); });
    write_named_tensors(path, config_to_json(model.config), mode_tags, tensors);
}

struct LoadedCheckpoint {
    ViTModel model;
    std::vector<std::string> mode_tags;
};

// Rebuilds a model from a checkpoint: skeleton from the header config,
// adapters reattached when lora tensors are present, every stored tensor
// consumed exactly once.
inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    RawCheckpoint raw = read_named_tensors(path);
    LoadedCheckpoint out;
    if (raw.header.contains("mode_tags"))
        out.mode_tags = raw.header["mode_tags"].get<std::vector<std::string>>();

    const ViTConfig cfg = config_from_json(raw.header.at("config"));
    cfg.validate();

    std::map<std::string, Tensor> by_name;
    for (auto& [name, t] : raw.tensors) {
        if (!by_name.emplace(name, t).second)
            throw DataError("checkpoint: duplicate tensor " + name + " in " + path);
    }

    ViTModel m = init_random(cfg, 0);
    set_requires_grad_all(m, false);
    // Reattach adapter slots for any lora tensors present.
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        const std::string p = "block." + std::to_string(i) + ".";
        auto maybe_attach = [&](const std::string& name, AdaptedLinear& l) {
            auto it = by_name.find(name + ".lora_a");
            if (it == by_name.end()) return;
            LoRAPair pair;
            pair.a = Tensor(it->second.shape());
            pair.rank = pair.a.rows();
            auto bt = by_name.find(name + ".lora_b");
            if (bt == by_name.end())
                throw DataError("checkpoint: " + name + ".lora_a without .lora_b in " + path);
            pair.b = Tensor(bt->second.shape());
            if (pair.a.cols() != l.in_dim() || pair.b.rows() != l.out_dim() ||
                pair.b.cols() != pair.rank)
                throw DataError("checkpoint: inconsistent adapter shapes for " + name + " in " +
                                path);
            l.adapter = std::move(pair);
        };
        maybe_attach(p + "attn.wq", m.blocks[i].wq);
        maybe_attach(p + "attn.wk", m.blocks[i].wk);
        maybe_attach(p + "attn.wv", m.blocks[i].wv);
        maybe_attach(p + "attn.wo", m.blocks[i].wo);
        maybe_attach(p + "ffn.wf1", m.blocks[i].wf1);
        maybe_attach(p + "ffn.wf2", m.blocks[i].wf2);
    }

    std::size_t consumed = 0;
    for_each_param(m, [&](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint: missing tensor " + name + " in " + path);
        if (it->second.shape() != t.shape())
            throw DataError("checkpoint: tensor " + name + " has shape " +
                            shape_str(it->second.shape()) + ", expected " + shape_str(t.shape()));
        t.values() = it->second.values();
        ++consumed;
    });
    if (consumed != by_name.size())
        throw DataError("checkpoint: " + std::to_string(by_name.size() - consumed) +
                        " unexpected tensors in " + path);
    out.model = std::move(m);
    return out;
}

inline void save_probe(const ProbeHead& head, const ViTConfig& backbone_config,
                       const std::string& path) {
    ViTConfig cfg = backbone_config;
    cfg.num_classes = head.w.rows();
    write_named_tensors(path, config_to_json(cfg), {"probe_head"},
                        {{"head.w", head.w}, {"head.b", head.b}});
}

inline ProbeHead load_probe(const std::string& path) {
    RawCheckpoint raw = read_named_tensors(path);
    ProbeHead head;
    for (auto& [name, t] : raw.tensors) {
        if (name == "head.w")
            head.w = t;
        else if (name == "head.b")
            head.b = t;
        else
            throw DataError("probe checkpoint: unexpected tensor " + name + " in " + path);
    }
    if (!head.w.defined() || !head.b.defined())
        throw DataError("probe checkpoint: missing head tensors in " + path);
    return head;
}

}  // namespace wecolora
