#pragma once

#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <variant>

#include <json.hpp>

#include "dzsi/models.hpp"
#include "dzsi/schedule.hpp"

namespace dzsi {

// Checkpoint layout: magic "DZSI", u32 format version, u64 JSON header
// length, JSON header (model spec, schedule config, training metadata,
// parameter manifest with name/shape/byte-offset), then one contiguous
// little-endian f32 blob. Raw and EMA parameter sets are both stored, as
// "raw/<name>" and "ema/<name>" manifest entries.
inline constexpr uint32_t kCheckpointVersion = 1;

inline nlohmann::json model_spec_to_json(const ModelSpec& s) {
    nlohmann::json j;
    j["modality"] = to_string(s.modality);
    j["input_shape"] = s.input_shape;
    j["hidden"] = s.hidden;
    j["res_stages"] = s.res_stages;
    j["temb_dim"] = s.temb_dim;
    j["head"] = to_string(s.head);
    j["categories"] = s.categories;
    j["spectral_norm"] = s.spectral_norm;
    j["class_contexts"] = s.class_contexts;
    j["schedule_T"] = s.schedule_T;
    return j;
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.modality = j.at("modality") == "vector" ? Modality::Vector : Modality::Image;
    s.input_shape = j.at("input_shape").get<std::vector<int>>();
    s.hidden = j.at("hidden").get<std::vector<int>>();
    s.res_stages = j.at("res_stages").get<int>();
    s.temb_dim = j.at("temb_dim").get<int>();
    const std::string head = j.at("head").get<std::string>();
    if (head == "eps") s.head = HeadKind::Eps;
    else if (head == "eps_v") s.head = HeadKind::EpsV;
    else if (head == "logits") s.head = HeadKind::Logits;
    else if (head == "scalar") s.head = HeadKind::Scalar;
    else throw artifact_error("unknown head kind in checkpoint: " + head);
    s.categories = j.at("categories").get<int>();
    s.spectral_norm = j.at("spectral_norm").get<bool>();
    s.class_contexts = j.at("class_contexts").get<int>();
    s.schedule_T = j.at("schedule_T").get<int>();
    return s;
}

inline nlohmann::json schedule_config_to_json(const ScheduleConfig& c) {
    nlohmann::json j;
    j["family"] = to_string(c.family);
    j["T"] = c.T;
    j["s"] = c.s;
    return j;
}

inline ScheduleConfig schedule_config_from_json(const nlohmann::json& j) {
    ScheduleConfig c;
    c.family = schedule_family_from_string(j.at("family").get<std::string>());
    c.T = j.at("T").get<int>();
    c.s = j.at("s").get<double>();
    return c;
}

struct Checkpoint {
    ModelSpec model_spec;
    ScheduleConfig schedule;
    nlohmann::json meta;  // free-form training metadata
    ParamSet<float> raw;
    ParamSet<float> ema;
};

namespace detail {

inline void append_manifest(nlohmann::json& manifest, const std::string& prefix,
                            const ParamSet<float>& ps, uint64_t& offset) {
    for (const auto& e : ps.entries) {
        nlohmann::json row;
        row["name"] = prefix + e.name;
        row["shape"] = e.shape;
        row["offset"] = offset;
        manifest.push_back(row);
        offset += e.w.size() * sizeof(float);
    }
}

inline void write_blob(std::ofstream& f, const ParamSet<float>& ps) {
    for (const auto& e : ps.entries)
        f.write(reinterpret_cast<const char*>(e.w.data()),
                static_cast<std::streamsize>(e.w.size() * sizeof(float)));
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    require(!ck.raw.entries.empty(), "checkpoint without parameters");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw artifact_error("cannot write checkpoint " + path);
    nlohmann::json head;
    head["model_spec"] = model_spec_to_json(ck.model_spec);
    head["schedule"] = schedule_config_to_json(ck.schedule);
    head["meta"] = ck.meta;
    nlohmann::json manifest = nlohmann::json::array();
    uint64_t offset = 0;
    detail::append_manifest(manifest, "raw/", ck.raw, offset);
    detail::append_manifest(manifest, "ema/", ck.ema, offset);
    head["manifest"] = manifest;
    const std::string hs = head.dump();
    f.write("DZSI", 4);
    const uint32_t version = kCheckpointVersion;
    f.write(reinterpret_cast<const char*>(&version), 4);
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    detail::write_blob(f, ck.raw);
    detail::write_blob(f, ck.ema);
    if (!f) throw artifact_error("short write on checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw artifact_error("missing checkpoint " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "DZSI", 4) != 0)
        throw artifact_error("bad checkpoint magic in " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    if (version != kCheckpointVersion)
        throw artifact_error("unsupported checkpoint version " + std::to_string(version));
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw artifact_error("truncated checkpoint header in " + path);
    nlohmann::json head = nlohmann::json::parse(hs);

    Checkpoint ck;
    ck.model_spec = model_spec_from_json(head.at("model_spec"));
    ck.schedule = schedule_config_from_json(head.at("schedule"));
    ck.meta = head.value("meta", nlohmann::json::object());
    const uint64_t blob_start = 4 + 4 + 8 + hlen;
    for (const auto& row : head.at("manifest")) {
        const std::string name = row.at("name").get<std::string>();
        const auto shape = row.at("shape").get<std::vector<int>>();
        const auto offset = row.at("offset").get<uint64_t>();
        ParamSet<float>* target = nullptr;
        std::string bare;
        if (name.rfind("raw/", 0) == 0) {
            target = &ck.raw;
            bare = name.substr(4);
        } else if (name.rfind("ema/", 0) == 0) {
            target = &ck.ema;
            bare = name.substr(4);
        } else {
            throw artifact_error("manifest entry without raw/ema prefix: " + name);
        }
        const int id = target->add(bare, shape);
        auto& e = target->at(id);
        f.seekg(static_cast<std::streamoff>(blob_start + offset));
        f.read(reinterpret_cast<char*>(e.w.data()),
               static_cast<std::streamsize>(e.w.size() * sizeof(float)));
        if (!f) throw artifact_error("truncated checkpoint blob in " + path);
    }
    return ck;
}

// Rebuild a typed model from a checkpoint. `use_ema` selects which stored
// parameter set lands in the model.
inline std::shared_ptr<ConvDenoiser<float>> conv_denoiser_from(const Checkpoint& ck,
                                                               bool use_ema = true) {
    auto net = std::make_shared<ConvDenoiser<float>>(ck.model_spec, 0);
    const ParamSet<float>& src = use_ema ? ck.ema : ck.raw;
    require(src.entries.size() == net->params().entries.size(), "checkpoint layout mismatch");
    for (size_t i = 0; i < src.entries.size(); ++i) {
        require(src.entries[i].name == net->params().entries[i].name,
                "checkpoint manifest order mismatch");
        net->params().entries[i].w = src.entries[i].w;
    }
    return net;
}

inline std::shared_ptr<MlpDenoiser<float>> mlp_denoiser_from(const Checkpoint& ck,
                                                             bool use_ema = true) {
    auto net = std::make_shared<MlpDenoiser<float>>(ck.model_spec, 0);
    const ParamSet<float>& src = use_ema ? ck.ema : ck.raw;
    require(src.entries.size() == net->params().entries.size(), "checkpoint layout mismatch");
    for (size_t i = 0; i < src.entries.size(); ++i) {
        require(src.entries[i].name == net->params().entries[i].name,
                "checkpoint manifest order mismatch");
        net->params().entries[i].w = src.entries[i].w;
    }
    return net;
}

inline std::shared_ptr<ClassifierNet<float>> classifier_from(const Checkpoint& ck,
                                                             bool use_ema = false) {
    auto net = std::make_shared<ClassifierNet<float>>(ck.model_spec, 0);
    const ParamSet<float>& src = use_ema ? ck.ema : ck.raw;
    require(src.entries.size() == net->params().entries.size(), "checkpoint layout mismatch");
    for (size_t i = 0; i < src.entries.size(); ++i) {
        require(src.entries[i].name == net->params().entries[i].name,
                "checkpoint manifest order mismatch");
        net->params().entries[i].w = src.entries[i].w;
    }
    return net;
}

}  // namespace dzsi
