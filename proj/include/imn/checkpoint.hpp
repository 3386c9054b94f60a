#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "imn/dataset_io.hpp"
#include "imn/errors.hpp"
#include "imn/model.hpp"

namespace imn {

inline nlohmann::json to_json(const ModelConfig& cfg) {
    nlohmann::json convs = nlohmann::json::array();
    for (const auto& c : cfg.convs) convs.push_back({c.in_ch, c.out_ch, c.kernel, c.stride});
    return {{"input_len", cfg.input_len},
            {"in_channels", cfg.in_channels},
            {"convs", convs},
            {"lstm_hidden", cfg.lstm_hidden},
            {"lstm_layers", cfg.lstm_layers},
            {"head_r_h1", cfg.head_r_h1},
            {"head_r_h2", cfg.head_r_h2},
            {"head_gamma_h1", cfg.head_gamma_h1},
            {"head_gamma_h2", cfg.head_gamma_h2},
            {"num_classes", cfg.num_classes},
            {"dropout_rate", cfg.dropout_rate},
            {"bn_eps", cfg.bn_eps},
            {"bn_momentum", cfg.bn_momentum},
            {"head_p", cfg.head_p},
            {"head_r", cfg.head_r},
            {"head_gamma", cfg.head_gamma}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    reject_unknown_keys(j,
                        {"input_len", "in_channels", "convs", "lstm_hidden", "lstm_layers", "head_r_h1",
                         "head_r_h2", "head_gamma_h1", "head_gamma_h2", "num_classes", "dropout_rate", "bn_eps",
                         "bn_momentum", "head_p", "head_r", "head_gamma"},
                        "model config");
    ModelConfig cfg;
    try {
        if (j.contains("input_len")) cfg.input_len = j["input_len"].get<std::size_t>();
        if (j.contains("in_channels")) cfg.in_channels = j["in_channels"].get<std::size_t>();
        if (j.contains("convs")) {
            cfg.convs.clear();
            for (const auto& c : j["convs"])
                cfg.convs.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>(),
                                     c.at(2).get<std::size_t>(), c.at(3).get<std::size_t>()});
        }
        if (j.contains("lstm_hidden")) cfg.lstm_hidden = j["lstm_hidden"].get<std::size_t>();
        if (j.contains("lstm_layers")) cfg.lstm_layers = j["lstm_layers"].get<std::size_t>();
        if (j.contains("head_r_h1")) cfg.head_r_h1 = j["head_r_h1"].get<std::size_t>();
        if (j.contains("head_r_h2")) cfg.head_r_h2 = j["head_r_h2"].get<std::size_t>();
        if (j.contains("head_gamma_h1")) cfg.head_gamma_h1 = j["head_gamma_h1"].get<std::size_t>();
        if (j.contains("head_gamma_h2")) cfg.head_gamma_h2 = j["head_gamma_h2"].get<std::size_t>();
        if (j.contains("num_classes")) cfg.num_classes = j["num_classes"].get<std::size_t>();
        if (j.contains("dropout_rate")) cfg.dropout_rate = j["dropout_rate"].get<double>();
        if (j.contains("bn_eps")) cfg.bn_eps = j["bn_eps"].get<double>();
        if (j.contains("bn_momentum")) cfg.bn_momentum = j["bn_momentum"].get<double>();
        if (j.contains("head_p")) cfg.head_p = j["head_p"].get<bool>();
        if (j.contains("head_r")) cfg.head_r = j["head_r"].get<bool>();
        if (j.contains("head_gamma")) cfg.head_gamma = j["head_gamma"].get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("model config: ") + e.what());
    }
    return cfg;
}

// Checkpoint: "IMNC" | version u32 | manifest hash u64 | config JSON
// (u32 length + bytes) | arrays (u32 count; name u16+bytes, u64 count, f32
// data) | CRC32. The manifest hash ties the weights to the preprocessing
// that produced their training data.
inline constexpr char kCheckpointMagic[4] = {'I', 'M', 'N', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, Model<float>& model, std::uint64_t manifest_hash) {
    std::vector<std::uint8_t> buf;
    buf.insert(buf.end(), kCheckpointMagic, kCheckpointMagic + 4);
    detail::append_le<std::uint32_t>(buf, kCheckpointVersion);
    detail::append_le<std::uint64_t>(buf, manifest_hash);
    const std::string cfg_json = to_json(model.cfg).dump();
    detail::append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(cfg_json.size()));
    buf.insert(buf.end(), cfg_json.begin(), cfg_json.end());

    const auto refs = collect_arrays(model.cfg, model.params);
    detail::append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(refs.size()));
    for (const auto& ref : refs) {
        detail::append_le<std::uint16_t>(buf, static_cast<std::uint16_t>(ref.name.size()));
        buf.insert(buf.end(), ref.name.begin(), ref.name.end());
        detail::append_le<std::uint64_t>(buf, ref.values->size());
        for (float v : *ref.values) detail::append_le<float>(buf, v);
    }
    detail::append_le<std::uint32_t>(buf, crc32(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw data_error("write failed: " + path.string());
}

struct LoadedCheckpoint {
    Model<float> model;
    std::uint64_t manifest_hash = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open checkpoint: " + path.string());
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 24) throw truncated_error("checkpoint shorter than its header: " + path.string());
    if (std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) throw format_error("bad checkpoint magic in " + path.string());
    const auto version = detail::read_le<std::uint32_t>(buf.data() + 4);
    if (version != kCheckpointVersion)
        throw version_error("checkpoint version " + std::to_string(version) + " unsupported");
    if (crc32(buf.data(), buf.size() - 4) != detail::read_le<std::uint32_t>(buf.data() + buf.size() - 4))
        throw checksum_error("checkpoint CRC mismatch in " + path.string());

    std::size_t at = 8;
    auto need = [&](std::size_t n) {
        if (at + n + 4 > buf.size()) throw truncated_error("checkpoint truncated: " + path.string());
    };
    need(8);
    const auto manifest_hash = detail::read_le<std::uint64_t>(buf.data() + at);
    at += 8;
    need(4);
    const auto cfg_len = detail::read_le<std::uint32_t>(buf.data() + at);
    at += 4;
    need(cfg_len);
    nlohmann::json cfg_json;
    try {
        cfg_json = nlohmann::json::parse(buf.begin() + static_cast<std::ptrdiff_t>(at),
                                         buf.begin() + static_cast<std::ptrdiff_t>(at + cfg_len));
    } catch (const nlohmann::json::exception& e) {
        throw format_error("checkpoint config parse: " + std::string(e.what()));
    }
    at += cfg_len;
    const ModelConfig cfg = model_config_from_json(cfg_json);

    Model<float> model{cfg, make_params<float>(cfg)};
    const auto refs = collect_arrays(model.cfg, model.params);
    need(4);
    const auto count = detail::read_le<std::uint32_t>(buf.data() + at);
    at += 4;
    if (count != refs.size())
        throw format_error("checkpoint array count mismatch: expected " + std::to_string(refs.size()) + ", got " +
                           std::to_string(count));
    for (const auto& ref : refs) {
        need(2);
        const auto name_len = detail::read_le<std::uint16_t>(buf.data() + at);
        at += 2;
        need(name_len);
        const std::string name(buf.begin() + static_cast<std::ptrdiff_t>(at),
                               buf.begin() + static_cast<std::ptrdiff_t>(at + name_len));
        at += name_len;
        if (name != ref.name)
            throw format_error("checkpoint array order mismatch: expected " + ref.name + ", got " + name);
        need(8);
        const auto n = detail::read_le<std::uint64_t>(buf.data() + at);
        at += 8;
        if (n != ref.values->size())
            throw format_error("checkpoint array " + name + " has wrong size " + std::to_string(n));
        need(n * 4);
        for (std::size_t i = 0; i < n; ++i, at += 4) (*ref.values)[i] = detail::read_le<float>(buf.data() + at);
    }
    return {std::move(model), manifest_hash};
}

} // namespace imn
