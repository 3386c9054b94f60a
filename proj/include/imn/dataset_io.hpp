#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "imn/dataset.hpp"
#include "imn/errors.hpp"

namespace imn {

// ---------------------------------------------------------------------------
// CRC32 (IEEE, reflected), table-driven.
// ---------------------------------------------------------------------------

namespace detail {

inline const std::array<std::uint32_t, 256>& crc32_table() {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}

} // namespace detail

inline std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0) {
    const auto* bytes = static_cast<const std::uint8_t*>(data);
    std::uint32_t c = seed ^ 0xffffffffu;
    const auto& table = detail::crc32_table();
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ bytes[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
    const auto* bytes = static_cast<const std::uint8_t*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// ---------------------------------------------------------------------------
// JSON (de)serialization of configs, standardizer, and manifest.
// ---------------------------------------------------------------------------

inline std::string to_string(FeatureView v) {
    switch (v) {
    case FeatureView::Magnitude: return "magnitude";
    case FeatureView::Real: return "real";
    case FeatureView::IQ: return "iq";
    }
    return "magnitude";
}

inline std::string to_string(FeatureStats v) { return v == FeatureStats::Global ? "global" : "per_position"; }
inline std::string to_string(FadingKind v) { return v == FadingKind::Complex ? "complex" : "real"; }
inline std::string to_string(SourceKind v) { return v == SourceKind::Qpsk ? "qpsk" : "gaussian"; }
inline std::string to_string(SnrReference v) { return v == SnrReference::Background ? "background" : "total"; }

inline FeatureView feature_view_from(const std::string& s) {
    if (s == "magnitude") return FeatureView::Magnitude;
    if (s == "real") return FeatureView::Real;
    if (s == "iq") return FeatureView::IQ;
    throw config_error("unknown feature view '" + s + "' (use magnitude|real|iq)");
}

inline FeatureStats feature_stats_from(const std::string& s) {
    if (s == "global") return FeatureStats::Global;
    if (s == "per_position") return FeatureStats::PerPosition;
    throw config_error("unknown feature stats mode '" + s + "' (use global|per_position)");
}

inline FadingKind fading_from(const std::string& s) {
    if (s == "complex") return FadingKind::Complex;
    if (s == "real") return FadingKind::Real;
    throw config_error("unknown fading kind '" + s + "' (use complex|real)");
}

inline SourceKind source_from(const std::string& s) {
    if (s == "qpsk") return SourceKind::Qpsk;
    if (s == "gaussian") return SourceKind::Gaussian;
    throw config_error("unknown source kind '" + s + "' (use qpsk|gaussian)");
}

inline SnrReference snr_ref_from(const std::string& s) {
    if (s == "background") return SnrReference::Background;
    if (s == "total") return SnrReference::Total;
    throw config_error("unknown snr reference '" + s + "' (use background|total)");
}

inline nlohmann::json to_json(const DatasetConfig& cfg) {
    return {{"p_grid", cfg.p_grid},
            {"r_grid", cfg.r_grid},
            {"gamma_grid", cfg.gamma_grid},
            {"n_per_config", cfg.n_per_config},
            {"seq_len", cfg.seq_len},
            {"snr_db", cfg.snr_db},
            {"master_seed", cfg.master_seed},
            {"threshold_eps", cfg.threshold_eps},
            {"feature_view", to_string(cfg.feature_view)},
            {"feature_stats", to_string(cfg.feature_stats)},
            {"fading", to_string(cfg.fading)},
            {"source", to_string(cfg.source)},
            {"snr_ref", to_string(cfg.snr_ref)},
            {"per_seq_norm", cfg.per_seq_norm},
            {"train_frac", cfg.train_frac},
            {"val_frac", cfg.val_frac},
            {"test_frac", cfg.test_frac}};
}

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool found = false;
        for (const char* k : known)
            if (key == k) {
                found = true;
                break;
            }
        if (!found) throw config_error("unknown key '" + key + "' in " + where);
    }
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
    reject_unknown_keys(j,
                        {"p_grid", "r_grid", "gamma_grid", "n_per_config", "seq_len", "snr_db", "master_seed",
                         "threshold_eps", "feature_view", "feature_stats", "fading", "source", "snr_ref",
                         "per_seq_norm", "train_frac", "val_frac", "test_frac"},
                        "dataset config");
    DatasetConfig cfg;
    try {
        if (j.contains("p_grid")) cfg.p_grid = j["p_grid"].get<std::vector<double>>();
        if (j.contains("r_grid")) cfg.r_grid = j["r_grid"].get<std::vector<double>>();
        if (j.contains("gamma_grid")) cfg.gamma_grid = j["gamma_grid"].get<std::vector<double>>();
        if (j.contains("n_per_config")) cfg.n_per_config = j["n_per_config"].get<std::size_t>();
        if (j.contains("seq_len")) cfg.seq_len = j["seq_len"].get<std::size_t>();
        if (j.contains("snr_db")) cfg.snr_db = j["snr_db"].get<double>();
        if (j.contains("master_seed")) cfg.master_seed = j["master_seed"].get<std::uint64_t>();
        if (j.contains("threshold_eps")) cfg.threshold_eps = j["threshold_eps"].get<double>();
        if (j.contains("feature_view")) cfg.feature_view = feature_view_from(j["feature_view"].get<std::string>());
        if (j.contains("feature_stats"))
            cfg.feature_stats = feature_stats_from(j["feature_stats"].get<std::string>());
        if (j.contains("fading")) cfg.fading = fading_from(j["fading"].get<std::string>());
        if (j.contains("source")) cfg.source = source_from(j["source"].get<std::string>());
        if (j.contains("snr_ref")) cfg.snr_ref = snr_ref_from(j["snr_ref"].get<std::string>());
        if (j.contains("per_seq_norm")) cfg.per_seq_norm = j["per_seq_norm"].get<bool>();
        if (j.contains("train_frac")) cfg.train_frac = j["train_frac"].get<double>();
        if (j.contains("val_frac")) cfg.val_frac = j["val_frac"].get<double>();
        if (j.contains("test_frac")) cfg.test_frac = j["test_frac"].get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("dataset config: ") + e.what());
    }
    return cfg;
}

inline nlohmann::json to_json(const Standardizer& st) {
    return {{"mode", to_string(st.mode)},        {"feature_mean", st.feature_mean},
            {"feature_std", st.feature_std},     {"p_mean", st.p_mean},
            {"p_std", st.p_std},                 {"logr_mean", st.logr_mean},
            {"logr_std", st.logr_std},           {"clamped", st.clamped}};
}

inline Standardizer standardizer_from_json(const nlohmann::json& j) {
    Standardizer st;
    st.mode = feature_stats_from(j.at("mode").get<std::string>());
    st.feature_mean = j.at("feature_mean").get<std::vector<double>>();
    st.feature_std = j.at("feature_std").get<std::vector<double>>();
    st.p_mean = j.at("p_mean").get<double>();
    st.p_std = j.at("p_std").get<double>();
    st.logr_mean = j.at("logr_mean").get<double>();
    st.logr_std = j.at("logr_std").get<double>();
    st.clamped = j.at("clamped").get<bool>();
    return st;
}

inline nlohmann::json to_json(const DatasetManifest& mf) {
    nlohmann::json class_map = nlohmann::json::array();
    for (std::size_t i = 0; i < mf.class_map.size(); ++i)
        class_map.push_back({{"gamma", mf.class_map[i]}, {"class", i}});
    return {{"format_version", mf.format_version},
            {"config", to_json(mf.config)},
            {"class_map", class_map},
            {"splits", {{"train", mf.n_train}, {"val", mf.n_val}, {"test", mf.n_test}}},
            {"standardizer", to_json(mf.standardizer)},
            {"target_stats",
             {{"std_target_var_p", mf.std_target_var_p},
              {"std_target_var_logr", mf.std_target_var_logr},
              {"r_linear_mean", mf.r_linear_mean},
              {"r_linear_var", mf.r_linear_var}}},
            {"preprocess", {"featurize", "threshold", "log10_r", "standardize", "encode_gamma"}}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest mf;
    try {
        mf.format_version = j.at("format_version").get<std::uint32_t>();
        mf.config = dataset_config_from_json(j.at("config"));
        mf.class_map.clear();
        for (const auto& entry : j.at("class_map")) mf.class_map.push_back(entry.at("gamma").get<double>());
        mf.n_train = j.at("splits").at("train").get<std::size_t>();
        mf.n_val = j.at("splits").at("val").get<std::size_t>();
        mf.n_test = j.at("splits").at("test").get<std::size_t>();
        mf.standardizer = standardizer_from_json(j.at("standardizer"));
        mf.std_target_var_p = j.at("target_stats").at("std_target_var_p").get<double>();
        mf.std_target_var_logr = j.at("target_stats").at("std_target_var_logr").get<double>();
        mf.r_linear_mean = j.at("target_stats").at("r_linear_mean").get<double>();
        mf.r_linear_var = j.at("target_stats").at("r_linear_var").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw format_error(std::string("manifest: ") + e.what());
    }
    return mf;
}

// Canonical text form; its FNV-1a hash is the manifest identity checked by
// checkpoints at train/eval/predict time.
inline std::string manifest_text(const DatasetManifest& mf) { return to_json(mf).dump(2) + "\n"; }
inline std::uint64_t manifest_hash(const DatasetManifest& mf) { return fnv1a64(manifest_text(mf)); }

// ---------------------------------------------------------------------------
// Dataset binary format: "IMN1" | version u32 | count u64 | seq_len u32 |
// records (feature_len f32, target_p f32, target_logr f32, gamma_class u8) |
// CRC32 of all preceding bytes. Little-endian throughout.
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[4] = {'I', 'M', 'N', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

template <typename T>
void append_le(std::vector<std::uint8_t>& buf, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    buf.insert(buf.end(), raw, raw + sizeof(T)); // little-endian host assumed
}

template <typename T>
T read_le(const std::uint8_t* p) {
    T value;
    std::memcpy(&value, p, sizeof(T));
    return value;
}

} // namespace detail

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds, const DatasetManifest& mf) {
    std::vector<std::uint8_t> buf;
    const std::size_t record = ds.feature_len * 4 + 4 + 4 + 1;
    buf.reserve(16 + ds.size() * record + 4);
    buf.insert(buf.end(), kDatasetMagic, kDatasetMagic + 4);
    detail::append_le<std::uint32_t>(buf, kDatasetVersion);
    detail::append_le<std::uint64_t>(buf, ds.size());
    detail::append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ds.feature_len));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const float* r = ds.row(i);
        for (std::size_t j = 0; j < ds.feature_len; ++j) detail::append_le<float>(buf, r[j]);
        detail::append_le<float>(buf, ds.target_p[i]);
        detail::append_le<float>(buf, ds.target_logr[i]);
        buf.push_back(ds.gamma_class[i]);
    }
    detail::append_le<std::uint32_t>(buf, crc32(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw data_error("write failed: " + path.string());
    out.close();

    std::ofstream side(path.string() + ".manifest", std::ios::trunc);
    if (!side) throw data_error("cannot open for writing: " + path.string() + ".manifest");
    side << manifest_text(mf);
    side.close();
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open manifest: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw format_error("manifest parse: " + std::string(e.what()));
    }
    return manifest_from_json(j);
}

inline std::uint64_t manifest_file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open manifest: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a64(text);
}

inline std::pair<Dataset, DatasetManifest> load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open dataset: " + path.string());
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (buf.size() < 24) throw truncated_error("dataset file shorter than its header: " + path.string());
    if (std::memcmp(buf.data(), kDatasetMagic, 4) != 0)
        throw format_error("bad magic bytes in " + path.string());
    const auto version = detail::read_le<std::uint32_t>(buf.data() + 4);
    if (version != kDatasetVersion)
        throw version_error("dataset format version " + std::to_string(version) + " unsupported (expected " +
                            std::to_string(kDatasetVersion) + ")");
    const auto count = detail::read_le<std::uint64_t>(buf.data() + 8);
    const auto feat_len = detail::read_le<std::uint32_t>(buf.data() + 16);
    const std::size_t record = static_cast<std::size_t>(feat_len) * 4 + 9;
    const std::size_t expected = 20 + count * record + 4;
    if (buf.size() != expected)
        throw truncated_error("dataset size mismatch: expected " + std::to_string(expected) + " bytes, got " +
                              std::to_string(buf.size()));

    const auto stored_crc = detail::read_le<std::uint32_t>(buf.data() + buf.size() - 4);
    const auto actual_crc = crc32(buf.data(), buf.size() - 4);
    if (stored_crc != actual_crc) throw checksum_error("dataset CRC mismatch in " + path.string());

    Dataset ds;
    ds.feature_len = feat_len;
    ds.resize_rows(count);
    const std::uint8_t* p = buf.data() + 20;
    for (std::size_t i = 0; i < count; ++i) {
        float* r = ds.row(i);
        for (std::uint32_t j = 0; j < feat_len; ++j, p += 4) r[j] = detail::read_le<float>(p);
        ds.target_p[i] = detail::read_le<float>(p);
        p += 4;
        ds.target_logr[i] = detail::read_le<float>(p);
        p += 4;
        ds.gamma_class[i] = *p++;
    }

    DatasetManifest mf = load_manifest(path.string() + ".manifest");
    return {std::move(ds), std::move(mf)};
}

} // namespace imn
