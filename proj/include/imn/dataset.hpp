#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "imn/channel.hpp"
#include "imn/errors.hpp"
#include "imn/rng.hpp"

namespace imn {

enum class FeatureView { Magnitude, Real, IQ };
enum class FeatureStats { Global, PerPosition };

struct DatasetConfig {
    std::vector<double> p_grid = {0.0, 0.1};
    std::vector<double> r_grid = {1.0, 10.0, 100.0, 1000.0};
    std::vector<double> gamma_grid = {1.0, 10.0, 50.0, 100.0};
    std::size_t n_per_config = 40000;
    std::size_t seq_len = 100;
    double snr_db = 15.0;
    std::uint64_t master_seed = 1;
    double threshold_eps = 1e-4;

    FeatureView feature_view = FeatureView::Magnitude;
    FeatureStats feature_stats = FeatureStats::Global;
    FadingKind fading = FadingKind::Complex;
    SourceKind source = SourceKind::Qpsk;
    SnrReference snr_ref = SnrReference::Background;
    bool per_seq_norm = false;

    double train_frac = 0.70;
    double val_frac = 0.15;
    double test_frac = 0.15;

    std::size_t configurations() const { return p_grid.size() * r_grid.size() * gamma_grid.size(); }
    std::size_t total_sequences() const { return configurations() * n_per_config; }

    std::size_t feature_len() const { return feature_view == FeatureView::IQ ? 2 * seq_len : seq_len; }

    void validate() const {
        if (p_grid.empty() || r_grid.empty() || gamma_grid.empty())
            throw config_error("DatasetConfig: all parameter grids must be nonempty");
        if (n_per_config < 1) throw config_error("DatasetConfig: n_per_config must be >= 1");
        if (seq_len < 1) throw config_error("DatasetConfig: seq_len must be >= 1");
        if (threshold_eps < 0.0) throw config_error("DatasetConfig: threshold_eps must be >= 0");
        if (!(train_frac > 0.0 && val_frac > 0.0 && test_frac > 0.0))
            throw config_error("DatasetConfig: split fractions must be positive");
        if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
            throw config_error("DatasetConfig: split fractions must sum to 1");
        for (double r : r_grid)
            if (!(r > 0.0)) throw config_error("DatasetConfig: R grid values must be > 0");
        std::vector<double> sorted = gamma_grid;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw config_error("DatasetConfig: gamma grid has duplicate values");
        for (double p : p_grid)
            for (double gamma : gamma_grid)
                if (p / gamma > 1.0 || (1.0 - p) / gamma > 1.0)
                    throw std::domain_error("DatasetConfig: infeasible (p, gamma) pair (" + std::to_string(p) +
                                            ", " + std::to_string(gamma) + ")");
    }
};

// Gamma value -> class index, ascending over the grid.
using ClassMap = std::vector<double>;

inline ClassMap make_class_map(const std::vector<double>& gamma_grid) {
    ClassMap map = gamma_grid;
    std::sort(map.begin(), map.end());
    return map;
}

inline std::uint8_t encode_gamma(double gamma, const ClassMap& map) {
    const auto it = std::find(map.begin(), map.end(), gamma);
    if (it == map.end()) throw std::domain_error("encode_gamma: unknown gamma value " + std::to_string(gamma));
    return static_cast<std::uint8_t>(it - map.begin());
}

inline double decode_gamma(std::uint8_t cls, const ClassMap& map) {
    if (cls >= map.size()) throw std::domain_error("decode_gamma: class index out of range");
    return map[cls];
}

// Real-valued view of a received sequence.
inline std::vector<double> featurize(const ComplexSequence& y, FeatureView view = FeatureView::Magnitude) {
    std::vector<double> features;
    switch (view) {
    case FeatureView::Magnitude:
        features.resize(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) features[i] = std::abs(y[i]);
        break;
    case FeatureView::Real:
        features.resize(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) features[i] = y[i].real();
        break;
    case FeatureView::IQ:
        features.resize(2 * y.size());
        for (std::size_t i = 0; i < y.size(); ++i) {
            features[2 * i] = y[i].real();
            features[2 * i + 1] = y[i].imag();
        }
        break;
    }
    return features;
}

inline void threshold_small(std::vector<double>& features, double eps) {
    if (eps < 0.0) throw std::domain_error("threshold_small: eps must be >= 0");
    for (double& f : features)
        if (std::abs(f) < eps) f = 0.0;
}

inline void max_abs_normalize(std::vector<double>& features) {
    double peak = 0.0;
    for (double f : features) peak = std::max(peak, std::abs(f));
    if (peak > 0.0)
        for (double& f : features) f /= peak;
}

inline double log_transform_r(double r) {
    if (!(r > 0.0)) throw std::domain_error("log_transform_r: R must be > 0, got " + std::to_string(r));
    return std::log10(r);
}

// One preprocessed record.
struct Example {
    std::vector<float> features;
    float target_p = 0.0f;
    float target_logr = 0.0f;
    std::uint8_t gamma_class = 0;
};

// Column-major store of examples; feature rows are contiguous.
struct Dataset {
    std::size_t feature_len = 0;
    std::vector<float> features; // size() * feature_len
    std::vector<float> target_p;
    std::vector<float> target_logr;
    std::vector<std::uint8_t> gamma_class;

    std::size_t size() const { return target_p.size(); }

    const float* row(std::size_t i) const { return features.data() + i * feature_len; }
    float* row(std::size_t i) { return features.data() + i * feature_len; }

    void reserve_rows(std::size_t n) {
        features.reserve(n * feature_len);
        target_p.reserve(n);
        target_logr.reserve(n);
        gamma_class.reserve(n);
    }

    void resize_rows(std::size_t n) {
        features.resize(n * feature_len);
        target_p.resize(n);
        target_logr.resize(n);
        gamma_class.resize(n);
    }

    Example example(std::size_t i) const {
        Example e;
        e.features.assign(row(i), row(i) + feature_len);
        e.target_p = target_p[i];
        e.target_logr = target_logr[i];
        e.gamma_class = gamma_class[i];
        return e;
    }

    void push_example(const Example& e) {
        features.insert(features.end(), e.features.begin(), e.features.end());
        target_p.push_back(e.target_p);
        target_logr.push_back(e.target_logr);
        gamma_class.push_back(e.gamma_class);
    }
};

// Affine feature/target statistics, fitted on the training split only.
struct Standardizer {
    FeatureStats mode = FeatureStats::Global;
    std::vector<double> feature_mean = {0.0}; // one entry in Global mode
    std::vector<double> feature_std = {1.0};
    double p_mean = 0.0, p_std = 1.0;
    double logr_mean = 0.0, logr_std = 1.0;
    bool clamped = false; // any zero-variance dimension was clamped to std 1

    double standardize_p(double p) const { return (p - p_mean) / p_std; }
    double unstandardize_p(double z) const { return z * p_std + p_mean; }
    double standardize_logr(double lr) const { return (lr - logr_mean) / logr_std; }
    double unstandardize_logr(double z) const { return z * logr_std + logr_mean; }

    void standardize_features(float* row, std::size_t len) const {
        if (mode == FeatureStats::Global) {
            const double m = feature_mean[0], s = feature_std[0];
            for (std::size_t i = 0; i < len; ++i) row[i] = static_cast<float>((row[i] - m) / s);
        } else {
            for (std::size_t i = 0; i < len; ++i)
                row[i] = static_cast<float>((row[i] - feature_mean[i]) / feature_std[i]);
        }
    }
};

namespace detail {

inline std::pair<double, double> mean_and_population_std(const double* sum, const double* sum2, double n) {
    const double mean = *sum / n;
    const double var = std::max(0.0, *sum2 / n - mean * mean);
    return {mean, std::sqrt(var)};
}

} // namespace detail

// Population statistics over the given (training) split.
inline Standardizer fit_standardizer(const Dataset& train, FeatureStats mode = FeatureStats::Global) {
    if (train.size() == 0) throw data_error("fit_standardizer: empty training split");
    Standardizer st;
    st.mode = mode;
    const std::size_t n = train.size(), len = train.feature_len;

    if (mode == FeatureStats::Global) {
        double sum = 0.0, sum2 = 0.0;
        for (float f : train.features) {
            sum += f;
            sum2 += static_cast<double>(f) * f;
        }
        auto [m, s] = detail::mean_and_population_std(&sum, &sum2, static_cast<double>(n * len));
        if (s == 0.0) {
            s = 1.0;
            st.clamped = true;
        }
        st.feature_mean = {m};
        st.feature_std = {s};
    } else {
        st.feature_mean.assign(len, 0.0);
        st.feature_std.assign(len, 0.0);
        std::vector<double> sum(len, 0.0), sum2(len, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const float* r = train.row(i);
            for (std::size_t j = 0; j < len; ++j) {
                sum[j] += r[j];
                sum2[j] += static_cast<double>(r[j]) * r[j];
            }
        }
        for (std::size_t j = 0; j < len; ++j) {
            auto [m, s] = detail::mean_and_population_std(&sum[j], &sum2[j], static_cast<double>(n));
            if (s == 0.0) {
                s = 1.0;
                st.clamped = true;
            }
            st.feature_mean[j] = m;
            st.feature_std[j] = s;
        }
    }

    auto target_stats = [&](const std::vector<float>& t, double& mean, double& stddev) {
        double sum = 0.0, sum2 = 0.0;
        for (float v : t) {
            sum += v;
            sum2 += static_cast<double>(v) * v;
        }
        auto [m, s] = detail::mean_and_population_std(&sum, &sum2, static_cast<double>(t.size()));
        if (s == 0.0) {
            s = 1.0;
            st.clamped = true;
        }
        mean = m;
        stddev = s;
    };
    target_stats(train.target_p, st.p_mean, st.p_std);
    target_stats(train.target_logr, st.logr_mean, st.logr_std);
    return st;
}

inline void apply_standardizer(const Standardizer& st, Dataset& ds) {
    for (std::size_t i = 0; i < ds.size(); ++i) st.standardize_features(ds.row(i), ds.feature_len);
    for (auto& t : ds.target_p) t = static_cast<float>(st.standardize_p(t));
    for (auto& t : ds.target_logr) t = static_cast<float>(st.standardize_logr(t));
}

struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};

// Stratified by gamma class: per-class shuffles, boundaries by rounding so the
// class proportions in every split match the global ones within one example.
inline SplitIndices stratified_split(const std::vector<std::uint8_t>& classes, double train_frac, double val_frac,
                                     double test_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0 && val_frac > 0.0 && test_frac > 0.0) ||
        std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
        throw config_error("stratified_split: fractions must be positive and sum to 1");

    std::map<std::uint8_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < classes.size(); ++i) by_class[classes[i]].push_back(i);

    SplitIndices out;
    Xoshiro256 rng(seed);
    for (auto& [cls, indices] : by_class) {
        if (indices.size() < 3)
            throw data_error("stratified_split: class " + std::to_string(cls) + " has fewer than 3 examples");
        deterministic_shuffle(indices, rng);
        const auto n = static_cast<double>(indices.size());
        const auto b1 = static_cast<std::size_t>(std::llround(n * train_frac));
        const auto b2 = static_cast<std::size_t>(std::llround(n * (train_frac + val_frac)));
        out.train.insert(out.train.end(), indices.begin(), indices.begin() + b1);
        out.val.insert(out.val.end(), indices.begin() + b1, indices.begin() + b2);
        out.test.insert(out.test.end(), indices.begin() + b2, indices.end());
    }
    return out;
}

// Raw generation output, one entry per sequence.
struct RawSequence {
    ComplexSequence y;
    NoiseSpec spec;
    std::size_t config_index = 0;
};

inline double background_variance_for(const DatasetConfig& cfg, double p, double r) {
    const double sigma = snr_to_noise_variance(cfg.snr_db, 1.0);
    if (cfg.snr_ref == SnrReference::Total) return sigma / (1.0 - p + p * r);
    return sigma;
}

// Materialized raw dataset; use build_splits for anything large.
inline std::vector<RawSequence> generate(const DatasetConfig& cfg) {
    cfg.validate();
    std::vector<RawSequence> out;
    out.reserve(cfg.total_sequences());
    const ChannelOptions copts{cfg.fading, cfg.source};
    std::size_t config_index = 0;
    for (double p : cfg.p_grid) {
        for (double r : cfg.r_grid) {
            for (double gamma : cfg.gamma_grid) {
                const NoiseSpec spec{p, r, gamma, background_variance_for(cfg, p, r)};
                for (std::size_t i = 0; i < cfg.n_per_config; ++i) {
                    auto [y, states] = received_sequence(spec, cfg.seq_len,
                                                         mix_seed(cfg.master_seed, config_index, i), copts);
                    out.push_back({std::move(y), spec, config_index});
                }
                ++config_index;
            }
        }
    }
    return out;
}

// All DatasetManifest fields that are not the standardizer or class map.
struct DatasetManifest {
    std::uint32_t format_version = 1;
    DatasetConfig config;
    ClassMap class_map;
    std::size_t n_train = 0, n_val = 0, n_test = 0;
    Standardizer standardizer;

    // Global-normalization denominators and raw-scale reference statistics,
    // all over the training split.
    double std_target_var_p = 1.0;
    double std_target_var_logr = 1.0;
    double r_linear_mean = 0.0;
    double r_linear_var = 1.0;
};

struct BuiltDataset {
    Dataset train, val, test;
    DatasetManifest manifest;
};

// Full pipeline: generate -> featurize -> threshold -> log R -> encode ->
// stratified split -> fit standardizer on train -> apply everywhere.
inline BuiltDataset build_splits(const DatasetConfig& cfg) {
    cfg.validate();
    const ClassMap class_map = make_class_map(cfg.gamma_grid);
    const std::size_t total = cfg.total_sequences();
    const std::size_t feat_len = cfg.feature_len();

    // Labels are pure functions of the grid; compute them and the split first.
    std::vector<float> raw_p(total), raw_logr(total);
    std::vector<std::uint8_t> cls(total);
    {
        std::size_t at = 0;
        for (double p : cfg.p_grid)
            for (double r : cfg.r_grid)
                for (double gamma : cfg.gamma_grid) {
                    const auto c = encode_gamma(gamma, class_map);
                    const auto logr = static_cast<float>(log_transform_r(r));
                    for (std::size_t i = 0; i < cfg.n_per_config; ++i, ++at) {
                        raw_p[at] = static_cast<float>(p);
                        raw_logr[at] = logr;
                        cls[at] = c;
                    }
                }
    }
    const SplitIndices split = stratified_split(cls, cfg.train_frac, cfg.val_frac, cfg.test_frac,
                                                mix_seed(cfg.master_seed, 0x53504c49u /*"SPLI"*/));

    // Global index -> (split id, row) so features stream straight into splits.
    std::vector<std::uint8_t> split_of(total);
    std::vector<std::size_t> row_of(total);
    auto assign = [&](const std::vector<std::size_t>& idx, std::uint8_t id) {
        for (std::size_t r = 0; r < idx.size(); ++r) {
            split_of[idx[r]] = id;
            row_of[idx[r]] = r;
        }
    };
    assign(split.train, 0);
    assign(split.val, 1);
    assign(split.test, 2);

    BuiltDataset out;
    Dataset* splits[3] = {&out.train, &out.val, &out.test};
    const std::size_t counts[3] = {split.train.size(), split.val.size(), split.test.size()};
    for (int s = 0; s < 3; ++s) {
        splits[s]->feature_len = feat_len;
        splits[s]->resize_rows(counts[s]);
    }
    for (std::size_t i = 0; i < total; ++i) {
        Dataset& ds = *splits[split_of[i]];
        const std::size_t r = row_of[i];
        ds.target_p[r] = raw_p[i];
        ds.target_logr[r] = raw_logr[i];
        ds.gamma_class[r] = cls[i];
    }

    // Generation + featurization, written straight into the split rows.
    const ChannelOptions copts{cfg.fading, cfg.source};
    {
        std::size_t config_index = 0, at = 0;
        for (double p : cfg.p_grid)
            for (double r : cfg.r_grid)
                for (double gamma : cfg.gamma_grid) {
                    const NoiseSpec spec{p, r, gamma, background_variance_for(cfg, p, r)};
                    for (std::size_t i = 0; i < cfg.n_per_config; ++i, ++at) {
                        auto [y, states] = received_sequence(spec, cfg.seq_len,
                                                             mix_seed(cfg.master_seed, config_index, i), copts);
                        auto feats = featurize(y, cfg.feature_view);
                        if (cfg.per_seq_norm) max_abs_normalize(feats);
                        threshold_small(feats, cfg.threshold_eps);
                        float* dst = splits[split_of[at]]->row(row_of[at]);
                        for (std::size_t j = 0; j < feat_len; ++j) dst[j] = static_cast<float>(feats[j]);
                    }
                    ++config_index;
                }
    }

    DatasetManifest& mf = out.manifest;
    mf.config = cfg;
    mf.class_map = class_map;
    mf.n_train = counts[0];
    mf.n_val = counts[1];
    mf.n_test = counts[2];

    // Raw-scale linear-R reference statistics before standardization.
    {
        double sum = 0.0, sum2 = 0.0;
        for (float lr : out.train.target_logr) {
            const double r = std::pow(10.0, static_cast<double>(lr));
            sum += r;
            sum2 += r * r;
        }
        const double n = static_cast<double>(out.train.size());
        mf.r_linear_mean = sum / n;
        mf.r_linear_var = std::max(0.0, sum2 / n - mf.r_linear_mean * mf.r_linear_mean);
    }

    mf.standardizer = fit_standardizer(out.train, cfg.feature_stats);
    for (int s = 0; s < 3; ++s) apply_standardizer(mf.standardizer, *splits[s]);

    // Standardized training-target variances: the global NMSE denominators.
    auto population_var = [](const std::vector<float>& v) {
        double sum = 0.0, sum2 = 0.0;
        for (float x : v) {
            sum += x;
            sum2 += static_cast<double>(x) * x;
        }
        const double m = sum / static_cast<double>(v.size());
        return std::max(0.0, sum2 / static_cast<double>(v.size()) - m * m);
    };
    mf.std_target_var_p = population_var(out.train.target_p);
    mf.std_target_var_logr = population_var(out.train.target_logr);
    if (mf.std_target_var_p == 0.0) mf.std_target_var_p = 1.0;
    if (mf.std_target_var_logr == 0.0) mf.std_target_var_logr = 1.0;
    return out;
}

// Preprocessing for a single raw sequence at inference time; mirrors
// build_splits exactly.
inline std::vector<float> preprocess_sequence(const ComplexSequence& y, const DatasetConfig& cfg,
                                              const Standardizer& st) {
    if (y.size() != cfg.seq_len)
        throw data_error("preprocess_sequence: expected length " + std::to_string(cfg.seq_len) + ", got " +
                         std::to_string(y.size()));
    auto feats = featurize(y, cfg.feature_view);
    if (cfg.per_seq_norm) max_abs_normalize(feats);
    threshold_small(feats, cfg.threshold_eps);
    std::vector<float> out(feats.size());
    for (std::size_t i = 0; i < feats.size(); ++i) out[i] = static_cast<float>(feats[i]);
    st.standardize_features(out.data(), out.size());
    return out;
}

} // namespace imn
