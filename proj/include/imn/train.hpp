#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "imn/dataset.hpp"
#include "imn/errors.hpp"
#include "imn/loss.hpp"
#include "imn/model.hpp"
#include "imn/optim.hpp"

namespace imn {

struct TrainConfig {
    LossWeights lambdas;
    double learning_rate = 0.001;
    std::size_t batch_size = 64;
    std::size_t max_epochs = 50;
    double smoothing_r = 0.1;
    std::size_t patience = 10;
    std::uint64_t seed = 1;
    NmseMode nmse_mode = NmseMode::Global;

    void validate() const {
        lambdas.validate();
        if (!(learning_rate > 0.0)) throw config_error("TrainConfig: learning rate must be > 0");
        if (batch_size < 2) throw config_error("TrainConfig: batch size must be >= 2");
        if (max_epochs < 1) throw config_error("TrainConfig: max_epochs must be >= 1");
        if (!(smoothing_r >= 0.0 && smoothing_r < 1.0))
            throw config_error("TrainConfig: smoothing must lie in [0,1)");
    }
};

struct EpochMetrics {
    std::size_t epoch = 0;
    std::string split;
    double nmse_p = std::numeric_limits<double>::quiet_NaN();
    double nmse_r = std::numeric_limits<double>::quiet_NaN();
    double acc_gamma = std::numeric_limits<double>::quiet_NaN();
    double loss_p = 0.0;
    double loss_r = 0.0;
    double loss_gamma = 0.0;
    double loss_joint = 0.0;
    double seconds = 0.0;
    double nmse_p_raw = std::numeric_limits<double>::quiet_NaN();
    double nmse_r_raw = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

// Accumulates split-level metrics over minibatches. NMSE columns are always
// normalized by the training-split target variance (the manifest's global
// denominators); loss columns follow the configured NMSE mode.
struct MetricAccum {
    double sse_p = 0.0, sse_r = 0.0;
    double sse_p_raw = 0.0, sse_r_raw = 0.0;
    double loss_p_sum = 0.0, loss_r_sum = 0.0, loss_gamma_sum = 0.0;
    std::size_t correct = 0;
    std::size_t n = 0;
    bool has_p = false, has_r = false, has_gamma = false;

    void add(const ModelOutput<float>& out, const BatchTargets& tgt, const LossValues& loss,
             const DatasetManifest& mf) {
        const std::size_t b = tgt.batch;
        n += b;
        if (!out.p_hat.empty()) {
            has_p = true;
            loss_p_sum += loss.p * static_cast<double>(b);
            const auto& st = mf.standardizer;
            for (std::size_t i = 0; i < b; ++i) {
                const double d = static_cast<double>(out.p_hat[i]) - static_cast<double>(tgt.target_p[i]);
                sse_p += d * d;
                const double raw_d = st.unstandardize_p(out.p_hat[i]) - st.unstandardize_p(tgt.target_p[i]);
                sse_p_raw += raw_d * raw_d;
            }
        }
        if (!out.r_hat.empty()) {
            has_r = true;
            loss_r_sum += loss.r * static_cast<double>(b);
            const auto& st = mf.standardizer;
            for (std::size_t i = 0; i < b; ++i) {
                const double d = static_cast<double>(out.r_hat[i]) - static_cast<double>(tgt.target_logr[i]);
                sse_r += d * d;
                const double raw_d = std::pow(10.0, st.unstandardize_logr(out.r_hat[i])) -
                                     std::pow(10.0, st.unstandardize_logr(tgt.target_logr[i]));
                sse_r_raw += raw_d * raw_d;
            }
        }
        if (!out.gamma_logits.empty()) {
            has_gamma = true;
            loss_gamma_sum += loss.gamma * static_cast<double>(b);
            for (std::size_t i = 0; i < b; ++i) {
                const float* row = out.gamma_logits.data() + i * out.num_classes;
                std::size_t arg = 0;
                for (std::size_t c = 1; c < out.num_classes; ++c)
                    if (row[c] > row[arg]) arg = c;
                correct += arg == tgt.gamma_class[i];
            }
        }
    }

    EpochMetrics finalize(std::size_t epoch, const std::string& split, const DatasetManifest& mf,
                          const LossWeights& lw, double seconds) const {
        EpochMetrics em;
        em.epoch = epoch;
        em.split = split;
        em.seconds = seconds;
        const double dn = static_cast<double>(n);
        if (has_p) {
            em.nmse_p = sse_p / (dn * mf.std_target_var_p);
            em.loss_p = loss_p_sum / dn;
            const double raw_var = mf.standardizer.p_std * mf.standardizer.p_std * mf.std_target_var_p;
            em.nmse_p_raw = raw_var > 0.0 ? sse_p_raw / (dn * raw_var) : std::numeric_limits<double>::quiet_NaN();
        }
        if (has_r) {
            em.nmse_r = sse_r / (dn * mf.std_target_var_logr);
            em.loss_r = loss_r_sum / dn;
            em.nmse_r_raw =
                mf.r_linear_var > 0.0 ? sse_r_raw / (dn * mf.r_linear_var) : std::numeric_limits<double>::quiet_NaN();
        }
        if (has_gamma) {
            em.acc_gamma = static_cast<double>(correct) / dn;
            em.loss_gamma = loss_gamma_sum / dn;
        }
        em.loss_joint = lw.lambda_p * em.loss_p + lw.lambda_r * em.loss_r + lw.lambda_gamma * em.loss_gamma;
        return em;
    }
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace detail

// Assembles the feature block and target views for a set of row indices.
struct BatchBuffer {
    std::vector<float> features;
    std::vector<float> target_p, target_logr;
    std::vector<std::uint8_t> gamma_class;

    void fill(const Dataset& ds, const std::size_t* idx, std::size_t count) {
        features.resize(count * ds.feature_len);
        target_p.resize(count);
        target_logr.resize(count);
        gamma_class.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t row = idx[i];
            std::copy(ds.row(row), ds.row(row) + ds.feature_len, features.data() + i * ds.feature_len);
            target_p[i] = ds.target_p[row];
            target_logr[i] = ds.target_logr[row];
            gamma_class[i] = ds.gamma_class[row];
        }
    }

    BatchTargets targets() const { return {target_p.data(), target_logr.data(), gamma_class.data(), target_p.size()}; }
};

// Metrics pass over a whole split for any forward function
// (const float* features, std::size_t count) -> ModelOutput<float>.
// Chunked to bound activation memory; results do not depend on chunking.
template <typename Fwd>
EpochMetrics evaluate_with(Fwd&& fwd, const Dataset& split, const DatasetManifest& mf, const LossWeights& lw,
                           NmseMode mode, double smoothing_r, std::size_t epoch, const std::string& tag,
                           std::size_t chunk = 512) {
    const auto t0 = std::chrono::steady_clock::now();
    detail::MetricAccum accum;
    BatchBuffer buf;
    std::vector<std::size_t> idx(split.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t at = 0; at < split.size(); at += chunk) {
        const std::size_t count = std::min(chunk, split.size() - at);
        buf.fill(split, idx.data() + at, count);
        const ModelOutput<float> out = fwd(buf.features.data(), count);
        const auto tgt = buf.targets();
        const auto loss = joint_loss(out, tgt, lw, mode, mf.std_target_var_p, mf.std_target_var_logr, smoothing_r);
        accum.add(out, tgt, loss, mf);
    }
    return accum.finalize(epoch, tag, mf, lw, detail::seconds_since(t0));
}

// Eval-mode pass over a whole split.
inline EpochMetrics evaluate_split(Model<float>& model, const Dataset& split, const DatasetManifest& mf,
                                   const LossWeights& lw, NmseMode mode, double smoothing_r, std::size_t epoch,
                                   const std::string& tag, std::size_t chunk = 512) {
    ForwardCache<float> cache;
    return evaluate_with(
        [&](const float* features, std::size_t count) {
            return forward(model, features, count, RunMode::Eval, nullptr, cache);
        },
        split, mf, lw, mode, smoothing_r, epoch, tag, chunk);
}

struct FitResult {
    std::vector<EpochMetrics> history;
    std::size_t best_epoch = 0;
    double best_val_joint = std::numeric_limits<double>::infinity();
    std::size_t epochs_run = 0;
    double train_seconds = 0.0; // training phases only, excluding eval passes
};

// Minibatch training with seeded shuffling, per-epoch val/test evaluation,
// and early stopping that restores the best-validation parameters.
inline FitResult fit(Model<float>& model, const Dataset& train, const Dataset& val, const Dataset& test,
                     const DatasetManifest& mf, const TrainConfig& tc) {
    tc.validate();
    model.cfg.validate();
    const std::size_t feat = model.cfg.in_channels * model.cfg.input_len;
    if (train.feature_len != feat)
        throw config_error("fit: dataset feature length " + std::to_string(train.feature_len) +
                           " does not match the model input " + std::to_string(feat));
    if (model.cfg.head_gamma && model.cfg.num_classes != mf.class_map.size())
        throw config_error("fit: model class count does not match the dataset class map");

    const double var_p = mf.std_target_var_p, var_lr = mf.std_target_var_logr;
    // Loss weights for absent heads are forced to zero so STL joint losses
    // contain exactly one term.
    LossWeights lw = tc.lambdas;
    if (!model.cfg.head_p) lw.lambda_p = 0.0;
    if (!model.cfg.head_r) lw.lambda_r = 0.0;
    if (!model.cfg.head_gamma) lw.lambda_gamma = 0.0;
    lw.validate();

    auto adam = init_adam(model.cfg, model.params);
    const AdamConfig ac{tc.learning_rate, 0.9, 0.999, 1e-8};
    auto grads = make_params<float>(model.cfg);

    FitResult result;
    ModelParams<float> best_params = model.params;
    std::size_t stale_epochs = 0;

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    BatchBuffer buf;
    ForwardCache<float> cache;

    for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Xoshiro256 shuffle_rng(mix_seed(tc.seed, 0x53485546u /*"SHUF"*/, epoch));
        deterministic_shuffle(order, shuffle_rng);
        Xoshiro256 dropout_rng(mix_seed(tc.seed, 0x44524f50u /*"DROP"*/, epoch));

        detail::MetricAccum accum;
        std::size_t batch_index = 0;
        for (std::size_t at = 0; at < train.size(); at += tc.batch_size, ++batch_index) {
            const std::size_t count = std::min(tc.batch_size, train.size() - at);
            if (count < 2) break; // batch-norm needs a population of 2
            buf.fill(train, order.data() + at, count);
            const auto out = forward(model, buf.features.data(), count, RunMode::Train, &dropout_rng, cache);
            const auto tgt = buf.targets();
            const auto loss = joint_loss(out, tgt, lw, tc.nmse_mode, var_p, var_lr, tc.smoothing_r);
            if (!std::isfinite(loss.joint))
                throw numeric_error("fit: non-finite joint loss at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_index) + " (p=" + std::to_string(loss.p) +
                                    ", r=" + std::to_string(loss.r) + ", gamma=" + std::to_string(loss.gamma) + ")");
            accum.add(out, tgt, loss, mf);

            const auto og = joint_loss_backward(out, tgt, lw, tc.nmse_mode, var_p, var_lr, tc.smoothing_r);
            zero_grads(model.cfg, grads);
            backward(model, cache, og, grads);
            adam_step(model.cfg, model.params, grads, adam, ac);
        }
        const double train_secs = detail::seconds_since(t0);
        result.train_seconds += train_secs;
        result.history.push_back(accum.finalize(epoch, "train", mf, lw, train_secs));

        const auto val_metrics =
            evaluate_split(model, val, mf, lw, tc.nmse_mode, tc.smoothing_r, epoch, "val");
        result.history.push_back(val_metrics);
        result.history.push_back(
            evaluate_split(model, test, mf, lw, tc.nmse_mode, tc.smoothing_r, epoch, "test"));

        result.epochs_run = epoch;
        if (val_metrics.loss_joint < result.best_val_joint) {
            result.best_val_joint = val_metrics.loss_joint;
            result.best_epoch = epoch;
            best_params = model.params;
            stale_epochs = 0;
        } else if (++stale_epochs >= tc.patience) {
            break;
        }
    }

    model.params = best_params;
    return result;
}

// Single-task baseline: same trunk, one head, one loss term.
inline FitResult fit_stl(Task task, Model<float>& stl_model, const Dataset& train, const Dataset& val,
                         const Dataset& test, const DatasetManifest& mf, const TrainConfig& tc) {
    const bool ok = stl_model.cfg.head_p == (task == Task::P) && stl_model.cfg.head_r == (task == Task::R) &&
                    stl_model.cfg.head_gamma == (task == Task::Gamma);
    if (!ok) throw config_error("fit_stl: model heads do not match task " + to_string(task));
    return fit(stl_model, train, val, test, mf, tc);
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "epoch,split,nmse_p,nmse_r,acc_gamma,loss_p,loss_r,loss_gamma,loss_joint,seconds,nmse_p_raw,nmse_r_raw";

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail

inline std::string metrics_csv_row(const EpochMetrics& em) {
    std::string row = std::to_string(em.epoch) + "," + em.split;
    for (double v : {em.nmse_p, em.nmse_r, em.acc_gamma, em.loss_p, em.loss_r, em.loss_gamma, em.loss_joint,
                     em.seconds, em.nmse_p_raw, em.nmse_r_raw})
        row += "," + detail::format_double(v);
    return row;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot open for writing: " + path.string());
    out << kMetricsHeader << "\n";
    for (const auto& em : history) out << metrics_csv_row(em) << "\n";
    if (!out) throw data_error("write failed: " + path.string());
}

inline std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open metrics CSV: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader)
        throw format_error("metrics CSV header mismatch in " + path.string());
    std::vector<EpochMetrics> history;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == ',') {
                cells.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        }
        if (cells.size() != 12) throw format_error("metrics CSV row with wrong arity in " + path.string());
        EpochMetrics em;
        em.epoch = std::stoull(cells[0]);
        em.split = cells[1];
        em.nmse_p = std::stod(cells[2]);
        em.nmse_r = std::stod(cells[3]);
        em.acc_gamma = std::stod(cells[4]);
        em.loss_p = std::stod(cells[5]);
        em.loss_r = std::stod(cells[6]);
        em.loss_gamma = std::stod(cells[7]);
        em.loss_joint = std::stod(cells[8]);
        em.seconds = std::stod(cells[9]);
        em.nmse_p_raw = std::stod(cells[10]);
        em.nmse_r_raw = std::stod(cells[11]);
        history.push_back(std::move(em));
    }
    return history;
}

} // namespace imn
