#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "imn/channel.hpp"
#include "imn/checkpoint.hpp"
#include "imn/dataset.hpp"
#include "imn/dataset_io.hpp"
#include "imn/errors.hpp"
#include "imn/train.hpp"

namespace imn {

inline void require_manifest_match(std::uint64_t checkpoint_hash, const DatasetManifest& mf) {
    const std::uint64_t actual = manifest_hash(mf);
    if (checkpoint_hash != actual)
        throw data_error("manifest hash mismatch: checkpoint was trained against a different preprocessing "
                         "pipeline (expected " +
                         std::to_string(checkpoint_hash) + ", dataset has " + std::to_string(actual) + ")");
}

// Full-metrics evaluation of a trained model on a preprocessed split,
// refusing datasets whose manifest differs from the one the model saw.
inline EpochMetrics evaluate(Model<float>& model, const Dataset& split, const DatasetManifest& mf,
                             std::uint64_t checkpoint_hash, const LossWeights& lw = {},
                             NmseMode mode = NmseMode::Global, double smoothing_r = 0.1,
                             const std::string& tag = "test") {
    require_manifest_match(checkpoint_hash, mf);
    LossWeights masked = lw;
    if (!model.cfg.head_p) masked.lambda_p = 0.0;
    if (!model.cfg.head_r) masked.lambda_r = 0.0;
    if (!model.cfg.head_gamma) masked.lambda_gamma = 0.0;
    return evaluate_split(model, split, mf, masked, mode, smoothing_r, 0, tag);
}

// ---------------------------------------------------------------------------
// End-to-end prediction with inverse preprocessing
// ---------------------------------------------------------------------------

struct Prediction {
    double p_hat = std::numeric_limits<double>::quiet_NaN();     // raw probability scale
    double r_hat = std::numeric_limits<double>::quiet_NaN();     // linear ratio scale
    double gamma_hat = std::numeric_limits<double>::quiet_NaN(); // grid value
    std::vector<double> gamma_probs;
};

// Inverse transforms applied to standardized model outputs.
inline Prediction invert_outputs(const ModelOutput<float>& out, std::size_t index, const DatasetManifest& mf) {
    const auto& st = mf.standardizer;
    Prediction pred;
    if (!out.p_hat.empty()) pred.p_hat = st.unstandardize_p(out.p_hat[index]);
    if (!out.r_hat.empty()) pred.r_hat = std::pow(10.0, st.unstandardize_logr(out.r_hat[index]));
    if (!out.gamma_logits.empty()) {
        const float* row = out.gamma_logits.data() + index * out.num_classes;
        double peak = row[0];
        for (std::size_t c = 1; c < out.num_classes; ++c) peak = std::max(peak, static_cast<double>(row[c]));
        double z = 0.0;
        pred.gamma_probs.resize(out.num_classes);
        for (std::size_t c = 0; c < out.num_classes; ++c) {
            pred.gamma_probs[c] = std::exp(static_cast<double>(row[c]) - peak);
            z += pred.gamma_probs[c];
        }
        std::size_t arg = 0;
        for (std::size_t c = 0; c < out.num_classes; ++c) {
            pred.gamma_probs[c] /= z;
            if (pred.gamma_probs[c] > pred.gamma_probs[arg]) arg = c;
        }
        pred.gamma_hat = decode_gamma(static_cast<std::uint8_t>(arg), mf.class_map);
    }
    return pred;
}

// One raw received sequence -> stored preprocessing -> forward pass ->
// inverse transforms.
inline Prediction predict(Model<float>& model, const ComplexSequence& y, const DatasetManifest& mf,
                          std::uint64_t checkpoint_hash) {
    require_manifest_match(checkpoint_hash, mf);
    const auto features = preprocess_sequence(y, mf.config, mf.standardizer);
    if (features.size() != model.cfg.in_channels * model.cfg.input_len)
        throw data_error("predict: feature length does not match the model input");
    const auto out = forward(model, features.data(), 1);
    return invert_outputs(out, 0, mf);
}

// ---------------------------------------------------------------------------
// MTL-vs-STL complexity benchmark
// ---------------------------------------------------------------------------

struct BenchRow {
    std::string name;
    std::size_t params = 0;
    double train_seconds = std::numeric_limits<double>::quiet_NaN();
    double infer_seconds = std::numeric_limits<double>::quiet_NaN();
};

struct BenchReport {
    std::vector<BenchRow> stl; // one row per single-task model
    BenchRow mtl;

    // Derived rows are always recomputed from the raw rows.
    std::size_t stl_total_params() const {
        std::size_t total = 0;
        for (const auto& row : stl) total += row.params;
        return total;
    }
    double stl_total_train() const {
        double total = 0.0;
        for (const auto& row : stl) total += row.train_seconds;
        return total;
    }
    double stl_total_infer() const {
        double total = 0.0;
        for (const auto& row : stl) total += row.infer_seconds;
        return total;
    }
    double param_reduction_pct() const {
        return 100.0 * (static_cast<double>(stl_total_params()) - static_cast<double>(mtl.params)) /
               static_cast<double>(stl_total_params());
    }
    double infer_reduction_pct() const { return 100.0 * (stl_total_infer() - mtl.infer_seconds) / stl_total_infer(); }
    double train_reduction_pct() const { return 100.0 * (stl_total_train() - mtl.train_seconds) / stl_total_train(); }
};

// Median wall time of a full forward pass over the split.
inline double time_inference(Model<float>& model, const Dataset& split, std::size_t repetitions,
                             std::size_t chunk = 1024) {
    if (repetitions < 3) throw config_error("time_inference: need at least 3 repetitions for a median");
    std::vector<double> times(repetitions);
    ForwardCache<float> cache;
    BatchBuffer buf;
    std::vector<std::size_t> idx(split.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (auto& t : times) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t at = 0; at < split.size(); at += chunk) {
            const std::size_t count = std::min(chunk, split.size() - at);
            buf.fill(split, idx.data() + at, count);
            forward(model, buf.features.data(), count, RunMode::Eval, nullptr, cache);
        }
        t = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

struct TimedModel {
    std::string name;
    Model<float>* model = nullptr;
    double train_seconds = std::numeric_limits<double>::quiet_NaN();
};

inline BenchReport benchmark(TimedModel mtl, std::vector<TimedModel> stl, const Dataset& test,
                             std::size_t repetitions = 3) {
    BenchReport report;
    for (auto& entry : stl) {
        BenchRow row;
        row.name = entry.name;
        row.params = total_trainable(entry.model->cfg);
        row.train_seconds = entry.train_seconds;
        row.infer_seconds = time_inference(*entry.model, test, repetitions);
        report.stl.push_back(std::move(row));
    }
    report.mtl.name = mtl.name;
    report.mtl.params = total_trainable(mtl.model->cfg);
    report.mtl.train_seconds = mtl.train_seconds;
    report.mtl.infer_seconds = time_inference(*mtl.model, test, repetitions);
    return report;
}

inline std::string bench_csv(const BenchReport& r) {
    std::string out = "model,params,inference_seconds,training_seconds\n";
    auto row = [&](const std::string& name, double params, double infer, double train) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s,%.0f,%.6f,%.3f\n", name.c_str(), params, infer, train);
        out += buf;
    };
    for (const auto& s : r.stl) row(s.name, static_cast<double>(s.params), s.infer_seconds, s.train_seconds);
    row("stl_total", static_cast<double>(r.stl_total_params()), r.stl_total_infer(), r.stl_total_train());
    row("mtl", static_cast<double>(r.mtl.params), r.mtl.infer_seconds, r.mtl.train_seconds);
    row("difference", static_cast<double>(r.mtl.params) - static_cast<double>(r.stl_total_params()),
        r.mtl.infer_seconds - r.stl_total_infer(), r.mtl.train_seconds - r.stl_total_train());
    char buf[160];
    std::snprintf(buf, sizeof(buf), "reduction_pct,%.1f,%.1f,%.1f\n", r.param_reduction_pct(),
                  r.infer_reduction_pct(), r.train_reduction_pct());
    out += buf;
    return out;
}

inline std::string bench_text(const BenchReport& r) {
    char line[200];
    std::string out;
    std::snprintf(line, sizeof(line), "%-12s %14s %18s %18s\n", "Model", "Params", "Inference (s)", "Training (s)");
    out += line;
    auto row = [&](const std::string& name, const std::string& params, double infer, double train) {
        std::snprintf(line, sizeof(line), "%-12s %14s %18.4f %18.2f\n", name.c_str(), params.c_str(), infer, train);
        out += line;
    };
    for (const auto& s : r.stl) row(s.name, std::to_string(s.params), s.infer_seconds, s.train_seconds);
    row("STL total", std::to_string(r.stl_total_params()), r.stl_total_infer(), r.stl_total_train());
    row("MTL", std::to_string(r.mtl.params), r.mtl.infer_seconds, r.mtl.train_seconds);
    std::snprintf(line, sizeof(line), "%-12s %14lld %18.4f %18.2f\n", "Difference",
                  static_cast<long long>(r.mtl.params) - static_cast<long long>(r.stl_total_params()),
                  r.mtl.infer_seconds - r.stl_total_infer(), r.mtl.train_seconds - r.stl_total_train());
    out += line;
    std::snprintf(line, sizeof(line), "%-12s %13.1f%% %17.1f%% %17.1f%%\n", "Reduction", r.param_reduction_pct(),
                  r.infer_reduction_pct(), r.train_reduction_pct());
    out += line;
    return out;
}

// ---------------------------------------------------------------------------
// Curve export (per-epoch metric histories)
// ---------------------------------------------------------------------------

inline std::string lambda_tag(const LossWeights& lw) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "lambda_%g-%g-%g", lw.lambda_p, lw.lambda_r, lw.lambda_gamma);
    return buf;
}

// One plotting-ready CSV per run, named by its loss weights.
inline std::filesystem::path export_curves(const std::vector<EpochMetrics>& history,
                                           const std::filesystem::path& dir, const LossWeights& lw) {
    if (history.empty()) throw data_error("export_curves: empty metric history");
    std::filesystem::create_directories(dir);
    const auto path = dir / ("curves_" + lambda_tag(lw) + ".csv");
    write_metrics_csv(path, history);
    return path;
}

// Minimal SVG line chart of one metric column across epochs, one polyline
// per split.
inline void render_metric_svg(const std::vector<EpochMetrics>& history, const std::string& column,
                              const std::filesystem::path& path) {
    auto value_of = [&](const EpochMetrics& em) {
        if (column == "nmse_p") return em.nmse_p;
        if (column == "nmse_r") return em.nmse_r;
        if (column == "acc_gamma") return em.acc_gamma;
        if (column == "loss_joint") return em.loss_joint;
        throw config_error("render_metric_svg: unknown column " + column);
    };

    const double width = 640, height = 420, margin = 50;
    double x_max = 1, y_min = 1e30, y_max = -1e30;
    for (const auto& em : history) {
        const double v = value_of(em);
        if (!std::isfinite(v)) continue;
        x_max = std::max(x_max, static_cast<double>(em.epoch));
        y_min = std::min(y_min, v);
        y_max = std::max(y_max, v);
    }
    if (y_min > y_max) throw data_error("render_metric_svg: no finite values for " + column);
    if (y_max - y_min < 1e-12) y_max = y_min + 1.0;

    auto px = [&](double epoch) { return margin + (epoch - 1) / std::max(1.0, x_max - 1) * (width - 2 * margin); };
    auto py = [&](double v) { return height - margin - (v - y_min) / (y_max - y_min) * (height - 2 * margin); };

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw data_error("cannot open for writing: " + path.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - margin << "\" y2=\""
        << height - margin << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\""
        << height - margin << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"" << height - 10 << "\" text-anchor=\"middle\">epoch</text>\n";
    out << "<text x=\"15\" y=\"" << height / 2 << "\" transform=\"rotate(-90 15 " << height / 2
        << ")\" text-anchor=\"middle\">" << column << "</text>\n";

    const char* colors[3] = {"#1f77b4", "#ff7f0e", "#2ca02c"};
    const std::string splits[3] = {"train", "val", "test"};
    for (int s = 0; s < 3; ++s) {
        std::string points;
        for (const auto& em : history) {
            if (em.split != splits[s] || !std::isfinite(value_of(em))) continue;
            points += std::to_string(px(static_cast<double>(em.epoch))) + "," + std::to_string(py(value_of(em))) + " ";
        }
        if (points.empty()) continue;
        out << "<polyline fill=\"none\" stroke=\"" << colors[s] << "\" stroke-width=\"1.5\" points=\"" << points
            << "\"/>\n";
        out << "<text x=\"" << width - margin + 5 << "\" y=\"" << margin + 18 * s << "\" fill=\"" << colors[s]
            << "\">" << splits[s] << "</text>\n";
    }
    out << "</svg>\n";
}

} // namespace imn
