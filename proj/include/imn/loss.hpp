#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "imn/errors.hpp"
#include "imn/model.hpp"

namespace imn {

enum class NmseMode { Global, PerBatch };

// Normalized MSE. Global mode divides the MSE by the stored training-split
// target variance; per-batch mode normalizes by the batch's own spread.
template <typename T>
double nmse(const T* pred, const T* target, std::size_t n, NmseMode mode, double global_var) {
    if (n == 0) throw std::domain_error("nmse: empty batch");
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(target[i]) - static_cast<double>(pred[i]);
        sse += d * d;
    }
    if (mode == NmseMode::Global) {
        if (!(global_var > 0.0)) throw std::domain_error("nmse: global target variance must be > 0");
        return sse / (static_cast<double>(n) * global_var);
    }
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += target[i];
    mean /= static_cast<double>(n);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(target[i]) - mean;
        denom += d * d;
    }
    if (!(denom > 0.0))
        throw numeric_error("nmse: zero per-batch target variance; use global normalization");
    return sse / denom;
}

// dNMSE/dpred scaled by `weight`, accumulated into gpred.
template <typename T>
void nmse_backward(const T* pred, const T* target, std::size_t n, NmseMode mode, double global_var, double weight,
                   T* gpred) {
    double denom;
    if (mode == NmseMode::Global) {
        denom = static_cast<double>(n) * global_var;
    } else {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += target[i];
        mean /= static_cast<double>(n);
        denom = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = static_cast<double>(target[i]) - mean;
            denom += d * d;
        }
        if (!(denom > 0.0))
            throw numeric_error("nmse: zero per-batch target variance; use global normalization");
    }
    const double scale = 2.0 * weight / denom;
    for (std::size_t i = 0; i < n; ++i)
        gpred[i] += static_cast<T>(scale * (static_cast<double>(pred[i]) - static_cast<double>(target[i])));
}

// 1-r on the true class, r/(K-1) elsewhere.
inline std::vector<double> smoothed_targets(std::size_t true_class, std::size_t num_classes, double r) {
    if (num_classes < 2) throw std::domain_error("smoothed_targets: need at least 2 classes");
    if (true_class >= num_classes) throw std::domain_error("smoothed_targets: class index out of range");
    if (!(r >= 0.0 && r < 1.0)) throw std::domain_error("smoothed_targets: r must lie in [0,1)");
    std::vector<double> q(num_classes, r / static_cast<double>(num_classes - 1));
    q[true_class] = 1.0 - r;
    return q;
}

namespace detail {

// log-softmax denominators per row, max-subtracted.
template <typename T>
void row_logsumexp(const T* logits, std::size_t batch, std::size_t k, std::vector<double>& max_out,
                   std::vector<double>& lse_out) {
    max_out.resize(batch);
    lse_out.resize(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        const T* row = logits + i * k;
        double m = row[0];
        for (std::size_t c = 1; c < k; ++c) m = std::max(m, static_cast<double>(row[c]));
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += std::exp(static_cast<double>(row[c]) - m);
        max_out[i] = m;
        lse_out[i] = m + std::log(z);
    }
}

} // namespace detail

// Label-smoothed cross-entropy, mean over the batch.
template <typename T>
double lsce(const T* logits, const std::uint8_t* classes, std::size_t batch, std::size_t k, double r) {
    if (batch == 0) throw std::domain_error("lsce: empty batch");
    const double off = r / static_cast<double>(k - 1);
    std::vector<double> mx, lse;
    detail::row_logsumexp(logits, batch, k, mx, lse);
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        const T* row = logits + i * k;
        if (classes[i] >= k) throw std::domain_error("lsce: class index out of range");
        double loss = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            const double q = c == classes[i] ? 1.0 - r : off;
            loss += q * (lse[i] - static_cast<double>(row[c]));
        }
        total += loss;
    }
    return total / static_cast<double>(batch);
}

// d(mean LSCE)/dlogits = (softmax - q)/batch, scaled by `weight`.
template <typename T>
void lsce_backward(const T* logits, const std::uint8_t* classes, std::size_t batch, std::size_t k, double r,
                   double weight, T* glogits) {
    const double off = r / static_cast<double>(k - 1);
    std::vector<double> mx, lse;
    detail::row_logsumexp(logits, batch, k, mx, lse);
    const double scale = weight / static_cast<double>(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        const T* row = logits + i * k;
        T* g = glogits + i * k;
        for (std::size_t c = 0; c < k; ++c) {
            const double softmax = std::exp(static_cast<double>(row[c]) - lse[i]);
            const double q = c == classes[i] ? 1.0 - r : off;
            g[c] += static_cast<T>(scale * (softmax - q));
        }
    }
}

struct LossWeights {
    double lambda_p = 1.0;
    double lambda_r = 1.0;
    double lambda_gamma = 1.0;

    void validate() const {
        if (lambda_p < 0.0 || lambda_r < 0.0 || lambda_gamma < 0.0)
            throw config_error("loss weights must be nonnegative");
        if (lambda_p == 0.0 && lambda_r == 0.0 && lambda_gamma == 0.0)
            throw config_error("at least one loss weight must be positive");
    }
};

struct LossValues {
    double p = 0.0;     // NMSE, unweighted
    double r = 0.0;     // NMSE, unweighted
    double gamma = 0.0; // LSCE, unweighted
    double joint = 0.0; // lambda-weighted sum
};

struct BatchTargets {
    const float* target_p = nullptr;
    const float* target_logr = nullptr;
    const std::uint8_t* gamma_class = nullptr;
    std::size_t batch = 0;
};

template <typename T>
LossValues joint_loss(const ModelOutput<T>& out, const BatchTargets& tgt, const LossWeights& lw, NmseMode mode,
                      double var_p, double var_logr, double smoothing_r) {
    lw.validate();
    LossValues v;
    if (!out.p_hat.empty()) {
        std::vector<T> t(tgt.batch);
        for (std::size_t i = 0; i < tgt.batch; ++i) t[i] = static_cast<T>(tgt.target_p[i]);
        v.p = nmse(out.p_hat.data(), t.data(), tgt.batch, mode, var_p);
    }
    if (!out.r_hat.empty()) {
        std::vector<T> t(tgt.batch);
        for (std::size_t i = 0; i < tgt.batch; ++i) t[i] = static_cast<T>(tgt.target_logr[i]);
        v.r = nmse(out.r_hat.data(), t.data(), tgt.batch, mode, var_logr);
    }
    if (!out.gamma_logits.empty())
        v.gamma = lsce(out.gamma_logits.data(), tgt.gamma_class, tgt.batch, out.num_classes, smoothing_r);
    v.joint = lw.lambda_p * v.p + lw.lambda_r * v.r + lw.lambda_gamma * v.gamma;
    return v;
}

// Gradients of the lambda-weighted joint loss with respect to head outputs.
// Zero-weighted terms contribute exactly zero.
template <typename T>
OutputGrad<T> joint_loss_backward(const ModelOutput<T>& out, const BatchTargets& tgt, const LossWeights& lw,
                                  NmseMode mode, double var_p, double var_logr, double smoothing_r) {
    OutputGrad<T> g;
    if (!out.p_hat.empty()) {
        g.p_hat.assign(tgt.batch, T(0));
        if (lw.lambda_p != 0.0) {
            std::vector<T> t(tgt.batch);
            for (std::size_t i = 0; i < tgt.batch; ++i) t[i] = static_cast<T>(tgt.target_p[i]);
            nmse_backward(out.p_hat.data(), t.data(), tgt.batch, mode, var_p, lw.lambda_p, g.p_hat.data());
        }
    }
    if (!out.r_hat.empty()) {
        g.r_hat.assign(tgt.batch, T(0));
        if (lw.lambda_r != 0.0) {
            std::vector<T> t(tgt.batch);
            for (std::size_t i = 0; i < tgt.batch; ++i) t[i] = static_cast<T>(tgt.target_logr[i]);
            nmse_backward(out.r_hat.data(), t.data(), tgt.batch, mode, var_logr, lw.lambda_r, g.r_hat.data());
        }
    }
    if (!out.gamma_logits.empty()) {
        g.gamma_logits.assign(tgt.batch * out.num_classes, T(0));
        if (lw.lambda_gamma != 0.0)
            lsce_backward(out.gamma_logits.data(), tgt.gamma_class, tgt.batch, out.num_classes, smoothing_r,
                          lw.lambda_gamma, g.gamma_logits.data());
    }
    return g;
}

} // namespace imn
