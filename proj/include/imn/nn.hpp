#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "imn/rng.hpp"

// Dense kernels for the CNN-LSTM trunk. Everything is row-major; lda/ldb are
// row strides so time slices of [B,T,F] tensors can feed the same GEMMs.
namespace imn::nn {

// C[M,N] += A[M,K] * B[N,K]^T. Four explicit accumulators let the compiler
// vectorize the reduction without reassociating a single serial chain.
template <typename T>
void gemm_nt(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, std::size_t m,
             std::size_t n, std::size_t k) {
    const std::size_t k4 = k - k % 4;
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * lda;
        T* ci = c + i * ldc;
        for (std::size_t j = 0; j < n; ++j) {
            const T* bj = b + j * ldb;
            T acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
            for (std::size_t p = 0; p < k4; p += 4) {
                acc0 += ai[p] * bj[p];
                acc1 += ai[p + 1] * bj[p + 1];
                acc2 += ai[p + 2] * bj[p + 2];
                acc3 += ai[p + 3] * bj[p + 3];
            }
            T acc = (acc0 + acc1) + (acc2 + acc3);
            for (std::size_t p = k4; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, std::size_t m,
             std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * lda;
        T* ci = c + i * ldc;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + p * ldb;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, std::size_t m,
             std::size_t n, std::size_t k) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* ap = a + p * lda;
        const T* bp = b + p * ldb;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = ap[i];
            T* ci = c + i * ldc;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

inline std::size_t conv_out_len(std::size_t t, std::size_t k, std::size_t s) {
    if (t < k) throw std::invalid_argument("conv1d: input length shorter than kernel");
    return (t - k) / s + 1;
}

namespace detail {

// Window-unrolled view: col[(b*Tout+ot), ic*K+p] = in[b, ic, ot*s+p].
// Turns the convolution into one wide GEMM per direction.
template <typename T>
void im2col(const T* in, std::size_t batch, std::size_t cin, std::size_t tin, std::size_t k, std::size_t s,
            std::size_t tout, T* col) {
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ot = 0; ot < tout; ++ot) {
            T* row = col + (b * tout + ot) * cin * k;
            const T* x = in + b * cin * tin + ot * s;
            for (std::size_t ic = 0; ic < cin; ++ic)
                for (std::size_t p = 0; p < k; ++p) row[ic * k + p] = x[ic * tin + p];
        }
}

} // namespace detail

// Valid cross-correlation with bias. in [B,Cin,Tin], w [Cout,Cin,K], out [B,Cout,Tout].
template <typename T>
void conv1d_forward(const T* in, std::size_t batch, std::size_t cin, std::size_t tin, const T* w, const T* bias,
                    std::size_t cout, std::size_t k, std::size_t s, T* out) {
    const std::size_t tout = conv_out_len(tin, k, s);
    std::vector<T> col(batch * tout * cin * k);
    detail::im2col(in, batch, cin, tin, k, s, tout, col.data());
    std::vector<T> out_mat(batch * tout * cout, T(0));
    gemm_nt(col.data(), cin * k, w, cin * k, out_mat.data(), cout, batch * tout, cout, cin * k);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ot = 0; ot < tout; ++ot) {
            const T* row = out_mat.data() + (b * tout + ot) * cout;
            T* out_b = out + b * cout * tout + ot;
            for (std::size_t oc = 0; oc < cout; ++oc) out_b[oc * tout] = row[oc] + bias[oc];
        }
}

template <typename T>
void conv1d_backward(const T* in, std::size_t batch, std::size_t cin, std::size_t tin, const T* w, std::size_t cout,
                     std::size_t k, std::size_t s, const T* gout, T* gin, T* gw, T* gbias) {
    const std::size_t tout = conv_out_len(tin, k, s);
    // [B,Cout,Tout] -> [B*Tout, Cout]
    std::vector<T> g_mat(batch * tout * cout);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ot = 0; ot < tout; ++ot) {
            T* row = g_mat.data() + (b * tout + ot) * cout;
            const T* g_b = gout + b * cout * tout + ot;
            for (std::size_t oc = 0; oc < cout; ++oc) row[oc] = g_b[oc * tout];
        }

    std::vector<T> col(batch * tout * cin * k);
    detail::im2col(in, batch, cin, tin, k, s, tout, col.data());

    // dW = g_mat^T * col ; db = column sums ; dX_col = g_mat * W
    gemm_tn(g_mat.data(), cout, col.data(), cin * k, gw, cin * k, cout, cin * k, batch * tout);
    for (std::size_t bt = 0; bt < batch * tout; ++bt) {
        const T* row = g_mat.data() + bt * cout;
        for (std::size_t oc = 0; oc < cout; ++oc) gbias[oc] += row[oc];
    }
    std::vector<T> g_col(batch * tout * cin * k, T(0));
    gemm_nn(g_mat.data(), cout, w, cin * k, g_col.data(), cin * k, batch * tout, cin * k, cout);

    // col2im scatter-add (windows overlap when s < k).
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ot = 0; ot < tout; ++ot) {
            const T* row = g_col.data() + (b * tout + ot) * cin * k;
            T* gx = gin + b * cin * tin + ot * s;
            for (std::size_t ic = 0; ic < cin; ++ic)
                for (std::size_t p = 0; p < k; ++p) gx[ic * tin + p] += row[ic * k + p];
        }
}

// BatchNorm over [B,C,T]; a [B,F] tensor is the T = 1 case. Population per
// channel is B*T. Running variance stores the unbiased estimate.
template <typename T>
void batchnorm_forward_train(const T* in, std::size_t batch, std::size_t channels, std::size_t time, const T* gamma,
                             const T* beta, double eps, double momentum, T* running_mean, T* running_var, T* out,
                             T* xhat, T* invstd, bool update_running) {
    const double n = static_cast<double>(batch * time);
    if (batch * time < 2) throw std::invalid_argument("batchnorm: train mode needs a population of at least 2");
    for (std::size_t c = 0; c < channels; ++c) {
        double sum = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            const T* x = in + (b * channels + c) * time;
            for (std::size_t t = 0; t < time; ++t) sum += x[t];
        }
        const double mean = sum / n;
        double varsum = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            const T* x = in + (b * channels + c) * time;
            for (std::size_t t = 0; t < time; ++t) {
                const double d = x[t] - mean;
                varsum += d * d;
            }
        }
        const double var = varsum / n;
        const double istd = 1.0 / std::sqrt(var + eps);
        invstd[c] = static_cast<T>(istd);
        if (update_running) {
            running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mean);
            running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * var * n / (n - 1.0));
        }
        const T g = gamma[c], be = beta[c];
        for (std::size_t b = 0; b < batch; ++b) {
            const T* x = in + (b * channels + c) * time;
            T* xh = xhat + (b * channels + c) * time;
            T* y = out + (b * channels + c) * time;
            for (std::size_t t = 0; t < time; ++t) {
                xh[t] = static_cast<T>((x[t] - mean) * istd);
                y[t] = g * xh[t] + be;
            }
        }
    }
}

template <typename T>
void batchnorm_forward_eval(const T* in, std::size_t batch, std::size_t channels, std::size_t time, const T* gamma,
                            const T* beta, double eps, const T* running_mean, const T* running_var, T* out) {
    for (std::size_t c = 0; c < channels; ++c) {
        const double istd = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps);
        const double mean = running_mean[c];
        const T g = gamma[c], be = beta[c];
        for (std::size_t b = 0; b < batch; ++b) {
            const T* x = in + (b * channels + c) * time;
            T* y = out + (b * channels + c) * time;
            for (std::size_t t = 0; t < time; ++t) y[t] = static_cast<T>(g * (x[t] - mean) * istd + be);
        }
    }
}

template <typename T>
void batchnorm_backward(const T* gout, const T* xhat, const T* invstd, const T* gamma, std::size_t batch,
                        std::size_t channels, std::size_t time, T* gin, T* ggamma, T* gbeta) {
    const double n = static_cast<double>(batch * time);
    for (std::size_t c = 0; c < channels; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            const T* g = gout + (b * channels + c) * time;
            const T* xh = xhat + (b * channels + c) * time;
            for (std::size_t t = 0; t < time; ++t) {
                sum_g += g[t];
                sum_gx += static_cast<double>(g[t]) * xh[t];
            }
        }
        ggamma[c] += static_cast<T>(sum_gx);
        gbeta[c] += static_cast<T>(sum_g);
        const double mean_g = sum_g / n, mean_gx = sum_gx / n;
        const double scale = static_cast<double>(gamma[c]) * invstd[c];
        for (std::size_t b = 0; b < batch; ++b) {
            const T* g = gout + (b * channels + c) * time;
            const T* xh = xhat + (b * channels + c) * time;
            T* gi = gin + (b * channels + c) * time;
            for (std::size_t t = 0; t < time; ++t)
                gi[t] += static_cast<T>(scale * (g[t] - mean_g - xh[t] * mean_gx));
        }
    }
}

template <typename T>
void relu_forward(const T* in, std::size_t n, T* out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
}

template <typename T>
void relu_backward(const T* gout, const T* pre, std::size_t n, T* gin) {
    for (std::size_t i = 0; i < n; ++i) gin[i] += pre[i] > T(0) ? gout[i] : T(0);
}

// Parameter-free temporal attention: per-step score = channel mean, weights =
// softmax over time, output = per-step reweighted features.
template <typename T>
void attention_forward(const T* in, std::size_t batch, std::size_t channels, std::size_t time, T* out, T* weights) {
    std::vector<double> scores(time);
    for (std::size_t b = 0; b < batch; ++b) {
        const T* in_b = in + b * channels * time;
        for (std::size_t t = 0; t < time; ++t) {
            double s = 0.0;
            for (std::size_t c = 0; c < channels; ++c) s += in_b[c * time + t];
            scores[t] = s / static_cast<double>(channels);
        }
        double peak = scores[0];
        for (std::size_t t = 1; t < time; ++t) peak = std::max(peak, scores[t]);
        double z = 0.0;
        for (std::size_t t = 0; t < time; ++t) {
            scores[t] = std::exp(scores[t] - peak);
            z += scores[t];
        }
        T* w_b = weights + b * time;
        for (std::size_t t = 0; t < time; ++t) w_b[t] = static_cast<T>(scores[t] / z);
        T* out_b = out + b * channels * time;
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t t = 0; t < time; ++t) out_b[c * time + t] = w_b[t] * in_b[c * time + t];
    }
}

template <typename T>
void attention_backward(const T* gout, const T* in, const T* weights, std::size_t batch, std::size_t channels,
                        std::size_t time, T* gin) {
    std::vector<double> dw(time), ds(time);
    for (std::size_t b = 0; b < batch; ++b) {
        const T* g_b = gout + b * channels * time;
        const T* in_b = in + b * channels * time;
        const T* w_b = weights + b * time;
        for (std::size_t t = 0; t < time; ++t) {
            double acc = 0.0;
            for (std::size_t c = 0; c < channels; ++c)
                acc += static_cast<double>(g_b[c * time + t]) * in_b[c * time + t];
            dw[t] = acc;
        }
        double dot = 0.0;
        for (std::size_t t = 0; t < time; ++t) dot += w_b[t] * dw[t];
        for (std::size_t t = 0; t < time; ++t) ds[t] = w_b[t] * (dw[t] - dot);
        T* gin_b = gin + b * channels * time;
        const double inv_c = 1.0 / static_cast<double>(channels);
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t t = 0; t < time; ++t)
                gin_b[c * time + t] += static_cast<T>(w_b[t] * g_b[c * time + t] + ds[t] * inv_c);
    }
}

template <typename T>
struct LstmParams {
    std::vector<T> w_ih; // [4H, In], gate order i,f,g,o
    std::vector<T> w_hh; // [4H, H]
    std::vector<T> b_ih; // [4H]
    std::vector<T> b_hh; // [4H]
};

// Per-layer activations kept for backprop.
template <typename T>
struct LstmCache {
    std::vector<T> gates;  // [B,T,4H], post-activation
    std::vector<T> cell;   // [B,T,H]
    std::vector<T> tanh_c; // [B,T,H]
    std::vector<T> hidden; // [B,T,H]
};

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// x [B,T,In] -> hidden [B,T,H]; initial hidden and cell state are zero.
template <typename T>
void lstm_forward(const T* x, std::size_t batch, std::size_t time, std::size_t in_dim, std::size_t hidden,
                  const LstmParams<T>& p, LstmCache<T>& cache) {
    const std::size_t g4 = 4 * hidden;
    cache.gates.assign(batch * time * g4, T(0));
    cache.cell.assign(batch * time * hidden, T(0));
    cache.tanh_c.assign(batch * time * hidden, T(0));
    cache.hidden.assign(batch * time * hidden, T(0));

    // Input contributions for every step in one GEMM.
    std::vector<T> pre_x(batch * time * g4, T(0));
    gemm_nt(x, in_dim, p.w_ih.data(), in_dim, pre_x.data(), g4, batch * time, g4, in_dim);

    std::vector<T> pre(batch * g4);
    for (std::size_t t = 0; t < time; ++t) {
        for (std::size_t b = 0; b < batch; ++b) {
            const T* px = pre_x.data() + (b * time + t) * g4;
            T* pb = pre.data() + b * g4;
            for (std::size_t j = 0; j < g4; ++j) pb[j] = px[j] + p.b_ih[j] + p.b_hh[j];
        }
        if (t > 0)
            gemm_nt(cache.hidden.data() + (t - 1) * hidden, time * hidden, p.w_hh.data(), hidden, pre.data(), g4,
                    batch, g4, hidden);
        for (std::size_t b = 0; b < batch; ++b) {
            const T* pb = pre.data() + b * g4;
            T* gate = cache.gates.data() + (b * time + t) * g4;
            T* cell = cache.cell.data() + (b * time + t) * hidden;
            T* tc = cache.tanh_c.data() + (b * time + t) * hidden;
            T* h = cache.hidden.data() + (b * time + t) * hidden;
            const T* c_prev = t > 0 ? cache.cell.data() + (b * time + t - 1) * hidden : nullptr;
            for (std::size_t j = 0; j < hidden; ++j) {
                const T gi = sigmoid(pb[j]);
                const T gf = sigmoid(pb[hidden + j]);
                const T gg = std::tanh(pb[2 * hidden + j]);
                const T go = sigmoid(pb[3 * hidden + j]);
                gate[j] = gi;
                gate[hidden + j] = gf;
                gate[2 * hidden + j] = gg;
                gate[3 * hidden + j] = go;
                const T c = (c_prev ? gf * c_prev[j] : T(0)) + gi * gg;
                cell[j] = c;
                tc[j] = std::tanh(c);
                h[j] = go * tc[j];
            }
        }
    }
}

// gh [B,T,H] is dLoss/dhidden for every step; gx accumulates dLoss/dx.
template <typename T>
void lstm_backward(const T* x, std::size_t batch, std::size_t time, std::size_t in_dim, std::size_t hidden,
                   const LstmParams<T>& p, const LstmCache<T>& cache, const T* gh, T* gx, LstmParams<T>& grad) {
    const std::size_t g4 = 4 * hidden;
    std::vector<T> dpre_all(batch * time * g4, T(0));
    std::vector<T> dh_next(batch * hidden, T(0));
    std::vector<T> dc_next(batch * hidden, T(0));

    for (std::size_t t = time; t-- > 0;) {
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t at = (b * time + t);
            const T* gate = cache.gates.data() + at * g4;
            const T* tc = cache.tanh_c.data() + at * hidden;
            const T* c_prev = t > 0 ? cache.cell.data() + (at - 1) * hidden : nullptr;
            T* dpre = dpre_all.data() + at * g4;
            T* dhn = dh_next.data() + b * hidden;
            T* dcn = dc_next.data() + b * hidden;
            const T* gh_t = gh + at * hidden;
            for (std::size_t j = 0; j < hidden; ++j) {
                const T gi = gate[j], gf = gate[hidden + j], gg = gate[2 * hidden + j], go = gate[3 * hidden + j];
                const T dh = gh_t[j] + dhn[j];
                const T dgo = dh * tc[j];
                T dc = dh * go * (T(1) - tc[j] * tc[j]) + dcn[j];
                const T dgf = c_prev ? dc * c_prev[j] : T(0);
                const T dgi = dc * gg;
                const T dgg = dc * gi;
                dpre[j] = dgi * gi * (T(1) - gi);
                dpre[hidden + j] = dgf * gf * (T(1) - gf);
                dpre[2 * hidden + j] = dgg * (T(1) - gg * gg);
                dpre[3 * hidden + j] = dgo * go * (T(1) - go);
                dcn[j] = dc * gf;
                dhn[j] = T(0); // rebuilt below from dpre
            }
        }
        // dh_{t-1} = dpre_t * w_hh
        if (t > 0)
            gemm_nn(dpre_all.data() + t * g4, time * g4, p.w_hh.data(), hidden, dh_next.data(), hidden, batch,
                    hidden, g4);
    }

    // dx = dpre * w_ih ; dw_ih = dpre^T x ; dw_hh = sum_t dpre_t^T h_{t-1}
    gemm_nn(dpre_all.data(), g4, p.w_ih.data(), in_dim, gx, in_dim, batch * time, in_dim, g4);
    gemm_tn(dpre_all.data(), g4, x, in_dim, grad.w_ih.data(), in_dim, g4, in_dim, batch * time);
    for (std::size_t t = 1; t < time; ++t)
        gemm_tn(dpre_all.data() + t * g4, time * g4, cache.hidden.data() + (t - 1) * hidden, time * hidden,
                grad.w_hh.data(), hidden, g4, hidden, batch);
    for (std::size_t bt = 0; bt < batch * time; ++bt) {
        const T* dpre = dpre_all.data() + bt * g4;
        for (std::size_t j = 0; j < g4; ++j) {
            grad.b_ih[j] += dpre[j];
            grad.b_hh[j] += dpre[j];
        }
    }
}

// y = x W^T + b with x [B,In], w [Out,In].
template <typename T>
void fc_forward(const T* x, std::size_t batch, std::size_t in_dim, const T* w, const T* b, std::size_t out_dim,
                T* out) {
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] = b[j];
    gemm_nt(x, in_dim, w, in_dim, out, out_dim, batch, out_dim, in_dim);
}

template <typename T>
void fc_backward(const T* gout, const T* x, std::size_t batch, std::size_t in_dim, const T* w, std::size_t out_dim,
                 T* gx, T* gw, T* gb) {
    gemm_nn(gout, out_dim, w, in_dim, gx, in_dim, batch, in_dim, out_dim);
    gemm_tn(gout, out_dim, x, in_dim, gw, in_dim, out_dim, in_dim, batch);
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < out_dim; ++j) gb[j] += gout[i * out_dim + j];
}

// Inverted dropout: survivors are scaled by 1/(1-rate) so eval is identity.
template <typename T>
void dropout_forward_train(const T* in, std::size_t n, double rate, Xoshiro256& rng, T* out, T* mask) {
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < n; ++i) {
        mask[i] = rng.uniform() > rate ? keep_scale : T(0);
        out[i] = in[i] * mask[i];
    }
}

template <typename T>
void dropout_backward(const T* gout, const T* mask, std::size_t n, T* gin) {
    for (std::size_t i = 0; i < n; ++i) gin[i] += gout[i] * mask[i];
}

} // namespace imn::nn
