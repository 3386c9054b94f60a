#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "imn/errors.hpp"
#include "imn/nn.hpp"
#include "imn/rng.hpp"

namespace imn {

struct ConvSpec {
    std::size_t in_ch, out_ch, kernel, stride;
};

enum class Task { P, R, Gamma };

inline std::string to_string(Task t) {
    switch (t) {
    case Task::P: return "p";
    case Task::R: return "r";
    case Task::Gamma: return "gamma";
    }
    return "p";
}

// Shared CNN-attention-LSTM trunk plus task heads. The defaults give the
// 100 -> 47 -> 22 -> 10 step chain with 1 -> 32 -> 64 -> 128 channels.
struct ModelConfig {
    std::size_t input_len = 100;
    std::size_t in_channels = 1;
    std::vector<ConvSpec> convs = {{1, 32, 8, 2}, {32, 64, 4, 2}, {64, 128, 4, 2}};
    std::size_t lstm_hidden = 64;
    std::size_t lstm_layers = 2;
    std::size_t head_r_h1 = 64;
    std::size_t head_r_h2 = 32;
    std::size_t head_gamma_h1 = 64;
    std::size_t head_gamma_h2 = 32;
    std::size_t num_classes = 4;
    double dropout_rate = 0.4;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
    bool head_p = true;
    bool head_r = true;
    bool head_gamma = true;

    std::vector<std::size_t> time_chain() const {
        std::vector<std::size_t> chain = {input_len};
        std::size_t t = input_len;
        for (const auto& c : convs) {
            t = nn::conv_out_len(t, c.kernel, c.stride);
            chain.push_back(t);
        }
        return chain;
    }

    std::size_t trunk_channels() const { return convs.back().out_ch; }
    std::size_t trunk_steps() const { return time_chain().back(); }

    void validate() const {
        if (convs.empty()) throw config_error("ModelConfig: at least one conv layer required");
        if (convs.front().in_ch != in_channels)
            throw config_error("ModelConfig: first conv in_ch must equal in_channels");
        for (std::size_t i = 1; i < convs.size(); ++i)
            if (convs[i].in_ch != convs[i - 1].out_ch)
                throw config_error("ModelConfig: conv channel chain is inconsistent at layer " + std::to_string(i));
        time_chain(); // throws if any stage is shorter than its kernel
        if (lstm_layers < 1) throw config_error("ModelConfig: need at least one LSTM layer");
        if (lstm_hidden < 1) throw config_error("ModelConfig: lstm_hidden must be >= 1");
        if (num_classes < 2) throw config_error("ModelConfig: need at least 2 classes");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw config_error("ModelConfig: dropout rate must lie in [0,1)");
        if (!head_p && !head_r && !head_gamma) throw config_error("ModelConfig: no heads enabled");
    }
};

inline ModelConfig build_stl(Task task, ModelConfig cfg) {
    cfg.head_p = task == Task::P;
    cfg.head_r = task == Task::R;
    cfg.head_gamma = task == Task::Gamma;
    return cfg;
}

template <typename T>
struct ConvLayer {
    std::vector<T> w, b;
};

template <typename T>
struct BatchNorm {
    std::vector<T> gamma, beta, running_mean, running_var;
};

template <typename T>
struct FcLayer {
    std::vector<T> w, b;
};

template <typename T>
struct ModelParams {
    std::vector<ConvLayer<T>> convs;
    std::vector<BatchNorm<T>> conv_bns;
    std::vector<nn::LstmParams<T>> lstm;
    FcLayer<T> head_p;
    FcLayer<T> r_fc1, r_fc2, r_fc3;
    FcLayer<T> g_fc1, g_fc2, g_fc3;
    BatchNorm<T> g_bn1, g_bn2;
};

// One named parameter array; `trainable` is false for batch-norm running
// statistics, which are part of the model state but never optimized.
template <typename T>
struct ArrayRef {
    std::string name;
    std::vector<T>* values;
    bool trainable;
};

template <typename T>
std::vector<ArrayRef<T>> collect_arrays(const ModelConfig& cfg, ModelParams<T>& p) {
    std::vector<ArrayRef<T>> out;
    auto add = [&](std::string name, std::vector<T>& v, bool trainable = true) {
        out.push_back({std::move(name), &v, trainable});
    };
    for (std::size_t i = 0; i < p.convs.size(); ++i) {
        const std::string tag = std::to_string(i + 1);
        add("conv" + tag + ".w", p.convs[i].w);
        add("conv" + tag + ".b", p.convs[i].b);
        add("conv" + tag + "_bn.gamma", p.conv_bns[i].gamma);
        add("conv" + tag + "_bn.beta", p.conv_bns[i].beta);
        add("conv" + tag + "_bn.running_mean", p.conv_bns[i].running_mean, false);
        add("conv" + tag + "_bn.running_var", p.conv_bns[i].running_var, false);
    }
    for (std::size_t i = 0; i < p.lstm.size(); ++i) {
        const std::string tag = std::to_string(i + 1);
        add("lstm" + tag + ".w_ih", p.lstm[i].w_ih);
        add("lstm" + tag + ".w_hh", p.lstm[i].w_hh);
        add("lstm" + tag + ".b_ih", p.lstm[i].b_ih);
        add("lstm" + tag + ".b_hh", p.lstm[i].b_hh);
    }
    if (cfg.head_p) {
        add("head_p.w", p.head_p.w);
        add("head_p.b", p.head_p.b);
    }
    if (cfg.head_r) {
        add("head_r.fc1.w", p.r_fc1.w);
        add("head_r.fc1.b", p.r_fc1.b);
        add("head_r.fc2.w", p.r_fc2.w);
        add("head_r.fc2.b", p.r_fc2.b);
        add("head_r.fc3.w", p.r_fc3.w);
        add("head_r.fc3.b", p.r_fc3.b);
    }
    if (cfg.head_gamma) {
        add("head_gamma.fc1.w", p.g_fc1.w);
        add("head_gamma.fc1.b", p.g_fc1.b);
        add("head_gamma.bn1.gamma", p.g_bn1.gamma);
        add("head_gamma.bn1.beta", p.g_bn1.beta);
        add("head_gamma.bn1.running_mean", p.g_bn1.running_mean, false);
        add("head_gamma.bn1.running_var", p.g_bn1.running_var, false);
        add("head_gamma.fc2.w", p.g_fc2.w);
        add("head_gamma.fc2.b", p.g_fc2.b);
        add("head_gamma.bn2.gamma", p.g_bn2.gamma);
        add("head_gamma.bn2.beta", p.g_bn2.beta);
        add("head_gamma.bn2.running_mean", p.g_bn2.running_mean, false);
        add("head_gamma.bn2.running_var", p.g_bn2.running_var, false);
        add("head_gamma.fc3.w", p.g_fc3.w);
        add("head_gamma.fc3.b", p.g_fc3.b);
    }
    return out;
}

namespace detail {

template <typename T>
void size_bn(BatchNorm<T>& bn, std::size_t channels) {
    bn.gamma.assign(channels, T(1));
    bn.beta.assign(channels, T(0));
    bn.running_mean.assign(channels, T(0));
    bn.running_var.assign(channels, T(1));
}

template <typename T>
void size_fc(FcLayer<T>& fc, std::size_t out_dim, std::size_t in_dim) {
    fc.w.assign(out_dim * in_dim, T(0));
    fc.b.assign(out_dim, T(0));
}

} // namespace detail

template <typename T>
ModelParams<T> make_params(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams<T> p;
    p.convs.resize(cfg.convs.size());
    p.conv_bns.resize(cfg.convs.size());
    for (std::size_t i = 0; i < cfg.convs.size(); ++i) {
        const auto& c = cfg.convs[i];
        p.convs[i].w.assign(c.out_ch * c.in_ch * c.kernel, T(0));
        p.convs[i].b.assign(c.out_ch, T(0));
        detail::size_bn(p.conv_bns[i], c.out_ch);
    }
    p.lstm.resize(cfg.lstm_layers);
    for (std::size_t i = 0; i < cfg.lstm_layers; ++i) {
        const std::size_t in_dim = i == 0 ? cfg.trunk_channels() : cfg.lstm_hidden;
        const std::size_t h = cfg.lstm_hidden;
        p.lstm[i].w_ih.assign(4 * h * in_dim, T(0));
        p.lstm[i].w_hh.assign(4 * h * h, T(0));
        p.lstm[i].b_ih.assign(4 * h, T(0));
        p.lstm[i].b_hh.assign(4 * h, T(0));
    }
    const std::size_t h = cfg.lstm_hidden;
    if (cfg.head_p) detail::size_fc(p.head_p, 1, h);
    if (cfg.head_r) {
        detail::size_fc(p.r_fc1, cfg.head_r_h1, h);
        detail::size_fc(p.r_fc2, cfg.head_r_h2, cfg.head_r_h1);
        detail::size_fc(p.r_fc3, 1, cfg.head_r_h2);
    }
    if (cfg.head_gamma) {
        detail::size_fc(p.g_fc1, cfg.head_gamma_h1, h);
        detail::size_bn(p.g_bn1, cfg.head_gamma_h1);
        detail::size_fc(p.g_fc2, cfg.head_gamma_h2, cfg.head_gamma_h1);
        detail::size_bn(p.g_bn2, cfg.head_gamma_h2);
        detail::size_fc(p.g_fc3, cfg.num_classes, cfg.head_gamma_h2);
    }
    return p;
}

template <typename T>
struct Model {
    ModelConfig cfg;
    ModelParams<T> params;
};

// Fan-in-scaled uniform init; LSTM forget-gate bias starts at 1.
template <typename T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    Model<T> m{cfg, make_params<T>(cfg)};
    Xoshiro256 rng(mix_seed(seed, 0x494e4954u /*"INIT"*/));
    auto fill_uniform = [&](std::vector<T>& v, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& x : v) x = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    };
    for (std::size_t i = 0; i < cfg.convs.size(); ++i)
        fill_uniform(m.params.convs[i].w, cfg.convs[i].in_ch * cfg.convs[i].kernel);
    for (std::size_t i = 0; i < cfg.lstm_layers; ++i) {
        const std::size_t in_dim = i == 0 ? cfg.trunk_channels() : cfg.lstm_hidden;
        fill_uniform(m.params.lstm[i].w_ih, in_dim);
        fill_uniform(m.params.lstm[i].w_hh, cfg.lstm_hidden);
        for (std::size_t j = 0; j < cfg.lstm_hidden; ++j) m.params.lstm[i].b_ih[cfg.lstm_hidden + j] = T(1);
    }
    const std::size_t h = cfg.lstm_hidden;
    if (cfg.head_p) fill_uniform(m.params.head_p.w, h);
    if (cfg.head_r) {
        fill_uniform(m.params.r_fc1.w, h);
        fill_uniform(m.params.r_fc2.w, cfg.head_r_h1);
        fill_uniform(m.params.r_fc3.w, cfg.head_r_h2);
    }
    if (cfg.head_gamma) {
        fill_uniform(m.params.g_fc1.w, h);
        fill_uniform(m.params.g_fc2.w, cfg.head_gamma_h1);
        fill_uniform(m.params.g_fc3.w, cfg.head_gamma_h2);
    }
    return m;
}

enum class RunMode { Train, Eval };

template <typename T>
struct ModelOutput {
    std::size_t batch = 0;
    std::size_t num_classes = 0;
    std::vector<T> p_hat;        // [B] (empty when the head is absent)
    std::vector<T> r_hat;        // [B]
    std::vector<T> gamma_logits; // [B, C]
};

// Activations retained by a train-mode forward pass for backprop.
template <typename T>
struct ForwardCache {
    std::size_t batch = 0;
    std::vector<std::vector<T>> conv_in;  // input of each conv stage
    std::vector<std::vector<T>> conv_out; // pre-BN
    std::vector<std::vector<T>> bn_xhat;
    std::vector<std::vector<T>> bn_invstd;
    std::vector<std::vector<T>> bn_out; // pre-ReLU
    std::vector<T> att_in;              // post-ReLU conv stack output
    std::vector<T> att_weights;         // [B, T]
    std::vector<T> att_out;
    std::vector<T> lstm_in; // [B, T, C] after transpose
    std::vector<nn::LstmCache<T>> lstm;
    std::vector<T> shared; // [B, H]
    // Head R
    std::vector<T> r_a1, r_h1, r_a2, r_h2;
    // Head gamma
    std::vector<T> g_a1, g_bn1_xhat, g_bn1_invstd, g_bn1_out, g_h1, g_drop, g_drop_mask;
    std::vector<T> g_a2, g_bn2_xhat, g_bn2_invstd, g_bn2_out, g_h2;
};

// Forward pass over a [B, in_channels * input_len] feature block. Train mode
// uses batch statistics (and dropout when rate > 0 and rng != nullptr);
// eval mode is deterministic. update_running=false freezes BN statistics.
template <typename T>
ModelOutput<T> forward(Model<T>& model, const T* features, std::size_t batch, RunMode mode, Xoshiro256* rng,
                       ForwardCache<T>& cache, bool update_running = true) {
    const ModelConfig& cfg = model.cfg;
    auto& p = model.params;
    const auto chain = cfg.time_chain();
    const bool train = mode == RunMode::Train;

    cache.batch = batch;
    const std::size_t n_convs = cfg.convs.size();
    cache.conv_in.resize(n_convs);
    cache.conv_out.resize(n_convs);
    cache.bn_xhat.resize(n_convs);
    cache.bn_invstd.resize(n_convs);
    cache.bn_out.resize(n_convs);

    cache.conv_in[0].assign(features, features + batch * cfg.in_channels * cfg.input_len);
    for (std::size_t i = 0; i < n_convs; ++i) {
        const auto& cs = cfg.convs[i];
        const std::size_t tin = chain[i], tout = chain[i + 1];
        cache.conv_out[i].assign(batch * cs.out_ch * tout, T(0));
        nn::conv1d_forward(cache.conv_in[i].data(), batch, cs.in_ch, tin, p.convs[i].w.data(), p.convs[i].b.data(),
                           cs.out_ch, cs.kernel, cs.stride, cache.conv_out[i].data());

        cache.bn_out[i].assign(batch * cs.out_ch * tout, T(0));
        if (train) {
            cache.bn_xhat[i].assign(batch * cs.out_ch * tout, T(0));
            cache.bn_invstd[i].assign(cs.out_ch, T(0));
            nn::batchnorm_forward_train(cache.conv_out[i].data(), batch, cs.out_ch, tout,
                                        p.conv_bns[i].gamma.data(), p.conv_bns[i].beta.data(), cfg.bn_eps,
                                        cfg.bn_momentum, p.conv_bns[i].running_mean.data(),
                                        p.conv_bns[i].running_var.data(), cache.bn_out[i].data(),
                                        cache.bn_xhat[i].data(), cache.bn_invstd[i].data(), update_running);
        } else {
            nn::batchnorm_forward_eval(cache.conv_out[i].data(), batch, cs.out_ch, tout,
                                       p.conv_bns[i].gamma.data(), p.conv_bns[i].beta.data(), cfg.bn_eps,
                                       p.conv_bns[i].running_mean.data(), p.conv_bns[i].running_var.data(),
                                       cache.bn_out[i].data());
        }

        auto& next = i + 1 < n_convs ? cache.conv_in[i + 1] : cache.att_in;
        next.assign(batch * cs.out_ch * tout, T(0));
        nn::relu_forward(cache.bn_out[i].data(), next.size(), next.data());
    }

    const std::size_t channels = cfg.trunk_channels();
    const std::size_t steps = cfg.trunk_steps();
    cache.att_weights.assign(batch * steps, T(0));
    cache.att_out.assign(batch * channels * steps, T(0));
    nn::attention_forward(cache.att_in.data(), batch, channels, steps, cache.att_out.data(),
                          cache.att_weights.data());

    // [B, C, T] -> [B, T, C] for the recurrent stack.
    cache.lstm_in.assign(batch * steps * channels, T(0));
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t t = 0; t < steps; ++t)
                cache.lstm_in[(b * steps + t) * channels + c] = cache.att_out[(b * channels + c) * steps + t];

    const std::size_t h = cfg.lstm_hidden;
    cache.lstm.resize(cfg.lstm_layers);
    for (std::size_t i = 0; i < cfg.lstm_layers; ++i) {
        const T* x = i == 0 ? cache.lstm_in.data() : cache.lstm[i - 1].hidden.data();
        const std::size_t in_dim = i == 0 ? channels : h;
        nn::lstm_forward(x, batch, steps, in_dim, h, p.lstm[i], cache.lstm[i]);
    }

    // Shared representation: final-step hidden state.
    cache.shared.assign(batch * h, T(0));
    const auto& top = cache.lstm.back().hidden;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < h; ++j) cache.shared[b * h + j] = top[(b * steps + steps - 1) * h + j];

    ModelOutput<T> out;
    out.batch = batch;
    out.num_classes = cfg.num_classes;

    if (cfg.head_p) {
        std::vector<T> y(batch, T(0));
        nn::fc_forward(cache.shared.data(), batch, h, p.head_p.w.data(), p.head_p.b.data(), 1, y.data());
        out.p_hat = std::move(y);
    }

    if (cfg.head_r) {
        cache.r_a1.assign(batch * cfg.head_r_h1, T(0));
        nn::fc_forward(cache.shared.data(), batch, h, p.r_fc1.w.data(), p.r_fc1.b.data(), cfg.head_r_h1,
                       cache.r_a1.data());
        cache.r_h1.assign(cache.r_a1.size(), T(0));
        nn::relu_forward(cache.r_a1.data(), cache.r_a1.size(), cache.r_h1.data());
        cache.r_a2.assign(batch * cfg.head_r_h2, T(0));
        nn::fc_forward(cache.r_h1.data(), batch, cfg.head_r_h1, p.r_fc2.w.data(), p.r_fc2.b.data(), cfg.head_r_h2,
                       cache.r_a2.data());
        cache.r_h2.assign(cache.r_a2.size(), T(0));
        nn::relu_forward(cache.r_a2.data(), cache.r_a2.size(), cache.r_h2.data());
        std::vector<T> y(batch, T(0));
        nn::fc_forward(cache.r_h2.data(), batch, cfg.head_r_h2, p.r_fc3.w.data(), p.r_fc3.b.data(), 1, y.data());
        out.r_hat = std::move(y);
    }

    if (cfg.head_gamma) {
        const std::size_t h1 = cfg.head_gamma_h1, h2 = cfg.head_gamma_h2;
        cache.g_a1.assign(batch * h1, T(0));
        nn::fc_forward(cache.shared.data(), batch, h, p.g_fc1.w.data(), p.g_fc1.b.data(), h1, cache.g_a1.data());
        cache.g_bn1_out.assign(batch * h1, T(0));
        if (train) {
            cache.g_bn1_xhat.assign(batch * h1, T(0));
            cache.g_bn1_invstd.assign(h1, T(0));
            nn::batchnorm_forward_train(cache.g_a1.data(), batch, h1, std::size_t{1}, p.g_bn1.gamma.data(),
                                        p.g_bn1.beta.data(), cfg.bn_eps, cfg.bn_momentum,
                                        p.g_bn1.running_mean.data(), p.g_bn1.running_var.data(),
                                        cache.g_bn1_out.data(), cache.g_bn1_xhat.data(),
                                        cache.g_bn1_invstd.data(), update_running);
        } else {
            nn::batchnorm_forward_eval(cache.g_a1.data(), batch, h1, std::size_t{1}, p.g_bn1.gamma.data(),
                                       p.g_bn1.beta.data(), cfg.bn_eps, p.g_bn1.running_mean.data(),
                                       p.g_bn1.running_var.data(), cache.g_bn1_out.data());
        }
        cache.g_h1.assign(batch * h1, T(0));
        nn::relu_forward(cache.g_bn1_out.data(), cache.g_h1.size(), cache.g_h1.data());

        if (train && cfg.dropout_rate > 0.0) {
            if (rng == nullptr) throw numeric_error("forward: train-mode dropout needs an RNG");
            cache.g_drop.assign(batch * h1, T(0));
            cache.g_drop_mask.assign(batch * h1, T(0));
            nn::dropout_forward_train(cache.g_h1.data(), batch * h1, cfg.dropout_rate, *rng, cache.g_drop.data(),
                                      cache.g_drop_mask.data());
        } else {
            cache.g_drop = cache.g_h1;
            cache.g_drop_mask.assign(batch * h1, T(1));
        }

        cache.g_a2.assign(batch * h2, T(0));
        nn::fc_forward(cache.g_drop.data(), batch, h1, p.g_fc2.w.data(), p.g_fc2.b.data(), h2, cache.g_a2.data());
        cache.g_bn2_out.assign(batch * h2, T(0));
        if (train) {
            cache.g_bn2_xhat.assign(batch * h2, T(0));
            cache.g_bn2_invstd.assign(h2, T(0));
            nn::batchnorm_forward_train(cache.g_a2.data(), batch, h2, std::size_t{1}, p.g_bn2.gamma.data(),
                                        p.g_bn2.beta.data(), cfg.bn_eps, cfg.bn_momentum,
                                        p.g_bn2.running_mean.data(), p.g_bn2.running_var.data(),
                                        cache.g_bn2_out.data(), cache.g_bn2_xhat.data(),
                                        cache.g_bn2_invstd.data(), update_running);
        } else {
            nn::batchnorm_forward_eval(cache.g_a2.data(), batch, h2, std::size_t{1}, p.g_bn2.gamma.data(),
                                       p.g_bn2.beta.data(), cfg.bn_eps, p.g_bn2.running_mean.data(),
                                       p.g_bn2.running_var.data(), cache.g_bn2_out.data());
        }
        cache.g_h2.assign(batch * h2, T(0));
        nn::relu_forward(cache.g_bn2_out.data(), cache.g_h2.size(), cache.g_h2.data());

        out.gamma_logits.assign(batch * cfg.num_classes, T(0));
        nn::fc_forward(cache.g_h2.data(), batch, h2, p.g_fc3.w.data(), p.g_fc3.b.data(), cfg.num_classes,
                       out.gamma_logits.data());
    }
    return out;
}

template <typename T>
ModelOutput<T> forward(Model<T>& model, const T* features, std::size_t batch, RunMode mode = RunMode::Eval,
                       Xoshiro256* rng = nullptr) {
    ForwardCache<T> cache;
    return forward(model, features, batch, mode, rng, cache);
}

// Loss gradients with respect to the head outputs.
template <typename T>
struct OutputGrad {
    std::vector<T> p_hat;        // [B]
    std::vector<T> r_hat;        // [B]
    std::vector<T> gamma_logits; // [B, C]
};

template <typename T>
void zero_grads(const ModelConfig& cfg, ModelParams<T>& grads) {
    for (auto& ref : collect_arrays(cfg, grads)) std::fill(ref.values->begin(), ref.values->end(), T(0));
}

// Reverse-mode gradients for a train-mode forward cache. Accumulates into
// `grads` (call zero_grads first for plain gradients).
template <typename T>
void backward(Model<T>& model, const ForwardCache<T>& cache, const OutputGrad<T>& gout, ModelParams<T>& grads) {
    const ModelConfig& cfg = model.cfg;
    auto& p = model.params;
    const std::size_t batch = cache.batch;
    const std::size_t h = cfg.lstm_hidden;
    const auto chain = cfg.time_chain();

    std::vector<T> d_shared(batch * h, T(0));

    if (cfg.head_p && !gout.p_hat.empty()) {
        nn::fc_backward(gout.p_hat.data(), cache.shared.data(), batch, h, p.head_p.w.data(), 1, d_shared.data(),
                        grads.head_p.w.data(), grads.head_p.b.data());
    }

    if (cfg.head_r && !gout.r_hat.empty()) {
        std::vector<T> d_h2(batch * cfg.head_r_h2, T(0));
        nn::fc_backward(gout.r_hat.data(), cache.r_h2.data(), batch, cfg.head_r_h2, p.r_fc3.w.data(), 1,
                        d_h2.data(), grads.r_fc3.w.data(), grads.r_fc3.b.data());
        std::vector<T> d_a2(batch * cfg.head_r_h2, T(0));
        nn::relu_backward(d_h2.data(), cache.r_a2.data(), d_a2.size(), d_a2.data());
        std::vector<T> d_h1(batch * cfg.head_r_h1, T(0));
        nn::fc_backward(d_a2.data(), cache.r_h1.data(), batch, cfg.head_r_h1, p.r_fc2.w.data(), cfg.head_r_h2,
                        d_h1.data(), grads.r_fc2.w.data(), grads.r_fc2.b.data());
        std::vector<T> d_a1(batch * cfg.head_r_h1, T(0));
        nn::relu_backward(d_h1.data(), cache.r_a1.data(), d_a1.size(), d_a1.data());
        nn::fc_backward(d_a1.data(), cache.shared.data(), batch, h, p.r_fc1.w.data(), cfg.head_r_h1,
                        d_shared.data(), grads.r_fc1.w.data(), grads.r_fc1.b.data());
    }

    if (cfg.head_gamma && !gout.gamma_logits.empty()) {
        const std::size_t h1 = cfg.head_gamma_h1, h2 = cfg.head_gamma_h2;
        std::vector<T> d_gh2(batch * h2, T(0));
        nn::fc_backward(gout.gamma_logits.data(), cache.g_h2.data(), batch, h2, p.g_fc3.w.data(), cfg.num_classes,
                        d_gh2.data(), grads.g_fc3.w.data(), grads.g_fc3.b.data());
        std::vector<T> d_bn2(batch * h2, T(0));
        nn::relu_backward(d_gh2.data(), cache.g_bn2_out.data(), d_bn2.size(), d_bn2.data());
        std::vector<T> d_a2(batch * h2, T(0));
        nn::batchnorm_backward(d_bn2.data(), cache.g_bn2_xhat.data(), cache.g_bn2_invstd.data(),
                               p.g_bn2.gamma.data(), batch, h2, std::size_t{1}, d_a2.data(),
                               grads.g_bn2.gamma.data(), grads.g_bn2.beta.data());
        std::vector<T> d_drop(batch * h1, T(0));
        nn::fc_backward(d_a2.data(), cache.g_drop.data(), batch, h1, p.g_fc2.w.data(), h2, d_drop.data(),
                        grads.g_fc2.w.data(), grads.g_fc2.b.data());
        std::vector<T> d_gh1(batch * h1, T(0));
        nn::dropout_backward(d_drop.data(), cache.g_drop_mask.data(), d_gh1.size(), d_gh1.data());
        std::vector<T> d_bn1(batch * h1, T(0));
        nn::relu_backward(d_gh1.data(), cache.g_bn1_out.data(), d_bn1.size(), d_bn1.data());
        std::vector<T> d_a1(batch * h1, T(0));
        nn::batchnorm_backward(d_bn1.data(), cache.g_bn1_xhat.data(), cache.g_bn1_invstd.data(),
                               p.g_bn1.gamma.data(), batch, h1, std::size_t{1}, d_a1.data(),
                               grads.g_bn1.gamma.data(), grads.g_bn1.beta.data());
        nn::fc_backward(d_a1.data(), cache.shared.data(), batch, h, p.g_fc1.w.data(), h1, d_shared.data(),
                        grads.g_fc1.w.data(), grads.g_fc1.b.data());
    }

    // Scatter shared gradient into the last step of the top LSTM layer.
    const std::size_t steps = cfg.trunk_steps();
    const std::size_t channels = cfg.trunk_channels();
    std::vector<T> d_hidden(batch * steps * h, T(0));
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < h; ++j) d_hidden[(b * steps + steps - 1) * h + j] = d_shared[b * h + j];

    std::vector<T> d_lstm_in;
    for (std::size_t i = cfg.lstm_layers; i-- > 0;) {
        const T* x = i == 0 ? cache.lstm_in.data() : cache.lstm[i - 1].hidden.data();
        const std::size_t in_dim = i == 0 ? channels : h;
        d_lstm_in.assign(batch * steps * in_dim, T(0));
        nn::lstm_backward(x, batch, steps, in_dim, h, p.lstm[i], cache.lstm[i], d_hidden.data(), d_lstm_in.data(),
                          grads.lstm[i]);
        d_hidden = d_lstm_in; // becomes gh for the layer below
    }

    // Transpose back to [B, C, T].
    std::vector<T> d_att_out(batch * channels * steps, T(0));
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t t = 0; t < steps; ++t)
                d_att_out[(b * channels + c) * steps + t] = d_lstm_in[(b * steps + t) * channels + c];

    std::vector<T> d_act(batch * channels * steps, T(0));
    nn::attention_backward(d_att_out.data(), cache.att_in.data(), cache.att_weights.data(), batch, channels, steps,
                           d_act.data());

    for (std::size_t i = cfg.convs.size(); i-- > 0;) {
        const auto& cs = cfg.convs[i];
        const std::size_t tin = chain[i], tout = chain[i + 1];
        std::vector<T> d_bn(batch * cs.out_ch * tout, T(0));
        nn::relu_backward(d_act.data(), cache.bn_out[i].data(), d_bn.size(), d_bn.data());
        std::vector<T> d_conv(batch * cs.out_ch * tout, T(0));
        nn::batchnorm_backward(d_bn.data(), cache.bn_xhat[i].data(), cache.bn_invstd[i].data(),
                               p.conv_bns[i].gamma.data(), batch, cs.out_ch, tout, d_conv.data(),
                               grads.conv_bns[i].gamma.data(), grads.conv_bns[i].beta.data());
        std::vector<T> d_in(batch * cs.in_ch * tin, T(0));
        nn::conv1d_backward(cache.conv_in[i].data(), batch, cs.in_ch, tin, p.convs[i].w.data(), cs.out_ch,
                            cs.kernel, cs.stride, d_conv.data(), d_in.data(), grads.convs[i].w.data(),
                            grads.convs[i].b.data());
        d_act = std::move(d_in);
    }
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ParamRow {
    std::string name;
    std::size_t count;
};

// Per-layer trainable counts; batch-norm rows inside head gamma are folded
// into their FC row, attention and dropout contribute zero.
inline std::vector<ParamRow> parameter_rows(const ModelConfig& cfg) {
    std::vector<ParamRow> rows;
    for (std::size_t i = 0; i < cfg.convs.size(); ++i) {
        const auto& c = cfg.convs[i];
        rows.push_back({"conv" + std::to_string(i + 1), c.out_ch * c.in_ch * c.kernel + c.out_ch});
        rows.push_back({"conv" + std::to_string(i + 1) + "_bn", 2 * c.out_ch});
    }
    rows.push_back({"attention", 0});
    for (std::size_t i = 0; i < cfg.lstm_layers; ++i) {
        const std::size_t in_dim = i == 0 ? cfg.trunk_channels() : cfg.lstm_hidden;
        const std::size_t h = cfg.lstm_hidden;
        rows.push_back({"lstm" + std::to_string(i + 1), 4 * h * (in_dim + h) + 8 * h});
    }
    const std::size_t h = cfg.lstm_hidden;
    if (cfg.head_p) rows.push_back({"head_p", h + 1});
    if (cfg.head_r) {
        rows.push_back({"head_r.fc1", cfg.head_r_h1 * h + cfg.head_r_h1});
        rows.push_back({"head_r.fc2", cfg.head_r_h2 * cfg.head_r_h1 + cfg.head_r_h2});
        rows.push_back({"head_r.fc3", cfg.head_r_h2 + 1});
    }
    if (cfg.head_gamma) {
        rows.push_back({"head_gamma.fc1", cfg.head_gamma_h1 * h + cfg.head_gamma_h1 + 2 * cfg.head_gamma_h1});
        rows.push_back({"head_gamma.dropout", 0});
        rows.push_back({"head_gamma.fc2",
                        cfg.head_gamma_h2 * cfg.head_gamma_h1 + cfg.head_gamma_h2 + 2 * cfg.head_gamma_h2});
        rows.push_back({"head_gamma.fc3", cfg.num_classes * cfg.head_gamma_h2 + cfg.num_classes});
    }
    return rows;
}

inline std::size_t total_trainable(const ModelConfig& cfg) {
    std::size_t total = 0;
    for (const auto& row : parameter_rows(cfg)) total += row.count;
    return total;
}

// Counted from the actual arrays; must agree with parameter_rows.
template <typename T>
std::size_t count_trainable(const ModelConfig& cfg, ModelParams<T>& params) {
    std::size_t total = 0;
    for (const auto& ref : collect_arrays(cfg, params))
        if (ref.trainable) total += ref.values->size();
    return total;
}

} // namespace imn
