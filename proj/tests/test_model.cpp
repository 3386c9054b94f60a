#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "imn/model.hpp"
#include "imn/nn.hpp"

using namespace imn;

namespace {

std::vector<double> ramp(std::size_t n, double scale = 0.01) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = scale * static_cast<double>(i) - 0.5 * scale * n;
    return v;
}

} // namespace

TEST_CASE("conv output length chain") {
    CHECK(nn::conv_out_len(100, 8, 2) == 47);
    CHECK(nn::conv_out_len(47, 4, 2) == 22);
    CHECK(nn::conv_out_len(22, 4, 2) == 10);
    CHECK_THROWS_AS(nn::conv_out_len(3, 4, 1), std::invalid_argument);

    const ModelConfig cfg;
    CHECK(cfg.time_chain() == std::vector<std::size_t>{100, 47, 22, 10});
    CHECK(cfg.trunk_channels() == 128);
}

TEST_CASE("conv1d identity kernel") {
    const std::vector<double> in = {1.0, -2.0, 3.0, 0.5};
    std::vector<double> w = {1.0};
    std::vector<double> b = {0.0};
    std::vector<double> out(4, 0.0);
    nn::conv1d_forward(in.data(), 1, 1, 4, w.data(), b.data(), 1, 1, 1, out.data());
    CHECK(out == in);
}

TEST_CASE("conv1d single window equals a dot product") {
    const std::vector<double> in = {0.5, -1.0, 2.0};
    const std::vector<double> w = {3.0, 0.25, -2.0};
    const std::vector<double> b = {0.125};
    std::vector<double> out(1, 0.0);
    nn::conv1d_forward(in.data(), 1, 1, 3, w.data(), b.data(), 1, 3, 1, out.data());
    const double expected = 3.0 * 0.5 + 0.25 * -1.0 + -2.0 * 2.0 + 0.125;
    CHECK(out[0] == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("conv1d stride and multi-channel bookkeeping") {
    // 2 input channels, 1 output channel, k=2, s=2, T=6 -> Tout=3.
    const std::vector<double> in = {1, 2, 3, 4, 5, 6, /*ch2*/ 10, 20, 30, 40, 50, 60};
    const std::vector<double> w = {1.0, -1.0, /*ch2*/ 0.5, 0.5};
    const std::vector<double> b = {1.0};
    std::vector<double> out(3, 0.0);
    nn::conv1d_forward(in.data(), 1, 2, 6, w.data(), b.data(), 1, 2, 2, out.data());
    // out[t] = (in1[2t]-in1[2t+1]) + 0.5*(in2[2t]+in2[2t+1]) + 1
    CHECK(out[0] == Catch::Approx(1 - 2 + 0.5 * 30 + 1));
    CHECK(out[1] == Catch::Approx(3 - 4 + 0.5 * 70 + 1));
    CHECK(out[2] == Catch::Approx(5 - 6 + 0.5 * 110 + 1));
}

TEST_CASE("batchnorm train mode normalizes and eval uses running stats") {
    const std::size_t batch = 8, channels = 2, time = 5;
    auto in = ramp(batch * channels * time, 0.3);
    std::vector<double> gamma = {1.0, 1.0}, beta = {0.0, 0.0};
    std::vector<double> rm = {0.0, 0.0}, rv = {1.0, 1.0};
    std::vector<double> out(in.size()), xhat(in.size()), invstd(channels);

    nn::batchnorm_forward_train(in.data(), batch, channels, time, gamma.data(), beta.data(), 1e-5, 0.1, rm.data(),
                                rv.data(), out.data(), xhat.data(), invstd.data(), true);

    for (std::size_t c = 0; c < channels; ++c) {
        double sum = 0.0, sum2 = 0.0;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < time; ++t) {
                const double v = out[(b * channels + c) * time + t];
                sum += v;
                sum2 += v * v;
            }
        const double n = batch * time;
        CHECK(std::abs(sum / n) < 1e-5);
        CHECK(sum2 / n - (sum / n) * (sum / n) == Catch::Approx(1.0).margin(1e-4));
    }

    SECTION("eval with identity affine and unit running stats divides by sqrt(1+eps)") {
        std::vector<double> rm0 = {0.0}, rv0 = {1.0};
        std::vector<double> g1 = {1.0}, b0 = {0.0};
        const std::vector<double> x = {2.0, -3.0, 0.5};
        std::vector<double> y(3);
        nn::batchnorm_forward_eval(x.data(), 3, 1, 1, g1.data(), b0.data(), 1e-5, rm0.data(), rv0.data(), y.data());
        for (int i = 0; i < 3; ++i) CHECK(y[i] == Catch::Approx(x[i] / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
    }

    SECTION("train mode requires a population of at least 2") {
        std::vector<double> y(channels), xh(channels), is(channels);
        CHECK_THROWS_AS(nn::batchnorm_forward_train(in.data(), 1, channels, 1, gamma.data(), beta.data(), 1e-5,
                                                    0.1, rm.data(), rv.data(), y.data(), xh.data(), is.data(),
                                                    true),
                        std::invalid_argument);
    }
}

TEST_CASE("attention weights") {
    SECTION("constant features give uniform weights") {
        const std::size_t batch = 2, channels = 3, time = 7;
        std::vector<double> in(batch * channels * time, 0.42);
        std::vector<double> out(in.size()), w(batch * time);
        nn::attention_forward(in.data(), batch, channels, time, out.data(), w.data());
        for (double v : w) CHECK(v == Catch::Approx(1.0 / time).epsilon(1e-12));
    }

    SECTION("time = 1 passes features through with weight 1") {
        std::vector<double> in = {1.5, -2.5};
        std::vector<double> out(2), w(1);
        nn::attention_forward(in.data(), 1, 2, 1, out.data(), w.data());
        CHECK(w[0] == 1.0);
        CHECK(out == in);
    }

    SECTION("hand softmax: channel means {0, ln 2} give weights {1/3, 2/3}") {
        // One channel, two steps: scores are the values themselves.
        std::vector<double> in = {0.0, std::log(2.0)};
        std::vector<double> out(2), w(2);
        nn::attention_forward(in.data(), 1, 1, 2, out.data(), w.data());
        CHECK(w[0] == Catch::Approx(1.0 / 3).epsilon(1e-12));
        CHECK(w[1] == Catch::Approx(2.0 / 3).epsilon(1e-12));
        CHECK(out[1] == Catch::Approx(std::log(2.0) * 2.0 / 3).epsilon(1e-12));
    }

    SECTION("weights sum to 1 for arbitrary features") {
        const std::size_t batch = 3, channels = 4, time = 9;
        auto in = ramp(batch * channels * time, 0.11);
        std::vector<double> out(in.size()), w(batch * time);
        nn::attention_forward(in.data(), batch, channels, time, out.data(), w.data());
        for (std::size_t b = 0; b < batch; ++b) {
            double s = 0.0;
            for (std::size_t t = 0; t < time; ++t) {
                s += w[b * time + t];
                CHECK(w[b * time + t] >= 0.0);
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("lstm zero weights and zero input give zero hidden states") {
    const std::size_t batch = 2, time = 4, in_dim = 3, hidden = 5;
    nn::LstmParams<double> p;
    p.w_ih.assign(4 * hidden * in_dim, 0.0);
    p.w_hh.assign(4 * hidden * hidden, 0.0);
    p.b_ih.assign(4 * hidden, 0.0);
    p.b_hh.assign(4 * hidden, 0.0);
    std::vector<double> x(batch * time * in_dim, 0.0);
    nn::LstmCache<double> cache;
    nn::lstm_forward(x.data(), batch, time, in_dim, hidden, p, cache);
    for (double h : cache.hidden) CHECK(h == 0.0);
}

TEST_CASE("lstm single step matches hand-computed gate arithmetic") {
    // Scalar cell: one input, one hidden unit, one step.
    nn::LstmParams<double> p;
    p.w_ih = {0.5, 0.3, 1.0, 0.2}; // i, f, g, o
    p.w_hh = {0.7, -0.4, 0.1, 0.9};
    p.b_ih = {0.1, 0.2, 0.3, 0.4};
    p.b_hh = {0.05, -0.05, 0.0, 0.1};
    const std::vector<double> x = {1.0};
    nn::LstmCache<double> cache;
    nn::lstm_forward(x.data(), 1, 1, 1, 1, p, cache);

    auto sigma = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    const double gi = sigma(0.5 * 1.0 + 0.1 + 0.05);
    const double gf = sigma(0.3 * 1.0 + 0.2 - 0.05);
    (void)gf; // forget gate is idle at t = 0
    const double gg = std::tanh(1.0 * 1.0 + 0.3 + 0.0);
    const double go = sigma(0.2 * 1.0 + 0.4 + 0.1);
    const double c1 = gi * gg; // previous cell state is zero
    const double h1 = go * std::tanh(c1);

    CHECK(cache.cell[0] == Catch::Approx(c1).epsilon(1e-12));
    CHECK(cache.hidden[0] == Catch::Approx(h1).epsilon(1e-12));
}

TEST_CASE("lstm output shape for the trunk stack") {
    const ModelConfig cfg;
    auto model = init_model<double>(cfg, 7);
    const std::size_t batch = 3;
    std::vector<double> features(batch * cfg.input_len);
    Xoshiro256 rng(5);
    for (auto& f : features) f = rng.normal_pair().first;
    ForwardCache<double> cache;
    const auto out = forward(model, features.data(), batch, RunMode::Eval, nullptr, cache);

    CHECK(cache.lstm.size() == 2);
    CHECK(cache.lstm[0].hidden.size() == batch * 10 * 64);
    CHECK(cache.lstm[1].hidden.size() == batch * 10 * 64);
    CHECK(out.p_hat.size() == batch);
    CHECK(out.r_hat.size() == batch);
    CHECK(out.gamma_logits.size() == batch * 4);
}

TEST_CASE("take_last extracts exactly the final step") {
    const ModelConfig cfg;
    auto model = init_model<double>(cfg, 11);
    const std::size_t batch = 2, h = cfg.lstm_hidden, steps = cfg.trunk_steps();
    std::vector<double> features(batch * cfg.input_len);
    Xoshiro256 rng(6);
    for (auto& f : features) f = rng.normal_pair().first;
    ForwardCache<double> cache;
    forward(model, features.data(), batch, RunMode::Eval, nullptr, cache);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < h; ++j)
            CHECK(cache.shared[b * h + j] == cache.lstm.back().hidden[(b * steps + steps - 1) * h + j]);
}

TEST_CASE("eval forward is deterministic and heads are independent") {
    const ModelConfig cfg;
    auto model = init_model<float>(cfg, 21);
    const std::size_t batch = 4;
    std::vector<float> features(batch * cfg.input_len);
    Xoshiro256 rng(9);
    for (auto& f : features) f = static_cast<float>(rng.normal_pair().first);

    const auto a = forward(model, features.data(), batch);
    const auto b = forward(model, features.data(), batch);
    CHECK(a.p_hat == b.p_hat);
    CHECK(a.r_hat == b.r_hat);
    CHECK(a.gamma_logits == b.gamma_logits);

    // Perturb only head-R weights: p and gamma outputs must not move.
    auto perturbed = model;
    for (auto& w : perturbed.params.r_fc2.w) w += 0.25f;
    const auto c = forward(perturbed, features.data(), batch);
    CHECK(c.p_hat == a.p_hat);
    CHECK(c.gamma_logits == a.gamma_logits);
    CHECK(c.r_hat != a.r_hat);
}

TEST_CASE("train-mode forward with a fixed dropout seed is deterministic") {
    const ModelConfig cfg;
    auto m1 = init_model<float>(cfg, 33);
    auto m2 = init_model<float>(cfg, 33);
    const std::size_t batch = 8;
    std::vector<float> features(batch * cfg.input_len);
    Xoshiro256 rng(10);
    for (auto& f : features) f = static_cast<float>(rng.normal_pair().first);

    Xoshiro256 d1(77), d2(77);
    ForwardCache<float> c1, c2;
    const auto a = forward(m1, features.data(), batch, RunMode::Train, &d1, c1);
    const auto b = forward(m2, features.data(), batch, RunMode::Train, &d2, c2);
    CHECK(a.gamma_logits == b.gamma_logits);
    CHECK(a.p_hat == b.p_hat);
}

TEST_CASE("parameter rows match the published layer table with standard LSTM arithmetic") {
    const ModelConfig cfg;
    const auto rows = parameter_rows(cfg);
    auto row = [&](const std::string& name) {
        for (const auto& r : rows)
            if (r.name == name) return r.count;
        FAIL("missing row " + name);
        return std::size_t{0};
    };

    CHECK(row("conv1") == 288);
    CHECK(row("conv1_bn") == 64);
    CHECK(row("conv2") == 8256);
    CHECK(row("conv2_bn") == 128);
    CHECK(row("conv3") == 32896);
    CHECK(row("conv3_bn") == 256);
    CHECK(row("attention") == 0);
    CHECK(row("head_p") == 65);
    CHECK(row("head_r.fc1") == 4160);
    CHECK(row("head_r.fc2") == 2080);
    CHECK(row("head_r.fc3") == 33);
    CHECK(row("head_gamma.fc1") == 4288);
    CHECK(row("head_gamma.dropout") == 0);
    CHECK(row("head_gamma.fc2") == 2144);
    CHECK(row("head_gamma.fc3") == 132);

    // Standard stacked LSTM closed form: 4h(in+h) + 8h.
    CHECK(row("lstm1") == 49664);
    CHECK(row("lstm2") == 33280);

    // Config arithmetic and actual array sizes agree.
    auto model = init_model<float>(cfg, 3);
    CHECK(total_trainable(cfg) == count_trainable(cfg, model.params));
    CHECK(total_trainable(cfg) == 137734);
}

TEST_CASE("stl variants keep the trunk and one head") {
    const ModelConfig mtl;
    const auto stl_p = build_stl(Task::P, mtl);
    const auto stl_r = build_stl(Task::R, mtl);
    const auto stl_g = build_stl(Task::Gamma, mtl);

    const std::size_t trunk = total_trainable(stl_p) - 65;
    CHECK(total_trainable(stl_p) == trunk + 65);
    CHECK(total_trainable(stl_r) == trunk + 4160 + 2080 + 33);
    CHECK(total_trainable(stl_g) == trunk + 4288 + 2144 + 132);

    // Head params partition: sum of STL heads equals the MTL heads.
    const std::size_t mtl_heads = total_trainable(mtl) - trunk;
    const std::size_t stl_heads = (total_trainable(stl_p) - trunk) + (total_trainable(stl_r) - trunk) +
                                  (total_trainable(stl_g) - trunk);
    CHECK(mtl_heads == stl_heads);

    auto m = init_model<float>(stl_p, 8);
    std::vector<float> features(2 * mtl.input_len, 0.1f);
    const auto out = forward(m, features.data(), 2);
    CHECK(out.p_hat.size() == 2);
    CHECK(out.r_hat.empty());
    CHECK(out.gamma_logits.empty());
}

TEST_CASE("shape chain holds for any batch size") {
    const ModelConfig cfg;
    for (std::size_t batch : {std::size_t{1}, std::size_t{5}}) {
        auto model = init_model<float>(cfg, 100 + batch);
        std::vector<float> features(batch * cfg.input_len, 0.3f);
        ForwardCache<float> cache;
        const auto out = forward(model, features.data(), batch, RunMode::Eval, nullptr, cache);
        CHECK(cache.conv_out[0].size() == batch * 32 * 47);
        CHECK(cache.conv_out[1].size() == batch * 64 * 22);
        CHECK(cache.conv_out[2].size() == batch * 128 * 10);
        CHECK(out.p_hat.size() == batch);
        CHECK(out.gamma_logits.size() == batch * cfg.num_classes);
    }
}
