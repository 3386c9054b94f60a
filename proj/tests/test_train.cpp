#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "imn/dataset.hpp"
#include "imn/optim.hpp"
#include "imn/train.hpp"

using namespace imn;

namespace {

// Small model/dataset pair sized for fast training tests: 16-sample
// sequences, two gamma classes.
DatasetConfig train_test_dataset_config() {
    DatasetConfig cfg;
    cfg.p_grid = {0.0, 0.1};
    cfg.r_grid = {1.0, 100.0};
    cfg.gamma_grid = {1.0, 10.0};
    cfg.n_per_config = 50;
    cfg.seq_len = 16;
    cfg.master_seed = 4242;
    return cfg;
}

ModelConfig train_test_model_config() {
    ModelConfig cfg;
    cfg.input_len = 16;
    cfg.convs = {{1, 4, 3, 2}}; // 16 -> 7 steps
    cfg.lstm_hidden = 8;
    cfg.head_r_h1 = 8;
    cfg.head_r_h2 = 4;
    cfg.head_gamma_h1 = 8;
    cfg.head_gamma_h2 = 4;
    cfg.num_classes = 2;
    return cfg;
}

TrainConfig quick_train_config(std::size_t epochs) {
    TrainConfig tc;
    tc.batch_size = 16;
    tc.max_epochs = epochs;
    tc.seed = 7;
    return tc;
}

const BuiltDataset& built() {
    static const BuiltDataset ds = build_splits(train_test_dataset_config());
    return ds;
}

} // namespace

TEST_CASE("adam zero gradient leaves parameters unchanged") {
    const ModelConfig cfg = train_test_model_config();
    auto model = init_model<float>(cfg, 5);
    auto before = model.params;
    auto grads = make_params<float>(cfg);
    zero_grads(cfg, grads);
    auto state = init_adam(cfg, model.params);
    adam_step(cfg, model.params, grads, state, {});
    const auto refs_a = collect_arrays(cfg, model.params);
    const auto refs_b = collect_arrays(cfg, before);
    for (std::size_t i = 0; i < refs_a.size(); ++i) CHECK(*refs_a[i].values == *refs_b[i].values);
}

TEST_CASE("adam first step moves by about lr in the gradient sign") {
    const ModelConfig cfg = train_test_model_config();
    auto model = init_model<float>(cfg, 6);
    auto grads = make_params<float>(cfg);
    zero_grads(cfg, grads);
    grads.head_p.w[0] = 0.5f;
    grads.head_p.w[1] = -2.0f;
    auto state = init_adam(cfg, model.params);
    const AdamConfig ac;
    const float w0 = model.params.head_p.w[0], w1 = model.params.head_p.w[1];
    adam_step(cfg, model.params, grads, state, ac);
    // First-step closed form: m_hat = g, v_hat = g^2, so the update is
    // lr * g / (|g| + eps) ~ lr * sign(g).
    CHECK(model.params.head_p.w[0] == Catch::Approx(w0 - ac.learning_rate).epsilon(1e-4));
    CHECK(model.params.head_p.w[1] == Catch::Approx(w1 + ac.learning_rate).epsilon(1e-4));
    CHECK(state.step == 1);
}

TEST_CASE("adam is deterministic and rejects non-finite gradients") {
    const ModelConfig cfg = train_test_model_config();
    auto m1 = init_model<float>(cfg, 8);
    auto m2 = init_model<float>(cfg, 8);
    auto g = make_params<float>(cfg);
    zero_grads(cfg, g);
    g.r_fc1.w[3] = 0.25f;
    auto s1 = init_adam(cfg, m1.params);
    auto s2 = init_adam(cfg, m2.params);
    adam_step(cfg, m1.params, g, s1, {});
    adam_step(cfg, m2.params, g, s2, {});
    CHECK(m1.params.r_fc1.w == m2.params.r_fc1.w);

    auto bad = make_params<float>(cfg);
    zero_grads(cfg, bad);
    bad.head_p.w[0] = std::numeric_limits<float>::quiet_NaN();
    const auto before = m1.params.head_p.w;
    CHECK_THROWS_AS(adam_step(cfg, m1.params, bad, s1, {}), numeric_error);
    CHECK(m1.params.head_p.w == before); // aborted step leaves params untouched
}

TEST_CASE("fit with only the gamma loss never touches the regression heads") {
    const auto& ds = built();
    auto model = init_model<float>(train_test_model_config(), 11);
    const auto init_p = model.params.head_p;
    const auto init_r1 = model.params.r_fc1;

    TrainConfig tc = quick_train_config(2);
    tc.lambdas = {0.0, 0.0, 1.0};
    fit(model, ds.train, ds.val, ds.test, ds.manifest, tc);

    CHECK(model.params.head_p.w == init_p.w);
    CHECK(model.params.head_p.b == init_p.b);
    CHECK(model.params.r_fc1.w == init_r1.w);
    // The shared trunk must still have moved.
    auto fresh = init_model<float>(train_test_model_config(), 11);
    CHECK(model.params.convs[0].w != fresh.params.convs[0].w);
}

TEST_CASE("fit is deterministic given a seed") {
    const auto& ds = built();
    auto m1 = init_model<float>(train_test_model_config(), 13);
    auto m2 = init_model<float>(train_test_model_config(), 13);
    const TrainConfig tc = quick_train_config(3);

    const auto r1 = fit(m1, ds.train, ds.val, ds.test, ds.manifest, tc);
    const auto r2 = fit(m2, ds.train, ds.val, ds.test, ds.manifest, tc);

    REQUIRE(r1.history.size() == r2.history.size());
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
        const auto& a = r1.history[i];
        const auto& b = r2.history[i];
        CHECK(a.split == b.split);
        CHECK(a.loss_joint == b.loss_joint);
        CHECK((std::isnan(a.nmse_p) ? std::isnan(b.nmse_p) : a.nmse_p == b.nmse_p));
        CHECK(a.acc_gamma == b.acc_gamma);
    }
    CHECK(m1.params.head_p.w == m2.params.head_p.w);
    CHECK(m1.params.lstm[0].w_ih == m2.params.lstm[0].w_ih);
}

TEST_CASE("joint loss equals the weighted component sum at every logged row") {
    const auto& ds = built();
    auto model = init_model<float>(train_test_model_config(), 17);
    TrainConfig tc = quick_train_config(2);
    tc.lambdas = {0.7, 0.85, 1.0};
    const auto result = fit(model, ds.train, ds.val, ds.test, ds.manifest, tc);
    for (const auto& em : result.history) {
        const double expected = 0.7 * em.loss_p + 0.85 * em.loss_r + 1.0 * em.loss_gamma;
        CHECK(em.loss_joint == Catch::Approx(expected).epsilon(1e-9));
    }
}

TEST_CASE("training reduces the joint loss") {
    const auto& ds = built();
    auto model = init_model<float>(train_test_model_config(), 19);
    const TrainConfig tc = quick_train_config(5);
    const auto result = fit(model, ds.train, ds.val, ds.test, ds.manifest, tc);

    double first = 0.0, last = 0.0;
    for (const auto& em : result.history) {
        if (em.split != "train") continue;
        if (em.epoch == 1) first = em.loss_joint;
        last = em.loss_joint;
    }
    CHECK(last < first);
}

TEST_CASE("early stopping restores the best validation parameters") {
    const auto& ds = built();
    auto model = init_model<float>(train_test_model_config(), 23);
    TrainConfig tc = quick_train_config(6);
    tc.patience = 2;
    const auto result = fit(model, ds.train, ds.val, ds.test, ds.manifest, tc);

    double best_logged = std::numeric_limits<double>::infinity();
    for (const auto& em : result.history)
        if (em.split == "val") best_logged = std::min(best_logged, em.loss_joint);
    CHECK(result.best_val_joint == Catch::Approx(best_logged).epsilon(1e-12));

    // Re-evaluating the restored parameters reproduces the recorded best.
    const auto check = evaluate_split(model, ds.val, ds.manifest, tc.lambdas, tc.nmse_mode, tc.smoothing_r, 0, "val");
    CHECK(check.loss_joint == Catch::Approx(result.best_val_joint).epsilon(1e-6));
}

TEST_CASE("stl training uses a single loss term") {
    const auto& ds = built();
    const auto stl_cfg = build_stl(Task::P, train_test_model_config());
    auto model = init_model<float>(stl_cfg, 29);
    const TrainConfig tc = quick_train_config(2);
    const auto result = fit_stl(Task::P, model, ds.train, ds.val, ds.test, ds.manifest, tc);

    for (const auto& em : result.history) {
        CHECK(em.loss_joint == Catch::Approx(tc.lambdas.lambda_p * em.loss_p).epsilon(1e-9));
        CHECK(em.loss_gamma == 0.0);
        CHECK(std::isnan(em.nmse_r));
        CHECK(std::isnan(em.acc_gamma));
    }

    auto wrong = init_model<float>(build_stl(Task::R, train_test_model_config()), 29);
    CHECK_THROWS_AS(fit_stl(Task::P, wrong, ds.train, ds.val, ds.test, ds.manifest, tc), config_error);
}

TEST_CASE("fit validates dataset/model compatibility") {
    const auto& ds = built();
    ModelConfig wrong = train_test_model_config();
    wrong.input_len = 100;
    wrong.convs = {{1, 4, 8, 2}};
    auto model = init_model<float>(wrong, 31);
    CHECK_THROWS_AS(fit(model, ds.train, ds.val, ds.test, ds.manifest, quick_train_config(1)), config_error);
}

TEST_CASE("metrics CSV round trip preserves values exactly") {
    const auto& ds = built();
    auto model = init_model<float>(train_test_model_config(), 37);
    const auto result = fit(model, ds.train, ds.val, ds.test, ds.manifest, quick_train_config(2));

    const auto dir = std::filesystem::temp_directory_path() / "imn_train_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "metrics.csv";
    write_metrics_csv(path, result.history);
    const auto loaded = read_metrics_csv(path);

    REQUIRE(loaded.size() == result.history.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        const auto& a = result.history[i];
        const auto& b = loaded[i];
        CHECK(a.epoch == b.epoch);
        CHECK(a.split == b.split);
        CHECK(a.loss_joint == b.loss_joint);
        CHECK(a.seconds == b.seconds);
        CHECK((std::isnan(a.nmse_r_raw) ? std::isnan(b.nmse_r_raw) : a.nmse_r_raw == b.nmse_r_raw));
        CHECK(a.acc_gamma == b.acc_gamma);
    }

    // 2 epochs x 3 splits = 6 rows.
    CHECK(result.history.size() == 6);
}

TEST_CASE("per-batch NMSE mode trains and logs consistently") {
    const auto& ds = built();
    auto model = init_model<float>(train_test_model_config(), 41);
    TrainConfig tc = quick_train_config(2);
    tc.nmse_mode = NmseMode::PerBatch;
    const auto result = fit(model, ds.train, ds.val, ds.test, ds.manifest, tc);
    for (const auto& em : result.history) CHECK(std::isfinite(em.loss_joint));
}
