#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "imn/checkpoint.hpp"
#include "imn/eval.hpp"
#include "imn/train.hpp"

using namespace imn;

namespace {

DatasetConfig eval_test_dataset_config() {
    DatasetConfig cfg;
    cfg.p_grid = {0.0, 0.1};
    cfg.r_grid = {1.0, 10.0, 100.0, 1000.0};
    cfg.gamma_grid = {1.0, 10.0, 50.0, 100.0};
    cfg.n_per_config = 10;
    cfg.seq_len = 16;
    cfg.master_seed = 777;
    return cfg;
}

ModelConfig eval_test_model_config() {
    ModelConfig cfg;
    cfg.input_len = 16;
    cfg.convs = {{1, 4, 3, 2}};
    cfg.lstm_hidden = 8;
    cfg.head_r_h1 = 8;
    cfg.head_r_h2 = 4;
    cfg.head_gamma_h1 = 8;
    cfg.head_gamma_h2 = 4;
    cfg.num_classes = 4;
    return cfg;
}

const BuiltDataset& built() {
    static const BuiltDataset ds = build_splits(eval_test_dataset_config());
    return ds;
}

std::filesystem::path temp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "imn_eval_test";
    std::filesystem::create_directories(dir);
    return dir;
}

// Stub forwards for oracle-style evaluation tests.
ModelOutput<float> oracle_output(const Dataset& split, std::size_t offset, const float* /*features*/,
                                 std::size_t count, std::size_t num_classes) {
    ModelOutput<float> out;
    out.batch = count;
    out.num_classes = num_classes;
    out.p_hat.resize(count);
    out.r_hat.resize(count);
    out.gamma_logits.assign(count * num_classes, 0.0f);
    for (std::size_t i = 0; i < count; ++i) {
        out.p_hat[i] = split.target_p[offset + i];
        out.r_hat[i] = split.target_logr[offset + i];
        out.gamma_logits[i * num_classes + split.gamma_class[offset + i]] = 25.0f;
    }
    return out;
}

} // namespace

TEST_CASE("evaluate_with oracle stub scores perfectly") {
    const auto& ds = built();
    const auto& mf = ds.manifest;
    std::size_t offset = 0;
    const auto em = evaluate_with(
        [&](const float* features, std::size_t count) {
            auto out = oracle_output(ds.test, offset, features, count, mf.class_map.size());
            offset += count;
            return out;
        },
        ds.test, mf, LossWeights{}, NmseMode::Global, 0.1, 0, "test");

    CHECK(em.nmse_p == Catch::Approx(0.0).margin(1e-12));
    CHECK(em.nmse_r == Catch::Approx(0.0).margin(1e-12));
    CHECK(em.acc_gamma == 1.0);
    CHECK(em.nmse_p_raw == Catch::Approx(0.0).margin(1e-12));
    CHECK(em.nmse_r_raw == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("evaluate_with mean-predictor stub scores NMSE 1 on the training split") {
    const auto& ds = built();
    const auto& mf = ds.manifest;
    // Standardized training targets have mean 0; the mean predictor emits 0.
    const auto em = evaluate_with(
        [&](const float*, std::size_t count) {
            ModelOutput<float> out;
            out.batch = count;
            out.num_classes = mf.class_map.size();
            out.p_hat.assign(count, 0.0f);
            out.r_hat.assign(count, 0.0f);
            return out;
        },
        ds.train, mf, LossWeights{1.0, 1.0, 0.0}, NmseMode::Global, 0.1, 0, "train");

    CHECK(em.nmse_p == Catch::Approx(1.0).margin(1e-3));
    CHECK(em.nmse_r == Catch::Approx(1.0).margin(1e-3));
}

TEST_CASE("evaluate_with uniform-logit stub sits at chance accuracy") {
    const auto& ds = built();
    const auto& mf = ds.manifest;
    const auto em = evaluate_with(
        [&](const float*, std::size_t count) {
            ModelOutput<float> out;
            out.batch = count;
            out.num_classes = mf.class_map.size();
            out.gamma_logits.assign(count * out.num_classes, 0.0f);
            return out;
        },
        ds.test, mf, LossWeights{0.0, 0.0, 1.0}, NmseMode::Global, 0.1, 0, "test");

    // Ties resolve to class 0; the split is gamma-balanced so this is the
    // exact chance level up to the one-example rounding of the split.
    CHECK(em.acc_gamma == Catch::Approx(0.25).margin(0.02));
    CHECK(em.loss_gamma == Catch::Approx(std::log(4.0)).margin(1e-6));
}

TEST_CASE("evaluate refuses a mismatched manifest hash") {
    const auto& ds = built();
    auto model = init_model<float>(eval_test_model_config(), 3);
    const std::uint64_t good = manifest_hash(ds.manifest);
    CHECK_NOTHROW(evaluate(model, ds.test, ds.manifest, good));
    CHECK_THROWS_AS(evaluate(model, ds.test, ds.manifest, good + 1), data_error);
}

TEST_CASE("evaluate is deterministic on a frozen model") {
    const auto& ds = built();
    auto model = init_model<float>(eval_test_model_config(), 5);
    const std::uint64_t hash = manifest_hash(ds.manifest);
    const auto a = evaluate(model, ds.test, ds.manifest, hash);
    const auto b = evaluate(model, ds.test, ds.manifest, hash);
    CHECK(a.nmse_p == b.nmse_p);
    CHECK(a.nmse_r == b.nmse_r);
    CHECK(a.acc_gamma == b.acc_gamma);
    CHECK(a.loss_joint == b.loss_joint);
}

TEST_CASE("predict inverts the preprocessing pipeline") {
    const auto& ds = built();
    const auto& mf = ds.manifest;

    SECTION("oracle outputs recover the raw-scale targets") {
        // Feed standardized targets straight through the inverse transforms.
        ModelOutput<float> out;
        out.batch = 1;
        out.num_classes = 4;
        const float zp = static_cast<float>(mf.standardizer.standardize_p(0.1));
        const float zr = static_cast<float>(mf.standardizer.standardize_logr(std::log10(100.0)));
        out.p_hat = {zp};
        out.r_hat = {zr};
        out.gamma_logits = {0.0f, 0.0f, 9.0f, 0.0f};
        const auto pred = invert_outputs(out, 0, mf);
        CHECK(pred.p_hat == Catch::Approx(0.1).epsilon(1e-6));
        CHECK(pred.r_hat == Catch::Approx(100.0).epsilon(1e-6));
        CHECK(pred.gamma_hat == 50.0);
        double total = 0.0;
        for (double q : pred.gamma_probs) total += q;
        CHECK(total == Catch::Approx(1.0).epsilon(1e-9));
    }

    SECTION("predict runs end to end on a fresh sequence") {
        auto model = init_model<float>(eval_test_model_config(), 9);
        const NoiseSpec spec{0.1, 100.0, 10.0, snr_to_noise_variance(15.0, 1.0)};
        const auto [y, states] = received_sequence(spec, mf.config.seq_len, 12345);
        const auto pred = predict(model, y, mf, manifest_hash(mf));
        CHECK(std::isfinite(pred.p_hat));
        CHECK(pred.r_hat > 0.0); // inverse log transform keeps R positive
        CHECK(pred.gamma_probs.size() == 4);

        ComplexSequence wrong(mf.config.seq_len + 1, cplx{0.0, 0.0});
        CHECK_THROWS_AS(predict(model, wrong, mf, manifest_hash(mf)), data_error);
    }
}

TEST_CASE("benchmark report internal consistency") {
    const auto& ds = built();
    auto mtl = init_model<float>(eval_test_model_config(), 11);
    auto stl_p = init_model<float>(build_stl(Task::P, eval_test_model_config()), 12);
    auto stl_r = init_model<float>(build_stl(Task::R, eval_test_model_config()), 13);
    auto stl_g = init_model<float>(build_stl(Task::Gamma, eval_test_model_config()), 14);

    const auto report = benchmark({"mtl", &mtl, 10.0},
                                  {{"stl_p", &stl_p, 4.0}, {"stl_r", &stl_r, 5.0}, {"stl_gamma", &stl_g, 6.0}},
                                  ds.test, 3);

    CHECK(report.mtl.params < report.stl_total_params());
    CHECK(report.stl_total_train() == Catch::Approx(15.0));
    for (const auto& row : report.stl) CHECK(row.infer_seconds > 0.0);
    CHECK(report.mtl.infer_seconds > 0.0);

    // Percentages recomputed from the raw rows.
    const double expected = 100.0 *
                            (static_cast<double>(report.stl_total_params()) - static_cast<double>(report.mtl.params)) /
                            static_cast<double>(report.stl_total_params());
    CHECK(report.param_reduction_pct() == Catch::Approx(expected).epsilon(1e-12));

    const auto text = bench_text(report);
    CHECK(text.find("STL total") != std::string::npos);
    CHECK(text.find("MTL") != std::string::npos);
    CHECK(text.find("Reduction") != std::string::npos);
    const auto csv = bench_csv(report);
    CHECK(csv.find("stl_total") != std::string::npos);

    CHECK_THROWS_AS(time_inference(mtl, ds.test, 2), config_error);
}

TEST_CASE("export_curves names files by the loss weights") {
    const auto dir = temp_dir();
    std::vector<EpochMetrics> history;
    for (std::size_t e = 1; e <= 3; ++e)
        for (const char* split : {"train", "val", "test"}) {
            EpochMetrics em;
            em.epoch = e;
            em.split = split;
            em.nmse_p = 1.0 / static_cast<double>(e);
            em.nmse_r = 0.9 / static_cast<double>(e);
            em.acc_gamma = 0.2 * static_cast<double>(e);
            em.loss_joint = 2.0 / static_cast<double>(e);
            history.push_back(em);
        }

    const auto equal_path = export_curves(history, dir, {1.0, 1.0, 1.0});
    const auto unequal_path = export_curves(history, dir, {0.7, 0.85, 1.0});
    CHECK(equal_path != unequal_path);
    CHECK(equal_path.filename() == "curves_lambda_1-1-1.csv");
    CHECK(unequal_path.filename() == "curves_lambda_0.7-0.85-1.csv");

    const auto loaded = read_metrics_csv(equal_path);
    REQUIRE(loaded.size() == history.size());
    CHECK(loaded.size() == 9); // 3 splits x 3 epochs
    for (std::size_t i = 0; i < loaded.size(); ++i) CHECK(loaded[i].nmse_p == history[i].nmse_p);

    CHECK_THROWS_AS(export_curves({}, dir, {1, 1, 1}), data_error);

    render_metric_svg(history, "nmse_p", dir / "nmse_p.svg");
    std::ifstream svg(dir / "nmse_p.svg");
    std::string content((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
    CHECK(content.find("<svg") != std::string::npos);
    CHECK(content.find("polyline") != std::string::npos);
}

TEST_CASE("checkpoint round trip preserves weights, config, and hash") {
    const auto dir = temp_dir();
    const auto& ds = built();
    auto model = init_model<float>(eval_test_model_config(), 55);
    const std::uint64_t hash = manifest_hash(ds.manifest);

    const auto path = dir / "model.imnc";
    save_checkpoint(path, model, hash);
    auto loaded = load_checkpoint(path);

    CHECK(loaded.manifest_hash == hash);
    CHECK(loaded.model.cfg.input_len == model.cfg.input_len);
    CHECK(loaded.model.params.head_p.w == model.params.head_p.w);
    CHECK(loaded.model.params.lstm[1].w_hh == model.params.lstm[1].w_hh);
    CHECK(loaded.model.params.conv_bns[0].running_var == model.params.conv_bns[0].running_var);

    // Same outputs after reload.
    std::vector<float> features(3 * model.cfg.input_len, 0.2f);
    const auto a = forward(model, features.data(), 3);
    const auto b = forward(loaded.model, features.data(), 3);
    CHECK(a.p_hat == b.p_hat);
    CHECK(a.gamma_logits == b.gamma_logits);

    // Corruption is detected.
    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        bytes[40] = static_cast<char>(bytes[40] ^ 0x5A);
        std::ofstream out(dir / "corrupt.imnc", std::ios::binary | std::ios::trunc);
        out << bytes;
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "corrupt.imnc"), checksum_error);
}
