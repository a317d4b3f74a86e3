#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <vector>

#include "neuroloc/autodiff.hpp"
#include "neuroloc/checkpoint.hpp"
#include "neuroloc/error.hpp"
#include "neuroloc/fcn_baseline.hpp"
#include "neuroloc/piunet.hpp"
#include "neuroloc/rng.hpp"

using namespace neuroloc;

namespace {

std::filesystem::path fresh_dir(const std::string& tag) {
    const auto dir = std::filesystem::temp_directory_path() / ("neuroloc_ckpt_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

PiuNetConfig tiny_config() {
    PiuNetConfig cfg;
    cfg.grid = 8;
    cfg.base_channels = 4;
    cfg.depth = 1;
    return cfg;
}

FcnConfig tiny_fcn() {
    FcnConfig cfg;
    cfg.n_sensors = 4;
    cfg.n_sources = 5;
    cfg.width = 8;
    return cfg;
}

TrainCheckpoint piunet_meta(std::int64_t step) {
    TrainCheckpoint meta;
    meta.model_kind = "piunet";
    meta.piunet = tiny_config();
    meta.step = step;
    meta.seed = 99;
    meta.lr = 1e-4;
    return meta;
}

// A couple of optimizer steps on noise gives nonzero moments to round-trip.
template <typename S>
ad::AdamState<S> warmed_adam(ad::ParamStore<S>& ps, std::uint64_t seed) {
    ad::AdamHyper<S> hyper;
    hyper.lr = static_cast<S>(1e-4);
    ad::AdamState<S> state(ps, hyper);
    Rng rng(seed);
    for (int step = 0; step < 3; ++step) {
        for (const auto& name : ps.names()) {
            auto& p = ps.at(name);
            p.ensure_grad();
            for (auto& gv : p.grad) gv = static_cast<S>(rng.gauss());
        }
        ad::adam_step(ps, state);
        ps.zero_grad();
    }
    return state;
}

}  // namespace

TEST_CASE("parameter archive round trips bit-exactly") {
    const auto dir = fresh_dir("params");
    auto model = build_piunet<double>(tiny_config(), 51);
    save_param_archive(dir, "params", model.params);

    auto fresh = build_piunet<double>(tiny_config(), 777);  // different init
    load_param_archive(dir, "params", fresh.params);
    for (const auto& name : model.params.names())
        CHECK(fresh.params.at(name).values == model.params.at(name).values);
}

TEST_CASE("archive rejects a mismatched model") {
    const auto dir = fresh_dir("mismatch");
    auto model = build_fcn<double>(tiny_fcn(), 3);
    save_param_archive(dir, "params", model.params);

    FcnConfig wider = tiny_fcn();
    wider.width = 16;
    auto other = build_fcn<double>(wider, 3);
    CHECK_THROWS_AS(load_param_archive(dir, "params", other.params), Error);

    // Wrong precision is refused rather than silently cast.
    auto f32_model = build_fcn<float>(tiny_fcn(), 3);
    CHECK_THROWS_AS(load_param_archive(dir, "params", f32_model.params), Error);
}

TEST_CASE("full checkpoint round trips metadata, parameters, and optimizer") {
    const auto dir = fresh_dir("full");
    auto model = build_piunet<double>(tiny_config(), 99);
    auto adam = warmed_adam(model.params, 7);

    TrainCheckpoint meta = piunet_meta(1500);
    save_checkpoint(dir, meta, model.params, &adam);

    const TrainCheckpoint back = read_checkpoint_meta(dir);
    CHECK(back.model_kind == "piunet");
    CHECK(back.step == 1500);
    CHECK(back.seed == 99);
    CHECK(back.lr == 1e-4);
    CHECK(back.beta1 == 0.9);
    CHECK(back.beta2 == 0.999);
    CHECK(back.eps == 1e-8);
    CHECK(back.adam_t == 3);
    CHECK(back.has_adam);
    CHECK(back.piunet.grid == 8);
    CHECK(back.piunet.base_channels == 4);
    CHECK(back.piunet.depth == 1);
    CHECK(back.piunet.attn_at_bottleneck);

    auto restored = load_piunet_checkpoint<double>(dir);
    CHECK(restored.config.grid == 8);
    for (const auto& name : model.params.names())
        CHECK(restored.params.at(name).values == model.params.at(name).values);

    ad::AdamHyper<double> hyper;
    hyper.lr = back.lr;
    ad::AdamState<double> restored_adam(restored.params, hyper);
    restored_adam.t = back.adam_t;
    load_checkpoint_adam(dir, restored.params, restored_adam);
    for (std::size_t i = 0; i < adam.m.size(); ++i) {
        CHECK(restored_adam.m[i] == adam.m[i]);
        CHECK(restored_adam.v[i] == adam.v[i]);
    }

    // Optimizer trajectories continue identically from the restored state.
    Rng ga(4242), gb(4242);
    for (int step = 0; step < 2; ++step) {
        for (const auto& name : model.params.names()) {
            auto& p = model.params.at(name);
            auto& q = restored.params.at(name);
            p.ensure_grad();
            q.ensure_grad();
            for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] = ga.gauss();
            for (std::size_t i = 0; i < q.grad.size(); ++i) q.grad[i] = gb.gauss();
        }
        ad::adam_step(model.params, adam);
        ad::adam_step(restored.params, restored_adam);
        model.params.zero_grad();
        restored.params.zero_grad();
    }
    for (const auto& name : model.params.names())
        CHECK(restored.params.at(name).values == model.params.at(name).values);
}

TEST_CASE("fcn checkpoints use the same layout") {
    const auto dir = fresh_dir("fcn");
    auto model = build_fcn<double>(tiny_fcn(), 13);
    TrainCheckpoint meta;
    meta.model_kind = "fcn";
    meta.fcn = tiny_fcn();
    meta.step = 0;
    meta.seed = 13;
    save_checkpoint(dir, meta, model.params);

    const TrainCheckpoint back = read_checkpoint_meta(dir);
    CHECK(back.model_kind == "fcn");
    CHECK_FALSE(back.has_adam);
    CHECK(back.fcn.width == 8);

    auto restored = load_fcn_checkpoint<double>(dir);
    for (const auto& name : model.params.names())
        CHECK(restored.params.at(name).values == model.params.at(name).values);

    // Kind mismatch is a data error.
    CHECK_THROWS_AS(load_piunet_checkpoint<double>(dir), Error);
}

TEST_CASE("float checkpoints round trip") {
    const auto dir = fresh_dir("f32");
    auto model = build_fcn<float>(tiny_fcn(), 21);
    TrainCheckpoint meta;
    meta.model_kind = "fcn";
    meta.fcn = tiny_fcn();
    meta.seed = 21;
    save_checkpoint(dir, meta, model.params);
    auto restored = load_fcn_checkpoint<float>(dir);
    for (const auto& name : model.params.names())
        CHECK(restored.params.at(name).values == model.params.at(name).values);
}

TEST_CASE("corrupt or missing artifacts raise data errors naming the file") {
    const auto dir = fresh_dir("corrupt");
    auto model = build_fcn<double>(tiny_fcn(), 5);
    TrainCheckpoint meta;
    meta.model_kind = "fcn";
    meta.fcn = tiny_fcn();
    meta.seed = 5;
    save_checkpoint(dir, meta, model.params);

    SUBCASE("truncated parameter blob") {
        const auto bin = dir / "params.bin";
        std::filesystem::resize_file(bin, std::filesystem::file_size(bin) / 2);
        auto fresh = build_fcn<double>(tiny_fcn(), 6);
        try {
            load_checkpoint_params(dir, fresh.params);
            FAIL("expected a data error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::data);
        }
    }
    SUBCASE("mangled manifest") {
        std::ofstream out(dir / "params.json", std::ios::trunc);
        out << "{ not json";
        out.close();
        auto fresh = build_fcn<double>(tiny_fcn(), 6);
        CHECK_THROWS_AS(load_checkpoint_params(dir, fresh.params), Error);
    }
    SUBCASE("missing config names the artifact") {
        std::filesystem::remove(dir / "config.json");
        try {
            read_checkpoint_meta(dir);
            FAIL("expected a data error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::data);
            CHECK(std::string(e.what()).find("config.json") != std::string::npos);
        }
    }
}

TEST_CASE("checkpoint metadata is validated") {
    TrainCheckpoint meta;
    meta.model_kind = "transformer";
    CHECK_THROWS_AS(meta.validate(), Error);
    meta = piunet_meta(-1);
    CHECK_THROWS_AS(meta.validate(), Error);
    CHECK_NOTHROW(piunet_meta(0).validate());
}
