#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <thread>

#include "mgnet/train.hpp"

namespace fs = std::filesystem;
using namespace mgnet;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

TrainConfig tiny_cfg() {
    TrainConfig cfg;
    cfg.profile = Profile::tiny;
    cfg.input_size = 96;
    cfg.batch_size = 4;
    cfg.epochs = 1;
    cfg.t_refine = 2;
    cfg.seed = 3;
    return cfg;
}

std::vector<Sample> tiny_dataset(const std::string& dir_name, int n, int size, uint64_t seed) {
    TempDir* leak = new TempDir(dir_name);  // kept for the process lifetime
    synth_generate(n, size, seed, leak->path.string());
    DatasetLayout layout;
    layout.root = leak->path.string();
    return load_dataset(layout, size);
}

}  // namespace

TEST_CASE("forward contract: shapes, trace length, determinism") {
    Rng rng(1);
    ModelConfig mc;
    mc.t_refine = 2;
    MgNet model(mc, rng);
    Tensor img = Tensor::rand_uniform({2, 3, 96, 96}, rng);
    Tensor in = normalize_image(img);

    NoGradGuard ng;
    ForwardResult fw = model.forward(in, false);
    CHECK(fw.final_logits.dim(0) == 2);
    CHECK(fw.final_logits.dim(1) == 1);
    CHECK(fw.final_logits.dim(2) == 96);
    CHECK(fw.final_logits.dim(3) == 96);
    CHECK(fw.coarse_logits.dim(2) == 48);
    CHECK(fw.trace.size() == 3);  // M_0, M_1, M_2

    ForwardResult fw2 = model.forward(in, false);
    CHECK(std::memcmp(fw.final_logits.data(), fw2.final_logits.data(),
                      sizeof(double) * size_t(fw.final_logits.numel())) == 0);

    CHECK_THROWS(model.forward(Tensor::zeros({1, 3, 100, 96}), false));  // not /32
}

TEST_CASE("ablation flags change the parameter count") {
    auto count = [](bool frm, bool ppg) {
        Rng rng(7);
        ModelConfig mc;
        mc.use_frm = frm;
        mc.use_ppg = ppg;
        MgNet m(mc, rng);
        return m.parameter_count();
    };
    const int64_t full = count(true, true);
    const int64_t no_f = count(false, true);
    const int64_t no_p = count(true, false);
    const int64_t neither = count(false, false);
    CHECK(no_f < full);
    CHECK(no_p < full);
    CHECK(neither < no_f);
    CHECK(neither < no_p);
    CHECK(count(true, true) == full);  // constructing twice is deterministic
}

TEST_CASE("B+H forward works without FRM or PPG") {
    Rng rng(2);
    ModelConfig mc;
    mc.use_frm = false;
    mc.use_ppg = false;
    MgNet model(mc, rng);
    NoGradGuard ng;
    Tensor in = normalize_image(Tensor::rand_uniform({1, 3, 64, 64}, rng));
    ForwardResult fw = model.forward(in, false);
    CHECK(fw.final_logits.dim(2) == 64);
    CHECK(fw.trace.size() == 1);  // the coarse map only
}

TEST_CASE("concurrent eval-mode forwards match the serial result") {
    Rng rng(3);
    ModelConfig mc;
    MgNet model(mc, rng);
    Tensor in = normalize_image(Tensor::rand_uniform({1, 3, 64, 64}, rng));

    Tensor serial;
    {
        NoGradGuard ng;
        serial = model.forward(in, false).final_logits;
    }
    std::array<Tensor, 2> results;
    std::array<std::thread, 2> threads;
    for (int t = 0; t < 2; ++t)
        threads[size_t(t)] = std::thread([&, t] {
            NoGradGuard ng;
            results[size_t(t)] = model.forward(in, false).final_logits;
        });
    for (auto& th : threads) th.join();
    for (const auto& r : results)
        CHECK(std::memcmp(serial.data(), r.data(), sizeof(double) * size_t(serial.numel())) == 0);
}

TEST_CASE("lr schedule: linear warmup then linear decay") {
    const int64_t total = 100, warmup = 10;
    CHECK(lr_at(0, total, warmup, 0.08) == 0.0);
    CHECK(lr_at(warmup, total, warmup, 0.08) == doctest::Approx(0.08));
    CHECK(lr_at(5, total, warmup, 0.08) == doctest::Approx(0.04));
    CHECK(lr_at(total, total, warmup, 0.08) == doctest::Approx(0.0));
    CHECK(lr_at(55, total, warmup, 0.08) == doctest::Approx(0.08 * 0.5));
}

TEST_CASE("one optimizer step with lr=0 leaves parameters unchanged") {
    Rng rng(4);
    ModelConfig mc;
    MgNet model(mc, rng);
    NamedTensors params = model.parameters();
    Sgd opt(params, 0.9, 5e-4);

    Tensor in = normalize_image(Tensor::rand_uniform({1, 3, 64, 64}, rng));
    Tensor mask = Tensor::zeros({1, 1, 64, 64});
    for (int64_t i = 0; i < 512; ++i) mask.data()[i] = 1.0;

    ForwardResult fw = model.forward(in, true);
    LossConfig lc;
    lc.total_steps = 10;
    total_loss(sigmoid(fw.final_logits), mask, 5, lc).total.backward();

    std::vector<std::vector<double>> before;
    for (auto& [name, t] : params.items) before.emplace_back(t.vec());
    opt.step(0.0);
    for (size_t i = 0; i < params.items.size(); ++i)
        CHECK(params.items[i].second.vec() == before[i]);
    opt.zero_grad();
}

TEST_CASE("train smoke: one epoch on synthetic data, loss finite, checkpoint written") {
    std::vector<Sample> ds = tiny_dataset("mgnet_pipe_smoke", 8, 96, 21);
    REQUIRE(ds.size() == 8);
    TempDir out("mgnet_pipe_smoke_out");

    TrainConfig cfg = tiny_cfg();
    std::ostringstream log;
    TrainResult r = train(cfg, ds, out.path.string(), &log);
    CHECK(r.steps == 2);  // 8 samples / batch 4
    CHECK(std::isfinite(r.final_loss));
    CHECK(fs::exists(out.path / "epoch_000.ckpt"));
    CHECK(fs::exists(out.path / "last.ckpt"));
    CHECK(log.str().find("step 0") != std::string::npos);

    // fixed seed -> identical first-step loss across runs
    TrainResult r2 = train(cfg, ds, "", nullptr);
    CHECK(r2.final_loss == r.final_loss);

    CHECK_THROWS(train(cfg, {}, "", nullptr));  // empty dataset
}

TEST_CASE("checkpoint round-trip reproduces the metric report bitwise") {
    std::vector<Sample> ds = tiny_dataset("mgnet_pipe_ckpt", 4, 64, 33);
    TempDir out("mgnet_pipe_ckpt_out");

    TrainConfig cfg = tiny_cfg();
    cfg.input_size = 64;
    cfg.batch_size = 2;
    TrainResult r = train(cfg, ds, out.path.string(), nullptr);

    MetricReport direct = evaluate_model(r.model, ds);
    LoadedCheckpoint loaded = load_checkpoint(r.last_checkpoint);
    CHECK(loaded.step == r.steps);
    CHECK(loaded.config.input_size == 64);
    MetricReport restored = evaluate_model(loaded.model, ds);

    CHECK(direct.to_json().dump() == restored.to_json().dump());
    CHECK(std::memcmp(&direct.miou, &restored.miou, sizeof(double)) == 0);

    // optimizer state survives the round trip
    NamedTensors params = loaded.model.parameters();
    Sgd opt(params, cfg.momentum, cfg.weight_decay);
    CHECK_NOTHROW(opt.load_state(loaded.opt_state));

    // PPG trace length in eval equals t_refine + 1
    NoGradGuard ng;
    ForwardResult fw = loaded.model.forward(normalize_image(ds[0].image), false);
    CHECK(fw.trace.size() == size_t(cfg.t_refine) + 1);
}

TEST_CASE("checkpoint version mismatch is a hard error") {
    TempDir t("mgnet_pipe_version");
    Rng rng(5);
    ModelConfig mc;
    MgNet model(mc, rng);
    const std::string path = (t.path / "v.ckpt").string();
    TrainConfig cfg = tiny_cfg();
    save_checkpoint(path, model, nullptr, 0, cfg);

    // corrupt the version field (bytes 8..11)
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const uint32_t bad = 999;
    f.write(reinterpret_cast<const char*>(&bad), 4);
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"),
                         std::runtime_error);
}

TEST_CASE("config file parsing: unknown keys rejected, env seed override") {
    TempDir t("mgnet_pipe_cfg");
    {
        std::ofstream f(t.path / "good.json");
        f << R"({"epochs": 2, "batch_size": 3, "input_size": 96, "profile": "tiny", "seed": 9})";
    }
    TrainConfig cfg = load_train_config((t.path / "good.json").string());
    CHECK(cfg.epochs == 2);
    CHECK(cfg.batch_size == 3);
    CHECK(cfg.seed == 9);

    setenv("MGNET_SEED", "1234", 1);
    TrainConfig cfg2 = load_train_config((t.path / "good.json").string());
    CHECK(cfg2.seed == 1234);
    unsetenv("MGNET_SEED");

    {
        std::ofstream f(t.path / "bad.json");
        f << R"({"epochs": 2, "learning_rate": 0.1})";
    }
    CHECK_THROWS_WITH_AS(load_train_config((t.path / "bad.json").string()),
                         doctest::Contains("learning_rate"), std::runtime_error);

    {
        std::ofstream f(t.path / "badscales.json");
        f << R"({"scales": [0.5, 1.0, 2.0]})";
    }
    CHECK_THROWS(load_train_config((t.path / "badscales.json").string()));
}

TEST_CASE("training aborts on a non-finite loss naming the step") {
    std::vector<Sample> ds = tiny_dataset("mgnet_pipe_blowup", 4, 64, 55);
    TrainConfig cfg = tiny_cfg();
    cfg.input_size = 64;
    cfg.batch_size = 4;
    cfg.epochs = 4;
    cfg.lr0 = 1e28;  // guaranteed parameter explosion after warmup
    CHECK_THROWS_WITH_AS(train(cfg, ds, "", nullptr), doctest::Contains("non-finite loss"),
                         std::runtime_error);
}

TEST_CASE("freeze_bn keeps running statistics fixed during training forward") {
    Rng rng(8);
    ModelConfig mc;
    mc.freeze_bn = true;
    MgNet model(mc, rng);
    NamedTensors bufs = model.buffers();
    std::vector<std::vector<double>> before;
    for (auto& [name, t] : bufs.items) before.emplace_back(t.vec());

    Tensor in = normalize_image(Tensor::rand_uniform({2, 3, 64, 64}, rng));
    model.forward(in, /*training=*/true);
    for (size_t i = 0; i < bufs.items.size(); ++i)
        CHECK(bufs.items[i].second.vec() == before[i]);

    // and without the flag they move
    Rng rng2(8);
    ModelConfig mc2;
    MgNet model2(mc2, rng2);
    NamedTensors bufs2 = model2.buffers();
    std::vector<std::vector<double>> before2;
    for (auto& [name, t] : bufs2.items) before2.emplace_back(t.vec());
    model2.forward(in, true);
    bool any_moved = false;
    for (size_t i = 0; i < bufs2.items.size(); ++i)
        any_moved = any_moved || bufs2.items[i].second.vec() != before2[i];
    CHECK(any_moved);
}

TEST_CASE("evaluate matches metrics recomputed from dumped prediction PNGs") {
    std::vector<Sample> ds = tiny_dataset("mgnet_pipe_dump", 3, 64, 88);
    TempDir out("mgnet_pipe_dump_out");

    Rng rng(9);
    ModelConfig mc;
    MgNet model(mc, rng);
    MetricReport direct = evaluate_model(model, ds);

    const fs::path img_dir = fs::temp_directory_path() / "mgnet_pipe_dump" / "train" / "images";
    std::vector<std::string> paths;
    for (int i = 0; i < 3; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "synth_%04d.png", i);
        paths.push_back((img_dir / name).string());
    }
    infer_to_files(model, 64, paths, out.path.string());

    std::vector<EvalPair> pairs;
    for (int i = 0; i < 3; ++i) {
        char name[40];
        std::snprintf(name, sizeof(name), "synth_%04d_prob.png", i);
        Tensor rgb = load_image_tensor((out.path / name).string());
        Tensor prob = slice_channels(rgb, 0, 1);  // grayscale PNG: any channel
        pairs.push_back({ds[size_t(i)].id, prob, ds[size_t(i)].mask});
    }
    MetricReport from_png = evaluate_dataset(std::move(pairs));

    // 8-bit quantization moves threshold pixels a little; aggregates must stay close
    CHECK(std::abs(from_png.miou - direct.miou) < 2.0);
    CHECK(std::abs(from_png.mae - direct.mae) < 1.0 / 255.0 + 1e-9);
    CHECK(std::abs(from_png.mber - direct.mber) < 2.0);
}

TEST_CASE("infer writes probability, mask, and trace files") {
    std::vector<Sample> ds = tiny_dataset("mgnet_pipe_infer", 2, 64, 77);
    TempDir out("mgnet_pipe_infer_out");

    Rng rng(6);
    ModelConfig mc;
    mc.t_refine = 2;
    MgNet model(mc, rng);

    // reuse the synthetic files on disk as inference inputs
    const fs::path img_dir = fs::temp_directory_path() / "mgnet_pipe_infer" / "train" / "images";
    std::vector<std::string> paths = {(img_dir / "synth_0000.png").string()};

    InferOptions opts;
    opts.dump_trace = true;
    const auto written = infer_to_files(model, 64, paths, out.path.string(), opts);
    CHECK(written.size() == 2 + 3);  // prob + mask + (t_refine+1) trace panels
    for (const auto& p : written) CHECK(fs::exists(p));
}
