#include "mgnet/model.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace mgnet {

MgNet::MgNet(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    BackboneSpec spec = cfg.profile == Profile::full ? BackboneSpec::full_spec()
                                                     : BackboneSpec::tiny_spec(cfg.tiny_channels);
    encoder = Encoder(spec, rng);
    std::array<int, 5> fused_channels{};
    for (size_t i = 0; i < 5; ++i) {
        fused_channels[i] = spec.level_channels[i];
        fusion[i] = ScaleFusion(spec.level_channels[i], cfg.use_frm, rng);
    }
    decoder = Decoder(fused_channels, cfg.hcdu_pair_mode, rng);
    if (cfg.use_ppg) refiner.emplace(rng);
}

ForwardResult MgNet::forward(const Tensor& image, bool training) const {
    check(image.ndim() == 4 && image.dim(1) == 3, "forward expects [N,3,H,W]");
    const int64_t h = image.dim(2), w = image.dim(3);
    check(h % 32 == 0 && w % 32 == 0, "input dims must be multiples of 32");
    const bool bn_training = training && !cfg_.freeze_bn;

    std::array<Tensor, 5> fused;
    if (cfg_.use_frm) {
        ScaleImages scales = make_scale_set(image);
        FeaturePyramid p07 = encoder.forward(scales.s07, bn_training, 0.7);
        FeaturePyramid p10 = encoder.forward(scales.s10, bn_training, 1.0);
        FeaturePyramid p12 = encoder.forward(scales.s12, bn_training, 1.2);
        for (size_t i = 0; i < 5; ++i) {
            const int64_t th = p10.levels[i].dim(2), tw = p10.levels[i].dim(3);
            Tensor b12 = fusion[i].branch_high(p12.levels[i], th, tw, bn_training);
            Tensor b10 = fusion[i].branch_mid(p10.levels[i], bn_training);
            Tensor b07 = fusion[i].branch_low(p07.levels[i], th, tw, bn_training);
            fused[i] = fusion[i].fuse(b12, b10, b07, bn_training);
        }
    } else {
        FeaturePyramid p10 = encoder.forward(image, bn_training, 1.0);
        for (size_t i = 0; i < 5; ++i)
            fused[i] = fusion[i].branch_mid(p10.levels[i], bn_training);
    }

    Decoder::Result dec = decoder.forward(fused, bn_training);

    ForwardResult out;
    out.coarse_logits = dec.coarse_logits;
    if (cfg_.use_ppg) {
        Refiner::Result r = refiner->refine(dec.x, dec.coarse_logits, cfg_.t_refine);
        out.trace = std::move(r.trace);
        out.final_logits = bilinear_resize(r.final_logits, h, w);
    } else {
        out.trace = {dec.coarse_logits};
        out.final_logits = bilinear_resize(dec.coarse_logits, h, w);
    }
    return out;
}

NamedTensors MgNet::parameters() const {
    NamedTensors out;
    encoder.params(out, "encoder");
    for (size_t i = 0; i < 5; ++i)
        fusion[i].params(out, "frm.level" + std::to_string(i + 1));
    decoder.params(out, "decoder");
    if (refiner) refiner->params(out, "ppg");
    return out;
}

NamedTensors MgNet::buffers() const {
    NamedTensors out;
    encoder.buffers(out, "encoder");
    for (size_t i = 0; i < 5; ++i)
        fusion[i].buffers(out, "frm.level" + std::to_string(i + 1));
    decoder.buffers(out, "decoder");
    return out;
}

int64_t MgNet::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : parameters().items) n += t.numel();
    return n;
}

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    check(lr0 > 0.0 && momentum >= 0.0 && weight_decay >= 0.0, "bad optimizer hyperparameters");
    check(epochs > 0 && batch_size > 0, "epochs and batch_size must be positive");
    check(input_size >= 32 && input_size % 32 == 0, "input_size must be a multiple of 32");
    check(t_refine >= 0, "t_refine must be nonnegative");
    check(grad_clip >= 0.0, "grad_clip must be nonnegative");
    const std::array<double, 3> want = {0.7, 1.0, 1.2};
    check(scales == want, "scales must be {0.7, 1.0, 1.2}");
    if (profile == Profile::tiny) {
        check(tiny_channels.size() == 5, "tiny_channels must list 5 levels");
        for (int c : tiny_channels) check(c > 0, "tiny_channels must be positive");
    }
    pair_mode_from_name(hcdu_pair_mode);
}

ModelConfig TrainConfig::model_config() const {
    ModelConfig m;
    m.profile = profile;
    m.tiny_channels = tiny_channels;
    m.use_frm = use_frm;
    m.use_ppg = use_ppg;
    m.t_refine = t_refine;
    m.freeze_bn = freeze_bn;
    m.hcdu_pair_mode = pair_mode_from_name(hcdu_pair_mode);
    return m;
}

LossConfig TrainConfig::loss_config(int64_t total_steps) const {
    LossConfig c;
    c.total_steps = total_steps;
    c.use_ual = use_ual;
    return c;
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j;
    j["lr0"] = lr0;
    j["momentum"] = momentum;
    j["weight_decay"] = weight_decay;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["input_size"] = input_size;
    j["scales"] = scales;
    j["t_refine"] = t_refine;
    j["use_frm"] = use_frm;
    j["use_ppg"] = use_ppg;
    j["use_ual"] = use_ual;
    j["freeze_bn"] = freeze_bn;
    j["supervise_trace"] = supervise_trace;
    j["grad_clip"] = grad_clip;
    j["seed"] = seed;
    j["profile"] = profile_name(profile);
    j["tiny_channels"] = tiny_channels;
    j["hcdu_pair_mode"] = hcdu_pair_mode;
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    static const std::set<std::string> kKnown = {
        "lr0",        "momentum",       "weight_decay", "epochs",        "batch_size",
        "input_size", "scales",         "t_refine",     "use_frm",       "use_ppg",
        "use_ual",    "freeze_bn",      "supervise_trace", "grad_clip",  "seed",
        "profile",    "tiny_channels",  "hcdu_pair_mode"};
    for (const auto& [key, value] : j.items())
        check(kKnown.count(key) > 0, "unknown config key: '" + key + "'");

    TrainConfig c;
    if (j.contains("lr0")) c.lr0 = j.at("lr0").get<double>();
    if (j.contains("momentum")) c.momentum = j.at("momentum").get<double>();
    if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("input_size")) c.input_size = j.at("input_size").get<int>();
    if (j.contains("scales")) c.scales = j.at("scales").get<std::array<double, 3>>();
    if (j.contains("t_refine")) c.t_refine = j.at("t_refine").get<int>();
    if (j.contains("use_frm")) c.use_frm = j.at("use_frm").get<bool>();
    if (j.contains("use_ppg")) c.use_ppg = j.at("use_ppg").get<bool>();
    if (j.contains("use_ual")) c.use_ual = j.at("use_ual").get<bool>();
    if (j.contains("freeze_bn")) c.freeze_bn = j.at("freeze_bn").get<bool>();
    if (j.contains("supervise_trace")) c.supervise_trace = j.at("supervise_trace").get<bool>();
    if (j.contains("grad_clip")) c.grad_clip = j.at("grad_clip").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("profile")) c.profile = profile_from_name(j.at("profile").get<std::string>());
    if (j.contains("tiny_channels")) c.tiny_channels = j.at("tiny_channels").get<std::vector<int>>();
    if (j.contains("hcdu_pair_mode"))
        c.hcdu_pair_mode = j.at("hcdu_pair_mode").get<std::string>();
    c.validate();
    return c;
}

void apply_env_seed(TrainConfig& cfg) {
    if (const char* env = std::getenv("MGNET_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (const std::exception&) {
            fail("MGNET_SEED is not a valid unsigned integer: '" + std::string(env) + "'");
        }
    }
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "cannot open config file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::parse_error& e) {
        fail("config file " + path + " is not valid JSON: " + e.what());
    }
    TrainConfig cfg = TrainConfig::from_json(j);
    apply_env_seed(cfg);
    return cfg;
}

// ---------------------------------------------------------------------------
// checkpoint glue
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const MgNet& model, const Sgd* opt, int64_t step,
                     const TrainConfig& cfg) {
    Container c;
    c.meta["config"] = cfg.to_json();
    c.meta["step"] = step;
    c.params = model.parameters();
    c.buffers = model.buffers();
    if (opt) opt->state(c.opt_state);
    save_container(path, c);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    Container c = load_container(path);
    TrainConfig cfg = TrainConfig::from_json(c.meta.at("config"));

    Rng rng(0);  // init values are overwritten below
    LoadedCheckpoint out{cfg, c.meta.value("step", int64_t(0)), MgNet(cfg.model_config(), rng),
                         std::move(c.opt_state)};

    auto restore = [&path](NamedTensors own, const NamedTensors& file, const char* kind) {
        check(own.size() == file.size(),
              std::string("checkpoint ") + kind + " count mismatch in " + path);
        for (size_t i = 0; i < own.items.size(); ++i) {
            auto& [name, tensor] = own.items[i];
            const auto& [fname, ftensor] = file.items[i];
            check(name == fname, "checkpoint " + std::string(kind) + " name mismatch: expected '" +
                                     name + "', found '" + fname + "'");
            check(tensor.shape() == ftensor.shape(),
                  "checkpoint shape mismatch for '" + name + "'");
            std::copy(ftensor.data(), ftensor.data() + ftensor.numel(), tensor.data());
        }
    };
    restore(out.model.parameters(), c.params, "parameter");
    restore(out.model.buffers(), c.buffers, "buffer");
    return out;
}

}  // namespace mgnet
