#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgnet/checkpoint.hpp"
#include "mgnet/data.hpp"
#include "mgnet/encoder.hpp"
#include "mgnet/frm.hpp"
#include "mgnet/hcdd.hpp"
#include "mgnet/loss.hpp"
#include "mgnet/ppg.hpp"

namespace mgnet {

struct ModelConfig {
    Profile profile = Profile::tiny;
    std::vector<int> tiny_channels = {8, 16, 32, 64, 128};
    bool use_frm = true;  // ablation F
    bool use_ppg = true;  // ablation P
    int t_refine = 2;
    bool freeze_bn = false;
    PairMode hcdu_pair_mode = PairMode::carry;
};

struct ForwardResult {
    Tensor final_logits;   // full input resolution
    Tensor coarse_logits;  // stride 2
    std::vector<Tensor> trace;  // M_0 .. M_T at stride 2
};

// encoder -> FRM -> HCDD -> PPG assembly. The mid (1.0x) branch always
// exists; multi-scale branches/attention only with F on; the refiner only
// with P on, so each flag changes the parameter count.
class MgNet {
public:
    MgNet(const ModelConfig& cfg, Rng& rng);

    // image: [N,3,H,W] normalized, H and W multiples of 32.
    ForwardResult forward(const Tensor& image, bool training) const;

    NamedTensors parameters() const;
    NamedTensors buffers() const;
    const ModelConfig& config() const { return cfg_; }
    int64_t parameter_count() const;

    Encoder encoder;
    std::array<ScaleFusion, 5> fusion;
    Decoder decoder;
    std::optional<Refiner> refiner;

private:
    ModelConfig cfg_;
};

// Full training recipe; JSON config files mirror these fields exactly and
// unknown keys are rejected.
struct TrainConfig {
    double lr0 = 0.08;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    int epochs = 32;
    int batch_size = 12;
    int input_size = 384;
    std::array<double, 3> scales = {0.7, 1.0, 1.2};
    int t_refine = 2;
    bool use_frm = true;
    bool use_ppg = true;
    bool use_ual = true;
    bool freeze_bn = false;
    bool supervise_trace = false;
    double grad_clip = 0.0;  // 0 disables clipping
    uint64_t seed = 0;
    Profile profile = Profile::tiny;
    std::vector<int> tiny_channels = {8, 16, 32, 64, 128};
    std::string hcdu_pair_mode = "carry";

    void validate() const;
    ModelConfig model_config() const;
    LossConfig loss_config(int64_t total_steps) const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// Reads a JSON config file and applies the MGNET_SEED override when set.
TrainConfig load_train_config(const std::string& path);
void apply_env_seed(TrainConfig& cfg);

void save_checkpoint(const std::string& path, const MgNet& model, const Sgd* opt, int64_t step,
                     const TrainConfig& cfg);

struct LoadedCheckpoint {
    TrainConfig config;
    int64_t step = 0;
    MgNet model;
    NamedTensors opt_state;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace mgnet
