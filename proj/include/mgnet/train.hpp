#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mgnet/metrics.hpp"
#include "mgnet/model.hpp"

namespace mgnet {

// Linear warmup over the first epoch, then linear decay to zero.
// Defined for step in [0, total_steps]; lr_at(0) = 0, lr_at(warmup) = lr0,
// lr_at(total) = 0.
double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr0);

struct TrainResult {
    MgNet model;
    int64_t steps = 0;
    double final_loss = 0.0;
    std::string last_checkpoint;  // empty when out_dir is empty
};

// Seeded end-to-end SGD training; aborts on non-finite loss (names the step).
// Writes epoch checkpoints under out_dir when it is nonempty. max_steps > 0
// caps the run (and the schedule spans) at that many optimizer steps.
TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& dataset,
                  const std::string& out_dir, std::ostream* log = nullptr,
                  int64_t max_steps = 0);

MetricReport evaluate_model(const MgNet& model, const std::vector<Sample>& dataset);

struct InferOptions {
    bool dump_trace = false;
};

// Writes <stem>_prob.png and <stem>_mask.png per input (plus per-iteration
// trace panels when requested); returns the written paths.
std::vector<std::string> infer_to_files(const MgNet& model, int input_size,
                                        const std::vector<std::string>& image_paths,
                                        const std::string& out_dir, const InferOptions& opts = {});

}  // namespace mgnet
