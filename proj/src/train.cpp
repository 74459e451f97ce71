#include "mgnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <ostream>

namespace fs = std::filesystem;

namespace mgnet {

double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr0) {
    check(total_steps > 0 && warmup_steps >= 0, "lr_at: bad schedule spans");
    step = std::clamp<int64_t>(step, 0, total_steps);
    if (warmup_steps > 0 && step < warmup_steps)
        return lr0 * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const int64_t decay_span = std::max<int64_t>(1, total_steps - warmup_steps);
    const double frac = static_cast<double>(step - warmup_steps) / static_cast<double>(decay_span);
    return lr0 * std::max(0.0, 1.0 - frac);
}

namespace {

Tensor stack_batch(const std::vector<Tensor>& singles) {
    const int64_t n = static_cast<int64_t>(singles.size());
    const Shape& s = singles[0].shape();
    Tensor out = Tensor::zeros({n, s[1], s[2], s[3]});
    const int64_t per = singles[0].numel();
    for (int64_t i = 0; i < n; ++i)
        std::copy(singles[static_cast<size_t>(i)].data(),
                  singles[static_cast<size_t>(i)].data() + per, out.data() + i * per);
    return out;
}

LossTerms batch_loss(const ForwardResult& fw, const Tensor& masks, int64_t step,
                     const LossConfig& loss_cfg, bool supervise_trace) {
    if (!supervise_trace || fw.trace.size() <= 1) {
        Tensor p = sigmoid(fw.final_logits);
        return total_loss(p, masks, step, loss_cfg);
    }
    // average the objective over every trace entry (coarse map included)
    LossTerms acc;
    Tensor sum;
    const double inv = 1.0 / static_cast<double>(fw.trace.size());
    for (const Tensor& m : fw.trace) {
        Tensor p = sigmoid(bilinear_resize(m, masks.dim(2), masks.dim(3)));
        LossTerms t = total_loss(p, masks, step, loss_cfg);
        acc.bce_value += t.bce_value * inv;
        acc.ual_value += t.ual_value * inv;
        acc.lambda = t.lambda;
        sum = sum.defined() ? add(sum, t.total) : t.total;
    }
    acc.total = affine(sum, inv, 0.0);
    return acc;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& dataset,
                  const std::string& out_dir, std::ostream* log, int64_t max_steps) {
    cfg.validate();
    check(!dataset.empty(), "train: dataset is empty");

    Rng rng(cfg.seed);
    MgNet model(cfg.model_config(), rng);
    NamedTensors params = model.parameters();
    Sgd opt(params, cfg.momentum, cfg.weight_decay);

    const int64_t n = static_cast<int64_t>(dataset.size());
    const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    int64_t total_steps = steps_per_epoch * cfg.epochs;
    if (max_steps > 0) total_steps = std::min(total_steps, max_steps);
    const LossConfig loss_cfg = cfg.loss_config(total_steps);

    if (!out_dir.empty()) fs::create_directories(out_dir);
    if (log)
        (*log) << "training: " << n << " samples, " << total_steps << " steps, "
               << model.parameter_count() << " parameters\n";

    TrainResult result{std::move(model), 0, 0.0, ""};
    int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng.engine());

        for (int64_t b0 = 0; b0 < n && step < total_steps; b0 += cfg.batch_size) {
            const int64_t b1 = std::min(n, b0 + cfg.batch_size);
            std::vector<Tensor> imgs, msks;
            for (int64_t i = b0; i < b1; ++i) {
                Sample s = augment(dataset[static_cast<size_t>(order[static_cast<size_t>(i)])], rng);
                imgs.push_back(s.image);
                msks.push_back(s.mask);
            }
            Tensor batch = normalize_image(stack_batch(imgs));
            Tensor masks = stack_batch(msks);

            ForwardResult fw = result.model.forward(batch, /*training=*/true);
            LossTerms terms = batch_loss(fw, masks, step, loss_cfg, cfg.supervise_trace);
            const double loss_value = terms.total.value();
            check(std::isfinite(loss_value),
                  "non-finite loss at step " + std::to_string(step) + "; aborting");

            terms.total.backward();
            if (cfg.grad_clip > 0.0) opt.clip_grad_norm(cfg.grad_clip);
            const double lr = lr_at(step, total_steps, steps_per_epoch, cfg.lr0);
            opt.step(lr);
            opt.zero_grad();

            if (log)
                (*log) << "step " << step << " epoch " << epoch << " loss " << loss_value
                       << " bce " << terms.bce_value << " ual " << terms.ual_value << " lambda "
                       << terms.lambda << " lr " << lr << "\n";
            result.final_loss = loss_value;
            ++step;
        }

        if (!out_dir.empty()) {
            char name[32];
            std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch);
            const std::string path = (fs::path(out_dir) / name).string();
            save_checkpoint(path, result.model, &opt, step, cfg);
            result.last_checkpoint = path;
        }
    }
    if (!out_dir.empty()) {
        const std::string path = (fs::path(out_dir) / "last.ckpt").string();
        save_checkpoint(path, result.model, &opt, step, cfg);
        result.last_checkpoint = path;
    }
    result.steps = step;
    return result;
}

MetricReport evaluate_model(const MgNet& model, const std::vector<Sample>& dataset) {
    NoGradGuard ng;
    std::vector<EvalPair> pairs;
    for (const auto& s : dataset) {
        ForwardResult fw = model.forward(normalize_image(s.image), /*training=*/false);
        pairs.push_back({s.id, sigmoid(fw.final_logits), s.mask});
    }
    return evaluate_dataset(std::move(pairs));
}

std::vector<std::string> infer_to_files(const MgNet& model, int input_size,
                                        const std::vector<std::string>& image_paths,
                                        const std::string& out_dir, const InferOptions& opts) {
    NoGradGuard ng;
    fs::create_directories(out_dir);
    std::vector<std::string> written;
    for (const auto& path : image_paths) {
        Tensor original = load_image_tensor(path);  // [1,3,H,W] at native size
        const int64_t oh = original.dim(2), ow = original.dim(3);
        Tensor resized = bilinear_resize(original, input_size, input_size);
        ForwardResult fw = model.forward(normalize_image(resized), /*training=*/false);

        Tensor prob = sigmoid(fw.final_logits);
        Tensor prob_native = (oh == input_size && ow == input_size)
                                 ? prob
                                 : bilinear_resize(prob, oh, ow);
        const std::string stem = fs::path(path).stem().string();
        const std::string prob_path = (fs::path(out_dir) / (stem + "_prob.png")).string();
        const std::string mask_path = (fs::path(out_dir) / (stem + "_mask.png")).string();
        save_gray_png(prob_path, prob_native, /*threshold=*/false);
        save_gray_png(mask_path, prob_native, /*threshold=*/true);
        written.push_back(prob_path);
        written.push_back(mask_path);

        if (opts.dump_trace) {
            for (size_t t = 0; t < fw.trace.size(); ++t) {
                Tensor pt = sigmoid(bilinear_resize(fw.trace[t], oh, ow));
                const std::string trace_path =
                    (fs::path(out_dir) / (stem + "_trace" + std::to_string(t) + ".png")).string();
                save_gray_png(trace_path, pt, false);
                written.push_back(trace_path);
            }
        }
    }
    return written;
}

}  // namespace mgnet
