// mgnet command line: train / eval / infer / synth.

#include <CLI11.hpp>

#include <filesystem>
#include <fnmatch.h>
#include <fstream>
#include <iostream>

#include "mgnet/data.hpp"
#include "mgnet/train.hpp"

namespace fs = std::filesystem;

namespace {

// Expand a glob-ish pattern against its parent directory; a plain existing
// path passes through unchanged.
std::vector<std::string> expand_images(const std::vector<std::string>& patterns) {
    std::vector<std::string> out;
    for (const auto& pat : patterns) {
        if (fs::exists(pat)) {
            out.push_back(pat);
            continue;
        }
        const fs::path p(pat);
        const fs::path dir = p.parent_path().empty() ? "." : p.parent_path();
        const std::string leaf = p.filename().string();
        std::vector<std::string> matched;
        if (fs::is_directory(dir))
            for (const auto& entry : fs::directory_iterator(dir))
                if (entry.is_regular_file() &&
                    fnmatch(leaf.c_str(), entry.path().filename().c_str(), 0) == 0)
                    matched.push_back(entry.path().string());
        std::sort(matched.begin(), matched.end());
        if (matched.empty())
            std::cerr << "warning: no files match '" << pat << "'\n";
        out.insert(out.end(), matched.begin(), matched.end());
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MGNet glass/mirror segmentation toolkit"};
    app.require_subcommand(1);

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
    std::string config_path, data_root, out_dir, train_split = "train";
    train_cmd->add_option("--config", config_path, "JSON config file")->required();
    train_cmd->add_option("--data", data_root, "dataset root")->required();
    train_cmd->add_option("--out", out_dir, "output directory for checkpoints")->required();
    train_cmd->add_option("--split", train_split, "dataset split to train on");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ckpt_path, eval_data, report_path, eval_split = "test", csv_path;
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data, "dataset root")->required();
    eval_cmd->add_option("--report", report_path, "output JSON report")->required();
    eval_cmd->add_option("--split", eval_split, "dataset split to evaluate");
    eval_cmd->add_option("--csv", csv_path, "optional per-image CSV table");

    // infer
    auto* infer_cmd = app.add_subcommand("infer", "run a checkpoint on image files");
    std::string infer_ckpt, infer_out;
    std::vector<std::string> image_patterns;
    bool dump_trace = false;
    infer_cmd->add_option("--ckpt", infer_ckpt, "checkpoint file")->required();
    infer_cmd->add_option("--images", image_patterns, "image paths or globs")->required();
    infer_cmd->add_option("--out", infer_out, "output directory")->required();
    infer_cmd->add_flag("--dump-trace", dump_trace, "write per-refinement-step probability maps");

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic glass dataset");
    int synth_n = 16, synth_size = 96;
    uint64_t synth_seed = 0;
    std::string synth_out, synth_split = "train";
    synth_cmd->add_option("--n", synth_n, "number of images")->required();
    synth_cmd->add_option("--size", synth_size, "square image size")->required();
    synth_cmd->add_option("--seed", synth_seed, "generator seed")->required();
    synth_cmd->add_option("--out", synth_out, "output dataset root")->required();
    synth_cmd->add_option("--split", synth_split, "split directory to emit");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) {
            mgnet::TrainConfig cfg = mgnet::load_train_config(config_path);
            mgnet::DatasetLayout layout;
            layout.root = data_root;
            layout.split = mgnet::split_from_name(train_split);
            std::vector<mgnet::Sample> dataset = mgnet::load_dataset(layout, cfg.input_size);
            mgnet::TrainResult result = mgnet::train(cfg, dataset, out_dir, &std::cout);
            std::cout << "done: " << result.steps << " steps, final loss " << result.final_loss
                      << ", checkpoint " << result.last_checkpoint << "\n";
        } else if (*eval_cmd) {
            mgnet::LoadedCheckpoint ckpt = mgnet::load_checkpoint(ckpt_path);
            mgnet::DatasetLayout layout;
            layout.root = eval_data;
            layout.split = mgnet::split_from_name(eval_split);
            std::vector<mgnet::Sample> dataset =
                mgnet::load_dataset(layout, ckpt.config.input_size);
            mgnet::MetricReport report = mgnet::evaluate_model(ckpt.model, dataset);
            std::ofstream rf(report_path);
            mgnet::check(rf.good(), "cannot write report: " + report_path);
            rf << report.to_json().dump(2) << "\n";
            if (!csv_path.empty()) {
                std::ofstream cf(csv_path);
                mgnet::check(cf.good(), "cannot write csv: " + csv_path);
                cf << report.to_csv();
            }
            std::cout << "n=" << report.n_images << " miou=" << report.miou
                      << " mae=" << report.mae << " mber=" << report.mber << "\n";
        } else if (*infer_cmd) {
            mgnet::LoadedCheckpoint ckpt = mgnet::load_checkpoint(infer_ckpt);
            const std::vector<std::string> paths = expand_images(image_patterns);
            mgnet::check(!paths.empty(), "no input images");
            mgnet::InferOptions opts;
            opts.dump_trace = dump_trace;
            const auto written = mgnet::infer_to_files(ckpt.model, ckpt.config.input_size, paths,
                                                       infer_out, opts);
            std::cout << "wrote " << written.size() << " files to " << infer_out << "\n";
        } else if (*synth_cmd) {
            mgnet::synth_generate(synth_n, synth_size, synth_seed, synth_out, synth_split);
            std::cout << "wrote " << synth_n << " images under " << synth_out << "/" << synth_split
                      << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
