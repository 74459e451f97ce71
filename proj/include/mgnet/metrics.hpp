#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mgnet/tensor.hpp"

namespace mgnet {

struct ConfusionCounts {
    int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    int64_t total() const { return tp + fp + tn + fn; }
};

// Binarize pred at threshold (>= counts positive) and tally against gt.
ConfusionCounts confusion(const Tensor& pred, const Tensor& gt, double threshold = 0.5);

// tp / (tp + fp + fn); both masks empty -> 1.0.
double iou(const ConfusionCounts& c);

// Mean |pred - gt| on the soft prediction.
double mae(const Tensor& pred, const Tensor& gt);

// 100 * (1 - 0.5*(TPR + TNR)); zero-denominator terms are excluded and the
// rest averaged, both empty -> 0.
double ber(const ConfusionCounts& c);

struct PerImageMetrics {
    std::string id;
    double iou = 0.0, mae = 0.0, ber = 0.0;
};

struct MetricReport {
    std::vector<PerImageMetrics> per_image;
    double miou = 0.0;  // percent
    double mae = 0.0;   // [0,1]
    double mber = 0.0;  // [0,100]
    int64_t n_images = 0;

    nlohmann::json to_json() const;
    static MetricReport from_json(const nlohmann::json& j);
    std::string to_csv() const;
};

struct EvalPair {
    std::string id;
    Tensor pred;  // probability map
    Tensor gt;    // binary mask, same shape
};

MetricReport evaluate_dataset(std::vector<EvalPair> pairs, double threshold = 0.5);

// Weighted-mean recombination by n_images; associative and commutative.
MetricReport merge_reports(const std::vector<MetricReport>& shards);

}  // namespace mgnet
