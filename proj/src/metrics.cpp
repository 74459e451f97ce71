#include "mgnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mgnet {

ConfusionCounts confusion(const Tensor& pred, const Tensor& gt, double threshold) {
    check(pred.shape() == gt.shape(), "confusion: shape mismatch");
    ConfusionCounts c;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred.data()[i] >= threshold;
        const bool g = gt.data()[i] >= 0.5;
        if (p && g) ++c.tp;
        else if (p && !g) ++c.fp;
        else if (!p && g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

double iou(const ConfusionCounts& c) {
    const int64_t denom = c.tp + c.fp + c.fn;
    if (denom == 0) return 1.0;  // both masks empty
    return static_cast<double>(c.tp) / static_cast<double>(denom);
}

double mae(const Tensor& pred, const Tensor& gt) {
    check(pred.shape() == gt.shape(), "mae: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) s += std::abs(pred.data()[i] - gt.data()[i]);
    return s / static_cast<double>(pred.numel());
}

double ber(const ConfusionCounts& c) {
    const int64_t np = c.tp + c.fn;
    const int64_t nn = c.tn + c.fp;
    double sum = 0.0;
    int terms = 0;
    if (np > 0) {
        sum += static_cast<double>(c.tp) / static_cast<double>(np);
        ++terms;
    }
    if (nn > 0) {
        sum += static_cast<double>(c.tn) / static_cast<double>(nn);
        ++terms;
    }
    if (terms == 0) return 0.0;
    return 100.0 * (1.0 - sum / static_cast<double>(terms));
}

MetricReport evaluate_dataset(std::vector<EvalPair> pairs, double threshold) {
    std::sort(pairs.begin(), pairs.end(),
              [](const EvalPair& a, const EvalPair& b) { return a.id < b.id; });
    MetricReport r;
    for (const auto& p : pairs) {
        ConfusionCounts c = confusion(p.pred, p.gt, threshold);
        PerImageMetrics m;
        m.id = p.id;
        m.iou = iou(c);
        m.mae = mae(p.pred, p.gt);
        m.ber = ber(c);
        r.per_image.push_back(std::move(m));
    }
    r.n_images = static_cast<int64_t>(r.per_image.size());
    if (r.n_images > 0) {
        double si = 0.0, sm = 0.0, sb = 0.0;
        for (const auto& m : r.per_image) {
            si += m.iou;
            sm += m.mae;
            sb += m.ber;
        }
        r.miou = 100.0 * si / static_cast<double>(r.n_images);
        r.mae = sm / static_cast<double>(r.n_images);
        r.mber = sb / static_cast<double>(r.n_images);
    }
    return r;
}

MetricReport merge_reports(const std::vector<MetricReport>& shards) {
    MetricReport r;
    double si = 0.0, sm = 0.0, sb = 0.0;
    for (const auto& s : shards) {
        r.per_image.insert(r.per_image.end(), s.per_image.begin(), s.per_image.end());
        const double w = static_cast<double>(s.n_images);
        si += s.miou / 100.0 * w;
        sm += s.mae * w;
        sb += s.mber * w;
        r.n_images += s.n_images;
    }
    std::sort(r.per_image.begin(), r.per_image.end(),
              [](const PerImageMetrics& a, const PerImageMetrics& b) { return a.id < b.id; });
    if (r.n_images > 0) {
        r.miou = 100.0 * si / static_cast<double>(r.n_images);
        r.mae = sm / static_cast<double>(r.n_images);
        r.mber = sb / static_cast<double>(r.n_images);
    }
    return r;
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json j;
    j["n_images"] = n_images;
    j["miou"] = miou;
    j["mae"] = mae;
    j["mber"] = mber;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& m : per_image)
        arr.push_back({{"id", m.id}, {"iou", m.iou}, {"mae", m.mae}, {"ber", m.ber}});
    j["per_image"] = std::move(arr);
    return j;
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
    MetricReport r;
    r.n_images = j.at("n_images").get<int64_t>();
    r.miou = j.at("miou").get<double>();
    r.mae = j.at("mae").get<double>();
    r.mber = j.at("mber").get<double>();
    for (const auto& e : j.at("per_image")) {
        PerImageMetrics m;
        m.id = e.at("id").get<std::string>();
        m.iou = e.at("iou").get<double>();
        m.mae = e.at("mae").get<double>();
        m.ber = e.at("ber").get<double>();
        r.per_image.push_back(std::move(m));
    }
    return r;
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os << "id,iou,mae,ber\n";
    os.precision(17);
    for (const auto& m : per_image)
        os << m.id << "," << m.iou << "," << m.mae << "," << m.ber << "\n";
    return os.str();
}

}  // namespace mgnet
