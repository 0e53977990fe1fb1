#include "autofed/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace autofed {

namespace {

std::vector<int> score_order(const std::vector<Detection>& dets) {
    std::vector<int> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return dets[static_cast<std::size_t>(a)].score > dets[static_cast<std::size_t>(b)].score;
    });
    return order;
}

// Per-detection greedy outcomes in score order: 1 = TP, 0 = FP.
std::vector<char> greedy_flags(const std::vector<Detection>& dets,
                               const std::vector<RotatedBox>& gts, double iou_thresh,
                               const std::vector<int>& order, std::size_t limit,
                               std::vector<int>* matched_gt = nullptr) {
    std::vector<char> used(gts.size(), 0);
    std::vector<char> flags(limit, 0);
    if (matched_gt) matched_gt->assign(limit, -1);
    for (std::size_t k = 0; k < limit; ++k) {
        const auto& det = dets[static_cast<std::size_t>(order[k])];
        double best = iou_thresh;
        int best_gt = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (used[g]) continue;
            const double iou = rotated_iou(det.box, gts[g]);
            if (iou >= best && (best_gt < 0 || iou > best)) {
                best = iou;
                best_gt = static_cast<int>(g);
            }
        }
        if (best_gt >= 0) {
            used[static_cast<std::size_t>(best_gt)] = 1;
            flags[k] = 1;
            if (matched_gt) (*matched_gt)[k] = best_gt;
        }
    }
    return flags;
}

}  // namespace

MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<RotatedBox>& gts, double iou_thresh, int max_dets) {
    const auto order = score_order(dets);
    const std::size_t limit = std::min<std::size_t>(dets.size(), static_cast<std::size_t>(max_dets));
    std::vector<int> matched_gt;
    const auto flags = greedy_flags(dets, gts, iou_thresh, order, limit, &matched_gt);
    MatchResult r;
    for (std::size_t k = 0; k < limit; ++k) {
        if (flags[k]) {
            ++r.tp;
            r.matches.emplace_back(order[k], matched_gt[k]);
        } else {
            ++r.fp;
        }
    }
    r.fn = static_cast<int>(gts.size()) - r.tp;
    return r;
}

std::pair<double, double> precision_recall(const MatchResult& match) {
    const double precision =
        (match.tp + match.fp == 0) ? 1.0 : static_cast<double>(match.tp) / (match.tp + match.fp);
    const double recall =
        (match.tp + match.fn == 0) ? 1.0 : static_cast<double>(match.tp) / (match.tp + match.fn);
    return {precision, recall};
}

double average_precision(const std::vector<SampleDetections>& samples, double iou_thresh) {
    // Pool detections dataset-wide with their per-sample greedy TP/FP outcome.
    struct Pooled {
        double score;
        int sample;
        int rank;  // position within the sample's score order
        char tp;
    };
    std::vector<Pooled> pool;
    std::size_t total_gts = 0;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const auto& sd = samples[s];
        total_gts += sd.gts.size();
        const auto order = score_order(sd.dets);
        const auto flags = greedy_flags(sd.dets, sd.gts, iou_thresh, order, sd.dets.size());
        for (std::size_t k = 0; k < order.size(); ++k)
            pool.push_back({sd.dets[static_cast<std::size_t>(order[k])].score,
                            static_cast<int>(s), static_cast<int>(k), flags[k]});
    }
    if (total_gts == 0) return pool.empty() ? 1.0 : 0.0;
    if (pool.empty()) return 0.0;
    std::sort(pool.begin(), pool.end(), [](const Pooled& a, const Pooled& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.sample != b.sample) return a.sample < b.sample;
        return a.rank < b.rank;
    });
    std::vector<double> precision(pool.size()), recall(pool.size());
    int tp = 0, fp = 0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        pool[i].tp ? ++tp : ++fp;
        precision[i] = static_cast<double>(tp) / (tp + fp);
        recall[i] = static_cast<double>(tp) / static_cast<double>(total_gts);
    }
    // Monotone envelope from the right.
    for (std::size_t i = precision.size() - 1; i-- > 0;)
        precision[i] = std::max(precision[i], precision[i + 1]);
    // 101 evenly spaced recall points.
    double ap = 0.0;
    std::size_t j = 0;
    for (int r = 0; r <= 100; ++r) {
        const double target = r / 100.0;
        while (j < recall.size() && recall[j] < target) ++j;
        ap += (j < recall.size()) ? precision[j] : 0.0;
    }
    return ap / 101.0;
}

double average_recall(const std::vector<SampleDetections>& samples, int max_dets) {
    std::size_t total_gts = 0;
    for (const auto& sd : samples) total_gts += sd.gts.size();
    if (total_gts == 0) return 1.0;
    double acc = 0.0;
    int count = 0;
    for (int t = 0; t <= 9; ++t) {
        const double thresh = 0.5 + 0.05 * t;
        std::size_t tp = 0;
        for (const auto& sd : samples) {
            const auto order = score_order(sd.dets);
            const std::size_t limit =
                std::min<std::size_t>(sd.dets.size(), static_cast<std::size_t>(max_dets));
            const auto flags = greedy_flags(sd.dets, sd.gts, thresh, order, limit);
            tp += static_cast<std::size_t>(std::count(flags.begin(), flags.end(), char{1}));
        }
        acc += static_cast<double>(tp) / static_cast<double>(total_gts);
        ++count;
    }
    return acc / count;
}

EvalSummary summarize(const std::vector<SampleDetections>& samples, const EvalConfig& cfg) {
    EvalSummary out;
    for (double iou : cfg.ap_ious) out.ap.push_back(average_precision(samples, iou));
    double acc = 0.0;
    int n = 0;
    for (double iou = cfg.mean_ap_lo; iou <= cfg.mean_ap_hi + 1e-9; iou += cfg.mean_ap_step) {
        acc += average_precision(samples, iou);
        ++n;
    }
    out.mean_ap = n > 0 ? acc / n : 0.0;
    for (int md : cfg.ar_max_dets) out.ar.push_back(average_recall(samples, md));
    return out;
}

EvalSummary evaluate(const InferFn& infer, const std::vector<std::vector<RotatedBox>>& gts,
                     const EvalConfig& cfg) {
    std::vector<SampleDetections> samples(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) {
        samples[i].dets = infer(i);
        samples[i].gts = gts[i];
    }
    return summarize(samples, cfg);
}

}  // namespace autofed
