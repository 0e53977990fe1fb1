#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "autofed/geometry.hpp"

namespace autofed {

struct Detection {
    RotatedBox box;
    double score = 0.0;  // in [0,1]
};

struct MatchResult {
    int tp = 0;
    int fp = 0;
    int fn = 0;
    std::vector<std::pair<int, int>> matches;  // (detection index, gt index)
};

// Greedy score-ordered matching: detections sorted by descending score
// (ties by smaller index), truncated to max_dets; each detection takes the
// highest-IoU still-unmatched ground truth with IoU >= iou_thresh.
MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<RotatedBox>& gts, double iou_thresh, int max_dets);

// TP/(TP+FP) and TP/(TP+FN); empty denominators are defined as 1.0.
std::pair<double, double> precision_recall(const MatchResult& match);

struct SampleDetections {
    std::vector<Detection> dets;
    std::vector<RotatedBox> gts;
};

// 101-point interpolated AP over the dataset at one IoU threshold.
double average_precision(const std::vector<SampleDetections>& samples, double iou_thresh);

// Mean recall over IoU 0.50:0.05:0.95 with at most max_dets detections/sample.
double average_recall(const std::vector<SampleDetections>& samples, int max_dets);

struct EvalConfig {
    std::vector<double> ap_ious = {0.5, 0.65, 0.8};
    double mean_ap_lo = 0.5;
    double mean_ap_hi = 0.9;
    double mean_ap_step = 0.05;
    std::vector<int> ar_max_dets = {1, 10, 100};
};

struct EvalSummary {
    std::vector<double> ap;       // one per EvalConfig::ap_ious
    double mean_ap = 0.0;         // averaged over the mean_ap grid
    std::vector<double> ar;       // one per EvalConfig::ar_max_dets
};

EvalSummary summarize(const std::vector<SampleDetections>& samples, const EvalConfig& cfg);

// Runs a caller-supplied detector over the dataset; evaluation is always
// against the full ground truth supplied here, never a kept subset.
using InferFn = std::function<std::vector<Detection>(std::size_t sample_index)>;
EvalSummary evaluate(const InferFn& infer, const std::vector<std::vector<RotatedBox>>& gts,
                     const EvalConfig& cfg);

}  // namespace autofed
