#pragma once

#include "morphoseg/imaging.hpp"

#include "json.hpp"

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace morphoseg {

struct ConfusionCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
};

/// Binary counts with label != 0 as foreground.
ConfusionCounts confusion(const MaskMap& pred, const MaskMap& gt);

/// Percentages. Both masks empty scores 100.
double dsc(const ConfusionCounts& c);
double iou(const ConfusionCounts& c);
double dsc(const MaskMap& pred, const MaskMap& gt);
double iou(const MaskMap& pred, const MaskMap& gt);

/// Foreground pixels with a 4-neighbor in the background or on the image edge.
std::vector<std::pair<int, int>> boundary_pixels(const MaskMap& mask);

/// Pooled directed nearest-boundary distances in both directions.
/// Empty when either mask has no foreground.
std::vector<double> boundary_distances(const MaskMap& pred, const MaskMap& gt);

/// Nearest-rank 95th percentile of the pooled distances: sorted[ceil(0.95 n) - 1].
/// nullopt when either mask is empty.
std::optional<double> hd95(const MaskMap& pred, const MaskMap& gt);

/// max(h(X, Y), h(Y, X)) over the boundary sets.
std::optional<double> hausdorff(const MaskMap& pred, const MaskMap& gt);

struct ImageRecord {
    std::string id;
    double dsc = 0.0;
    std::optional<double> hd95;  // nullopt: skipped
    double iou = 0.0;
};

ImageRecord evaluate_pair(const std::string& id, const MaskMap& pred, const MaskMap& gt);

struct EvalReport {
    std::vector<ImageRecord> records;
    double mean_dsc = 0.0;
    std::optional<double> mean_hd95;
    double mean_iou = 0.0;
    double iou_50 = 0.0;
    double iou_75 = 0.0;
    double iou_90 = 0.0;
    double map = 0.0;
    std::size_t hd95_skipped = 0;
};

/// Percentage of records with iou >= threshold_percent.
double iou_pass_rate(std::span<const ImageRecord> records, double threshold_percent);

/// mAP is the mean pass rate over IoU thresholds 50, 55, ..., 95 percent.
EvalReport aggregate(std::vector<ImageRecord> records);

void write_eval_csv(const EvalReport& report, const std::filesystem::path& path);
nlohmann::json to_json(const EvalReport& report);

}  // namespace morphoseg
