#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "totem/box.hpp"

namespace totem {

struct Curve {
    std::vector<double> thresholds;
    std::vector<double> values;
};

double iou(const BoundingBox& a, const BoundingBox& b);
double center_error(const BoundingBox& a, const BoundingBox& b);

/// Fraction of frames with IoU strictly above each of the 21 thresholds
/// {0, 0.05, ..., 1.0}.
Curve success_curve(const std::vector<double>& ious);
/// Fraction of frames with center error <= Th, 51 thresholds 0..50.
Curve precision_curve(const std::vector<double>& errors);
/// Center errors scaled per-axis by the ground-truth box size, 51 thresholds
/// 0..0.5. Frames with a zero-extent gt box are excluded with a warning.
Curve normalized_precision_curve(const std::vector<BoundingBox>& pred,
                                 const std::vector<BoundingBox>& gt);

/// Mean of the curve values over the uniform threshold grid.
double auc(const Curve& curve);

struct SequenceResult {
    std::string id;
    std::vector<BoundingBox> pred, gt;
    std::vector<std::string> attributes;
};

struct TrackerMetrics {
    Curve success, precision, normalized_precision;
    double suc_auc = 0.0, pre_auc = 0.0, npre_auc = 0.0;
};

struct MetricReport {
    TrackerMetrics overall;
    /// Per-attribute SUC AUC; tags with no carrying sequence are absent,
    /// never zero.
    std::map<std::string, double> attribute_auc;
};

TrackerMetrics compute_metrics(const std::vector<SequenceResult>& results);
MetricReport attribute_report(const std::vector<SequenceResult>& results);

std::vector<BoundingBox> parse_annotation_file(const std::string& path);

std::string report_to_json(const MetricReport& report, const std::string& tracker_name);
std::string curves_to_csv(const TrackerMetrics& metrics, const std::string& tracker_name);

}  // namespace totem
