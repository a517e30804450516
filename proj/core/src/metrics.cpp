#include "totem/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "totem/synthdata.hpp"
#include "totem/tensor.hpp"

namespace totem {

double iou(const BoundingBox& a, const BoundingBox& b) {
    // Areas are derived from the same corner coordinates as the intersection
    // so that identical boxes score exactly 1 and the result is symmetric.
    const double ax2 = a.x + a.w, ay2 = a.y + a.h;
    const double bx2 = b.x + b.w, by2 = b.y + b.h;
    const double ix = std::max(0.0, std::min(ax2, bx2) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(ay2, by2) - std::max(a.y, b.y));
    const double inter = ix * iy;
    const double area_a = (ax2 - a.x) * (ay2 - a.y);
    const double area_b = (bx2 - b.x) * (by2 - b.y);
    const double uni = area_a + area_b - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

double center_error(const BoundingBox& a, const BoundingBox& b) {
    return std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
}

namespace {

std::vector<double> uniform_grid(double lo, double hi, std::size_t n) {
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = lo + (hi - lo) * (double)i / (double)(n - 1);
    return g;
}

Curve count_curve(const std::vector<double>& samples, std::vector<double> thresholds,
                  bool strict_above) {
    if (samples.empty()) throw ContractError("metric curve: empty sample list");
    Curve c;
    c.thresholds = std::move(thresholds);
    c.values.reserve(c.thresholds.size());
    for (double th : c.thresholds) {
        std::size_t n = 0;
        for (double s : samples)
            if (strict_above ? s > th : s <= th) ++n;
        c.values.push_back((double)n / (double)samples.size());
    }
    return c;
}

}  // namespace

Curve success_curve(const std::vector<double>& ious) {
    return count_curve(ious, uniform_grid(0.0, 1.0, 21), /*strict_above=*/true);
}

Curve precision_curve(const std::vector<double>& errors) {
    return count_curve(errors, uniform_grid(0.0, 50.0, 51), /*strict_above=*/false);
}

Curve normalized_precision_curve(const std::vector<BoundingBox>& pred,
                                 const std::vector<BoundingBox>& gt) {
    if (pred.size() != gt.size())
        throw ContractError("normalized precision: prediction/gt length mismatch");
    std::vector<double> errs;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (gt[i].w <= 0.0 || gt[i].h <= 0.0) {
            std::cerr << "warning: frame " << i
                      << " has zero-extent ground truth, excluded from normalized precision\n";
            continue;
        }
        errs.push_back(std::hypot((pred[i].cx() - gt[i].cx()) / gt[i].w,
                                  (pred[i].cy() - gt[i].cy()) / gt[i].h));
    }
    return count_curve(errs, uniform_grid(0.0, 0.5, 51), /*strict_above=*/false);
}

double auc(const Curve& curve) {
    double s = 0.0;
    for (double v : curve.values) s += v;
    return curve.values.empty() ? 0.0 : s / (double)curve.values.size();
}

TrackerMetrics compute_metrics(const std::vector<SequenceResult>& results) {
    std::vector<double> ious, errors;
    std::vector<BoundingBox> preds, gts;
    for (const auto& r : results) {
        if (r.pred.size() != r.gt.size())
            throw ContractError("sequence " + r.id + ": prediction/gt length mismatch");
        for (std::size_t i = 0; i < r.pred.size(); ++i) {
            ious.push_back(iou(r.pred[i], r.gt[i]));
            errors.push_back(center_error(r.pred[i], r.gt[i]));
            preds.push_back(r.pred[i]);
            gts.push_back(r.gt[i]);
        }
    }
    TrackerMetrics m;
    m.success = success_curve(ious);
    m.precision = precision_curve(errors);
    m.normalized_precision = normalized_precision_curve(preds, gts);
    m.suc_auc = auc(m.success);
    m.pre_auc = auc(m.precision);
    m.npre_auc = auc(m.normalized_precision);
    return m;
}

MetricReport attribute_report(const std::vector<SequenceResult>& results) {
    for (const auto& r : results)
        for (const auto& tag : r.attributes)
            if (std::find(kAttributeTags.begin(), kAttributeTags.end(), tag) ==
                kAttributeTags.end())
                throw ContractError("attribute_report: unknown tag '" + tag + "' in sequence " +
                                    r.id);
    MetricReport rep;
    rep.overall = compute_metrics(results);
    rep.attribute_auc["All"] = rep.overall.suc_auc;
    for (const auto& tag : kAttributeTags) {
        std::vector<SequenceResult> subset;
        for (const auto& r : results)
            if (std::find(r.attributes.begin(), r.attributes.end(), tag) != r.attributes.end())
                subset.push_back(r);
        if (subset.empty()) continue;  // absent, never zero
        rep.attribute_auc[tag] = auc(success_curve([&] {
            std::vector<double> ious;
            for (const auto& r : subset)
                for (std::size_t i = 0; i < r.pred.size(); ++i)
                    ious.push_back(iou(r.pred[i], r.gt[i]));
            return ious;
        }()));
    }
    return rep;
}

std::vector<BoundingBox> parse_annotation_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractError("cannot open annotation file " + path);
    std::vector<BoundingBox> boxes;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        BoundingBox b;
        double* fields[4] = {&b.x, &b.y, &b.w, &b.h};
        const char* p = line.data();
        const char* end = line.data() + line.size();
        for (int k = 0; k < 4; ++k) {
            auto res = std::from_chars(p, end, *fields[k]);
            if (res.ec != std::errc{})
                throw ContractError(path + ": malformed box on line " +
                                    std::to_string(lineno));
            p = res.ptr;
            if (k < 3) {
                if (p >= end || *p != ',')
                    throw ContractError(path + ": expected 4 comma-separated fields on line " +
                                        std::to_string(lineno));
                ++p;
            }
        }
        if (p != end)
            throw ContractError(path + ": trailing characters on line " +
                                std::to_string(lineno));
        boxes.push_back(b);
    }
    return boxes;
}

namespace {
nlohmann::json curve_json(const Curve& c) {
    return {{"thresholds", c.thresholds}, {"values", c.values}};
}
}  // namespace

std::string report_to_json(const MetricReport& report, const std::string& tracker_name) {
    nlohmann::json j;
    j["tracker"] = tracker_name;
    j["success"] = curve_json(report.overall.success);
    j["precision"] = curve_json(report.overall.precision);
    j["normalized_precision"] = curve_json(report.overall.normalized_precision);
    j["auc"] = {{"success", report.overall.suc_auc},
                {"precision", report.overall.pre_auc},
                {"normalized_precision", report.overall.npre_auc}};
    nlohmann::json attrs;
    for (const auto& [tag, v] : report.attribute_auc) attrs[tag] = v;
    j["attribute_auc"] = attrs;
    return j.dump(2) + "\n";
}

std::string curves_to_csv(const TrackerMetrics& metrics, const std::string& tracker_name) {
    std::ostringstream os;
    os << "tracker,metric,threshold,value\n";
    auto emit = [&](const char* name, const Curve& c) {
        for (std::size_t i = 0; i < c.thresholds.size(); ++i)
            os << tracker_name << ',' << name << ',' << c.thresholds[i] << ',' << c.values[i]
               << '\n';
    };
    emit("success", metrics.success);
    emit("precision", metrics.precision);
    emit("normalized_precision", metrics.normalized_precision);
    return os.str();
}

}  // namespace totem
