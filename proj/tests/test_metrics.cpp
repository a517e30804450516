#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "totem/metrics.hpp"
#include "totem/rng.hpp"
#include "totem/synthdata.hpp"
#include "totem/tensor.hpp"

using namespace totem;

namespace {

BoundingBox random_box(Rng& rng) {
    return {rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 30), rng.uniform(1, 30)};
}

}  // namespace

TEST_CASE("iou hand cases") {
    BoundingBox a{0, 0, 10, 10};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, {20, 20, 5, 5}) == 0.0);
    CHECK(iou(a, {5, 0, 10, 10}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("iou is symmetric and bounded") {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        BoundingBox a = random_box(rng), b = random_box(rng);
        double ab = iou(a, b);
        CHECK(ab == iou(b, a));
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
    }
}

TEST_CASE("center error hand cases") {
    BoundingBox a{0, 0, 2, 2};
    CHECK(center_error(a, a) == 0.0);
    BoundingBox b{3, 4, 2, 2};  // centers offset by (3, 4)
    CHECK(center_error(a, b) == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(center_error(a, b) == center_error(b, a));
}

TEST_CASE("success curve closed forms") {
    Curve perfect = success_curve(std::vector<double>(10, 1.0));
    REQUIRE(perfect.thresholds.size() == 21);
    for (std::size_t i = 0; i + 1 < 21; ++i) CHECK(perfect.values[i] == 1.0);
    CHECK(perfect.values[20] == 0.0);  // strict > at Th = 1.0
    CHECK(auc(perfect) == doctest::Approx(20.0 / 21.0).epsilon(1e-12));

    Curve half = success_curve(std::vector<double>(8, 0.5));
    for (std::size_t i = 0; i < 21; ++i)
        CHECK(half.values[i] == (half.thresholds[i] < 0.5 ? 1.0 : 0.0));
    CHECK(auc(half) == doctest::Approx(10.0 / 21.0).epsilon(1e-12));

    Curve mixed = success_curve({0.2, 0.8});
    CHECK(mixed.values[10] == 0.5);  // Th = 0.5
}

TEST_CASE("precision curve closed forms") {
    Curve zero = precision_curve(std::vector<double>(5, 0.0));
    REQUIRE(zero.thresholds.size() == 51);
    for (double v : zero.values) CHECK(v == 1.0);
    CHECK(auc(zero) == 1.0);

    Curve at20 = precision_curve(std::vector<double>(4, 20.0));
    for (std::size_t i = 0; i < 51; ++i)
        CHECK(at20.values[i] == (at20.thresholds[i] >= 20.0 ? 1.0 : 0.0));

    Curve two = precision_curve({10.0, 30.0});
    CHECK(two.values[20] == 0.5);
}

TEST_CASE("normalized precision hand cases and scale invariance") {
    std::vector<BoundingBox> gt{{0, 0, 10, 20}};
    std::vector<BoundingBox> perfect = gt;
    Curve p = normalized_precision_curve(perfect, gt);
    REQUIRE(p.thresholds.size() == 51);
    for (double v : p.values) CHECK(v == 1.0);

    // Offset of (w_gt/10, 0): normalized error exactly 0.1.
    std::vector<BoundingBox> off{{1, 0, 10, 20}};
    Curve q = normalized_precision_curve(off, gt);
    // 0.1 falls exactly on threshold index 10 (grid 0..0.5 step 0.01).
    CHECK(q.values[9] == 0.0);
    CHECK(q.values[10] == 1.0);

    // Uniform rescale of all boxes leaves the curve unchanged.
    std::vector<BoundingBox> gt_s{{0, 0, 70, 140}}, off_s{{7, 0, 70, 140}};
    Curve qs = normalized_precision_curve(off_s, gt_s);
    CHECK(qs.values == q.values);
}

TEST_CASE("auc basics and trapezoid agreement") {
    Curve c;
    for (int i = 0; i <= 1000; ++i) {
        double x = i / 1000.0;
        c.thresholds.push_back(x);
        c.values.push_back(std::exp(-2.0 * x));  // smooth decreasing curve
    }
    double m = auc(c);
    double trap = 0.0;
    for (std::size_t i = 0; i + 1 < c.values.size(); ++i)
        trap += 0.5 * (c.values[i] + c.values[i + 1]) * (c.thresholds[i + 1] - c.thresholds[i]);
    CHECK(m == doctest::Approx(trap).epsilon(1e-4));

    Curve ones{{0, 0.5, 1.0}, {1, 1, 1}};
    CHECK(auc(ones) == 1.0);
}

TEST_CASE("curves are monotone and match brute-force counting on 100 random instances") {
    Rng rng(41);
    for (int inst = 0; inst < 100; ++inst) {
        std::size_t n = 1 + rng.below(60);
        std::vector<double> ious, errs;
        for (std::size_t f = 0; f < n; ++f) {
            ious.push_back(rng.uniform());
            errs.push_back(rng.uniform(0, 60));
        }
        Curve s = success_curve(ious), p = precision_curve(errs);
        for (std::size_t i = 0; i < s.values.size(); ++i) {
            double count = 0;
            for (double v : ious)
                if (v > s.thresholds[i]) count += 1;
            CHECK(s.values[i] == count / (double)n);
            if (i) CHECK(s.values[i] <= s.values[i - 1]);
        }
        for (std::size_t i = 0; i < p.values.size(); ++i) {
            double count = 0;
            for (double v : errs)
                if (v <= p.thresholds[i]) count += 1;
            CHECK(p.values[i] == count / (double)n);
            if (i) CHECK(p.values[i] >= p.values[i - 1]);
        }
    }
}

TEST_CASE("gt against itself scores the strict-inequality edge values") {
    Rng rng(43);
    std::vector<SequenceResult> results;
    for (int s = 0; s < 3; ++s) {
        SequenceResult r;
        r.id = "seq" + std::to_string(s);
        for (int f = 0; f < 10; ++f) {
            BoundingBox b = random_box(rng);
            r.pred.push_back(b);
            r.gt.push_back(b);
        }
        results.push_back(r);
    }
    TrackerMetrics m = compute_metrics(results);
    CHECK(m.suc_auc == doctest::Approx(20.0 / 21.0).epsilon(1e-12));
    CHECK(m.pre_auc == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.npre_auc == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("attribute report: per-tag slices and absence convention") {
    Rng rng(47);
    std::vector<SequenceResult> results;
    SequenceResult tagged;
    tagged.id = "a";
    tagged.attributes = {"IV"};
    SequenceResult plain;
    plain.id = "b";
    for (int f = 0; f < 8; ++f) {
        BoundingBox b = random_box(rng);
        tagged.pred.push_back(b);
        tagged.gt.push_back(b);  // perfect on the tagged sequence
        BoundingBox g = random_box(rng);
        plain.pred.push_back(random_box(rng));
        plain.gt.push_back(g);
    }
    results = {tagged, plain};
    MetricReport rep = attribute_report(results);
    REQUIRE(rep.attribute_auc.count("IV") == 1);
    // IV column equals that sequence's own AUC (perfect -> 20/21).
    CHECK(rep.attribute_auc.at("IV") == doctest::Approx(20.0 / 21.0).epsilon(1e-12));
    // No sequence carries FOC: the column is absent, not zero.
    CHECK(rep.attribute_auc.count("FOC") == 0);
    CHECK(rep.attribute_auc.count("All") == 1);
}

TEST_CASE("annotation parsing: hand cases and errors") {
    namespace fs = std::filesystem;
    auto path = (fs::temp_directory_path() / "totem_test_gt.txt").string();
    {
        std::ofstream os(path);
        os << "0,0,10,10\n1.5,2.5,3,4\n";
    }
    auto boxes = parse_annotation_file(path);
    REQUIRE(boxes.size() == 2);
    CHECK(boxes[0].x == 0.0);
    CHECK(boxes[0].w == 10.0);
    CHECK(boxes[1].x == 1.5);
    CHECK(boxes[1].y == 2.5);
    CHECK(boxes[1].h == 4.0);

    {
        std::ofstream os(path);
        os << "1,2,3\n";
    }
    CHECK_THROWS_WITH(parse_annotation_file(path), doctest::Contains("line 1"));
    std::remove(path.c_str());
}

TEST_CASE("report json and csv carry the curves") {
    Rng rng(53);
    SequenceResult r;
    r.id = "s";
    for (int f = 0; f < 5; ++f) {
        BoundingBox b = random_box(rng);
        r.pred.push_back(b);
        r.gt.push_back(b);
    }
    MetricReport rep = attribute_report({r});
    std::string json = report_to_json(rep, "TOTEM");
    CHECK(json.find("TOTEM") != std::string::npos);
    CHECK(json.find("success") != std::string::npos);
    std::string csv = curves_to_csv(compute_metrics({r}), "TOTEM");
    CHECK(csv.find("TOTEM") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') > 50);
}
