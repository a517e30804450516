#pragma once

namespace totem {

/// Axis-aligned box: top-left corner plus extents, in annotation units
/// (feature-grid cells for the synthetic benchmark).
struct BoundingBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double cx() const { return x + w / 2.0; }
    double cy() const { return y + h / 2.0; }
    double area() const { return w * h; }
};

}  // namespace totem
