#pragma once

#include <array>
#include <cmath>
#include <vector>

namespace autofed {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

// Rotated rectangle in grid units. The angle lives in [0,180) degrees; the
// 180-degree ambiguity of the long axis is resolved by the binary direction
// flag (true = forward along the axis).
struct RotatedBox {
    double cx = 0.0;
    double cy = 0.0;
    double length = 0.0;  // >= width by convention
    double width = 0.0;
    double angle_deg = 0.0;
    bool forward = true;

    double area() const { return length * width; }

    std::array<Vec2, 4> corners() const {
        const double rad = angle_deg * M_PI / 180.0;
        const double ux = std::cos(rad), uy = std::sin(rad);
        const double vx = -uy, vy = ux;
        const double hl = 0.5 * length, hw = 0.5 * width;
        return {Vec2{cx + ux * hl + vx * hw, cy + uy * hl + vy * hw},
                Vec2{cx - ux * hl + vx * hw, cy - uy * hl + vy * hw},
                Vec2{cx - ux * hl - vx * hw, cy - uy * hl - vy * hw},
                Vec2{cx + ux * hl - vx * hw, cy + uy * hl - vy * hw}};
    }

    bool contains(double px, double py) const {
        const double rad = angle_deg * M_PI / 180.0;
        const double ux = std::cos(rad), uy = std::sin(rad);
        const double dx = px - cx, dy = py - cy;
        const double along = dx * ux + dy * uy;
        const double across = -dx * uy + dy * ux;
        return std::abs(along) <= 0.5 * length && std::abs(across) <= 0.5 * width;
    }
};

// Wraps an angle into [0, 180).
double wrap_angle_180(double deg);

// Exact rotated-rectangle IoU: clip one rectangle by the other's half-planes
// (Sutherland-Hodgman), shoelace areas. Degenerate boxes give 0.
double rotated_iou(const RotatedBox& a, const RotatedBox& b);

double polygon_area(const std::vector<Vec2>& poly);
std::vector<Vec2> clip_polygon(std::vector<Vec2> subject, const std::array<Vec2, 4>& clip);

}  // namespace autofed
