#include "autofed/geometry.hpp"

#include <algorithm>

namespace autofed {

double wrap_angle_180(double deg) {
    double a = std::fmod(deg, 180.0);
    if (a < 0.0) a += 180.0;
    return a;
}

double polygon_area(const std::vector<Vec2>& poly) {
    if (poly.size() < 3) return 0.0;
    double twice = 0.0;
    for (std::size_t i = 0; i < poly.size(); ++i) {
        const auto& p = poly[i];
        const auto& q = poly[(i + 1) % poly.size()];
        twice += p.x * q.y - q.x * p.y;
    }
    return 0.5 * std::abs(twice);
}

// Clips `subject` against the convex quad `clip` (counter-clockwise or
// clockwise both work; the inside test follows the quad's own orientation).
std::vector<Vec2> clip_polygon(std::vector<Vec2> subject, const std::array<Vec2, 4>& clip) {
    // Signed area of the clip quad decides which side is "inside".
    double twice = 0.0;
    for (int i = 0; i < 4; ++i) {
        const auto& p = clip[static_cast<std::size_t>(i)];
        const auto& q = clip[static_cast<std::size_t>((i + 1) % 4)];
        twice += p.x * q.y - q.x * p.y;
    }
    const double orient = twice >= 0.0 ? 1.0 : -1.0;

    for (int e = 0; e < 4 && !subject.empty(); ++e) {
        const Vec2 a = clip[static_cast<std::size_t>(e)];
        const Vec2 b = clip[static_cast<std::size_t>((e + 1) % 4)];
        const double ex = b.x - a.x, ey = b.y - a.y;
        auto side = [&](const Vec2& p) { return orient * (ex * (p.y - a.y) - ey * (p.x - a.x)); };
        std::vector<Vec2> out;
        out.reserve(subject.size() + 4);
        for (std::size_t i = 0; i < subject.size(); ++i) {
            const Vec2 cur = subject[i];
            const Vec2 nxt = subject[(i + 1) % subject.size()];
            const double sc = side(cur), sn = side(nxt);
            if (sc >= 0.0) out.push_back(cur);
            if ((sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0)) {
                const double t = sc / (sc - sn);
                out.push_back(Vec2{cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
            }
        }
        subject = std::move(out);
    }
    return subject;
}

double rotated_iou(const RotatedBox& a, const RotatedBox& b) {
    const double area_a = a.area(), area_b = b.area();
    if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
    const auto ca = a.corners();
    const auto cb = b.corners();
    std::vector<Vec2> subject(ca.begin(), ca.end());
    const double inter = polygon_area(clip_polygon(std::move(subject), cb));
    const double uni = area_a + area_b - inter;
    if (uni <= 0.0) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

}  // namespace autofed
