#include <cmath>
#include <set>

#include "autofed/errors.hpp"
#include "autofed/geometry.hpp"
#include "autofed/rng.hpp"
#include "autofed/scene.hpp"
#include "doctest.h"

using namespace autofed;

namespace {

SceneParams small_params() {
    SceneParams p;
    p.grid = 32;
    p.lidar_channels = 4;
    p.vehicle_min = 1;
    p.vehicle_max = 3;
    p.vehicle_length_min = 7.0;
    p.vehicle_length_max = 11.0;
    p.clutter_min = 1;
    p.clutter_max = 3;
    return p;
}

double max_nonzero_radius(const Frame& f, double ex, double ey) {
    double r = 0.0;
    for (int c = 0; c < f.channels; ++c)
        for (int y = 0; y < f.height; ++y)
            for (int x = 0; x < f.width; ++x)
                if (f.at(c, y, x) > 1e-9) {
                    const double dx = x + 0.5 - ex, dy = y + 0.5 - ey;
                    r = std::max(r, std::sqrt(dx * dx + dy * dy));
                }
    return r;
}

}  // namespace

TEST_CASE("zero vehicle range yields an empty scene") {
    SceneParams p = small_params();
    p.vehicle_min = p.vehicle_max = 0;
    p.clutter_min = p.clutter_max = 0;
    const Scene s = generate_scene(99, p);
    CHECK(s.vehicles.empty());
    CHECK(s.clutter.empty());
}

TEST_CASE("scene generation is deterministic in the seed") {
    const SceneParams p = small_params();
    const Scene a = generate_scene(1234, p);
    const Scene b = generate_scene(1234, p);
    REQUIRE(a.vehicles.size() == b.vehicles.size());
    for (std::size_t i = 0; i < a.vehicles.size(); ++i) {
        CHECK(a.vehicles[i].box.cx == b.vehicles[i].box.cx);
        CHECK(a.vehicles[i].box.angle_deg == b.vehicles[i].box.angle_deg);
        CHECK(a.vehicles[i].occupancy == b.vehicles[i].occupancy);
    }
    const Scene c = generate_scene(1235, p);
    CHECK((a.vehicles.size() != c.vehicles.size() ||
           a.vehicles[0].box.cx != c.vehicles[0].box.cx));
}

TEST_CASE("placed vehicles respect the pairwise overlap bound across many scenes") {
    const SceneParams p = small_params();
    for (int s = 0; s < 1000; ++s) {
        const Scene scene = generate_scene(static_cast<std::uint64_t>(s), p);
        for (std::size_t i = 0; i < scene.vehicles.size(); ++i)
            for (std::size_t j = i + 1; j < scene.vehicles.size(); ++j)
                CHECK(rotated_iou(scene.vehicles[i].box, scene.vehicles[j].box) <
                      p.overlap_iou_max);
    }
}

TEST_CASE("empty scene renders an all-zero lidar frame") {
    SceneParams p = small_params();
    p.vehicle_min = p.vehicle_max = 0;
    p.clutter_min = p.clutter_max = 0;
    const Frame f = render_lidar(generate_scene(5, p), p);
    for (double v : f.data) CHECK(v == 0.0);
}

TEST_CASE("vehicles beyond lidar range leave the frame dark") {
    SceneParams p = small_params();
    p.vehicle_min = p.vehicle_max = 0;
    p.clutter_min = p.clutter_max = 0;
    Scene s = generate_scene(6, p);
    SceneObject far;
    far.box = {2.0, 2.0, 6.0, 2.4, 0.0, true};  // ~19.8 cells from the 16,16 center
    far.occupancy = {1.0, 1.0, 1.0};
    s.vehicles.push_back(far);
    p.lidar_range = 10.0;
    const Frame f = render_lidar(s, p);
    for (double v : f.data) CHECK(v == 0.0);
    // The same vehicle is inside radar range, giving radar-only visibility.
    p.radar_range = 25.0;
    p.radar_floor = 0.0;
    p.radar_speckle = 0.0;
    const Frame r = render_radar(s, p);
    double peak = 0.0;
    for (double v : r.data) peak = std::max(peak, v);
    CHECK(peak > 0.1);
}

TEST_CASE("axis-aligned vehicle occupies exactly its covered cells") {
    SceneParams p = small_params();
    p.vehicle_min = p.vehicle_max = 0;
    p.clutter_min = p.clutter_max = 0;
    Scene s = generate_scene(7, p);
    SceneObject v;
    v.box = {16.0, 16.0, 8.0, 3.0, 0.0, true};
    v.occupancy = {0.7, 0.8, 0.9};
    v.lidar_gain = 1.0;
    s.vehicles.push_back(v);
    const Frame f = render_lidar(s, p);
    for (int y = 0; y < p.grid; ++y)
        for (int x = 0; x < p.grid; ++x) {
            const bool covered = v.box.contains(x + 0.5, y + 0.5);
            const bool lit = f.at(0, y, x) > 0.0;
            CHECK(covered == lit);
        }
}

TEST_CASE("radar rendering is deterministic and bounded noise on empty scenes") {
    SceneParams p = small_params();
    p.vehicle_min = p.vehicle_max = 0;
    p.clutter_min = p.clutter_max = 0;
    const Scene s = generate_scene(8, p);
    const Frame a = render_radar(s, p);
    const Frame b = render_radar(s, p);
    CHECK(a.data == b.data);
    double mean = 0.0;
    for (double vv : a.data) {
        CHECK(vv >= 0.0);
        mean += vv;
    }
    mean /= static_cast<double>(a.data.size());
    CHECK(mean < 0.05);
}

TEST_CASE("radar support reaches beyond lidar support on scenes with distant vehicles") {
    SceneParams p = small_params();
    p.vehicle_min = p.vehicle_max = 0;
    p.clutter_min = p.clutter_max = 0;
    Scene s = generate_scene(9, p);
    SceneObject far;
    far.box = {27.0, 27.0, 7.0, 2.8, 45.0, true};
    far.occupancy = {1.0, 1.0, 1.0};
    far.radar_gain = 1.0;
    s.vehicles.push_back(far);
    p.radar_floor = 0.0;  // isolate footprint support
    p.radar_speckle = 0.0;
    const Frame lidar = render_lidar(s, p);
    const Frame radar = render_radar(s, p);
    CHECK(max_nonzero_radius(radar, p.ego_x(), p.ego_y()) >
          max_nonzero_radius(lidar, p.ego_x(), p.ego_y()));
}

TEST_CASE("clear weather leaves the sample untouched") {
    const SceneParams p = small_params();
    const Sample s = make_complete_sample(1, 77, p);
    const Sample w = apply_weather(s, Weather::kClear, 5, p);
    CHECK(w.lidar->data == s.lidar->data);
    CHECK(w.radar->data == s.radar->data);
}

TEST_CASE("fog halves the lidar support radius") {
    SceneParams p = small_params();
    p.vehicle_min = p.vehicle_max = 0;
    p.clutter_min = p.clutter_max = 0;
    Scene scene = generate_scene(11, p);
    // Ring of vehicles so support extends to the lidar range.
    for (int i = 0; i < 6; ++i) {
        SceneObject v;
        const double ang = i * M_PI / 3.0;
        v.box = {16.0 + 11.0 * std::cos(ang), 16.0 + 11.0 * std::sin(ang), 6.0, 2.4,
                 wrap_angle_180(ang * 180.0 / M_PI), true};
        v.occupancy = {1.0, 1.0, 1.0};
        scene.vehicles.push_back(v);
    }
    Sample s;
    s.id = 2;
    s.lidar = render_lidar(scene, p);
    s.radar = render_radar(scene, p);
    const double before = max_nonzero_radius(*s.lidar, p.ego_x(), p.ego_y());
    const Sample foggy = apply_weather(s, Weather::kFog, 5, p);
    const double after = max_nonzero_radius(*foggy.lidar, p.ego_x(), p.ego_y());
    CHECK(before > p.fog_range_factor * p.lidar_range_eff());
    CHECK(after <= p.fog_range_factor * p.lidar_range_eff());
    CHECK(foggy.radar->data == s.radar->data);
}

TEST_CASE("snow clutter is deterministic per seed") {
    const SceneParams p = small_params();
    const Sample s = make_complete_sample(3, 78, p);
    const Sample a = apply_weather(s, Weather::kSnow, 42, p);
    const Sample b = apply_weather(s, Weather::kSnow, 42, p);
    const Sample c = apply_weather(s, Weather::kSnow, 43, p);
    CHECK(a.lidar->data == b.lidar->data);
    CHECK(a.lidar->data != c.lidar->data);
}

TEST_CASE("annotation dropout endpoints and statistics") {
    const SceneParams p = small_params();
    Sample s = make_complete_sample(4, 79, p);
    const std::uint64_t gt_hash = annotations_hash(s);

    const Sample all = drop_annotations(s, 1.0, 1);
    for (const auto& a : all.annotations) CHECK(a.kept);
    const Sample none = drop_annotations(s, 0.0, 1);
    for (const auto& a : none.annotations) CHECK_FALSE(a.kept);
    CHECK(annotations_hash(all) == gt_hash);
    CHECK(annotations_hash(none) == gt_hash);  // ground truth geometry untouched

    int kept = 0, total = 0;
    for (int i = 0; i < 4000; ++i) {
        const Sample d = drop_annotations(s, 0.5, static_cast<std::uint64_t>(i));
        for (const auto& a : d.annotations) {
            kept += a.kept ? 1 : 0;
            ++total;
        }
        if (total >= 10000) break;
    }
    const double frac = static_cast<double>(kept) / total;
    CHECK(frac > 0.48);
    CHECK(frac < 0.52);
}

TEST_CASE("modality dropout endpoints, statistics, and guards") {
    const SceneParams p = small_params();
    const Sample s = make_complete_sample(5, 80, p);

    const Sample none = drop_modality(s, ModalityPolicy{0.0, 0.0}, 1);
    CHECK(none.has_lidar());
    CHECK(none.has_radar());

    const Sample no_radar = drop_modality(s, ModalityPolicy{0.0, 1.0}, 1);
    CHECK(no_radar.has_lidar());
    CHECK_FALSE(no_radar.has_radar());

    int lost_lidar = 0, lost_radar = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const Sample d = drop_modality(s, ModalityPolicy{0.25, 0.25}, static_cast<std::uint64_t>(i));
        CHECK((d.has_lidar() || d.has_radar()));
        if (!d.has_lidar()) ++lost_lidar;
        if (!d.has_radar()) ++lost_radar;
    }
    CHECK(std::abs(lost_lidar / static_cast<double>(n) - 0.25) < 0.02);
    CHECK(std::abs(lost_radar / static_cast<double>(n) - 0.25) < 0.02);

    Sample lidar_only = s;
    lidar_only.radar.reset();
    CHECK_THROWS_AS(drop_modality(lidar_only, ModalityPolicy{1.0, 0.0}, 1), InputError);
    CHECK_THROWS_AS(drop_modality(s, ModalityPolicy{0.7, 0.7}, 1), ConfigError);
}

TEST_CASE("client datasets are deterministic, disjoint, and profile-shaped") {
    SceneParams p = small_params();
    std::vector<ClientProfile> profiles;
    for (int i = 0; i < 3; ++i) {
        ClientProfile c;
        c.id = i;
        c.sample_count = 20;
        c.keep_ratio = i == 0 ? 0.3 : 1.0;
        if (i == 1) c.modality.drop_radar = 1.0;
        profiles.push_back(c);
    }
    const auto a = build_client_datasets(profiles, 2024, p);
    const auto b = build_client_datasets(profiles, 2024, p);
    REQUIRE(a.size() == 3);
    std::set<std::uint64_t> ids;
    for (std::size_t c = 0; c < a.size(); ++c) {
        REQUIRE(a[c].samples.size() == 20);
        for (std::size_t i = 0; i < 20; ++i) {
            const auto& sa = a[c].samples[i];
            const auto& sb = b[c].samples[i];
            CHECK(sa.id == sb.id);
            CHECK((sa.has_lidar() ? sa.lidar->data : std::vector<double>{}) ==
                  (sb.has_lidar() ? sb.lidar->data : std::vector<double>{}));
            CHECK(ids.insert(sa.id).second);  // no id appears twice
            CHECK((sa.has_lidar() || sa.has_radar()));
        }
    }
    for (const auto& s : a[1].samples) CHECK_FALSE(s.has_radar());
}

TEST_CASE("dataset files round-trip byte-identically") {
    SceneParams p = small_params();
    ClientProfile c;
    c.id = 7;
    c.sample_count = 5;
    c.keep_ratio = 0.5;
    const auto ds = build_client_datasets({c}, 99, p);
    DatasetFile f;
    f.grid = static_cast<std::uint32_t>(p.grid);
    f.lidar_channels = static_cast<std::uint32_t>(p.lidar_channels);
    f.seed = 99;
    f.client_id = 7;
    f.samples = ds[0].samples;

    const std::string bytes = encode_dataset(f);
    const std::string bytes2 = encode_dataset(f);
    CHECK(bytes == bytes2);

    const DatasetFile g = decode_dataset(bytes);
    CHECK(g.grid == f.grid);
    REQUIRE(g.samples.size() == f.samples.size());
    for (std::size_t i = 0; i < f.samples.size(); ++i) {
        CHECK(g.samples[i].id == f.samples[i].id);
        CHECK(g.samples[i].lidar->data == f.samples[i].lidar->data);
        CHECK(g.samples[i].annotations.size() == f.samples[i].annotations.size());
        CHECK(encode_dataset(g) == bytes);
    }

    // Size accounting matches the encoder.
    for (const auto& s : f.samples) {
        const std::size_t expect = sample_serialized_size(s);
        DatasetFile one;
        one.samples = {s};
        // 40-byte header + 8-byte length prefix + payload
        CHECK(encode_dataset(one).size() == 40 + 8 + expect);
    }
}

TEST_CASE("eval and pretrain datasets stay in reserved id ranges") {
    SceneParams p = small_params();
    const auto ev = build_eval_dataset(4, 1, p);
    const auto pre = build_pretrain_dataset(4, 1, p);
    for (const auto& s : ev) CHECK((s.id >> 63) == 1);
    for (const auto& s : pre) {
        CHECK((s.id >> 62) == 1);
        CHECK((s.id >> 63) == 0);
        CHECK(s.has_lidar());
        CHECK(s.has_radar());
    }
}
