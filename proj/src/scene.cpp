#include "autofed/scene.hpp"

#include <algorithm>
#include <cmath>

#include "autofed/byteio.hpp"
#include "autofed/errors.hpp"

namespace autofed {

const char* weather_name(Weather w) {
    switch (w) {
        case Weather::kClear: return "clear";
        case Weather::kFog: return "fog";
        case Weather::kRain: return "rain";
        case Weather::kSnow: return "snow";
    }
    return "unknown";
}

std::vector<RotatedBox> Sample::ground_truth() const {
    std::vector<RotatedBox> out;
    out.reserve(annotations.size());
    for (const auto& a : annotations) out.push_back(a.box);
    return out;
}

std::vector<RotatedBox> Sample::kept_boxes() const {
    std::vector<RotatedBox> out;
    for (const auto& a : annotations)
        if (a.kept) out.push_back(a.box);
    return out;
}

// ----------------------------------------------------------------- generation

namespace {

bool overlaps_any(const RotatedBox& box, const std::vector<SceneObject>& objs, double max_iou) {
    for (const auto& o : objs)
        if (rotated_iou(box, o.box) >= max_iou) return true;
    return false;
}

std::vector<double> draw_occupancy(Rng& rng, int channels, double lo, double hi) {
    std::vector<double> occ(static_cast<std::size_t>(channels));
    for (auto& v : occ) v = rng.uniform(lo, hi);
    return occ;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const SceneParams& params) {
    if (params.grid < 8) throw ConfigError("scene grid too small");
    if (params.lidar_channels < 2) throw ConfigError("lidar needs >= 2 channels");
    if (params.vehicle_min < 0 || params.vehicle_max < params.vehicle_min)
        throw ConfigError("bad vehicle count range");
    Rng rng(derive_seed(seed, "scene"));
    Scene scene;
    scene.grid = params.grid;
    scene.seed = seed;
    const double margin = params.margin_frac * params.grid;
    const int occ_channels = params.lidar_channels - 1;
    const double sz = params.grid / 64.0;  // object sizes are tuned at a 64-cell grid

    const int n_vehicles =
        static_cast<int>(rng.uniform_int(params.vehicle_min, params.vehicle_max));
    for (int v = 0; v < n_vehicles; ++v) {
        bool placed = false;
        for (int attempt = 0; attempt < params.max_place_tries; ++attempt) {
            RotatedBox box;
            box.length = rng.uniform(params.vehicle_length_min, params.vehicle_length_max);
            box.width = box.length / params.vehicle_aspect;
            box.cx = rng.uniform(margin, params.grid - margin);
            box.cy = rng.uniform(margin, params.grid - margin);
            box.angle_deg = rng.uniform(0.0, 180.0);
            box.forward = rng.bernoulli(0.5);
            if (overlaps_any(box, scene.vehicles, params.overlap_iou_max)) continue;
            SceneObject obj;
            obj.box = box;
            obj.occupancy = draw_occupancy(rng, occ_channels, 0.45, 1.0);
            obj.lidar_gain = rng.uniform(0.75, 1.0);
            obj.radar_gain = rng.uniform(0.9, 1.3);
            scene.vehicles.push_back(std::move(obj));
            placed = true;
            break;
        }
        if (!placed)
            throw ConfigError("vehicle placement failed: rejection budget exhausted at density " +
                              std::to_string(n_vehicles));
    }

    const int n_clutter = static_cast<int>(rng.uniform_int(params.clutter_min, params.clutter_max));
    for (int c = 0; c < n_clutter; ++c) {
        bool placed = false;
        for (int attempt = 0; attempt < params.max_place_tries; ++attempt) {
            RotatedBox box;
            if (rng.bernoulli(0.5)) {
                // wall strip: far thinner than any vehicle
                box.length = rng.uniform(6.0, 14.0) * sz;
                box.width = rng.uniform(1.0, 1.8) * sz;
            } else {
                // compact blob
                box.length = rng.uniform(2.0, 3.5) * sz;
                box.width = box.length;
            }
            box.cx = rng.uniform(margin, params.grid - margin);
            box.cy = rng.uniform(margin, params.grid - margin);
            box.angle_deg = rng.uniform(0.0, 180.0);
            box.forward = true;
            if (overlaps_any(box, scene.vehicles, params.overlap_iou_max)) continue;
            if (overlaps_any(box, scene.clutter, params.overlap_iou_max)) continue;
            SceneObject obj;
            obj.box = box;
            obj.occupancy = draw_occupancy(rng, occ_channels, 0.3, 0.9);
            obj.lidar_gain = rng.uniform(0.5, 0.9);
            obj.radar_gain = rng.uniform(0.3, 0.9);
            scene.clutter.push_back(std::move(obj));
            placed = true;
            break;
        }
        if (!placed) break;  // clutter is best-effort filler
    }
    return scene;
}

// ------------------------------------------------------------------ rendering

namespace {

// Visit grid cells whose centers fall inside the object's footprint.
template <typename Fn>
void for_covered_cells(const SceneObject& obj, int grid, Fn&& fn) {
    const auto corners = obj.box.corners();
    double minx = corners[0].x, maxx = corners[0].x;
    double miny = corners[0].y, maxy = corners[0].y;
    for (const auto& c : corners) {
        minx = std::min(minx, c.x);
        maxx = std::max(maxx, c.x);
        miny = std::min(miny, c.y);
        maxy = std::max(maxy, c.y);
    }
    const int x0 = std::max(0, static_cast<int>(std::floor(minx)));
    const int x1 = std::min(grid - 1, static_cast<int>(std::ceil(maxx)));
    const int y0 = std::max(0, static_cast<int>(std::floor(miny)));
    const int y1 = std::min(grid - 1, static_cast<int>(std::ceil(maxy)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (obj.box.contains(x + 0.5, y + 0.5)) fn(x, y);
}

}  // namespace

Frame render_lidar(const Scene& scene, const SceneParams& params) {
    const int G = scene.grid;
    Frame frame = Frame::zeros(params.lidar_channels, G, G);
    const int occ_channels = params.lidar_channels - 1;
    const double range = params.lidar_range_eff();
    const double d0 = params.lidar_d0_eff();
    auto render_object = [&](const SceneObject& obj) {
        for_covered_cells(obj, G, [&](int x, int y) {
            const double dx = x + 0.5 - params.ego_x();
            const double dy = y + 0.5 - params.ego_y();
            const double d = std::sqrt(dx * dx + dy * dy);
            if (d > range) return;
            for (int c = 0; c < occ_channels; ++c)
                frame.at(c, y, x) = std::max(frame.at(c, y, x), obj.occupancy[static_cast<std::size_t>(c)]);
            const double intensity = obj.lidar_gain / (1.0 + d / d0);
            frame.at(occ_channels, y, x) = std::max(frame.at(occ_channels, y, x), intensity);
        });
    };
    for (const auto& v : scene.vehicles) render_object(v);
    for (const auto& c : scene.clutter) render_object(c);
    return frame;
}

Frame render_radar(const Scene& scene, const SceneParams& params) {
    const int G = scene.grid;
    Frame base = Frame::zeros(1, G, G);
    const double range = params.radar_range_eff();
    const double d0 = params.radar_d0_eff();
    auto render_object = [&](const SceneObject& obj) {
        for_covered_cells(obj, G, [&](int x, int y) {
            const double dx = x + 0.5 - params.ego_x();
            const double dy = y + 0.5 - params.ego_y();
            const double d = std::sqrt(dx * dx + dy * dy);
            if (d > range) return;
            const double intensity = obj.radar_gain / (1.0 + d / d0);
            base.at(0, y, x) = std::max(base.at(0, y, x), intensity);
        });
    };
    for (const auto& v : scene.vehicles) render_object(v);
    for (const auto& c : scene.clutter) render_object(c);

    // Angular smearing: fixed 3x3 binomial kernel.
    Frame blurred = Frame::zeros(1, G, G);
    static const double kKernel[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
    for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) {
            double acc = 0.0;
            for (int ky = -1; ky <= 1; ++ky)
                for (int kx = -1; kx <= 1; ++kx) {
                    const int yy = y + ky, xx = x + kx;
                    if (yy < 0 || yy >= G || xx < 0 || xx >= G) continue;
                    acc += kKernel[ky + 1][kx + 1] * base.at(0, yy, xx);
                }
            blurred.at(0, y, x) = acc / 16.0;
        }

    Rng rng(derive_seed(scene.seed, "radar-noise"));
    for (auto& v : blurred.data) {
        v *= std::max(0.0, 1.0 + params.radar_speckle * rng.normal());
        v += std::abs(params.radar_floor * rng.normal());
    }
    return blurred;
}

// -------------------------------------------------------------- perturbations

Sample apply_weather(Sample sample, Weather weather, std::uint64_t seed,
                     const SceneParams& params) {
    sample.weather = weather;
    if (weather == Weather::kClear || !sample.lidar.has_value()) return sample;
    Frame& lidar = *sample.lidar;
    const int G = lidar.height;
    const int occ_channels = lidar.channels - 1;

    if (weather == Weather::kFog) {
        const double range = params.fog_range_factor * params.lidar_range_eff();
        for (int y = 0; y < G; ++y)
            for (int x = 0; x < G; ++x) {
                const double dx = x + 0.5 - params.ego_x();
                const double dy = y + 0.5 - params.ego_y();
                if (std::sqrt(dx * dx + dy * dy) > range)
                    for (int c = 0; c < lidar.channels; ++c) lidar.at(c, y, x) = 0.0;
            }
        return sample;
    }

    // Rain and snow: scattered high-intensity returns near the sensor.
    const double rate = weather == Weather::kRain ? params.rain_rate_mmh : params.snow_rate_mmh;
    const double coeff =
        weather == Weather::kRain ? params.rain_clutter_per_mmh : params.snow_clutter_per_mmh;
    const double area_scale = (params.grid / 64.0) * (params.grid / 64.0);
    const int count = static_cast<int>(std::lround(rate * coeff * area_scale));
    const double radius = params.weather_clutter_radius_frac * params.grid;
    Rng rng(derive_seed(seed, "weather-clutter"));
    for (int i = 0; i < count; ++i) {
        const double ang = rng.uniform(0.0, 2.0 * M_PI);
        const double r = radius * std::sqrt(rng.next_double());
        const int x = static_cast<int>(params.ego_x() + r * std::cos(ang));
        const int y = static_cast<int>(params.ego_y() + r * std::sin(ang));
        if (x < 0 || x >= G || y < 0 || y >= G) continue;
        const int c = static_cast<int>(rng.uniform_int(0, occ_channels - 1));
        const double hit = rng.uniform(0.5, 1.0);
        lidar.at(c, y, x) = std::max(lidar.at(c, y, x), hit);
        lidar.at(occ_channels, y, x) = std::max(lidar.at(occ_channels, y, x), hit);
    }
    return sample;
}

Sample drop_annotations(Sample sample, double keep_ratio, std::uint64_t seed) {
    if (keep_ratio < 0.0 || keep_ratio > 1.0) throw ConfigError("keep_ratio outside [0,1]");
    Rng rng(derive_seed(seed, "drop-anno"));
    for (auto& a : sample.annotations) a.kept = rng.bernoulli(keep_ratio);
    return sample;
}

Sample drop_annotations_per_sample(Sample sample, double keep_ratio, std::uint64_t seed) {
    if (keep_ratio < 0.0 || keep_ratio > 1.0) throw ConfigError("keep_ratio outside [0,1]");
    Rng rng(derive_seed(seed, "drop-anno-sample"));
    const bool kept = rng.bernoulli(keep_ratio);
    for (auto& a : sample.annotations) a.kept = kept;
    return sample;
}

Sample drop_modality(Sample sample, const ModalityPolicy& policy, std::uint64_t seed) {
    if (policy.drop_lidar < 0.0 || policy.drop_radar < 0.0 ||
        policy.drop_lidar + policy.drop_radar > 1.0)
        throw ConfigError("modality drop probabilities must be nonnegative and sum to <= 1");
    if (policy.drop_lidar == 0.0 && policy.drop_radar == 0.0) return sample;
    Rng rng(derive_seed(seed, "drop-modal"));
    const double u = rng.next_double();
    if (u < policy.drop_lidar) {
        if (!sample.has_radar())
            throw InputError("modality policy would remove the only present modality (lidar)");
        sample.lidar.reset();
    } else if (u < policy.drop_lidar + policy.drop_radar) {
        if (!sample.has_lidar())
            throw InputError("modality policy would remove the only present modality (radar)");
        sample.radar.reset();
    }
    return sample;
}

// ------------------------------------------------------------------- datasets

Sample make_complete_sample(std::uint64_t id, std::uint64_t seed, const SceneParams& params) {
    const Scene scene = generate_scene(seed, params);
    Sample s;
    s.id = id;
    s.lidar = render_lidar(scene, params);
    s.radar = render_radar(scene, params);
    s.weather = Weather::kClear;
    for (const auto& v : scene.vehicles) s.annotations.push_back({v.box, true});
    return s;
}

namespace {

Weather sample_weather(const std::array<double, 4>& probs, Rng& rng) {
    double total = 0.0;
    for (double p : probs) {
        if (p < 0.0) throw ConfigError("negative weather probability");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("weather probabilities must sum to 1");
    const double u = rng.next_double();
    double acc = 0.0;
    for (int i = 0; i < 4; ++i) {
        acc += probs[static_cast<std::size_t>(i)];
        if (u < acc) return static_cast<Weather>(i);
    }
    return Weather::kClear;
}

}  // namespace

std::vector<ClientDataset> build_client_datasets(const std::vector<ClientProfile>& profiles,
                                                 std::uint64_t global_seed,
                                                 const SceneParams& params) {
    std::vector<ClientDataset> out;
    out.reserve(profiles.size());
    for (const auto& profile : profiles) {
        if (profile.sample_count <= 0) throw ConfigError("client sample count must be positive");
        if (profile.keep_ratio <= 0.0 || profile.keep_ratio > 1.0)
            throw ConfigError("client keep ratio must lie in (0,1]");
        ClientDataset ds;
        ds.profile = profile;
        ds.profile.seed = derive_seed(global_seed, "client", static_cast<std::uint64_t>(profile.id));
        Rng weather_rng(derive_seed(ds.profile.seed, "weather-mix"));
        for (int i = 0; i < profile.sample_count; ++i) {
            const std::uint64_t sid =
                (static_cast<std::uint64_t>(profile.id) << 32) | static_cast<std::uint64_t>(i);
            const std::uint64_t sseed =
                derive_seed(global_seed, "sample", static_cast<std::uint64_t>(profile.id),
                            static_cast<std::uint64_t>(i));
            Sample s = make_complete_sample(sid, sseed, params);
            const Weather w = sample_weather(profile.weather_probs, weather_rng);
            s = apply_weather(std::move(s), w, derive_seed(sseed, "weather"), params);
            if (profile.annotation_mode == AnnotationMode::kPerBox) {
                s = drop_annotations(std::move(s), profile.keep_ratio, derive_seed(sseed, "anno"));
            } else {
                s = drop_annotations_per_sample(std::move(s), profile.keep_ratio,
                                                derive_seed(sseed, "anno"));
            }
            s = drop_modality(std::move(s), profile.modality, derive_seed(sseed, "modal"));
            ds.samples.push_back(std::move(s));
        }
        out.push_back(std::move(ds));
    }
    return out;
}

std::vector<Sample> build_eval_dataset(int count, std::uint64_t global_seed,
                                       const SceneParams& params) {
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const std::uint64_t id = (1ULL << 63) | static_cast<std::uint64_t>(i);
        out.push_back(make_complete_sample(
            id, derive_seed(global_seed, "eval", static_cast<std::uint64_t>(i)), params));
    }
    return out;
}

std::vector<Sample> build_pretrain_dataset(int count, std::uint64_t global_seed,
                                           const SceneParams& params) {
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const std::uint64_t id = (1ULL << 62) | static_cast<std::uint64_t>(i);
        out.push_back(make_complete_sample(
            id, derive_seed(global_seed, "pretrain", static_cast<std::uint64_t>(i)), params));
    }
    return out;
}

std::uint64_t annotations_hash(const Sample& sample) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& a : sample.annotations) {
        const double fields[5] = {a.box.cx, a.box.cy, a.box.length, a.box.width, a.box.angle_deg};
        h = fnv1a64(fields, sizeof fields, h);
        const std::uint8_t fwd = a.box.forward ? 1 : 0;
        h = fnv1a64(&fwd, 1, h);
    }
    return h;
}

// ---------------------------------------------------------------- persistence

namespace {

constexpr std::uint32_t kDatasetMagic = 0x53444641;  // "AFDS"

void encode_frame(ByteWriter& w, const Frame& f) {
    w.put_u32(static_cast<std::uint32_t>(f.channels));
    w.put_u32(static_cast<std::uint32_t>(f.height));
    w.put_u32(static_cast<std::uint32_t>(f.width));
    for (double v : f.data) w.put_f64(v);
}

Frame decode_frame(ByteReader& r) {
    Frame f;
    f.channels = static_cast<int>(r.get_u32());
    f.height = static_cast<int>(r.get_u32());
    f.width = static_cast<int>(r.get_u32());
    const std::size_t n = static_cast<std::size_t>(f.channels) * f.height * f.width;
    f.data.resize(n);
    for (auto& v : f.data) v = r.get_f64();
    return f;
}

std::string encode_sample(const Sample& s) {
    ByteWriter w;
    w.put_u64(s.id);
    w.put_u8(static_cast<std::uint8_t>(s.weather));
    std::uint8_t flags = 0;
    if (s.has_lidar()) flags |= 1;
    if (s.has_radar()) flags |= 2;
    if (s.lidar_imputed) flags |= 4;
    if (s.radar_imputed) flags |= 8;
    w.put_u8(flags);
    if (s.has_lidar()) encode_frame(w, *s.lidar);
    if (s.has_radar()) encode_frame(w, *s.radar);
    w.put_u32(static_cast<std::uint32_t>(s.annotations.size()));
    for (const auto& a : s.annotations) {
        w.put_f64(a.box.cx);
        w.put_f64(a.box.cy);
        w.put_f64(a.box.length);
        w.put_f64(a.box.width);
        w.put_f64(a.box.angle_deg);
        w.put_u8(a.box.forward ? 1 : 0);
        w.put_u8(a.kept ? 1 : 0);
    }
    return w.bytes();
}

Sample decode_sample(const std::string& bytes) {
    ByteReader r(bytes);
    Sample s;
    s.id = r.get_u64();
    s.weather = static_cast<Weather>(r.get_u8());
    const std::uint8_t flags = r.get_u8();
    s.lidar_imputed = flags & 4;
    s.radar_imputed = flags & 8;
    if (flags & 1) s.lidar = decode_frame(r);
    if (flags & 2) s.radar = decode_frame(r);
    const auto n = r.get_u32();
    s.annotations.resize(n);
    for (auto& a : s.annotations) {
        a.box.cx = r.get_f64();
        a.box.cy = r.get_f64();
        a.box.length = r.get_f64();
        a.box.width = r.get_f64();
        a.box.angle_deg = r.get_f64();
        a.box.forward = r.get_u8() != 0;
        a.kept = r.get_u8() != 0;
    }
    return s;
}

}  // namespace

std::string encode_dataset(const DatasetFile& file) {
    ByteWriter w;
    w.put_u32(kDatasetMagic);
    w.put_u32(file.version);
    w.put_u32(file.grid);
    w.put_u32(file.lidar_channels);
    w.put_u64(file.seed);
    w.put_u64(file.client_id);
    w.put_u64(file.samples.size());
    for (const auto& s : file.samples) {
        const std::string blob = encode_sample(s);
        w.put_u64(blob.size());
        w.put_bytes(blob.data(), blob.size());
    }
    return w.bytes();
}

DatasetFile decode_dataset(const std::string& bytes) {
    ByteReader r(bytes);
    if (r.get_u32() != kDatasetMagic) throw IoError("not a dataset file");
    DatasetFile f;
    f.version = r.get_u32();
    if (f.version != 1) throw IoError("unsupported dataset version " + std::to_string(f.version));
    f.grid = r.get_u32();
    f.lidar_channels = r.get_u32();
    f.seed = r.get_u64();
    f.client_id = r.get_u64();
    const auto count = r.get_u64();
    f.samples.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = r.get_u64();
        std::string blob(len, '\0');
        for (auto& ch : blob) ch = static_cast<char>(r.get_u8());
        f.samples.push_back(decode_sample(blob));
    }
    return f;
}

void save_dataset(const std::string& path, const DatasetFile& file) {
    write_file_atomic(path, encode_dataset(file));
}

DatasetFile load_dataset(const std::string& path) { return decode_dataset(read_file(path)); }

std::size_t sample_serialized_size(const Sample& s) {
    std::size_t n = 8 + 1 + 1 + 4;  // id, weather, flags, annotation count
    if (s.has_lidar())
        n += 12 + 8 * static_cast<std::size_t>(s.lidar->channels) * s.lidar->height * s.lidar->width;
    if (s.has_radar())
        n += 12 + 8 * static_cast<std::size_t>(s.radar->channels) * s.radar->height * s.radar->width;
    n += s.annotations.size() * (5 * 8 + 2);
    return n;
}

}  // namespace autofed
