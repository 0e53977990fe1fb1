#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "autofed/geometry.hpp"
#include "autofed/rng.hpp"

namespace autofed {

enum class Weather : std::uint8_t { kClear = 0, kFog = 1, kRain = 2, kSnow = 3 };

const char* weather_name(Weather w);

// Channelized bird's-eye frame: for lidar, channels 0..C-2 are occupancy
// height slices in [0,1] and the last channel is intensity; radar is a single
// intensity channel.
struct Frame {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    static Frame zeros(int c, int h, int w) {
        return Frame{c, h, w, std::vector<double>(static_cast<std::size_t>(c) * h * w, 0.0)};
    }
    double& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

struct SceneParams {
    int grid = 64;
    int lidar_channels = 4;  // occupancy slices + 1 intensity
    int vehicle_min = 1;
    int vehicle_max = 4;
    double vehicle_length_min = 9.0;
    double vehicle_length_max = 13.0;
    double vehicle_aspect = 2.5;
    int clutter_min = 2;
    int clutter_max = 5;
    double lidar_range = 0.0;  // 0 resolves to 0.42 * grid
    double lidar_d0 = 0.0;     // 0 resolves to grid / 4
    double radar_range = 0.0;  // 0 resolves to 0.78 * grid
    double radar_d0 = 0.0;     // 0 resolves to grid / 2
    double radar_speckle = 0.1;
    double radar_floor = 0.02;
    double overlap_iou_max = 0.05;
    double margin_frac = 0.12;
    int max_place_tries = 200;
    double fog_range_factor = 0.5;
    double rain_rate_mmh = 30.0;
    double snow_rate_mmh = 30.0;
    double rain_clutter_per_mmh = 0.4;  // clutter cells per mm/h, scaled by (grid/64)^2
    double snow_clutter_per_mmh = 0.6;
    double weather_clutter_radius_frac = 0.3;

    double lidar_range_eff() const { return lidar_range > 0.0 ? lidar_range : 0.42 * grid; }
    double lidar_d0_eff() const { return lidar_d0 > 0.0 ? lidar_d0 : grid / 4.0; }
    double radar_range_eff() const { return radar_range > 0.0 ? radar_range : 0.78 * grid; }
    double radar_d0_eff() const { return radar_d0 > 0.0 ? radar_d0 : grid / 2.0; }
    double ego_x() const { return grid / 2.0; }
    double ego_y() const { return grid / 2.0; }
};

// One placed object: footprint box plus its per-channel occupancy template
// and sensor gains. Clutter objects share the representation but are never
// annotated.
struct SceneObject {
    RotatedBox box;
    std::vector<double> occupancy;  // one value per occupancy channel
    double lidar_gain = 1.0;
    double radar_gain = 1.0;
};

struct Scene {
    int grid = 0;
    std::uint64_t seed = 0;
    std::vector<SceneObject> vehicles;
    std::vector<SceneObject> clutter;
};

struct Annotation {
    RotatedBox box;
    bool kept = true;
};

struct Sample {
    std::uint64_t id = 0;
    std::optional<Frame> lidar;
    std::optional<Frame> radar;
    bool lidar_imputed = false;
    bool radar_imputed = false;
    Weather weather = Weather::kClear;
    std::vector<Annotation> annotations;  // full ground truth; kept flags mark the training subset

    bool has_lidar() const { return lidar.has_value(); }
    bool has_radar() const { return radar.has_value(); }
    std::vector<RotatedBox> ground_truth() const;
    std::vector<RotatedBox> kept_boxes() const;
};

// Fraction of samples dropped per modality; a single draw decides, so a
// sample never loses both.
struct ModalityPolicy {
    double drop_lidar = 0.0;
    double drop_radar = 0.0;
};

enum class AnnotationMode : std::uint8_t { kPerBox = 0, kPerSample = 1 };

struct ClientProfile {
    int id = 0;
    double keep_ratio = 1.0;
    AnnotationMode annotation_mode = AnnotationMode::kPerBox;
    ModalityPolicy modality;
    // clear/fog/rain/snow probabilities; must sum to 1.
    std::array<double, 4> weather_probs = {1.0, 0.0, 0.0, 0.0};
    int sample_count = 0;
    std::uint64_t seed = 0;
};

struct ClientDataset {
    ClientProfile profile;
    std::vector<Sample> samples;
};

// ---- generators (pure functions of inputs and seed) ----
Scene generate_scene(std::uint64_t seed, const SceneParams& params);
Frame render_lidar(const Scene& scene, const SceneParams& params);
Frame render_radar(const Scene& scene, const SceneParams& params);
Sample apply_weather(Sample sample, Weather weather, std::uint64_t seed, const SceneParams& params);
Sample drop_annotations(Sample sample, double keep_ratio, std::uint64_t seed);
Sample drop_annotations_per_sample(Sample sample, double keep_ratio, std::uint64_t seed);
Sample drop_modality(Sample sample, const ModalityPolicy& policy, std::uint64_t seed);

// Fully rendered clear-weather sample with complete annotations.
Sample make_complete_sample(std::uint64_t id, std::uint64_t seed, const SceneParams& params);

std::vector<ClientDataset> build_client_datasets(const std::vector<ClientProfile>& profiles,
                                                 std::uint64_t global_seed,
                                                 const SceneParams& params);
// Complete clear samples for evaluation; ids live in a reserved range.
std::vector<Sample> build_eval_dataset(int count, std::uint64_t global_seed,
                                       const SceneParams& params);
// Complete paired samples for translator pretraining; ids disjoint from both
// client and eval ranges.
std::vector<Sample> build_pretrain_dataset(int count, std::uint64_t global_seed,
                                           const SceneParams& params);

// Hash over the full annotation geometry (kept flags excluded).
std::uint64_t annotations_hash(const Sample& sample);

// ---- persistence (little-endian, versioned, byte-stable) ----
struct DatasetFile {
    std::uint32_t version = 1;
    std::uint32_t grid = 0;
    std::uint32_t lidar_channels = 0;
    std::uint64_t seed = 0;
    std::uint64_t client_id = 0;
    std::vector<Sample> samples;
};

std::string encode_dataset(const DatasetFile& file);
DatasetFile decode_dataset(const std::string& bytes);
void save_dataset(const std::string& path, const DatasetFile& file);
DatasetFile load_dataset(const std::string& path);

std::size_t sample_serialized_size(const Sample& sample);

}  // namespace autofed
