#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "papc/camera_geometry.hpp"
#include "papc/dynamics_track.hpp"
#include "papc/mpc_expert.hpp"
#include "papc/neural.hpp"

namespace papc {

struct TrackConfig {
    std::string file;  // when set, overrides the generated oval
    double straight_length = 20.0;
    double radius = 6.0;
    double half_width = 3.0;
    double spacing = 1.0;
};

struct CameraConfig {
    CameraIntrinsics intrinsics;
    double height = 0.3;           // meters above ground
    double mount_pitch_deg = -5.0; // camera tilt, degrees (down is negative)

    double mount_pitch_rad() const;
};

struct SplineConfig {
    int n_ctrl = 4;
    int degree = 3;
    int n_focal = 4;
};

struct RoiConfig {
    double margin = 8.0;  // pixels
};

struct DatasetConfig {
    int n_frames = 5000;
    double max_skip_fraction = 0.1;
};

struct MpnetConfig {
    TrainConfig train;
    int channels1 = 8;
    int channels2 = 16;
    int channels3 = 16;
    int dense_units = 64;
};

struct MaculaConfig {
    TrainConfig train;
    int channels1 = 8;
    int channels2 = 16;
    int dense_units = 64;
    double dropout_p = 0.1;
};

struct BaselineConfig {
    TrainConfig train;
    int channels1 = 8;
    int channels2 = 16;
    int dense_units = 64;
    double dropout_p = 0.1;
};

struct InferenceConfig {
    int n_mc = 25;
    double threshold_multiplier = 5.0;  // k_thr, [3,10] unless overridden
    int calibration_steps = 300;        // obstacle-free steps for threshold calibration
    int inference_every = 2;            // perception every Nth dynamics step (20 Hz)
};

struct EpisodeConfig {
    int max_steps = 600;
    double obstacle_arc = 12.0;  // obstacle center this far along the track from start
    int obstacle_index = 0;      // which novel obstacle `evaluate` uses
    int n_trials = 10;           // per obstacle in `compare`
};

struct RunConfig {
    std::uint64_t seed = 0;
    TrackConfig track;
    CameraConfig camera;
    OcpSpec mpc;
    SplineConfig spline;
    RoiConfig roi;
    DatasetConfig dataset;
    MpnetConfig mpnet;
    MaculaConfig macula;
    BaselineConfig baseline;
    InferenceConfig inference;
    EpisodeConfig episode;
    std::vector<std::string> obstacle_files;  // empty = built-in novel trio

    void validate() const;
    void apply_quick_profile();

    Track make_track() const;
    /// Novel obstacles for evaluation, loaded from files or the built-in trio.
    std::vector<Obstacle> novel_obstacles() const;
    NetworkSpec mpnet_spec() const;
    NetworkSpec macula_spec() const;
    NetworkSpec baseline_spec() const;
};

/// Effective-config dump; re-parsing reproduces the struct exactly.
std::string run_config_to_json(const RunConfig& cfg);
/// Strict parse: unknown keys and out-of-range values raise ConfigError with
/// the full key path. "seed" is the one required key.
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);

}  // namespace papc
