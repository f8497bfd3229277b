#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "papc/config.hpp"
#include "papc/mpc_expert.hpp"
#include "papc/neural.hpp"
#include "papc/renderer.hpp"
#include "papc/roi_attention.hpp"
#include "papc/spline.hpp"

namespace papc {

/// One supervised sample: camera image, expert plan, and its pixel-space
/// spline target.
struct Frame {
    Image image;
    VehicleState vehicle_state;
    PlannedTrajectory planned;
    PixelSpline spline_target;
    ControlInput expert_control;
};

struct Dataset {
    std::vector<Frame> frames;
};

// --- tensor bridges -------------------------------------------------------

Tensor image_to_tensor(const Image& img);              // (h,w,3), /255
Tensor downsample_half_tensor(const Image& img);       // (h/2,w/2,3) box average, /255
Tensor roi_stack_to_tensor(const RoiStack& stack);     // (n,32,32,3)

/// Camera pose for a vehicle state under the configured mount.
CameraPose camera_pose_for(const RunConfig& cfg, const VehicleState& state);

/// Centerline state at arc length s, displaced laterally (+ = left).
VehicleState state_on_track_offset(const Track& track, double s, double lateral, double speed);

// --- dataset --------------------------------------------------------------

struct GenerateResult {
    int requested = 0;
    int generated = 0;
    int skipped = 0;
};

/// Expert-driven obstacle-free dataset: index.jsonl + frames/img_*.ppm +
/// frames/traj_*.bin (projected trajectory blobs). Over 10% skipped frames is
/// a DatasetError.
GenerateResult generate_dataset(const RunConfig& cfg, const std::string& out_dir);
Dataset load_dataset(const std::string& dir);

// --- training -------------------------------------------------------------

enum class MpnetVariant { kSpline, kDirect };

struct MpnetTrainResult {
    std::vector<double> epoch_losses;   // mean per-sample training loss
    double train_coeff_mse = 0.0;       // output-space MSE
    double test_coeff_mse = 0.0;
    double train_pixel_mse = 0.0;       // mean squared focal-point distance, px^2
    double test_pixel_mse = 0.0;
    int n_train = 0;
    int n_test = 0;
};

/// Regress spline coefficients (or, for the direct variant, the focal points
/// themselves) from images; 90/10 train/test split by seeded shuffle.
MpnetTrainResult train_mpnet(Network& net, const Dataset& data, const RunConfig& cfg,
                             MpnetVariant variant = MpnetVariant::kSpline);

/// Ground-truth focal points of a frame (sampled from its spline target).
std::vector<PixelPoint> frame_focal_points(const Frame& frame, const RunConfig& cfg);

/// Attention front end at inference time: MP-Net prediction -> focal points ->
/// ROI stack. Degenerate predictions fall back to n_focal fovea tiles.
RoiStack rois_from_prediction(const Network& mpnet, const Image& img, const RunConfig& cfg);

struct BayesTrainResult {
    std::vector<double> epoch_losses;
    double final_mae = 0.0;  // |mu - expert steering| over the training set
};

BayesTrainResult train_macula(Network& net, const Network& mpnet, const Dataset& data,
                              const RunConfig& cfg);
BayesTrainResult train_baseline(Network& net, const Dataset& data, const RunConfig& cfg);

// --- evaluation -----------------------------------------------------------

using PerceiveFn = std::function<ControlDistribution(const Image&, std::uint64_t)>;

PerceiveFn make_papc_perceiver(const Network& macula, const Network& mpnet, const RunConfig& cfg);
PerceiveFn make_baseline_perceiver(const Network& baseline, const RunConfig& cfg);

struct DetectionEvent {
    int frame_index = 0;
    double epistemic_var = 0.0;
    double threshold = 0.0;
    double distance_to_obstacle = -1.0;  // -1 when the scene has no obstacle
    bool detected = false;
};

struct EpisodeResult {
    std::vector<DetectionEvent> events;  // one per inference step
    std::vector<double> times;           // timestamps parallel to events
    std::vector<double> aleatoric;       // parallel to events
    bool detected = false;
    double detection_distance = 0.0;     // 0 when never detected
    int detection_frame = -1;
    double max_epistemic = 0.0;
    bool left_track = false;
    bool collided = false;
    VehicleState final_state;
};

/// Closed-loop learner-driven episode with the epistemic gate; ends at the
/// first detection (emergency stop) or after max_steps dynamics steps.
EpisodeResult run_episode(const RunConfig& cfg, const Track& track,
                          const std::vector<Obstacle>& obstacles, const VehicleState& start,
                          const PerceiveFn& perceive, double threshold, int max_steps,
                          std::uint64_t seed);

void write_episode_csv(const EpisodeResult& episode, const std::string& path);

struct Calibration {
    double threshold = 0.0;
    double max_epistemic = 0.0;
    int n_points = 0;
};

/// k_thr x max nominal epistemic variance over an obstacle-free episode.
Calibration calibrate_threshold(const RunConfig& cfg, const Track& track,
                                const PerceiveFn& perceive);

struct MethodStats {
    std::vector<double> distances;  // per trial; 0 = never detected
    double min_d = 0.0, avg_d = 0.0, max_d = 0.0, median_d = 0.0;
};

struct CompareOutcome {
    std::vector<std::string> obstacle_names;
    std::vector<MethodStats> papc;      // per obstacle
    std::vector<MethodStats> baseline;  // per obstacle
    int papc_false_positives = 0;       // over the obstacle-free trials
    int obstacle_free_trials = 0;
};

/// Table-1-shaped comparison: n_trials per obstacle per method plus an
/// obstacle-free false-positive sweep; trials fan out over PAPC_THREADS
/// workers with index-ordered merge.
CompareOutcome compare_methods(const RunConfig& cfg, const Track& track, const PerceiveFn& papc,
                               double papc_threshold, const PerceiveFn& baseline,
                               double baseline_threshold);

std::string compare_outcome_to_json(const CompareOutcome& outcome, const RunConfig& cfg);

/// Channel-mean activations after the first two maxpool3d layers, one
/// grayscale PPM per ROI slice; returns the written paths.
std::vector<std::string> dump_activation_maps(const Network& macula, const Tensor& roi_input,
                                              const std::string& out_dir);

double median_of(std::vector<double> values);

}  // namespace papc
