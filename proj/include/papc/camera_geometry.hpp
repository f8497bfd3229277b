#pragma once

#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "papc/common.hpp"
#include "papc/dynamics_track.hpp"

namespace papc {

/// 6-DOF camera pose: world position plus the Euler angles fed to
/// rotation_matrix (rotation order R_W * R_V * R_U).
struct CameraPose {
    double pos_u = 0.0;
    double pos_v = 0.0;
    double pos_w = 0.0;  // height, meters
    double roll = 0.0;   // about U
    double pitch = 0.0;  // about V
    double yaw = 0.0;    // about W
};

struct CameraIntrinsics {
    double focal_length = 64.0;  // pixels
    double offset_x = 32.0;      // pixels, row offset (default h/2)
    double offset_y = 64.0;      // pixels, column offset (default w/2)
    int image_h = 64;
    int image_w = 128;
    double z_near = 0.05;  // meters

    void validate() const;
};

/// Point in the bottom-center pixel frame: u horizontal (+ left of center),
/// v vertical (+ up from the bottom edge). May lie outside image bounds.
struct PixelPoint {
    double u = 0.0;
    double v = 0.0;
};

/// Same point in top-left image indexing (col from left, row from top).
struct ImagePoint {
    double col = 0.0;
    double row = 0.0;
};

inline ImagePoint to_image_frame(const PixelPoint& p, const CameraIntrinsics& intr) {
    return {intr.image_w / 2.0 - p.u, intr.image_h - p.v};
}
inline PixelPoint to_bottom_center(const ImagePoint& p, const CameraIntrinsics& intr) {
    return {intr.image_w / 2.0 - p.col, intr.image_h - p.row};
}

/// Product R_W(yaw) * R_V(pitch) * R_U(roll) of the three axis rotations.
Eigen::Matrix3d rotation_matrix(double roll, double pitch, double yaw);

/// World point -> camera coordinates (X left, Y up, Z optic/forward):
/// translation by -camera position, rotation_matrix, then the robot-to-camera
/// axis permutation.
Eigen::Vector3d world_to_camera(const Eigen::Vector3d& point, const CameraPose& pose);

/// Full chain world -> bottom-center pixel frame. Throws BehindCameraError
/// when the camera-frame depth Z <= z_near.
PixelPoint project_to_pixel(const Eigen::Vector3d& point, const CameraPose& pose,
                            const CameraIntrinsics& intr);

/// Pose of a camera rigidly mounted at the vehicle position (configured
/// height, downward mount pitch). Decomposes the desired world-to-robot
/// rotation into the R_W*R_V*R_U angle convention so the horizon stays level
/// for any heading.
CameraPose mount_pose(const VehicleState& state, double height, double mount_pitch);

/// Project planned future positions (at ground level) through the camera pose
/// of the trajectory's first state. Points with depth <= z_near are dropped;
/// fewer than 2 surviving points is an error.
std::vector<PixelPoint> project_trajectory(
    const std::vector<VehicleState>& states,
    const std::function<CameraPose(const VehicleState&)>& pose_of,
    const CameraIntrinsics& intr);

}  // namespace papc
