#include "papc/camera_geometry.hpp"

#include <cmath>

namespace papc {

void CameraIntrinsics::validate() const {
    if (!(focal_length > 0.0)) throw DomainError("intrinsics: focal_length must be > 0");
    if (image_h <= 0 || image_w <= 0) throw DomainError("intrinsics: image size must be > 0");
    if (!(z_near > 0.0)) throw DomainError("intrinsics: z_near must be > 0");
}

Eigen::Matrix3d rotation_matrix(double roll, double pitch, double yaw) {
    const double cf = std::cos(roll), sf = std::sin(roll);
    const double ct = std::cos(pitch), st = std::sin(pitch);
    const double cp = std::cos(yaw), sp = std::sin(yaw);
    Eigen::Matrix3d ru, rv, rw;
    ru << 1, 0, 0,
          0, cf, -sf,
          0, sf, cf;
    rv << ct, 0, st,
          0, 1, 0,
          -st, 0, ct;
    rw << cp, -sp, 0,
          sp, cp, 0,
          0, 0, 1;
    return rw * rv * ru;
}

Eigen::Vector3d world_to_camera(const Eigen::Vector3d& point, const CameraPose& pose) {
    const Eigen::Vector3d translated =
        point - Eigen::Vector3d(pose.pos_u, pose.pos_v, pose.pos_w);
    const Eigen::Vector3d robot = rotation_matrix(pose.roll, pose.pitch, pose.yaw) * translated;
    // robot (U fwd, V left, W up) -> camera (X left, Y up, Z forward)
    return {robot.y(), robot.z(), robot.x()};
}

PixelPoint project_to_pixel(const Eigen::Vector3d& point, const CameraPose& pose,
                            const CameraIntrinsics& intr) {
    const Eigen::Vector3d cam = world_to_camera(point, pose);
    if (cam.z() <= intr.z_near)
        throw BehindCameraError("project_to_pixel: depth " + std::to_string(cam.z()) +
                                " <= z_near " + std::to_string(intr.z_near));
    // film coordinates: u' is the row measured from the top, v' the column
    // measured from the left
    const double u_film = -intr.focal_length * cam.y() / cam.z() + intr.offset_x;
    const double v_film = -intr.focal_length * cam.x() / cam.z() + intr.offset_y;
    // [u, v] = [w/2, h] - [v', u']
    return {intr.image_w / 2.0 - v_film, intr.image_h - u_film};
}

CameraPose mount_pose(const VehicleState& state, double height, double mount_pitch) {
    // Desired world->robot rotation: yaw-align first, then pitch about the
    // vehicle's lateral axis: M = R_V(mount_pitch) * R_W(-heading).
    // Decompose M into R_W(yaw) * R_V(pitch) * R_U(roll).
    const double c = std::cos(mount_pitch), s = std::sin(mount_pitch);
    const double ch = std::cos(state.heading), sh = std::sin(state.heading);
    CameraPose pose;
    pose.pos_u = state.pos_u;
    pose.pos_v = state.pos_v;
    pose.pos_w = height;
    pose.pitch = std::asin(s * ch);
    pose.roll = std::atan2(-s * sh, c);
    pose.yaw = std::atan2(-sh, c * ch);
    return pose;
}

std::vector<PixelPoint> project_trajectory(
    const std::vector<VehicleState>& states,
    const std::function<CameraPose(const VehicleState&)>& pose_of,
    const CameraIntrinsics& intr) {
    if (states.size() < 2)
        throw GeometryError("project_trajectory: need at least 2 states");
    const CameraPose pose = pose_of(states.front());
    std::vector<PixelPoint> out;
    out.reserve(states.size());
    for (const auto& st : states) {
        try {
            out.push_back(project_to_pixel({st.pos_u, st.pos_v, 0.0}, pose, intr));
        } catch (const BehindCameraError&) {
            // clipped
        }
    }
    if (out.size() < 2)
        throw GeometryError("project_trajectory: fewer than 2 visible points");
    return out;
}

}  // namespace papc
