#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "papc/common.hpp"

namespace papc {

/// Planar vehicle state. heading is wrapped to (-pi, pi], speed >= 0.
struct VehicleState {
    double pos_u = 0.0;      // meters, world U
    double pos_v = 0.0;      // meters, world V
    double heading = 0.0;    // radians, yaw
    double speed = 0.0;      // m/s, along heading
    double timestamp = 0.0;  // seconds

    bool finite() const;
};

struct ControlInput {
    double steering = 0.0;  // radians, front-wheel angle
    double throttle = 0.0;  // m/s^2, longitudinal acceleration

    bool finite() const;
};

/// Kinematic bicycle parameters plus control bounds.
struct BicycleParams {
    double wheelbase = 0.57;  // meters
    double steer_max = 0.5;   // radians
    double accel_max = 3.0;   // m/s^2
    double drag = 0.0;        // 1/s, linear speed damping
};

/// One RK4 step of the kinematic bicycle. Heading is wrapped and speed
/// clamped at zero after integration; timestamp advances by dt.
VehicleState step_dynamics(const BicycleParams& params, const VehicleState& state,
                           const ControlInput& control, double dt);

struct Track {
    std::vector<std::array<double, 2>> centerline;  // (U, V) waypoints, meters
    double half_width = 3.0;                        // meters
    bool closed = true;

    void validate() const;
    /// Number of polyline segments (includes the closing segment when closed).
    std::size_t segment_count() const;
    double total_length() const;
    /// Centerline point at arc length s (s taken modulo total length on
    /// closed tracks, clamped on open ones).
    std::array<double, 2> point_at(double s) const;
    /// Unit tangent of the segment containing arc length s.
    std::array<double, 2> tangent_at(double s) const;
};

struct TrackFrame {
    double arc_length = 0.0;      // meters, in [0, total_length)
    double lateral_offset = 0.0;  // meters, + left of travel direction
};

/// Project a world position onto the track centerline. Nearest-segment ties
/// break toward the lower segment index.
TrackFrame track_frame(const Track& track, double pos_u, double pos_v);

struct Obstacle {
    double center_u = 0.0;
    double center_v = 0.0;
    double half_extent_u = 0.5;  // meters, footprint half-size along U
    double half_extent_v = 0.5;  // meters, footprint half-size along V
    double height = 0.5;         // meters
    std::array<std::uint8_t, 3> color = {255, 0, 0};
    bool novel = false;

    void validate() const;
};

/// Euclidean distance from the vehicle position to the obstacle footprint
/// rectangle; zero when the position is inside it.
double distance_to_obstacle(const VehicleState& state, const Obstacle& obstacle);

/// Stadium-shaped closed track: two straights of the given length joined by
/// semicircular arcs of the given radius, waypoints ~spacing apart.
Track make_oval_track(double straight_length, double radius, double half_width,
                      double spacing = 1.0);

/// Open straight track along +U starting at the origin.
Track make_straight_track(double length, double half_width, double spacing = 1.0);

/// State on the centerline at arc length s, facing along the track.
VehicleState state_on_track(const Track& track, double s, double speed);

// JSON (de)serialization. Track files: {"half_width":..,"closed":..,"centerline":[[U,V],..]}.
std::string track_to_json(const Track& track);
Track track_from_json(const std::string& text);
std::string obstacles_to_json(const std::vector<Obstacle>& obstacles);
std::vector<Obstacle> obstacles_from_json(const std::string& text);

}  // namespace papc
