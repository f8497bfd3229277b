#include "papc/dynamics_track.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

namespace papc {

using json = nlohmann::json;

bool VehicleState::finite() const {
    return std::isfinite(pos_u) && std::isfinite(pos_v) && std::isfinite(heading) &&
           std::isfinite(speed) && std::isfinite(timestamp);
}

bool ControlInput::finite() const {
    return std::isfinite(steering) && std::isfinite(throttle);
}

namespace {

struct Deriv {
    double du, dv, dheading, dspeed;
};

Deriv bicycle_rhs(const BicycleParams& p, double heading, double speed,
                  const ControlInput& c) {
    return {speed * std::cos(heading), speed * std::sin(heading),
            speed * std::tan(c.steering) / p.wheelbase,
            c.throttle - p.drag * speed};
}

}  // namespace

VehicleState step_dynamics(const BicycleParams& params, const VehicleState& state,
                           const ControlInput& control, double dt) {
    if (!state.finite() || !control.finite())
        throw DomainError("step_dynamics: non-finite state or control");
    if (!(dt > 0.0)) throw DomainError("step_dynamics: dt must be > 0");
    if (std::abs(control.steering) > params.steer_max + 1e-12 ||
        std::abs(control.throttle) > params.accel_max + 1e-12)
        throw DomainError("step_dynamics: control outside bounds");

    auto rhs = [&](double h, double s) { return bicycle_rhs(params, h, s, control); };

    const Deriv k1 = rhs(state.heading, state.speed);
    const Deriv k2 = rhs(state.heading + 0.5 * dt * k1.dheading, state.speed + 0.5 * dt * k1.dspeed);
    const Deriv k3 = rhs(state.heading + 0.5 * dt * k2.dheading, state.speed + 0.5 * dt * k2.dspeed);
    const Deriv k4 = rhs(state.heading + dt * k3.dheading, state.speed + dt * k3.dspeed);

    VehicleState next;
    next.pos_u = state.pos_u + dt / 6.0 * (k1.du + 2.0 * k2.du + 2.0 * k3.du + k4.du);
    next.pos_v = state.pos_v + dt / 6.0 * (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv);
    next.heading = wrap_angle(state.heading +
                              dt / 6.0 * (k1.dheading + 2.0 * k2.dheading + 2.0 * k3.dheading + k4.dheading));
    next.speed = std::max(0.0, state.speed +
                                   dt / 6.0 * (k1.dspeed + 2.0 * k2.dspeed + 2.0 * k3.dspeed + k4.dspeed));
    next.timestamp = state.timestamp + dt;
    return next;
}

void Track::validate() const {
    if (centerline.size() < 4) throw DomainError("track: need at least 4 waypoints");
    for (std::size_t i = 0; i + 1 < centerline.size(); ++i) {
        if (centerline[i] == centerline[i + 1])
            throw DomainError("track: consecutive waypoints must be distinct");
    }
    if (closed && centerline.front() == centerline.back())
        throw DomainError("track: closed track must not repeat the first waypoint");
    if (!(half_width > 0.0)) throw DomainError("track: half_width must be > 0");
}

std::size_t Track::segment_count() const {
    return closed ? centerline.size() : centerline.size() - 1;
}

namespace {

std::array<double, 2> seg_delta(const Track& t, std::size_t i) {
    const auto& a = t.centerline[i];
    const auto& b = t.centerline[(i + 1) % t.centerline.size()];
    return {b[0] - a[0], b[1] - a[1]};
}

}  // namespace

double Track::total_length() const {
    double total = 0.0;
    for (std::size_t i = 0; i < segment_count(); ++i) {
        auto d = seg_delta(*this, i);
        total += std::hypot(d[0], d[1]);
    }
    return total;
}

std::array<double, 2> Track::point_at(double s) const {
    const double total = total_length();
    if (closed) {
        s = std::fmod(s, total);
        if (s < 0.0) s += total;
    } else {
        s = std::clamp(s, 0.0, total);
    }
    for (std::size_t i = 0; i < segment_count(); ++i) {
        auto d = seg_delta(*this, i);
        const double len = std::hypot(d[0], d[1]);
        if (s <= len || i + 1 == segment_count()) {
            const double t = std::clamp(s / len, 0.0, 1.0);
            return {centerline[i][0] + t * d[0], centerline[i][1] + t * d[1]};
        }
        s -= len;
    }
    return centerline.back();
}

std::array<double, 2> Track::tangent_at(double s) const {
    const double total = total_length();
    if (closed) {
        s = std::fmod(s, total);
        if (s < 0.0) s += total;
    } else {
        s = std::clamp(s, 0.0, total);
    }
    for (std::size_t i = 0; i < segment_count(); ++i) {
        auto d = seg_delta(*this, i);
        const double len = std::hypot(d[0], d[1]);
        if (s <= len || i + 1 == segment_count()) {
            return {d[0] / len, d[1] / len};
        }
        s -= len;
    }
    auto d = seg_delta(*this, segment_count() - 1);
    const double len = std::hypot(d[0], d[1]);
    return {d[0] / len, d[1] / len};
}

TrackFrame track_frame(const Track& track, double pos_u, double pos_v) {
    track.validate();
    double best_dist2 = std::numeric_limits<double>::infinity();
    TrackFrame best;
    double arc_base = 0.0;
    for (std::size_t i = 0; i < track.segment_count(); ++i) {
        const auto& a = track.centerline[i];
        auto d = seg_delta(track, i);
        const double len2 = d[0] * d[0] + d[1] * d[1];
        const double len = std::sqrt(len2);
        double t = ((pos_u - a[0]) * d[0] + (pos_v - a[1]) * d[1]) / len2;
        t = std::clamp(t, 0.0, 1.0);
        const double qu = a[0] + t * d[0];
        const double qv = a[1] + t * d[1];
        const double dist2 = (pos_u - qu) * (pos_u - qu) + (pos_v - qv) * (pos_v - qv);
        if (dist2 < best_dist2) {
            best_dist2 = dist2;
            // signed by the cross product of the travel direction and the offset
            const double cross = (d[0] * (pos_v - qv) - d[1] * (pos_u - qu)) / len;
            best.lateral_offset = cross;
            best.arc_length = arc_base + t * len;
        }
        arc_base += len;
    }
    const double total = track.total_length();
    if (best.arc_length >= total) best.arc_length -= total;
    return best;
}

void Obstacle::validate() const {
    if (!(half_extent_u > 0.0) || !(half_extent_v > 0.0))
        throw DomainError("obstacle: footprint half-extents must be > 0");
    if (!(height > 0.0)) throw DomainError("obstacle: height must be > 0");
}

double distance_to_obstacle(const VehicleState& state, const Obstacle& obstacle) {
    const double du = std::max(std::abs(state.pos_u - obstacle.center_u) - obstacle.half_extent_u, 0.0);
    const double dv = std::max(std::abs(state.pos_v - obstacle.center_v) - obstacle.half_extent_v, 0.0);
    return std::hypot(du, dv);
}

Track make_oval_track(double straight_length, double radius, double half_width,
                      double spacing) {
    Track t;
    t.half_width = half_width;
    t.closed = true;
    // Stadium centered at the origin: straights parallel to U at V = +/-radius,
    // traversed counterclockwise starting from (-L/2, -R).
    const double L = straight_length;
    const double R = radius;
    auto arc_points = [&](double cu, double cv, double a0, double a1) {
        const double arc_len = std::abs(a1 - a0) * R;
        const int n = std::max(2, static_cast<int>(std::ceil(arc_len / spacing)));
        for (int i = 0; i < n; ++i) {
            const double a = a0 + (a1 - a0) * i / n;
            t.centerline.push_back({cu + R * std::cos(a), cv + R * std::sin(a)});
        }
    };
    const int ns = std::max(2, static_cast<int>(std::ceil(L / spacing)));
    for (int i = 0; i < ns; ++i)
        t.centerline.push_back({-L / 2 + L * i / ns, -R});
    arc_points(L / 2, 0.0, -kPi / 2, kPi / 2);
    for (int i = 0; i < ns; ++i)
        t.centerline.push_back({L / 2 - L * i / ns, R});
    arc_points(-L / 2, 0.0, kPi / 2, 3 * kPi / 2);
    t.validate();
    return t;
}

Track make_straight_track(double length, double half_width, double spacing) {
    Track t;
    t.half_width = half_width;
    t.closed = false;
    const int n = std::max(4, static_cast<int>(std::ceil(length / spacing)) + 1);
    for (int i = 0; i < n; ++i)
        t.centerline.push_back({length * i / (n - 1), 0.0});
    t.validate();
    return t;
}

VehicleState state_on_track(const Track& track, double s, double speed) {
    auto p = track.point_at(s);
    auto d = track.tangent_at(s);
    VehicleState st;
    st.pos_u = p[0];
    st.pos_v = p[1];
    st.heading = std::atan2(d[1], d[0]);
    st.speed = speed;
    return st;
}

std::string track_to_json(const Track& track) {
    json j;
    j["half_width"] = track.half_width;
    j["closed"] = track.closed;
    j["centerline"] = json::array();
    for (const auto& w : track.centerline) j["centerline"].push_back({w[0], w[1]});
    return j.dump(2);
}

Track track_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("track: ") + e.what());
    }
    Track t;
    try {
        t.half_width = j.at("half_width").get<double>();
        t.closed = j.at("closed").get<bool>();
        for (const auto& w : j.at("centerline"))
            t.centerline.push_back({w.at(0).get<double>(), w.at(1).get<double>()});
    } catch (const json::exception& e) {
        throw ParseError(std::string("track: ") + e.what());
    }
    t.validate();
    return t;
}

std::string obstacles_to_json(const std::vector<Obstacle>& obstacles) {
    json j = json::array();
    for (const auto& o : obstacles) {
        j.push_back({{"center", {o.center_u, o.center_v}},
                     {"half_extents", {o.half_extent_u, o.half_extent_v}},
                     {"height", o.height},
                     {"color", {o.color[0], o.color[1], o.color[2]}},
                     {"novel", o.novel}});
    }
    return j.dump(2);
}

std::vector<Obstacle> obstacles_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("obstacles: ") + e.what());
    }
    std::vector<Obstacle> out;
    try {
        for (const auto& e : j) {
            Obstacle o;
            o.center_u = e.at("center").at(0).get<double>();
            o.center_v = e.at("center").at(1).get<double>();
            o.half_extent_u = e.at("half_extents").at(0).get<double>();
            o.half_extent_v = e.at("half_extents").at(1).get<double>();
            o.height = e.at("height").get<double>();
            o.color = {e.at("color").at(0).get<std::uint8_t>(),
                       e.at("color").at(1).get<std::uint8_t>(),
                       e.at("color").at(2).get<std::uint8_t>()};
            o.novel = e.at("novel").get<bool>();
            o.validate();
            out.push_back(o);
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("obstacles: ") + e.what());
    }
    return out;
}

}  // namespace papc
