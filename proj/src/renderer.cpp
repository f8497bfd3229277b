#include "papc/renderer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/Dense>

namespace papc {

void Scene::validate() const {
    track.validate();
    for (const auto& o : obstacles) {
        o.validate();
        if (o.color == palette.road)
            throw DomainError("scene: obstacle color must differ from road color");
    }
    if (!(boundary_width >= 0.0)) throw DomainError("scene: boundary_width must be >= 0");
}

void Image::validate() const {
    if (height < 1 || width < 1) throw DomainError("image: non-positive dimensions");
    if (data.size() != static_cast<std::size_t>(height) * width * 3)
        throw DomainError("image: data size must be height*width*3");
}

std::uint8_t& Image::at(int row, int col, int channel) {
    return data[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
}

const std::uint8_t& Image::at(int row, int col, int channel) const {
    return data[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
}

Image make_image(int height, int width, std::array<std::uint8_t, 3> fill) {
    if (height < 1 || width < 1) throw DomainError("image: non-positive dimensions");
    Image img;
    img.height = height;
    img.width = width;
    img.data.resize(static_cast<std::size_t>(height) * width * 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = fill[i % 3];
    return img;
}

namespace {

/// Slab test against the obstacle's upright box; returns the camera-depth
/// parameter of the nearest hit (dir has unit forward component, so the ray
/// parameter equals camera-space depth), or +inf on miss.
double ray_box_hit(const Eigen::Vector3d& origin, const Eigen::Vector3d& dir,
                   const Obstacle& box) {
    const double lo[3] = {box.center_u - box.half_extent_u, box.center_v - box.half_extent_v, 0.0};
    const double hi[3] = {box.center_u + box.half_extent_u, box.center_v + box.half_extent_v,
                          box.height};
    double t_min = -std::numeric_limits<double>::infinity();
    double t_max = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (std::abs(dir(a)) < 1e-12) {
            if (origin(a) < lo[a] || origin(a) > hi[a])
                return std::numeric_limits<double>::infinity();
            continue;
        }
        double t1 = (lo[a] - origin(a)) / dir(a);
        double t2 = (hi[a] - origin(a)) / dir(a);
        if (t1 > t2) std::swap(t1, t2);
        t_min = std::max(t_min, t1);
        t_max = std::min(t_max, t2);
    }
    if (t_max < t_min) return std::numeric_limits<double>::infinity();
    if (t_min > 0.0) return t_min;
    if (t_max > 0.0) return t_max;  // camera inside the box
    return std::numeric_limits<double>::infinity();
}

}  // namespace

Image render(const Scene& scene, const CameraPose& pose, const CameraIntrinsics& intr) {
    scene.validate();
    intr.validate();

    Image img = make_image(intr.image_h, intr.image_w, scene.palette.background);
    const Eigen::Matrix3d rot_wt = rotation_matrix(pose.roll, pose.pitch, pose.yaw).transpose();
    const Eigen::Vector3d origin(pose.pos_u, pose.pos_v, pose.pos_w);
    const double road_edge = scene.track.half_width;
    const double paint_edge = scene.track.half_width + scene.boundary_width;

    for (int row = 0; row < intr.image_h; ++row) {
        for (int col = 0; col < intr.image_w; ++col) {
            // Invert the projection at the pixel center: film coords equal
            // image (row, col), camera ray has unit forward component.
            const double u_film = row + 0.5;
            const double v_film = col + 0.5;
            const Eigen::Vector3d cam_dir((intr.offset_y - v_film) / intr.focal_length,
                                          (intr.offset_x - u_film) / intr.focal_length, 1.0);
            const Eigen::Vector3d robot_dir(cam_dir.z(), cam_dir.x(), cam_dir.y());
            const Eigen::Vector3d dir = rot_wt * robot_dir;

            double best_t = std::numeric_limits<double>::infinity();
            std::array<std::uint8_t, 3> color = scene.palette.background;

            if (dir.z() < 0.0 && origin.z() > 0.0) {
                const double t_ground = -origin.z() / dir.z();
                if (t_ground > intr.z_near) {
                    best_t = t_ground;
                    const double gu = origin.x() + t_ground * dir.x();
                    const double gv = origin.y() + t_ground * dir.y();
                    const TrackFrame frame = track_frame(scene.track, gu, gv);
                    const double off = std::abs(frame.lateral_offset);
                    if (off <= road_edge)
                        color = scene.palette.road;
                    else if (off <= paint_edge)
                        color = scene.palette.boundary;
                }
            }
            for (const auto& box : scene.obstacles) {
                const double t = ray_box_hit(origin, dir, box);
                if (t > intr.z_near && t < best_t) {
                    best_t = t;
                    color = box.color;
                }
            }
            for (int c = 0; c < 3; ++c) img.at(row, col, c) = color[c];
        }
    }
    return img;
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
    img.validate();
    const std::string header =
        "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.data.begin(), img.data.end());
    return out;
}

namespace {

void skip_ppm_space(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        if (std::isspace(bytes[pos])) {
            ++pos;
        } else if (bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else {
            return;
        }
    }
}

int read_ppm_int(const std::vector<std::uint8_t>& bytes, std::size_t& pos, const char* what) {
    skip_ppm_space(bytes, pos);
    if (pos >= bytes.size() || !std::isdigit(bytes[pos]))
        throw ParseError(std::string("ppm: expected ") + what + " at byte " + std::to_string(pos));
    long value = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
        value = value * 10 + (bytes[pos] - '0');
        if (value > 1'000'000)
            throw ParseError(std::string("ppm: ") + what + " out of range at byte " +
                             std::to_string(pos));
        ++pos;
    }
    return static_cast<int>(value);
}

}  // namespace

Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
        throw ParseError("ppm: missing P6 magic at byte 0");
    std::size_t pos = 2;
    const int width = read_ppm_int(bytes, pos, "width");
    const int height = read_ppm_int(bytes, pos, "height");
    const int maxval = read_ppm_int(bytes, pos, "maxval");
    if (width < 1 || height < 1)
        throw ParseError("ppm: non-positive dimensions at byte " + std::to_string(pos));
    if (maxval != 255)
        throw ParseError("ppm: unsupported maxval (want 255) at byte " + std::to_string(pos));
    if (pos >= bytes.size() || !std::isspace(bytes[pos]))
        throw ParseError("ppm: expected whitespace after maxval at byte " + std::to_string(pos));
    ++pos;  // exactly one whitespace byte separates header and raster

    const std::size_t need = static_cast<std::size_t>(width) * height * 3;
    if (bytes.size() - pos < need)
        throw ParseError("ppm: truncated raster at byte " + std::to_string(bytes.size()) +
                         " (need " + std::to_string(pos + need) + " bytes)");
    Image img;
    img.width = width;
    img.height = height;
    img.data.assign(bytes.begin() + pos, bytes.begin() + pos + need);
    return img;
}

void write_image(const Image& img, const std::string& path) {
    const std::vector<std::uint8_t> bytes = encode_ppm(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("ppm: cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("ppm: write failed: " + path);
}

Image read_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("ppm: cannot open for reading: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return decode_ppm(bytes);
}

}  // namespace papc
