#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "papc/camera_geometry.hpp"
#include "papc/dynamics_track.hpp"

namespace papc {

struct Palette {
    std::array<std::uint8_t, 3> background = {60, 130, 60};
    std::array<std::uint8_t, 3> road = {90, 90, 90};
    std::array<std::uint8_t, 3> boundary = {250, 250, 250};
};

struct Scene {
    Track track;
    std::vector<Obstacle> obstacles;
    Palette palette;
    double boundary_width = 0.3;  // meters, painted edge band outside the road

    void validate() const;
};

/// Row-major RGB byte image, default (64, 128, 3).
struct Image {
    int height = 64;
    int width = 128;
    std::vector<std::uint8_t> data;

    void validate() const;
    std::uint8_t& at(int row, int col, int channel);
    const std::uint8_t& at(int row, int col, int channel) const;
};

Image make_image(int height, int width, std::array<std::uint8_t, 3> fill = {0, 0, 0});

/// Per-pixel inverse ray cast through the camera model: ground plane shaded by
/// track membership, obstacles as upright boxes resolved by nearest hit.
Image render(const Scene& scene, const CameraPose& pose, const CameraIntrinsics& intr);

/// Binary PPM (P6, maxval 255).
void write_image(const Image& img, const std::string& path);
Image read_image(const std::string& path);

/// In-memory counterparts used by the file round trip.
std::vector<std::uint8_t> encode_ppm(const Image& img);
Image decode_ppm(const std::vector<std::uint8_t>& bytes);

}  // namespace papc
