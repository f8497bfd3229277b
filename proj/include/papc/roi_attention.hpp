#pragma once

#include <cstdint>
#include <vector>

#include "papc/camera_geometry.hpp"
#include "papc/renderer.hpp"

namespace papc {

inline constexpr int kRoiSize = 32;

/// Axis-aligned attention window in the image frame (columns/rows).
struct RoiWindow {
    ImagePoint center;  // (col, row)
    double w_u = 0.0;   // width in columns
    double w_v = 0.0;   // height in rows
};

struct RoiWindowSet {
    std::vector<RoiWindow> windows;  // near-to-far, fovea last
    bool degenerate = false;         // all focal points coincided
};

/// Windows from focal points ordered near-to-far (last point = fovea, which
/// gets the fixed 32x32 window). Every other window is centered halfway to the
/// fovea and sized per axis as twice the absolute displacement plus margin.
RoiWindowSet build_roi_windows(const std::vector<ImagePoint>& focal_points, double margin = 8.0);

/// Multi-resolution tensor of shape (n_roi, 32, 32, 3), values in [0,1],
/// near-to-far with the fovea tile last.
struct RoiStack {
    int n_roi = 0;
    std::vector<float> data;             // row-major [tile][row][col][channel]
    std::vector<bool> out_of_view;       // per tile: window missed the image entirely

    void validate() const;
    float& at(int tile, int row, int col, int channel);
    float at(int tile, int row, int col, int channel) const;
};

/// Crop each window (clipped to bounds, zero-padded outside), box-average
/// resample to 32x32, normalize by 255, and stack in window order.
RoiStack crop_resize_stack(const Image& img, const RoiWindowSet& windows);

/// Raw little-endian float32 tensor with an 8-byte header of four uint16
/// values (n_roi, 32, 32, 3).
std::vector<std::uint8_t> roi_stack_to_blob(const RoiStack& stack);
RoiStack roi_stack_from_blob(const std::vector<std::uint8_t>& bytes);

}  // namespace papc
