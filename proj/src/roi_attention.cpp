#include "papc/roi_attention.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace papc {

namespace {

constexpr int kMaxWindowFactor = 8;  // cap crop extents at 8x the image size

RoiWindow fovea_window(const ImagePoint& fovea) {
    return {fovea, static_cast<double>(kRoiSize), static_cast<double>(kRoiSize)};
}

}  // namespace

RoiWindowSet build_roi_windows(const std::vector<ImagePoint>& focal_points, double margin) {
    if (focal_points.size() < 2) throw DomainError("roi: need at least 2 focal points");
    if (!(margin >= 1.0)) throw DomainError("roi: margin must be >= 1 pixel");
    for (const auto& p : focal_points)
        if (!std::isfinite(p.col) || !std::isfinite(p.row))
            throw DomainError("roi: non-finite focal point");

    const ImagePoint fovea = focal_points.back();
    bool all_same = true;
    for (const auto& p : focal_points)
        if (p.col != fovea.col || p.row != fovea.row) all_same = false;
    if (all_same) return {{fovea_window(fovea)}, true};

    RoiWindowSet set;
    for (std::size_t i = 0; i + 1 < focal_points.size(); ++i) {
        const ImagePoint& p = focal_points[i];
        const ImagePoint mid{(p.col + fovea.col) / 2.0, (p.row + fovea.row) / 2.0};
        RoiWindow w;
        w.center = mid;
        w.w_u = 2.0 * std::abs(mid.col - fovea.col) + margin;
        w.w_v = 2.0 * std::abs(mid.row - fovea.row) + margin;
        set.windows.push_back(w);
    }
    set.windows.push_back(fovea_window(fovea));
    return set;
}

void RoiStack::validate() const {
    if (n_roi < 1) throw DomainError("roi stack: empty");
    if (data.size() != static_cast<std::size_t>(n_roi) * kRoiSize * kRoiSize * 3)
        throw DomainError("roi stack: data size mismatch");
    if (out_of_view.size() != static_cast<std::size_t>(n_roi))
        throw DomainError("roi stack: flag count mismatch");
    for (float v : data)
        if (!(v >= 0.0f && v <= 1.0f)) throw DomainError("roi stack: value outside [0,1]");
}

float& RoiStack::at(int tile, int row, int col, int channel) {
    return data[((static_cast<std::size_t>(tile) * kRoiSize + row) * kRoiSize + col) * 3 + channel];
}

float RoiStack::at(int tile, int row, int col, int channel) const {
    return data[((static_cast<std::size_t>(tile) * kRoiSize + row) * kRoiSize + col) * 3 + channel];
}

RoiStack crop_resize_stack(const Image& img, const RoiWindowSet& windows) {
    img.validate();
    if (windows.windows.empty()) throw DomainError("roi: no windows to crop");

    RoiStack stack;
    stack.n_roi = static_cast<int>(windows.windows.size());
    stack.data.assign(static_cast<std::size_t>(stack.n_roi) * kRoiSize * kRoiSize * 3, 0.0f);
    stack.out_of_view.assign(stack.n_roi, false);

    const int max_w = kMaxWindowFactor * img.width;
    const int max_h = kMaxWindowFactor * img.height;

    for (int t = 0; t < stack.n_roi; ++t) {
        const RoiWindow& w = windows.windows[t];
        const int crop_w = std::clamp<int>(static_cast<int>(std::lround(w.w_u)), 1, max_w);
        const int crop_h = std::clamp<int>(static_cast<int>(std::lround(w.w_v)), 1, max_h);
        const int col0 = static_cast<int>(std::lround(w.center.col - w.w_u / 2.0));
        const int row0 = static_cast<int>(std::lround(w.center.row - w.w_v / 2.0));

        if (col0 >= img.width || row0 >= img.height || col0 + crop_w <= 0 ||
            row0 + crop_h <= 0) {
            stack.out_of_view[t] = true;
            continue;  // tile stays zero
        }

        // Zero-padded crop in doubles, then area-average down to the tile.
        std::vector<double> crop(static_cast<std::size_t>(crop_h) * crop_w * 3, 0.0);
        for (int r = 0; r < crop_h; ++r) {
            const int src_r = row0 + r;
            if (src_r < 0 || src_r >= img.height) continue;
            for (int c = 0; c < crop_w; ++c) {
                const int src_c = col0 + c;
                if (src_c < 0 || src_c >= img.width) continue;
                for (int ch = 0; ch < 3; ++ch)
                    crop[(static_cast<std::size_t>(r) * crop_w + c) * 3 + ch] =
                        img.at(src_r, src_c, ch);
            }
        }

        const double span_r = static_cast<double>(crop_h) / kRoiSize;
        const double span_c = static_cast<double>(crop_w) / kRoiSize;
        for (int tr = 0; tr < kRoiSize; ++tr) {
            const double r0 = tr * span_r;
            const double r1 = r0 + span_r;
            for (int tc = 0; tc < kRoiSize; ++tc) {
                const double c0 = tc * span_c;
                const double c1 = c0 + span_c;
                double acc[3] = {0.0, 0.0, 0.0};
                for (int sr = static_cast<int>(std::floor(r0)); sr < crop_h && sr < r1; ++sr) {
                    const double wr = std::min<double>(r1, sr + 1) - std::max<double>(r0, sr);
                    if (wr <= 0.0) continue;
                    for (int sc = static_cast<int>(std::floor(c0)); sc < crop_w && sc < c1; ++sc) {
                        const double wc = std::min<double>(c1, sc + 1) - std::max<double>(c0, sc);
                        if (wc <= 0.0) continue;
                        const std::size_t base = (static_cast<std::size_t>(sr) * crop_w + sc) * 3;
                        for (int ch = 0; ch < 3; ++ch) acc[ch] += wr * wc * crop[base + ch];
                    }
                }
                for (int ch = 0; ch < 3; ++ch)
                    stack.at(t, tr, tc, ch) =
                        static_cast<float>(acc[ch] / (span_r * span_c) / 255.0);
            }
        }
    }
    return stack;
}

std::vector<std::uint8_t> roi_stack_to_blob(const RoiStack& stack) {
    stack.validate();
    std::vector<std::uint8_t> out;
    out.reserve(8 + stack.data.size() * 4);
    const std::uint16_t dims[4] = {static_cast<std::uint16_t>(stack.n_roi), kRoiSize, kRoiSize, 3};
    for (std::uint16_t d : dims) {
        out.push_back(static_cast<std::uint8_t>(d & 0xFF));
        out.push_back(static_cast<std::uint8_t>(d >> 8));
    }
    for (float v : stack.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xFF));
    }
    return out;
}

RoiStack roi_stack_from_blob(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8) throw ParseError("roi blob: truncated header at byte " +
                                           std::to_string(bytes.size()));
    std::uint16_t dims[4];
    for (int i = 0; i < 4; ++i)
        dims[i] = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
    if (dims[1] != kRoiSize || dims[2] != kRoiSize || dims[3] != 3 || dims[0] < 1)
        throw ParseError("roi blob: unexpected shape header at byte 0");
    const std::size_t count = static_cast<std::size_t>(dims[0]) * kRoiSize * kRoiSize * 3;
    if (bytes.size() != 8 + count * 4)
        throw ParseError("roi blob: expected " + std::to_string(8 + count * 4) +
                         " bytes, got " + std::to_string(bytes.size()));
    RoiStack stack;
    stack.n_roi = dims[0];
    stack.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
            bits |= static_cast<std::uint32_t>(bytes[8 + i * 4 + b]) << (8 * b);
        float v;
        std::memcpy(&v, &bits, 4);
        stack.data[i] = v;
    }
    stack.out_of_view.assign(stack.n_roi, false);
    return stack;
}

}  // namespace papc
