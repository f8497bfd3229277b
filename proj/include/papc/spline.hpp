#pragma once

#include <optional>
#include <string>
#include <vector>

#include "papc/camera_geometry.hpp"
#include "papc/common.hpp"

namespace papc {

/// Clamped B-spline in pixel coordinates on the normalized domain [0, 1].
/// knots.size() == control_points.size() + degree + 1, ends repeated
/// degree+1 times, interior knots uniform.
struct PixelSpline {
    int degree = 3;
    std::vector<double> knots;
    std::vector<PixelPoint> control_points;

    void validate() const;
    /// 2 * control_points.size() scalars, (u0, v0, u1, v1, ...).
    std::vector<double> coefficients() const;
    static PixelSpline from_coefficients(const std::vector<double>& coeffs, int degree = 3);
};

/// Uniform clamped knot vector for n_ctrl control points of the given degree.
std::vector<double> clamped_uniform_knots(int n_ctrl, int degree);

/// Cox-de Boor basis function N_{i,k}(t); 0/0 terms evaluate to 0.
/// t must lie inside the knot domain [knots[k], knots[n-k-1]].
double basis(int i, int k, double t, const std::vector<double>& knots);

/// S(t) = sum_i N_{i,k}(t) P_i for t in [0, 1].
PixelPoint evaluate(const PixelSpline& spline, double t);

struct FitResult {
    PixelSpline spline;
    double max_residual = 0.0;  // pixels
};

/// Least-squares fit with chord-length parameterization.
FitResult fit(const std::vector<PixelPoint>& points, int n_ctrl, int degree = 3);

/// Least-squares fit at caller-supplied parameters in [0, 1] (one per point).
FitResult fit_with_params(const std::vector<PixelPoint>& points,
                          const std::vector<double>& params, int n_ctrl, int degree = 3);

/// n spline samples at parameters equally spaced in [0, 1], ordered
/// near-to-far (largest parameter last).
std::vector<PixelPoint> sample_focal_points(const PixelSpline& spline, int n);

// JSON: {"degree": k, "ctrl": [[u, v], ...]}; knots implied by convention.
std::string spline_to_json(const PixelSpline& spline);
PixelSpline spline_from_json(const std::string& text);

}  // namespace papc
