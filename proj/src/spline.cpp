#include "papc/spline.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace papc {

using json = nlohmann::json;

void PixelSpline::validate() const {
    if (degree < 1) throw DomainError("spline: degree must be >= 1");
    if (knots.size() != control_points.size() + degree + 1)
        throw DomainError("spline: knot count must equal control count + degree + 1");
    for (std::size_t i = 0; i + 1 < knots.size(); ++i)
        if (knots[i] > knots[i + 1]) throw DomainError("spline: knots must be non-decreasing");
    for (int i = 0; i <= degree; ++i) {
        if (knots[i] != knots.front() || knots[knots.size() - 1 - i] != knots.back())
            throw DomainError("spline: ends must be clamped (degree+1 repeats)");
    }
}

std::vector<double> PixelSpline::coefficients() const {
    std::vector<double> c;
    c.reserve(control_points.size() * 2);
    for (const auto& p : control_points) {
        c.push_back(p.u);
        c.push_back(p.v);
    }
    return c;
}

PixelSpline PixelSpline::from_coefficients(const std::vector<double>& coeffs, int degree) {
    if (coeffs.size() % 2 != 0 || coeffs.empty())
        throw DomainError("spline: coefficient count must be even and nonzero");
    PixelSpline s;
    s.degree = degree;
    for (std::size_t i = 0; i < coeffs.size(); i += 2)
        s.control_points.push_back({coeffs[i], coeffs[i + 1]});
    s.knots = clamped_uniform_knots(static_cast<int>(s.control_points.size()), degree);
    s.validate();
    return s;
}

std::vector<double> clamped_uniform_knots(int n_ctrl, int degree) {
    if (n_ctrl < degree + 1) throw DomainError("spline: need n_ctrl >= degree + 1");
    std::vector<double> knots;
    const int interior = n_ctrl - degree - 1;
    for (int i = 0; i <= degree; ++i) knots.push_back(0.0);
    for (int i = 1; i <= interior; ++i)
        knots.push_back(static_cast<double>(i) / (interior + 1));
    for (int i = 0; i <= degree; ++i) knots.push_back(1.0);
    return knots;
}

namespace {

bool in_domain(double t, int k, const std::vector<double>& knots) {
    const double lo = knots[k];
    const double hi = knots[knots.size() - 1 - k];
    return t >= lo && t <= hi;
}

}  // namespace

double basis(int i, int k, double t, const std::vector<double>& knots) {
    if (i < 0 || i + k + 1 >= static_cast<int>(knots.size()))
        throw DomainError("basis: index out of range");
    if (!in_domain(t, k, knots))
        throw DomainError("basis: parameter outside knot domain");
    if (k == 0) {
        // half-open spans; the last non-empty span also owns t == domain max
        const double t_max = knots[knots.size() - 1];
        if (knots[i] <= t && t < knots[i + 1]) return 1.0;
        if (t == t_max && knots[i] < knots[i + 1] && knots[i + 1] == t_max) return 1.0;
        return 0.0;
    }
    double left = 0.0, right = 0.0;
    const double dl = knots[i + k] - knots[i];
    if (dl > 0.0) left = (t - knots[i]) / dl * basis(i, k - 1, t, knots);
    const double dr = knots[i + k + 1] - knots[i + 1];
    if (dr > 0.0) right = (knots[i + k + 1] - t) / dr * basis(i + 1, k - 1, t, knots);
    return left + right;
}

PixelPoint evaluate(const PixelSpline& spline, double t) {
    spline.validate();
    if (t < 0.0 || t > 1.0) throw DomainError("evaluate: parameter outside [0, 1]");
    PixelPoint out{0.0, 0.0};
    for (std::size_t i = 0; i < spline.control_points.size(); ++i) {
        const double w = basis(static_cast<int>(i), spline.degree, t, spline.knots);
        out.u += w * spline.control_points[i].u;
        out.v += w * spline.control_points[i].v;
    }
    return out;
}

FitResult fit_with_params(const std::vector<PixelPoint>& points,
                          const std::vector<double>& params, int n_ctrl, int degree) {
    if (static_cast<int>(points.size()) < n_ctrl || n_ctrl < degree + 1)
        throw DomainError("fit: need count(points) >= n_ctrl >= degree + 1");
    if (params.size() != points.size())
        throw DomainError("fit: one parameter per point required");

    PixelSpline s;
    s.degree = degree;
    s.knots = clamped_uniform_knots(n_ctrl, degree);

    const int m = static_cast<int>(points.size());
    Eigen::MatrixXd design(m, n_ctrl);
    Eigen::MatrixXd rhs(m, 2);
    for (int r = 0; r < m; ++r) {
        for (int c = 0; c < n_ctrl; ++c) design(r, c) = basis(c, degree, params[r], s.knots);
        rhs(r, 0) = points[r].u;
        rhs(r, 1) = points[r].v;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (qr.rank() < n_ctrl)
        throw GeometryError("fit: rank-deficient design matrix (degenerate trajectory)");
    Eigen::MatrixXd sol = qr.solve(rhs);

    for (int c = 0; c < n_ctrl; ++c) s.control_points.push_back({sol(c, 0), sol(c, 1)});

    FitResult result;
    result.spline = std::move(s);
    Eigen::MatrixXd resid = design * sol - rhs;
    for (int r = 0; r < m; ++r)
        result.max_residual = std::max(result.max_residual, resid.row(r).norm());
    return result;
}

FitResult fit(const std::vector<PixelPoint>& points, int n_ctrl, int degree) {
    if (static_cast<int>(points.size()) < n_ctrl || n_ctrl < degree + 1)
        throw DomainError("fit: need count(points) >= n_ctrl >= degree + 1");
    std::vector<double> params(points.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 1; i < points.size(); ++i) {
        total += std::hypot(points[i].u - points[i - 1].u, points[i].v - points[i - 1].v);
        params[i] = total;
    }
    if (total <= 0.0)
        throw GeometryError("fit: all points identical (degenerate trajectory)");
    for (auto& p : params) p /= total;
    return fit_with_params(points, params, n_ctrl, degree);
}

std::vector<PixelPoint> sample_focal_points(const PixelSpline& spline, int n) {
    if (n < 2) throw DomainError("sample_focal_points: need n >= 2");
    std::vector<PixelPoint> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i)
        out.push_back(evaluate(spline, static_cast<double>(i) / (n - 1)));
    return out;
}

std::string spline_to_json(const PixelSpline& spline) {
    json j;
    j["degree"] = spline.degree;
    j["ctrl"] = json::array();
    for (const auto& p : spline.control_points) j["ctrl"].push_back({p.u, p.v});
    return j.dump();
}

PixelSpline spline_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("spline: ") + e.what());
    }
    PixelSpline s;
    try {
        s.degree = j.at("degree").get<int>();
        for (const auto& p : j.at("ctrl"))
            s.control_points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    } catch (const json::exception& e) {
        throw ParseError(std::string("spline: ") + e.what());
    }
    s.knots = clamped_uniform_knots(static_cast<int>(s.control_points.size()), s.degree);
    s.validate();
    return s;
}

}  // namespace papc
