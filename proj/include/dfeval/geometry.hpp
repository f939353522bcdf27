#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dfeval/error.hpp"
#include "dfeval/image.hpp"
#include "dfeval/landmarks.hpp"

namespace dfeval::geometry {

/// Binary raster, row-major, one byte per pixel (0 or 1).
struct Bitmap {
    Canvas canvas;
    std::vector<std::uint8_t> bits;

    Bitmap() = default;
    explicit Bitmap(Canvas c, std::uint8_t fill = 0)
        : canvas(c), bits(static_cast<std::size_t>(c.pixels()), fill) {}

    std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * canvas.width + x]; }
    std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * canvas.width + x]; }

    long long count() const {
        long long n = 0;
        for (auto b : bits) n += b;
        return n;
    }

    friend bool operator==(const Bitmap&, const Bitmap&) = default;
};

/// Signed shoelace area (positive for counter-clockwise in a y-up frame).
inline double signed_area(std::span<const Point2> poly) {
    double twice = 0.0;
    for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
        const auto& a = poly[i];
        const auto& b = poly[(i + 1) % n];
        twice += a.x * b.y - b.x * a.y;
    }
    return 0.5 * twice;
}

/// Andrew's monotone chain; collinear points are dropped.
inline std::vector<Point2> convex_hull(std::vector<Point2> pts) {
    std::sort(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) {
        return a.x < b.x || (a.x == b.x && a.y < b.y);
    });
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) return pts;
    auto cross = [](const Point2& o, const Point2& a, const Point2& b) {
        return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    };
    std::vector<Point2> hull(2 * pts.size());
    std::size_t k = 0;
    for (const auto& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

/// Scanline fill of a closed polygon (even-odd rule). A pixel is set when
/// its center lies inside the polygon or on its boundary. Vertices outside
/// the canvas are fine; the result is clipped.
inline Bitmap rasterize_polygon(std::span<const Point2> poly, Canvas canvas) {
    Bitmap out(canvas);
    const std::size_t n = poly.size();
    if (n == 0) return out;
    std::vector<double> xs;
    auto fill_span = [&](int y, double xl, double xr) {
        const int from = std::max(0, static_cast<int>(std::ceil(xl - 0.5)));
        const int to = std::min(canvas.width - 1, static_cast<int>(std::floor(xr - 0.5)));
        for (int x = from; x <= to; ++x) out.at(y, x) = 1;
    };
    for (int y = 0; y < canvas.height; ++y) {
        const double yc = y + 0.5;
        xs.clear();
        for (std::size_t i = 0; i < n; ++i) {
            const Point2& a = poly[i];
            const Point2& b = poly[(i + 1) % n];
            if (a.y == b.y) {
                // Horizontal edges lying on the scanline are boundary.
                if (a.y == yc) fill_span(y, std::min(a.x, b.x), std::max(a.x, b.x));
                continue;
            }
            if ((a.y <= yc) != (b.y <= yc)) xs.push_back(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
        }
        std::sort(xs.begin(), xs.end());
        for (std::size_t k = 0; k + 1 < xs.size(); k += 2) fill_span(y, xs[k], xs[k + 1]);
    }
    // Vertices sitting exactly on a pixel center at a local maximum in y are
    // not produced by the half-open crossing rule above.
    for (const auto& v : poly) {
        const double fx = v.x - 0.5, fy = v.y - 0.5;
        if (fx == std::floor(fx) && fy == std::floor(fy) && fx >= 0 && fy >= 0 && fx < canvas.width &&
            fy < canvas.height)
            out.at(static_cast<int>(fy), static_cast<int>(fx)) = 1;
    }
    return out;
}

/// Axis-free ellipse: points p with (p-c)^T Q (p-c) <= 1, Q symmetric
/// positive definite.
struct Ellipse {
    Point2 center;
    double q11 = 1.0;
    double q12 = 0.0;
    double q22 = 1.0;

    double area() const { return 3.14159265358979323846 / std::sqrt(q11 * q22 - q12 * q12); }

    double level(double x, double y) const {
        const double dx = x - center.x, dy = y - center.y;
        return q11 * dx * dx + 2.0 * q12 * dx * dy + q22 * dy * dy;
    }

    /// Semi-axis lengths, major first.
    std::pair<double, double> semi_axes() const {
        const double tr = q11 + q22;
        const double det = q11 * q22 - q12 * q12;
        const double disc = std::sqrt(std::max(0.0, tr * tr / 4 - det));
        const double l_small = tr / 2 - disc, l_big = tr / 2 + disc;
        return {1.0 / std::sqrt(l_small), 1.0 / std::sqrt(l_big)};
    }
};

namespace detail {

// Scale and centre the points so the conic fit is well conditioned.
struct Normalization {
    double mx = 0, my = 0, scale = 0;
};

inline Normalization normalization(std::span<const Point2> pts) {
    Normalization n;
    for (const auto& p : pts) {
        n.mx += p.x;
        n.my += p.y;
    }
    n.mx /= static_cast<double>(pts.size());
    n.my /= static_cast<double>(pts.size());
    double r = 0;
    for (const auto& p : pts) r += std::hypot(p.x - n.mx, p.y - n.my);
    n.scale = r / static_cast<double>(pts.size());
    return n;
}

inline std::optional<Ellipse> from_conic(const Eigen::Matrix<double, 6, 1>& c, const Normalization& n) {
    const double A = c(0), B = c(1), C = c(2), D = c(3), E = c(4), F = c(5);
    Eigen::Matrix2d H;
    H << 2 * A, B, B, 2 * C;
    if (std::abs(H.determinant()) < 1e-14) return std::nullopt;
    const Eigen::Vector2d ctr = H.inverse() * Eigen::Vector2d(-D, -E);
    const double fc = A * ctr(0) * ctr(0) + B * ctr(0) * ctr(1) + C * ctr(1) * ctr(1) + D * ctr(0) + E * ctr(1) + F;
    if (!(std::abs(fc) > 1e-300)) return std::nullopt;
    double q11 = -A / fc, q12 = -B / (2 * fc), q22 = -C / fc;
    if (!(q11 > 0 && q11 * q22 - q12 * q12 > 0)) return std::nullopt;
    const double s2 = n.scale * n.scale;
    Ellipse e;
    e.center = {n.mx + n.scale * ctr(0), n.my + n.scale * ctr(1)};
    e.q11 = q11 / s2;
    e.q12 = q12 / s2;
    e.q22 = q22 / s2;
    return e;
}

} // namespace detail

/// Direct least-squares ellipse fit (numerically stable variant of the
/// ellipse-specific conic fit). Returns nullopt when the points do not
/// determine an ellipse.
inline std::optional<Ellipse> fit_ellipse_direct(std::span<const Point2> pts) {
    if (pts.size() < 5) return std::nullopt;
    const auto norm = detail::normalization(pts);
    if (!(norm.scale > 1e-12)) return std::nullopt;
    const auto m = static_cast<Eigen::Index>(pts.size());
    Eigen::MatrixXd D1(m, 3), D2(m, 3);
    for (Eigen::Index i = 0; i < m; ++i) {
        const double x = (pts[i].x - norm.mx) / norm.scale;
        const double y = (pts[i].y - norm.my) / norm.scale;
        D1.row(i) << x * x, x * y, y * y;
        D2.row(i) << x, y, 1.0;
    }
    const Eigen::Matrix3d S1 = D1.transpose() * D1;
    const Eigen::Matrix3d S2 = D1.transpose() * D2;
    const Eigen::Matrix3d S3 = D2.transpose() * D2;
    Eigen::FullPivLU<Eigen::Matrix3d> lu(S3);
    if (!lu.isInvertible()) return std::nullopt;
    const Eigen::Matrix3d T = -lu.inverse() * S2.transpose();
    const Eigen::Matrix3d M0 = S1 + S2 * T;
    Eigen::Matrix3d M;
    M.row(0) = M0.row(2) / 2.0;
    M.row(1) = -M0.row(1);
    M.row(2) = M0.row(0) / 2.0;
    Eigen::EigenSolver<Eigen::Matrix3d> es(M);
    if (es.info() != Eigen::Success) return std::nullopt;
    std::optional<Eigen::Vector3d> best;
    double best_cond = 0.0;
    for (int k = 0; k < 3; ++k) {
        if (std::abs(es.eigenvalues()(k).imag()) > 1e-12) continue;
        const Eigen::Vector3d v = es.eigenvectors().col(k).real();
        const double cond = 4 * v(0) * v(2) - v(1) * v(1);
        if (cond > best_cond) {
            best_cond = cond;
            best = v;
        }
    }
    if (!best) return std::nullopt;
    Eigen::Matrix<double, 6, 1> conic;
    conic << *best, T * *best;
    return detail::from_conic(conic, norm);
}

/// Minimum-volume enclosing ellipse (Khachiyan). nullopt when the points
/// span less than two dimensions.
inline std::optional<Ellipse> min_enclosing_ellipse(std::span<const Point2> pts, double tol = 1e-9,
                                                    int max_iter = 10000) {
    const auto m = static_cast<Eigen::Index>(pts.size());
    if (m < 3) return std::nullopt;
    Eigen::MatrixXd P(2, m);
    for (Eigen::Index i = 0; i < m; ++i) P.col(i) << pts[i].x, pts[i].y;
    Eigen::MatrixXd Q(3, m);
    Q.topRows(2) = P;
    Q.row(2).setOnes();
    {
        const Eigen::Vector2d mean = P.rowwise().mean();
        const Eigen::MatrixXd centred = P.colwise() - mean;
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(centred);
        const auto sv = svd.singularValues();
        if (sv.size() < 2 || sv(1) < 1e-9 * std::max(1.0, sv(0))) return std::nullopt;
    }
    Eigen::VectorXd u = Eigen::VectorXd::Constant(m, 1.0 / static_cast<double>(m));
    for (int it = 0; it < max_iter; ++it) {
        const Eigen::Matrix3d X = Q * u.asDiagonal() * Q.transpose();
        const Eigen::Matrix3d Xi = X.inverse();
        Eigen::VectorXd Mv(m);
        for (Eigen::Index i = 0; i < m; ++i) Mv(i) = Q.col(i).dot(Xi * Q.col(i));
        Eigen::Index j;
        const double maxM = Mv.maxCoeff(&j);
        const double step = (maxM - 3.0) / (3.0 * (maxM - 1.0));
        Eigen::VectorXd nu = (1.0 - step) * u;
        nu(j) += step;
        const double change = (nu - u).norm();
        u = nu;
        if (change < tol) break;
    }
    const Eigen::Vector2d c = P * u;
    const Eigen::Matrix2d cov = P * u.asDiagonal() * P.transpose() - c * c.transpose();
    const Eigen::Matrix2d A = cov.inverse() / 2.0;
    // Khachiyan converges from inside; scale so every point is enclosed.
    double worst = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
        const Eigen::Vector2d d = P.col(i) - c;
        worst = std::max(worst, d.dot(A * d));
    }
    Ellipse e;
    e.center = {c(0), c(1)};
    const double k = worst > 1.0 ? 1.0 / worst : 1.0;
    e.q11 = A(0, 0) * k;
    e.q12 = A(0, 1) * k;
    e.q22 = A(1, 1) * k;
    return e;
}

inline Bitmap rasterize_ellipse(const Ellipse& e, Canvas canvas) {
    Bitmap out(canvas);
    const double det = e.q11 * e.q22 - e.q12 * e.q12;
    const double hx = std::sqrt(e.q22 / det), hy = std::sqrt(e.q11 / det);
    const int y0 = std::max(0, static_cast<int>(std::floor(e.center.y - hy - 1)));
    const int y1 = std::min(canvas.height - 1, static_cast<int>(std::ceil(e.center.y + hy + 1)));
    const int x0 = std::max(0, static_cast<int>(std::floor(e.center.x - hx - 1)));
    const int x1 = std::min(canvas.width - 1, static_cast<int>(std::ceil(e.center.x + hx + 1)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (e.level(x + 0.5, y + 0.5) <= 1.0) out.at(y, x) = 1;
    return out;
}

} // namespace dfeval::geometry
