#include "povt/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace povt {

double psnr(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("psnr: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    double mse = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> gaussian_window() {
    std::vector<double> w(kWin * kWin);
    double s = 0.0;
    for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
            const double di = i - (kWin - 1) / 2.0;
            const double dj = j - (kWin - 1) / 2.0;
            w[i * kWin + j] = std::exp(-(di * di + dj * dj) / (2.0 * kSigma * kSigma));
            s += w[i * kWin + j];
        }
    for (auto& x : w) x /= s;
    return w;
}

double ssim_plane(const double* a, const double* b, int H, int W, const std::vector<double>& win) {
    double total = 0.0;
    int count = 0;
    for (int i0 = 0; i0 + kWin <= H; ++i0) {
        for (int j0 = 0; j0 + kWin <= W; ++j0) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int i = 0; i < kWin; ++i)
                for (int j = 0; j < kWin; ++j) {
                    const double wv = win[i * kWin + j];
                    const double x = a[(i0 + i) * W + j0 + j];
                    const double y = b[(i0 + i) * W + j0 + j];
                    mx += wv * x;
                    my += wv * y;
                    sxx += wv * x * x;
                    syy += wv * y * y;
                    sxy += wv * x * y;
                }
            const double vx = sxx - mx * mx;
            const double vy = syy - my * my;
            const double cxy = sxy - mx * my;
            const double num = (2.0 * mx * my + kC1) * (2.0 * cxy + kC2);
            const double den = (mx * mx + my * my + kC1) * (vx + vy + kC2);
            total += num / den;
            ++count;
        }
    }
    return total / count;
}

} // namespace

double ssim(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("ssim: shape mismatch");
    int C = 1, H = 0, W = 0;
    if (a.ndim() == 2) {
        H = a.dim(0);
        W = a.dim(1);
    } else if (a.ndim() == 3) {
        C = a.dim(0);
        H = a.dim(1);
        W = a.dim(2);
    } else {
        throw std::invalid_argument("ssim: expects [H,W] or [C,H,W]");
    }
    if (H < kWin || W < kWin)
        throw std::invalid_argument("ssim: frame smaller than the 11x11 window");
    static const std::vector<double> win = gaussian_window();
    double total = 0.0;
    for (int c = 0; c < C; ++c)
        total += ssim_plane(a.data() + static_cast<int64_t>(c) * H * W,
                            b.data() + static_cast<int64_t>(c) * H * W, H, W, win);
    return total / C;
}

} // namespace povt
