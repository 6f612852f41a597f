#include "povt/boxes.hpp"

#include <cmath>
#include <stdexcept>

namespace povt {

int quantize_coord(double v) {
    if (v < 0.0 || v > 1.0)
        throw std::invalid_argument("quantize_coord: coordinate " + std::to_string(v) +
                                    " outside [0,1]");
    const int bin = static_cast<int>(std::floor(v * kBoxBins));
    return bin > kBoxBins - 1 ? kBoxBins - 1 : bin;
}

double dequantize_coord(int bin) {
    if (bin < 0 || bin >= kBoxBins)
        throw std::invalid_argument("dequantize_coord: bin " + std::to_string(bin) +
                                    " outside [0,64)");
    return (bin + 0.5) / kBoxBins;
}

QuantizedBox quantize_box(const BBox& b) {
    QuantizedBox q;
    if (b.pres == 0) return q; // pres 0, all coordinates NULL
    q.pres = 1;
    q.x = quantize_coord(b.x);
    q.y = quantize_coord(b.y);
    q.w = quantize_coord(b.w);
    q.h = quantize_coord(b.h);
    return q;
}

BBox dequantize_box(const QuantizedBox& q) {
    BBox b;
    if (q.pres == 0) {
        return b;
    }
    if (q.x == kNullToken || q.y == kNullToken || q.w == kNullToken || q.h == kNullToken)
        throw std::invalid_argument("dequantize_box: NULL coordinate on a present box");
    b.pres = 1;
    b.x = dequantize_coord(q.x);
    b.y = dequantize_coord(q.y);
    b.w = dequantize_coord(q.w);
    b.h = dequantize_coord(q.h);
    return b;
}

PatchResult extract_patch(const Tensor& frame, const BBox& b, int out_res) {
    if (frame.ndim() != 3) throw std::invalid_argument("extract_patch: frame must be [C,H,W]");
    if (out_res < 1) throw std::invalid_argument("extract_patch: out_res must be >= 1");
    const int C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
    PatchResult res;
    res.patch = Tensor::zeros({C, out_res, out_res});
    if (b.pres == 0) return res;
    if (quantize_coord(b.w) == 0 || quantize_coord(b.h) == 0) {
        res.degenerate = true;
        return res;
    }
    const double x0 = b.x - b.w / 2.0;
    const double y0 = b.y - b.h / 2.0;
    for (int pi = 0; pi < out_res; ++pi) {
        const double v = y0 + (pi + 0.5) * b.h / out_res;
        const double py = v * H - 0.5;
        const int iy = static_cast<int>(std::floor(py));
        const double fy = py - iy;
        for (int pj = 0; pj < out_res; ++pj) {
            const double u = x0 + (pj + 0.5) * b.w / out_res;
            const double px = u * W - 0.5;
            const int ix = static_cast<int>(std::floor(px));
            const double fx = px - ix;
            for (int c = 0; c < C; ++c) {
                auto at = [&](int yy, int xx) -> double {
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W) return 0.0;
                    return frame.data()[(static_cast<int64_t>(c) * H + yy) * W + xx];
                };
                const double val = (1 - fy) * ((1 - fx) * at(iy, ix) + fx * at(iy, ix + 1)) +
                                   fy * ((1 - fx) * at(iy + 1, ix) + fx * at(iy + 1, ix + 1));
                res.patch.data()[(static_cast<int64_t>(c) * out_res + pi) * out_res + pj] = val;
            }
        }
    }
    return res;
}

PatchEncoder::PatchEncoder(int channels, int out_res, int patches_per_side, int dim, Rng& init_rng)
    : channels_(channels), out_res_(out_res), pps_(patches_per_side), dim_(dim) {
    if (out_res % patches_per_side != 0)
        throw std::invalid_argument("PatchEncoder: out_res must be divisible by patches_per_side");
    const int k = out_res / patches_per_side;
    const double std = std::sqrt(2.0 / (static_cast<double>(channels) * k * k));
    w_ = Tensor::randn({dim, channels, k, k}, init_rng, std, true);
    b_ = Tensor::zeros({dim});
    b_.set_requires_grad(true);
}

Tensor PatchEncoder::encode(const Tensor& patch) const {
    Tensor batch = reshape(patch, {1, patch.dim(0), patch.dim(1), patch.dim(2)});
    Tensor rows = encode_batch(batch);
    return rows;
}

Tensor PatchEncoder::encode_batch(const Tensor& patches) const {
    if (patches.ndim() != 4 || patches.dim(1) != channels_ || patches.dim(2) != out_res_ ||
        patches.dim(3) != out_res_)
        throw std::invalid_argument("PatchEncoder: expected [N," + std::to_string(channels_) + "," +
                                    std::to_string(out_res_) + "," + std::to_string(out_res_) +
                                    "], got " + shape_str(patches.shape()));
    const int k = out_res_ / pps_;
    Tensor y = conv2d(patches, w_, b_, k, 0); // [N, dim, pps, pps]
    const int N = y.dim(0), P = pps_ * pps_;
    Tensor flat = reshape(y, {N, dim_ * P});
    std::vector<Tensor> per_n;
    per_n.reserve(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n)
        per_n.push_back(transpose(reshape(slice_rows(flat, n, n + 1), {dim_, P})));
    return concat_rows(per_n); // [N*P, dim]
}

std::vector<Tensor> PatchEncoder::parameters() { return {w_, b_}; }

} // namespace povt
