#pragma once

#include "povt/rng.hpp"
#include "povt/tensor.hpp"

#include <vector>

namespace povt {

constexpr int kBoxBins = 64;
// Coordinate tokens of an absent box occupy a reserved 65th vocabulary slot;
// the coordinate heads are (kBoxBins + 1)-way with this slot masked from the
// loss.
constexpr int kNullToken = kBoxBins;

// Center + extent box, all coordinates normalized to [0,1]. pres == 0 means
// the object is absent at this timestep; the coordinates are then stored as
// zero and carry no meaning.
struct BBox {
    int pres = 0;
    double x = 0.0, y = 0.0, w = 0.0, h = 0.0;
};

struct QuantizedBox {
    int pres = 0;
    int x = kNullToken, y = kNullToken, w = kNullToken, h = kNullToken;
};

// One object identity over the length of a video.
using Track = std::vector<BBox>;

// bin = min(floor(v * 64), 63)
int quantize_coord(double v);
// bin center: (bin + 0.5) / 64
double dequantize_coord(int bin);

QuantizedBox quantize_box(const BBox& b);
BBox dequantize_box(const QuantizedBox& q);

// Bilinear crop-resample of the box region to out_res x out_res (spatial
// transformer grid sampling). Output sample (pi,pj) reads the normalized
// point (x - w/2 + (pj+.5)*w/out_res, y - h/2 + (pi+.5)*h/out_res); points
// outside the frame sample zero. pres == 0 yields an all-zero patch; a box
// whose extent quantizes to bin 0 (extent < 1/64) yields a zero patch with
// the degenerate flag set.
struct PatchResult {
    Tensor patch; // [C, out_res, out_res]
    bool degenerate = false;
};
PatchResult extract_patch(const Tensor& frame, const BBox& b, int out_res);

// Non-overlapping strided convolution over a patch, ViT-style: out_res maps
// to patches_per_side^2 spatial tokens of width dim.
class PatchEncoder {
public:
    PatchEncoder() = default;
    PatchEncoder(int channels, int out_res, int patches_per_side, int dim, Rng& init_rng);

    int tokens_per_patch() const { return pps_ * pps_; }
    int dim() const { return dim_; }
    int out_res() const { return out_res_; }

    // [C, out_res, out_res] -> [P, dim] rows in raster order.
    Tensor encode(const Tensor& patch) const;
    // [N, C, out_res, out_res] -> [N*P, dim]
    Tensor encode_batch(const Tensor& patches) const;

    std::vector<Tensor> parameters();
    const Tensor& weight() const { return w_; }
    const Tensor& bias() const { return b_; }
    Tensor& weight() { return w_; }
    Tensor& bias() { return b_; }

private:
    int channels_ = 0, out_res_ = 0, pps_ = 0, dim_ = 0;
    Tensor w_, b_;
};

} // namespace povt
