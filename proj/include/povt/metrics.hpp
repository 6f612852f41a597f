#pragma once

#include "povt/tensor.hpp"

namespace povt {

// PSNR in dB for signals scaled to [0,1] (MAX = 1). Identical inputs return
// +infinity.
double psnr(const Tensor& a, const Tensor& b);

// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), C1=0.01^2,
// C2=0.03^2 for unit dynamic range. Inputs are [C,H,W] or [H,W]; channels are
// scored independently and averaged. Windows are valid-mode: both sides must
// be at least 11 wide.
double ssim(const Tensor& a, const Tensor& b);

} // namespace povt
