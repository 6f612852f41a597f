#pragma once

#include "povt/boxes.hpp"
#include "povt/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace povt {

struct GenOptions {
    int H = 32, W = 32, C = 3;
    int k_max = 4;
    double min_half_extent = 0.10; // relative to min(H,W)
    double max_half_extent = 0.18;
    double min_speed = 0.015; // per frame, relative units
    double max_speed = 0.045;
    // Walls sit wall_margin outside the frame; 0 keeps objects fully inside,
    // a margin larger than the object diameter lets them exit and re-enter
    // (pres 1 -> 0 -> 1).
    double wall_margin = 0.0;
    bool bg_drift = false;      // scrolling background pattern (non-object dynamics)
    double drift_speed = 0.04;  // relative scroll per frame
    int min_area_px = 5;        // below this mask area the box is dropped
};

struct VideoSample {
    int T = 0, C = 3, H = 32, W = 32;
    std::vector<Tensor> frames; // T frames [C,H,W], values on the u8/255 grid
    std::vector<Track> tracks;  // K tracks, each of length T
    uint64_t seed = 0;
    uint8_t bg_drift = 0;
};

// K shapes (alternating squares/discs, distinct colors, fixed depth order:
// track 0 frontmost) with constant velocity and elastic wall reflection.
// Boxes come from each object's own rasterized on-screen mask, so they bound
// the full object even when other objects occlude it; masks below
// min_area_px pixels give pres = 0.
VideoSample gen_bounce_video(uint64_t seed, int T, int K, const GenOptions& opts = {});

struct DatasetHeader {
    int version = 1;
    int count = 0;
    int T = 0, H = 0, W = 0, C = 0;
    int K_max = 0;
};

void write_dataset(const std::string& path, const std::vector<VideoSample>& samples);
std::vector<VideoSample> read_dataset(const std::string& path);
DatasetHeader read_dataset_header(const std::string& path);

} // namespace povt
