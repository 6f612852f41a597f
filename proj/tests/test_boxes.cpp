#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "povt/boxes.hpp"
#include "povt/rng.hpp"

#include <algorithm>
#include <cmath>

using namespace povt;

TEST_CASE("coordinate quantization boundaries and center") {
    CHECK(quantize_coord(0.0) == 0);
    CHECK(quantize_coord(1.0) == 63);
    CHECK(quantize_coord(0.5) == 32);
    CHECK_THROWS_AS(quantize_coord(-0.01), std::invalid_argument);
    CHECK_THROWS_AS(quantize_coord(1.01), std::invalid_argument);
}

TEST_CASE("absent boxes quantize to NULL coordinates and round-trip") {
    BBox b; // pres = 0
    QuantizedBox q = quantize_box(b);
    CHECK(q.pres == 0);
    CHECK(q.x == kNullToken);
    CHECK(q.y == kNullToken);
    CHECK(q.w == kNullToken);
    CHECK(q.h == kNullToken);
    BBox back = dequantize_box(q);
    CHECK(back.pres == 0);

    QuantizedBox bad;
    bad.pres = 1; // NULL coords with pres=1
    CHECK_THROWS_AS(dequantize_box(bad), std::invalid_argument);
}

TEST_CASE("dequantize returns bin centers; round-trip within half a bin") {
    CHECK(dequantize_coord(0) == doctest::Approx(1.0 / 128).epsilon(1e-15));
    Rng rng(2024);
    for (int i = 0; i < 10000; ++i) {
        const double v = rng.uniform();
        const double back = dequantize_coord(quantize_coord(v));
        CHECK(std::fabs(back - v) <= 1.0 / 128 + 1e-12);
    }
}

TEST_CASE("quantization is monotone") {
    Rng rng(7);
    std::vector<double> vs(500);
    for (auto& v : vs) v = rng.uniform();
    std::sort(vs.begin(), vs.end());
    for (size_t i = 1; i < vs.size(); ++i)
        CHECK(quantize_coord(vs[i - 1]) <= quantize_coord(vs[i]));
}

TEST_CASE("full-frame box with out_res = H reproduces the frame exactly") {
    Rng rng(5);
    const int H = 8;
    Tensor frame = Tensor::randn({2, H, H}, rng, 1.0);
    BBox b{1, 0.5, 0.5, 1.0, 1.0};
    auto res = extract_patch(frame, b, H);
    CHECK(!res.degenerate);
    // sample points land exactly on pixel centers
    for (int64_t i = 0; i < frame.size(); ++i)
        CHECK(res.patch.data()[i] == doctest::Approx(frame.data()[i]).epsilon(1e-12));
}

TEST_CASE("constant image gives a constant patch") {
    Tensor frame = Tensor::full({3, 16, 16}, 0.37);
    BBox b{1, 0.4, 0.6, 0.3, 0.25};
    auto res = extract_patch(frame, b, 8);
    for (int64_t i = 0; i < res.patch.size(); ++i)
        CHECK(res.patch.data()[i] == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("bilinear sampling of a linear gradient is exact (interior boxes)") {
    // Bilinear interpolation reproduces affine functions exactly, so an
    // affine image is an independent oracle for the sampling arithmetic.
    const int H = 32, W = 32;
    const double ax = 0.7, ay = -0.4, c0 = 0.3;
    Tensor frame({1, H, W});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            frame.data()[i * W + j] = ax * (j + 0.5) / W + ay * (i + 0.5) / H + c0;
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        BBox b;
        b.pres = 1;
        b.w = rng.uniform(0.1, 0.4);
        b.h = rng.uniform(0.1, 0.4);
        b.x = rng.uniform(b.w / 2 + 0.06, 1.0 - b.w / 2 - 0.06);
        b.y = rng.uniform(b.h / 2 + 0.06, 1.0 - b.h / 2 - 0.06);
        auto res = extract_patch(frame, b, 8);
        for (int pi = 0; pi < 8; ++pi)
            for (int pj = 0; pj < 8; ++pj) {
                const double u = b.x - b.w / 2 + (pj + 0.5) * b.w / 8;
                const double v = b.y - b.h / 2 + (pi + 0.5) * b.h / 8;
                const double expect = ax * u + ay * v + c0;
                CHECK(std::fabs(res.patch.data()[pi * 8 + pj] - expect) < 1e-10);
            }
    }
}

TEST_CASE("patch extraction is translation consistent away from borders") {
    Rng rng(13);
    const int H = 32, W = 32;
    Tensor frame({1, H, W});
    for (int64_t i = 0; i < frame.size(); ++i) frame.data()[i] = rng.uniform();
    // shift content by 4 px right/2 px down
    Tensor shifted = Tensor::zeros({1, H, W});
    for (int i = 0; i < H - 2; ++i)
        for (int j = 0; j < W - 4; ++j)
            shifted.data()[(i + 2) * W + j + 4] = frame.data()[i * W + j];
    BBox b{1, 0.35, 0.35, 0.3, 0.3};
    BBox bs{1, 0.35 + 4.0 / W, 0.35 + 2.0 / H, 0.3, 0.3};
    auto p0 = extract_patch(frame, b, 8);
    auto p1 = extract_patch(shifted, bs, 8);
    for (int64_t i = 0; i < p0.patch.size(); ++i)
        CHECK(p0.patch.data()[i] == doctest::Approx(p1.patch.data()[i]).epsilon(1e-12));
}

TEST_CASE("absent and degenerate boxes give zero patches") {
    Tensor frame = Tensor::full({3, 16, 16}, 0.9);
    auto absent = extract_patch(frame, BBox{}, 8);
    CHECK(!absent.degenerate);
    for (int64_t i = 0; i < absent.patch.size(); ++i) CHECK(absent.patch.data()[i] == 0.0);

    BBox thin{1, 0.5, 0.5, 0.01, 0.3}; // width < 1/64
    auto deg = extract_patch(frame, thin, 8);
    CHECK(deg.degenerate);
    for (int64_t i = 0; i < deg.patch.size(); ++i) CHECK(deg.patch.data()[i] == 0.0);
}

TEST_CASE("track-set quantization is permutation invariant as a multiset") {
    Rng rng(3);
    std::vector<Track> tracks;
    for (int k = 0; k < 3; ++k) {
        Track tr;
        for (int t = 0; t < 5; ++t) {
            BBox b{1, rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3),
                   rng.uniform(0.1, 0.3)};
            tr.push_back(b);
        }
        tracks.push_back(tr);
    }
    auto tokens_of = [](const Track& tr) {
        std::vector<int> v;
        for (const auto& b : tr) {
            QuantizedBox q = quantize_box(b);
            v.insert(v.end(), {q.pres, q.x, q.y, q.w, q.h});
        }
        return v;
    };
    std::vector<std::vector<int>> orig, perm;
    for (const auto& tr : tracks) orig.push_back(tokens_of(tr));
    std::vector<Track> shuffled{tracks[2], tracks[0], tracks[1]};
    for (const auto& tr : shuffled) perm.push_back(tokens_of(tr));
    std::sort(orig.begin(), orig.end());
    std::sort(perm.begin(), perm.end());
    CHECK(orig == perm);
}

TEST_CASE("patch encoder: stride arithmetic, zero case, gradient flow") {
    Rng rng(17);
    PatchEncoder enc(3, 8, 1, 16, rng);
    CHECK(enc.tokens_per_patch() == 1);
    Tensor patch = Tensor::randn({3, 8, 8}, rng, 1.0);
    Tensor tok = enc.encode(patch);
    CHECK(tok.shape() == Shape{1, 16});

    Tensor zero_tok = enc.encode(Tensor::zeros({3, 8, 8}));
    for (int64_t i = 0; i < zero_tok.size(); ++i) CHECK(zero_tok.data()[i] == 0.0); // bias is zero

    PatchEncoder enc4(3, 8, 2, 16, rng);
    CHECK(enc4.tokens_per_patch() == 4);
    CHECK(enc4.encode(patch).shape() == Shape{4, 16});

    // gradient reaches the encoder weights
    {
        Tape tape;
        Tensor batch = Tensor::randn({5, 3, 8, 8}, rng, 1.0);
        Tensor y = sum_all(enc.encode_batch(batch));
        tape.backward(y);
    }
    double gsum = 0.0;
    for (double g : enc.weight().grad()) gsum += std::fabs(g);
    CHECK(gsum > 0.0);
}
