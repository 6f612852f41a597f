#include "povt/data.hpp"

#include "povt/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace povt {

namespace {

struct ObjState {
    double x, y;      // center, relative
    double vx, vy;    // per frame, relative
    double r;         // half extent, relative
    bool square;      // else disc
    double col[3];
};

constexpr double kPalette[6][3] = {
    {0.92, 0.20, 0.16}, // red
    {0.18, 0.80, 0.28}, // green
    {0.22, 0.42, 0.95}, // blue
    {0.95, 0.85, 0.20}, // yellow
    {0.88, 0.25, 0.85}, // magenta
    {0.20, 0.85, 0.87}, // cyan
};

bool covers(const ObjState& o, double px, double py) {
    const double dx = px - o.x, dy = py - o.y;
    if (o.square) return std::fabs(dx) <= o.r && std::fabs(dy) <= o.r;
    return dx * dx + dy * dy <= o.r * o.r;
}

// Reflect v into [lo, hi] (elastic): velocity sign flips per crossing.
void reflect(double& v, double& vel, double lo, double hi) {
    for (int guard = 0; guard < 64; ++guard) {
        if (v < lo) {
            v = 2 * lo - v;
            vel = -vel;
        } else if (v > hi) {
            v = 2 * hi - v;
            vel = -vel;
        } else {
            return;
        }
    }
    throw std::runtime_error("gen_bounce_video: reflection failed to converge");
}

double quantize_u8(double v) { return std::round(std::min(std::max(v, 0.0), 1.0) * 255.0) / 255.0; }

} // namespace

VideoSample gen_bounce_video(uint64_t seed, int T, int K, const GenOptions& opts) {
    if (T < 2) throw std::invalid_argument("gen_bounce_video: T must be >= 2");
    if (K < 1 || K > opts.k_max)
        throw std::invalid_argument("gen_bounce_video: K must be in [1, k_max]");
    if (opts.H < 8 || opts.W < 8 || opts.C != 3)
        throw std::invalid_argument("gen_bounce_video: bad frame dims");

    Rng rng(seed);
    VideoSample s;
    s.T = T;
    s.C = opts.C;
    s.H = opts.H;
    s.W = opts.W;
    s.seed = seed;
    s.bg_drift = opts.bg_drift ? 1 : 0;
    s.tracks.assign(static_cast<size_t>(K), Track(static_cast<size_t>(T)));

    std::vector<ObjState> objs;
    for (int k = 0; k < K; ++k) {
        ObjState o{};
        o.r = rng.uniform(opts.min_half_extent, opts.max_half_extent);
        o.x = rng.uniform(o.r, 1.0 - o.r);
        o.y = rng.uniform(o.r, 1.0 - o.r);
        const double speed = rng.uniform(opts.min_speed, opts.max_speed);
        const double ang = rng.uniform(0.0, 2.0 * M_PI);
        o.vx = speed * std::cos(ang);
        o.vy = speed * std::sin(ang);
        o.square = (k % 2 == 1);
        const double jit = rng.uniform(-0.04, 0.04);
        for (int c = 0; c < 3; ++c)
            o.col[c] = std::min(std::max(kPalette[k % 6][c] + jit, 0.05), 1.0);
        objs.push_back(o);
    }
    const double bg_base = 0.12 + rng.uniform(0.0, 0.04);
    const double bg_phase = rng.uniform(0.0, 1.0);

    const int H = opts.H, W = opts.W;
    for (int t = 0; t < T; ++t) {
        Tensor frame({3, H, W});
        // background (optionally drifting)
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                double v = bg_base;
                if (opts.bg_drift) {
                    const double u = (j + 0.5) / W + bg_phase + t * opts.drift_speed;
                    v += 0.08 * (0.5 + 0.5 * std::sin(2.0 * M_PI * u));
                }
                for (int c = 0; c < 3; ++c)
                    frame.data()[(static_cast<int64_t>(c) * H + i) * W + j] = v;
            }
        }
        // objects back to front (track 0 on top)
        for (int k = K - 1; k >= 0; --k) {
            const ObjState& o = objs[static_cast<size_t>(k)];
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j)
                    if (covers(o, (j + 0.5) / W, (i + 0.5) / H))
                        for (int c = 0; c < 3; ++c)
                            frame.data()[(static_cast<int64_t>(c) * H + i) * W + j] = o.col[c];
        }
        for (int64_t i = 0; i < frame.size(); ++i) frame.data()[i] = quantize_u8(frame.data()[i]);
        s.frames.push_back(frame);

        // boxes from each object's own on-screen mask (other objects ignored,
        // so occluded pixels still count)
        for (int k = 0; k < K; ++k) {
            const ObjState& o = objs[static_cast<size_t>(k)];
            int imin = H, imax = -1, jmin = W, jmax = -1, area = 0;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j)
                    if (covers(o, (j + 0.5) / W, (i + 0.5) / H)) {
                        ++area;
                        imin = std::min(imin, i);
                        imax = std::max(imax, i);
                        jmin = std::min(jmin, j);
                        jmax = std::max(jmax, j);
                    }
            BBox b;
            if (area >= opts.min_area_px) {
                b.pres = 1;
                b.x = (jmin + jmax + 1) / 2.0 / W;
                b.y = (imin + imax + 1) / 2.0 / H;
                b.w = static_cast<double>(jmax - jmin + 1) / W;
                b.h = static_cast<double>(imax - imin + 1) / H;
            }
            s.tracks[static_cast<size_t>(k)][static_cast<size_t>(t)] = b;
        }

        // advance
        for (auto& o : objs) {
            o.x += o.vx;
            o.y += o.vy;
            reflect(o.x, o.vx, o.r - opts.wall_margin, 1.0 - o.r + opts.wall_margin);
            reflect(o.y, o.vy, o.r - opts.wall_margin, 1.0 - o.r + opts.wall_margin);
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Dataset serialization: magic, length-prefixed JSON header, then per-sample
// raw little-endian payload (frames as u8 value/255, track coords as f64).

namespace {

constexpr char kDataMagic[8] = {'P', 'O', 'V', 'T', 'D', 'A', 'T', 'A'};

void io_fail(const std::string& what, std::istream& is) {
    throw std::runtime_error("dataset: truncated while reading " + what + " at offset " +
                             std::to_string(static_cast<long long>(is.tellg())));
}

} // namespace

void write_dataset(const std::string& path, const std::vector<VideoSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("write_dataset: empty dataset rejected");
    const auto& first = samples.front();
    int k_max = 0;
    for (const auto& s : samples) {
        if (s.T != first.T || s.H != first.H || s.W != first.W || s.C != first.C)
            throw std::invalid_argument("write_dataset: samples disagree with header dims");
        if (static_cast<int>(s.frames.size()) != s.T)
            throw std::invalid_argument("write_dataset: frame count != T");
        for (const auto& tr : s.tracks)
            if (static_cast<int>(tr.size()) != s.T)
                throw std::invalid_argument("write_dataset: track length != T");
        k_max = std::max(k_max, static_cast<int>(s.tracks.size()));
    }
    nlohmann::ordered_json hdr;
    hdr["version"] = 1;
    hdr["count"] = samples.size();
    hdr["T"] = first.T;
    hdr["H"] = first.H;
    hdr["W"] = first.W;
    hdr["C"] = first.C;
    hdr["K_max"] = k_max;
    const std::string hdr_str = hdr.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_dataset: cannot open " + path);
    os.write(kDataMagic, 8);
    const uint64_t hlen = hdr_str.size();
    os.write(reinterpret_cast<const char*>(&hlen), 8);
    os.write(hdr_str.data(), static_cast<std::streamsize>(hlen));
    for (const auto& s : samples) {
        os.write(reinterpret_cast<const char*>(&s.seed), 8);
        os.put(static_cast<char>(s.bg_drift));
        const uint32_t K = static_cast<uint32_t>(s.tracks.size());
        os.write(reinterpret_cast<const char*>(&K), 4);
        std::vector<uint8_t> px(static_cast<size_t>(s.C) * s.H * s.W);
        for (const auto& f : s.frames) {
            for (size_t i = 0; i < px.size(); ++i)
                px[i] = static_cast<uint8_t>(std::lround(f.data()[i] * 255.0));
            os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
        }
        for (const auto& tr : s.tracks)
            for (const auto& b : tr) {
                os.put(static_cast<char>(b.pres));
                const double coords[4] = {b.x, b.y, b.w, b.h};
                os.write(reinterpret_cast<const char*>(coords), 32);
            }
    }
    if (!os) throw std::runtime_error("write_dataset: write failed for " + path);
}

namespace {

DatasetHeader parse_header(std::istream& is, const std::string& path) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kDataMagic, 8) != 0)
        throw std::runtime_error("dataset: bad magic in " + path);
    uint64_t hlen = 0;
    if (!is.read(reinterpret_cast<char*>(&hlen), 8)) io_fail("header length", is);
    std::string hdr_str(hlen, '\0');
    if (!is.read(hdr_str.data(), static_cast<std::streamsize>(hlen))) io_fail("header", is);
    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(hdr_str);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("dataset: malformed header JSON: " + std::string(e.what()));
    }
    DatasetHeader h;
    h.version = hdr.at("version").get<int>();
    if (h.version != 1)
        throw std::runtime_error("dataset: version " + std::to_string(h.version) + " unsupported");
    h.count = hdr.at("count").get<int>();
    h.T = hdr.at("T").get<int>();
    h.H = hdr.at("H").get<int>();
    h.W = hdr.at("W").get<int>();
    h.C = hdr.at("C").get<int>();
    h.K_max = hdr.at("K_max").get<int>();
    if (h.count < 1 || h.K_max < 1) throw std::runtime_error("dataset: degenerate header");
    return h;
}

} // namespace

DatasetHeader read_dataset_header(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot open " + path);
    return parse_header(is, path);
}

std::vector<VideoSample> read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot open " + path);
    const DatasetHeader h = parse_header(is, path);
    std::vector<VideoSample> samples;
    samples.reserve(static_cast<size_t>(h.count));
    for (int n = 0; n < h.count; ++n) {
        VideoSample s;
        s.T = h.T;
        s.H = h.H;
        s.W = h.W;
        s.C = h.C;
        if (!is.read(reinterpret_cast<char*>(&s.seed), 8)) io_fail("sample seed", is);
        int c = is.get();
        if (c == EOF) io_fail("sample flags", is);
        s.bg_drift = static_cast<uint8_t>(c);
        uint32_t K = 0;
        if (!is.read(reinterpret_cast<char*>(&K), 4)) io_fail("track count", is);
        if (static_cast<int>(K) > h.K_max) throw std::runtime_error("dataset: K exceeds header K_max");
        std::vector<uint8_t> px(static_cast<size_t>(h.C) * h.H * h.W);
        for (int t = 0; t < h.T; ++t) {
            if (!is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size())))
                io_fail("frame pixels", is);
            Tensor f({h.C, h.H, h.W});
            for (size_t i = 0; i < px.size(); ++i) f.data()[i] = px[i] / 255.0;
            s.frames.push_back(std::move(f));
        }
        s.tracks.assign(K, Track(static_cast<size_t>(h.T)));
        for (auto& tr : s.tracks)
            for (auto& b : tr) {
                const int pres = is.get();
                if (pres == EOF) io_fail("box presence", is);
                double coords[4];
                if (!is.read(reinterpret_cast<char*>(coords), 32)) io_fail("box coords", is);
                b.pres = pres;
                b.x = coords[0];
                b.y = coords[1];
                b.w = coords[2];
                b.h = coords[3];
            }
        samples.push_back(std::move(s));
    }
    return samples;
}

} // namespace povt
