#include "povt/codec.hpp"

#include <cmath>
#include <stdexcept>

namespace povt {

void CodecConfig::validate() const {
    if (codebook_size < 2) throw std::invalid_argument("codec: codebook size must be >= 2");
    if (codebook_dim < 1 || hidden < 1 || res_hidden < 1 || res_layers < 0)
        throw std::invalid_argument("codec: bad config");
    if (latent_size < 1 || input_size < latent_size)
        throw std::invalid_argument("codec: latent size must divide input size");
    int s = input_size;
    while (s > latent_size) {
        if (s % 2 != 0) throw std::invalid_argument("codec: input size must be latent * 2^k");
        s /= 2;
    }
    if (s != latent_size) throw std::invalid_argument("codec: input size must be latent * 2^k");
}

int CodecConfig::down_stages() const {
    int s = input_size, n = 0;
    while (s > latent_size) {
        s /= 2;
        ++n;
    }
    return n;
}

std::vector<int> nearest_codes(const Tensor& rows, const Tensor& codebook) {
    if (codebook.ndim() != 2 || codebook.dim(0) < 2)
        throw std::invalid_argument("quantize: empty codebook");
    if (rows.ndim() != 2 || rows.dim(1) != codebook.dim(1))
        throw std::invalid_argument("quantize: feature dim does not match codebook dim");
    const int n = rows.dim(0), d = rows.dim(1), v = codebook.dim(0);
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* x = rows.data() + static_cast<int64_t>(i) * d;
        double best = 1e308;
        int bj = 0;
        for (int j = 0; j < v; ++j) {
            const double* e = codebook.data() + static_cast<int64_t>(j) * d;
            double dist = 0.0;
            for (int k = 0; k < d; ++k) dist += (x[k] - e[k]) * (x[k] - e[k]);
            if (dist < best) { // strict: ties keep the lowest index
                best = dist;
                bj = j;
            }
        }
        idx[static_cast<size_t>(i)] = bj;
    }
    return idx;
}

namespace {

Tensor conv_init(Shape shape, Rng& rng) {
    // fan-in scaled normal
    int64_t fan = 1;
    for (size_t i = 1; i < shape.size(); ++i) fan *= shape[i];
    return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan)), true);
}

} // namespace

Codec::Codec(CodecConfig cfg, Rng& init_rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int h = cfg_.hidden, rh = cfg_.res_hidden, d = cfg_.codebook_dim, c = cfg_.channels;
    int in_ch = c;
    for (int s = 0; s < cfg_.down_stages(); ++s) {
        enc_down_.push_back({conv_init({h, in_ch, 4, 4}, init_rng),
                             Tensor::zeros({h}), 2, 1});
        enc_down_.back().b.set_requires_grad(true);
        in_ch = h;
    }
    enc_mid_ = {conv_init({h, h, 3, 3}, init_rng), Tensor::zeros({h}), 1, 1};
    enc_mid_.b.set_requires_grad(true);
    for (int r = 0; r < cfg_.res_layers; ++r) {
        ResBlock blk{conv_init({rh, h, 3, 3}, init_rng), Tensor::zeros({rh}),
                     conv_init({h, rh, 1, 1}, init_rng), Tensor::zeros({h})};
        blk.b1.set_requires_grad(true);
        blk.b2.set_requires_grad(true);
        enc_res_.push_back(blk);
    }
    enc_out_ = {conv_init({d, h, 1, 1}, init_rng), Tensor::zeros({d}), 1, 0};
    enc_out_.b.set_requires_grad(true);

    dec_in_ = {conv_init({h, d, 3, 3}, init_rng), Tensor::zeros({h}), 1, 1};
    dec_in_.b.set_requires_grad(true);
    for (int r = 0; r < cfg_.res_layers; ++r) {
        ResBlock blk{conv_init({rh, h, 3, 3}, init_rng), Tensor::zeros({rh}),
                     conv_init({h, rh, 1, 1}, init_rng), Tensor::zeros({h})};
        blk.b1.set_requires_grad(true);
        blk.b2.set_requires_grad(true);
        dec_res_.push_back(blk);
    }
    for (int s = 0; s < cfg_.down_stages(); ++s) {
        const int out_ch = (s == cfg_.down_stages() - 1) ? c : h;
        dec_up_.push_back({conv_init({h, out_ch, 4, 4}, init_rng), Tensor::zeros({out_ch}), 2, 1});
        dec_up_.back().b.set_requires_grad(true);
    }
    codebook_ = Tensor::randn({cfg_.codebook_size, d}, init_rng, 0.5, true);
}

std::vector<Tensor> Codec::parameters() {
    std::vector<Tensor> ps;
    auto push_conv = [&](Conv& cv) {
        ps.push_back(cv.w);
        ps.push_back(cv.b);
    };
    auto push_res = [&](std::vector<ResBlock>& blocks) {
        for (auto& blk : blocks) {
            ps.push_back(blk.w1);
            ps.push_back(blk.b1);
            ps.push_back(blk.w2);
            ps.push_back(blk.b2);
        }
    };
    for (auto& cv : enc_down_) push_conv(cv);
    push_conv(enc_mid_);
    push_res(enc_res_);
    push_conv(enc_out_);
    push_conv(dec_in_);
    push_res(dec_res_);
    for (auto& cv : dec_up_) push_conv(cv);
    ps.push_back(codebook_);
    return ps;
}

int64_t Codec::parameter_count() {
    int64_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
}

void Codec::set_trainable(bool trainable) {
    for (auto& p : parameters()) p.set_requires_grad(trainable);
}

Tensor Codec::run_res(const Tensor& x, const std::vector<ResBlock>& blocks) const {
    Tensor h = x;
    for (const auto& blk : blocks) {
        Tensor t = conv2d(relu(h), blk.w1, blk.b1, 1, 1);
        t = conv2d(relu(t), blk.w2, blk.b2, 1, 0);
        h = add(h, t);
    }
    return h;
}

Tensor Codec::encode_rows(const Tensor& frames) const {
    if (frames.ndim() != 4 || frames.dim(1) != cfg_.channels || frames.dim(2) != cfg_.input_size ||
        frames.dim(3) != cfg_.input_size)
        throw std::invalid_argument("codec encode: expected [B," + std::to_string(cfg_.channels) +
                                    "," + std::to_string(cfg_.input_size) + "," +
                                    std::to_string(cfg_.input_size) + "], got " +
                                    shape_str(frames.shape()));
    Tensor x = frames;
    for (const auto& cv : enc_down_) x = relu(conv2d(x, cv.w, cv.b, cv.stride, cv.pad));
    x = conv2d(x, enc_mid_.w, enc_mid_.b, 1, 1);
    x = run_res(x, enc_res_);
    x = conv2d(relu(x), enc_out_.w, enc_out_.b, 1, 0); // [B, d, h, w]
    // permute [B,d,h,w] -> rows [B*h*w, d]
    const int B = x.dim(0), d = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor flat = reshape(x, {B, d * hw});
    std::vector<Tensor> per_b;
    per_b.reserve(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b)
        per_b.push_back(transpose(reshape(slice_rows(flat, b, b + 1), {d, hw})));
    return concat_rows(per_b);
}

Tensor Codec::decode_rows(const Tensor& rows, int B) const {
    const int hw = cfg_.latent_size * cfg_.latent_size, d = cfg_.codebook_dim;
    std::vector<Tensor> per_b;
    per_b.reserve(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b)
        per_b.push_back(reshape(transpose(slice_rows(rows, b * hw, (b + 1) * hw)), {1, d * hw}));
    Tensor x = reshape(concat_rows(per_b), {B, d, cfg_.latent_size, cfg_.latent_size});
    x = conv2d(x, dec_in_.w, dec_in_.b, 1, 1);
    x = run_res(x, dec_res_);
    for (size_t s = 0; s < dec_up_.size(); ++s) {
        x = conv_transpose2d(x, dec_up_[s].w, dec_up_[s].b, 2, 1);
        if (s + 1 < dec_up_.size()) x = relu(x);
    }
    return x;
}

Tensor Codec::encode(const Tensor& frame) const {
    if (frame.ndim() != 3)
        throw std::invalid_argument("codec encode: expected one [C,H,W] frame");
    Tensor batch = reshape(frame, {1, frame.dim(0), frame.dim(1), frame.dim(2)});
    Tensor rows = encode_rows(batch); // [h*w, d]
    return reshape(rows, {cfg_.latent_size, cfg_.latent_size, cfg_.codebook_dim});
}

std::vector<int> Codec::encode_indices(const Tensor& frame) const {
    Tensor z = encode(frame);
    Tensor rows = reshape(z, {cfg_.latent_size * cfg_.latent_size, cfg_.codebook_dim});
    return nearest_codes(rows, codebook_);
}

Tensor Codec::decode(const std::vector<int>& indices) const {
    const int hw = cfg_.latent_size * cfg_.latent_size;
    if (static_cast<int>(indices.size()) != hw)
        throw std::invalid_argument("codec decode: expected " + std::to_string(hw) + " indices");
    for (int i : indices)
        if (i < 0 || i >= cfg_.codebook_size)
            throw std::out_of_range("codec decode: index " + std::to_string(i) +
                                    " outside codebook of size " + std::to_string(cfg_.codebook_size));
    Tensor rows = gather_rows(codebook_, indices);
    Tensor out = decode_rows(rows, 1);
    return reshape(out, {cfg_.channels, cfg_.input_size, cfg_.input_size});
}

CodecLosses Codec::eval_losses(const Tensor& frames) const {
    const int B = frames.dim(0);
    Tensor z_e = encode_rows(frames);
    const auto idx = nearest_codes(z_e, codebook_);
    Tensor z_q = gather_rows(codebook_, idx);
    // straight-through: decoder sees z_q, encoder sees the identity gradient
    Tensor z_dec = add(z_e, detach(sub(z_q, z_e)));
    Tensor recon = decode_rows(z_dec, B);
    Tensor diff = sub(recon, frames);
    Tensor recon_loss = mean_all(mul(diff, diff));
    // per-cell squared L2, averaged over cells
    const double inv_cells = 1.0 / static_cast<double>(z_e.dim(0));
    Tensor cb_diff = sub(detach(z_e), z_q);
    Tensor cb_loss = scale(sum_all(mul(cb_diff, cb_diff)), inv_cells);
    Tensor cm_diff = sub(z_e, detach(z_q));
    Tensor cm_loss = scale(sum_all(mul(cm_diff, cm_diff)), inv_cells * cfg_.beta);
    Tensor total = add(add(recon_loss, cb_loss), cm_loss);
    CodecLosses out;
    out.recon = recon_loss.item();
    out.codebook = cb_loss.item();
    out.commit = cm_loss.item();
    out.total = total.item();
    return out;
}

CodecLosses Codec::train_step(const Tensor& frames, Adam& opt) {
    if (frames.ndim() != 4 || frames.dim(0) < 1)
        throw std::invalid_argument("codec train_step: batch must be non-empty [B,C,H,W]");
    const int B = frames.dim(0);
    CodecLosses out;
    Tape tape;
    Tensor z_e = encode_rows(frames);
    if (!codebook_ready_) seed_codebook(z_e);
    const auto idx = nearest_codes(z_e, codebook_);
    Tensor z_q = gather_rows(codebook_, idx);
    Tensor z_dec = add(z_e, detach(sub(z_q, z_e)));
    Tensor recon = decode_rows(z_dec, B);
    Tensor diff = sub(recon, frames);
    Tensor recon_loss = mean_all(mul(diff, diff));
    const double inv_cells = 1.0 / static_cast<double>(z_e.dim(0));
    Tensor cb_diff = sub(detach(z_e), z_q);
    Tensor cb_loss = scale(sum_all(mul(cb_diff, cb_diff)), inv_cells);
    Tensor cm_diff = sub(z_e, detach(z_q));
    Tensor cm_loss = scale(sum_all(mul(cm_diff, cm_diff)), inv_cells * cfg_.beta);
    Tensor total = add(add(recon_loss, cb_loss), cm_loss);
    out.recon = recon_loss.item();
    out.codebook = cb_loss.item();
    out.commit = cm_loss.item();
    out.total = total.item();
    if (!std::isfinite(out.total))
        throw std::runtime_error("codec train_step: non-finite loss (recon=" +
                                 std::to_string(out.recon) + ", codebook=" +
                                 std::to_string(out.codebook) + ", commit=" +
                                 std::to_string(out.commit) + ")");
    tape.backward(total);
    opt.step();
    return out;
}

// Spread the codebook over actual encoder outputs before the first step;
// random init far from the feature distribution collapses to a single code.
void Codec::seed_codebook(const Tensor& z_e_rows) {
    const int n = z_e_rows.dim(0), d = cfg_.codebook_dim, v = cfg_.codebook_size;
    for (int j = 0; j < v; ++j) {
        const int src = static_cast<int>((static_cast<int64_t>(j) * n) / v);
        for (int k = 0; k < d; ++k)
            codebook_.data()[static_cast<int64_t>(j) * d + k] =
                z_e_rows.data()[static_cast<int64_t>(src) * d + k] +
                1e-4 * (j % 7 - 3); // break exact duplicates deterministically
    }
    codebook_ready_ = true;
}

void Codec::save_to(Checkpoint& ck, const std::string& prefix) const {
    int n = 0;
    auto put = [&](const std::string& name, const Tensor& t) { ck.add(prefix + name, t); };
    for (const auto& cv : enc_down_) {
        put("enc_down" + std::to_string(n) + ".w", cv.w);
        put("enc_down" + std::to_string(n) + ".b", cv.b);
        ++n;
    }
    put("enc_mid.w", enc_mid_.w);
    put("enc_mid.b", enc_mid_.b);
    for (size_t r = 0; r < enc_res_.size(); ++r) {
        put("enc_res" + std::to_string(r) + ".w1", enc_res_[r].w1);
        put("enc_res" + std::to_string(r) + ".b1", enc_res_[r].b1);
        put("enc_res" + std::to_string(r) + ".w2", enc_res_[r].w2);
        put("enc_res" + std::to_string(r) + ".b2", enc_res_[r].b2);
    }
    put("enc_out.w", enc_out_.w);
    put("enc_out.b", enc_out_.b);
    put("dec_in.w", dec_in_.w);
    put("dec_in.b", dec_in_.b);
    for (size_t r = 0; r < dec_res_.size(); ++r) {
        put("dec_res" + std::to_string(r) + ".w1", dec_res_[r].w1);
        put("dec_res" + std::to_string(r) + ".b1", dec_res_[r].b1);
        put("dec_res" + std::to_string(r) + ".w2", dec_res_[r].w2);
        put("dec_res" + std::to_string(r) + ".b2", dec_res_[r].b2);
    }
    n = 0;
    for (const auto& cv : dec_up_) {
        put("dec_up" + std::to_string(n) + ".w", cv.w);
        put("dec_up" + std::to_string(n) + ".b", cv.b);
        ++n;
    }
    put("codebook", codebook_);
}

namespace {
void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
    if (dst.shape() != src.shape())
        throw std::runtime_error("checkpoint: shape mismatch for " + name + ": expected " +
                                 shape_str(dst.shape()) + ", found " + shape_str(src.shape()));
    dst.values() = src.values();
}
} // namespace

void Codec::load_from(const Checkpoint& ck, const std::string& prefix) {
    int n = 0;
    auto take = [&](const std::string& name, Tensor& t) { copy_into(t, ck.get(prefix + name), name); };
    for (auto& cv : enc_down_) {
        take("enc_down" + std::to_string(n) + ".w", cv.w);
        take("enc_down" + std::to_string(n) + ".b", cv.b);
        ++n;
    }
    take("enc_mid.w", enc_mid_.w);
    take("enc_mid.b", enc_mid_.b);
    for (size_t r = 0; r < enc_res_.size(); ++r) {
        take("enc_res" + std::to_string(r) + ".w1", enc_res_[r].w1);
        take("enc_res" + std::to_string(r) + ".b1", enc_res_[r].b1);
        take("enc_res" + std::to_string(r) + ".w2", enc_res_[r].w2);
        take("enc_res" + std::to_string(r) + ".b2", enc_res_[r].b2);
    }
    take("enc_out.w", enc_out_.w);
    take("enc_out.b", enc_out_.b);
    take("dec_in.w", dec_in_.w);
    take("dec_in.b", dec_in_.b);
    for (size_t r = 0; r < dec_res_.size(); ++r) {
        take("dec_res" + std::to_string(r) + ".w1", dec_res_[r].w1);
        take("dec_res" + std::to_string(r) + ".b1", dec_res_[r].b1);
        take("dec_res" + std::to_string(r) + ".w2", dec_res_[r].w2);
        take("dec_res" + std::to_string(r) + ".b2", dec_res_[r].b2);
    }
    n = 0;
    for (auto& cv : dec_up_) {
        take("dec_up" + std::to_string(n) + ".w", cv.w);
        take("dec_up" + std::to_string(n) + ".b", cv.b);
        ++n;
    }
    take("codebook", codebook_);
    codebook_ready_ = true;
}

} // namespace povt
