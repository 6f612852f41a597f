#pragma once

#include "povt/checkpoint.hpp"
#include "povt/optim.hpp"
#include "povt/rng.hpp"
#include "povt/tensor.hpp"

#include <string>
#include <vector>

namespace povt {

struct CodecConfig {
    int input_size = 32;  // H = W, power-of-two multiple of latent_size
    int latent_size = 8;  // h = w
    int channels = 3;
    int hidden = 64;       // hidden units
    int res_hidden = 32;   // residual units
    int res_layers = 2;
    int codebook_size = 128; // V
    int codebook_dim = 32;   // d
    double beta = 0.25;      // commitment loss coefficient
    double lr = 7e-4;

    void validate() const;
    int down_stages() const; // log2(input_size / latent_size)
};

struct CodecLosses {
    double recon = 0.0;
    double codebook = 0.0;
    double commit = 0.0; // includes the beta factor
    double total = 0.0;
};

// Nearest-codebook assignment of row vectors; ties break to the lowest
// index. Pure, no tape interaction.
std::vector<int> nearest_codes(const Tensor& rows, const Tensor& codebook);

class Codec {
public:
    Codec(CodecConfig cfg, Rng& init_rng);

    const CodecConfig& config() const { return cfg_; }
    std::vector<Tensor> parameters();
    int64_t parameter_count();
    void set_trainable(bool trainable);

    // Continuous pre-quantization features of one frame, as [h, w, d].
    // Frame values must lie in [0,1].
    Tensor encode(const Tensor& frame) const;

    // Nearest-codebook indices (raster order, h*w entries) of one frame.
    std::vector<int> encode_indices(const Tensor& frame) const;

    // Reconstruction of one frame from indices, in R (not clamped), [C,H,W].
    Tensor decode(const std::vector<int>& indices) const;

    // One Adam step on recon + codebook + beta*commit over a frame batch
    // [B,C,H,W]. Throws on a non-finite loss.
    CodecLosses train_step(const Tensor& frames, Adam& opt);

    // Loss components without stepping (used by tests).
    CodecLosses eval_losses(const Tensor& frames) const;

    const Tensor& codebook() const { return codebook_; }

    void save_to(Checkpoint& ck, const std::string& prefix) const;
    void load_from(const Checkpoint& ck, const std::string& prefix);

private:
    struct Conv {
        Tensor w, b;
        int stride = 1, pad = 0;
    };
    struct ResBlock {
        Tensor w1, b1, w2, b2; // relu-conv3-relu-conv1
    };

    Tensor encode_rows(const Tensor& frames) const;   // [B*h*w, d]
    void seed_codebook(const Tensor& z_e_rows);
    Tensor decode_rows(const Tensor& rows, int B) const; // -> [B,C,H,W]
    Tensor run_res(const Tensor& x, const std::vector<ResBlock>& blocks) const;

    CodecConfig cfg_;
    std::vector<Conv> enc_down_;  // stride-2 stages
    Conv enc_mid_;                // 3x3 stride-1
    std::vector<ResBlock> enc_res_;
    Conv enc_out_;                // 1x1 to codebook dim
    Conv dec_in_;                 // 3x3 from codebook dim
    std::vector<ResBlock> dec_res_;
    std::vector<Conv> dec_up_;    // transposed stride-2 stages
    Tensor codebook_;             // [V, d]
    bool codebook_ready_ = false; // data-dependent init happens on first step
};

} // namespace povt
