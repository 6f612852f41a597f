#pragma once

#include "povt/boxes.hpp"
#include "povt/checkpoint.hpp"
#include "povt/rng.hpp"
#include "povt/tensor.hpp"

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace povt {

struct AblationFlags {
    bool no_patch_encoding = false;  // patch tokens replaced by zeros, L unchanged
    bool fixed_grid_patches = false; // patches from a static uniform grid, not boxes
    bool drop_base_base = false;
    bool drop_base_obj = false;
    bool drop_obj_time = false;
    bool drop_obj_per_t = false;
};

struct ModelConfig {
    int w_b = 1; // base-stream (full-frame) timesteps
    int w_o = 8; // object-stream timesteps (window capacity)
    int k_objects = 4;
    int patches_per_side = 1; // object representation size (1x1 or 2x2)
    int patch_res = 8;        // crop resolution fed to the patch encoder
    int latent_hw = 8;        // latent grid side (h = w)
    int vocab_z = 128;
    int layers = 4;
    int heads = 4;
    int embed_dim = 128;
    int mlp_dim = 512;
    int obj_embed_dim = 128; // box/patch embedding width, projected to embed_dim
    double dropout = 0.2;
    double attn_dropout = 0.3;
    bool unshared_attn = false; // one weight set per attention sub-op
    int channels = 3;
    AblationFlags ablate;

    int patch_tokens() const { return patches_per_side * patches_per_side; } // P
    int tokens_per_object() const { return patch_tokens() + 5; }             // L
    int base_len() const { return w_b * latent_hw * latent_hw; }             // S_b
    void validate() const;
};

// Boolean allow-matrices for the four attention sub-ops of one window
// length. Query rows, key columns, row-major.
struct AttnMasks {
    int t_obj = 0;
    std::shared_ptr<std::vector<uint8_t>> base_base;  // [S_b, S_b]
    std::shared_ptr<std::vector<uint8_t>> base_obj;   // [S_b, S_o]
    std::shared_ptr<std::vector<uint8_t>> obj_time;   // [t_obj*L, t_obj*L], per object
    std::shared_ptr<std::vector<uint8_t>> obj_per_t;  // [K*L, K*L], per timestep
};

// (1) base-base: causal over (timestep-major, raster) order.
// (2) base->obj: base time j attends all K*L object tokens at the aligned
//     object time t_obj - w_b + j and nothing else.
// (3) obj-obj over time: per object, causal over flattened (t, l).
// (4) obj-obj per timestep: per time, causal over flattened (k, l), k-major.
AttnMasks build_masks(const ModelConfig& cfg, int t_obj);

// One model window, tokens plus the patch crops the stream needs. Object
// stream time t carries patches extracted from frame t-1 (shifted); t = 0
// uses the learned pad token.
struct WindowTokens {
    int t_obj = 0;
    std::vector<std::vector<QuantizedBox>> boxes; // [t_obj][K]
    std::vector<Tensor> patches;                  // [t_obj*K*P] crops [C,r,r]; undefined => zero/pad
    std::vector<uint8_t> patch_live;              // parallel to patches
    std::vector<int> z_tokens;                    // [w_b*h*h] raster; unfilled slots hold 0
};

// Assembles a window from quantized boxes and frames. frames[i] aligns with
// object time i; only frames[0 .. t_obj-2] are read. Box geometry for the
// crops is the dequantized quantized box, which is all the model ever sees.
WindowTokens make_window(const ModelConfig& cfg,
                         const std::vector<std::vector<QuantizedBox>>& boxes,
                         const std::vector<Tensor>& frames, std::vector<int> z_tokens);

struct ForwardResult {
    // Teacher-forced next-token logits. Box logits are indexed [t*K + k].
    Tensor pres_logits;                 // [t_obj*K, 2]
    std::array<Tensor, 4> coord_logits; // x,y,w,h: [t_obj*K, 65]
    Tensor z_logits;                    // [S_b, vocab_z]
    // Leaf copies of the per-position input embeddings, present only when
    // forward ran with audit = true (gradients w.r.t. them drive the
    // causality audit).
    Tensor obj_inputs;  // [S_o, embed_dim]
    Tensor base_inputs; // [S_b, embed_dim]
};

class POVTModel {
public:
    POVTModel(ModelConfig cfg, Rng& init_rng);

    const ModelConfig& config() const { return cfg_; }
    std::vector<Tensor> parameters();
    int64_t parameter_count();
    static int64_t parameter_count(const ModelConfig& cfg); // pure function of config

    // Teacher-forced pass over one window. Dropout is applied only when
    // train_rng is non-null. audit = true routes the assembled input
    // embeddings through leaf tensors exposed in the result.
    ForwardResult forward(const WindowTokens& win, Rng* train_rng = nullptr,
                          bool audit = false) const;

    // One pre-norm residual block applied to explicit stream tensors
    // (exposed for block-level tests).
    std::pair<Tensor, Tensor> block_forward(int layer, const Tensor& base, const Tensor& obj,
                                            const AttnMasks& masks, Rng* train_rng = nullptr) const;

    void save_to(Checkpoint& ck, const std::string& prefix) const;
    void load_from(const Checkpoint& ck, const std::string& prefix);

    // Test hook: zero the attention-output and MLP-output projections of one
    // layer (makes the block an identity on both streams).
    void zero_block_outputs(int layer);

private:
    struct AttnWeights {
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    };
    struct Block {
        Tensor ln1_g, ln1_b, ln2_g, ln2_b;
        std::vector<AttnWeights> attn; // size 1 (shared) or 4 (unshared)
        Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };

    Tensor attend(const Tensor& q_in, const Tensor& kv_in, const AttnWeights& w,
                  const std::vector<uint8_t>& allow, Rng* train_rng) const;
    Tensor embed_object_stream(const WindowTokens& win) const; // [S_o, D] pre-positional
    Tensor embed_base_stream(const WindowTokens& win) const;   // [S_b, D] pre-positional
    Tensor object_positional(int t_obj) const;
    Tensor base_positional() const;
    const AttnWeights& attn_for(const Block& blk, int sub_op) const;

    ModelConfig cfg_;
    Tensor z_embed_;                     // [vocab_z, D]
    Tensor pres_embed_;                  // [2, D_obj]
    std::array<Tensor, 4> coord_embed_;  // [65, D_obj] each
    Tensor obj_proj_;                    // [D_obj, D], no bias: zero tokens stay zero
    PatchEncoder patch_enc_;
    Tensor pad_patch_;  // [1, D_obj] learned pad for t = 0 patch slots
    Tensor start_base_; // [1, D]
    Tensor pos_base_time_, pos_base_row_, pos_base_col_; // [w_b|h|h, D]
    Tensor pos_obj_time_, pos_obj_slot_;                 // [w_o, D], [L, D]
    std::vector<Block> blocks_;
    Tensor lnf_g_, lnf_b_;
    Tensor head_pres_w_, head_pres_b_;
    std::array<Tensor, 4> head_coord_w_, head_coord_b_;
    Tensor head_z_w_, head_z_b_;
};

// Uniform grid cell used by the fixed_grid_patches ablation: slot k of K
// maps to one cell of a ceil(sqrt(K))-wide grid over the frame.
BBox fixed_grid_cell(int k, int K);

} // namespace povt
