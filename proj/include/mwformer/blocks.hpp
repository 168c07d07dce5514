#pragma once

// Transformer building blocks of the restoration encoder. Each encoder block
// can draw its attention projections (global axis) and its FFN depthwise
// kernel (local axis) either from fixed parameters or from hyper-generators
// conditioned on the weather vector v.

#include <string>

#include "mwformer/hyper.hpp"
#include "mwformer/nn.hpp"
#include "mwformer/ops.hpp"

namespace mwf {

/// Multi-head scaled dot-product self-attention. x: [N, C_in]; wq/wk/wv:
/// [C_in, d] with heads dividing d; per-head scaling 1/sqrt(d/heads).
/// Output projection is NOT included (the caller owns it).
template <typename T>
Tensor<T> msa(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk,
              const Tensor<T>& wv, std::size_t heads) {
  if (x.rank() != 2)
    throw DimensionError("msa: tokens must be [N, C], got " + shape_str(x.shape()));
  const std::size_t c_in = x.size(1);
  for (const Tensor<T>* w : {&wq, &wk, &wv}) {
    if (w->rank() != 2 || w->size(0) != c_in)
      throw DimensionError("msa: projection " + shape_str(w->shape()) +
                           " does not match tokens " + shape_str(x.shape()));
  }
  const std::size_t d = wq.size(1);
  if (wk.size(1) != d || wv.size(1) != d)
    throw DimensionError("msa: projection output dims disagree");
  if (heads == 0 || d % heads != 0)
    throw ConfigError("msa: head count " + std::to_string(heads) +
                      " does not divide projection dim " + std::to_string(d));
  const std::size_t dh = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  Tensor<T> q = matmul(x, wq);
  Tensor<T> k = matmul(x, wk);
  Tensor<T> v = matmul(x, wv);

  std::vector<Tensor<T>> head_outs;
  head_outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> qh = slice(q, 1, h * dh, dh);
    Tensor<T> kh = slice(k, 1, h * dh, dh);
    Tensor<T> vh = slice(v, 1, h * dh, dh);
    Tensor<T> logits = mul_scalar(matmul(qh, transpose(kh)), scale);
    Tensor<T> att = softmax(logits, 1);
    head_outs.push_back(matmul(att, vh));
  }
  return heads == 1 ? head_outs[0] : concat(head_outs, 1);
}

/// LayerNorm -> (adaptive) MSA -> residual -> LayerNorm -> (adaptive) FFN ->
/// residual. The FFN is expand-MLP -> depthwise conv over the token grid ->
/// GELU -> contract-MLP.
template <typename T>
class EncoderBlock {
 public:
  EncoderBlock() = default;

  EncoderBlock(ParameterStore<T>& store, Rng& rng, const std::string& prefix,
               std::size_t channels, std::size_t heads, std::size_t expansion,
               std::size_t v_dim, bool adapt_global, bool adapt_local)
      : channels_(channels),
        heads_(heads),
        expanded_(channels * expansion),
        adapt_global_(adapt_global),
        adapt_local_(adapt_local) {
    if (heads == 0 || channels % heads != 0)
      throw ConfigError(prefix + ": heads " + std::to_string(heads) +
                        " do not divide channels " + std::to_string(channels));

    ln1_g_ = store.add(prefix + ".ln1.g", Tensor<T>::full({channels}, T(1)));
    ln1_b_ = store.add(prefix + ".ln1.b", Tensor<T>::zeros({channels}));
    ln2_g_ = store.add(prefix + ".ln2.g", Tensor<T>::full({channels}, T(1)));
    ln2_b_ = store.add(prefix + ".ln2.b", Tensor<T>::zeros({channels}));

    if (adapt_global_) {
      auto id_bias = identity_proj_bias<T>(channels, channels);
      gen_q_ = HyperMLP<T>(store, rng, prefix + ".gen_q", v_dim, channels * channels, id_bias);
      gen_k_ = HyperMLP<T>(store, rng, prefix + ".gen_k", v_dim, channels * channels, id_bias);
      gen_v_ = HyperMLP<T>(store, rng, prefix + ".gen_v", v_dim, channels * channels, id_bias);
      store.declare_adaptive(prefix + ".attn.wq", {channels, channels});
      store.declare_adaptive(prefix + ".attn.wk", {channels, channels});
      store.declare_adaptive(prefix + ".attn.wv", {channels, channels});
    } else {
      wq_ = store.add(prefix + ".attn.wq",
                      init_fanin_uniform<T>(rng, {channels, channels}, channels));
      wk_ = store.add(prefix + ".attn.wk",
                      init_fanin_uniform<T>(rng, {channels, channels}, channels));
      wv_ = store.add(prefix + ".attn.wv",
                      init_fanin_uniform<T>(rng, {channels, channels}, channels));
    }
    wo_ = store.add(prefix + ".attn.wo",
                    init_fanin_uniform<T>(rng, {channels, channels}, channels));
    wo_b_ = store.add(prefix + ".attn.wo_b", Tensor<T>::zeros({channels}));

    ffn_w1_ = store.add(prefix + ".ffn.w1",
                        init_fanin_uniform<T>(rng, {channels, expanded_}, channels));
    ffn_b1_ = store.add(prefix + ".ffn.b1", Tensor<T>::zeros({expanded_}));
    ffn_w2_ = store.add(prefix + ".ffn.w2",
                        init_fanin_uniform<T>(rng, {expanded_, channels}, expanded_));
    ffn_b2_ = store.add(prefix + ".ffn.b2", Tensor<T>::zeros({channels}));

    if (adapt_local_) {
      gen_dwc_ = HyperMLP<T>(store, rng, prefix + ".gen_dwc", v_dim, expanded_ * 9,
                             delta_kernel_bias<T>(expanded_));
      store.declare_adaptive(prefix + ".ffn.dwc", {expanded_, 1, 3, 3});
    } else {
      // Fixed depthwise kernel starts as the same delta the generator bias
      // encodes, so adaptive and plain variants match at initialization.
      dwc_ = store.add(prefix + ".ffn.dwc",
                       Tensor<T>::from({expanded_, 1, 3, 3}, delta_kernel_bias<T>(expanded_)));
    }
  }

  std::size_t channels() const { return channels_; }

  /// tokens: [N, C] with N == h*w.
  Tensor<T> forward(const Tensor<T>& tokens, const Tensor<T>& v, std::size_t h,
                    std::size_t w) const {
    if (tokens.rank() != 2 || tokens.size(1) != channels_)
      throw DimensionError("encoder_block: tokens " + shape_str(tokens.shape()) +
                           " do not carry " + std::to_string(channels_) + " channels");
    if (tokens.size(0) != h * w)
      throw DimensionError("encoder_block: token count " + std::to_string(tokens.size(0)) +
                           " is not the " + std::to_string(h) + "x" + std::to_string(w) +
                           " grid");

    // attention sub-layer
    Tensor<T> y = layer_norm(tokens, ln1_g_, ln1_b_);
    Tensor<T> wq = adapt_global_ ? gen_proj_matrix(gen_q_, v, channels_, channels_) : wq_;
    Tensor<T> wk = adapt_global_ ? gen_proj_matrix(gen_k_, v, channels_, channels_) : wk_;
    Tensor<T> wv = adapt_global_ ? gen_proj_matrix(gen_v_, v, channels_, channels_) : wv_;
    Tensor<T> att = linear(msa(y, wq, wk, wv, heads_), wo_, wo_b_);
    Tensor<T> x1 = add(tokens, att);

    // FFN sub-layer
    Tensor<T> y2 = layer_norm(x1, ln2_g_, ln2_b_);
    Tensor<T> e = linear(y2, ffn_w1_, ffn_b1_);
    Tensor<T> img = tokens_to_image(e, h, w);
    Tensor<T> kernel = adapt_local_ ? gen_dwc_kernel(gen_dwc_, v, expanded_) : dwc_;
    Tensor<T> conv = gelu(depthwise_conv2d(img, kernel));
    Tensor<T> out = linear(image_to_tokens(conv), ffn_w2_, ffn_b2_);
    return add(x1, out);
  }

 private:
  std::size_t channels_ = 0, heads_ = 1, expanded_ = 0;
  bool adapt_global_ = false, adapt_local_ = false;
  Tensor<T> ln1_g_, ln1_b_, ln2_g_, ln2_b_;
  HyperMLP<T> gen_q_, gen_k_, gen_v_, gen_dwc_;
  Tensor<T> wq_, wk_, wv_, wo_, wo_b_;
  Tensor<T> ffn_w1_, ffn_b1_, ffn_w2_, ffn_b2_;
  Tensor<T> dwc_;
};

/// Finer-detail path: the token grid is re-expressed as 2x2 sub-patches
/// (4x the tokens, C/4 channels each), run through its own adaptive encoder
/// block, merged back, and added to the main stream.
template <typename T>
class IntraPatchBlock {
 public:
  IntraPatchBlock() = default;

  IntraPatchBlock(ParameterStore<T>& store, Rng& rng, const std::string& prefix,
                  std::size_t channels, std::size_t expansion, std::size_t v_dim,
                  bool adapt_global, bool adapt_local) {
    if (channels % 4 != 0)
      throw ConfigError(prefix + ": intra-patch split needs channels divisible by 4, got " +
                        std::to_string(channels));
    inner_ = EncoderBlock<T>(store, rng, prefix + ".sub", channels / 4, 1, expansion, v_dim,
                             adapt_global, adapt_local);
    channels_ = channels;
  }

  Tensor<T> forward(const Tensor<T>& tokens, const Tensor<T>& v, std::size_t h,
                    std::size_t w) const {
    if (tokens.rank() != 2 || tokens.size(1) != channels_ || tokens.size(0) != h * w)
      throw DimensionError("intra_patch_block: tokens " + shape_str(tokens.shape()) +
                           " do not form a " + std::to_string(h) + "x" + std::to_string(w) +
                           "x" + std::to_string(channels_) + " grid");
    Tensor<T> img = tokens_to_image(tokens, h, w);
    Tensor<T> sub = pixel_shuffle2(img);  // [C/4, 2h, 2w]
    Tensor<T> sub_tokens = image_to_tokens(sub);
    Tensor<T> refined = inner_.forward(sub_tokens, v, 2 * h, 2 * w);
    Tensor<T> merged = pixel_unshuffle2(tokens_to_image(refined, 2 * h, 2 * w));
    return add(tokens, image_to_tokens(merged));
  }

 private:
  EncoderBlock<T> inner_;
  std::size_t channels_ = 0;
};

}  // namespace mwf
