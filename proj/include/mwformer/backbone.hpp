#pragma once

// The restoration network: a hierarchical encoder of adaptive Transformer
// blocks and intra-patch blocks over `scales` resolutions, a decoder whose
// learnable weather-type queries cross-attend to the deepest features, and
// convolutional tails that climb back to full resolution against encoder
// skips. Output = tails(...) (+ input image when the global residual is on).

#include <string>

#include "mwformer/blocks.hpp"

namespace mwf {

struct AdaptivityConfig {
  bool local = true;    // hyper-generated depthwise kernels in FFNs
  bool global_att = true;  // hyper-generated Q/K/V projections
  bool channel = true;  // FiLM modulation before each patch embedding
};

struct BackboneConfig {
  std::size_t scales = 4;
  std::vector<std::size_t> channels{16, 32, 48, 64};  // per scale, pre width-multiplier
  std::vector<std::size_t> heads{1, 2, 2, 4};
  std::vector<std::size_t> blocks{2, 2, 2, 2};
  std::vector<std::size_t> intra_blocks{1, 1, 1, 1};
  std::size_t expansion = 2;
  std::size_t decoder_queries = 8;
  std::size_t v_dim = 64;
  AdaptivityConfig adapt;
  bool global_residual = true;
  double width = 1.0;

  /// Channel counts after the width multiplier, rounded to multiples of 4
  /// (intra-patch splitting and the default head counts need that).
  std::vector<std::size_t> scaled_channels() const {
    std::vector<std::size_t> out;
    for (std::size_t c : channels) {
      const double scaled = static_cast<double>(c) * width;
      std::size_t r = static_cast<std::size_t>(std::lround(scaled / 4.0)) * 4;
      out.push_back(std::max<std::size_t>(4, r));
    }
    return out;
  }

  std::size_t total_stride() const { return std::size_t(1) << scales; }

  void validate() const {
    if (scales < 1) throw ConfigError("backbone: needs at least one scale");
    if (channels.size() != scales || heads.size() != scales || blocks.size() != scales ||
        intra_blocks.size() != scales)
      throw ConfigError("backbone: per-scale lists must all have length " +
                        std::to_string(scales));
    if (width <= 0.0) throw ConfigError("backbone: width multiplier must be positive");
    const auto ch = scaled_channels();
    for (std::size_t s = 0; s < scales; ++s) {
      if (s > 0 && ch[s] <= ch[s - 1])
        throw ConfigError("backbone: channels must be strictly increasing across scales");
      if (heads[s] == 0 || ch[s] % heads[s] != 0)
        throw ConfigError("backbone: heads must divide channels at scale " +
                          std::to_string(s));
      if (intra_blocks[s] > 0 && ch[s] % 4 != 0)
        throw ConfigError("backbone: intra-patch blocks need channels divisible by 4");
    }
    if (decoder_queries == 0) throw ConfigError("backbone: needs at least one decoder query");
    if (v_dim == 0) throw ConfigError("backbone: v_dim must be positive");
    if (expansion == 0) throw ConfigError("backbone: FFN expansion must be positive");
  }
};

template <typename T>
class Backbone {
 public:
  Backbone(ParameterStore<T>& store, Rng& rng, BackboneConfig cfg,
           const std::string& prefix = "res")
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    ch_ = cfg_.scaled_channels();

    for (std::size_t s = 0; s < cfg_.scales; ++s) {
      Stage st;
      const std::string sp = prefix + ".enc" + std::to_string(s);
      st.in_ch = s == 0 ? 3 : ch_[s - 1];
      st.out_ch = ch_[s];
      if (cfg_.adapt.channel) {
        st.film_gen = HyperMLP<T>(store, rng, sp + ".film_gen", cfg_.v_dim, 2 * st.in_ch,
                                  film_identity_bias<T>(st.in_ch));
        store.declare_adaptive(sp + ".film.gamma", {st.in_ch});
        store.declare_adaptive(sp + ".film.beta", {st.in_ch});
      }
      st.patch_w = store.add(
          sp + ".patch.w", init_fanin_uniform<T>(rng, {st.out_ch, st.in_ch, 3, 3}, st.in_ch * 9));
      st.patch_b = store.add(sp + ".patch.b", Tensor<T>::zeros({st.out_ch}));
      for (std::size_t b = 0; b < cfg_.blocks[s]; ++b)
        st.blocks.emplace_back(store, rng, sp + ".block" + std::to_string(b), st.out_ch,
                               cfg_.heads[s], cfg_.expansion, cfg_.v_dim,
                               cfg_.adapt.global_att, cfg_.adapt.local);
      for (std::size_t b = 0; b < cfg_.intra_blocks[s]; ++b)
        st.intra.emplace_back(store, rng, sp + ".intra" + std::to_string(b), st.out_ch,
                              cfg_.expansion, cfg_.v_dim, cfg_.adapt.global_att,
                              cfg_.adapt.local);
      stages_.push_back(std::move(st));
    }

    // Decoder: all fixed parameters — by design no adaptive slot may carry a
    // decoder name.
    const std::string dp = prefix + ".dec";
    const std::size_t cd = ch_.back();
    queries_ = store.add(dp + ".queries",
                         init_fanin_uniform<T>(rng, {cfg_.decoder_queries, cd}, cd));
    ln_tok_g_ = store.add(dp + ".ln_tok.g", Tensor<T>::full({cd}, T(1)));
    ln_tok_b_ = store.add(dp + ".ln_tok.b", Tensor<T>::zeros({cd}));
    q_wq_ = store.add(dp + ".attn.wq", init_fanin_uniform<T>(rng, {cd, cd}, cd));
    q_wk_ = store.add(dp + ".attn.wk", init_fanin_uniform<T>(rng, {cd, cd}, cd));
    q_wv_ = store.add(dp + ".attn.wv", init_fanin_uniform<T>(rng, {cd, cd}, cd));
    q_wo_ = store.add(dp + ".attn.wo", init_fanin_uniform<T>(rng, {cd, cd}, cd));
    q_wo_b_ = store.add(dp + ".attn.wo_b", Tensor<T>::zeros({cd}));
    ln_q_g_ = store.add(dp + ".ln_q.g", Tensor<T>::full({cd}, T(1)));
    ln_q_b_ = store.add(dp + ".ln_q.b", Tensor<T>::zeros({cd}));
    ffn_w1_ = store.add(dp + ".ffn.w1", init_fanin_uniform<T>(rng, {cd, 2 * cd}, cd));
    ffn_b1_ = store.add(dp + ".ffn.b1", Tensor<T>::zeros({2 * cd}));
    ffn_w2_ = store.add(dp + ".ffn.w2", init_fanin_uniform<T>(rng, {2 * cd, cd}, 2 * cd));
    ffn_b2_ = store.add(dp + ".ffn.b2", Tensor<T>::zeros({cd}));

    for (std::size_t s = cfg_.scales - 1; s >= 1; --s) {
      tail_w_.push_back(store.add(
          dp + ".tail" + std::to_string(s) + ".w",
          init_fanin_uniform<T>(rng, {ch_[s - 1], ch_[s], 3, 3}, ch_[s] * 9)));
      tail_b_.push_back(
          store.add(dp + ".tail" + std::to_string(s) + ".b", Tensor<T>::zeros({ch_[s - 1]})));
    }
    // Final 3-channel projection is zero-initialized: with the global
    // residual the whole network starts as the identity map.
    out_w_ = store.add(dp + ".out.w", Tensor<T>::zeros({3, ch_[0], 3, 3}));
    out_b_ = store.add(dp + ".out.b", Tensor<T>::zeros({3}));
  }

  const BackboneConfig& config() const { return cfg_; }
  const std::vector<std::size_t>& channel_plan() const { return ch_; }

  /// Full forward pass: generate adaptive parameters from v, run the
  /// encoder pyramid, decode to a [3,H,W] image. No clamping here —
  /// inference wrappers clamp, training never does.
  Tensor<T> restore(const Tensor<T>& image, const Tensor<T>& v) const {
    if (image.rank() != 3 || image.size(0) != 3)
      throw DimensionError("restore: expects a [3,H,W] image, got " +
                           shape_str(image.shape()));
    const std::size_t h = image.size(1), w = image.size(2);
    const std::size_t stride = cfg_.total_stride();
    if (h % stride != 0 || w % stride != 0 || h == 0 || w == 0)
      throw DimensionError("restore: spatial dims " + shape_str(image.shape()) +
                           " not divisible by the cumulative stride " +
                           std::to_string(stride));
    if (v.rank() != 1 || v.size(0) != cfg_.v_dim)
      throw DimensionError("restore: weather vector " + shape_str(v.shape()) +
                           " does not match configured dim " + std::to_string(cfg_.v_dim));

    // encoder pyramid; skips hold per-scale feature images
    std::vector<Tensor<T>> skips;
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    Tensor<T> x = image;
    std::size_t sh = h, sw = w;
    for (const Stage& st : stages_) {
      if (cfg_.adapt.channel) {
        FiLMParams<T> p = gen_film_params(st.film_gen, v, st.in_ch);
        x = film(x, p.gamma, p.beta);
      }
      x = conv2d(x, st.patch_w, st.patch_b, 2, 1);
      sh /= 2;
      sw /= 2;
      Tensor<T> tokens = image_to_tokens(x);
      for (const auto& blk : st.blocks) tokens = blk.forward(tokens, v, sh, sw);
      for (const auto& blk : st.intra) tokens = blk.forward(tokens, v, sh, sw);
      x = tokens_to_image(tokens, sh, sw);
      skips.push_back(x);
      dims.emplace_back(sh, sw);
    }

    // decoder: queries cross-attend to the deepest tokens
    const std::size_t cd = ch_.back();
    Tensor<T> tok = image_to_tokens(skips.back());
    Tensor<T> y = layer_norm(tok, ln_tok_g_, ln_tok_b_);
    Tensor<T> q = matmul(queries_, q_wq_);
    Tensor<T> k = matmul(y, q_wk_);
    Tensor<T> vv = matmul(y, q_wv_);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cd)));
    Tensor<T> att = softmax(mul_scalar(matmul(q, transpose(k)), scale), 1);
    Tensor<T> ctx_q = linear(matmul(att, vv), q_wo_, q_wo_b_);
    Tensor<T> q2 = add(queries_, ctx_q);
    Tensor<T> qn = layer_norm(q2, ln_q_g_, ln_q_b_);
    Tensor<T> qf = add(q2, linear(gelu(linear(qn, ffn_w1_, ffn_b1_)), ffn_w2_, ffn_b2_));
    Tensor<T> ctx = mean_rows(qf);  // one weather-context vector
    Tensor<T> fused = add_rowvec(tok, ctx);

    // tails: climb the pyramid against the skips
    Tensor<T> img = tokens_to_image(fused, dims.back().first, dims.back().second);
    for (std::size_t i = 0; i < tail_w_.size(); ++i) {
      const std::size_t s = cfg_.scales - 1 - i;  // conv maps C_s -> C_{s-1}
      img = upsample_bilinear2x(img);
      img = conv2d(img, tail_w_[i], tail_b_[i], 1, 1);
      img = gelu(add(img, skips[s - 1]));
    }
    img = upsample_bilinear2x(img);  // back to full resolution
    Tensor<T> out = conv2d(img, out_w_, out_b_, 1, 1);
    if (cfg_.global_residual) out = add(out, image);
    return out;
  }

 private:
  struct Stage {
    HyperMLP<T> film_gen;
    Tensor<T> patch_w, patch_b;
    std::vector<EncoderBlock<T>> blocks;
    std::vector<IntraPatchBlock<T>> intra;
    std::size_t in_ch = 0, out_ch = 0;
  };

  BackboneConfig cfg_;
  std::vector<std::size_t> ch_;
  std::vector<Stage> stages_;
  Tensor<T> queries_;
  Tensor<T> ln_tok_g_, ln_tok_b_, ln_q_g_, ln_q_b_;
  Tensor<T> q_wq_, q_wk_, q_wv_, q_wo_, q_wo_b_;
  Tensor<T> ffn_w1_, ffn_b1_, ffn_w2_, ffn_b2_;
  std::vector<Tensor<T>> tail_w_, tail_b_;
  Tensor<T> out_w_, out_b_;
};

/// Values clipped to [0,1]; used by inference wrappers only, never while
/// training (clamping would bias gradients).
template <typename T>
Tensor<T> clamp01(const Tensor<T>& x) {
  std::vector<T> v(x.values());
  for (T& e : v) e = std::min(T(1), std::max(T(0), e));
  return Tensor<T>::from(x.shape(), std::move(v));
}

}  // namespace mwf
