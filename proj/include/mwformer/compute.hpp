#pragma once

// Analytic parameter and MAC accounting for the restoration network and the
// weather feature network. The walkers mirror the constructors in
// backbone.hpp / feature_extractor.hpp layer for layer, so parameter counts
// can be cross-checked against a live ParameterStore.
//
// Counting conventions: a MAC is one multiply-accumulate inside a matmul,
// convolution, attention product, or hyper-network evaluation. Elementwise
// work (activations, normalization, FiLM application, residuals, bilinear
// interpolation) is not counted.

#include "mwformer/backbone.hpp"
#include "mwformer/feature_extractor.hpp"

namespace mwf {

namespace macs {

/// [n, d_in] x [d_in, d_out] matmul.
inline std::size_t linear(std::size_t n, std::size_t d_in, std::size_t d_out) {
  return n * d_in * d_out;
}

inline std::size_t conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k,
                          std::size_t oh, std::size_t ow) {
  return out_ch * oh * ow * in_ch * k * k;
}

inline std::size_t depthwise(std::size_t ch, std::size_t k, std::size_t oh,
                             std::size_t ow) {
  return ch * oh * ow * k * k;
}

/// Attention core (logit matrix + value aggregation) for n_q queries against
/// n_kv keys at total width d. Head count does not change the total.
inline std::size_t attention(std::size_t n_q, std::size_t n_kv, std::size_t d) {
  return 2 * n_q * n_kv * d;
}

/// One evaluation of the two-layer weight generator (hidden width 2*d_in).
inline std::size_t hyper(std::size_t d_in, std::size_t d_out) {
  return linear(1, d_in, 2 * d_in) + linear(1, 2 * d_in, d_out);
}

}  // namespace macs

struct ComputeBreakdown {
  std::size_t fixed_params = 0;     ///< trainable parameters (generators included)
  std::size_t adaptive_params = 0;  ///< parameters produced at runtime from v
  std::size_t macs = 0;             ///< one forward pass

  std::size_t total_params() const { return fixed_params + adaptive_params; }
};

namespace detail {

inline std::size_t hyper_params(std::size_t d_in, std::size_t d_out) {
  const std::size_t hidden = 2 * d_in;
  return d_in * hidden + hidden + hidden * d_out + d_out;
}

/// Token-mixing block: accounts one EncoderBlock at width `c`, `tokens`
/// positions, expansion `e`. Adaptive branches add their generators.
inline void count_encoder_block(ComputeBreakdown& out, std::size_t c, std::size_t e,
                                std::size_t v_dim, bool adapt_global, bool adapt_local,
                                std::size_t tokens) {
  const std::size_t ec = e * c;
  out.fixed_params += 4 * c;                    // two layer norms
  out.fixed_params += c * c + c;                // output projection
  out.fixed_params += c * ec + ec + ec * c + c; // FFN linears

  if (adapt_global) {
    out.fixed_params += 3 * hyper_params(v_dim, c * c);
    out.adaptive_params += 3 * c * c;
    out.macs += 3 * macs::hyper(v_dim, c * c);
  } else {
    out.fixed_params += 3 * c * c;
  }
  if (adapt_local) {
    out.fixed_params += hyper_params(v_dim, ec * 9);
    out.adaptive_params += ec * 9;
    out.macs += macs::hyper(v_dim, ec * 9);
  } else {
    out.fixed_params += ec * 9;
  }

  out.macs += 3 * macs::linear(tokens, c, c);   // Q, K, V projections
  out.macs += macs::attention(tokens, tokens, c);
  out.macs += macs::linear(tokens, c, c);       // output projection
  out.macs += macs::linear(tokens, c, ec);      // FFN expand
  out.macs += macs::depthwise(ec, 3, 1, tokens);
  out.macs += macs::linear(tokens, ec, c);      // FFN contract
}

}  // namespace detail

inline ComputeBreakdown count_backbone(const BackboneConfig& cfg, std::size_t h,
                                       std::size_t w) {
  cfg.validate();
  if (h % cfg.total_stride() != 0 || w % cfg.total_stride() != 0)
    throw DimensionError("count_backbone: " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by total stride " +
                         std::to_string(cfg.total_stride()));
  const std::vector<std::size_t> ch = cfg.scaled_channels();
  ComputeBreakdown out;

  for (std::size_t s = 0; s < cfg.scales; ++s) {
    const std::size_t in_ch = s == 0 ? 3 : ch[s - 1];
    const std::size_t out_ch = ch[s];
    const std::size_t hs = h >> (s + 1), ws = w >> (s + 1);
    const std::size_t tokens = hs * ws;

    if (cfg.adapt.channel) {
      out.fixed_params += detail::hyper_params(cfg.v_dim, 2 * in_ch);
      out.adaptive_params += 2 * in_ch;
      out.macs += macs::hyper(cfg.v_dim, 2 * in_ch);
    }
    out.fixed_params += out_ch * in_ch * 9 + out_ch;
    out.macs += macs::conv2d(in_ch, out_ch, 3, hs, ws);

    for (std::size_t b = 0; b < cfg.blocks[s]; ++b)
      detail::count_encoder_block(out, out_ch, cfg.expansion, cfg.v_dim,
                                  cfg.adapt.global_att, cfg.adapt.local, tokens);
    // Intra-patch block: one plain block at quarter width on the 2x-finer grid.
    for (std::size_t b = 0; b < cfg.intra_blocks[s]; ++b)
      detail::count_encoder_block(out, out_ch / 4, cfg.expansion, cfg.v_dim,
                                  cfg.adapt.global_att, cfg.adapt.local, 4 * tokens);
  }

  // Decoder: query cross-attention plus the upsampling tail. All fixed.
  const std::size_t cd = ch.back();
  const std::size_t nq = cfg.decoder_queries;
  const std::size_t n3 = (h >> cfg.scales) * (w >> cfg.scales);
  out.fixed_params += nq * cd;                       // queries
  out.fixed_params += 2 * cd + 2 * cd;               // both layer norms
  out.fixed_params += 4 * cd * cd + cd;              // wq/wk/wv/wo + wo bias
  out.fixed_params += cd * 2 * cd + 2 * cd + 2 * cd * cd + cd;  // FFN
  out.macs += macs::linear(nq, cd, cd);              // queries -> Q
  out.macs += 2 * macs::linear(n3, cd, cd);          // tokens -> K, V
  out.macs += macs::attention(nq, n3, cd);
  out.macs += macs::linear(nq, cd, cd);              // output projection
  out.macs += macs::linear(nq, cd, 2 * cd) + macs::linear(nq, 2 * cd, cd);

  for (std::size_t s = cfg.scales - 1; s >= 1; --s) {
    out.fixed_params += ch[s - 1] * ch[s] * 9 + ch[s - 1];
    out.macs += macs::conv2d(ch[s], ch[s - 1], 3, h >> s, w >> s);
  }
  out.fixed_params += 3 * ch[0] * 9 + 3;             // final projection to RGB
  out.macs += macs::conv2d(ch[0], 3, 3, h, w);
  return out;
}

inline ComputeBreakdown count_feature(const FeatureConfig& cfg, std::size_t h,
                                      std::size_t w) {
  cfg.validate();
  if (h % cfg.total_stride() != 0 || w % cfg.total_stride() != 0)
    throw DimensionError("count_feature: " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by total stride " +
                         std::to_string(cfg.total_stride()));
  const std::size_t de = cfg.embed_dim();
  ComputeBreakdown out;
  for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
    const std::size_t in_ch = s == 0 ? 3 : cfg.channels[s - 1];
    const std::size_t out_ch = cfg.channels[s];
    const std::size_t hs = h >> (s + 1), ws = w >> (s + 1);
    const std::size_t tokens = hs * ws;
    out.fixed_params += out_ch * in_ch * 9 + out_ch;
    out.macs += macs::conv2d(in_ch, out_ch, 3, hs, ws);
    detail::count_encoder_block(out, out_ch, cfg.expansion, 1, false, false, tokens);
    out.macs += macs::linear(out_ch, tokens, out_ch);  // Gram matrix
    const std::size_t tri = out_ch * (out_ch + 1) / 2;
    out.fixed_params += tri * de + de;
    out.macs += macs::linear(1, tri, de);
  }
  out.fixed_params += cfg.channels.size() * de * cfg.out_dim + cfg.out_dim;
  out.macs += macs::linear(1, cfg.channels.size() * de, cfg.out_dim);
  return out;
}

struct ComputeCount {
  ComputeBreakdown backbone;
  ComputeBreakdown feature;

  std::size_t total_params() const {
    return backbone.total_params() + feature.total_params();
  }
  std::size_t trainable_params() const {
    return backbone.fixed_params + feature.fixed_params;
  }
  /// One full degradation-conditioned restoration: feature pass + generator
  /// evaluations + backbone pass.
  std::size_t total_macs() const { return backbone.macs + feature.macs; }
};

inline ComputeCount count_compute(const BackboneConfig& bcfg, const FeatureConfig& fcfg,
                                  std::size_t h, std::size_t w) {
  return {count_backbone(bcfg, h, w), count_feature(fcfg, h, w)};
}

}  // namespace mwf
