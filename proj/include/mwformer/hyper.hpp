#pragma once

// Hyper-network machinery: small two-layer MLPs that map the weather vector
// v onto parameters of the restoration backbone (depthwise kernels, Q/K/V
// projections, FiLM scale/shift). A generator's own weights are fixed
// parameters; its *outputs* are the adaptive parameter set.

#include <string>

#include "mwformer/nn.hpp"
#include "mwformer/ops.hpp"

namespace mwf {

/// Two affine layers with a GELU between, hidden width 2*D. The second
/// layer's bias carries the designed at-init output pattern (delta kernel,
/// identity projection, unit FiLM scale), so at initialization the network
/// behaves approximately like its non-adaptive counterpart.
template <typename T>
class HyperMLP {
 public:
  HyperMLP() = default;

  HyperMLP(ParameterStore<T>& store, Rng& rng, const std::string& prefix, std::size_t d_in,
           std::size_t d_out, std::vector<T> out_bias_init) {
    if (out_bias_init.size() != d_out)
      throw ConfigError("HyperMLP " + prefix + ": bias init length " +
                        std::to_string(out_bias_init.size()) + " != output dim " +
                        std::to_string(d_out));
    d_in_ = d_in;
    d_out_ = d_out;
    const std::size_t hidden = 2 * d_in;
    w1_ = store.add(prefix + ".w1", init_fanin_uniform<T>(rng, {d_in, hidden}, d_in));
    b1_ = store.add(prefix + ".b1", Tensor<T>::zeros({hidden}));
    w2_ = store.add(prefix + ".w2", init_fanin_uniform<T>(rng, {hidden, d_out}, hidden));
    b2_ = store.add(prefix + ".b2", Tensor<T>::from({d_out}, std::move(out_bias_init)));
  }

  bool defined() const { return w1_.defined(); }
  std::size_t out_dim() const { return d_out_; }

  /// v: [d_in] -> flat parameter vector [d_out].
  Tensor<T> generate(const Tensor<T>& v) const {
    if (v.rank() != 1 || v.size(0) != d_in_)
      throw ConfigError("HyperMLP: v " + shape_str(v.shape()) + " does not match input dim " +
                        std::to_string(d_in_));
    Tensor<T> row = reshape(v, {1, d_in_});
    Tensor<T> h = gelu(linear(row, w1_, b1_));
    return reshape(linear(h, w2_, b2_), {d_out_});
  }

 private:
  std::size_t d_in_ = 0, d_out_ = 0;
  Tensor<T> w1_, b1_, w2_, b2_;
};

// ---------------------------------------------------------------------------
// designed at-init output patterns
// ---------------------------------------------------------------------------

/// Flat [C,1,3,3] delta-kernel bias: every channel's kernel starts as an
/// (approximate) identity convolution.
template <typename T>
std::vector<T> delta_kernel_bias(std::size_t channels) {
  std::vector<T> b(channels * 9, T(0));
  for (std::size_t c = 0; c < channels; ++c) b[c * 9 + 4] = T(1);
  return b;
}

/// Flat [d_in, d_out] bias: identity where the square permits, zeros outside.
template <typename T>
std::vector<T> identity_proj_bias(std::size_t d_in, std::size_t d_out) {
  std::vector<T> b(d_in * d_out, T(0));
  for (std::size_t i = 0; i < std::min(d_in, d_out); ++i) b[i * d_out + i] = T(1);
  return b;
}

/// Flat [2C] bias for a FiLM generator: gamma head 1, beta head 0.
template <typename T>
std::vector<T> film_identity_bias(std::size_t channels) {
  std::vector<T> b(2 * channels, T(0));
  for (std::size_t c = 0; c < channels; ++c) b[c] = T(1);
  return b;
}

// ---------------------------------------------------------------------------
// typed generation wrappers
// ---------------------------------------------------------------------------

/// Depthwise kernel from v. The owning HyperMLP must target C*9 outputs.
template <typename T>
Tensor<T> gen_dwc_kernel(const HyperMLP<T>& gen, const Tensor<T>& v, std::size_t channels) {
  if (gen.out_dim() != channels * 9)
    throw ConfigError("gen_dwc_kernel: generator emits " + std::to_string(gen.out_dim()) +
                      " values, request needs " + std::to_string(channels * 9));
  return reshape(gen.generate(v), {channels, 1, 3, 3});
}

/// One projection matrix from v; callers hold three independent generators
/// for W_q, W_k, W_v.
template <typename T>
Tensor<T> gen_proj_matrix(const HyperMLP<T>& gen, const Tensor<T>& v, std::size_t d_in,
                          std::size_t d_out) {
  if (gen.out_dim() != d_in * d_out)
    throw ConfigError("gen_proj_matrix: generator emits " + std::to_string(gen.out_dim()) +
                      " values, request needs " + std::to_string(d_in * d_out));
  return reshape(gen.generate(v), {d_in, d_out});
}

template <typename T>
struct FiLMParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// (gamma, beta) from v; generator targets 2C outputs, split gamma-first.
template <typename T>
FiLMParams<T> gen_film_params(const HyperMLP<T>& gen, const Tensor<T>& v,
                              std::size_t channels) {
  if (gen.out_dim() != 2 * channels)
    throw ConfigError("gen_film_params: generator emits " + std::to_string(gen.out_dim()) +
                      " values, request needs " + std::to_string(2 * channels));
  Tensor<T> flat = gen.generate(v);
  return FiLMParams<T>{slice(flat, 0, 0, channels), slice(flat, 0, channels, channels)};
}

}  // namespace mwf
