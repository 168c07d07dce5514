#pragma once

// Weather feature extraction: a small two-stage encoder whose per-stage Gram
// statistics are projected into a single degradation embedding v. Trained
// with a pairwise cosine-margin loss so images that share a degradation
// cluster regardless of content.

#include <map>
#include <string>

#include "mwformer/blocks.hpp"

namespace mwf {

enum class VectorSource { computed, class_average, user_supplied };

/// A degradation embedding plus how it was obtained.
template <typename T>
struct WeatherVector {
  Tensor<T> values;
  VectorSource source = VectorSource::computed;
};

/// Channel-by-channel inner products of a feature map, normalized by the
/// spatial extent: G = (1/(H*W)) * M * M^T with M the [C, H*W] flattening.
/// Content position drops out entirely, which is what makes the statistic
/// weather-like rather than scene-like.
template <typename T>
Tensor<T> gram(const Tensor<T>& f) {
  if (f.rank() != 3)
    throw DimensionError("gram: expects a [C,H,W] feature map, got " + shape_str(f.shape()));
  const std::size_t c = f.size(0), hw = f.size(1) * f.size(2);
  if (hw == 0) throw DimensionError("gram: empty spatial dims in " + shape_str(f.shape()));
  Tensor<T> m = reshape(f, {c, hw});
  return mul_scalar(matmul(m, transpose(m)), static_cast<T>(1.0 / static_cast<double>(hw)));
}

struct FeatureConfig {
  std::size_t out_dim = 64;                  // dimension D of v
  std::vector<std::size_t> channels{16, 32}; // per-stage widths
  std::vector<std::size_t> heads{1, 2};
  std::size_t expansion = 2;

  std::size_t embed_dim() const { return std::min<std::size_t>(64, out_dim); }
  std::size_t total_stride() const { return std::size_t(1) << channels.size(); }

  void validate() const {
    if (out_dim == 0) throw ConfigError("feature net: out_dim must be positive");
    if (channels.empty() || channels.size() != heads.size())
      throw ConfigError("feature net: channels/heads lists must be non-empty and equal length");
    for (std::size_t s = 0; s < channels.size(); ++s)
      if (heads[s] == 0 || channels[s] % heads[s] != 0)
        throw ConfigError("feature net: heads must divide channels at stage " +
                          std::to_string(s));
    if (expansion == 0) throw ConfigError("feature net: FFN expansion must be positive");
  }
};

template <typename T>
class FeatureExtractor {
 public:
  FeatureExtractor(ParameterStore<T>& store, Rng& rng, FeatureConfig cfg,
                   const std::string& prefix = "feat")
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t de = cfg_.embed_dim();
    for (std::size_t s = 0; s < cfg_.channels.size(); ++s) {
      Stage st;
      const std::string sp = prefix + ".stage" + std::to_string(s);
      st.in_ch = s == 0 ? 3 : cfg_.channels[s - 1];
      st.out_ch = cfg_.channels[s];
      st.patch_w = store.add(
          sp + ".patch.w", init_fanin_uniform<T>(rng, {st.out_ch, st.in_ch, 3, 3}, st.in_ch * 9));
      st.patch_b = store.add(sp + ".patch.b", Tensor<T>::zeros({st.out_ch}));
      // plain (non-adaptive) block: v is not an input to its own computation
      st.block = EncoderBlock<T>(store, rng, sp + ".block", st.out_ch, cfg_.heads[s],
                                 cfg_.expansion, /*v_dim=*/1, false, false);
      const std::size_t tri = st.out_ch * (st.out_ch + 1) / 2;
      st.proj_w = store.add(sp + ".proj.w", init_fanin_uniform<T>(rng, {tri, de}, tri));
      st.proj_b = store.add(sp + ".proj.b", Tensor<T>::zeros({de}));
      stages_.push_back(std::move(st));
    }
    const std::size_t fused = cfg_.channels.size() * de;
    fuse_w_ = store.add(prefix + ".fuse.w",
                        init_fanin_uniform<T>(rng, {fused, cfg_.out_dim}, fused));
    fuse_b_ = store.add(prefix + ".fuse.b", Tensor<T>::zeros({cfg_.out_dim}));
  }

  const FeatureConfig& config() const { return cfg_; }

  /// image [3,H,W] -> v [D]. Pure per-image function: no batch coupling.
  Tensor<T> extract(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.size(0) != 3)
      throw DimensionError("extract: expects a [3,H,W] image, got " +
                           shape_str(image.shape()));
    const std::size_t stride = cfg_.total_stride();
    if (image.size(1) % stride != 0 || image.size(2) % stride != 0 || image.size(1) == 0 ||
        image.size(2) == 0)
      throw DimensionError("extract: spatial dims " + shape_str(image.shape()) +
                           " not divisible by the cumulative stride " +
                           std::to_string(stride));

    const Tensor<T> no_v;  // blocks here are non-adaptive and never read it
    Tensor<T> x = image;
    std::size_t h = image.size(1), w = image.size(2);
    std::vector<Tensor<T>> embeds;
    for (const Stage& st : stages_) {
      x = conv2d(x, st.patch_w, st.patch_b, 2, 1);
      h /= 2;
      w /= 2;
      Tensor<T> tokens = st.block.forward(image_to_tokens(x), no_v, h, w);
      x = tokens_to_image(tokens, h, w);
      Tensor<T> tri = upper_tri_vec(gram(x));
      embeds.push_back(
          gelu(linear(reshape(tri, {1, tri.size(0)}), st.proj_w, st.proj_b)));
    }
    Tensor<T> fused = linear(concat(embeds, 1), fuse_w_, fuse_b_);
    return reshape(fused, {cfg_.out_dim});
  }

 private:
  struct Stage {
    std::size_t in_ch = 0, out_ch = 0;
    Tensor<T> patch_w, patch_b;
    EncoderBlock<T> block;
    Tensor<T> proj_w, proj_b;
  };

  FeatureConfig cfg_;
  std::vector<Stage> stages_;
  Tensor<T> fuse_w_, fuse_b_;
};

/// Pairwise cosine-margin objective over every unordered pair in the batch:
/// same-label pairs pay [m - d]_+ (pulled above margin m), different-label
/// pairs pay [d]_+ (pushed to non-positive similarity). The clamp on the
/// cross term keeps the loss non-negative with a zero at perfect separation.
template <typename T>
Tensor<T> contrastive_loss(const std::vector<Tensor<T>>& vectors,
                           const std::vector<int>& labels, T margin = T(0.5)) {
  if (vectors.size() < 2)
    throw ContractError("contrastive_loss: needs at least 2 vectors, got " +
                        std::to_string(vectors.size()));
  if (vectors.size() != labels.size())
    throw ContractError("contrastive_loss: " + std::to_string(vectors.size()) +
                        " vectors vs " + std::to_string(labels.size()) + " labels");
  if (!(margin > T(0)) || margin > T(1))
    throw ConfigError("contrastive_loss: margin must lie in (0, 1]");

  Tensor<T> loss = Tensor<T>::scalar(T(0));
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    for (std::size_t j = i + 1; j < vectors.size(); ++j) {
      Tensor<T> d = cosine_similarity(vectors[i], vectors[j]);
      Tensor<T> term = labels[i] == labels[j]
                           ? relu(add_scalar(mul_scalar(d, T(-1)), margin))
                           : relu(d);
      loss = add(loss, term);
    }
  }
  return loss;
}

/// Arithmetic mean of the vectors whose label matches `cls`.
template <typename T>
Tensor<T> average_feature(const std::vector<Tensor<T>>& vectors,
                          const std::vector<int>& labels, int cls) {
  if (vectors.size() != labels.size())
    throw ContractError("average_feature: vector/label count mismatch");
  Tensor<T> sum;
  std::size_t n = 0;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (labels[i] != cls) continue;
    sum = n == 0 ? vectors[i] : add(sum, vectors[i]);
    ++n;
  }
  if (n == 0)
    throw AbsentClassError("average_feature: no vectors labelled " + std::to_string(cls));
  return mul_scalar(sum, static_cast<T>(1.0 / static_cast<double>(n)));
}

/// Frozen per-class mean embeddings, for inference without the feature net.
template <typename T>
class ClassAverageBank {
 public:
  void set(const std::string& cls, Tensor<T> mean, std::uint64_t samples) {
    if (mean.rank() != 1)
      throw DimensionError("class bank: mean for '" + cls + "' must be a vector, got " +
                           shape_str(mean.shape()));
    entries_[cls] = Entry{std::move(mean), samples};
  }

  bool has(const std::string& cls) const { return entries_.count(cls) != 0; }

  const Tensor<T>& get(const std::string& cls) const {
    auto it = entries_.find(cls);
    if (it == entries_.end()) {
      std::string known;
      for (const auto& [name, e] : entries_) known += (known.empty() ? "" : ", ") + name;
      throw AbsentClassError("class bank: no average stored for '" + cls +
                             "' (available: " + (known.empty() ? "none" : known) + ")");
    }
    return it->second.mean;
  }

  std::uint64_t samples(const std::string& cls) const {
    auto it = entries_.find(cls);
    if (it == entries_.end())
      throw AbsentClassError("class bank: no average stored for '" + cls + "'");
    return it->second.samples;
  }

  std::vector<std::string> classes() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }

  bool empty() const { return entries_.empty(); }

 private:
  struct Entry {
    Tensor<T> mean;
    std::uint64_t samples = 0;
  };
  std::map<std::string, Entry> entries_;  // ordered: stable iteration for checkpoints
};

}  // namespace mwf
