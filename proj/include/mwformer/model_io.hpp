#pragma once

// Model bundle (feature extractor + restoration backbone over one parameter
// store) and its checkpoint persistence conventions.
//
// Checkpoint layout: every trainable parameter is stored f32 under its own
// store name (e.g. "res.enc0.patch.w"). Reserved prefixes carry the rest:
//   __cfg.*   numeric echo of the model configuration (f64 vectors)
//   __meta.*  seeds, RNG state, training phase/step markers
//   __bank.*  class-average weather vectors with their sample counts
//   __opt.*   optimizer moments for mid-phase resume
// u64 values travel as two f64 scalars (".hi"/".lo"), each at most 2^32.

#include <optional>

#include "mwformer/backbone.hpp"
#include "mwformer/checkpoint.hpp"
#include "mwformer/config.hpp"
#include "mwformer/feature_extractor.hpp"

namespace mwf {

struct ModelConfig {
  BackboneConfig backbone;
  FeatureConfig feature;

  void validate() const {
    backbone.validate();
    feature.validate();
    if (backbone.v_dim != feature.out_dim)
      throw ConfigError("model: backbone expects weather vectors of size " +
                        std::to_string(backbone.v_dim) + " but the feature net emits " +
                        std::to_string(feature.out_dim));
  }
};

/// Reads a ModelConfig from parsed config text; absent keys keep defaults.
inline ModelConfig model_config_from(const Config& c) {
  ModelConfig m;
  BackboneConfig& b = m.backbone;
  b.scales = c.count("model.scales", b.scales);
  if (c.has("model.channels")) b.channels = c.count_list("model.channels");
  if (c.has("model.heads")) b.heads = c.count_list("model.heads");
  if (c.has("model.blocks")) b.blocks = c.count_list("model.blocks");
  if (c.has("model.intra_blocks")) b.intra_blocks = c.count_list("model.intra_blocks");
  b.expansion = c.count("model.expansion", b.expansion);
  b.decoder_queries = c.count("model.decoder_queries", b.decoder_queries);
  b.v_dim = c.count("model.v_dim", b.v_dim);
  b.width = c.number("model.width", b.width);
  b.global_residual = c.flag("model.global_residual", b.global_residual);
  b.adapt.local = c.flag("model.adapt.local", b.adapt.local);
  b.adapt.global_att = c.flag("model.adapt.global", b.adapt.global_att);
  b.adapt.channel = c.flag("model.adapt.channel", b.adapt.channel);

  FeatureConfig& f = m.feature;
  f.out_dim = c.count("feature.out_dim", b.v_dim);  // must feed the backbone
  if (c.has("feature.channels")) f.channels = c.count_list("feature.channels");
  if (c.has("feature.heads")) f.heads = c.count_list("feature.heads");
  f.expansion = c.count("feature.expansion", f.expansion);
  m.validate();
  return m;
}

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)), seed_(seed), rng_(seed) {
    cfg_.validate();
    // Construction order fixes the parameter-store order and therefore the
    // checkpoint entry order: feature net first, then the backbone.
    feat_.emplace(store_, rng_, cfg_.feature);
    net_.emplace(store_, rng_, cfg_.backbone);
  }

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& cfg() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  ParameterStore<float>& store() { return store_; }
  const ParameterStore<float>& store() const { return store_; }
  FeatureExtractor<float>& feature() { return *feat_; }
  const FeatureExtractor<float>& feature() const { return *feat_; }
  Backbone<float>& backbone() { return *net_; }
  const Backbone<float>& backbone() const { return *net_; }

 private:
  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  Rng rng_;
  ParameterStore<float> store_;
  std::optional<FeatureExtractor<float>> feat_;
  std::optional<Backbone<float>> net_;
};

inline void put_u64_split(Checkpoint& ck, const std::string& name, std::uint64_t v) {
  ck.put_scalar(name + ".hi", static_cast<double>(v >> 32));
  ck.put_scalar(name + ".lo", static_cast<double>(v & 0xffffffffull));
}

inline std::uint64_t get_u64_split(const Checkpoint& ck, const std::string& name) {
  return (static_cast<std::uint64_t>(ck.get_scalar(name + ".hi")) << 32) |
         static_cast<std::uint64_t>(ck.get_scalar(name + ".lo"));
}

namespace detail {

inline void put_counts(Checkpoint& ck, const std::string& name,
                       const std::vector<std::size_t>& v) {
  std::vector<double> d(v.begin(), v.end());
  ck.put_f64(name, {v.size()}, std::move(d));
}

inline std::vector<std::size_t> get_counts(const Checkpoint& ck, const std::string& name) {
  const Checkpoint::Entry& e = ck.entry(name);
  if (e.dtype != Checkpoint::Dtype::f64 || e.dims.size() != 1)
    throw IoError("checkpoint entry '" + name + "' is not a count vector");
  return std::vector<std::size_t>(e.f64.begin(), e.f64.end());
}

}  // namespace detail

/// Writes the model configuration echo, seeds, and all trainable parameters.
inline void save_model(const Model& m, Checkpoint& ck) {
  const BackboneConfig& b = m.cfg().backbone;
  ck.put_scalar("__cfg.scales", static_cast<double>(b.scales));
  detail::put_counts(ck, "__cfg.channels", b.channels);
  detail::put_counts(ck, "__cfg.heads", b.heads);
  detail::put_counts(ck, "__cfg.blocks", b.blocks);
  detail::put_counts(ck, "__cfg.intra_blocks", b.intra_blocks);
  ck.put_scalar("__cfg.expansion", static_cast<double>(b.expansion));
  ck.put_scalar("__cfg.decoder_queries", static_cast<double>(b.decoder_queries));
  ck.put_scalar("__cfg.v_dim", static_cast<double>(b.v_dim));
  ck.put_f64("__cfg.adapt", {3},
             {b.adapt.local ? 1.0 : 0.0, b.adapt.global_att ? 1.0 : 0.0,
              b.adapt.channel ? 1.0 : 0.0});
  ck.put_scalar("__cfg.global_residual", b.global_residual ? 1.0 : 0.0);
  ck.put_scalar("__cfg.width", b.width);

  const FeatureConfig& f = m.cfg().feature;
  ck.put_scalar("__cfg.feat.out_dim", static_cast<double>(f.out_dim));
  detail::put_counts(ck, "__cfg.feat.channels", f.channels);
  detail::put_counts(ck, "__cfg.feat.heads", f.heads);
  ck.put_scalar("__cfg.feat.expansion", static_cast<double>(f.expansion));

  put_u64_split(ck, "__meta.seed", m.seed());
  put_u64_split(ck, "__meta.rng", m.rng().state());

  for (const auto& e : m.store().entries())
    if (e.kind == ParamKind::Fixed) ck.put_f32(e.name, e.shape, e.tensor.values());
}

inline ModelConfig config_from_checkpoint(const Checkpoint& ck) {
  ModelConfig m;
  BackboneConfig& b = m.backbone;
  b.scales = static_cast<std::size_t>(ck.get_scalar("__cfg.scales"));
  b.channels = detail::get_counts(ck, "__cfg.channels");
  b.heads = detail::get_counts(ck, "__cfg.heads");
  b.blocks = detail::get_counts(ck, "__cfg.blocks");
  b.intra_blocks = detail::get_counts(ck, "__cfg.intra_blocks");
  b.expansion = static_cast<std::size_t>(ck.get_scalar("__cfg.expansion"));
  b.decoder_queries = static_cast<std::size_t>(ck.get_scalar("__cfg.decoder_queries"));
  b.v_dim = static_cast<std::size_t>(ck.get_scalar("__cfg.v_dim"));
  const auto& adapt = ck.get_f64("__cfg.adapt", {3});
  b.adapt = {adapt[0] != 0.0, adapt[1] != 0.0, adapt[2] != 0.0};
  b.global_residual = ck.get_scalar("__cfg.global_residual") != 0.0;
  b.width = ck.get_scalar("__cfg.width");

  FeatureConfig& f = m.feature;
  f.out_dim = static_cast<std::size_t>(ck.get_scalar("__cfg.feat.out_dim"));
  f.channels = detail::get_counts(ck, "__cfg.feat.channels");
  f.heads = detail::get_counts(ck, "__cfg.feat.heads");
  f.expansion = static_cast<std::size_t>(ck.get_scalar("__cfg.feat.expansion"));
  m.validate();
  return m;
}

/// Rebuilds the model from a checkpoint. Every parameter the configuration
/// implies must be present with its exact shape, otherwise this throws.
inline Model load_model(const Checkpoint& ck) {
  Model m(config_from_checkpoint(ck), get_u64_split(ck, "__meta.seed"));
  for (const auto& e : m.store().entries()) {
    if (e.kind != ParamKind::Fixed) continue;
    const std::vector<float>& src = ck.get_f32(e.name, e.shape);
    Tensor<float> t = e.tensor;  // shared handle into the store
    std::copy(src.begin(), src.end(), t.data());
  }
  m.rng().set_state(get_u64_split(ck, "__meta.rng"));
  return m;
}

inline void save_bank(const ClassAverageBank<float>& bank, Checkpoint& ck) {
  for (const std::string& cls : bank.classes()) {
    const Tensor<float>& mean = bank.get(cls);
    ck.put_f32("__bank." + cls, mean.shape(), mean.values());
    ck.put_scalar("__bank.n." + cls, static_cast<double>(bank.samples(cls)));
  }
}

inline ClassAverageBank<float> load_bank(const Checkpoint& ck) {
  ClassAverageBank<float> bank;
  for (const auto& e : ck.entries()) {
    if (e.name.rfind("__bank.", 0) != 0 || e.name.rfind("__bank.n.", 0) == 0) continue;
    const std::string cls = e.name.substr(7);
    Tensor<float> mean = Tensor<float>::from(e.dims, std::vector<float>(e.f32));
    bank.set(cls, mean,
             static_cast<std::uint64_t>(ck.get_scalar("__bank.n." + cls)));
  }
  return bank;
}

}  // namespace mwf
