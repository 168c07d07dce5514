#pragma once

// Deployment modes over a trained model. Four ways to run restoration:
//
//   infer_full     extract the degradation embedding from the input itself
//   infer_fixed    substitute a stored class-average embedding (skips the
//                  feature net -- the cheap path for known conditions)
//   infer_cascade  run several restoration passes for hybrid degradations,
//                  re-estimating the embedding between passes
//   route_expert   identify the dominant degradation and hand the image to
//                  a per-class restoration callable
//
// All modes are read-only over frozen parameters; none of them records
// autodiff state.

#include <algorithm>
#include <functional>
#include <iomanip>
#include <map>

#include "mwformer/model_io.hpp"
#include "mwformer/weather.hpp"

namespace mwf {

/// Per-class identification result: cosine similarity to each stored class
/// average, the softmax of those similarities, and the winning class.
struct WeatherScores {
  std::vector<std::string> classes;  ///< bank classes, in bank order
  std::vector<double> cosine;        ///< d_i = cos(v, v̄_i)
  std::vector<double> score;         ///< s_i = softmax(d)_i; sums to 1
  std::size_t best = 0;              ///< index of the winning class

  const std::string& best_class() const { return classes.at(best); }

  double cosine_for(const std::string& cls) const { return cosine.at(index_of(cls)); }
  double score_for(const std::string& cls) const { return score.at(index_of(cls)); }

 private:
  std::size_t index_of(const std::string& cls) const {
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == cls) return i;
    throw AbsentClassError("weather scores: no entry for class '" + cls + "'");
  }
};

/// Scores an embedding against every class average in the bank. Cosine
/// similarity is scale-invariant, so any positive rescaling of v yields the
/// same scores; a zero-norm embedding has no direction and is rejected.
template <typename T>
WeatherScores score_embedding(const Tensor<T>& v, const ClassAverageBank<T>& bank) {
  if (v.rank() != 1)
    throw DimensionError("score_embedding: embedding must be a vector, got " +
                         shape_str(v.shape()));
  if (bank.classes().empty())
    throw ContractError("score_embedding: class bank is empty");

  const auto norm_of = [](const T* p, std::size_t n) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += double(p[i]) * double(p[i]);
    return std::sqrt(acc);
  };

  const double vn = norm_of(v.data(), v.numel());
  if (vn == 0.0)
    throw DegenerateEmbeddingError("score_embedding: embedding has zero norm");

  WeatherScores out;
  out.classes = bank.classes();
  for (const std::string& cls : out.classes) {
    const Tensor<T>& mean = bank.get(cls);
    if (mean.numel() != v.numel())
      throw DimensionError("score_embedding: bank vector for '" + cls + "' has " +
                           std::to_string(mean.numel()) + " dims, embedding has " +
                           std::to_string(v.numel()));
    const double mn = norm_of(mean.data(), mean.numel());
    if (mn == 0.0)
      throw DegenerateEmbeddingError("score_embedding: class average for '" + cls +
                                     "' has zero norm");
    double dot = 0;
    for (std::size_t i = 0; i < v.numel(); ++i)
      dot += double(v.data()[i]) * double(mean.data()[i]);
    out.cosine.push_back(dot / (vn * mn));
  }

  // Softmax over the similarities, shifted by the max for stability.
  double hi = out.cosine[0];
  for (double d : out.cosine) hi = std::max(hi, d);
  double z = 0;
  for (double d : out.cosine) z += std::exp(d - hi);
  for (double d : out.cosine) out.score.push_back(std::exp(d - hi) / z);

  out.best = 0;
  for (std::size_t i = 1; i < out.score.size(); ++i)
    if (out.score[i] > out.score[out.best]) out.best = i;
  return out;
}

/// Identification: embed the image and score it against the bank.
inline WeatherScores weather_scores(const Model& m, const ClassAverageBank<float>& bank,
                                    const Tensor<float>& image) {
  NoGradGuard guard;
  return score_embedding(m.feature().extract(image), bank);
}

/// Fully adaptive restoration: the embedding comes from the input itself.
inline Tensor<float> infer_full(const Model& m, const Tensor<float>& image) {
  NoGradGuard guard;
  return m.backbone().restore(image, m.feature().extract(image));
}

/// Fixed-vector restoration: substitute the stored class average for the
/// feature net. The feature extractor never runs.
inline Tensor<float> infer_fixed(const Model& m, const ClassAverageBank<float>& bank,
                                 const std::string& cls, const Tensor<float>& image) {
  NoGradGuard guard;
  return m.backbone().restore(image, bank.get(cls));
}

/// Most chained restoration passes permitted in one cascade call. Guards
/// against accidentally unbounded stage lists; deeper chains have shown no
/// benefit and each stage costs a full forward pass.
inline constexpr std::size_t kMaxCascadeStages = 4;

/// Multi-stage restoration for hybrid degradations. The first stage uses the
/// stored average for `order[0]`; every later stage re-estimates the
/// embedding from the intermediate output (the remaining `order` entries
/// set the stage count, and supply the fixed vectors when
/// `fixed_vectors == true`). All stages run one shared weight set.
inline Tensor<float> infer_cascade(const Model& m, const ClassAverageBank<float>& bank,
                                   const Tensor<float>& image,
                                   const std::vector<std::string>& order,
                                   bool fixed_vectors = false) {
  if (order.empty()) throw ContractError("infer_cascade: stage order is empty");
  if (order.size() > kMaxCascadeStages)
    throw ContractError("infer_cascade: " + std::to_string(order.size()) +
                        " stages requested, limit is " +
                        std::to_string(kMaxCascadeStages));
  NoGradGuard guard;
  Tensor<float> y = m.backbone().restore(image, bank.get(order[0]));
  for (std::size_t stage = 1; stage < order.size(); ++stage) {
    const Tensor<float> v =
        fixed_vectors ? bank.get(order[stage]) : m.feature().extract(y);
    y = m.backbone().restore(y, v);
  }
  return y;
}

/// Default cascade order for streak+flake hybrids: removing streaks and the
/// haze veil first exposes the flakes for the second pass, which measures
/// better than the reverse order on synthetic hybrids.
inline std::vector<std::string> default_hybrid_order() {
  return {to_string(Weather::StreakHaze), to_string(Weather::Flake)};
}

/// Map from class name to a restoration callable. Callables may wrap
/// anything image-to-image -- the model itself, an external tool, a stub.
class ExpertRegistry {
 public:
  using Expert = std::function<Tensor<float>(const Tensor<float>&)>;

  void set(const std::string& cls, Expert fn) { experts_[cls] = std::move(fn); }
  bool has(const std::string& cls) const { return experts_.count(cls) != 0; }

  const Expert& get(const std::string& cls) const {
    auto it = experts_.find(cls);
    if (it == experts_.end())
      throw RoutingError("no expert registered for class '" + cls + "'");
    return it->second;
  }

  std::size_t size() const { return experts_.size(); }

 private:
  std::map<std::string, Expert> experts_;
};

/// Routed restoration result: the output, who produced it, and the score
/// vector that made the decision (kept for audit).
struct RoutedResult {
  Tensor<float> output;
  std::string chosen;
  WeatherScores scores;
};

/// Identify the dominant degradation, then delegate to that class's expert.
inline RoutedResult route_expert(const Model& m, const ClassAverageBank<float>& bank,
                                 const ExpertRegistry& registry,
                                 const Tensor<float>& image) {
  WeatherScores s = weather_scores(m, bank, image);
  const std::string& cls = s.best_class();
  const ExpertRegistry::Expert& expert = registry.get(cls);
  return RoutedResult{expert(image), cls, std::move(s)};
}

/// CRC of every weather-independent parameter, in declaration order. Two
/// calls bracketing a read-only operation must agree; a mismatch means the
/// operation mutated weights it had no business touching.
inline std::uint32_t param_checksum(const Model& m) {
  std::string bytes;
  for (const auto& e : m.store().entries()) {
    if (e.kind != ParamKind::Fixed) continue;
    const float* p = e.tensor.data();
    bytes.append(reinterpret_cast<const char*>(p), e.tensor.numel() * sizeof(float));
  }
  return detail::crc32_of(bytes);
}

/// One row per scored image: cosine similarities and softmax scores for the
/// three standard classes plus the winning class name. Classes absent from
/// a row's bank leave their cells empty.
inline void write_score_csv(const std::string& path,
                            const std::vector<std::pair<std::string, WeatherScores>>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << "image_id,d_drop,d_streak,d_flake,s_drop,s_streak,s_flake,argmax\n";
  os << std::setprecision(10);
  for (const auto& [id, s] : rows) {
    os << id;
    for (Weather w : kAllWeather) {
      os << ',';
      auto it = std::find(s.classes.begin(), s.classes.end(), to_string(w));
      if (it != s.classes.end()) os << s.cosine[std::size_t(it - s.classes.begin())];
    }
    for (Weather w : kAllWeather) {
      os << ',';
      auto it = std::find(s.classes.begin(), s.classes.end(), to_string(w));
      if (it != s.classes.end()) os << s.score[std::size_t(it - s.classes.begin())];
    }
    os << ',' << s.best_class() << '\n';
  }
  if (!os) throw IoError("failed writing '" + path + "'");
}

/// One row per sample: the image's embedding, its class label and split --
/// raw material for external projection/plotting tools.
inline void write_embeddings_csv(const std::string& path, const Model& m,
                                 const std::vector<WeatherSample>& samples) {
  NoGradGuard guard;
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  const std::size_t d = m.cfg().feature.out_dim;
  for (std::size_t i = 0; i < d; ++i) os << "dim_" << i << ',';
  os << "label,split\n";
  os << std::setprecision(9);
  for (const WeatherSample& s : samples) {
    Tensor<float> v = m.feature().extract(s.degraded);
    for (std::size_t i = 0; i < v.numel(); ++i) os << v.data()[i] << ',';
    os << to_string(s.classes.front()) << ',' << to_string(s.split) << '\n';
  }
  if (!os) throw IoError("failed writing '" + path + "'");
}

}  // namespace mwf
