#pragma once

// Parameter bookkeeping and the optimizer.
//
// Every trainable leaf lives in a ParameterStore under a unique dotted name,
// tagged as either a fixed parameter or an *adaptive slot* — a parameter
// whose value is regenerated from the weather vector v on every forward and
// therefore has a declared shape but no stored tensor. The store is the
// single source of truth for the fixed/adaptive partition, parameter counts,
// checkpoint traversal order, and optimizer wiring.

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "mwformer/ops.hpp"
#include "mwformer/tensor.hpp"

namespace mwf {

enum class ParamKind { Fixed, Adaptive };

template <typename T>
struct ParamEntry {
  std::string name;
  ParamKind kind;
  Shape shape;
  Tensor<T> tensor;  // defined only for Fixed entries
};

template <typename T>
class ParameterStore {
 public:
  /// Registers a trainable leaf. The tensor is marked requires_grad here.
  Tensor<T> add(const std::string& name, Tensor<T> init) {
    check_new(name);
    init.set_requires_grad(true);
    entries_.push_back(ParamEntry<T>{name, ParamKind::Fixed, init.shape(), init});
    index_[name] = entries_.size() - 1;
    return init;
  }

  /// Declares a hyper-generated parameter slot: shape is fixed by config,
  /// values are produced per forward pass from v.
  void declare_adaptive(const std::string& name, Shape shape) {
    check_new(name);
    entries_.push_back(ParamEntry<T>{name, ParamKind::Adaptive, std::move(shape), Tensor<T>()});
    index_[name] = entries_.size() - 1;
  }

  const std::vector<ParamEntry<T>>& entries() const { return entries_; }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const ParamEntry<T>& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ContractError("ParameterStore: unknown parameter '" + name + "'");
    return entries_[it->second];
  }

  Tensor<T> get(const std::string& name) const {
    const ParamEntry<T>& e = entry(name);
    if (e.kind != ParamKind::Fixed)
      throw ContractError("ParameterStore: '" + name + "' is an adaptive slot, not a stored tensor");
    return e.tensor;
  }

  std::size_t count_fixed() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.kind == ParamKind::Fixed) n += shape_numel(e.shape);
    return n;
  }

  std::size_t count_adaptive() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.kind == ParamKind::Adaptive) n += shape_numel(e.shape);
    return n;
  }

  std::vector<ParamEntry<T>> fixed_entries() const {
    std::vector<ParamEntry<T>> out;
    for (const auto& e : entries_)
      if (e.kind == ParamKind::Fixed) out.push_back(e);
    return out;
  }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_)
      if (e.kind == ParamKind::Fixed) out.push_back(e.tensor);
    return out;
  }

 private:
  void check_new(const std::string& name) {
    if (name.empty()) throw ContractError("ParameterStore: empty parameter name");
    if (index_.count(name))
      throw ContractError("ParameterStore: duplicate parameter name '" + name + "'");
  }

  std::vector<ParamEntry<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// init helpers
// ---------------------------------------------------------------------------

/// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], the default for weight
/// matrices and convolution kernels.
template <typename T>
Tensor<T> init_fanin_uniform(Rng& rng, Shape shape, std::size_t fan_in, double gain = 1.0) {
  const double s = gain / std::sqrt(static_cast<double>(fan_in));
  return Tensor<T>::uniform(rng, std::move(shape), static_cast<T>(-s), static_cast<T>(s));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction. Moment buffers are keyed by parameter
/// registration order and exposed for checkpointing, so an interrupted run
/// resumes bit-exactly.
template <typename T>
class Adam {
 public:
  struct Hyper {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<ParamEntry<T>> params, Hyper hp) : params_(std::move(params)), hp_(hp) {
    for (const auto& p : params_) {
      if (p.kind != ParamKind::Fixed)
        throw ContractError("Adam: adaptive slot '" + p.name + "' has no stored values to update");
      m_.emplace_back(shape_numel(p.shape), T(0));
      v_.emplace_back(shape_numel(p.shape), T(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.clear_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(hp_.beta1), b2 = static_cast<T>(hp_.beta2);
    const T one_m_b1 = static_cast<T>(1.0 - hp_.beta1);
    const T one_m_b2 = static_cast<T>(1.0 - hp_.beta2);
    const T lr1 = static_cast<T>(hp_.lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(hp_.eps);

    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i].tensor;
      const std::vector<T>* g;
      try {
        g = &p.grad();
      } catch (const AbsentGradError&) {
        throw ContractError("Adam: parameter '" + params_[i].name +
                            "' has no gradient; run backward before step()");
      }
      T* pv = p.data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      const T* gd = g->data();
      const std::size_t n = p.numel();
      for (std::size_t j = 0; j < n; ++j) {
        m[j] = b1 * m[j] + one_m_b1 * gd[j];
        v[j] = b2 * v[j] + one_m_b2 * gd[j] * gd[j];
        pv[j] -= lr1 * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
      }
    }
  }

  void set_lr(double lr) { hp_.lr = lr; }
  double lr() const { return hp_.lr; }
  std::int64_t steps_taken() const { return t_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }

  const std::vector<ParamEntry<T>>& params() const { return params_; }
  std::vector<T>& moment1(std::size_t i) { return m_[i]; }
  std::vector<T>& moment2(std::size_t i) { return v_[i]; }
  const std::vector<T>& moment1(std::size_t i) const { return m_[i]; }
  const std::vector<T>& moment2(std::size_t i) const { return v_[i]; }

 private:
  std::vector<ParamEntry<T>> params_;
  Hyper hp_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace mwf
