#pragma once

// Three-phase training schedule: contrastive pretraining of the feature
// extractor, restoration training with the combined loss against a frozen
// feature net, then joint fine-tuning at a reduced learning rate.
//
// Sampling is stateless — the sample drawn at (step, slot) is a pure function
// of the training seed — which is what makes mid-phase resume bit-exact: no
// iterator state exists outside the checkpoint.

#include <iomanip>
#include <map>

#include "mwformer/dataset.hpp"
#include "mwformer/metrics.hpp"
#include "mwformer/model_io.hpp"

namespace mwf {

struct TrainConfig {
  std::size_t phase1_steps = 1000;
  std::size_t phase2_steps = 4000;
  std::size_t phase3_steps = 1000;
  std::size_t batch = 8;
  double lr = 2e-4;
  double finetune_lr_scale = 0.2;  ///< phase-3 rate = lr * this
  double lambda = 0.04;            ///< perceptual term weight
  double margin = 0.5;             ///< contrastive margin
  double beta_t = 1.0;             ///< smooth-L1 threshold
  std::uint64_t seed = 7;          ///< batch composition
  std::uint64_t proxy_seed = 99;   ///< frozen perceptual pyramid
  std::size_t eval_every = 200;    ///< validation cadence (steps)
  std::size_t eval_samples = 16;   ///< validation subset size
  std::size_t autosave_every = 0;  ///< 0 disables periodic checkpoints
  std::string autosave_path;

  void validate() const {
    if (phase1_steps == 0 || phase2_steps == 0 || phase3_steps == 0)
      throw ConfigError("train: phase step counts must all be positive");
    if (batch == 0) throw ConfigError("train: batch size must be positive");
    if (lr <= 0 || finetune_lr_scale <= 0)
      throw ConfigError("train: learning rates must be positive");
    if (lambda < 0) throw ConfigError("train: lambda must be non-negative");
    if (!(margin > 0.0 && margin <= 1.0))
      throw ConfigError("train: margin must lie in (0,1]");
    if (beta_t <= 0) throw ConfigError("train: smooth-L1 threshold must be positive");
    if (eval_every == 0 || eval_samples == 0)
      throw ConfigError("train: eval cadence and subset size must be positive");
    if (autosave_every > 0 && autosave_path.empty())
      throw ConfigError("train: autosave cadence set but no autosave path");
  }
};

inline TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.phase1_steps = c.count("train.phase1_steps", t.phase1_steps);
  t.phase2_steps = c.count("train.phase2_steps", t.phase2_steps);
  t.phase3_steps = c.count("train.phase3_steps", t.phase3_steps);
  t.batch = c.count("train.batch", t.batch);
  t.lr = c.number("train.lr", t.lr);
  t.finetune_lr_scale = c.number("train.finetune_lr_scale", t.finetune_lr_scale);
  t.lambda = c.number("train.lambda", t.lambda);
  t.margin = c.number("train.margin", t.margin);
  t.beta_t = c.number("train.beta_t", t.beta_t);
  t.seed = static_cast<std::uint64_t>(c.count("train.seed", t.seed));
  t.proxy_seed = static_cast<std::uint64_t>(c.count("train.proxy_seed", t.proxy_seed));
  t.eval_every = c.count("train.eval_every", t.eval_every);
  t.eval_samples = c.count("train.eval_samples", t.eval_samples);
  t.validate();
  return t;
}

/// Frozen random 3-stage convolution pyramid standing in for a pretrained
/// feature tower. Only its seed is checkpointed; the weights are re-derived.
template <typename T>
class PerceptualProxy {
 public:
  explicit PerceptualProxy(std::uint64_t seed) : seed_(seed) {
    Rng rng(mix_seed(seed, 0x70726f7879ull));
    std::size_t in = 3;
    for (std::size_t c : {8, 16, 32}) {
      weights_.push_back(init_fanin_uniform<T>(rng, {static_cast<std::size_t>(c), in, 3, 3},
                                               in * 9));
      in = static_cast<std::size_t>(c);
    }
  }

  std::uint64_t seed() const { return seed_; }

  /// Sum over the three tap points of the mean squared feature difference.
  Tensor<T> loss(const Tensor<T>& y, const Tensor<T>& t) const {
    if (y.shape() != t.shape())
      throw DimensionError("perceptual_loss: shape mismatch " + shape_str(y.shape()) +
                           " vs " + shape_str(t.shape()));
    if (y.rank() != 3)
      throw DimensionError("perceptual_loss: expects [C,H,W] images, got " +
                           shape_str(y.shape()));
    Tensor<T> fy = y, ft = t, total;
    for (const Tensor<T>& w : weights_) {
      fy = gelu(conv2d(fy, w, 2, 1));
      ft = gelu(conv2d(ft, w, 2, 1));
      Tensor<T> d = sub(fy, ft);
      Tensor<T> tap = mean_all(mul(d, d));
      total = total.defined() ? add(total, tap) : tap;
    }
    return total;
  }

 private:
  std::uint64_t seed_ = 0;
  std::vector<Tensor<T>> weights_;  // never trainable
};

/// Combined restoration objective: smooth-L1 plus lambda times the
/// perceptual term. lambda == 0 returns the smooth-L1 term untouched.
template <typename T>
Tensor<T> total_loss(const PerceptualProxy<T>& proxy, const Tensor<T>& y,
                     const Tensor<T>& t, double lambda, double beta_t = 1.0) {
  Tensor<T> l1 = smooth_l1(y, t, static_cast<T>(beta_t));
  if (lambda == 0.0) return l1;
  return add(l1, mul_scalar(proxy.loss(y, t), static_cast<T>(lambda)));
}

/// Class-balanced stateless sampler over the single-class training split.
/// Slot j of step s draws class (s*batch+j) mod n_classes, so any window of
/// whole steps is balanced to within one batch.
class BalancedSampler {
 public:
  BalancedSampler(const std::vector<WeatherSample>& data, std::size_t batch,
                  std::uint64_t seed)
      : data_(&data), batch_(batch), seed_(seed) {
    std::map<Weather, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const WeatherSample& s = data[i];
      if (s.split != Split::train || s.classes.size() != 1) continue;
      groups[s.classes[0]].push_back(i);
    }
    for (auto& [cls, idx] : groups) {
      classes_.push_back(cls);
      groups_.push_back(std::move(idx));
    }
    if (groups_.empty())
      throw ContractError("sampler: training split holds no single-class samples");
  }

  std::size_t class_count() const { return classes_.size(); }
  Weather class_at(std::size_t i) const { return classes_[i]; }

  const WeatherSample& draw(std::size_t step, std::size_t slot) const {
    const std::size_t ordinal = step * batch_ + slot;
    const std::vector<std::size_t>& group = groups_[ordinal % groups_.size()];
    const std::size_t pick = mix_seed(seed_, step, slot) % group.size();
    return (*data_)[group[pick]];
  }

 private:
  const std::vector<WeatherSample>* data_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::vector<Weather> classes_;              // ascending class order
  std::vector<std::vector<std::size_t>> groups_;
};

/// Append-only training log: `step,phase,loss,val_psnr,val_ssim,lr` CSV.
class TrainLog {
 public:
  TrainLog() = default;

  explicit TrainLog(const std::string& path) {
    if (path.empty()) return;
    const bool fresh = !std::ifstream(path).good();
    os_.open(path, std::ios::app);
    if (!os_) throw IoError("cannot open training log: " + path);
    if (fresh) os_ << "step,phase,loss,val_psnr,val_ssim,lr\n";
  }

  void row(std::size_t step, int phase, double loss, double val_psnr, double val_ssim,
           double lr, bool has_val) {
    if (!os_.is_open()) return;
    os_ << step << ',' << phase << ',' << std::setprecision(8) << loss << ',';
    if (has_val)
      os_ << std::setprecision(6) << val_psnr << ',' << std::setprecision(6) << val_ssim;
    else
      os_ << ',';
    os_ << ',' << std::setprecision(8) << lr << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

class Trainer {
 public:
  Trainer(Model model, TrainConfig cfg, const std::vector<WeatherSample>& data,
          const std::string& log_path = "")
      : model_(std::move(model)),
        cfg_(cfg),
        data_(&data),
        proxy_(cfg.proxy_seed),
        sampler_(data, cfg.batch, cfg.seed),
        log_(log_path) {
    cfg_.validate();
    // Interleave validation samples across classes so that any prefix of
    // val_ is class-balanced; corpora are laid out class-major, and a
    // prefix of that order would score a single degradation type.
    std::map<Weather, std::vector<const WeatherSample*>> by_class;
    for (const WeatherSample& s : data)
      if (s.split == Split::val) by_class[s.classes.front()].push_back(&s);
    for (std::size_t i = 0;; ++i) {
      bool any = false;
      for (auto& [cls, list] : by_class) {
        if (i >= list.size()) continue;
        val_.push_back(list[i]);
        any = true;
      }
      if (!any) break;
    }
  }

  /// Rebuilds a trainer mid-run from a checkpoint produced by save().
  static Trainer resume(const Checkpoint& ck, TrainConfig cfg,
                        const std::vector<WeatherSample>& data,
                        const std::string& log_path = "") {
    if (get_u64_split(ck, "__meta.train_seed") != cfg.seed)
      throw ConfigError("resume: checkpoint was trained with a different seed");
    if (get_u64_split(ck, "__meta.proxy_seed") != cfg.proxy_seed)
      throw ConfigError("resume: checkpoint uses a different perceptual proxy seed");
    Trainer t(load_model(ck), cfg, data, log_path);
    t.phase_ = static_cast<int>(ck.get_scalar("__meta.phase"));
    t.step_ = static_cast<std::size_t>(ck.get_scalar("__meta.step"));
    if (ck.has("__bank.drop") || ck.has("__bank.streak_haze") || ck.has("__bank.flake"))
      t.bank_ = load_bank(ck);
    if (ck.has("__opt.t")) {
      t.make_optimizer();
      Adam<float>& opt = *t.opt_;
      opt.set_steps_taken(static_cast<std::int64_t>(ck.get_scalar("__opt.t")));
      for (std::size_t i = 0; i < opt.params().size(); ++i) {
        const auto& p = opt.params()[i];
        const auto& m = ck.get_f32("__opt.m." + p.name, p.shape);
        const auto& v = ck.get_f32("__opt.v." + p.name, p.shape);
        std::copy(m.begin(), m.end(), opt.moment1(i).begin());
        std::copy(v.begin(), v.end(), opt.moment2(i).begin());
      }
    }
    return t;
  }

  void save(const std::string& path) const {
    Checkpoint ck;
    save_model(model_, ck);
    ck.put_scalar("__meta.phase", static_cast<double>(phase_));
    ck.put_scalar("__meta.step", static_cast<double>(step_));
    put_u64_split(ck, "__meta.train_seed", cfg_.seed);
    put_u64_split(ck, "__meta.proxy_seed", cfg_.proxy_seed);
    if (!bank_.empty()) save_bank(bank_, ck);
    if (opt_) {
      ck.put_scalar("__opt.t", static_cast<double>(opt_->steps_taken()));
      const Adam<float>& opt = *opt_;
      for (std::size_t i = 0; i < opt.params().size(); ++i) {
        const auto& p = opt.params()[i];
        ck.put_f32("__opt.m." + p.name, p.shape, opt.moment1(i));
        ck.put_f32("__opt.v." + p.name, p.shape, opt.moment2(i));
      }
    }
    ck.save(path);
  }

  /// Phase 1: contrastive pretraining of the feature extractor, then the
  /// class-average bank over the training split.
  void run_phase1() {
    if (phase_ > 1) return;
    if (sampler_.class_count() < 2)
      throw ContractError("phase 1 needs at least 2 weather classes in the training split, got " +
                          std::to_string(sampler_.class_count()));
    phase_ = 1;
    if (!opt_) make_optimizer();
    while (step_ < cfg_.phase1_steps) {
      step_once([&](Tape<float>& tape) {
        std::vector<Tensor<float>> vecs;
        std::vector<int> labels;
        for (std::size_t j = 0; j < cfg_.batch; ++j) {
          const WeatherSample& s = sampler_.draw(step_, j);
          vecs.push_back(model_.feature().extract(s.degraded));
          labels.push_back(static_cast<int>(s.classes[0]));
        }
        return contrastive_loss(vecs, labels, static_cast<float>(cfg_.margin));
      });
    }
    compute_bank();
    advance_phase();
  }

  /// Phase 2: restoration training against the frozen feature net.
  void run_phase2() {
    if (phase_ > 2) return;
    if (phase_ < 2)
      throw ContractError("phase 2 requires a completed phase-1 feature net");
    if (!opt_) make_optimizer();
    while (step_ < cfg_.phase2_steps) {
      step_once([&](Tape<float>& tape) { return restoration_batch_loss(false); });
    }
    advance_phase();
  }

  /// Phase 3: joint fine-tune of both networks at the reduced rate, then the
  /// bank is recomputed from the updated feature net.
  void run_phase3() {
    if (phase_ > 3) return;
    if (phase_ < 3)
      throw ContractError("phase 3 requires completed phases 1 and 2");
    if (!opt_) make_optimizer();
    while (step_ < cfg_.phase3_steps) {
      step_once([&](Tape<float>& tape) { return restoration_batch_loss(true); });
    }
    compute_bank();
    advance_phase();
  }

  void run_all() {
    run_phase1();
    run_phase2();
    run_phase3();
  }

  int phase() const { return phase_; }
  std::size_t step() const { return step_; }
  bool finished() const { return phase_ > 3; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const ClassAverageBank<float>& bank() const { return bank_; }
  const PerceptualProxy<float>& proxy() const { return proxy_; }

  /// Mean restored-vs-clean PSNR/SSIM over the first n validation samples.
  std::pair<double, double> validate_restoration(std::size_t n) const {
    if (val_.empty()) return {0.0, 0.0};
    NoGradGuard guard;
    n = std::min(n, val_.size());
    double p = 0.0, s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const WeatherSample& smp = *val_[i];
      Tensor<float> v = model_.feature().extract(smp.degraded);
      Tensor<float> restored = clamp01(model_.backbone().restore(smp.degraded, v));
      p += psnr(restored, smp.clean);
      s += ssim(restored, smp.clean);
    }
    return {p / static_cast<double>(n), s / static_cast<double>(n)};
  }

  /// Mean feature vector per class over the training split.
  void compute_bank() {
    NoGradGuard guard;
    bank_ = ClassAverageBank<float>();
    for (std::size_t c = 0; c < sampler_.class_count(); ++c) {
      const Weather cls = sampler_.class_at(c);
      Tensor<float> sum;
      std::uint64_t n = 0;
      for (const WeatherSample& s : *data_) {
        if (s.split != Split::train || s.classes.size() != 1 || s.classes[0] != cls)
          continue;
        Tensor<float> v = model_.feature().extract(s.degraded);
        sum = sum.defined() ? add(sum, v) : v;
        ++n;
      }
      bank_.set(to_string(cls), mul_scalar(sum, 1.0f / static_cast<float>(n)), n);
    }
  }

 private:
  std::size_t phase_steps() const {
    return phase_ == 1 ? cfg_.phase1_steps
                       : (phase_ == 2 ? cfg_.phase2_steps : cfg_.phase3_steps);
  }

  void advance_phase() {
    opt_.reset();
    ++phase_;
    step_ = 0;
  }

  void make_optimizer() {
    Adam<float>::Hyper hp;
    hp.lr = phase_ == 3 ? cfg_.lr * cfg_.finetune_lr_scale : cfg_.lr;
    std::vector<ParamEntry<float>> params;
    for (const auto& e : model_.store().entries()) {
      if (e.kind != ParamKind::Fixed) continue;
      const bool feat = e.name.rfind("feat.", 0) == 0;
      if ((phase_ == 1 && feat) || (phase_ == 2 && !feat) || phase_ == 3)
        params.push_back(e);
    }
    opt_.emplace(std::move(params), hp);
  }

  /// Combined loss over one balanced batch; joint=true keeps the feature
  /// extraction on tape so gradients reach the feature net.
  Tensor<float> restoration_batch_loss(bool joint) {
    Tensor<float> total;
    for (std::size_t j = 0; j < cfg_.batch; ++j) {
      const WeatherSample& s = sampler_.draw(step_, j);
      Tensor<float> v;
      if (joint) {
        v = model_.feature().extract(s.degraded);
      } else {
        NoGradGuard guard;
        v = model_.feature().extract(s.degraded);
      }
      Tensor<float> restored = model_.backbone().restore(s.degraded, v);
      Tensor<float> loss = total_loss(proxy_, restored, s.clean, cfg_.lambda, cfg_.beta_t);
      total = total.defined() ? add(total, loss) : loss;
    }
    return mul_scalar(total, 1.0f / static_cast<float>(cfg_.batch));
  }

  template <typename BatchLoss>
  void step_once(BatchLoss&& batch_loss) {
    opt_->zero_grad();
    double loss_value = 0.0;
    try {
      Tape<float> tape;
      TapeScope<float> scope(tape);
      Tensor<float> loss = batch_loss(tape);
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value))
        throw NumericError("loss is not finite");
      backward(loss);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + diagnose_batch());
    }
    opt_->step();

    const bool eval_now =
        (step_ + 1) % cfg_.eval_every == 0 || step_ + 1 == phase_steps();
    double vp = 0.0, vs = 0.0;
    bool has_val = false;
    if (eval_now && phase_ >= 2 && !val_.empty()) {
      std::tie(vp, vs) = validate_restoration(cfg_.eval_samples);
      has_val = true;
    }
    log_.row(step_, phase_, loss_value, vp, vs, opt_->lr(), has_val);
    ++step_;

    if (cfg_.autosave_every > 0 && step_ % cfg_.autosave_every == 0 &&
        step_ < phase_steps())
      save(cfg_.autosave_path);
  }

  std::string diagnose_batch() const {
    std::string out = "; phase " + std::to_string(phase_) + " step " +
                      std::to_string(step_) + ", batch sample seeds [";
    for (std::size_t j = 0; j < cfg_.batch; ++j) {
      if (j) out += ", ";
      out += std::to_string(sampler_.draw(step_, j).seed);
    }
    return out + "]";
  }

  Model model_;
  TrainConfig cfg_;
  const std::vector<WeatherSample>* data_;
  PerceptualProxy<float> proxy_;
  BalancedSampler sampler_;
  TrainLog log_;
  std::vector<const WeatherSample*> val_;
  ClassAverageBank<float> bank_;
  std::optional<Adam<float>> opt_;
  int phase_ = 1;
  std::size_t step_ = 0;
};

}  // namespace mwf
