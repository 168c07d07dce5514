#pragma once

// Quality evaluation over a sample corpus, and the weight-adaptivity
// ablation harness: train the same schedule with each adaptivity axis
// switched on in turn and compare held-out restoration quality.

#include "mwformer/compute.hpp"
#include "mwformer/inference.hpp"
#include "mwformer/metrics.hpp"
#include "mwformer/training.hpp"

namespace mwf {

/// Per-class quality plus the cross-class averages. The averages are exact
/// means of the per-class entries (every class counts once, regardless of
/// how many images it holds).
struct EvalReport {
  struct ClassRow {
    std::string cls;
    double psnr = 0;
    double ssim = 0;
    std::size_t images = 0;
  };
  std::vector<ClassRow> per_class;
  double mean_psnr = 0;
  double mean_ssim = 0;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "class,psnr,ssim,images\n";
    for (const ClassRow& r : per_class)
      os << r.cls << ',' << r.psnr << ',' << r.ssim << ',' << r.images << '\n';
    os << "average," << mean_psnr << ',' << mean_ssim << ",\n";
    os << "params,," << params << ",\n";
    os << "macs,," << macs << ",\n";
    return os.str();
  }
};

/// Scores `restore_fn` over every sample of `split`, grouped by class.
/// Outputs are clamped to [0,1] before scoring, matching how restored
/// images are consumed. Pass a function returning the degraded input
/// unchanged to measure the no-op baseline.
template <typename RestoreFn>
EvalReport evaluate_with(const std::vector<WeatherSample>& samples, Split split,
                         RestoreFn&& restore_fn) {
  NoGradGuard guard;
  std::map<std::string, EvalReport::ClassRow> rows;
  for (const WeatherSample& s : samples) {
    if (s.split != split) continue;
    std::string key;
    for (Weather w : s.classes) key += (key.empty() ? "" : "+") + std::string(to_string(w));
    Tensor<float> y = clamp01(restore_fn(s));
    EvalReport::ClassRow& r = rows[key];
    r.cls = key;
    r.psnr += psnr(y, s.clean);
    r.ssim += ssim(y, s.clean);
    r.images += 1;
  }
  if (rows.empty())
    throw ContractError(std::string("evaluate: no samples in split '") +
                        to_string(split) + "'");

  EvalReport rep;
  for (auto& [key, r] : rows) {
    r.psnr /= double(r.images);
    r.ssim /= double(r.images);
    rep.mean_psnr += r.psnr;
    rep.mean_ssim += r.ssim;
    rep.per_class.push_back(std::move(r));
  }
  rep.mean_psnr /= double(rep.per_class.size());
  rep.mean_ssim /= double(rep.per_class.size());
  return rep;
}

/// Full-adaptive-inference evaluation of a trained model, with compute
/// accounting attached (per-forward cost at the corpus resolution).
inline EvalReport evaluate(const Model& m, const std::vector<WeatherSample>& samples,
                           Split split) {
  EvalReport rep = evaluate_with(
      samples, split, [&](const WeatherSample& s) { return infer_full(m, s.degraded); });
  std::size_t h = 0, w = 0;
  for (const WeatherSample& s : samples)
    if (s.split == split) {
      h = s.clean.shape()[1];
      w = s.clean.shape()[2];
      break;
    }
  const ComputeCount c = count_compute(m.cfg().backbone, m.cfg().feature, h, w);
  rep.params = c.total_params();
  rep.macs = c.total_macs();
  return rep;
}

/// Baseline report: the degraded inputs scored as-is (identity restoration).
inline EvalReport evaluate_degraded(const std::vector<WeatherSample>& samples,
                                    Split split) {
  return evaluate_with(samples, split,
                       [](const WeatherSample& s) { return s.degraded; });
}

/// One ablation configuration and its measured quality.
struct AblationRow {
  std::string label;
  AdaptivityConfig adapt;
  bool fine_tune = false;
  std::vector<double> psnr_by_seed;  ///< held-out mean PSNR per seed
  double mean_psnr = 0;              ///< mean of psnr_by_seed
  std::uint64_t params = 0;
  bool converged = true;  ///< false if any seed scored below the degraded baseline
};

struct AblationReport {
  std::vector<AblationRow> rows;
  double degraded_psnr = 0;  ///< no-op baseline on the same split

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "row,local,global,channel,fine_tune,params,mean_psnr,converged";
    std::size_t seeds = rows.empty() ? 0 : rows.front().psnr_by_seed.size();
    for (std::size_t i = 0; i < seeds; ++i) os << ",seed_" << i;
    os << "\ndegraded,,,,,," << degraded_psnr << ",\n";
    for (const AblationRow& r : rows) {
      os << r.label << ',' << r.adapt.local << ',' << r.adapt.global_att << ','
         << r.adapt.channel << ',' << r.fine_tune << ',' << r.params << ','
         << r.mean_psnr << ',' << (r.converged ? "yes" : "no");
      for (double p : r.psnr_by_seed) os << ',' << p;
      os << '\n';
    }
    return os.str();
  }
};

/// The five standard rows: no adaptivity, then one axis added at a time,
/// then joint fine-tuning on top of the fully adaptive variant.
inline std::vector<AblationRow> ablation_rows() {
  std::vector<AblationRow> rows(5);
  rows[0].label = "baseline";
  rows[0].adapt = {false, false, false};
  rows[1].label = "+local";
  rows[1].adapt = {true, false, false};
  rows[2].label = "+local+global";
  rows[2].adapt = {true, true, false};
  rows[3].label = "+local+global+channel";
  rows[3].adapt = {true, true, true};
  rows[4].label = "+fine-tune";
  rows[4].adapt = {true, true, true};
  rows[4].fine_tune = true;
  return rows;
}

/// Trains every ablation row under the same budget and seeds and scores it
/// on the held-out test split. Rows without `fine_tune` stop after the
/// restoration phase; the fine-tune row runs the full schedule. A row is
/// flagged unconverged if any seed lands below the degraded-input baseline.
inline AblationReport run_ablation(const ModelConfig& base, const TrainConfig& budget,
                                   const std::vector<WeatherSample>& data,
                                   const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ContractError("run_ablation: no seeds given");
  AblationReport rep;
  rep.degraded_psnr = evaluate_degraded(data, Split::test).mean_psnr;
  std::size_t h = 0, w = 0;
  for (const WeatherSample& s : data)
    if (s.split == Split::test) {
      h = s.clean.shape()[1];
      w = s.clean.shape()[2];
      break;
    }
  rep.rows = ablation_rows();
  for (AblationRow& row : rep.rows) {
    ModelConfig mc = base;
    mc.backbone.adapt = row.adapt;
    for (std::uint64_t seed : seeds) {
      TrainConfig tc = budget;
      tc.seed = seed;
      Trainer t(Model(mc, seed), tc, data);
      t.run_phase1();
      t.run_phase2();
      if (row.fine_tune) t.run_phase3();
      const double p = evaluate(t.model(), data, Split::test).mean_psnr;
      row.psnr_by_seed.push_back(p);
      row.mean_psnr += p;
      if (p < rep.degraded_psnr) row.converged = false;
      if (row.params == 0)
        row.params = count_compute(mc.backbone, mc.feature, h, w).total_params();
    }
    row.mean_psnr /= double(row.psnr_by_seed.size());
  }
  return rep;
}

}  // namespace mwf
