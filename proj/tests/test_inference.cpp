#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "mwformer/evaluation.hpp"
#include "mwformer/inference.hpp"

namespace mwf {
namespace {

Tensor<float> rand_img(Rng& rng, std::size_t h, std::size_t w) {
  std::vector<float> v(3 * h * w);
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return Tensor<float>::from({3, h, w}, std::move(v));
}

bool bits_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

ModelConfig tiny_model_config() {
  ModelConfig mc;
  mc.backbone.scales = 2;
  mc.backbone.channels = {8, 12};
  mc.backbone.heads = {1, 2};
  mc.backbone.blocks = {1, 1};
  mc.backbone.intra_blocks = {0, 0};
  mc.backbone.decoder_queries = 2;
  mc.backbone.v_dim = 12;
  mc.feature.channels = {8, 12};
  mc.feature.heads = {1, 2};
  mc.feature.out_dim = 12;
  return mc;
}

/// A model whose restoration head is perturbed away from the identity, so
/// outputs actually depend on the conditioning vector.
Model perturbed_model(std::uint64_t seed) {
  Model m(tiny_model_config(), seed);
  Tensor<float> ow = m.store().get("res.dec.out.w");
  Rng rng(seed + 1);
  for (std::size_t i = 0; i < ow.numel(); ++i)
    ow.data()[i] = static_cast<float>(rng.uniform(-0.1, 0.1));
  return m;
}

ClassAverageBank<float> synthetic_bank(const Model& m, std::uint64_t seed) {
  ClassAverageBank<float> bank;
  Rng rng(seed);
  for (Weather w : kAllWeather) {
    const std::size_t d = m.cfg().feature.out_dim;
    std::vector<float> mean(d);
    for (auto& x : mean) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    bank.set(to_string(w), Tensor<float>::from({d}, std::move(mean)), 5);
  }
  return bank;
}

Tensor<float> unit_axis(std::size_t dim, std::size_t axis) {
  std::vector<float> v(dim, 0.f);
  v[axis] = 1.f;
  return Tensor<float>::from({dim}, std::move(v));
}

TEST(ScoreEmbedding, EquidistantVectorScoresOneThirdEach) {
  ClassAverageBank<float> bank;
  bank.set("drop", unit_axis(3, 0), 1);
  bank.set("flake", unit_axis(3, 1), 1);
  bank.set("streak_haze", unit_axis(3, 2), 1);
  Tensor<float> v = Tensor<float>::from({3}, {1.f, 1.f, 1.f});

  WeatherScores s = score_embedding(v, bank);
  ASSERT_EQ(s.score.size(), 3u);
  for (double sc : s.score) EXPECT_NEAR(sc, 1.0 / 3.0, 1e-12);
}

TEST(ScoreEmbedding, MatchesTheClosedFormForAnAxisVector) {
  // Cosines against the three axes are exactly (1, 0, 0), so the softmax is
  // (e, 1, 1) / (e + 2).
  ClassAverageBank<float> bank;
  bank.set("drop", unit_axis(4, 0), 1);
  bank.set("flake", unit_axis(4, 1), 1);
  bank.set("streak_haze", unit_axis(4, 2), 1);
  WeatherScores s = score_embedding(unit_axis(4, 0), bank);

  const double e = std::exp(1.0);
  EXPECT_NEAR(s.cosine_for("drop"), 1.0, 1e-12);
  EXPECT_NEAR(s.cosine_for("flake"), 0.0, 1e-12);
  EXPECT_NEAR(s.score_for("drop"), e / (e + 2.0), 1e-12);
  EXPECT_NEAR(s.score_for("flake"), 1.0 / (e + 2.0), 1e-12);
  EXPECT_NEAR(s.score_for("streak_haze"), 1.0 / (e + 2.0), 1e-12);
  EXPECT_EQ(s.best_class(), "drop");
}

TEST(ScoreEmbedding, BankVectorItselfWinsItsOwnClass) {
  Model m(tiny_model_config(), 3);
  ClassAverageBank<float> bank = synthetic_bank(m, 17);
  for (Weather w : kAllWeather) {
    WeatherScores s = score_embedding(bank.get(to_string(w)), bank);
    EXPECT_EQ(s.best_class(), to_string(w));
    EXPECT_NEAR(s.cosine_for(to_string(w)), 1.0, 1e-6);
  }
}

TEST(ScoreEmbedding, ScoresSumToOneAndStayPositive) {
  Rng rng(5150);
  Model m(tiny_model_config(), 3);
  ClassAverageBank<float> bank = synthetic_bank(m, 17);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<float> raw(12);
    for (auto& x : raw) x = static_cast<float>(rng.uniform(-2.0, 2.0));
    Tensor<float> v = Tensor<float>::from({12}, std::move(raw));
    WeatherScores s = score_embedding(v, bank);
    double total = 0;
    for (double sc : s.score) {
      EXPECT_GT(sc, 0.0);
      total += sc;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(ScoreEmbedding, ArgmaxSurvivesPositiveRescaling) {
  Rng rng(777);
  Model m(tiny_model_config(), 3);
  ClassAverageBank<float> bank = synthetic_bank(m, 17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> raw(12), scaled_raw(12);
    for (auto& x : raw) x = static_cast<float>(rng.uniform(-2.0, 2.0));
    const float c = static_cast<float>(rng.uniform(0.01, 100.0));
    for (std::size_t i = 0; i < raw.size(); ++i) scaled_raw[i] = c * raw[i];
    Tensor<float> v = Tensor<float>::from({12}, std::move(raw));
    Tensor<float> scaled = Tensor<float>::from({12}, std::move(scaled_raw));

    WeatherScores a = score_embedding(v, bank);
    WeatherScores b = score_embedding(scaled, bank);
    EXPECT_EQ(a.best, b.best);
    for (std::size_t i = 0; i < a.cosine.size(); ++i)
      EXPECT_NEAR(a.cosine[i], b.cosine[i], 1e-6);
  }
}

TEST(ScoreEmbedding, ZeroNormInputsAreRejected) {
  Model m(tiny_model_config(), 3);
  ClassAverageBank<float> bank = synthetic_bank(m, 17);
  EXPECT_THROW(score_embedding(Tensor<float>::zeros({12}), bank),
               DegenerateEmbeddingError);

  ClassAverageBank<float> degenerate;
  degenerate.set("drop", Tensor<float>::zeros({12}), 1);
  Tensor<float> v = unit_axis(12, 0);
  EXPECT_THROW(score_embedding(v, degenerate), DegenerateEmbeddingError);

  ClassAverageBank<float> empty;
  EXPECT_THROW(score_embedding(v, empty), ContractError);
}

TEST(InferModes, FixedModeIsRestoreWithTheBankVector) {
  Model m = perturbed_model(60);
  ClassAverageBank<float> bank = synthetic_bank(m, 61);
  Rng rng(62);
  Tensor<float> img = rand_img(rng, 16, 16);

  NoGradGuard guard;
  Tensor<float> direct = m.backbone().restore(img, bank.get("flake"));
  Tensor<float> fixed = infer_fixed(m, bank, "flake", img);
  EXPECT_TRUE(bits_equal(direct.values(), fixed.values()));

  EXPECT_THROW(infer_fixed(m, bank, "fog", img), AbsentClassError);
}

TEST(InferModes, FullModeComposesExtractionAndRestoration) {
  Model m = perturbed_model(63);
  Rng rng(64);
  Tensor<float> img = rand_img(rng, 16, 16);

  NoGradGuard guard;
  Tensor<float> manual = m.backbone().restore(img, m.feature().extract(img));
  Tensor<float> full = infer_full(m, img);
  EXPECT_TRUE(bits_equal(manual.values(), full.values()));
}

TEST(InferModes, SingleStageCascadeEqualsFixedMode) {
  Model m = perturbed_model(65);
  ClassAverageBank<float> bank = synthetic_bank(m, 66);
  Rng rng(67);
  Tensor<float> img = rand_img(rng, 16, 16);

  Tensor<float> cascade = infer_cascade(m, bank, img, {"streak_haze"});
  Tensor<float> fixed = infer_fixed(m, bank, "streak_haze", img);
  EXPECT_TRUE(bits_equal(cascade.values(), fixed.values()));
}

TEST(InferModes, TwoStageCascadeMatchesManualComposition) {
  Model m = perturbed_model(68);
  ClassAverageBank<float> bank = synthetic_bank(m, 69);
  Rng rng(70);
  Tensor<float> img = rand_img(rng, 16, 16);

  NoGradGuard guard;
  // Stage 1 runs from the stored average; stage 2 re-estimates the
  // embedding from stage 1's output.
  Tensor<float> y1 = m.backbone().restore(img, bank.get("streak_haze"));
  Tensor<float> manual = m.backbone().restore(y1, m.feature().extract(y1));
  Tensor<float> cascade =
      infer_cascade(m, bank, img, {"streak_haze", "flake"});
  EXPECT_TRUE(bits_equal(manual.values(), cascade.values()));
}

TEST(InferModes, FixedVectorCascadeUsesTheBankAtEveryStage) {
  Model m = perturbed_model(71);
  ClassAverageBank<float> bank = synthetic_bank(m, 72);
  Rng rng(73);
  Tensor<float> img = rand_img(rng, 16, 16);

  NoGradGuard guard;
  Tensor<float> y1 = m.backbone().restore(img, bank.get("streak_haze"));
  Tensor<float> manual = m.backbone().restore(y1, bank.get("flake"));
  Tensor<float> cascade =
      infer_cascade(m, bank, img, {"streak_haze", "flake"}, /*fixed_vectors=*/true);
  EXPECT_TRUE(bits_equal(manual.values(), cascade.values()));
}

TEST(InferModes, CascadeValidatesTheStageList) {
  Model m = perturbed_model(74);
  ClassAverageBank<float> bank = synthetic_bank(m, 75);
  Rng rng(76);
  Tensor<float> img = rand_img(rng, 16, 16);

  EXPECT_THROW(infer_cascade(m, bank, img, {}), ContractError);
  EXPECT_THROW(infer_cascade(m, bank, img,
                             {"drop", "drop", "drop", "drop", "drop"}),
               ContractError);
  EXPECT_THROW(infer_cascade(m, bank, img, {"fog"}), AbsentClassError);
}

TEST(InferModes, CascadeLeavesWeightsUntouched) {
  Model m = perturbed_model(77);
  ClassAverageBank<float> bank = synthetic_bank(m, 78);
  Rng rng(79);
  Tensor<float> img = rand_img(rng, 16, 16);

  const std::uint32_t before = param_checksum(m);
  infer_cascade(m, bank, img, {"streak_haze", "flake", "drop"});
  EXPECT_EQ(param_checksum(m), before);
}

TEST(InferModes, DefaultHybridOrderIsDerainFirst) {
  const std::vector<std::string> order = default_hybrid_order();
  ASSERT_EQ(order.size(), 2u);
  EXPECT_EQ(order[0], "streak_haze");
  EXPECT_EQ(order[1], "flake");
}

TEST(RouteExpert, IdentityRegistryReturnsInputAndArgmaxClass) {
  Model m = perturbed_model(80);
  ClassAverageBank<float> bank = synthetic_bank(m, 81);
  Rng rng(82);
  Tensor<float> img = rand_img(rng, 16, 16);

  ExpertRegistry reg;
  for (Weather w : kAllWeather)
    reg.set(to_string(w), [](const Tensor<float>& x) { return x; });

  RoutedResult r = route_expert(m, bank, reg, img);
  EXPECT_TRUE(bits_equal(r.output.values(), img.values()));
  EXPECT_EQ(r.chosen, weather_scores(m, bank, img).best_class());
  EXPECT_EQ(r.scores.best_class(), r.chosen);
}

TEST(RouteExpert, MissingExpertNamesTheClassInTheError) {
  Model m = perturbed_model(83);
  ClassAverageBank<float> bank = synthetic_bank(m, 84);
  Rng rng(85);
  Tensor<float> img = rand_img(rng, 16, 16);

  const std::string winner = weather_scores(m, bank, img).best_class();
  ExpertRegistry reg;  // empty on purpose
  try {
    route_expert(m, bank, reg, img);
    FAIL() << "expected RoutingError";
  } catch (const RoutingError& e) {
    EXPECT_NE(std::string(e.what()).find(winner), std::string::npos);
  }
}

TEST(RouteExpert, ScoresAreDeterministicForFixedInputs) {
  Model m = perturbed_model(86);
  ClassAverageBank<float> bank = synthetic_bank(m, 87);
  Rng rng(88);
  Tensor<float> img = rand_img(rng, 16, 16);

  WeatherScores a = weather_scores(m, bank, img);
  WeatherScores b = weather_scores(m, bank, img);
  EXPECT_EQ(a.best, b.best);
  for (std::size_t i = 0; i < a.score.size(); ++i)
    EXPECT_EQ(a.score[i], b.score[i]);
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

TEST(ScoreCsv, HasTheContractHeaderAndOneRowPerImage) {
  Model m = perturbed_model(89);
  ClassAverageBank<float> bank = synthetic_bank(m, 90);
  Rng rng(91);

  std::vector<std::pair<std::string, WeatherScores>> rows;
  for (int i = 0; i < 4; ++i)
    rows.emplace_back("img_" + std::to_string(i),
                      weather_scores(m, bank, rand_img(rng, 16, 16)));

  const std::string path = testing::TempDir() + "scores.csv";
  write_score_csv(path, rows);

  std::istringstream is(slurp(path));
  std::string line;
  ASSERT_TRUE(std::getline(is, line));
  EXPECT_EQ(line, "image_id,d_drop,d_streak,d_flake,s_drop,s_streak,s_flake,argmax");
  std::size_t n = 0;
  while (std::getline(is, line)) {
    EXPECT_EQ(line.rfind("img_", 0), 0u);
    const std::string cls = line.substr(line.rfind(',') + 1);
    EXPECT_NO_THROW(weather_from_string(cls));
    ++n;
  }
  EXPECT_EQ(n, rows.size());
}

TEST(EmbeddingsCsv, CarriesEveryDimensionLabelAndSplit) {
  Model m(tiny_model_config(), 92);
  std::vector<WeatherSample> samples;
  samples.push_back(regen_sample(1, {Weather::Drop}, 0.5f, Split::train, 16, 16));
  samples.push_back(regen_sample(2, {Weather::Flake}, 0.9f, Split::val, 16, 16));

  const std::string path = testing::TempDir() + "embed.csv";
  write_embeddings_csv(path, m, samples);

  std::istringstream is(slurp(path));
  std::string header;
  ASSERT_TRUE(std::getline(is, header));
  EXPECT_EQ(header.rfind("dim_0,", 0), 0u);
  EXPECT_NE(header.find("dim_11,label,split"), std::string::npos);

  std::string row;
  ASSERT_TRUE(std::getline(is, row));
  EXPECT_NE(row.find(",drop,train"), std::string::npos);
  ASSERT_TRUE(std::getline(is, row));
  EXPECT_NE(row.find(",flake,val"), std::string::npos);
  EXPECT_FALSE(std::getline(is, row));
}

std::vector<WeatherSample> tiny_corpus() {
  DatasetConfig cfg;
  cfg.counts = {10, 10, 10};
  cfg.height = 16;
  cfg.width = 16;
  cfg.seed = 2024;
  return make_samples(cfg);
}

TEST(Evaluate, AveragesAreExactMeansOfClassRows) {
  const std::vector<WeatherSample> data = tiny_corpus();
  EvalReport rep = evaluate_degraded(data, Split::test);
  ASSERT_EQ(rep.per_class.size(), 3u);
  double p = 0, s = 0;
  for (const auto& r : rep.per_class) {
    p += r.psnr;
    s += r.ssim;
  }
  EXPECT_NEAR(rep.mean_psnr, p / 3.0, 1e-9);
  EXPECT_NEAR(rep.mean_ssim, s / 3.0, 1e-9);
}

TEST(Evaluate, DegradedBaselineMatchesDirectMetricCalls) {
  const std::vector<WeatherSample> data = tiny_corpus();
  EvalReport rep = evaluate_degraded(data, Split::val);

  std::map<std::string, std::pair<double, std::size_t>> expect;
  for (const WeatherSample& s : data) {
    if (s.split != Split::val) continue;
    auto& [acc, n] = expect[to_string(s.classes.front())];
    acc += psnr(clamp01(s.degraded), s.clean);
    n += 1;
  }
  for (const auto& row : rep.per_class) {
    const auto& [acc, n] = expect.at(row.cls);
    EXPECT_EQ(row.images, n);
    EXPECT_NEAR(row.psnr, acc / double(n), 1e-12);
  }
}

TEST(Evaluate, FullInferenceAttachesComputeAccounting) {
  const std::vector<WeatherSample> data = tiny_corpus();
  Model m(tiny_model_config(), 93);
  EvalReport rep = evaluate(m, data, Split::test);

  const ComputeCount c =
      count_compute(m.cfg().backbone, m.cfg().feature, 16, 16);
  EXPECT_EQ(rep.params, c.total_params());
  EXPECT_EQ(rep.macs, c.total_macs());
  EXPECT_GT(rep.params, 0u);
  EXPECT_GT(rep.macs, 0u);

  // Untrained restoration is the identity, so scores equal the baseline.
  EvalReport base = evaluate_degraded(data, Split::test);
  EXPECT_NEAR(rep.mean_psnr, base.mean_psnr, 1e-9);
}

TEST(Evaluate, MissingSplitIsRejected) {
  std::vector<WeatherSample> data;
  data.push_back(regen_sample(3, {Weather::Drop}, 0.5f, Split::train, 16, 16));
  EXPECT_THROW(evaluate_degraded(data, Split::test), ContractError);
}

TEST(Evaluate, ReportCsvListsClassesAverageAndCosts) {
  const std::vector<WeatherSample> data = tiny_corpus();
  Model m(tiny_model_config(), 94);
  const std::string csv = evaluate(m, data, Split::test).to_csv();
  EXPECT_EQ(csv.rfind("class,psnr,ssim,images\n", 0), 0u);
  EXPECT_NE(csv.find("\ndrop,"), std::string::npos);
  EXPECT_NE(csv.find("\naverage,"), std::string::npos);
  EXPECT_NE(csv.find("\nparams,"), std::string::npos);
  EXPECT_NE(csv.find("\nmacs,"), std::string::npos);
}

TEST(Ablation, RowsAreTheFiveStandardVariants) {
  const std::vector<AblationRow> rows = ablation_rows();
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0].label, "baseline");
  EXPECT_FALSE(rows[0].adapt.local || rows[0].adapt.global_att || rows[0].adapt.channel);
  EXPECT_TRUE(rows[1].adapt.local);
  EXPECT_FALSE(rows[1].adapt.global_att);
  EXPECT_TRUE(rows[2].adapt.local && rows[2].adapt.global_att);
  EXPECT_FALSE(rows[2].adapt.channel);
  EXPECT_TRUE(rows[3].adapt.local && rows[3].adapt.global_att && rows[3].adapt.channel);
  EXPECT_FALSE(rows[3].fine_tune);
  EXPECT_TRUE(rows[4].fine_tune);
  for (const auto& r : rows) EXPECT_FALSE(r.label.empty());
}

TEST(Ablation, MicroBudgetRunIsDeterministicAndShaped) {
  const std::vector<WeatherSample> data = tiny_corpus();
  TrainConfig tc;
  tc.phase1_steps = 2;
  tc.phase2_steps = 2;
  tc.phase3_steps = 2;
  tc.batch = 2;
  tc.eval_every = 100;
  tc.eval_samples = 2;

  AblationReport a = run_ablation(tiny_model_config(), tc, data, {11});
  AblationReport b = run_ablation(tiny_model_config(), tc, data, {11});

  ASSERT_EQ(a.rows.size(), 5u);
  EXPECT_GT(a.degraded_psnr, 0.0);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    ASSERT_EQ(a.rows[i].psnr_by_seed.size(), 1u);
    EXPECT_EQ(a.rows[i].mean_psnr, b.rows[i].mean_psnr);
    EXPECT_GT(a.rows[i].params, 0u);
  }
  // Adaptivity axes add parameters row over row (fine-tune reuses row 4's).
  EXPECT_GT(a.rows[1].params, a.rows[0].params);
  EXPECT_GT(a.rows[2].params, a.rows[1].params);
  EXPECT_GT(a.rows[3].params, a.rows[2].params);
  EXPECT_EQ(a.rows[4].params, a.rows[3].params);

  const std::string csv = a.to_csv();
  EXPECT_EQ(csv.rfind("row,local,global,channel,fine_tune,params,mean_psnr,converged", 0),
            0u);
  EXPECT_NE(csv.find("\nbaseline,"), std::string::npos);
  EXPECT_NE(csv.find("\n+fine-tune,"), std::string::npos);
}

}  // namespace
}  // namespace mwf
