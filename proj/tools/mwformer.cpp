// Command-line surface for the all-weather restoration toolkit: corpus
// synthesis, the three training phases, the four inference modes, quality
// evaluation, the adaptivity ablation, embedding export, and compute
// accounting.
//
// Exit codes: 0 success, 1 user error (bad flags, files, or usage), 2
// internal error (numeric failure or a bug).

#include <CLI11.hpp>
#include <cstdio>
#include <optional>

#include "mwformer/evaluation.hpp"

namespace {

using namespace mwf;

Config load_config(const std::string& path) {
  Config c;
  if (!path.empty()) c = Config::parse_file(path);
  return c;
}

struct Bundle {
  Model model;
  ClassAverageBank<float> bank;
};

Bundle load_bundle(const std::string& path) {
  const Checkpoint ck = Checkpoint::load(path);
  return Bundle{load_model(ck), load_bank(ck)};
}

Split split_from(const std::string& name) {
  for (Split s : {Split::train, Split::val, Split::test})
    if (name == to_string(s)) return s;
  throw ConfigError("unknown split '" + name + "' (train, val, test, all)");
}

std::string sample_id(std::size_t index, const WeatherSample& s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05zu", index);
  std::string id = buf;
  for (Weather w : s.classes) id += std::string("_") + to_string(w);
  return id;
}

/// The sample subset selected by --split (with "all" meaning everything).
std::vector<std::pair<std::size_t, const WeatherSample*>> select_split(
    const std::vector<WeatherSample>& data, const std::string& split) {
  std::optional<Split> want;
  if (split != "all") want = split_from(split);
  std::vector<std::pair<std::size_t, const WeatherSample*>> out;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!want || data[i].split == *want) out.emplace_back(i, &data[i]);
  if (out.empty())
    throw ContractError("no samples in split '" + split + "' of this dataset");
  return out;
}

void print_report(const EvalReport& rep) {
  std::printf("%-14s %10s %8s %8s\n", "class", "psnr_db", "ssim", "images");
  for (const auto& r : rep.per_class)
    std::printf("%-14s %10.3f %8.4f %8zu\n", r.cls.c_str(), r.psnr, r.ssim, r.images);
  std::printf("%-14s %10.3f %8.4f\n", "average", rep.mean_psnr, rep.mean_ssim);
  if (rep.params != 0)
    std::printf("params=%llu macs=%llu\n", static_cast<unsigned long long>(rep.params),
                static_cast<unsigned long long>(rep.macs));
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << text;
  if (!os) throw IoError("failed writing '" + path + "'");
}

int run(int argc, char** argv) {
  CLI::App app{"all-weather image restoration toolkit"};
  app.require_subcommand(1);

  // Values shared by several subcommands; each subcommand registers only the
  // flags it actually consumes.
  std::string config_path, data_path, model_path, in_path, out_path, log_path;
  std::string split = "test", mode = "full", cls, image_path;
  std::vector<std::string> order;
  std::optional<std::uint64_t> seed;
  std::size_t index = 0, hybrid = 0, height = 32, width = 32;
  bool fixed_vectors = false, degraded_only = false;

  const auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "config text file (key = value)");
  };
  const auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "seed override (u64)");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic weather corpus");
  add_config(synth);
  add_seed(synth);
  synth->add_option("--out", out_path, "output dataset path (.mwds)")->required();
  synth->add_option("--hybrid", hybrid,
                    "instead: build N two-degradation (streak_haze+flake) test samples");

  CLI::App* pre = app.add_subcommand("pretrain-feat",
                                     "phase 1: contrastive feature pretraining");
  add_config(pre);
  add_seed(pre);
  pre->add_option("--data", data_path, "training dataset (.mwds)")->required();
  pre->add_option("--out", out_path, "output checkpoint (.mwfc)")->required();
  pre->add_option("--log", log_path, "CSV training log path");

  CLI::App* train = app.add_subcommand("train", "phase 2: restoration training");
  add_config(train);
  add_seed(train);
  train->add_option("--data", data_path, "training dataset (.mwds)")->required();
  train->add_option("--in", in_path, "checkpoint from pretrain-feat")->required();
  train->add_option("--out", out_path, "output checkpoint (.mwfc)")->required();
  train->add_option("--log", log_path, "CSV training log path");

  CLI::App* tune = app.add_subcommand("finetune", "phase 3: joint fine-tuning");
  add_config(tune);
  add_seed(tune);
  tune->add_option("--data", data_path, "training dataset (.mwds)")->required();
  tune->add_option("--in", in_path, "checkpoint from train")->required();
  tune->add_option("--out", out_path, "output checkpoint (.mwfc)")->required();
  tune->add_option("--log", log_path, "CSV training log path");

  CLI::App* infer = app.add_subcommand("infer", "restore one image");
  infer->add_option("--model", model_path, "trained checkpoint (.mwfc)")->required();
  infer->add_option("--mode", mode, "full | fixed | cascade")
      ->check(CLI::IsMember({"full", "fixed", "cascade"}));
  infer->add_option("--class", cls, "degradation class for --mode fixed");
  infer->add_option("--order", order, "cascade stage classes (comma separated)")
      ->delimiter(',');
  infer->add_flag("--fixed-vectors", fixed_vectors,
                  "cascade: use stored class averages at every stage");
  infer->add_option("--image", image_path, "input image (.ppm)");
  infer->add_option("--data", data_path, "input dataset (.mwds), with --index");
  infer->add_option("--index", index, "sample index into --data");
  infer->add_option("--out", out_path, "output image (.ppm)")->required();

  CLI::App* ident = app.add_subcommand("identify", "score degradation classes per image");
  ident->add_option("--model", model_path, "trained checkpoint (.mwfc)")->required();
  ident->add_option("--data", data_path, "dataset (.mwds)")->required();
  ident->add_option("--split", split, "train | val | test | all");
  ident->add_option("--out", out_path, "score CSV path");

  CLI::App* route = app.add_subcommand("route",
                                       "identify, then restore with that class's expert");
  route->add_option("--model", model_path, "trained checkpoint (.mwfc)")->required();
  route->add_option("--data", data_path, "input dataset (.mwds)")->required();
  route->add_option("--index", index, "sample index into --data");
  route->add_option("--out", out_path, "output image (.ppm)");

  CLI::App* eval = app.add_subcommand("eval", "quality report over a dataset split");
  eval->add_option("--model", model_path, "trained checkpoint (.mwfc)");
  eval->add_option("--data", data_path, "dataset (.mwds)")->required();
  eval->add_option("--split", split, "train | val | test");
  eval->add_flag("--degraded-only", degraded_only,
                 "score the degraded inputs as-is (no model)");
  eval->add_option("--out", out_path, "report CSV path");

  CLI::App* ablate = app.add_subcommand("ablate", "adaptivity ablation study");
  add_config(ablate);
  ablate->add_option("--data", data_path, "dataset (.mwds)")->required();
  ablate->add_option("--out", out_path, "report CSV path");

  CLI::App* embed = app.add_subcommand("export-embeddings",
                                       "dump per-image feature vectors as CSV");
  embed->add_option("--model", model_path, "trained checkpoint (.mwfc)")->required();
  embed->add_option("--data", data_path, "dataset (.mwds)")->required();
  embed->add_option("--out", out_path, "CSV path")->required();

  CLI::App* count = app.add_subcommand("count", "parameter and MAC accounting");
  add_config(count);
  count->add_option("--height", height, "input height (default 32)");
  count->add_option("--width", width, "input width (default 32)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints the requested help; exit 0
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the diagnostic and the usage hint
    return 1;
  }

  if (*synth) {
    Config c = load_config(config_path);
    DatasetConfig dc = dataset_config_from(c);
    if (seed) dc.seed = *seed;
    std::vector<WeatherSample> samples;
    if (hybrid > 0) {
      samples = make_hybrid_samples(hybrid, {Weather::StreakHaze, Weather::Flake},
                                    dc.height, dc.width, dc.seed);
    } else {
      samples = make_samples(dc);
    }
    write_mwds(out_path, samples);
    std::printf("wrote %zu samples (%zux%zu) to %s\n", samples.size(), dc.height,
                dc.width, out_path.c_str());
    return 0;
  }

  if (*pre || *train || *tune) {
    Config c = load_config(config_path);
    TrainConfig tc = train_config_from(c);
    if (seed) tc.seed = *seed;
    const std::vector<WeatherSample> data = read_mwds(data_path);

    if (*pre) {
      Model m(model_config_from(c), tc.seed);
      Trainer t(std::move(m), tc, data, log_path);
      t.run_phase1();
      t.save(out_path);
      std::printf("phase 1 done (%zu steps); bank classes:", tc.phase1_steps);
      for (const std::string& b : t.bank().classes()) std::printf(" %s", b.c_str());
      std::printf("\nsaved %s\n", out_path.c_str());
      return 0;
    }

    const bool has_val = std::any_of(data.begin(), data.end(), [](const WeatherSample& s) {
      return s.split == Split::val;
    });
    const auto print_phase = [&](int phase, std::size_t steps, const Trainer& t) {
      std::printf("phase %d done (%zu steps)", phase, steps);
      if (has_val) {
        const auto [p, s] = t.validate_restoration(tc.eval_samples);
        std::printf(": val_psnr=%.3f val_ssim=%.4f", p, s);
      } else {
        std::printf(" (dataset has no val split)");
      }
      std::printf("\n");
    };

    Trainer t = Trainer::resume(Checkpoint::load(in_path), tc, data, log_path);
    if (*train) {
      t.run_phase2();
      print_phase(2, tc.phase2_steps, t);
    } else {
      t.run_phase3();
      print_phase(3, tc.phase3_steps, t);
    }
    t.save(out_path);
    std::printf("saved %s\n", out_path.c_str());
    return 0;
  }

  if (*infer) {
    Bundle b = load_bundle(model_path);
    Tensor<float> img;
    if (!image_path.empty()) {
      img = read_ppm(image_path);
    } else if (!data_path.empty()) {
      const std::vector<WeatherSample> data = read_mwds(data_path);
      if (index >= data.size())
        throw ContractError("--index " + std::to_string(index) + " out of range (" +
                            std::to_string(data.size()) + " samples)");
      img = data[index].degraded;
    } else {
      throw ConfigError("infer needs --image or --data/--index");
    }

    Tensor<float> out;
    if (mode == "full") {
      out = infer_full(b.model, img);
    } else if (mode == "fixed") {
      if (cls.empty()) throw ConfigError("--mode fixed needs --class");
      out = infer_fixed(b.model, b.bank, cls, img);
    } else {
      if (order.empty()) order = default_hybrid_order();
      out = infer_cascade(b.model, b.bank, img, order, fixed_vectors);
    }
    write_ppm(out_path, out);
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
  }

  if (*ident) {
    Bundle b = load_bundle(model_path);
    const std::vector<WeatherSample> data = read_mwds(data_path);
    const auto subset = select_split(data, split);

    std::vector<std::pair<std::string, WeatherScores>> rows;
    std::size_t labelled = 0, correct = 0;
    for (const auto& [i, s] : subset) {
      rows.emplace_back(sample_id(i, *s), weather_scores(b.model, b.bank, s->degraded));
      if (s->classes.size() == 1) {
        ++labelled;
        if (rows.back().second.best_class() == to_string(s->classes.front())) ++correct;
      }
    }
    if (!out_path.empty()) write_score_csv(out_path, rows);
    std::printf("scored %zu images", rows.size());
    if (labelled > 0)
      std::printf("; identification accuracy %zu/%zu = %.2f%%", correct, labelled,
                  100.0 * double(correct) / double(labelled));
    std::printf("\n");
    if (!out_path.empty()) std::printf("wrote %s\n", out_path.c_str());
    return 0;
  }

  if (*route) {
    Bundle b = load_bundle(model_path);
    const std::vector<WeatherSample> data = read_mwds(data_path);
    if (index >= data.size())
      throw ContractError("--index " + std::to_string(index) + " out of range (" +
                          std::to_string(data.size()) + " samples)");

    // Stock registry: one fixed-vector restoration expert per stored class.
    ExpertRegistry reg;
    for (const std::string& name : b.bank.classes())
      reg.set(name, [&b, name](const Tensor<float>& x) {
        return infer_fixed(b.model, b.bank, name, x);
      });

    RoutedResult r = route_expert(b.model, b.bank, reg, data[index].degraded);
    std::printf("chosen class: %s\n", r.chosen.c_str());
    for (std::size_t i = 0; i < r.scores.classes.size(); ++i)
      std::printf("  %-14s d=%+.4f s=%.4f\n", r.scores.classes[i].c_str(),
                  r.scores.cosine[i], r.scores.score[i]);
    if (!out_path.empty()) {
      write_ppm(out_path, r.output);
      std::printf("wrote %s\n", out_path.c_str());
    }
    return 0;
  }

  if (*eval) {
    const std::vector<WeatherSample> data = read_mwds(data_path);
    const Split sp = split_from(split);
    EvalReport rep;
    if (degraded_only) {
      rep = evaluate_degraded(data, sp);
    } else {
      if (model_path.empty()) throw ConfigError("eval needs --model (or --degraded-only)");
      Bundle b = load_bundle(model_path);
      rep = evaluate(b.model, data, sp);
    }
    print_report(rep);
    if (!out_path.empty()) {
      write_text(out_path, rep.to_csv());
      std::printf("wrote %s\n", out_path.c_str());
    }
    return 0;
  }

  if (*ablate) {
    Config c = load_config(config_path);
    const std::vector<WeatherSample> data = read_mwds(data_path);
    std::vector<std::uint64_t> seeds{1, 2, 3};
    if (c.has("ablate.seeds")) {
      seeds.clear();
      for (std::size_t s : c.count_list("ablate.seeds")) seeds.push_back(s);
    }
    AblationReport rep = run_ablation(model_config_from(c), train_config_from(c), data,
                                      seeds);
    std::printf("degraded baseline: %.3f dB\n", rep.degraded_psnr);
    std::printf("%-24s %10s %12s %s\n", "row", "mean_psnr", "params", "converged");
    for (const AblationRow& r : rep.rows)
      std::printf("%-24s %10.3f %12llu %s\n", r.label.c_str(), r.mean_psnr,
                  static_cast<unsigned long long>(r.params), r.converged ? "yes" : "no");
    if (!out_path.empty()) {
      write_text(out_path, rep.to_csv());
      std::printf("wrote %s\n", out_path.c_str());
    }
    return 0;
  }

  if (*embed) {
    Bundle b = load_bundle(model_path);
    const std::vector<WeatherSample> data = read_mwds(data_path);
    write_embeddings_csv(out_path, b.model, data);
    std::printf("wrote %zu embeddings to %s\n", data.size(), out_path.c_str());
    return 0;
  }

  if (*count) {
    Config c = load_config(config_path);
    const ModelConfig mc = model_config_from(c);
    const ComputeCount cc = count_compute(mc.backbone, mc.feature, height, width);
    std::printf("input %zux%zu\n", height, width);
    std::printf("backbone: fixed=%llu adaptive=%llu macs=%llu\n",
                static_cast<unsigned long long>(cc.backbone.fixed_params),
                static_cast<unsigned long long>(cc.backbone.adaptive_params),
                static_cast<unsigned long long>(cc.backbone.macs));
    std::printf("feature:  fixed=%llu adaptive=%llu macs=%llu\n",
                static_cast<unsigned long long>(cc.feature.fixed_params),
                static_cast<unsigned long long>(cc.feature.adaptive_params),
                static_cast<unsigned long long>(cc.feature.macs));
    std::printf("total: params=%llu trainable=%llu macs=%llu\n",
                static_cast<unsigned long long>(cc.total_params()),
                static_cast<unsigned long long>(cc.trainable_params()),
                static_cast<unsigned long long>(cc.total_macs()));
    return 0;
  }

  return 0;  // unreachable: require_subcommand(1)
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "internal numeric error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  }
}
