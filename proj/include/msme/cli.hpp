#pragma once

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "msme/recalibration.hpp"
#include "msme/recipes.hpp"
#include "msme/train.hpp"

namespace msme {
namespace cli {

namespace fs = std::filesystem;

// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kDataError = 3;
constexpr int kNumericError = 4;

inline void parse_app(CLI::App& app, std::vector<std::string> rest) {
  std::reverse(rest.begin(), rest.end());
  app.parse(rest);
}

// Every run leaves its fully resolved configuration next to its outputs.
inline void write_snapshot(const CLI::App& app, const std::string& outdir) {
  fs::create_directories(outdir);
  std::ofstream f(fs::path(outdir) / "config.resolved");
  if (!f) throw DataError("cannot write config snapshot in " + outdir);
  f << app.config_to_str(true, false);
}

inline void setup_app(CLI::App& app) {
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "UTF-8 key=value config file; flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);
}

inline std::vector<uint32_t> parse_combinations(const std::string& spec, int k) {
  std::vector<uint32_t> combos;
  if (spec == "all") {
    for (uint32_t g = 1; g < (1u << k); ++g) combos.push_back(g);
    return combos;
  }
  std::stringstream ss(spec);
  std::string token;
  while (std::getline(ss, token, ',')) {
    if (token.empty()) continue;
    uint32_t g = parse_combo(token);
    if (g >> k)
      throw DataError(strprintf("combination %s requests a marker absent from the dataset "
                                "(markers 1..%d)",
                                token.c_str(), k));
    combos.push_back(g);
  }
  if (combos.empty()) throw ConfigError("no combinations requested");
  return combos;
}

inline std::vector<uint32_t> read_case_file(const std::string& path, int k) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open case file " + path);
  std::vector<uint32_t> subsets;
  std::string line;
  while (std::getline(f, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string token;
    for (char c : line)
      if (!std::isspace(static_cast<unsigned char>(c))) token += c;
    if (token.empty()) continue;
    uint32_t g = parse_combo(token);
    if (g >> k)
      throw DataError(strprintf("case file lists marker beyond 1..%d: %s", k, token.c_str()));
    subsets.push_back(g);
  }
  if (subsets.empty()) throw DataError("case file " + path + " lists no subsets");
  check_case_feasible(subsets, k);
  return subsets;
}

inline std::vector<std::string> split_ids(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string token;
  while (std::getline(ss, token, ','))
    if (!token.empty()) out.push_back(token);
  return out;
}

// ---------------------------------------------------------------------------
// generate-data
// ---------------------------------------------------------------------------

inline int run_generate_data(const std::vector<std::string>& rest) {
  CLI::App app("Render a synthetic multi-marker dataset", "msme generate-data");
  setup_app(app);
  std::string out, preset = "two-class";
  uint64_t seed = 0;
  int k = 3, samples = 8, size = 112, zdepth = 1;
  double resolution = 1.0, density1 = 0.10, density2 = 0.006;
  bool force = false;
  app.add_option("--out", out, "output dataset directory")->required();
  app.add_option("--seed", seed, "generator seed");
  app.add_option("--k", k, "number of markers")->check(CLI::Range(1, 8));
  app.add_option("--samples", samples, "number of samples");
  app.add_option("--size", size, "slice height and width");
  app.add_option("--z", zdepth, "slices per sample");
  app.add_option("--preset", preset, "marker informativeness preset");
  app.add_option("--resolution-um", resolution, "stored pixel size in micrometers");
  app.add_option("--density-class1", density1, "target pixel fraction of class 1");
  app.add_option("--density-class2", density2, "target pixel fraction of class 2");
  app.add_flag("--force", force, "overwrite an existing non-empty directory");
  parse_app(app, rest);

  if (fs::exists(out) && !fs::is_empty(out) && !force)
    throw ConfigError("output directory " + out + " is not empty (use --force)");

  SyntheticConfig cfg;
  cfg.num_markers = k;
  cfg.num_samples = samples;
  cfg.height = size;
  cfg.width = size;
  cfg.depth_z = zdepth;
  cfg.resolution_um = resolution;
  cfg.class_density = {density1, density2};
  cfg.profiles = synthetic_preset_profiles(preset, k);
  cfg.seed = seed;
  Dataset ds = generate_synthetic(cfg);
  write_dataset(ds, out);
  write_snapshot(app, out);

  std::cout << "sample    " << "class1(%)  class2(%)\n";
  double t1 = 0, t2 = 0;
  for (const auto& s : ds.samples) {
    const size_t plane = static_cast<size_t>(s.z) * s.h * s.w;
    size_t c1 = 0, c2 = 0;
    for (size_t i = 0; i < plane; ++i) {
      c1 += s.labels->data[i];
      c2 += s.labels->data[plane + i];
    }
    double f1p = 100.0 * static_cast<double>(c1) / static_cast<double>(plane);
    double f2p = 100.0 * static_cast<double>(c2) / static_cast<double>(plane);
    t1 += f1p;
    t2 += f2p;
    std::cout << strprintf("%-9s %9.2f %10.2f\n", s.id.c_str(), f1p, f2p);
  }
  std::cout << strprintf("%-9s %9.2f %10.2f\n", "TOTAL",
                         t1 / static_cast<double>(ds.samples.size()),
                         t2 / static_cast<double>(ds.samples.size()));
  std::cout << "wrote " << ds.samples.size() << " samples to " << out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline int run_train(const std::vector<std::string>& rest) {
  CLI::App app("Train a segmentation model (or the UB ensemble)", "msme train");
  setup_app(app);
  std::string data, out, model_name = "ms", placements = "EBD", case_file;
  uint64_t seed = 0;
  int class_index = 1, fold = 0, folds = 4, epochs = 200, batch_size = 2;
  int depth = 2, base_filters = 8, input_size = 96, jobs = 1;
  double lr = 1e-3, r_drop = 0.5, width_multiplier = 0.0, target_um = 1.0;
  bool me_bias = true;
  app.add_option("--data", data, "dataset directory")->required();
  app.add_option("--out", out, "run output directory")->required();
  app.add_option("--model", model_name, "mz|ms|ms-dr|ms-vr|ms-se|ms-me|ms-plus|hemis|hemis-ms|ub")
      ->check(CLI::IsMember({"mz", "ms", "ms-dr", "ms-vr", "ms-se", "ms-me", "ms-plus", "hemis",
                             "hemis-ms", "ub"}));
  app.add_option("--class-index", class_index, "1-based class this model segments");
  app.add_option("--fold", fold, "cross-validation fold");
  app.add_option("--folds", folds, "number of folds");
  app.add_option("--epochs", epochs, "training epochs");
  app.add_option("--batch-size", batch_size, "patches per optimizer step");
  app.add_option("--lr", lr, "Adam learning rate");
  app.add_option("--r-drop", r_drop, "marker drop probability for sampling variants");
  app.add_option("--depth", depth, "UNet pooling levels");
  app.add_option("--base-filters", base_filters, "channel width at full resolution");
  app.add_option("--width-multiplier", width_multiplier,
                 "channel width multiplier (0 = variant default)");
  app.add_option("--input-size", input_size, "training patch input size");
  app.add_option("--placements", placements, "attention placements, subset of IEBD");
  app.add_flag("--me-bias,!--no-me-bias", me_bias, "ME modules carry biases");
  app.add_option("--case-file", case_file, "heterogeneous per-sample marker subsets");
  app.add_option("--seed", seed, "training seed");
  app.add_option("--target-um", target_um, "resample resolution before patching");
  app.add_option("--jobs", jobs, "parallel ensemble members");
  parse_app(app, rest);

  Dataset ds = read_dataset(data);
  const int k = ds.num_markers;

  TrainPlan plan;
  plan.epochs = epochs;
  plan.batch_size = batch_size;
  plan.folds = folds;
  plan.fold = fold;
  plan.class_index = class_index;
  plan.patch_input_size = input_size;
  plan.lr = lr;
  plan.target_um = target_um;
  plan.seed = seed;
  if (!case_file.empty()) plan.case_subsets = read_case_file(case_file, k);

  FoldSplit split = fold_split(ds.samples.size(), folds, fold);
  auto assignment = case_assignment(plan.case_subsets, fold, split.train.size());

  ModelConfig mc;
  mc.markers = k;
  mc.depth = depth;
  mc.base_filters = base_filters;
  mc.width_multiplier = width_multiplier;
  mc.attention = Attention::None;
  mc.placements = Placements::parse(placements);
  mc.me_bias = me_bias;
  mc.seed = seed;
  mc.r_drop = r_drop;

  write_snapshot(app, out);

  if (model_name == "ub") {
    mc.variant = Variant::UBMember;
    auto outcome = train_ub_ensemble(
        mc, plan, ds, split, assignment,
        [&](uint32_t g, const Model<float>& m, const TrainResult& res) {
          std::string digits = combo_name(g, k).substr(2);
          std::string stem = (fs::path(out) / ("member_" + digits)).string();
          save_checkpoint(stem, m, res.best_val_f1, res.best_epoch, class_index);
          write_epoch_log(stem + "_log.csv", res.log);
        },
        jobs);
    std::ofstream skipf(fs::path(out) / "ub_skipped.txt");
    for (uint32_t g : outcome.skipped) skipf << combo_name(g, k) << "\n";
    std::cout << "trained " << outcome.trained.size() << " members, skipped "
              << outcome.skipped.size() << "\n";
    for (uint32_t g : outcome.skipped)
      std::cout << "skipped " << combo_name(g, k) << " (not contained in any training sample)\n";
    return kOk;
  }

  mc.variant = variant_from_string(model_name);
  if (mc.variant == Variant::MSSE || mc.variant == Variant::MSME) {
    // resolved() pins the attention kind; placements come from the flag
  }
  Geometry geom = geometry_for(mc.resolved(), input_size);
  auto model = Model<float>::build(mc);
  auto train_p = make_patches(ds, split.train, assignment, class_index, geom, target_um);
  auto val_p = make_patches(ds, split.val, {}, class_index, geom, target_um);
  TrainResult res = train(model, plan, train_p, val_p);
  restore_weights(model, res.best_weights);
  std::string stem = (fs::path(out) / "model").string();
  save_checkpoint(stem, model, res.best_val_f1, res.best_epoch, class_index);
  write_epoch_log((fs::path(out) / "log.csv").string(), res.log);
  std::cout << strprintf("best val F1 %.4f at epoch %d (%d epochs, %zu train patches)\n",
                         res.best_val_f1, res.best_epoch, epochs, train_p.size());
  return kOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline int run_eval(const std::vector<std::string>& rest) {
  CLI::App app("Evaluate a checkpoint (or UB ensemble) over combinations", "msme eval");
  setup_app(app);
  std::string data, out, checkpoint, ensemble_dir, combinations = "all", model_name;
  uint64_t seed = 0;
  int fold = 0, folds = 4, class_index = 0, input_size = 96, jobs = 1;
  double target_um = 1.0;
  app.add_option("--data", data, "dataset directory")->required();
  app.add_option("--out", out, "output directory")->required();
  auto* ck = app.add_option("--checkpoint", checkpoint, "checkpoint stem (without .meta)");
  auto* ed = app.add_option("--ensemble-dir", ensemble_dir, "directory of UB member checkpoints");
  ck->excludes(ed);
  app.add_option("--combinations", combinations, "all | comma list of digit sets (e.g. 1,12,123)");
  app.add_option("--fold", fold, "fold whose test split is evaluated");
  app.add_option("--folds", folds, "number of folds");
  app.add_option("--class-index", class_index, "1-based class (0 = from checkpoint)");
  app.add_option("--input-size", input_size, "tiling input patch size");
  app.add_option("--model-name", model_name, "row label (default: model variant)");
  app.add_option("--target-um", target_um, "resample resolution");
  app.add_option("--seed", seed, "unused; accepted for config uniformity");
  app.add_option("--jobs", jobs, "parallel combinations");
  parse_app(app, rest);
  if (checkpoint.empty() && ensemble_dir.empty())
    throw ConfigError("eval needs --checkpoint or --ensemble-dir");

  Dataset ds = read_dataset(data);
  const int k = ds.num_markers;
  FoldSplit split = fold_split(ds.samples.size(), folds, fold);
  auto combos = parse_combinations(combinations, k);
  write_snapshot(app, out);

  MetricTable table;
  std::vector<std::string> skipped;

  if (!checkpoint.empty()) {
    auto [model, meta] = load_checkpoint(checkpoint);
    if (model.config().markers != k)
      throw DataError(strprintf("checkpoint expects %d markers, dataset has %d",
                                model.config().markers, k));
    int cls = class_index > 0 ? class_index : meta.target_class;
    Geometry geom = geometry_for(model.config(), input_size);
    std::string label = model_name.empty() ? to_string(model.config().variant) : model_name;
    std::vector<MetricRow> rows(combos.size());
    parallel_units(jobs, combos.size(), [&](size_t i) {
      MetricRow r;
      r.model = label;
      r.class_index = cls;
      r.fold = fold;
      r.combo = combos[i];
      r.k = k;
      r.counts = evaluate_combination(model, ds, split.test, combos[i], cls, geom, target_um);
      r.f1 = f1(r.counts);
      rows[i] = std::move(r);
    });
    for (auto& r : rows) table.append(std::move(r));
  } else {
    std::string label = model_name.empty() ? "ub" : model_name;
    std::vector<std::optional<MetricRow>> rows(combos.size());
    parallel_units(jobs, combos.size(), [&](size_t i) {
      uint32_t g = combos[i];
      std::string stem =
          (fs::path(ensemble_dir) / ("member_" + combo_name(g, k).substr(2))).string();
      if (!fs::exists(stem + ".meta")) return;
      auto [member, meta] = load_checkpoint(stem);
      int cls = class_index > 0 ? class_index : meta.target_class;
      Geometry geom = geometry_for(member.config(), input_size);
      MetricRow r;
      r.model = label;
      r.class_index = cls;
      r.fold = fold;
      r.combo = g;
      r.k = k;
      r.counts = evaluate_combination(member, ds, split.test, g, cls, geom, target_um);
      r.f1 = f1(r.counts);
      rows[i] = std::move(r);
    });
    for (size_t i = 0; i < combos.size(); ++i) {
      if (rows[i])
        table.append(std::move(*rows[i]));
      else
        skipped.push_back(combo_name(combos[i], k));
    }
  }

  std::string table_path = (fs::path(out) / "metrics.csv").string();
  table.save_csv(table_path);
  std::ofstream rep(fs::path(out) / "eval_report.txt");
  rep << "rows " << table.size() << "\n";
  for (const auto& s : skipped) rep << "skipped " << s << " (no dedicated member)\n";
  for (const auto& s : skipped)
    std::cout << "skipped " << s << " (no dedicated member)\n";
  std::cout << "wrote " << table.size() << " rows to " << table_path << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

inline int run_segment(const std::vector<std::string>& rest) {
  CLI::App app("Segment samples and write stitched prediction masks", "msme segment");
  setup_app(app);
  std::string data, out, checkpoint, sample_id, combination = "all";
  uint64_t seed = 0;
  int input_size = 96, jobs = 1;
  double target_um = 1.0;
  app.add_option("--data", data, "dataset directory")->required();
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--checkpoint", checkpoint, "checkpoint stem")->required();
  app.add_option("--sample", sample_id, "sample id (default: all samples)");
  app.add_option("--combination", combination,
                 "marker combination to present (all = every available marker)");
  app.add_option("--input-size", input_size, "tiling input patch size");
  app.add_option("--target-um", target_um, "resample resolution");
  app.add_option("--seed", seed, "unused; accepted for config uniformity");
  app.add_option("--jobs", jobs, "parallel samples");
  parse_app(app, rest);

  Dataset ds = read_dataset(data);
  auto [model, meta] = load_checkpoint(checkpoint);
  Geometry geom = geometry_for(model.config(), input_size);
  write_snapshot(app, out);

  std::vector<size_t> indices;
  for (size_t i = 0; i < ds.samples.size(); ++i)
    if (sample_id.empty() || ds.samples[i].id == sample_id) indices.push_back(i);
  if (indices.empty()) throw DataError("no sample with id " + sample_id);

  nlohmann::json manifest;
  manifest["class_index"] = meta.target_class;
  manifest["predictions"] = nlohmann::json::array();
  std::vector<nlohmann::json> entries(indices.size());
  parallel_units(jobs, indices.size(), [&](size_t i) {
    const SampleRecord& raw = ds.samples[indices[i]];
    SampleRecord prep = standardize(resample(raw, target_um));
    uint32_t combo = combination == "all" ? prep.available.bits : parse_combo(combination);
    Tensor<float> logits = segment_sample(model, prep, combo, geom);
    auto mask = argmax_mask(logits);
    std::string file = raw.id + "_pred.bin";
    std::ofstream f(fs::path(out) / file, std::ios::binary);
    f.write(reinterpret_cast<const char*>(mask.data()),
            static_cast<std::streamsize>(mask.size()));
    nlohmann::json j;
    j["id"] = raw.id;
    j["shape"] = {prep.z, prep.h, prep.w};
    j["combination"] = combo_name(combo, prep.available.k);
    j["file"] = file;
    entries[i] = j;
  });
  for (auto& e : entries) manifest["predictions"].push_back(e);
  std::ofstream mf(fs::path(out) / "predictions.json");
  mf << manifest.dump(2) << "\n";
  std::cout << "segmented " << indices.size() << " samples into " << out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// quantify
// ---------------------------------------------------------------------------

inline int run_quantify(const std::vector<std::string>& rest) {
  CLI::App app("Per-sample volume fractions with group statistics", "msme quantify");
  setup_app(app);
  std::string data, out, checkpoint, pred_dir, tissue_checkpoint, combination = "all";
  std::string group_a, group_b;
  uint64_t seed = 0;
  int input_size = 96, jobs = 1;
  double target_um = 1.0;
  app.add_option("--data", data, "dataset directory")->required();
  app.add_option("--out", out, "output directory")->required();
  auto* ck = app.add_option("--checkpoint", checkpoint, "segmentation checkpoint stem");
  auto* pd = app.add_option("--pred-dir", pred_dir, "directory written by `msme segment`");
  ck->excludes(pd);
  app.add_option("--tissue-checkpoint", tissue_checkpoint,
                 "single-marker tissue model (default: dataset tissue masks)");
  app.add_option("--combination", combination, "markers presented to the checkpoint");
  app.add_option("--group-a", group_a, "comma-separated sample ids of group A");
  app.add_option("--group-b", group_b, "comma-separated sample ids of group B");
  app.add_option("--input-size", input_size, "tiling input patch size");
  app.add_option("--target-um", target_um, "resample resolution");
  app.add_option("--seed", seed, "unused; accepted for config uniformity");
  app.add_option("--jobs", jobs, "parallel samples");
  parse_app(app, rest);
  if (checkpoint.empty() && pred_dir.empty())
    throw ConfigError("quantify needs --checkpoint or --pred-dir");

  Dataset ds = read_dataset(data);
  write_snapshot(app, out);

  // prediction masks per sample id
  std::map<std::string, std::vector<uint8_t>> preds;
  if (!pred_dir.empty()) {
    std::ifstream mf(fs::path(pred_dir) / "predictions.json");
    if (!mf) throw DataError("cannot open " + pred_dir + "/predictions.json");
    nlohmann::json manifest;
    mf >> manifest;
    for (const auto& j : manifest["predictions"]) {
      auto shape = j["shape"].get<std::vector<int>>();
      size_t n = static_cast<size_t>(shape[0]) * shape[1] * shape[2];
      std::vector<uint8_t> mask;
      detail::read_raw(fs::path(pred_dir) / j["file"].get<std::string>(), mask, n);
      preds[j["id"].get<std::string>()] = std::move(mask);
    }
  } else {
    auto [model, meta] = load_checkpoint(checkpoint);
    Geometry geom = geometry_for(model.config(), input_size);
    std::vector<std::pair<std::string, std::vector<uint8_t>>> slots(ds.samples.size());
    parallel_units(jobs, ds.samples.size(), [&](size_t i) {
      SampleRecord prep = standardize(resample(ds.samples[i], target_um));
      uint32_t combo = combination == "all" ? prep.available.bits : parse_combo(combination);
      slots[i] = {prep.id, argmax_mask(segment_sample(model, prep, combo, geom))};
    });
    for (auto& [id, mask] : slots) preds[id] = std::move(mask);
  }

  // tissue masks per sample id
  std::map<std::string, std::vector<uint8_t>> tissues;
  if (!tissue_checkpoint.empty()) {
    auto [tmodel, tmeta] = load_checkpoint(tissue_checkpoint);
    Geometry geom = geometry_for(tmodel.config(), input_size);
    std::vector<std::pair<std::string, std::vector<uint8_t>>> slots(ds.samples.size());
    parallel_units(jobs, ds.samples.size(), [&](size_t i) {
      SampleRecord prep = standardize(resample(ds.samples[i], target_um));
      uint32_t combo = tmodel.config().variant == Variant::UBMember
                           ? tmodel.config().ub_subset
                           : (prep.available.bits & 1u);
      slots[i] = {prep.id, argmax_mask(segment_sample(tmodel, prep, combo, geom))};
    });
    for (auto& [id, mask] : slots) tissues[id] = std::move(mask);
  } else {
    for (size_t i = 0; i < ds.samples.size(); ++i) {
      SampleRecord prep = resample(ds.samples[i], target_um);
      if (!prep.tissue)
        throw ContractError("sample " + prep.id +
                            " has no tissue mask; pass --tissue-checkpoint");
      tissues[prep.id] = std::vector<uint8_t>(prep.tissue->data.begin(),
                                              prep.tissue->data.end());
    }
  }

  auto ga = split_ids(group_a);
  auto gb = split_ids(group_b);
  auto group_of = [&](const std::string& id) -> std::string {
    if (std::find(ga.begin(), ga.end(), id) != ga.end()) return "A";
    if (std::find(gb.begin(), gb.end(), id) != gb.end()) return "B";
    return (ga.empty() && gb.empty()) ? "all" : "-";
  };

  std::ofstream csv(fs::path(out) / "occupancy.csv");
  csv << "sample,group,fraction\n";
  std::vector<double> fa, fb;
  std::ostringstream report;
  report << "per-sample occupied fraction\n";
  std::vector<int> marker_counts(static_cast<size_t>(ds.num_markers), 0);
  size_t quantified = 0;
  for (const auto& s : ds.samples) {
    auto pit = preds.find(s.id);
    if (pit == preds.end()) continue;
    double frac = quantify_fraction(pit->second, tissues.at(s.id));
    std::string grp = group_of(s.id);
    csv << strprintf("%s,%s,%.6f\n", s.id.c_str(), grp.c_str(), frac);
    report << strprintf("  %-8s %-4s %.4f  markers %s\n", s.id.c_str(), grp.c_str(), frac,
                        s.available.name().c_str());
    if (grp == "A") fa.push_back(frac);
    if (grp == "B") fb.push_back(frac);
    for (int m = 1; m <= ds.num_markers; ++m)
      if (s.available.test(m)) marker_counts[static_cast<size_t>(m - 1)]++;
    ++quantified;
  }
  report << "\nmarker availability across quantified samples\n";
  for (int m = 1; m <= ds.num_markers; ++m)
    report << strprintf("  m%d: %.0f%%\n", m,
                        100.0 * marker_counts[static_cast<size_t>(m - 1)] /
                            std::max<size_t>(1, quantified));
  auto summarize = [&](const char* name, const std::vector<double>& v) {
    if (v.empty()) return;
    double mu = 0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mu) * (x - mu);
    report << strprintf("group %s: n=%zu mean %.4f +- %.4f\n", name, v.size(), mu,
                        std::sqrt(var / static_cast<double>(v.size())));
  };
  report << "\n";
  summarize("A", fa);
  summarize("B", fb);
  if (!fa.empty() && !fb.empty()) {
    auto t = mann_whitney_u(fa, fb);
    report << strprintf("Mann-Whitney U=%g, two-sided p=%.6g (%s) %s\n", t.statistic, t.p,
                        t.exact ? "exact" : "approx", significance_stars(t.p).c_str());
  }
  std::ofstream rep(fs::path(out) / "report.txt");
  rep << report.str();
  std::cout << report.str();
  return kOk;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

inline int run_compare(const std::vector<std::string>& rest) {
  CLI::App app("Statistical comparison of two metric tables", "msme compare");
  setup_app(app);
  std::string a_path, b_path, out;
  bool unpaired = false, per_class = false;
  app.add_option("--a", a_path, "candidate metric table csv")->required();
  app.add_option("--b", b_path, "reference metric table csv")->required();
  app.add_option("--out", out, "output directory")->required();
  app.add_flag("--unpaired", unpaired, "Mann-Whitney on raw scores instead of paired Wilcoxon");
  app.add_flag("--per-class", per_class, "additionally test each class separately");
  parse_app(app, rest);

  MetricTable a = MetricTable::load_csv(a_path);
  MetricTable b = MetricTable::load_csv(b_path);
  write_snapshot(app, out);

  std::ostringstream report;
  std::ofstream diffs_csv(fs::path(out) / "diffs.csv");
  diffs_csv << "class,fold,combination,diff\n";

  if (unpaired) {
    std::vector<double> av, bv;
    for (const auto& r : a.rows()) av.push_back(r.f1);
    for (const auto& r : b.rows()) bv.push_back(r.f1);
    auto t = mann_whitney_u(av, bv);
    report << strprintf("unpaired Mann-Whitney: n_a=%zu n_b=%zu U=%g p=%.6g (%s) %s\n",
                        av.size(), bv.size(), t.statistic, t.p, t.exact ? "exact" : "approx",
                        significance_stars(t.p).c_str());
  } else {
    auto rel = relative_scores(a, b);
    std::vector<double> pooled;
    std::map<int, std::vector<double>> by_class;
    double mean = 0.0;
    for (const auto& d : rel.diffs) {
      diffs_csv << strprintf("%d,%d,%s,%.9f\n", d.class_index, d.fold,
                             combo_name(d.combo, a.rows()[0].k).c_str(), d.diff);
      pooled.push_back(d.diff);
      by_class[d.class_index].push_back(d.diff);
      mean += d.diff;
    }
    mean /= static_cast<double>(pooled.size());
    auto box = boxplot_summary(pooled);
    auto t = wilcoxon_signed_rank(pooled);
    report << strprintf("paired differences: n=%zu mean %+.4f\n", pooled.size(), mean);
    report << strprintf("boxplot: q1 %+.4f median %+.4f q3 %+.4f whiskers [%+.4f, %+.4f] "
                        "outliers %zu\n",
                        box.q1, box.median, box.q3, box.whisker_lo, box.whisker_hi,
                        box.outliers.size());
    if (t.degenerate)
      report << "Wilcoxon degenerate (all differences zero): p = 1\n";
    else
      report << strprintf("Wilcoxon signed-rank: W=%g two-sided p=%.6g (%s) %s\n", t.statistic,
                          t.p, t.exact ? "exact" : "approx", significance_stars(t.p).c_str());
    if (per_class && by_class.size() > 1) {
      for (const auto& [cls, v] : by_class) {
        auto tc = wilcoxon_signed_rank(v);
        report << strprintf("  class %d: n=%zu p=%.6g %s\n", cls, v.size(), tc.p,
                            significance_stars(tc.p).c_str());
      }
    }
    if (!rel.unmatched_candidate.empty() || !rel.unmatched_reference.empty()) {
      report << "unmatched keys:\n";
      for (const auto& s : rel.unmatched_candidate) report << "  only in candidate: " << s << "\n";
      for (const auto& s : rel.unmatched_reference) report << "  only in reference: " << s << "\n";
    }
  }
  std::ofstream rep(fs::path(out) / "report.txt");
  rep << report.str();
  std::cout << report.str();
  return kOk;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

inline int run_report(const std::vector<std::string>& rest) {
  CLI::App app("Summaries of metric tables, attention, and complexity", "msme report");
  setup_app(app);
  std::vector<std::string> tables;
  std::string recalibration, complexity, out;
  int input_size = 0, batches = 20;
  app.add_option("--table", tables, "metric table csv (repeatable)");
  app.add_option("--recalibration", recalibration, "checkpoint stem with ME modules");
  app.add_option("--complexity", complexity, "checkpoint stem to profile");
  app.add_option("--input-size", input_size, "forward size for --complexity (0 = auto)");
  app.add_option("--batches", batches, "timed forward passes for --complexity");
  app.add_option("--out", out, "output directory")->required();
  parse_app(app, rest);

  std::ostringstream report;
  for (const auto& path : tables) {
    MetricTable t = MetricTable::load_csv(path);
    report << "== " << path << " ==\n";
    std::map<std::string, std::vector<double>> by_model;
    std::map<std::pair<std::string, uint32_t>, std::vector<double>> by_combo;
    int k = 0;
    for (const auto& r : t.rows()) {
      by_model[r.model].push_back(r.f1);
      by_combo[{r.model, r.combo}].push_back(r.f1);
      k = std::max(k, r.k);
    }
    for (const auto& [model, v] : by_model) {
      double mu = 0;
      for (double x : v) mu += x;
      mu /= static_cast<double>(v.size());
      double var = 0;
      for (double x : v) var += (x - mu) * (x - mu);
      auto box = boxplot_summary(v);
      report << strprintf("%s: n=%zu F1 %.4f +- %.4f (median %.4f, iqr [%.4f, %.4f])\n",
                          model.c_str(), v.size(), mu,
                          std::sqrt(var / static_cast<double>(v.size())), box.median, box.q1,
                          box.q3);
      // per-combination means sorted ascending, the combination-ranking view
      std::vector<std::pair<double, uint32_t>> ranked;
      for (const auto& [key, fv] : by_combo) {
        if (key.first != model) continue;
        double m = 0;
        for (double x : fv) m += x;
        ranked.push_back({m / static_cast<double>(fv.size()), key.second});
      }
      std::sort(ranked.begin(), ranked.end());
      for (const auto& [mean, combo] : ranked)
        report << strprintf("    %-10s %.4f\n", combo_name(combo, k).c_str(), mean);
    }
  }
  if (!recalibration.empty()) {
    auto [model, meta] = load_checkpoint(recalibration);
    report << "== recalibration (cosine distances over the combination lattice) ==\n";
    for (const auto& l : analyze_recalibration(model))
      report << strprintf("  %-12s level %d: mean %.4f std %.4f (n=%zu)\n", l.layer.c_str(),
                          l.level, l.mean_distance, l.std_distance, l.pair_count);
  }
  if (!complexity.empty()) {
    auto [model, meta] = load_checkpoint(complexity);
    int in = input_size;
    if (in == 0) {
      for (const auto& g : valid_sizes(model.config(), 512))
        if (g.input_size >= 44) {
          in = g.input_size;
          break;
        }
    }
    auto rep = complexity_report(model, in, batches);
    report << "== complexity ==\n";
    report << strprintf("  parameters     %zu\n", rep.parameter_count);
    report << strprintf("  forward median %.3f ms (input %d)\n", rep.forward_ms_median, in);
    report << strprintf("  peak memory    %.2f MiB (params + forward tape)\n",
                        static_cast<double>(rep.peak_bytes_estimate) / (1024.0 * 1024.0));
  }
  if (tables.empty() && recalibration.empty() && complexity.empty())
    throw ConfigError("report: nothing to do (pass --table/--recalibration/--complexity)");
  write_snapshot(app, out);
  std::ofstream rep(fs::path(out) / "report.txt");
  rep << report.str();
  std::cout << report.str();
  return kOk;
}

// ---------------------------------------------------------------------------
// dispatcher
// ---------------------------------------------------------------------------

inline void print_usage() {
  std::cout << "msme - channel-flexible semantic segmentation workbench\n\n"
               "commands:\n"
               "  generate-data   render a synthetic multi-marker dataset\n"
               "  train           train a model (or the UB ensemble) on one fold\n"
               "  eval            evaluate a checkpoint over marker combinations\n"
               "  segment         write stitched prediction masks\n"
               "  quantify        volume fractions inside the tissue mask\n"
               "  compare         statistical comparison of two metric tables\n"
               "  report          summarize tables, attention, and complexity\n\n"
               "run `msme <command> --help` for the command's flags.\n"
               "shared flags: --config PATH, --out DIR, --seed INT, --jobs INT\n";
}

inline int run_command(const std::vector<std::string>& args) {
  if (args.empty() || args[0] == "-h" || args[0] == "--help" || args[0] == "help") {
    print_usage();
    return kOk;
  }
  const std::string cmd = args[0];
  std::vector<std::string> rest(args.begin() + 1, args.end());
  try {
    if (cmd == "generate-data") return run_generate_data(rest);
    if (cmd == "train") return run_train(rest);
    if (cmd == "eval") return run_eval(rest);
    if (cmd == "segment") return run_segment(rest);
    if (cmd == "quantify") return run_quantify(rest);
    if (cmd == "compare") return run_compare(rest);
    if (cmd == "report") return run_report(rest);
    std::cerr << "unknown command: " << cmd << "\n";
    print_usage();
    return kConfigError;
  } catch (const CLI::CallForHelp& e) {
    std::cout << e.what() << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumericError;
  }
}

}  // namespace cli
}  // namespace msme
