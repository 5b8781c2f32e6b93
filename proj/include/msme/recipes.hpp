#pragma once

#include <string>
#include <vector>

#include "msme/data.hpp"
#include "msme/train.hpp"

namespace msme {

// A fully seeded experiment preset: the recipe pins the synthetic data, the
// architecture template, the training plan, the seeds, the folds, and the
// evaluation lattice, so a protocol re-run is byte-reproducible end to end.
struct ExperimentRecipe {
  std::string name;
  SyntheticConfig data;
  ModelConfig model;
  TrainPlan plan;
  std::vector<uint64_t> seeds;
  std::vector<int> folds;
  std::vector<uint32_t> eval_combinations;
  std::vector<double> r_drop_values;        // r-drop sweep only
  std::vector<Placements> placement_grid;   // placement ablation only
};

namespace detail {

inline ExperimentRecipe desk_k3_base() {
  ExperimentRecipe r;
  r.data.num_markers = 3;
  r.data.num_samples = 8;
  r.data.height = 112;
  r.data.width = 112;
  r.data.depth_z = 1;
  r.data.class_density = {0.10, 0.006};
  r.data.profiles = synthetic_preset_profiles("two-class", 3);
  r.data.seed = 424242;

  r.model.variant = Variant::MS;
  r.model.markers = 3;
  r.model.depth = 2;
  r.model.base_filters = 8;

  r.plan.epochs = 100;
  r.plan.batch_size = 2;
  r.plan.folds = 4;
  r.plan.class_index = 1;
  r.plan.patch_input_size = 96;
  r.plan.lr = 0.005;

  r.seeds = {101, 202, 303, 404, 505};
  r.folds = {0};
  for (uint32_t g = 1; g < 8; ++g) r.eval_combinations.push_back(g);
  return r;
}

}  // namespace detail

// Named protocol presets at desk scale.
//   homogeneous-k3    train on all markers, evaluate all 7 combinations
//   r-drop-sweep      MS models across drop rates
//   placement-ablation ME at I / E / B / D singletons and the full E+B+D
//   ub-ensemble-k3    the 7-member per-combination ensemble
//   case1..case6      heterogeneous per-sample marker assignments
inline ExperimentRecipe experiment_recipe(const std::string& name) {
  ExperimentRecipe r = detail::desk_k3_base();
  r.name = name;
  if (name == "homogeneous-k3") return r;
  if (name == "r-drop-sweep") {
    r.r_drop_values = {0.2, 0.35, 0.5, 0.65, 0.8};
    r.seeds = {101};
    return r;
  }
  if (name == "placement-ablation") {
    r.model.variant = Variant::MSME;
    r.placement_grid = {
        Placements{true, false, false, false},  // I
        Placements{false, true, false, false},  // E
        Placements{false, false, true, false},  // B
        Placements{false, false, false, true},  // D
        Placements{false, true, true, true},    // E+B+D (proposed)
    };
    r.seeds = {101};
    return r;
  }
  if (name == "ub-ensemble-k3") {
    r.model.variant = Variant::UBMember;
    return r;
  }
  if (name.rfind("case", 0) == 0) {
    // per-training-sample subsets over the 5 training slots of a fold
    if (name == "case1") r.plan.case_subsets = {0b001, 0b010, 0b100, 0b001, 0b010};
    else if (name == "case2") r.plan.case_subsets = {0b011, 0b110, 0b101, 0b011, 0b110};
    else if (name == "case3") r.plan.case_subsets = {0b111, 0b111, 0b111, 0b111, 0b111};
    else if (name == "case4") r.plan.case_subsets = {0b111, 0b011, 0b110, 0b111, 0b101};
    else if (name == "case5") r.plan.case_subsets = {0b011, 0b011, 0b110, 0b110, 0b011};
    else if (name == "case6") r.plan.case_subsets = {0b001, 0b011, 0b111, 0b110, 0b010};
    else throw ConfigError("unknown recipe: " + name);
    return r;
  }
  throw ConfigError("unknown recipe: " + name);
}

}  // namespace msme
