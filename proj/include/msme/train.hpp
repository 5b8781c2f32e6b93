#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msme/data.hpp"
#include "msme/model.hpp"
#include "msme/stats.hpp"

namespace msme {

// ---------------------------------------------------------------------------
// Loss: logarithmic class weights + weighted softmax cross-entropy.
// ---------------------------------------------------------------------------

struct LossConfig {
  double epsilon = 1e-8;      // stabilizes the logarithm
  double weight_floor = 0.05; // raw log weights of majority classes go negative
};

inline std::vector<double> class_weights(const std::vector<uint64_t>& pixel_counts,
                                         const LossConfig& cfg = {}) {
  if (cfg.epsilon <= 0.0 || cfg.weight_floor <= 0.0)
    throw ContractError("class_weights: epsilon and weight_floor must be positive");
  const size_t C = pixel_counts.size();
  uint64_t total = 0;
  for (size_t c = 0; c < C; ++c) {
    if (pixel_counts[c] == 0)
      throw ContractError(strprintf("class_weights: class %zu has no annotated pixels", c + 1));
    total += pixel_counts[c];
  }
  std::vector<double> w(C);
  for (size_t c = 0; c < C; ++c) {
    double raw = std::log(cfg.epsilon + static_cast<double>(total) /
                                            (static_cast<double>(C) *
                                             static_cast<double>(pixel_counts[c])));
    w[c] = std::max(cfg.weight_floor, raw);
  }
  return w;
}

// L = -sum_c W_c sum_j y_jc log softmax(logits)_jc, stabilized via
// log-sum-exp. Labels must be one-hot per pixel.
template <class T>
NodeId weighted_ce(Tape<T>& t, NodeId logits, const Tensor<T>& onehot,
                   const std::vector<T>& weights) {
  const Tensor<T>& lv = t.value(logits);
  detail::expect_rank(lv, 3, "weighted_ce logits");
  if (!lv.same_shape(onehot))
    throw DimError(strprintf("weighted_ce: logits %s vs labels %s",
                             shape_str(lv.shape).c_str(), shape_str(onehot.shape).c_str()));
  const size_t C = lv.dim(0);
  if (weights.size() != C)
    throw DimError(strprintf("weighted_ce: %zu weights for %zu classes", weights.size(), C));
  if (!lv.all_finite()) throw NumericError("weighted_ce: non-finite logits");
  const size_t HW = lv.dim(1) * lv.dim(2);
  for (size_t j = 0; j < HW; ++j) {
    T s{};
    for (size_t c = 0; c < C; ++c) {
      T y = onehot.data[c * HW + j];
      if (y != T{0} && y != T{1})
        throw ContractError("weighted_ce: labels must be one-hot per pixel");
      s += y;
    }
    if (s != T{1}) throw ContractError("weighted_ce: labels must be one-hot per pixel");
  }

  // softmax probabilities are reused by the backward pass
  auto probs = std::make_shared<Tensor<T>>(lv.shape);
  double loss = 0.0;
  for (size_t j = 0; j < HW; ++j) {
    T m = lv.data[j];
    for (size_t c = 1; c < C; ++c) m = std::max(m, lv.data[c * HW + j]);
    double sum = 0.0;
    for (size_t c = 0; c < C; ++c)
      sum += std::exp(static_cast<double>(lv.data[c * HW + j] - m));
    double lse = static_cast<double>(m) + std::log(sum);
    for (size_t c = 0; c < C; ++c) {
      double logp = static_cast<double>(lv.data[c * HW + j]) - lse;
      probs->data[c * HW + j] = static_cast<T>(std::exp(logp));
      if (onehot.data[c * HW + j] != T{0}) loss -= weights[c] * logp;
    }
  }

  bool ng = t.needs_grad(logits);
  NodeId id = t.emplace(Tensor<T>::scalar(static_cast<T>(loss)), ng);
  auto labels = std::make_shared<Tensor<T>>(onehot);
  auto w = std::make_shared<std::vector<T>>(weights);
  t.set_backward(id, [=](Tape<T>& tp) {
    T g = tp.grad(id).data[0];
    Tensor<T>& gl = tp.grad(logits);
    for (size_t j = 0; j < HW; ++j) {
      T wj{};
      for (size_t c = 0; c < C; ++c)
        if (labels->data[c * HW + j] != T{0}) wj = (*w)[c];
      for (size_t c = 0; c < C; ++c)
        gl.data[c * HW + j] +=
            g * wj * (probs->data[c * HW + j] - labels->data[c * HW + j]);
    }
  });
  return id;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;
  std::vector<Tensor<float>> m, v;

  static AdamState for_model(const Model<float>& model, double lr = 1e-3) {
    AdamState s;
    s.lr = lr;
    for (const auto& p : model.params()) {
      s.m.push_back(Tensor<float>::zeros(p.value.shape));
      s.v.push_back(Tensor<float>::zeros(p.value.shape));
    }
    return s;
  }
};

// One bias-corrected Adam update; gradients are read from param.grad.
inline void adam_step(AdamState& s, std::vector<Parameter<float>>& params) {
  if (s.m.size() != params.size()) throw ContractError("adam_step: state/registry mismatch");
  s.t += 1;
  double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    for (size_t j = 0; j < p.value.numel(); ++j) {
      double g = p.grad.data[j];
      double m = s.beta1 * s.m[i].data[j] + (1.0 - s.beta1) * g;
      double v = s.beta2 * s.v[i].data[j] + (1.0 - s.beta2) * g * g;
      s.m[i].data[j] = static_cast<float>(m);
      s.v[i].data[j] = static_cast<float>(v);
      p.value.data[j] -= static_cast<float>(s.lr * (m / bc1) /
                                            (std::sqrt(v / bc2) + s.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Fold splits: contiguous test blocks so every sample appears in test exactly
// once across folds; the following sample is validation, the rest train.
// ---------------------------------------------------------------------------

struct FoldSplit {
  std::vector<size_t> train, val, test;
};

inline FoldSplit fold_split(size_t n_samples, int folds, int fold) {
  if (folds < 1 || fold < 0 || fold >= folds) throw ContractError("fold_split: bad fold index");
  if (n_samples < static_cast<size_t>(folds) + 2)
    throw ContractError(strprintf("fold_split: %zu samples cannot support %d folds "
                                  "with a validation sample",
                                  n_samples, folds));
  size_t ts = n_samples / static_cast<size_t>(folds);
  size_t begin = ts * static_cast<size_t>(fold);
  size_t end = (fold == folds - 1) ? n_samples : begin + ts;
  FoldSplit s;
  for (size_t i = begin; i < end; ++i) s.test.push_back(i);
  s.val.push_back(end % n_samples);
  for (size_t i = 0; i < n_samples; ++i) {
    bool used = (i >= begin && i < end) || i == s.val[0];
    if (!used) s.train.push_back(i);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Train plans
// ---------------------------------------------------------------------------

struct TrainPlan {
  int epochs = 200;
  int batch_size = 2;
  int folds = 4;
  int fold = 0;
  int class_index = 1;  // 1-based class this model targets
  int patch_input_size = 96;
  double lr = 1e-3;
  double target_um = 1.0;
  LossConfig loss;
  // Heterogeneous-marker case: one subset per training-sample slot, rotated
  // by the fold index. Empty = homogeneous (all available markers).
  std::vector<uint32_t> case_subsets;
  uint64_t seed = 0;
};

// Rotates the case subsets for a cross-validation fold and renders the
// per-training-sample assignment. Validation samples keep all markers.
inline std::vector<uint32_t> case_assignment(const std::vector<uint32_t>& subsets, int fold,
                                             size_t n_train) {
  if (subsets.empty()) return {};
  std::vector<uint32_t> out(n_train);
  for (size_t i = 0; i < n_train; ++i)
    out[i] = subsets[(i + static_cast<size_t>(fold)) % subsets.size()];
  return out;
}

inline void check_case_feasible(const std::vector<uint32_t>& subsets, int k) {
  for (uint32_t g : subsets)
    if (g == 0) throw ContractError("case plan: empty marker subset");
  auto total = compute_M_total(subsets, k);
  uint32_t uni = 0;
  for (uint32_t g : subsets) uni |= g;
  if (uni != MarkerAvailability::all(k).bits) {
    std::string have;
    for (uint32_t g : total) {
      if (!have.empty()) have += " ";
      have += combo_name(g, k);
    }
    throw DataError(strprintf("case plan infeasible: markers tested at inference are missing "
                              "from every training subset; achievable M^total = {%s}",
                              have.c_str()));
  }
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

struct TrainPatch {
  Tensor<float> input;         // [K_in, in, in], standardized
  Tensor<float> label_onehot;  // [2, out, out] {background, class}
  MarkerAvailability provided; // availability presented to the sampler
  size_t sample_index = 0;
};

inline Tensor<float> restrict_channels(const Tensor<float>& patch, uint32_t subset, int k) {
  std::vector<size_t> keep;
  for (int m = 1; m <= k; ++m)
    if ((subset >> (m - 1)) & 1u) keep.push_back(static_cast<size_t>(m - 1));
  Tensor<float> out({keep.size(), patch.dim(1), patch.dim(2)});
  const size_t plane = patch.dim(1) * patch.dim(2);
  for (size_t i = 0; i < keep.size(); ++i)
    std::copy(patch.ptr() + keep[i] * plane, patch.ptr() + (keep[i] + 1) * plane,
              out.ptr() + i * plane);
  return out;
}

// Decomposes the listed samples into training patches for one target class.
// `assignment` (when non-empty) restricts each sample's availability; pass
// ub_subset != 0 to build member patches over that fixed combination only.
inline std::vector<TrainPatch> make_patches(const Dataset& ds,
                                            const std::vector<size_t>& sample_indices,
                                            const std::vector<uint32_t>& assignment,
                                            int class_index, const Geometry& geom,
                                            double target_um, uint32_t ub_subset = 0) {
  if (class_index < 1 || static_cast<size_t>(class_index) > ds.classes.size())
    throw ContractError(strprintf("class index %d outside 1..%zu", class_index,
                                  ds.classes.size()));
  std::vector<TrainPatch> patches;
  const int out = geom.output_size;
  for (size_t si = 0; si < sample_indices.size(); ++si) {
    const SampleRecord& raw = ds.samples[sample_indices[si]];
    if (!raw.labels) throw DataError("sample " + raw.id + " has no labels");
    SampleRecord prep = standardize(resample(raw, target_um));
    uint32_t avail = prep.available.bits;
    if (!assignment.empty()) avail &= assignment[si];
    if (ub_subset != 0) {
      if ((avail & ub_subset) != ub_subset) continue;  // member needs all its markers
      avail = ub_subset;
    }
    if (avail == 0)
      throw DataError("sample " + raw.id + " has no markers left after assignment");
    auto [inputs, grid] = decompose(prep.channels, geom);
    for (size_t ti = 0; ti < grid.tiles.size(); ++ti) {
      TrainPatch p;
      p.input = ub_subset != 0 ? restrict_channels(inputs[ti], ub_subset, prep.available.k)
                               : std::move(inputs[ti]);
      p.provided = ub_subset != 0
                       ? MarkerAvailability::all(std::popcount(ub_subset))
                       : MarkerAvailability(avail, prep.available.k);
      auto pos = extract_output_crop(*prep.labels, static_cast<size_t>(class_index - 1),
                                     grid.tiles[ti], out);
      p.label_onehot = Tensor<float>({2, static_cast<size_t>(out), static_cast<size_t>(out)});
      for (size_t i = 0; i < pos.numel(); ++i) {
        p.label_onehot.data[i] = pos.data[i] ? 0.0f : 1.0f;
        p.label_onehot.data[pos.numel() + i] = pos.data[i] ? 1.0f : 0.0f;
      }
      p.sample_index = sample_indices[si];
      patches.push_back(std::move(p));
    }
  }
  return patches;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0, val_loss = 0.0, train_f1 = 0.0, val_f1 = 0.0;
};

struct TrainResult {
  double best_val_f1 = -1.0;
  int best_epoch = -1;
  std::vector<EpochLog> log;
  std::vector<Tensor<float>> best_weights;  // registry order
};

inline void write_epoch_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << "epoch,train_loss,val_loss,train_f1,val_f1\n";
  for (const auto& e : log)
    f << strprintf("%d,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss, e.val_loss, e.train_f1,
                   e.val_f1);
}

namespace detail {

template <class T>
ConfusionCounts logits_confusion(const Tensor<T>& logits, const Tensor<T>& onehot) {
  const size_t HW = logits.dim(1) * logits.dim(2);
  ConfusionCounts c;
  for (size_t j = 0; j < HW; ++j) {
    bool pred = logits.data[HW + j] > logits.data[j];
    bool truth = onehot.data[HW + j] != T{0};
    if (pred && truth) ++c.tp;
    else if (pred && !truth) ++c.fp;
    else if (!pred && truth) ++c.fn;
    else ++c.tn;
  }
  return c;
}

}  // namespace detail

// Trains in place; `model` holds the final-epoch weights afterwards while the
// result carries the best-validation snapshot, per the selection rule.
inline TrainResult train(Model<float>& model, const TrainPlan& plan,
                         const std::vector<TrainPatch>& train_patches,
                         const std::vector<TrainPatch>& val_patches) {
  if (train_patches.empty()) throw ContractError("train: empty training split");
  if (val_patches.empty()) throw ContractError("train: empty validation split");

  // class weights from the training labels the loss will see
  std::vector<uint64_t> counts(2, 0);
  for (const auto& p : train_patches) {
    const size_t n = p.label_onehot.numel() / 2;
    for (size_t i = 0; i < n; ++i)
      counts[p.label_onehot.data[n + i] != 0.0f ? 1 : 0]++;
  }
  auto wd = class_weights(counts, plan.loss);
  std::vector<float> weights(wd.begin(), wd.end());

  SamplingPolicy policy = model.config().sampling_policy();
  AdamState adam = AdamState::for_model(model, plan.lr);
  Rng shuffle_rng = Rng(plan.seed).split(1);
  Rng sampler_rng = Rng(plan.seed).split(2);

  TrainResult result;
  std::vector<size_t> order(train_patches.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    size_t loss_batches = 0;
    ConfusionCounts train_conf;

    for (size_t b = 0; b < order.size(); b += static_cast<size_t>(plan.batch_size)) {
      size_t batch_n = std::min(static_cast<size_t>(plan.batch_size), order.size() - b);
      Tape<float> tape;
      auto pnodes = model.bind(tape, true);
      NodeId batch_loss = kNoNode;
      for (size_t i = 0; i < batch_n; ++i) {
        const TrainPatch& patch = train_patches[order[b + i]];
        auto sampled = sample_markers(patch.input, policy, sampler_rng, Phase::Train,
                                      patch.provided);
        if (sampled.avail.empty())
          throw NumericError("train: sampler emitted an empty availability vector");
        NodeId x = tape.leaf(std::move(sampled.channels), false);
        NodeId logits = model.forward(tape, pnodes, x, sampled.avail);
        train_conf += detail::logits_confusion(tape.value(logits), patch.label_onehot);
        NodeId item = weighted_ce(tape, logits, patch.label_onehot, weights);
        batch_loss = batch_loss == kNoNode ? item : add(tape, batch_loss, item);
      }
      batch_loss = scale(tape, batch_loss, 1.0f / static_cast<float>(batch_n));
      double lv = tape.value(batch_loss).data[0];
      if (!std::isfinite(lv)) throw NumericError("train: non-finite loss");
      loss_sum += lv;
      ++loss_batches;
      tape.backward(batch_loss);
      auto& params = model.params();
      for (size_t i = 0; i < params.size(); ++i) {
        if (tape.grad_touched(pnodes[i]))
          params[i].grad = tape.grad(pnodes[i]);
        else
          std::fill(params[i].grad.data.begin(), params[i].grad.data.end(), 0.0f);
      }
      adam_step(adam, params);
    }

    // validation at full availability
    double val_loss = 0.0;
    ConfusionCounts val_conf;
    for (const auto& patch : val_patches) {
      Tape<float> tape;
      auto pnodes = model.bind(tape, false);
      Rng unused(0);
      auto sampled = sample_markers(patch.input, policy, unused, Phase::Infer, patch.provided);
      NodeId x = tape.leaf(std::move(sampled.channels), false);
      NodeId logits = model.forward(tape, pnodes, x, sampled.avail);
      val_conf += detail::logits_confusion(tape.value(logits), patch.label_onehot);
      val_loss += tape.value(weighted_ce(tape, logits, patch.label_onehot, weights)).data[0];
    }
    val_loss /= static_cast<double>(val_patches.size());

    EpochLog row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(loss_batches);
    row.val_loss = val_loss;
    row.train_f1 = f1(train_conf);
    row.val_f1 = f1(val_conf);
    result.log.push_back(row);

    if (row.val_f1 > result.best_val_f1) {
      result.best_val_f1 = row.val_f1;
      result.best_epoch = epoch;
      result.best_weights.clear();
      for (const auto& p : model.params()) result.best_weights.push_back(p.value);
    }
  }
  return result;
}

inline void restore_weights(Model<float>& model, const std::vector<Tensor<float>>& weights) {
  if (weights.size() != model.params().size())
    throw ContractError("restore_weights: registry mismatch");
  for (size_t i = 0; i < weights.size(); ++i) model.params()[i].value = weights[i];
}

// ---------------------------------------------------------------------------
// Evaluation through the tiling pipeline
// ---------------------------------------------------------------------------

// Segments one (already resampled + standardized) sample at the given marker
// combination and returns the stitched [2,Z,H,W] logit volume.
inline Tensor<float> segment_sample(const Model<float>& model, const SampleRecord& prep,
                                    uint32_t combo, const Geometry& geom) {
  uint32_t avail = combo & prep.available.bits;
  if (avail == 0)
    throw DataError(strprintf("sample %s has none of the markers in %s", prep.id.c_str(),
                              combo_name(combo, prep.available.k).c_str()));
  SamplingPolicy policy = model.config().sampling_policy();
  bool member = model.config().variant == Variant::UBMember;
  uint32_t member_subset = model.config().ub_subset;
  if (member && (avail & member_subset) != member_subset)
    throw DataError("ub member evaluated on a combination it was not trained for");

  auto [inputs, grid] = decompose(prep.channels, geom);
  std::vector<Tensor<float>> outputs;
  Rng unused(0);
  for (auto& input : inputs) {
    Tensor<float> x;
    MarkerAvailability v;
    if (member) {
      x = restrict_channels(input, member_subset, prep.available.k);
      v = MarkerAvailability::all(std::popcount(member_subset));
    } else {
      auto sampled = sample_markers(input, policy, unused, Phase::Infer,
                                    MarkerAvailability(avail, prep.available.k));
      x = std::move(sampled.channels);
      v = sampled.avail;
    }
    outputs.push_back(model.infer(x, v));
  }
  return stitch(grid, outputs);
}

inline std::vector<uint8_t> argmax_mask(const Tensor<float>& logits) {
  const size_t plane = logits.numel() / logits.dim(0);
  std::vector<uint8_t> mask(plane);
  for (size_t i = 0; i < plane; ++i) mask[i] = logits.data[plane + i] > logits.data[i] ? 1 : 0;
  return mask;
}

// Pixel confusion of one model on the test samples for one combination.
inline ConfusionCounts evaluate_combination(const Model<float>& model, const Dataset& ds,
                                            const std::vector<size_t>& test_samples,
                                            uint32_t combo, int class_index,
                                            const Geometry& geom, double target_um) {
  ConfusionCounts total;
  for (size_t idx : test_samples) {
    SampleRecord prep = standardize(resample(ds.samples[idx], target_um));
    if (!prep.labels) throw DataError("sample " + prep.id + " has no labels");
    Tensor<float> logits = segment_sample(model, prep, combo, geom);
    auto mask = argmax_mask(logits);
    const size_t plane = mask.size();
    const uint8_t* truth = prep.labels->ptr() + static_cast<size_t>(class_index - 1) * plane;
    for (size_t i = 0; i < plane; ++i) {
      bool p = mask[i] != 0, tr = truth[i] != 0;
      if (p && tr) ++total.tp;
      else if (p && !tr) ++total.fp;
      else if (!p && tr) ++total.fn;
      else ++total.tn;
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// UB ensemble
// ---------------------------------------------------------------------------

struct UBTrainOutcome {
  std::vector<std::pair<uint32_t, TrainResult>> trained;  // combo -> result
  std::vector<uint32_t> skipped;                          // combos without data
};

// Trains one dedicated member per trainable combination; combinations not
// contained in any training sample's assignment are skipped and reported.
inline UBTrainOutcome train_ub_ensemble(
    const ModelConfig& member_template, const TrainPlan& plan, const Dataset& ds,
    const FoldSplit& split, const std::vector<uint32_t>& assignment,
    const std::function<void(uint32_t, const Model<float>&, const TrainResult&)>& on_member,
    int jobs = 1) {
  const int k = member_template.markers;
  std::vector<uint32_t> train_avail;
  for (size_t i = 0; i < split.train.size(); ++i) {
    uint32_t a = ds.samples[split.train[i]].available.bits;
    if (!assignment.empty()) a &= assignment[i];
    train_avail.push_back(a);
  }
  auto trainable = compute_M_UB(train_avail, k);
  UBTrainOutcome outcome;
  for (uint32_t g = 1; g < (1u << k); ++g)
    if (std::find(trainable.begin(), trainable.end(), g) == trainable.end())
      outcome.skipped.push_back(g);

  Geometry geom = geometry_for(member_template, plan.patch_input_size);
  std::vector<std::optional<std::pair<uint32_t, TrainResult>>> slots(trainable.size());
  std::vector<uint32_t> extra_skipped(trainable.size(), 0);
  parallel_units(jobs, trainable.size(), [&](size_t i) {
    uint32_t g = trainable[i];
    ModelConfig cfg = member_template;
    cfg.variant = Variant::UBMember;
    cfg.ub_subset = g;
    cfg.attention = Attention::None;
    auto model = Model<float>::build(cfg);
    auto train_p =
        make_patches(ds, split.train, assignment, plan.class_index, geom, plan.target_um, g);
    auto val_p = make_patches(ds, split.val, {}, plan.class_index, geom, plan.target_um, g);
    if (train_p.empty() || val_p.empty()) {
      extra_skipped[i] = g;
      return;
    }
    TrainResult res = train(model, plan, train_p, val_p);
    restore_weights(model, res.best_weights);
    if (on_member) on_member(g, model, res);
    slots[i] = {g, std::move(res)};
  });
  for (auto& s : slots)
    if (s) outcome.trained.push_back(std::move(*s));
  for (uint32_t g : extra_skipped)
    if (g) outcome.skipped.push_back(g);
  std::sort(outcome.skipped.begin(), outcome.skipped.end());
  return outcome;
}

}  // namespace msme
