#pragma once

#include <string>
#include <vector>

#include "msme/model.hpp"
#include "msme/stats.hpp"

namespace msme {

struct LayerRecalibration {
  std::string layer;
  int level = 0;  // resolution level, 0 = full resolution
  double mean_distance = 0.0;
  double std_distance = 0.0;
  size_t pair_count = 0;
};

inline double cosine_distance(const Tensor<float>& a, const Tensor<float>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) {
    dot += static_cast<double>(a.data[i]) * b.data[i];
    na += static_cast<double>(a.data[i]) * a.data[i];
    nb += static_cast<double>(b.data[i]) * b.data[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine_distance: zero vector");
  return 1.0 - dot / std::sqrt(na * nb);
}

// For each ME module, evaluates omega(v) over every non-empty marker
// combination and summarizes the pairwise cosine distances. Pass-ordered:
// input module first, then encoder, bottleneck, decoder.
inline std::vector<LayerRecalibration> analyze_recalibration(const Model<float>& model) {
  auto refs = model.me_modules();
  if (refs.empty())
    throw ContractError("analyze_recalibration: model carries no ME modules");
  CombinationLattice lattice{model.config().markers};
  std::vector<LayerRecalibration> out;
  for (const auto& ref : refs) {
    MEModule<float> module = model.me_module(ref);
    std::vector<Tensor<float>> omegas;
    for (uint32_t bits : lattice.all())
      omegas.push_back(excitation_vector(MarkerAvailability(bits, lattice.k), module));
    LayerRecalibration rec;
    rec.layer = ref.prefix;
    rec.level = ref.level;
    std::vector<double> dists;
    for (size_t i = 0; i < omegas.size(); ++i)
      for (size_t j = i + 1; j < omegas.size(); ++j)
        dists.push_back(cosine_distance(omegas[i], omegas[j]));
    rec.pair_count = dists.size();
    double mu = 0.0;
    for (double d : dists) mu += d;
    mu /= static_cast<double>(dists.size());
    double var = 0.0;
    for (double d : dists) var += (d - mu) * (d - mu);
    rec.mean_distance = mu;
    rec.std_distance = std::sqrt(var / static_cast<double>(dists.size()));
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace msme
