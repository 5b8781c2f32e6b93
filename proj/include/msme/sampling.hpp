#pragma once

#include <bit>
#include <cstdint>
#include <string>

#include "msme/tensor.hpp"

namespace msme {

// Which of the K marker channels are present. Bit k-1 (1-based marker k)
// set means marker k carries signal.
struct MarkerAvailability {
  uint32_t bits = 0;
  int k = 0;

  MarkerAvailability() = default;
  MarkerAvailability(uint32_t b, int k_) : bits(b), k(k_) {}

  static MarkerAvailability all(int k) {
    return MarkerAvailability((k >= 32 ? ~0u : ((1u << k) - 1u)), k);
  }

  bool test(int marker_1based) const { return (bits >> (marker_1based - 1)) & 1u; }
  int count() const { return std::popcount(bits); }
  bool empty() const { return bits == 0; }

  // Row vector form consumed by the ME attention subnetwork.
  template <class T>
  Tensor<T> to_vector() const {
    Tensor<T> v({static_cast<size_t>(k)});
    for (int i = 0; i < k; ++i) v.data[i] = test(i + 1) ? T{1} : T{0};
    return v;
  }

  // Canonical display form: ascending digits, e.g. m_124.
  std::string name() const {
    std::string s = "m_";
    for (int i = 1; i <= k; ++i)
      if (test(i)) s += static_cast<char>('0' + i);
    return s;
  }

  bool operator==(const MarkerAvailability& o) const { return bits == o.bits && k == o.k; }
};

enum class SamplingVariant { MZ, MS, MSDR, MSVR };

inline const char* to_string(SamplingVariant v) {
  switch (v) {
    case SamplingVariant::MZ: return "mz";
    case SamplingVariant::MS: return "ms";
    case SamplingVariant::MSDR: return "ms-dr";
    case SamplingVariant::MSVR: return "ms-vr";
  }
  return "?";
}

struct SamplingPolicy {
  SamplingVariant variant = SamplingVariant::MS;
  double r_drop = 0.5;

  void validate() const {
    if (variant != SamplingVariant::MZ && (r_drop <= 0.0 || r_drop >= 1.0))
      throw ContractError(strprintf("sampling: r_drop must lie strictly inside (0,1), got %g",
                                    r_drop));
  }
};

enum class Phase { Train, Infer };

template <class T>
struct SampledInput {
  Tensor<T> channels;        // [K,H,W], dropped/absent channels zeroed
  MarkerAvailability avail;  // post-sampling availability (feeds ME)
};

namespace detail {

template <class T>
void zero_absent_channels(Tensor<T>& x, const MarkerAvailability& v) {
  const size_t plane = x.dim(1) * x.dim(2);
  for (int m = 1; m <= v.k; ++m) {
    if (v.test(m)) continue;
    T* p = x.ptr() + static_cast<size_t>(m - 1) * plane;
    std::fill(p, p + plane, T{0});
  }
}

template <class T>
void scale_present_channels(Tensor<T>& x, const MarkerAvailability& v, T factor) {
  const size_t plane = x.dim(1) * x.dim(2);
  for (int m = 1; m <= v.k; ++m) {
    if (!v.test(m)) continue;
    T* p = x.ptr() + static_cast<size_t>(m - 1) * plane;
    for (size_t i = 0; i < plane; ++i) p[i] *= factor;
  }
}

}  // namespace detail

// Input-channel sampling layer. Keep probability is 1 - r_drop per provided
// marker; an all-dropped draw is rejected and redrawn so the conditional law
// over non-empty subsets stays uniform at r_drop = 0.5.
//   MZ    - no sampling, absent channels zeroed
//   MS    - sampling at train, plain channels at inference
//   MS-DR - kept channels scaled by 1/(1-r_drop), train only
//   MS-VR - kept channels scaled by K/(kept count), train and inference
template <class T>
SampledInput<T> sample_markers(const Tensor<T>& batch_item, const SamplingPolicy& policy,
                               Rng& rng, Phase phase, const MarkerAvailability& provided) {
  if (batch_item.rank() != 3)
    throw DimError(strprintf("sample_markers: expected [K,H,W] input, got %s",
                             shape_str(batch_item.shape).c_str()));
  if (batch_item.dim(0) != static_cast<size_t>(provided.k))
    throw DimError(strprintf("sample_markers: %zu channels but availability has K=%d",
                             batch_item.dim(0), provided.k));
  if (provided.empty()) throw ContractError("sample_markers: provided marker set is empty");
  policy.validate();

  SampledInput<T> out;
  out.channels = batch_item;
  out.avail = provided;

  const bool samples = policy.variant != SamplingVariant::MZ && phase == Phase::Train;
  if (samples) {
    uint32_t kept;
    do {
      kept = 0;
      for (int m = 1; m <= provided.k; ++m)
        if (provided.test(m) && !rng.bernoulli(policy.r_drop)) kept |= 1u << (m - 1);
    } while (kept == 0);
    out.avail = MarkerAvailability(kept, provided.k);
  }

  detail::zero_absent_channels(out.channels, out.avail);

  if (policy.variant == SamplingVariant::MSDR && phase == Phase::Train) {
    detail::scale_present_channels(out.channels, out.avail,
                                   static_cast<T>(1.0 / (1.0 - policy.r_drop)));
  } else if (policy.variant == SamplingVariant::MSVR) {
    double p = static_cast<double>(out.avail.count()) / static_cast<double>(provided.k);
    detail::scale_present_channels(out.channels, out.avail, static_cast<T>(1.0 / p));
  }
  return out;
}

}  // namespace msme
