#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "msme/model.hpp"
#include "msme/sampling.hpp"
#include "msme/tensor.hpp"

namespace msme {

// ---------------------------------------------------------------------------
// Dataset container
// ---------------------------------------------------------------------------

struct SampleRecord {
  std::string id;
  int z = 1, h = 0, w = 0;
  double resolution_um = 1.0;
  MarkerAvailability available;           // K bits, >= 1 set
  Tensor<float> channels;                 // [K,Z,H,W]; absent markers all-zero
  std::optional<Tensor<uint8_t>> labels;  // [C,Z,H,W], binary
  std::optional<Tensor<uint8_t>> tissue;  // [Z,H,W]
};

struct Dataset {
  int num_markers = 0;
  std::vector<std::string> marker_names;
  std::vector<std::string> classes;
  std::vector<SampleRecord> samples;

  const SampleRecord& by_id(const std::string& id) const {
    for (const auto& s : samples)
      if (s.id == id) return s;
    throw DataError("no sample with id " + id);
  }
};

// ---------------------------------------------------------------------------
// Resampling to a target resolution. Channels are interpolated bilinearly,
// masks nearest-neighbor so labels stay binary.
// ---------------------------------------------------------------------------

namespace detail {

inline void bilinear_slice(const float* src, int H, int W, float* dst, int nh, int nw) {
  const double sy = static_cast<double>(H) / nh;
  const double sx = static_cast<double>(W) / nw;
  for (int y = 0; y < nh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y0c = std::clamp(y0, 0, H - 1), y1c = std::clamp(y0 + 1, 0, H - 1);
    for (int x = 0; x < nw; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x0c = std::clamp(x0, 0, W - 1), x1c = std::clamp(x0 + 1, 0, W - 1);
      double v = (1 - wy) * ((1 - wx) * src[y0c * W + x0c] + wx * src[y0c * W + x1c]) +
                 wy * ((1 - wx) * src[y1c * W + x0c] + wx * src[y1c * W + x1c]);
      dst[y * nw + x] = static_cast<float>(v);
    }
  }
}

template <class T>
void nearest_slice(const T* src, int H, int W, T* dst, int nh, int nw) {
  const double sy = static_cast<double>(H) / nh;
  const double sx = static_cast<double>(W) / nw;
  for (int y = 0; y < nh; ++y) {
    int ys = std::clamp(static_cast<int>(std::lround((y + 0.5) * sy - 0.5)), 0, H - 1);
    for (int x = 0; x < nw; ++x) {
      int xs = std::clamp(static_cast<int>(std::lround((x + 0.5) * sx - 0.5)), 0, W - 1);
      dst[y * nw + x] = src[ys * W + xs];
    }
  }
}

}  // namespace detail

inline SampleRecord resample(const SampleRecord& s, double target_um) {
  if (target_um <= 0.0) throw ContractError("resample: target resolution must be positive");
  if (s.resolution_um <= 0.0) throw ContractError("resample: sample resolution must be positive");
  if (s.resolution_um == target_um) return s;
  double factor = s.resolution_um / target_um;
  int nh = std::max(1, static_cast<int>(std::lround(s.h * factor)));
  int nw = std::max(1, static_cast<int>(std::lround(s.w * factor)));

  SampleRecord out = s;
  out.h = nh;
  out.w = nw;
  out.resolution_um = target_um;
  const size_t K = s.channels.dim(0);
  out.channels = Tensor<float>({K, static_cast<size_t>(s.z), static_cast<size_t>(nh),
                                static_cast<size_t>(nw)});
  for (size_t k = 0; k < K; ++k)
    for (int z = 0; z < s.z; ++z)
      detail::bilinear_slice(s.channels.ptr() + (k * s.z + z) * s.h * s.w, s.h, s.w,
                             out.channels.ptr() + (k * s.z + z) * nh * nw, nh, nw);
  if (s.labels) {
    const size_t C = s.labels->dim(0);
    out.labels = Tensor<uint8_t>({C, static_cast<size_t>(s.z), static_cast<size_t>(nh),
                                  static_cast<size_t>(nw)});
    for (size_t c = 0; c < C; ++c)
      for (int z = 0; z < s.z; ++z)
        detail::nearest_slice(s.labels->ptr() + (c * s.z + z) * s.h * s.w, s.h, s.w,
                              out.labels->ptr() + (c * s.z + z) * nh * nw, nh, nw);
  }
  if (s.tissue) {
    out.tissue = Tensor<uint8_t>({static_cast<size_t>(s.z), static_cast<size_t>(nh),
                                  static_cast<size_t>(nw)});
    for (int z = 0; z < s.z; ++z)
      detail::nearest_slice(s.tissue->ptr() + static_cast<size_t>(z) * s.h * s.w, s.h, s.w,
                            out.tissue->ptr() + static_cast<size_t>(z) * nh * nw, nh, nw);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-sample standardization: one (mean, std) per available channel computed
// over the whole sample (in-tissue pixels when a tissue mask exists), applied
// to every pixel of that channel. Absent channels stay zero.
// ---------------------------------------------------------------------------

inline SampleRecord standardize(const SampleRecord& s) {
  SampleRecord out = s;
  const size_t plane = static_cast<size_t>(s.z) * s.h * s.w;
  for (int m = 1; m <= s.available.k; ++m) {
    if (!s.available.test(m)) continue;
    float* ch = out.channels.ptr() + static_cast<size_t>(m - 1) * plane;
    double sum = 0.0, sum2 = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < plane; ++i) {
      if (s.tissue && s.tissue->data[i] == 0) continue;
      sum += ch[i];
      ++n;
    }
    if (n == 0) throw DataError(strprintf("standardize: marker %d has no in-tissue pixels", m));
    double mu = sum / static_cast<double>(n);
    for (size_t i = 0; i < plane; ++i) {
      if (s.tissue && s.tissue->data[i] == 0) continue;
      sum2 += (ch[i] - mu) * (ch[i] - mu);
    }
    double sd = std::sqrt(sum2 / static_cast<double>(n));
    if (sd < 1e-12)
      throw DataError(strprintf("standardize: marker %d is a degenerate (constant) channel", m));
    for (size_t i = 0; i < plane; ++i)
      ch[i] = static_cast<float>((ch[i] - mu) / sd);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tiling: zero-pad each slice by the margin, lay output tiles at stride
// output_size, shift the final tile back to the slice border. Inputs are the
// output tiles dilated by the margin; tail overlaps are averaged at stitch.
// ---------------------------------------------------------------------------

struct TileRef {
  int z = 0, oy = 0, ox = 0;  // output-frame origin within the slice
};

struct PatchGrid {
  Geometry geom;
  int z = 0, h = 0, w = 0;
  std::vector<TileRef> tiles;
  std::vector<int> y_origins, x_origins;
};

inline std::vector<int> tile_origins(int dim, int out) {
  if (dim < out)
    throw GeometryError(
        strprintf("slice extent %d is smaller than one output tile (%d)", dim, out));
  std::vector<int> origins;
  int o = 0;
  for (; o + out <= dim; o += out) origins.push_back(o);
  if (origins.back() + out < dim) origins.push_back(dim - out);
  return origins;
}

inline PatchGrid plan_tiles(int z, int h, int w, const Geometry& geom) {
  PatchGrid g;
  g.geom = geom;
  g.z = z;
  g.h = h;
  g.w = w;
  g.y_origins = tile_origins(h, geom.output_size);
  g.x_origins = tile_origins(w, geom.output_size);
  for (int zi = 0; zi < z; ++zi)
    for (int oy : g.y_origins)
      for (int ox : g.x_origins) g.tiles.push_back(TileRef{zi, oy, ox});
  return g;
}

// Extracts the dilated input patch for one tile from an unpadded [K,Z,H,W]
// volume; the zero padding is realized implicitly by bounds checks.
inline Tensor<float> extract_input_patch(const Tensor<float>& vol, const TileRef& tile,
                                         const Geometry& geom) {
  const size_t K = vol.dim(0);
  const int Z = static_cast<int>(vol.dim(1));
  const int H = static_cast<int>(vol.dim(2));
  const int W = static_cast<int>(vol.dim(3));
  (void)Z;
  const int m = geom.margin();
  const int in = geom.input_size;
  Tensor<float> patch({K, static_cast<size_t>(in), static_cast<size_t>(in)});
  for (size_t k = 0; k < K; ++k) {
    const float* src = vol.ptr() + (k * vol.dim(1) + tile.z) * H * W;
    float* dst = patch.ptr() + k * in * in;
    for (int y = 0; y < in; ++y) {
      int sy = tile.oy - m + y;
      if (sy < 0 || sy >= H) continue;  // zero padding
      for (int x = 0; x < in; ++x) {
        int sx = tile.ox - m + x;
        if (sx < 0 || sx >= W) continue;
        dst[y * in + x] = src[sy * W + sx];
      }
    }
  }
  return patch;
}

inline std::pair<std::vector<Tensor<float>>, PatchGrid> decompose(const Tensor<float>& vol,
                                                                  const Geometry& geom) {
  if (vol.rank() != 4)
    throw DimError("decompose: expected a [K,Z,H,W] volume, got " + shape_str(vol.shape));
  PatchGrid grid = plan_tiles(static_cast<int>(vol.dim(1)), static_cast<int>(vol.dim(2)),
                              static_cast<int>(vol.dim(3)), geom);
  std::vector<Tensor<float>> patches;
  patches.reserve(grid.tiles.size());
  for (const TileRef& t : grid.tiles) patches.push_back(extract_input_patch(vol, t, geom));
  return {std::move(patches), std::move(grid)};
}

// Reassembles per-tile outputs [C,out,out] into [C,Z,H,W]; regions covered by
// more than one tile (tail shifts) receive the arithmetic mean.
inline Tensor<float> stitch(const PatchGrid& grid, const std::vector<Tensor<float>>& outputs) {
  if (outputs.size() != grid.tiles.size())
    throw ContractError(strprintf("stitch: %zu outputs for %zu tiles", outputs.size(),
                                  grid.tiles.size()));
  const int out = grid.geom.output_size;
  const size_t C = outputs.empty() ? 0 : outputs[0].dim(0);
  for (const auto& o : outputs)
    if (o.rank() != 3 || o.dim(0) != C || o.dim(1) != static_cast<size_t>(out) ||
        o.dim(2) != static_cast<size_t>(out))
      throw DimError("stitch: tile output shape mismatch");

  Tensor<float> acc({C, static_cast<size_t>(grid.z), static_cast<size_t>(grid.h),
                     static_cast<size_t>(grid.w)});
  Tensor<float> cnt({static_cast<size_t>(grid.z), static_cast<size_t>(grid.h),
                     static_cast<size_t>(grid.w)});
  for (size_t i = 0; i < grid.tiles.size(); ++i) {
    const TileRef& t = grid.tiles[i];
    for (int y = 0; y < out; ++y) {
      for (size_t c = 0; c < C; ++c) {
        const float* src = outputs[i].ptr() + (c * out + y) * out;
        float* dst = acc.ptr() +
                     ((c * grid.z + t.z) * static_cast<size_t>(grid.h) + t.oy + y) * grid.w +
                     t.ox;
        for (int x = 0; x < out; ++x) dst[x] += src[x];
      }
      float* cn = cnt.ptr() + (static_cast<size_t>(t.z) * grid.h + t.oy + y) * grid.w + t.ox;
      for (int x = 0; x < out; ++x) cn[x] += 1.0f;
    }
  }
  const size_t plane = static_cast<size_t>(grid.z) * grid.h * grid.w;
  for (size_t i = 0; i < plane; ++i) {
    if (cnt.data[i] <= 0.0f)
      throw ContractError("stitch: a pixel was covered by no tile");
    if (cnt.data[i] > 1.0f)
      for (size_t c = 0; c < C; ++c) acc.data[c * plane + i] /= cnt.data[i];
  }
  return acc;
}

// Crops the output-frame region of a label/tissue volume for one tile.
template <class T>
Tensor<T> extract_output_crop(const Tensor<T>& vol, size_t channel, const TileRef& tile,
                              int out) {
  const int H = static_cast<int>(vol.dim(vol.rank() - 2));
  const int W = static_cast<int>(vol.dim(vol.rank() - 1));
  const size_t zdim = vol.dim(vol.rank() - 3);
  Tensor<T> crop({static_cast<size_t>(out), static_cast<size_t>(out)});
  const T* src = vol.ptr() + (channel * zdim + tile.z) * H * W;
  for (int y = 0; y < out; ++y)
    for (int x = 0; x < out; ++x)
      crop.data[static_cast<size_t>(y) * out + x] = src[(tile.oy + y) * W + tile.ox + x];
  return crop;
}

// ---------------------------------------------------------------------------
// Synthetic multi-marker data. Two structure classes are rendered inside a
// tissue blob: curvilinear ribbons (class 1, the common structure) and short
// thin segments (class 2, the rare one). Each marker channel mixes class
// renderings per its profile plus a smooth background field and pixel noise.
// ---------------------------------------------------------------------------

struct MarkerProfile {
  std::vector<double> class_contrast;  // one entry per class
  double background_amp = 0.25;
  double shared_texture_amp = 0.0;  // gain on the sample-wide texture field
  double noise_sigma = 0.08;
};

struct SyntheticConfig {
  int num_markers = 3;
  int num_classes = 2;
  int num_samples = 8;
  int depth_z = 1;
  int height = 112;
  int width = 112;
  double resolution_um = 1.0;
  std::vector<double> class_density = {0.10, 0.006};  // fraction of all pixels
  std::vector<MarkerProfile> profiles;                // size num_markers
  std::vector<uint32_t> sample_availability;          // per sample; empty = all markers
  uint64_t seed = 0;

  void validate() const {
    if (num_markers < 1 || num_classes < 1 || num_samples < 1)
      throw ConfigError("synthetic config: counts must be positive");
    if (profiles.size() != static_cast<size_t>(num_markers))
      throw ConfigError("synthetic config: one marker profile per marker required");
    if (class_density.size() != static_cast<size_t>(num_classes))
      throw ConfigError("synthetic config: one density per class required");
    for (size_t c = 0; c < class_density.size(); ++c) {
      bool rendered = false;
      for (const auto& p : profiles)
        if (p.class_contrast.size() > c && p.class_contrast[c] > 0.0) rendered = true;
      if (!rendered)
        throw ConfigError(strprintf("synthetic config: no marker renders class %zu", c + 1));
    }
  }
};

namespace detail {

inline void render_tissue(Tensor<uint8_t>& tissue, int z, int h, int w, Rng& rng) {
  double cy = h * (0.5 + rng.uniform(-0.02, 0.02));
  double cx = w * (0.5 + rng.uniform(-0.02, 0.02));
  double ay = 0.48 * h, ax = 0.48 * w;
  for (int zz = 0; zz < z; ++zz)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double u = (y - cy) / ay, v = (x - cx) / ax;
        if (u * u * u * u + v * v * v * v <= 1.0)
          tissue.data[(static_cast<size_t>(zz) * h + y) * w + x] = 1;
      }
}

// One sinusoid ribbon across the slice; returns pixels set.
inline size_t render_ribbon(Tensor<uint8_t>& mask, const Tensor<uint8_t>& tissue, int zz, int h,
                            int w, Rng& rng, int thickness) {
  bool horizontal = rng.bernoulli(0.5);
  int span = horizontal ? w : h;
  int lateral = horizontal ? h : w;
  double base = rng.uniform(0.12, 0.88) * lateral;
  double amp = rng.uniform(0.04, 0.16) * lateral;
  double period = rng.uniform(0.5, 1.5) * span;
  double phase = rng.uniform(0.0, 6.283185307179586);
  size_t added = 0;
  for (int s = 0; s < span; ++s) {
    double center = base + amp * std::sin(6.283185307179586 * s / period + phase);
    for (int d = -(thickness / 2); d <= (thickness - 1) / 2; ++d) {
      int l = static_cast<int>(std::lround(center)) + d;
      if (l < 0 || l >= lateral) continue;
      int y = horizontal ? l : s;
      int x = horizontal ? s : l;
      size_t idx = (static_cast<size_t>(zz) * h + y) * w + x;
      if (tissue.data[idx] == 0 || mask.data[idx]) continue;
      mask.data[idx] = 1;
      ++added;
    }
  }
  return added;
}

// One short thin segment; returns pixels set.
inline size_t render_segment(Tensor<uint8_t>& mask, const Tensor<uint8_t>& tissue, int zz, int h,
                             int w, Rng& rng) {
  double y0 = rng.uniform(0.15, 0.85) * h;
  double x0 = rng.uniform(0.15, 0.85) * w;
  double angle = rng.uniform(0.0, 6.283185307179586);
  double len = rng.uniform(0.08, 0.16) * std::min(h, w);
  size_t added = 0;
  int steps = static_cast<int>(len);
  for (int s = 0; s < steps; ++s) {
    int y = static_cast<int>(std::lround(y0 + s * std::sin(angle)));
    int x = static_cast<int>(std::lround(x0 + s * std::cos(angle)));
    if (y < 0 || y >= h || x < 0 || x >= w) break;
    size_t idx = (static_cast<size_t>(zz) * h + y) * w + x;
    if (tissue.data[idx] == 0 || mask.data[idx]) continue;
    mask.data[idx] = 1;
    ++added;
  }
  return added;
}

}  // namespace detail

inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.num_markers = cfg.num_markers;
  for (int k = 1; k <= cfg.num_markers; ++k) ds.marker_names.push_back("m" + std::to_string(k));
  for (int c = 1; c <= cfg.num_classes; ++c) ds.classes.push_back("class" + std::to_string(c));

  const int Z = cfg.depth_z, H = cfg.height, W = cfg.width;
  const size_t plane = static_cast<size_t>(Z) * H * W;

  for (int si = 0; si < cfg.num_samples; ++si) {
    Rng rng = Rng(cfg.seed).split(1000 + static_cast<uint64_t>(si));
    SampleRecord s;
    s.id = "s" + std::to_string(si);
    s.z = Z;
    s.h = H;
    s.w = W;
    s.resolution_um = cfg.resolution_um;
    uint32_t avail = cfg.sample_availability.empty()
                         ? MarkerAvailability::all(cfg.num_markers).bits
                         : cfg.sample_availability[static_cast<size_t>(si) %
                                                   cfg.sample_availability.size()];
    s.available = MarkerAvailability(avail, cfg.num_markers);

    Tensor<uint8_t> tissue({static_cast<size_t>(Z), static_cast<size_t>(H),
                            static_cast<size_t>(W)});
    detail::render_tissue(tissue, Z, H, W, rng);

    Tensor<uint8_t> labels({static_cast<size_t>(cfg.num_classes), static_cast<size_t>(Z),
                            static_cast<size_t>(H), static_cast<size_t>(W)});
    for (int c = 0; c < cfg.num_classes; ++c) {
      size_t target = static_cast<size_t>(cfg.class_density[static_cast<size_t>(c)] *
                                          static_cast<double>(plane));
      Tensor<uint8_t> mask({static_cast<size_t>(Z), static_cast<size_t>(H),
                            static_cast<size_t>(W)});
      size_t filled = 0;
      int guard = 0;
      while (filled < target && guard++ < 10000) {
        int zz = static_cast<int>(rng.uniform_int(Z));
        filled += (c == 0) ? detail::render_ribbon(mask, tissue, zz, H, W, rng,
                                                   2 + static_cast<int>(rng.uniform_int(2)))
                           : detail::render_segment(mask, tissue, zz, H, W, rng);
      }
      std::copy(mask.data.begin(), mask.data.end(), labels.data.begin() + c * plane);
    }

    // sample-wide texture field shared by all markers (anatomy every stain sees)
    Tensor<float> texture({static_cast<size_t>(Z), static_cast<size_t>(H),
                           static_cast<size_t>(W)});
    {
      double fy[4], fx[4], ph[4];
      for (int i = 0; i < 4; ++i) {
        fy[i] = rng.uniform(1.0, 5.0);
        fx[i] = rng.uniform(1.0, 5.0);
        ph[i] = rng.uniform(0.0, 6.283185307179586);
      }
      for (int zz = 0; zz < Z; ++zz)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            double b = 0.0;
            for (int i = 0; i < 4; ++i)
              b += std::cos(6.283185307179586 * (fy[i] * y / static_cast<double>(H) +
                                                 fx[i] * x / static_cast<double>(W)) +
                            ph[i]);
            texture.data[(static_cast<size_t>(zz) * H + y) * W + x] =
                static_cast<float>(0.5 * b / 2.0 + 0.7 * rng.normal());
          }
    }

    s.channels = Tensor<float>({static_cast<size_t>(cfg.num_markers), static_cast<size_t>(Z),
                                static_cast<size_t>(H), static_cast<size_t>(W)});
    for (int k = 0; k < cfg.num_markers; ++k) {
      const MarkerProfile& prof = cfg.profiles[static_cast<size_t>(k)];
      float* ch = s.channels.ptr() + static_cast<size_t>(k) * plane;
      // smooth background field: three low-frequency cosines
      double fy[3], fx[3], ph[3];
      for (int i = 0; i < 3; ++i) {
        fy[i] = rng.uniform(0.5, 2.0);
        fx[i] = rng.uniform(0.5, 2.0);
        ph[i] = rng.uniform(0.0, 6.283185307179586);
      }
      for (int zz = 0; zz < Z; ++zz)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            size_t idx = (static_cast<size_t>(zz) * H + y) * W + x;
            double v = 0.0;
            if (tissue.data[idx]) {
              for (size_t c = 0; c < prof.class_contrast.size(); ++c)
                if (labels.data[c * plane + idx])
                  v += prof.class_contrast[c];
              if (prof.background_amp > 0.0) {
                double b = 0.0;
                for (int i = 0; i < 3; ++i)
                  b += std::cos(6.283185307179586 *
                                    (fy[i] * y / static_cast<double>(H) +
                                     fx[i] * x / static_cast<double>(W)) +
                                ph[i]);
                v += prof.background_amp * (b / 3.0 + 1.0) * 0.5;
              }
              if (prof.shared_texture_amp > 0.0)
                v += prof.shared_texture_amp * texture.data[idx];
            }
            if (prof.noise_sigma > 0.0) v += prof.noise_sigma * rng.normal();
            ch[idx] = static_cast<float>(v);
          }
    }
    // absent channels are stored as zeros
    for (int m = 1; m <= cfg.num_markers; ++m)
      if (!s.available.test(m)) {
        float* ch = s.channels.ptr() + static_cast<size_t>(m - 1) * plane;
        std::fill(ch, ch + plane, 0.0f);
      }
    s.labels = std::move(labels);
    s.tissue = std::move(tissue);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// Named marker-profile presets. "two-class" is the K=3 desk setup; the K=5
// variant mirrors the marker-specificity grouping of the source experiments:
// two class-1-specific channels, one class-2-specific, one shared, one noise.
// Contrast is deliberately weak relative to the noise and the shared texture:
// a single marker is then weak evidence, the all-marker optimum genuinely
// pools channels, and zero-filled absent channels break a model that never
// sampled them. That is the regime the channel-flexible strategies target.
inline std::vector<MarkerProfile> synthetic_preset_profiles(const std::string& preset, int k) {
  std::vector<MarkerProfile> p(static_cast<size_t>(k));
  for (auto& prof : p) {
    prof.background_amp = 0.2;
    prof.shared_texture_amp = 0.5;
    prof.noise_sigma = 0.4;
  }
  if (preset == "two-class") {
    if (k == 3) {
      p[0].class_contrast = {0.55, 0.28};  // shared
      p[1].class_contrast = {0.55, 0.0};   // class-1 specific
      p[2].class_contrast = {0.0, 0.55};   // class-2 specific
    } else if (k == 5) {
      p[0].class_contrast = {0.3, 0.3};    // shared, weak
      p[1].class_contrast = {0.55, 0.0};   // class-1 specific
      p[2].class_contrast = {0.55, 0.0};   // class-1 specific
      p[3].class_contrast = {0.0, 0.55};   // class-2 specific
      p[4].class_contrast = {0.0, 0.0};    // pure noise channel
    } else {
      for (int i = 0; i < k; ++i)
        p[static_cast<size_t>(i)].class_contrast = {i % 2 == 0 ? 0.55 : 0.2,
                                                    i % 2 == 0 ? 0.2 : 0.55};
    }
    return p;
  }
  throw ConfigError("unknown synthetic preset: " + preset);
}

// ---------------------------------------------------------------------------
// On-disk container: manifest.json + raw little-endian binaries.
//   <id>_channels.bin  f32 [marker][z][y][x]
//   <id>_labels.bin    u8  [class][z][y][x]
//   <id>_tissue.bin    u8  [z][y][x]
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void write_raw(const std::filesystem::path& path, const std::vector<T>& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(T)));
}

template <class T>
void read_raw(const std::filesystem::path& path, std::vector<T>& data, size_t expected_count) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("cannot open " + path.string());
  size_t actual = static_cast<size_t>(f.tellg());
  size_t expected = expected_count * sizeof(T);
  if (actual != expected)
    throw DataError(strprintf("%s: expected %zu bytes, found %zu", path.string().c_str(),
                              expected, actual));
  data.resize(expected_count);
  f.seekg(0);
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(expected));
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  static_assert(std::endian::native == std::endian::little, "container binaries are LE");
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["num_markers"] = ds.num_markers;
  manifest["marker_names"] = ds.marker_names;
  manifest["classes"] = ds.classes;
  manifest["samples"] = nlohmann::json::array();
  for (const auto& s : ds.samples) {
    nlohmann::json j;
    j["id"] = s.id;
    j["shape"] = {s.z, s.h, s.w};
    j["resolution_um"] = s.resolution_um;
    std::vector<int> avail;
    for (int m = 1; m <= s.available.k; ++m)
      if (s.available.test(m)) avail.push_back(m);
    j["available_markers"] = avail;
    j["channels_file"] = s.id + "_channels.bin";
    detail::write_raw(dir / (s.id + "_channels.bin"), s.channels.data);
    if (s.labels) {
      j["labels_file"] = s.id + "_labels.bin";
      detail::write_raw(dir / (s.id + "_labels.bin"), s.labels->data);
    }
    if (s.tissue) {
      j["tissue_file"] = s.id + "_tissue.bin";
      detail::write_raw(dir / (s.id + "_tissue.bin"), s.tissue->data);
    }
    manifest["samples"].push_back(j);
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw DataError("cannot write manifest.json in " + dir.string());
  f << manifest.dump(2) << "\n";
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  static_assert(std::endian::native == std::endian::little, "container binaries are LE");
  namespace fs = std::filesystem;
  std::ifstream f(dir / "manifest.json");
  if (!f) throw DataError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(strprintf("malformed manifest.json: %s", e.what()));
  }
  if (!manifest.contains("version") || manifest["version"].get<int>() != 1)
    throw DataError("manifest.json: unsupported container version");
  Dataset ds;
  ds.num_markers = manifest["num_markers"].get<int>();
  ds.marker_names = manifest["marker_names"].get<std::vector<std::string>>();
  ds.classes = manifest["classes"].get<std::vector<std::string>>();
  for (const auto& j : manifest["samples"]) {
    SampleRecord s;
    s.id = j["id"].get<std::string>();
    auto shape = j["shape"].get<std::vector<int>>();
    if (shape.size() != 3) throw DataError("manifest.json: sample shape must be [Z,H,W]");
    s.z = shape[0];
    s.h = shape[1];
    s.w = shape[2];
    s.resolution_um = j["resolution_um"].get<double>();
    uint32_t bits = 0;
    for (int m : j["available_markers"].get<std::vector<int>>()) {
      if (m < 1 || m > ds.num_markers)
        throw DataError(strprintf("manifest.json: sample %s lists marker %d outside 1..%d",
                                  s.id.c_str(), m, ds.num_markers));
      bits |= 1u << (m - 1);
    }
    if (bits == 0)
      throw DataError("manifest.json: sample " + s.id + " has no available markers");
    s.available = MarkerAvailability(bits, ds.num_markers);
    const size_t plane = static_cast<size_t>(s.z) * s.h * s.w;
    s.channels = Tensor<float>({static_cast<size_t>(ds.num_markers), static_cast<size_t>(s.z),
                                static_cast<size_t>(s.h), static_cast<size_t>(s.w)});
    detail::read_raw(dir / j["channels_file"].get<std::string>(), s.channels.data,
                     static_cast<size_t>(ds.num_markers) * plane);
    // absent markers are zero by contract, whatever the file carried
    for (int m = 1; m <= ds.num_markers; ++m)
      if (!s.available.test(m)) {
        float* ch = s.channels.ptr() + static_cast<size_t>(m - 1) * plane;
        std::fill(ch, ch + plane, 0.0f);
      }
    if (j.contains("labels_file")) {
      Tensor<uint8_t> lab({ds.classes.size(), static_cast<size_t>(s.z),
                           static_cast<size_t>(s.h), static_cast<size_t>(s.w)});
      detail::read_raw(dir / j["labels_file"].get<std::string>(), lab.data,
                       ds.classes.size() * plane);
      s.labels = std::move(lab);
    }
    if (j.contains("tissue_file")) {
      Tensor<uint8_t> tis({static_cast<size_t>(s.z), static_cast<size_t>(s.h),
                           static_cast<size_t>(s.w)});
      detail::read_raw(dir / j["tissue_file"].get<std::string>(), tis.data, plane);
      s.tissue = std::move(tis);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace msme
