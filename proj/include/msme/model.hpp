#pragma once

#include <bit>
#include <chrono>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msme/attention.hpp"
#include "msme/sampling.hpp"
#include "msme/tape.hpp"

namespace msme {

enum class Variant { MZ, MS, MSDR, MSVR, MSSE, MSME, MSPlus, HeMIS, HeMISMS, UBMember };
enum class Attention { None, SE, ME };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::MZ: return "mz";
    case Variant::MS: return "ms";
    case Variant::MSDR: return "ms-dr";
    case Variant::MSVR: return "ms-vr";
    case Variant::MSSE: return "ms-se";
    case Variant::MSME: return "ms-me";
    case Variant::MSPlus: return "ms-plus";
    case Variant::HeMIS: return "hemis";
    case Variant::HeMISMS: return "hemis-ms";
    case Variant::UBMember: return "ub-member";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::MZ, Variant::MS, Variant::MSDR, Variant::MSVR, Variant::MSSE,
                    Variant::MSME, Variant::MSPlus, Variant::HeMIS, Variant::HeMISMS,
                    Variant::UBMember})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown model variant: " + s);
}

inline const char* to_string(Attention a) {
  switch (a) {
    case Attention::None: return "none";
    case Attention::SE: return "se";
    case Attention::ME: return "me";
  }
  return "?";
}

inline Attention attention_from_string(const std::string& s) {
  if (s == "none") return Attention::None;
  if (s == "se") return Attention::SE;
  if (s == "me") return Attention::ME;
  throw ConfigError("unknown attention kind: " + s);
}

// Attention insertion points: input, encoder blocks, bottleneck, decoder
// blocks. The proposed configuration is E+B+D.
struct Placements {
  bool input = false;
  bool encoder = true;
  bool bottleneck = true;
  bool decoder = true;

  std::string str() const {
    std::string s;
    if (input) s += 'I';
    if (encoder) s += 'E';
    if (bottleneck) s += 'B';
    if (decoder) s += 'D';
    return s;
  }
  static Placements parse(const std::string& s) {
    Placements p{false, false, false, false};
    for (char c : s) {
      switch (c) {
        case 'I': case 'i': p.input = true; break;
        case 'E': case 'e': p.encoder = true; break;
        case 'B': case 'b': p.bottleneck = true; break;
        case 'D': case 'd': p.decoder = true; break;
        default: throw ConfigError(strprintf("bad placement character '%c' (use I/E/B/D)", c));
      }
    }
    return p;
  }
};

struct ModelConfig {
  Variant variant = Variant::MS;
  int markers = 3;  // K
  int depth = 2;
  int base_filters = 8;
  double width_multiplier = 1.0;
  Attention attention = Attention::None;
  Placements placements{};  // E+B+D
  bool me_bias = true;
  uint32_t ub_subset = 0;  // UBMember only: the fixed combination G
  uint64_t seed = 0;
  double r_drop = 0.5;
  int num_classes = 2;  // background + target class

  // Fills derived fields and validates. Called by build_model.
  ModelConfig resolved() const {
    ModelConfig c = *this;
    if (c.variant == Variant::MSSE) c.attention = Attention::SE;
    if (c.variant == Variant::MSME) c.attention = Attention::ME;
    if (c.variant == Variant::MSPlus && c.width_multiplier <= 1.0) c.width_multiplier = 1.25;
    if (c.markers < 1 || c.markers > 16) throw ConfigError("markers must lie in [1,16]");
    if (c.depth < 0) throw ConfigError("depth must be non-negative");
    if (c.base_filters < 1) throw ConfigError("base_filters must be positive");
    if (c.variant == Variant::UBMember) {
      if (c.ub_subset == 0) throw ConfigError("ub-member requires a non-empty marker subset");
      if (c.ub_subset >> c.markers)
        throw ConfigError("ub-member subset references markers beyond K");
    }
    if (c.attention == Attention::SE && c.placements.input)
      throw ConfigError(
          "SE attention at the input placement is unsupported: raw channel means carry no "
          "learned features to recalibrate (use ME for input placement)");
    if ((c.variant == Variant::HeMIS || c.variant == Variant::HeMISMS) &&
        c.attention != Attention::None)
      throw ConfigError("attention modules apply to the UNet family only");
    return c;
  }

  bool is_hemis() const { return variant == Variant::HeMIS || variant == Variant::HeMISMS; }

  int in_channels() const {
    return variant == Variant::UBMember ? std::popcount(ub_subset) : markers;
  }

  // Channel width of resolution level l (0 = full resolution).
  int width(int level) const {
    int base = std::max(1, static_cast<int>(std::lround(base_filters * width_multiplier)));
    return base << level;
  }

  SamplingPolicy sampling_policy() const {
    SamplingVariant sv;
    switch (variant) {
      case Variant::MZ:
      case Variant::HeMIS:
      case Variant::UBMember: sv = SamplingVariant::MZ; break;
      case Variant::MSDR: sv = SamplingVariant::MSDR; break;
      case Variant::MSVR: sv = SamplingVariant::MSVR; break;
      default: sv = SamplingVariant::MS; break;
    }
    return SamplingPolicy{sv, r_drop};
  }
};

// ---------------------------------------------------------------------------
// Geometry: valid-convolution input/output arithmetic.
// ---------------------------------------------------------------------------

struct Geometry {
  int input_size = 0;
  int output_size = 0;
  int margin() const { return (input_size - output_size) / 2; }
};

namespace detail {

// Output size for a square input, or -1 when the size is not admissible
// (a pooling stage would see an odd extent, or a map would vanish).
inline int unet_out_size(int depth, int in) {
  int s = in;
  std::vector<int> skips;
  for (int l = 0; l < depth; ++l) {
    s -= 4;
    if (s < 2 || s % 2 != 0) return -1;
    skips.push_back(s);
    s /= 2;
  }
  s -= 4;  // bottleneck block
  if (s < 1) return -1;
  for (int l = depth - 1; l >= 0; --l) {
    s *= 2;
    if (s > skips[static_cast<size_t>(l)]) return -1;
    s -= 4;
    if (s < 1) return -1;
  }
  return s;
}

inline int hemis_out_size(int in) {
  int s = in - 10;  // two backend convs + three frontend convs, 3x3 valid
  return s >= 1 ? s : -1;
}

}  // namespace detail

inline int model_out_size(const ModelConfig& cfg, int in) {
  return cfg.is_hemis() ? detail::hemis_out_size(in) : detail::unet_out_size(cfg.depth, in);
}

// Enumerates admissible square input sizes up to max_input.
inline std::vector<Geometry> valid_sizes(const ModelConfig& cfg, int max_input) {
  std::vector<Geometry> out;
  for (int in = 1; in <= max_input; ++in) {
    int o = model_out_size(cfg, in);
    if (o > 0) out.push_back(Geometry{in, o});
  }
  return out;
}

inline Geometry geometry_for(const ModelConfig& cfg, int input_size) {
  int o = model_out_size(cfg, input_size);
  if (o > 0) return Geometry{input_size, o};
  // Gather the nearest admissible sizes for the error message.
  std::string near;
  int found = 0;
  for (int d = 1; d < 4096 && found < 4; ++d) {
    for (int cand : {input_size - d, input_size + d}) {
      if (cand < 1) continue;
      int oo = model_out_size(cfg, cand);
      if (oo > 0) {
        if (!near.empty()) near += ", ";
        near += strprintf("%d->%d", cand, oo);
        ++found;
      }
    }
  }
  throw GeometryError(strprintf("input size %d is not admissible for this architecture; "
                                "nearest valid sizes: %s",
                                input_size, near.c_str()));
}

// ---------------------------------------------------------------------------
// Parameter registry and model
// ---------------------------------------------------------------------------

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // optimizer-facing accumulator, same shape
};

namespace detail {

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

template <class T>
class Model {
 public:
  static Model build(const ModelConfig& raw) {
    Model m;
    m.cfg_ = raw.resolved();
    if (m.cfg_.is_hemis())
      m.build_hemis();
    else
      m.build_unet();
    m.init_params();
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  std::vector<Parameter<T>>& params() { return params_; }

  size_t param_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  int index_of(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ContractError("no such parameter: " + name);
    return it->second;
  }

  bool has_param(const std::string& name) const { return by_name_.count(name) != 0; }

  std::vector<NodeId> bind(Tape<T>& t, bool needs_grad) const {
    std::vector<NodeId> ids;
    ids.reserve(params_.size());
    for (const auto& p : params_) ids.push_back(t.leaf(p.value, needs_grad));
    return ids;
  }

  // Builds the forward graph. `input` must be a [K_in, h, w] leaf with an
  // admissible square extent. For HeMIS, `v` selects which backends run;
  // `backend_order` permutes the abstraction input list (diagnostics only).
  NodeId forward(Tape<T>& t, const std::vector<NodeId>& p, NodeId input,
                 const MarkerAvailability& v,
                 const std::vector<int>* backend_order = nullptr) const {
    const Tensor<T>& x = t.value(input);
    if (x.rank() != 3 || x.dim(0) != static_cast<size_t>(cfg_.in_channels()))
      throw DimError(strprintf("forward: expected [%d,h,w] input, got %s", cfg_.in_channels(),
                               shape_str(x.shape).c_str()));
    if (x.dim(1) != x.dim(2))
      throw GeometryError("forward: only square inputs are supported");
    geometry_for(cfg_, static_cast<int>(x.dim(1)));  // throws with nearest sizes
    return cfg_.is_hemis() ? forward_hemis(t, p, input, v, backend_order)
                           : forward_unet(t, p, input, v);
  }

  // Convenience inference: fresh tape, no gradients.
  Tensor<T> infer(const Tensor<T>& input, const MarkerAvailability& v) const {
    Tape<T> t;
    NodeId in = t.leaf(input, false);
    NodeId out = forward(t, bind(t, false), in, v);
    return t.value(out);
  }

  template <class U>
  Model<U> cast() const {
    Model<U> m = Model<U>::build(cfg_);
    for (size_t i = 0; i < params_.size(); ++i)
      m.params()[i].value = params_[i].value.template cast<U>();
    return m;
  }

  // --- ME module inspection (recalibration analysis) ----------------------

  struct MEModuleRef {
    std::string prefix;  // parameter name prefix, e.g. "enc0"
    int level;           // resolution level, 0 = full resolution
    size_t features;
  };

  std::vector<MEModuleRef> me_modules() const { return me_refs_; }

  MEModule<T> me_module(const MEModuleRef& ref) const {
    MEModule<T> m;
    m.w1 = params_[index_of(ref.prefix + ".me.w1")].value;
    m.b1 = params_[index_of(ref.prefix + ".me.b1")].value;
    m.w2 = params_[index_of(ref.prefix + ".me.w2")].value;
    m.b2 = params_[index_of(ref.prefix + ".me.b2")].value;
    m.use_bias = cfg_.me_bias;
    return m;
  }

 private:
  template <class>
  friend class Model;

  ModelConfig cfg_;
  std::vector<Parameter<T>> params_;
  std::map<std::string, int> by_name_;
  std::vector<MEModuleRef> me_refs_;

  void add_param(const std::string& name, std::vector<size_t> shape) {
    if (by_name_.count(name)) throw ContractError("duplicate parameter name: " + name);
    by_name_[name] = static_cast<int>(params_.size());
    Parameter<T> p;
    p.name = name;
    p.value = Tensor<T>::zeros(shape);
    p.grad = Tensor<T>::zeros(shape);
    params_.push_back(std::move(p));
  }

  void add_attention(const std::string& prefix, int level, size_t f) {
    if (cfg_.attention == Attention::SE) {
      add_param(prefix + ".se.w1", {f / 2, f});
      add_param(prefix + ".se.w2", {f, f / 2});
    } else if (cfg_.attention == Attention::ME) {
      size_t hidden = (1u << cfg_.markers) - 1u;
      size_t k = static_cast<size_t>(cfg_.markers);
      add_param(prefix + ".me.w1", {hidden, k});
      add_param(prefix + ".me.b1", {hidden});
      add_param(prefix + ".me.w2", {f, hidden});
      add_param(prefix + ".me.b2", {f});
      me_refs_.push_back({prefix, level, f});
    }
  }

  void build_unet() {
    const int d = cfg_.depth;
    const size_t in_ch = static_cast<size_t>(cfg_.in_channels());
    if (cfg_.attention == Attention::ME && cfg_.placements.input)
      add_attention("att_in", 0, in_ch);
    size_t prev = in_ch;
    for (int l = 0; l < d; ++l) {
      size_t w = static_cast<size_t>(cfg_.width(l));
      std::string pre = "enc" + std::to_string(l);
      add_param(pre + ".conv1.w", {w, prev, 3, 3});
      add_param(pre + ".conv1.b", {w});
      add_param(pre + ".conv2.w", {w, w, 3, 3});
      add_param(pre + ".conv2.b", {w});
      if (cfg_.placements.encoder) add_attention(pre, l, w);
      prev = w;
    }
    size_t wb = static_cast<size_t>(cfg_.width(d));
    add_param("bottleneck.conv1.w", {wb, prev, 3, 3});
    add_param("bottleneck.conv1.b", {wb});
    add_param("bottleneck.conv2.w", {wb, wb, 3, 3});
    add_param("bottleneck.conv2.b", {wb});
    if (cfg_.placements.bottleneck) add_attention("bottleneck", d, wb);
    prev = wb;
    for (int l = d - 1; l >= 0; --l) {
      size_t w = static_cast<size_t>(cfg_.width(l));
      std::string pre = "dec" + std::to_string(l);
      add_param(pre + ".up.w", {prev, w, 2, 2});
      add_param(pre + ".up.b", {w});
      add_param(pre + ".conv1.w", {w, 2 * w, 3, 3});
      add_param(pre + ".conv1.b", {w});
      add_param(pre + ".conv2.w", {w, w, 3, 3});
      add_param(pre + ".conv2.b", {w});
      if (cfg_.placements.decoder) add_attention(pre, l, w);
      prev = w;
    }
    add_param("head.w", {static_cast<size_t>(cfg_.num_classes), prev, 1, 1});
    add_param("head.b", {static_cast<size_t>(cfg_.num_classes)});
  }

  void build_hemis() {
    const size_t fb = static_cast<size_t>(cfg_.base_filters);
    const size_t ff = 2 * fb;
    for (int k = 0; k < cfg_.in_channels(); ++k) {
      std::string pre = "backend" + std::to_string(k);
      add_param(pre + ".conv1.w", {fb, 1, 3, 3});
      add_param(pre + ".conv1.b", {fb});
      add_param(pre + ".conv2.w", {fb, fb, 3, 3});
      add_param(pre + ".conv2.b", {fb});
    }
    add_param("frontend.conv1.w", {ff, 2 * fb, 3, 3});
    add_param("frontend.conv1.b", {ff});
    add_param("frontend.conv2.w", {ff, ff, 3, 3});
    add_param("frontend.conv2.b", {ff});
    add_param("frontend.conv3.w", {ff, ff, 3, 3});
    add_param("frontend.conv3.b", {ff});
    add_param("head.w", {static_cast<size_t>(cfg_.num_classes), ff, 1, 1});
    add_param("head.b", {static_cast<size_t>(cfg_.num_classes)});
  }

  // He-uniform into ReLU, Xavier-uniform into sigmoid/softmax, zero biases.
  // Each tensor draws from a stream keyed by its name so shared layers are
  // bit-identical across variants that differ only in extra modules.
  void init_params() {
    for (auto& p : params_) {
      bool is_bias = p.value.rank() == 1;
      if (is_bias) continue;  // stays zero
      Rng rng = Rng(cfg_.seed).split(detail::fnv1a(p.name));
      size_t fan_in, fan_out;
      if (p.value.rank() == 4) {
        if (p.name.find(".up.") != std::string::npos) {
          // upconv kernel [Cin, Cout, 2, 2]
          fan_in = p.value.dim(0) * 4;
          fan_out = p.value.dim(1) * 4;
        } else {
          fan_in = p.value.dim(1) * p.value.dim(2) * p.value.dim(3);
          fan_out = p.value.dim(0) * p.value.dim(2) * p.value.dim(3);
        }
      } else {  // dense [out, in]
        fan_in = p.value.dim(1);
        fan_out = p.value.dim(0);
      }
      bool feeds_sigmoid = p.name == "head.w" || p.name.find("se.w2") != std::string::npos ||
                           p.name.find("me.w2") != std::string::npos;
      double limit = feeds_sigmoid ? std::sqrt(6.0 / static_cast<double>(fan_in + fan_out))
                                   : std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : p.value.data) v = static_cast<T>(rng.uniform(-limit, limit));
    }
  }

  NodeId conv_block(Tape<T>& t, const std::vector<NodeId>& p, const std::string& pre,
                    NodeId x) const {
    NodeId c1 = relu(t, conv2d_valid(t, x, p[index_of(pre + ".conv1.w")],
                                     p[index_of(pre + ".conv1.b")]));
    return relu(t, conv2d_valid(t, c1, p[index_of(pre + ".conv2.w")],
                                p[index_of(pre + ".conv2.b")]));
  }

  NodeId attention_apply(Tape<T>& t, const std::vector<NodeId>& p, const std::string& pre,
                         NodeId x, const MarkerAvailability& v) const {
    if (cfg_.attention == Attention::SE)
      return se_apply(t, x, p[index_of(pre + ".se.w1")], p[index_of(pre + ".se.w2")]);
    return me_apply(t, x, v, p[index_of(pre + ".me.w1")], p[index_of(pre + ".me.b1")],
                    p[index_of(pre + ".me.w2")], p[index_of(pre + ".me.b2")], cfg_.me_bias);
  }

  NodeId forward_unet(Tape<T>& t, const std::vector<NodeId>& p, NodeId input,
                      const MarkerAvailability& v) const {
    NodeId cur = input;
    if (cfg_.attention == Attention::ME && cfg_.placements.input)
      cur = attention_apply(t, p, "att_in", cur, v);
    std::vector<NodeId> skips;
    for (int l = 0; l < cfg_.depth; ++l) {
      std::string pre = "enc" + std::to_string(l);
      cur = conv_block(t, p, pre, cur);
      if (cfg_.attention != Attention::None && cfg_.placements.encoder)
        cur = attention_apply(t, p, pre, cur, v);
      skips.push_back(cur);
      cur = maxpool2(t, cur);
    }
    cur = conv_block(t, p, "bottleneck", cur);
    if (cfg_.attention != Attention::None && cfg_.placements.bottleneck)
      cur = attention_apply(t, p, "bottleneck", cur, v);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      std::string pre = "dec" + std::to_string(l);
      cur = upconv2(t, cur, p[index_of(pre + ".up.w")], p[index_of(pre + ".up.b")]);
      const Tensor<T>& cv = t.value(cur);
      NodeId skip = crop_center(t, skips[static_cast<size_t>(l)], cv.dim(1), cv.dim(2));
      cur = concat_channels(t, skip, cur);
      cur = conv_block(t, p, pre, cur);
      if (cfg_.attention != Attention::None && cfg_.placements.decoder)
        cur = attention_apply(t, p, pre, cur, v);
    }
    return conv2d_valid(t, cur, p[index_of("head.w")], p[index_of("head.b")]);
  }

  NodeId forward_hemis(Tape<T>& t, const std::vector<NodeId>& p, NodeId input,
                       const MarkerAvailability& v,
                       const std::vector<int>* backend_order) const {
    if (v.empty()) throw ContractError("hemis forward: no available markers");
    std::vector<int> order;
    if (backend_order) {
      order = *backend_order;
    } else {
      for (int m = 1; m <= cfg_.in_channels(); ++m)
        if (v.test(m)) order.push_back(m - 1);
    }
    std::vector<NodeId> features;
    for (int k : order) {
      NodeId xk = slice_channels(t, input, static_cast<size_t>(k), static_cast<size_t>(k) + 1);
      std::string pre = "backend" + std::to_string(k);
      features.push_back(conv_block(t, p, pre, xk));
    }
    NodeId fused = stack_mean_std(t, features);
    NodeId f1 = relu(t, conv2d_valid(t, fused, p[index_of("frontend.conv1.w")],
                                     p[index_of("frontend.conv1.b")]));
    NodeId f2 = relu(t, conv2d_valid(t, f1, p[index_of("frontend.conv2.w")],
                                     p[index_of("frontend.conv2.b")]));
    NodeId f3 = relu(t, conv2d_valid(t, f2, p[index_of("frontend.conv3.w")],
                                     p[index_of("frontend.conv3.b")]));
    return conv2d_valid(t, f3, p[index_of("head.w")], p[index_of("head.b")]);
  }
};

// ---------------------------------------------------------------------------
// Checkpoints: <stem>.meta (text: config + ordered registry + selection
// metadata) and <stem>.weights (raw little-endian f32 in registry order).
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  ModelConfig config;
  double best_val_f1 = 0.0;
  int epoch = 0;
  int target_class = 1;  // 1-based class this model segments
};

inline void save_model_config(std::ostream& os, const ModelConfig& c) {
  os << "variant " << to_string(c.variant) << "\n";
  os << "markers " << c.markers << "\n";
  os << "depth " << c.depth << "\n";
  os << "base_filters " << c.base_filters << "\n";
  os << strprintf("width_multiplier %.17g\n", c.width_multiplier);
  os << "attention " << to_string(c.attention) << "\n";
  os << "placements " << (c.placements.str().empty() ? "-" : c.placements.str()) << "\n";
  os << "me_bias " << (c.me_bias ? 1 : 0) << "\n";
  os << "ub_subset " << c.ub_subset << "\n";
  os << "seed " << c.seed << "\n";
  os << strprintf("r_drop %.17g\n", c.r_drop);
  os << "num_classes " << c.num_classes << "\n";
}

inline void save_checkpoint(const std::string& stem, const Model<float>& model,
                            double best_val_f1, int epoch, int target_class = 1) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint weights are little-endian");
  std::ofstream meta(stem + ".meta");
  if (!meta) throw DataError("cannot write " + stem + ".meta");
  meta << "msme-checkpoint 1\n";
  save_model_config(meta, model.config());
  meta << strprintf("best_val_f1 %.17g\n", best_val_f1);
  meta << "epoch " << epoch << "\n";
  meta << "target_class " << target_class << "\n";
  meta << "params " << model.params().size() << "\n";
  for (const auto& p : model.params()) {
    meta << "param " << p.name;
    for (size_t d : p.value.shape) meta << " " << d;
    meta << "\n";
  }
  std::ofstream w(stem + ".weights", std::ios::binary);
  if (!w) throw DataError("cannot write " + stem + ".weights");
  for (const auto& p : model.params())
    w.write(reinterpret_cast<const char*>(p.value.data.data()),
            static_cast<std::streamsize>(p.value.numel() * sizeof(float)));
}

inline std::pair<Model<float>, CheckpointMeta> load_checkpoint(const std::string& stem) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint weights are little-endian");
  std::ifstream meta(stem + ".meta");
  if (!meta) throw DataError("cannot open " + stem + ".meta");
  std::string magic;
  int version = 0;
  meta >> magic >> version;
  if (magic != "msme-checkpoint" || version != 1)
    throw DataError(stem + ".meta: not a checkpoint file");
  CheckpointMeta cm;
  ModelConfig& c = cm.config;
  std::string key;
  size_t declared_params = 0;
  while (meta >> key) {
    if (key == "variant") { std::string v; meta >> v; c.variant = variant_from_string(v); }
    else if (key == "markers") meta >> c.markers;
    else if (key == "depth") meta >> c.depth;
    else if (key == "base_filters") meta >> c.base_filters;
    else if (key == "width_multiplier") meta >> c.width_multiplier;
    else if (key == "attention") { std::string v; meta >> v; c.attention = attention_from_string(v); }
    else if (key == "placements") {
      std::string v; meta >> v;
      c.placements = (v == "-") ? Placements{false, false, false, false} : Placements::parse(v);
    }
    else if (key == "me_bias") { int v; meta >> v; c.me_bias = v != 0; }
    else if (key == "ub_subset") meta >> c.ub_subset;
    else if (key == "seed") meta >> c.seed;
    else if (key == "r_drop") meta >> c.r_drop;
    else if (key == "num_classes") meta >> c.num_classes;
    else if (key == "best_val_f1") meta >> cm.best_val_f1;
    else if (key == "epoch") meta >> cm.epoch;
    else if (key == "target_class") meta >> cm.target_class;
    else if (key == "params") { meta >> declared_params; }
    else if (key == "param") { std::string line; std::getline(meta, line); }
    else throw DataError(stem + ".meta: unknown key " + key);
  }
  Model<float> model = Model<float>::build(c);
  if (declared_params != model.params().size())
    throw DataError(strprintf("%s.meta: registry declares %zu parameters, config builds %zu",
                              stem.c_str(), declared_params, model.params().size()));
  size_t expected_bytes = model.param_count() * sizeof(float);
  std::ifstream w(stem + ".weights", std::ios::binary | std::ios::ate);
  if (!w) throw DataError("cannot open " + stem + ".weights");
  size_t actual = static_cast<size_t>(w.tellg());
  if (actual != expected_bytes)
    throw DataError(strprintf("%s.weights: expected %zu bytes, found %zu", stem.c_str(),
                              expected_bytes, actual));
  w.seekg(0);
  for (auto& p : model.params())
    w.read(reinterpret_cast<char*>(p.value.data.data()),
           static_cast<std::streamsize>(p.value.numel() * sizeof(float)));
  return {std::move(model), cm};
}

// ---------------------------------------------------------------------------
// Complexity accounting
// ---------------------------------------------------------------------------

struct ComplexityReport {
  size_t parameter_count = 0;
  double forward_ms_median = 0.0;
  size_t peak_bytes_estimate = 0;  // params + forward tape
};

template <class T>
ComplexityReport complexity_report(const Model<T>& model, int input_size, int batches = 20) {
  ComplexityReport rep;
  rep.parameter_count = model.param_count();
  geometry_for(model.config(), input_size);
  Rng rng(1234);
  Tensor<T> x = random_uniform<T>({static_cast<size_t>(model.config().in_channels()),
                                   static_cast<size_t>(input_size),
                                   static_cast<size_t>(input_size)},
                                  rng);
  MarkerAvailability v = MarkerAvailability::all(model.config().in_channels());
  std::vector<double> times;
  for (int i = 0; i < std::max(20, batches); ++i) {
    Tape<T> t;
    auto t0 = std::chrono::steady_clock::now();
    NodeId out = model.forward(t, model.bind(t, false), t.leaf(x, false), v);
    auto t1 = std::chrono::steady_clock::now();
    (void)out;
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    if (i == 0) rep.peak_bytes_estimate = t.bytes() + rep.parameter_count * sizeof(T);
  }
  std::sort(times.begin(), times.end());
  rep.forward_ms_median = times[times.size() / 2];
  return rep;
}

}  // namespace msme
